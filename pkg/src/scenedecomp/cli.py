"""Command-line entry point: gen-data, train, eval, visualize, ablate.

Every subcommand accepts ``--config FILE`` with ``key=value`` lines; keys are
option names with underscores (``batch_size=16``). Flags on the command line
override file values. Exit codes: 0 success, 1 usage error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import logging
import sys
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .datasets import KINDS, DatasetError, GeneratorSpec, generate, images_as_float, load_arrays, save_dataset
from .decoder import reconstruct, to_u8
from .inference import parse_ablation, run_inference
from .training import PRESETS, TrainConfig, build_config, derive_seed, format_config, load_model, parse_config_text, train_loop

log = logging.getLogger("scenedecomp")

EVAL_SLICE = 320

# slot colours for segmentations and tile borders
PALETTE = np.array(
    [
        (230, 25, 75), (60, 180, 75), (255, 225, 25), (0, 130, 200), (245, 130, 48), (145, 30, 180),
        (70, 240, 240), (240, 50, 230), (210, 245, 60), (250, 190, 190), (0, 128, 128), (170, 110, 40),
    ],
    dtype=np.uint8,
)
NEUTRAL = np.array((128, 128, 128), dtype=np.uint8)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# ---------------------------------------------------------------- PPM output

def write_ppm(image: np.ndarray, path) -> Path:
    """Binary P6. Grayscale ``[H, W]`` or ``[H, W, 1]`` is replicated to RGB."""
    img = np.asarray(image)
    if img.dtype != np.uint8:
        raise ValueError(f"write_ppm expects uint8, got {img.dtype}")
    if img.ndim == 2:
        img = img[:, :, None]
    if img.ndim != 3 or img.shape[2] not in (1, 3) or img.shape[0] < 1 or img.shape[1] < 1:
        raise ValueError(f"bad image shape {image.shape}")
    if img.shape[2] == 1:
        img = np.repeat(img, 3, axis=2)
    path = Path(path)
    h, w = img.shape[:2]
    path.write_bytes(f"P6\n{w} {h}\n255\n".encode("ascii") + np.ascontiguousarray(img).tobytes())
    return path


def read_ppm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    fields, pos = [], 0
    while len(fields) < 4:
        while data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        end = pos
        while not data[end : end + 1].isspace():
            end += 1
        fields.append(data[pos:end])
        pos = end
    if fields[0] != b"P6" or int(fields[3]) != 255:
        raise ValueError(f"{path}: not an 8-bit P6 file")
    w, h = int(fields[1]), int(fields[2])
    return np.frombuffer(data[pos + 1 : pos + 1 + w * h * 3], dtype=np.uint8).reshape(h, w, 3)


# ----------------------------------------------------------- figure building

def _rgb(image_chw: np.ndarray) -> np.ndarray:
    """Float ``[C, H, W]`` to u8 ``[H, W, 3]``."""
    img = to_u8(np.moveaxis(image_chw, 0, -1))
    return np.repeat(img, 3, axis=2) if img.shape[2] == 1 else img


def _tile(img: np.ndarray, border: np.ndarray, scale: int) -> np.ndarray:
    img = np.repeat(np.repeat(img, scale, axis=0), scale, axis=1)
    out = np.empty((img.shape[0] + 2, img.shape[1] + 2, 3), dtype=np.uint8)
    out[:] = border
    out[1:-1, 1:-1] = img
    return out


def segmentation_image(masks: np.ndarray) -> np.ndarray:
    """Colour each pixel by its argmax slot; ``masks`` is ``[K, 1, H, W]``."""
    labels = np.argmax(masks[:, 0], axis=0)
    return PALETTE[labels % len(PALETTE)]


def decomposition_strip(x: np.ndarray, means: np.ndarray, masks: np.ndarray, scale: int = 4) -> np.ndarray:
    """input | reconstruction | segmentation | one masked reconstruction per slot."""
    k = masks.shape[0]
    tiles = [
        _tile(_rgb(x), NEUTRAL, scale),
        _tile(_rgb(reconstruct(means, masks)), NEUTRAL, scale),
        _tile(segmentation_image(masks), NEUTRAL, scale),
    ]
    for s in range(k):
        tiles.append(_tile(_rgb(means[s] * masks[s]), PALETTE[s % len(PALETTE)], scale))
    return np.concatenate(tiles, axis=1)


# ------------------------------------------------------------ config plumbing

def _file_tokens(path: str) -> list[str]:
    try:
        values = parse_config_text(Path(path).read_text())
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from exc
    except ValueError as exc:
        raise UsageError(f"{path}: {exc}") from exc
    tokens = []
    for key, value in values.items():
        tokens += [f"--{key.replace('_', '-')}", value]
    return tokens


def _split_config(argv: list[str]) -> tuple[str | None, list[str]]:
    """Pull ``--config FILE`` out of ``argv`` so its values can be parsed first."""
    rest, config = [], None
    i = 0
    while i < len(argv):
        arg = argv[i]
        if arg == "--config":
            if i + 1 >= len(argv):
                raise UsageError("--config needs a file argument")
            config = argv[i + 1]
            i += 2
            continue
        if arg.startswith("--config="):
            config = arg.split("=", 1)[1]
        else:
            rest.append(arg)
        i += 1
    return config, rest


def _snapshot(args: argparse.Namespace, path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = []
    for key, value in sorted(vars(args).items()):
        if key in ("command", "handler", "verbose") or value is None:
            continue
        if isinstance(value, (list, tuple)):
            value = ",".join(str(v) for v in value)
        elif isinstance(value, bool):
            value = "true" if value else "false"
        lines.append(f"{key}={value}")
    path.write_text("\n".join(lines) + "\n")
    return path


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"not a boolean: {text!r}")


def _int_list(text: str) -> list[int]:
    try:
        return [int(p) for p in text.replace(",", " ").split()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected integers, got {text!r}") from exc


def _str_list(text: str) -> list[str]:
    return [p for p in text.replace(",", " ").split() if p]


def _add_train_options(p: argparse.ArgumentParser) -> None:
    p.add_argument("--preset", choices=sorted(PRESETS))
    for f in dataclasses.fields(TrainConfig):
        p.add_argument(f"--{f.name.replace('_', '-')}", dest=f.name, default=None, metavar="VALUE")


def _train_config(args: argparse.Namespace, **forced) -> TrainConfig:
    overrides = {f.name: getattr(args, f.name) for f in dataclasses.fields(TrainConfig) if getattr(args, f.name) is not None}
    overrides.update(forced)
    try:
        return build_config(overrides=overrides, preset=args.preset)
    except (ValueError, TypeError) as exc:
        raise UsageError(str(exc)) from exc


def _eval_data(path: str, offset: int, size: int):
    header, records = load_arrays(path)
    sl = records[offset : offset + size] if size > 0 else records[offset:]
    return header, np.asarray(sl), images_as_float(sl)


def _check_shapes(model_cfg, x: np.ndarray, path: str) -> None:
    d = model_cfg.decoder
    if x.shape[1:] != (d.channels, d.height, d.width):
        raise ad.ShapeError(
            f"{path}: images are {x.shape[1:]} but the checkpoint expects {(d.channels, d.height, d.width)}"
        )


# ------------------------------------------------------------------ commands

def cmd_gen_data(args) -> int:
    if args.kind not in KINDS:
        raise UsageError(f"unknown dataset kind {args.kind!r}; choose from {', '.join(KINDS)}")
    if args.n < 0:
        raise UsageError("--n must be >= 0")
    out = Path(args.out)
    _snapshot(args, out.with_name(out.name + ".config.txt"))
    spec = GeneratorSpec(args.kind, canvas=args.canvas, pieces=args.pieces)
    header, records = generate(spec, args.n, args.seed, workers=args.workers)
    digest = save_dataset(out, header, records)
    counts = np.bincount([r.object_count for r in records], minlength=header.max_objects + 1) if records else []
    summary = [
        f"kind={args.kind}",
        f"records={args.n}",
        f"seed={args.seed}",
        f"size={header.height}x{header.width}x{header.channels}",
        f"max_objects={header.max_objects}",
        "objects_per_image=" + ",".join(f"{i}:{int(c)}" for i, c in enumerate(counts) if c),
        f"sha256={digest}",
    ]
    out.with_name(out.name + ".summary.txt").write_text("\n".join(summary) + "\n")
    print("\n".join(summary))
    return 0


def cmd_train(args) -> int:
    cfg = _train_config(args)

    def progress(rec, ari):
        if rec.step % args.log_every == 0 or ari:
            print(f"step {rec.step} loss {rec.total_loss:.2f} mse {rec.mse:.5f} kl {rec.kl:.2f}"
                  + (f" ari {float(ari):.4f}" if ari else ""), flush=True)

    result = train_loop(cfg, progress)
    print(f"done: {result['steps']} updates, checkpoint {result['checkpoint']}")
    return 0


def cmd_eval(args) -> int:
    from .evaluation import evaluate_batch, mse_kl_curves, quartiles, write_record_csv, write_summary

    out = Path(args.out)
    _snapshot(args, out / "config.txt")
    ablation = _ablation(args.ablation)
    store, model_cfg = load_model(args.checkpoint)
    _, records, x = _eval_data(args.dataset, args.offset, args.size)
    _check_shapes(model_cfg, x, args.dataset)
    rng = np.random.default_rng(derive_seed(args.seed, "eval"))
    metrics = evaluate_batch(store, model_cfg, x, records, args.K, args.T, rng, ablation)
    ids = np.arange(args.offset, args.offset + len(x))
    write_record_csv(out / "records.csv", ids, metrics)
    extra = {"K": args.K, "T": args.T, "checkpoint": str(args.checkpoint), "dataset": str(args.dataset)}
    if args.curves:
        curves = mse_kl_curves(store, model_cfg, x, records, args.K, args.T,
                               np.random.default_rng(derive_seed(args.seed, "eval")), ablation)
        with (out / "curves.csv").open("w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["iteration"] + [f"{m}_{q}" for m in ("ari", "mse", "kl") for q in ("q25", "median", "q75")])
            for t in range(curves.iterations):
                writer.writerow([t + 1] + [repr(float(v)) for m in ("ari", "mse", "kl") for v in curves.summary[m][t]])
    write_summary(out / "summary.json", metrics, extra)
    q = quartiles(metrics["ari"])
    print(f"{len(x)} images  ARI median {q[1]:.4f} (q25 {q[0]:.4f}, q75 {q[2]:.4f})  "
          f"MSE median {np.median(metrics['mse']):.5f}  KL median {np.median(metrics['kl']):.2f}")
    return 0


def cmd_visualize(args) -> int:
    from .evaluation import kl_ranking, latent_traversal, multi_stability_eval

    out = Path(args.out)
    _snapshot(args, out / "config.txt")
    store, model_cfg = load_model(args.checkpoint)
    _, records, x = _eval_data(args.dataset, 0, 0)
    _check_shapes(model_cfg, x, args.dataset)
    kinds = {"decomposition", "iterations", "traversal", "stability"} if "all" in args.figures else set(args.figures)
    unknown = kinds - {"decomposition", "iterations", "traversal", "stability"}
    if unknown:
        raise UsageError(f"unknown figure kind(s): {', '.join(sorted(unknown))}")
    for rid in args.records:
        if not 0 <= rid < len(x):
            raise UsageError(f"record {rid} out of range (dataset has {len(x)})")
        rng = np.random.default_rng([derive_seed(args.seed, "eval"), rid])
        trace = run_inference(x[rid], store, model_cfg, args.K, args.T, rng)
        if "decomposition" in kinds:
            write_ppm(decomposition_strip(x[rid], trace.final_means[0], trace.final_masks[0], args.scale),
                      out / f"decomposition_{rid}.ppm")
        if "iterations" in kinds:
            rows = [decomposition_strip(x[rid], trace.means[t][0], trace.masks[t][0], args.scale) for t in range(args.T)]
            write_ppm(np.concatenate(rows, axis=0), out / f"iterations_{rid}.ppm")
        if "traversal" in kinds:
            mean = trace.final_lambda[0][0]
            dim = args.dim if args.dim >= 0 else int(kl_ranking((mean, trace.final_lambda[1][0]), args.slot)[0])
            trav = latent_traversal(mean, args.slot, dim, store, model_cfg, (args.low, args.high), args.steps)
            tiles = [_tile(_rgb(img), NEUTRAL, args.scale) for img in trav.images]
            write_ppm(np.concatenate(tiles, axis=1), out / f"traversal_{rid}_slot{args.slot}_dim{dim}.ppm")
        if "stability" in kinds:
            res = multi_stability_eval(store, model_cfg, x[rid], args.K, args.T, list(range(args.seeds)))
            rows = []
            for seg in res.segmentations:
                tiles = [_tile(_rgb(x[rid]), NEUTRAL, args.scale), _tile(PALETTE[seg % len(PALETTE)], NEUTRAL, args.scale)]
                rows.append(np.concatenate(tiles, axis=1))
            write_ppm(np.concatenate(rows, axis=0), out / f"stability_{rid}.ppm")
            print(f"record {rid}: {res.mode_count} distinct segmentations over {len(res.seeds)} seeds")
    print(f"wrote figures to {out}")
    return 0


def _ablation(flags) -> frozenset[str]:
    try:
        return parse_ablation([f for f in flags or [] if f != "none"])
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


def cmd_ablate(args) -> int:
    from .evaluation import evaluate_batch

    flags = list(args.flags)
    for flag in flags:
        _ablation([flag])  # reject unknown names before any training
    base = _train_config(args)
    root = Path(base.out_dir)
    root.mkdir(parents=True, exist_ok=True)
    rows = []
    runs = [("baseline", "")] + [(f"run{i + 1}", flag) for i, flag in enumerate(flags)]
    for name, flag in runs:
        ablation = tuple(f for f in (flag,) if f and f != "none")
        cfg = dataclasses.replace(base, out_dir=str(root / name), checkpoint="", metrics="", ablation=ablation,
                                  resume=False)
        result = train_loop(cfg)
        store, model_cfg = load_model(result["checkpoint"])
        _, records, x = _eval_data(cfg.eval_dataset or cfg.dataset, 0, args.final_eval_size)
        rng = np.random.default_rng(derive_seed(cfg.seed, "eval"))
        metrics = evaluate_batch(store, model_cfg, x, records, cfg.K, cfg.T, rng, _ablation(ablation))
        rows.append([name, flag or "none", repr(result["last"].total_loss)] +
                    [repr(float(np.median(metrics[m]))) for m in ("ari", "mse", "kl")])
        print(f"{name} ({flag or 'none'}): loss {result['last'].total_loss:.2f} ARI {float(np.median(metrics['ari'])):.4f}")
    with (root / "ablation.csv").open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["run", "flag", "final_loss", "ari", "mse", "kl"])
        writer.writerows(rows)
    (root / "config.txt").write_text(format_config(base) + f"flags={','.join(flags)}\n")
    return 0


# --------------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="scenedecomp", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", help="generate a dataset file")
    p.add_argument("--kind", required=True, help=", ".join(KINDS))
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--canvas", type=int, default=35, help="tetris canvas size")
    p.add_argument("--pieces", type=int, default=3, help="tetris pieces per image")
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(handler=cmd_gen_data)

    p = sub.add_parser("train", help="train a model")
    _add_train_options(p)
    p.add_argument("--log-every", type=int, default=100)
    p.set_defaults(handler=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint on a dataset slice")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--K", type=int, default=3)
    p.add_argument("--T", type=int, default=5)
    p.add_argument("--size", type=int, default=EVAL_SLICE)
    p.add_argument("--offset", type=int, default=0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--ablation", type=_str_list, default=[])
    p.add_argument("--curves", type=_bool, default=False)
    p.add_argument("--out", required=True)
    p.set_defaults(handler=cmd_eval)

    p = sub.add_parser("visualize", help="write PPM figures")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--records", type=_int_list, default=[0])
    p.add_argument("--figures", type=_str_list, default=["all"])
    p.add_argument("--K", type=int, default=3)
    p.add_argument("--T", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--seeds", type=int, default=16, help="rng streams for the stability figure")
    p.add_argument("--slot", type=int, default=0)
    p.add_argument("--dim", type=int, default=-1, help="latent to traverse; -1 picks the highest-KL one")
    p.add_argument("--low", type=float, default=-2.0)
    p.add_argument("--high", type=float, default=2.0)
    p.add_argument("--steps", type=int, default=7)
    p.add_argument("--scale", type=int, default=4)
    p.add_argument("--out", required=True)
    p.set_defaults(handler=cmd_visualize)

    p = sub.add_parser("ablate", help="train one run per ablated refiner input plus a baseline")
    _add_train_options(p)
    p.add_argument("--flags", type=_str_list, required=True)
    p.add_argument("--final-eval-size", type=int, default=EVAL_SLICE)
    p.set_defaults(handler=cmd_ablate)
    return parser


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        config, rest = _split_config(argv)
        command = next((a for a in rest if not a.startswith("-")), None)
        if config is not None:
            if command is None:
                raise UsageError("--config needs a subcommand")
            idx = rest.index(command)
            rest = rest[: idx + 1] + _file_tokens(config) + rest[idx + 1 :]
        args = parser.parse_args(rest)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.handler(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (ad.NonFiniteError, ad.ShapeError, ad.CheckpointError, DatasetError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
