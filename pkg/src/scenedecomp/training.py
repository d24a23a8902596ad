"""End-to-end training through the unrolled inference iterations."""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Graph, ParamStore
from .datasets import images_as_float, load_arrays
from .decoder import DecoderConfig, reconstruct
from .inference import InferenceTrace, ModelConfig, RefinerConfig, init_params, parse_ablation, run_inference

log = logging.getLogger(__name__)

METRICS_HEADER = ("step", "total_loss", "mse", "kl", "ari", "seconds")


def derive_seed(seed: int, label: str) -> int:
    """Sub-seed for a labelled purpose ("data", "init", "train", "eval", ...)."""
    digest = hashlib.blake2b(f"{int(seed)}:{label}".encode(), digest_size=8).digest()
    return int.from_bytes(digest, "little")


@dataclass
class TrainConfig:
    dataset: str = ""
    eval_dataset: str = ""
    out_dir: str = "runs/default"
    checkpoint: str = ""
    metrics: str = ""
    K: int = 3
    T: int = 5
    latent_dim: int = 32
    batch_size: int = 16
    lr: float = 0.0003
    max_norm: float = 5.0
    total_updates: int = 20000
    sigma: float = 0.1
    seed: int = 0
    ablation: tuple[str, ...] = ()
    dec_hidden: tuple[int, ...] = (32, 32, 32)
    dec_kernel: int = 3
    ref_channels: tuple[int, ...] = (32, 32, 32)
    ref_kernel: int = 3
    ref_strides: tuple[int, ...] = (1, 1, 1)
    mlp_hidden: int = 128
    lstm_hidden: int = 0
    eval_every: int = 1000
    eval_size: int = 64
    checkpoint_every: int = 1000
    keep_steps: tuple[int, ...] = ()
    wall_clock: bool = True
    resume: bool = False

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.T < 1:
            raise ValueError("T must be >= 1")
        if self.K < 1:
            raise ValueError("K must be >= 1")
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if not self.max_norm > 0:
            raise ValueError("max_norm must be positive")

    @property
    def checkpoint_path(self) -> Path:
        return Path(self.checkpoint) if self.checkpoint else Path(self.out_dir) / "model.ckpt"

    def snapshot_path(self, step: int) -> Path:
        path = self.checkpoint_path
        return path.with_name(f"{path.stem}-step{step}{path.suffix}")

    @property
    def metrics_path(self) -> Path:
        return Path(self.metrics) if self.metrics else Path(self.out_dir) / "metrics.csv"

    def model_config(self, height: int, width: int, channels: int) -> ModelConfig:
        return ModelConfig(
            decoder=DecoderConfig(
                latent_dim=self.latent_dim,
                height=height,
                width=width,
                channels=channels,
                hidden=tuple(self.dec_hidden),
                kernel=self.dec_kernel,
                sigma=self.sigma,
            ),
            refiner=RefinerConfig(
                conv_channels=tuple(self.ref_channels),
                kernel=self.ref_kernel,
                strides=tuple(self.ref_strides),
                mlp_hidden=self.mlp_hidden,
                lstm_hidden=self.lstm_hidden,
            ),
        )


PRESETS: dict[str, dict] = {
    # 35x35 Tetris model as trained at full scale (refiner without an LSTM)
    "tetris-paper": dict(
        K=4, T=5, latent_dim=64, batch_size=32, lr=0.0003, max_norm=5.0, sigma=0.1,
        total_updates=1_000_000, dec_hidden=(32, 32, 32, 32), dec_kernel=5,
        ref_channels=(32, 32, 32), ref_kernel=5, ref_strides=(1, 1, 1),
        mlp_hidden=128, lstm_hidden=0,
    ),
    # desk-scale regime: 20x20 canvas, 2 pieces
    "tetris-mini": dict(
        K=3, T=5, latent_dim=32, batch_size=16, lr=0.0003, max_norm=5.0, sigma=0.1,
        total_updates=20_000, dec_hidden=(32, 32, 32), dec_kernel=3,
        ref_channels=(32, 32, 32), ref_kernel=3, ref_strides=(1, 2, 2),
        mlp_hidden=128, lstm_hidden=0,
    ),
}

# dataset generator parameters that go with each preset
PRESET_DATA = {"tetris-paper": dict(canvas=35, pieces=3), "tetris-mini": dict(canvas=20, pieces=2)}


# ------------------------------------------------------------------ config io

def _coerce(kind, raw: str, key: str):
    text = raw.strip()
    try:
        if kind in ("int", int):
            return int(text)
        if kind in ("float", float):
            return float(text)
        if kind in ("bool", bool):
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if kind in ("str", str):
            return text
        if "tuple[int" in str(kind):
            return tuple(int(p) for p in text.replace(",", " ").split())
        if "tuple[str" in str(kind):
            return tuple(p for p in text.replace(",", " ").split())
    except ValueError as exc:
        raise ValueError(f"config key {key!r}: cannot parse {raw!r}") from exc
    raise ValueError(f"config key {key!r}: unsupported type {kind}")


def parse_config_text(text: str) -> dict[str, str]:
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line {lineno}: expected key=value, got {line!r}")
        key, value = line.split("=", 1)
        values[key.strip()] = value.strip()
    return values


def build_config(base: dict | None = None, overrides: dict[str, str] | None = None, preset: str | None = None) -> TrainConfig:
    """Preset < file values < overrides; unknown keys are errors naming the key."""
    types = {f.name: f.type for f in dataclasses.fields(TrainConfig)}
    values: dict = {}
    if preset:
        if preset not in PRESETS:
            raise ValueError(f"unknown preset {preset!r}; choose from {', '.join(PRESETS)}")
        values.update(PRESETS[preset])
    for source in (base or {}, overrides or {}):
        for key, raw in source.items():
            if key not in types:
                raise ValueError(f"unknown config key {key!r}")
            values[key] = _coerce(types[key], raw, key) if isinstance(raw, str) else raw
    return TrainConfig(**values)


def format_config(cfg: TrainConfig) -> str:
    lines = []
    for f in dataclasses.fields(cfg):
        value = getattr(cfg, f.name)
        if isinstance(value, tuple):
            value = ",".join(str(v) for v in value)
        elif isinstance(value, bool):
            value = "true" if value else "false"
        lines.append(f"{f.name}={value}")
    return "\n".join(lines) + "\n"


# ------------------------------------------------------------ checkpoint glue

def arch_extras(model_cfg: ModelConfig) -> dict[str, float]:
    d, r = model_cfg.decoder, model_cfg.refiner
    extra = {
        "arch.height": d.height,
        "arch.width": d.width,
        "arch.channels": d.channels,
        "arch.latent_dim": d.latent_dim,
        "arch.dec_kernel": d.kernel,
        "arch.sigma": d.sigma,
        "arch.ref_kernel": r.kernel,
        "arch.mlp_hidden": r.mlp_hidden,
        "arch.lstm_hidden": r.lstm_hidden,
    }
    for i, s in enumerate(r.strides):
        extra[f"arch.ref_stride.{i}"] = s
    return extra


def model_config_from_checkpoint(store: ParamStore, extra: dict[str, float]) -> ModelConfig:
    dec_layers = sorted(int(n.split(".")[1][4:]) for n in store if n.startswith("dec.conv") and n.endswith(".w"))
    ref_layers = sorted(int(n.split(".")[1][4:]) for n in store if n.startswith("ref.conv") and n.endswith(".w"))
    dec_hidden = tuple(store[f"dec.conv{i}.w"].shape[0] for i in dec_layers[:-1])
    ref_channels = tuple(store[f"ref.conv{i}.w"].shape[0] for i in ref_layers)
    strides = tuple(int(extra.get(f"arch.ref_stride.{i}", 1)) for i in ref_layers)
    return ModelConfig(
        decoder=DecoderConfig(
            latent_dim=int(extra["arch.latent_dim"]),
            height=int(extra["arch.height"]),
            width=int(extra["arch.width"]),
            channels=int(extra["arch.channels"]),
            hidden=dec_hidden,
            kernel=int(extra["arch.dec_kernel"]),
            sigma=float(f"{extra['arch.sigma']:.7g}"),
        ),
        refiner=RefinerConfig(
            conv_channels=ref_channels,
            kernel=int(extra["arch.ref_kernel"]),
            strides=strides,
            mlp_hidden=int(extra["arch.mlp_hidden"]),
            lstm_hidden=int(extra["arch.lstm_hidden"]),
        ),
    )


def save_model(path, store: ParamStore, model_cfg: ModelConfig) -> None:
    ad.save_checkpoint(path, store, arch_extras(model_cfg))


def load_model(path, dtype=np.float32) -> tuple[ParamStore, ModelConfig]:
    store, extra = ad.load_checkpoint(path, dtype)
    return store, model_config_from_checkpoint(store, extra)


# ------------------------------------------------------------------ training

@dataclass
class TrainRecord:
    step: int
    total_loss: float
    mse: float
    kl: float
    seconds: float
    grad_norm: float = field(default=0.0, repr=False)

    def __post_init__(self):
        for name in ("total_loss", "mse", "kl"):
            if not math.isfinite(getattr(self, name)):
                raise ad.NonFiniteError(f"{name} is not finite at step {self.step}")


def total_loss(trace: InferenceTrace, t_steps: int):
    """sum_t (t / T) * mean_batch L^(t)."""
    if len(trace.losses) != t_steps:
        raise ValueError(f"trace has {len(trace.losses)} loss terms, expected {t_steps}")
    total = None
    for t, loss in enumerate(trace.losses, start=1):
        term = ad.mul(ad.tmean(loss), t / t_steps)
        total = term if total is None else ad.add(total, term)
    return total


def final_mse(trace: InferenceTrace, x: np.ndarray) -> float:
    recon = reconstruct(trace.means[-1], trace.masks[-1])
    return float(np.mean((recon - x.reshape(recon.shape)) ** 2))


def train_step(
    x: np.ndarray,
    store: ParamStore,
    model_cfg: ModelConfig,
    cfg: TrainConfig,
    rng: np.random.Generator,
    ablation: frozenset[str] = frozenset(),
) -> TrainRecord:
    """Forward T iterations, one backward pass, clip, Adam. Params change only
    if the loss and every gradient are finite."""
    start = time.perf_counter()
    store.zero_grad()
    with Graph() as graph:
        trace = run_inference(x, store, model_cfg, cfg.K, cfg.T, rng, ablation, record_final=False)
        loss = total_loss(trace, cfg.T)
    if not np.isfinite(loss.data):
        raise ad.NonFiniteError(f"non-finite total loss at step {store.step + 1}")
    try:
        graph.backward(loss)
    finally:
        graph.release()
    grads = store.grads()
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise ad.NonFiniteError(f"non-finite gradient for {name} at step {store.step + 1}")
    norm = ad.global_norm(grads)
    ad.clip_global_norm(grads, cfg.max_norm)
    ad.adam_step(store, grads, cfg.lr)
    store.zero_grad()
    return TrainRecord(
        step=store.step,
        total_loss=float(loss.data),
        mse=final_mse(trace, x),
        kl=float(np.mean(trace.kl[-1].data)),
        seconds=time.perf_counter() - start,
        grad_norm=norm,
    )


class BatchSampler:
    """Shuffled minibatches; batch ``step`` depends only on (seed, step)."""

    def __init__(self, n: int, batch_size: int, seed: int):
        if n < 1:
            raise ValueError("empty training set")
        self.n = n
        self.batch_size = min(batch_size, n)
        self.seed = seed
        self.per_epoch = max(n // self.batch_size, 1)
        self._epoch = -1
        self._perm = None

    def indices(self, step: int) -> np.ndarray:
        epoch, pos = divmod(step, self.per_epoch)
        if epoch != self._epoch:
            self._perm = np.random.default_rng([self.seed, epoch]).permutation(self.n)
            self._epoch = epoch
        sel = self._perm[pos * self.batch_size : (pos + 1) * self.batch_size]
        return np.sort(sel)


def step_rng(seed: int, step: int) -> np.random.Generator:
    return np.random.default_rng([derive_seed(seed, "train"), step])


def load_training_data(cfg: TrainConfig) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Returns (train images, eval images, eval records)."""
    header, records = load_arrays(cfg.dataset)
    if cfg.eval_dataset:
        _, eval_records = load_arrays(cfg.eval_dataset)
        train_records = records
    else:
        hold = min(cfg.eval_size, max(len(records) - 1, 0))
        train_records, eval_records = records[: len(records) - hold], records[len(records) - hold :]
    eval_records = eval_records[: cfg.eval_size]
    return images_as_float(train_records), images_as_float(eval_records), np.asarray(eval_records)


def write_snapshot(cfg: TrainConfig, path: Path | None = None) -> Path:
    path = path or Path(cfg.out_dir) / "config.txt"
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(format_config(cfg))
    return path


def train_loop(cfg: TrainConfig, progress=None) -> dict:
    """Train per ``cfg``: CSV row per step, periodic eval and checkpoints.

    Returns a small summary dict. On a non-finite loss the last good
    parameters are written to the checkpoint and the error is re-raised.
    """
    from .evaluation import evaluate_batch

    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_snapshot(cfg)
    train_x, eval_x, eval_records = load_training_data(cfg)
    _, c, h, w = train_x.shape
    model_cfg = cfg.model_config(h, w, c)
    ablation = parse_ablation(cfg.ablation)

    ckpt = cfg.checkpoint_path
    if cfg.resume and ckpt.exists():
        store, loaded_cfg = load_model(ckpt)
        if loaded_cfg != model_cfg:
            raise ValueError(f"{ckpt}: checkpoint architecture does not match config")
    else:
        store = init_params(model_cfg, np.random.default_rng(derive_seed(cfg.seed, "init")))

    metrics_path = cfg.metrics_path
    fresh = not (cfg.resume and metrics_path.exists() and store.step > 0)
    if fresh:
        with open(metrics_path, "w", newline="") as fh:
            csv.writer(fh).writerow(METRICS_HEADER)
    sampler = BatchSampler(len(train_x), cfg.batch_size, derive_seed(cfg.seed, "batches"))
    last = None
    eval_rng_seed = derive_seed(cfg.seed, "eval")
    with open(metrics_path, "a", newline="") as fh:
        writer = csv.writer(fh)
        while store.step < cfg.total_updates:
            step = store.step
            batch = train_x[sampler.indices(step)]
            try:
                rec = train_step(batch, store, model_cfg, cfg, step_rng(cfg.seed, step), ablation)
            except ad.NonFiniteError:
                save_model(ckpt, store, model_cfg)
                log.error("non-finite values at step %d; kept last good checkpoint %s", step + 1, ckpt)
                raise
            ari = ""
            if cfg.eval_every and (rec.step % cfg.eval_every == 0 or rec.step == cfg.total_updates) and len(eval_x):
                summary = evaluate_batch(store, model_cfg, eval_x, eval_records, cfg.K, cfg.T,
                                         np.random.default_rng(eval_rng_seed), ablation)
                ari = _fmt(float(np.median(summary["ari"])))
            seconds = rec.seconds if cfg.wall_clock else 0.0
            writer.writerow([rec.step, _fmt(rec.total_loss), _fmt(rec.mse), _fmt(rec.kl), ari, _fmt(seconds)])
            fh.flush()
            if cfg.checkpoint_every and rec.step % cfg.checkpoint_every == 0:
                save_model(ckpt, store, model_cfg)
            if rec.step in cfg.keep_steps:
                save_model(cfg.snapshot_path(rec.step), store, model_cfg)
            if progress is not None:
                progress(rec, ari)
            last = rec
    save_model(ckpt, store, model_cfg)
    return {"steps": store.step, "last": last, "checkpoint": str(ckpt), "metrics": str(metrics_path)}


def _fmt(v: float) -> str:
    return repr(float(v))
