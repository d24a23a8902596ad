"""Acceptance checks, one test per criterion.

Each test carries a ``criterion`` marker; the summary section at the end of a
pytest run lists one PASS/FAIL line per criterion. Criteria 6, 7 and 10 read
the tetris-mini checkpoints under ``artifacts/tetris-mini`` produced by the
long training run described in the README; without them those criteria fail
rather than pass vacuously.
"""

import hashlib
import subprocess
import sys
import time
from pathlib import Path

import numpy as np
import pytest

from scenedecomp import autodiff as ad
from scenedecomp.autodiff import Graph, Tensor
from scenedecomp.datasets import (
    ambiguous_tetris_fixture,
    generate_multi_dsprites,
    generate_shapes,
    generate_tetris,
    load_dataset,
    save_dataset,
)
from scenedecomp.decoder import mixture_loglik, normalize_masks
from scenedecomp.evaluation import ari, evaluate_batch, ground_truth, mse_kl_curves, multi_stability_eval
from scenedecomp.inference import run_inference
from scenedecomp.training import build_config, load_model, total_loss, train_loop, train_step

import oracles
from toy import K, toy_image, toy_model

ROOT = Path(__file__).resolve().parents[1]
RUN_DIR = ROOT / "artifacts" / "tetris-mini"
FINAL_CKPT = RUN_DIR / "model.ckpt"
EARLY_CKPT = RUN_DIR / "model-step1000.ckpt"
FINAL_STEP = 20_000
HELD_OUT = dict(n=320, seed=2, canvas=20, pieces=2)


def detail(request, text):
    request.node.user_properties.append(("detail", text))


@pytest.fixture(scope="module")
def held_out():
    _, recs = generate_tetris(HELD_OUT["n"], seed=HELD_OUT["seed"], canvas=HELD_OUT["canvas"], pieces=HELD_OUT["pieces"])
    x = np.stack([r.image.transpose(2, 0, 1) for r in recs]).astype(np.float32) / np.float32(255.0)
    return x, recs


def require_checkpoint(path, step=None):
    if not path.exists():
        pytest.fail(f"{path.relative_to(ROOT)} is missing; run the tetris-mini training job first")
    store, cfg = load_model(path)
    if step is not None and store.step != step:
        pytest.fail(f"{path.name} is at step {store.step}, expected {step}")
    return store, cfg


# ---------------------------------------------------------------------- 1


@pytest.mark.criterion(1, "gradient correctness")
def test_gradient_correctness(request):
    """Whole one-iteration model loss at f64; per-op checks live in test_autodiff."""
    cfg, store = toy_model()
    x = toy_image(0)
    params = [t for name, t in store.items() if not name.startswith("ref.")]

    def f():
        trace = run_inference(x, store, cfg, K, 1, np.random.default_rng(7), record_final=False)
        return total_loss(trace, 1)

    start = time.perf_counter()
    err = ad.grad_check(f, params)
    elapsed = time.perf_counter() - start
    n = sum(p.size for p in params)
    detail(request, f"max rel err {err:.2e} over {n} parameters, {elapsed:.0f}s")
    assert err < 1e-4
    assert elapsed < 60


# ---------------------------------------------------------------------- 2


@pytest.mark.criterion(2, "mixture-model invariants")
def test_mixture_invariants(request):
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(100):
        k, c, h, w = rng.integers(1, 8), rng.integers(1, 4), rng.integers(1, 9), rng.integers(1, 9)
        x = rng.uniform(0, 1, size=(c, h, w))
        means = rng.uniform(0, 1, size=(k, c, h, w))
        logits = rng.normal(scale=rng.uniform(0.1, 30), size=(k, 1, h, w))
        worst = max(worst, float(np.abs(normalize_masks(Tensor(logits)).data.sum(axis=0) - 1).max()))
        perm = rng.permutation(k)
        a = mixture_loglik(Tensor(x), Tensor(means), sigma=0.1, mask_logits=Tensor(logits)).total_loglik.item()
        b = mixture_loglik(Tensor(x), Tensor(means[perm]), sigma=0.1, mask_logits=Tensor(logits[perm])).total_loglik.item()
        assert a == b
    detail(request, f"max |sum masks - 1| = {worst:.1e}, permutation exact on 100 instances")
    assert worst < 1e-6


# ---------------------------------------------------------------------- 3


@pytest.mark.criterion(3, "ARI oracle equivalence")
def test_ari_oracle(request):
    start = time.perf_counter()
    pairs = 0
    for n in range(2, 7):
        parts = list(oracles.set_partitions(n))
        for a in parts:
            assert ari(a, a) == 1.0
            for b in parts:
                assert abs(ari(a, b) - oracles.rand_index_pairs(a, b)) < 1e-12
                pairs += 1
    rng = np.random.default_rng(0)
    relabel = rng.permutation(6)
    a, b = rng.integers(0, 6, 500), rng.integers(0, 4, 500)
    assert abs(ari(relabel[a], b) - ari(a, b)) < 1e-12
    chance = np.array([ari(rng.integers(0, 5, 10_000), rng.integers(0, 5, 10_000)) for _ in range(100)])
    elapsed = time.perf_counter() - start
    detail(request, f"{pairs} partition pairs match; chance max |ARI| {np.abs(chance).max():.4f}, {elapsed:.0f}s")
    assert np.all(np.abs(chance) < 0.05)
    assert elapsed < 60


# ---------------------------------------------------------------------- 4


@pytest.mark.criterion(4, "stop-gradient policy")
def test_stop_gradient_policy(request):
    cfg, store = toy_model()
    x = toy_image(1)
    probe = [store["ref.head.w"], store["ref.head.b"], store["ref.mlp.b"], store["init.lambda"]]

    def objective(frozen=None):
        def f():
            trace = run_inference(x, store, cfg, K, 2, np.random.default_rng(3), record_final=False,
                                  frozen_stopped=frozen)
            return total_loss(trace, 2)
        return f

    with Graph() as g:
        trace = run_inference(x, store, cfg, K, 2, np.random.default_rng(3), record_final=False)
        loss = total_loss(trace, 2)
    try:
        analytic = g.grad(loss, probe)
    finally:
        g.release()
    frozen = [{k: v.copy() for k, v in s.items()} for s in trace.stopped]
    surrogate = [ad.numerical_grad(objective(frozen), p) for p in probe]
    full = [ad.numerical_grad(objective(), p) for p in probe]
    err_sur = max(ad.rel_error(a, n, 1e-6) for a, n in zip(analytic, surrogate))
    # the double-derivative terms dropped by the policy show up as a gap to the true objective
    gap = max(float(np.abs(a - n).max() / np.abs(n).max()) for a, n in zip(analytic, full))
    detail(request, f"vs surrogate FD rel err {err_sur:.1e}; vs unfrozen FD relative gap {gap:.2e}")
    assert err_sur < 1e-4
    assert gap > 1e-3


# ---------------------------------------------------------------------- 5


@pytest.mark.criterion(5, "overfit smoke test")
def test_overfit(request):
    _, recs = generate_tetris(4, seed=5, canvas=20, pieces=2)
    x = np.stack([r.image.transpose(2, 0, 1) for r in recs]).astype(np.float32) / np.float32(255.0)
    cfg = build_config(overrides={"batch_size": "4"}, preset="tetris-mini")
    model_cfg = cfg.model_config(20, 20, 3)
    from scenedecomp.inference import init_params

    store = init_params(model_cfg, np.random.default_rng(0))
    start = time.perf_counter()
    losses = [train_step(x, store, model_cfg, cfg, np.random.default_rng([0, s])).total_loss for s in range(500)]
    elapsed = time.perf_counter() - start
    early = float(np.mean(losses[:10]))
    late = float(np.mean(losses[-10:]))
    detail(request, f"loss {early:.1f} (steps 1-10 mean) -> {late:.1f} (steps 491-500 mean), "
                    f"{100 * (1 - late / early):.1f}% reduction, {elapsed:.0f}s")
    assert late <= 0.5 * early
    assert elapsed < 600


# ---------------------------------------------------------------------- 6


@pytest.mark.criterion(6, "desk-scale segmentation")
def test_desk_scale_segmentation(request, held_out):
    x, recs = held_out
    store, cfg = require_checkpoint(FINAL_CKPT, FINAL_STEP)
    early, _ = require_checkpoint(EARLY_CKPT, 1000)
    final = np.median(evaluate_batch(store, cfg, x, recs, 3, 5, np.random.default_rng(0))["ari"])
    first = np.median(evaluate_batch(early, cfg, x, recs, 3, 5, np.random.default_rng(0))["ari"])
    detail(request, f"median fg ARI {final:.3f} at 20k vs {first:.3f} at 1k on 320 held-out images")
    assert final >= 0.6
    assert final > first


# ---------------------------------------------------------------------- 7


@pytest.mark.criterion(7, "test-time K and T generalization")
def test_test_time_generalization(request, held_out):
    x, recs = held_out
    store, cfg = require_checkpoint(FINAL_CKPT)
    t_train, k_train = 5, 3
    wide = evaluate_batch(store, cfg, x[:32], recs[:32], k_train + 2, 3 * t_train, np.random.default_rng(0))
    assert all(np.all(np.isfinite(v)) for v in wide.values())
    curves = mse_kl_curves(store, cfg, x, recs, k_train, 2 * t_train, np.random.default_rng(0))
    at_1, at_2t = curves.median("ari")[0], curves.median("ari")[-1]
    detail(request, f"K={k_train + 2}, T={3 * t_train} ran (median ARI {np.median(wide['ari']):.3f}); "
                    f"median ARI T=1 {at_1:.3f}, T={2 * t_train} {at_2t:.3f} (step {store.step})")
    assert at_2t >= at_1


# ---------------------------------------------------------------------- 8


DATASET_SCRIPT = """
import hashlib, sys
from scenedecomp.datasets import generate_tetris, save_dataset
h, r = generate_tetris(200, seed=21, canvas=20, pieces=2, workers=int(sys.argv[1]))
print(save_dataset(sys.argv[2], h, r))
"""


@pytest.mark.criterion(8, "determinism")
def test_determinism(request, tmp_path):
    start = time.perf_counter()
    train, test = tmp_path / "train.bin", tmp_path / "test.bin"
    save_dataset(train, *generate_tetris(64, seed=1, canvas=20, pieces=2))
    save_dataset(test, *generate_tetris(8, seed=2, canvas=20, pieces=2))
    small = dict(K="2", T="2", latent_dim="8", batch_size="4", dec_hidden="8,8", ref_channels="8,8",
                 ref_strides="1,2", mlp_hidden="16", eval_every="50", eval_size="8", checkpoint_every="0",
                 wall_clock="false", total_updates="100", dataset=str(train), eval_dataset=str(test))
    csvs = []
    for name in ("a", "b"):
        cfg = build_config(overrides=dict(small, out_dir=str(tmp_path / name)))
        train_loop(cfg)
        csvs.append(cfg.metrics_path.read_bytes())
    assert csvs[0] == csvs[1]
    assert csvs[0].count(b"\n") == 101

    digests = set()
    for workers in (1, 2):
        for run in range(2):
            out = tmp_path / f"d{workers}{run}.bin"
            proc = subprocess.run([sys.executable, "-c", DATASET_SCRIPT, str(workers), str(out)],
                                  capture_output=True, text=True, check=True)
            digests.add(proc.stdout.strip())
            digests.add(hashlib.sha256(out.read_bytes()).hexdigest())
    elapsed = time.perf_counter() - start
    detail(request, f"100-step metrics CSV identical; 4 dataset runs (serial/parallel, separate processes) "
                    f"give {len(digests)} digest; {elapsed:.0f}s")
    assert len(digests) == 1
    assert elapsed < 300


# ---------------------------------------------------------------------- 9


@pytest.mark.criterion(9, "dataset integrity")
def test_dataset_integrity(request, tmp_path):
    start = time.perf_counter()
    kinds = {
        "tetris": lambda: generate_tetris(1000, seed=31),
        "multi-dsprites": lambda: generate_multi_dsprites(1000, seed=32),
        "multi-dsprites-bin": lambda: generate_multi_dsprites(1000, seed=33, binarized=True),
        "shapes": lambda: generate_shapes(1000, seed=34),
    }
    for kind, make in kinds.items():
        header, recs = make()
        assert len(recs) == 1000
        for rec in recs:
            layers = np.concatenate([rec.masks, rec.background_mask[None]]) > 0
            assert np.all(layers.sum(axis=0) == 1), kind
            if kind == "tetris":
                assert rec.image.any(axis=-1).sum() == rec.object_count * 100
        path = tmp_path / f"{kind}.bin"
        save_dataset(path, header, recs)
        assert list(load_dataset(path)) == recs
        again = tmp_path / f"{kind}-again.bin"
        save_dataset(again, header, list(load_dataset(path)))
        assert again.read_bytes() == path.read_bytes()
    elapsed = time.perf_counter() - start
    detail(request, f"4 kinds x 1000 records partition exactly, tetris fg = pieces x 100, bitwise round trip, {elapsed:.0f}s")
    assert elapsed < 300


# --------------------------------------------------------------------- 10


@pytest.mark.criterion(10, "multi-stability harness")
def test_multi_stability(request, capsys):
    store, cfg = require_checkpoint(FINAL_CKPT)
    rec = ambiguous_tetris_fixture(20)
    image = rec.image.transpose(2, 0, 1).astype(np.float32) / np.float32(255.0)
    fg, _ = ground_truth(rec)
    det = multi_stability_eval(store, cfg, image, 3, 5, 16, deterministic=True, foreground=fg)
    assert det.mode_count == 1
    sampled = multi_stability_eval(store, cfg, image, 3, 5, 16, foreground=fg)
    with capsys.disabled():
        print(f"\nmulti-stability on the ambiguous fixture (step {store.step}):")
        for seed, mode, seg in zip(sampled.seeds, sampled.mode_of_seed, sampled.segmentations):
            sizes = np.unique(seg[fg], return_counts=True)[1]
            print(f"  seed {seed:2d}: mode {mode}, foreground group sizes {sizes.tolist()}")
    # the sampled mode count is reported, not asserted
    detail(request, f"sigma_z=0 gives 1 mode over 16 seeds; sampling gives {sampled.mode_count} mode(s) over 16 seeds")
