"""Segmentation metrics, per-iteration curves, probes and latent analyses."""

from __future__ import annotations

import csv
import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import ParamStore, Tensor
from .datasets import SceneRecord
from .decoder import SLOT_AXIS, decode, normalize_masks, reconstruct
from .inference import ModelConfig, PosteriorParams, kl_to_prior, run_inference

EVAL_CHUNK = 32


def _comb2(n: np.ndarray) -> np.ndarray:
    n = np.asarray(n, dtype=np.float64)
    return n * (n - 1.0) / 2.0


def ari(pred, truth) -> float:
    """Adjusted Rand index of two labelings of the same points.

    Returns 1 when the adjustment is undefined (both partitions trivial and
    equal, e.g. everything in one cluster).
    """
    pred = np.asarray(pred).ravel()
    truth = np.asarray(truth).ravel()
    if pred.size == 0:
        raise ValueError("ari needs at least one point")
    if pred.shape != truth.shape:
        raise ValueError(f"labelings differ in length: {pred.size} vs {truth.size}")
    _, p = np.unique(pred, return_inverse=True)
    _, t = np.unique(truth, return_inverse=True)
    table = np.bincount(p * (t.max() + 1) + t, minlength=(p.max() + 1) * (t.max() + 1))
    index = _comb2(table).sum()
    rows = _comb2(np.bincount(p)).sum()
    cols = _comb2(np.bincount(t)).sum()
    total = _comb2(pred.size)
    expected = rows * cols / total if total > 0 else 0.0
    best = (rows + cols) / 2.0
    if best == expected:
        return 1.0
    return float((index - expected) / (best - expected))


def ground_truth(record: SceneRecord | np.void) -> tuple[np.ndarray, np.ndarray]:
    """(foreground bool [H, W], object id per pixel [H, W]) from the record masks.

    Accepts a :class:`SceneRecord` or a row of :func:`datasets.load_arrays`.
    """
    if isinstance(record, SceneRecord):
        masks, count = record.masks, record.object_count
    else:
        masks, count = record["masks"], int(record["count"])
    masks = masks[:count] > 0
    fg = masks.any(axis=0)
    return fg, np.argmax(masks, axis=0)


def slot_labels(masks: np.ndarray) -> np.ndarray:
    """Per-pixel argmax over the slot axis of ``[..., K, 1, H, W]`` masks.

    ``np.argmax`` returns the first maximum, so ties go to the lowest slot.
    """
    return np.argmax(masks, axis=SLOT_AXIS)[..., 0, :, :]


def segmentation_from_trace(trace, foreground: np.ndarray, index: int = 0, masks: np.ndarray | None = None) -> np.ndarray:
    """Predicted labels of the foreground pixels of one image in ``trace``."""
    if masks is None:
        if trace.final_masks is None:
            raise ValueError("trace has no final masks; run inference with record_final=True")
        masks = trace.final_masks
    if masks.ndim == 5:
        masks = masks[index]
    return slot_labels(masks)[np.asarray(foreground, dtype=bool)]


def foreground_ari(masks: np.ndarray, record: SceneRecord) -> float:
    fg, truth = ground_truth(record)
    return ari(slot_labels(masks)[fg], truth[fg])


def _posterior_decode(mean: np.ndarray, store: ParamStore, model_cfg: ModelConfig) -> tuple[np.ndarray, np.ndarray]:
    with ad.untracked():
        dec = decode(Tensor(mean), store, model_cfg.decoder)
        masks = normalize_masks(dec.mask_logits)
    return dec.means.data, masks.data


def posterior_metrics(
    x: np.ndarray,
    lam: tuple[np.ndarray, np.ndarray],
    records: Sequence[SceneRecord],
    store: ParamStore,
    model_cfg: ModelConfig,
) -> dict[str, np.ndarray]:
    """ARI / MSE / KL per image for the posterior ``lam`` = (mean, raw_scale), decoded at its mean."""
    mean, raw = lam
    means, masks = _posterior_decode(mean, store, model_cfg)
    recon = reconstruct(means, masks)
    mse = np.mean((recon - x) ** 2, axis=(-3, -2, -1))
    with ad.untracked():
        kl = kl_to_prior(PosteriorParams(Tensor(mean), Tensor(raw))).data
    scores = np.array([foreground_ari(masks[i], rec) for i, rec in enumerate(records)])
    return {"ari": scores, "mse": mse.astype(np.float64), "kl": kl.astype(np.float64)}


def _chunks(n: int, size: int = EVAL_CHUNK):
    for start in range(0, n, size):
        yield slice(start, min(start + size, n))


def evaluate_batch(
    store: ParamStore,
    model_cfg: ModelConfig,
    x: np.ndarray,
    records: Sequence[SceneRecord],
    k: int,
    t_steps: int,
    rng: np.random.Generator | None,
    ablation: frozenset[str] = frozenset(),
) -> dict[str, np.ndarray]:
    """Run inference on ``x`` and score the final posterior (decoded at its mean)."""
    if len(records) != len(x):
        raise ValueError(f"{len(x)} images but {len(records)} records")
    parts: dict[str, list[np.ndarray]] = {"ari": [], "mse": [], "kl": [], "loss": []}
    for sl in _chunks(len(x)):
        trace = run_inference(x[sl], store, model_cfg, k, t_steps, rng, ablation)
        metrics = posterior_metrics(x[sl], trace.final_lambda, records[sl], store, model_cfg)
        metrics["loss"] = trace.loss_values()[-1].astype(np.float64)
        for key in parts:
            parts[key].append(metrics[key])
    return {key: np.concatenate(v) if v else np.zeros(0) for key, v in parts.items()}


def quartiles(values: np.ndarray, axis: int = -1) -> np.ndarray:
    """(25th, median, 75th) percentiles stacked on the last axis."""
    return np.stack([np.percentile(values, q, axis=axis) for q in (25, 50, 75)], axis=-1)


@dataclass
class Curves:
    """Per-iteration metrics: ``raw[name]`` is ``[T, N]``, ``summary[name]`` is ``[T, 3]``."""

    raw: dict[str, np.ndarray]
    summary: dict[str, np.ndarray] = field(init=False)

    def __post_init__(self):
        self.summary = {k: quartiles(v, axis=1) for k, v in self.raw.items()}

    @property
    def iterations(self) -> int:
        return next(iter(self.raw.values())).shape[0]

    def median(self, name: str) -> np.ndarray:
        return self.summary[name][:, 1]


def mse_kl_curves(
    store: ParamStore,
    model_cfg: ModelConfig,
    x: np.ndarray,
    records: Sequence[SceneRecord],
    k: int,
    t_steps: int,
    rng: np.random.Generator | None,
    ablation: frozenset[str] = frozenset(),
) -> Curves:
    """Metrics of the posterior after each of ``t_steps`` refinements.

    Entry ``t`` scores the posterior produced by refinement ``t + 1``, so the
    last row matches :func:`evaluate_batch` at the same settings.
    """
    rows: dict[str, list[list[np.ndarray]]] = {"ari": [], "mse": [], "kl": []}
    for sl in _chunks(len(x)):
        trace = run_inference(x[sl], store, model_cfg, k, t_steps, rng, ablation)
        posteriors = trace.lambdas[1:] + [trace.final_lambda]
        per_t = [posterior_metrics(x[sl], lam, records[sl], store, model_cfg) for lam in posteriors]
        for key in rows:
            rows[key].append(np.stack([m[key] for m in per_t]))
    return Curves({key: np.concatenate(v, axis=1) for key, v in rows.items()})


def match_slots_to_objects(masks: np.ndarray, gt_masks: np.ndarray) -> list[tuple[int, int, float]]:
    """Greedy max-IoU matching of argmax slot regions to object masks.

    Returns ``(object, slot, iou)`` triples; objects whose best remaining
    overlap is zero stay unmatched.
    """
    masks = np.asarray(masks)
    if masks.ndim == 4:
        masks = masks[:, 0]
    gt = np.asarray(gt_masks) > 0
    if gt.shape[0] < 1:
        raise ValueError("need at least one object")
    k = masks.shape[0]
    labels = np.argmax(masks, axis=0)
    regions = labels[None] == np.arange(k)[:, None, None]
    inter = np.einsum("ohw,khw->ok", gt.astype(np.int64), regions.astype(np.int64))
    union = gt.sum(axis=(1, 2))[:, None] + regions.sum(axis=(1, 2))[None, :] - inter
    iou = np.where(union > 0, inter / np.maximum(union, 1), 0.0)
    matches = []
    live = iou.copy()
    for _ in range(min(gt.shape[0], k)):
        o, s = np.unravel_index(np.argmax(live), live.shape)
        if live[o, s] <= 0:
            break
        matches.append((int(o), int(s), float(iou[o, s])))
        live[o, :] = -1.0
        live[:, s] = -1.0
    return sorted(matches)


@dataclass
class ProbeResult:
    scores: dict[str, float]  # accuracy for categorical factors, R^2 for continuous ones
    kinds: dict[str, str]


def _standardize(train: np.ndarray, test: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    mu = train.mean(axis=0)
    sd = train.std(axis=0)
    sd = np.where(sd > 0, sd, 1.0)
    return (train - mu) / sd, (test - mu) / sd


def _step_size(x: np.ndarray, lr: float, curvature: float) -> float:
    # keep plain gradient descent stable when standardized latents are strongly correlated
    top = np.linalg.eigvalsh(x.T @ x / len(x))[-1] * curvature
    return min(lr, 1.9 / top) if top > 0 else lr


def _fit_softmax(x, y, classes: int, steps: int, lr: float):
    xb = np.hstack([x, np.ones((len(x), 1))])
    w = np.zeros((xb.shape[1], classes))
    onehot = np.eye(classes)[y]
    eta = _step_size(xb, lr, 0.5)
    for _ in range(steps):
        logits = xb @ w
        logits -= logits.max(axis=1, keepdims=True)
        p = np.exp(logits)
        p /= p.sum(axis=1, keepdims=True)
        w -= eta * xb.T @ (p - onehot) / len(x)
    return w


def _fit_linear(x, y, steps: int, lr: float):
    xb = np.hstack([x, np.ones((len(x), 1))])
    w = np.zeros((xb.shape[1], y.shape[1]))
    eta = _step_size(xb, lr, 1.0)
    for _ in range(steps):
        w -= eta * xb.T @ (xb @ w - y) / len(x)
    return w


def r2_score(y: np.ndarray, pred: np.ndarray) -> float:
    """Coefficient of determination averaged over target columns."""
    y = y.reshape(len(y), -1)
    pred = pred.reshape(len(pred), -1)
    ss_res = ((y - pred) ** 2).sum(axis=0)
    ss_tot = ((y - y.mean(axis=0)) ** 2).sum(axis=0)
    per = np.where(ss_tot > 0, 1.0 - ss_res / np.where(ss_tot > 0, ss_tot, 1.0), 0.0)
    return float(per.mean())


def factor_probe(
    train_latents: np.ndarray,
    train_factors: dict[str, np.ndarray],
    test_latents: np.ndarray,
    test_factors: dict[str, np.ndarray],
    kinds: dict[str, str],
    steps: int = 2000,
    lr: float = 0.1,
    min_samples: int = 100,
) -> ProbeResult:
    """Fit one linear head per factor on frozen latents; score on the test split.

    ``kinds[name]`` is ``"categorical"`` (softmax classifier, accuracy) or
    ``"continuous"`` (least-squares regression, R^2).
    """
    if len(train_latents) < min_samples:
        raise ValueError(f"factor probe needs at least {min_samples} training samples, got {len(train_latents)}")
    xtr, xte = _standardize(np.asarray(train_latents, np.float64), np.asarray(test_latents, np.float64))
    scores = {}
    for name, kind in kinds.items():
        ytr, yte = np.asarray(train_factors[name]), np.asarray(test_factors[name])
        if kind == "categorical":
            classes, codes = np.unique(np.concatenate([ytr, yte]), return_inverse=True)
            ctr, cte = codes[: len(ytr)], codes[len(ytr):]
            w = _fit_softmax(xtr, ctr, len(classes), steps, lr)
            pred = np.argmax(np.hstack([xte, np.ones((len(xte), 1))]) @ w, axis=1)
            scores[name] = float(np.mean(pred == cte))
        elif kind == "continuous":
            ytr2 = ytr.reshape(len(ytr), -1).astype(np.float64)
            mu, sd = ytr2.mean(axis=0), ytr2.std(axis=0)
            sd = np.where(sd > 0, sd, 1.0)
            w = _fit_linear(xtr, (ytr2 - mu) / sd, steps, lr)
            pred = (np.hstack([xte, np.ones((len(xte), 1))]) @ w) * sd + mu
            scores[name] = r2_score(yte.astype(np.float64), pred)
        else:
            raise ValueError(f"unknown factor kind {kind!r} for {name}")
    return ProbeResult(scores=scores, kinds=dict(kinds))


def slot_kl(lam: tuple[np.ndarray, np.ndarray]) -> np.ndarray:
    """Per-dimension KL to the unit Gaussian, ``[..., K, M]``."""
    mean, raw = lam
    sigma = np.logaddexp(0.0, raw) + 1e-6
    return 0.5 * (sigma**2 + mean**2 - 1.0) - np.log(sigma)


def kl_ranking(lam: tuple[np.ndarray, np.ndarray], slot: int) -> np.ndarray:
    """Latent dimensions of one slot ordered by decreasing KL (stable on ties)."""
    kl = slot_kl(lam)[..., slot, :]
    return np.argsort(-kl, kind="stable")


@dataclass
class Traversal:
    values: np.ndarray
    images: np.ndarray  # [steps, C, H, W], unclamped mixture means
    masks: np.ndarray  # [steps, K, 1, H, W]
    slot_means: np.ndarray  # [steps, K, C, H, W]


def latent_traversal(
    z: np.ndarray,
    slot: int,
    dim: int,
    store: ParamStore,
    model_cfg: ModelConfig,
    value_range: tuple[float, float] = (-2.0, 2.0),
    steps: int = 7,
) -> Traversal:
    """Sweep ``z[slot, dim]`` and re-decode every slot at each value."""
    z = np.asarray(z, dtype=store.dtype)
    if not 0 <= dim < z.shape[-1]:
        raise ValueError(f"dim {dim} out of range for latent size {z.shape[-1]}")
    values = np.linspace(value_range[0], value_range[1], steps)
    frames = np.repeat(z[None], steps, axis=0)
    frames[:, slot, dim] = values
    with ad.untracked():
        dec = decode(Tensor(frames), store, model_cfg.decoder)
        masks = normalize_masks(dec.mask_logits).data
    return Traversal(values=values, images=reconstruct(dec.means.data, masks), masks=masks, slot_means=dec.means.data)


@dataclass
class PCAResult:
    coords: np.ndarray  # [N, 2]
    components: np.ndarray  # [2, D]
    explained: np.ndarray  # fraction of total variance per component
    mean: np.ndarray


def _power_iteration(cov: np.ndarray, max_iter: int, tol: float) -> tuple[float, np.ndarray]:
    # start from the highest-variance column; independent of row order of the data
    v = cov[:, int(np.argmax(np.diag(cov)))].copy()
    norm = np.linalg.norm(v)
    if norm == 0:
        return 0.0, np.zeros(len(cov))
    v /= norm
    for _ in range(max_iter):
        w = cov @ v
        norm = np.linalg.norm(w)
        if norm == 0:
            return 0.0, np.zeros(len(cov))
        w /= norm
        if np.linalg.norm(w - v) < tol:
            v = w
            break
        v = w
    return float(v @ cov @ v), v


def pca_project(latents: np.ndarray, max_iter: int = 20000, tol: float = 1e-13) -> PCAResult:
    """Top-two principal components by power iteration with deflation."""
    x = np.asarray(latents, dtype=np.float64)
    if x.ndim != 2 or len(x) < 3:
        raise ValueError("pca_project needs a [N >= 3, D] matrix")
    mean = x.mean(axis=0)
    xc = x - mean
    cov = xc.T @ xc / (len(x) - 1)
    total = float(np.trace(cov))
    comps, eig = [], []
    work = cov.copy()
    for i in range(2):
        val, vec = _power_iteration(work, max_iter, tol)
        if total <= 0 or val <= 1e-12 * max(total, 1e-300):
            warnings.warn(f"latent matrix has rank < {i + 1}; component {i + 1} set to zero", RuntimeWarning)
            val, vec = 0.0, np.zeros(x.shape[1])
        elif vec[np.argmax(np.abs(vec))] < 0:
            vec = -vec
        comps.append(vec)
        eig.append(val)
        work = work - val * np.outer(vec, vec)
    components = np.stack(comps)
    explained = np.array(eig) / total if total > 0 else np.zeros(2)
    return PCAResult(coords=xc @ components.T, components=components, explained=explained, mean=mean)


def canonical_labels(labels: np.ndarray) -> np.ndarray:
    """Relabel so ids appear in raster-scan first-occurrence order (0, 1, ...)."""
    flat = np.asarray(labels).ravel()
    _, first = np.unique(flat, return_index=True)
    order = flat[np.sort(first)]
    remap = {int(v): i for i, v in enumerate(order)}
    return np.array([remap[int(v)] for v in flat], dtype=np.int64).reshape(np.shape(labels))


@dataclass
class StabilityResult:
    seeds: list[int]
    segmentations: list[np.ndarray]  # canonical labels per seed, [H, W]
    mode_of_seed: list[int]
    modes: list[np.ndarray]

    @property
    def mode_count(self) -> int:
        return len(self.modes)


def multi_stability_eval(
    store: ParamStore,
    model_cfg: ModelConfig,
    image: np.ndarray,
    k: int,
    t_steps: int,
    seeds: Sequence[int] | int = 16,
    *,
    deterministic: bool = False,
    foreground: np.ndarray | None = None,
) -> StabilityResult:
    """Repeat inference on one image under independent rng streams and count distinct segmentations.

    ``deterministic=True`` forces zero posterior variance. With ``foreground``
    given, background pixels are labelled -1 before canonicalisation.
    """
    seeds = list(range(seeds)) if isinstance(seeds, int) else list(seeds)
    segs, mode_of_seed, modes = [], [], []
    for seed in seeds:
        rng = None if deterministic else np.random.default_rng(seed)
        trace = run_inference(image, store, model_cfg, k, t_steps, rng)
        labels = slot_labels(trace.final_masks)
        if trace.single:
            labels = labels[0]
        if foreground is not None:
            labels = np.where(foreground, labels, -1)
        seg = canonical_labels(labels)
        for i, mode in enumerate(modes):
            if np.array_equal(mode, seg):
                mode_of_seed.append(i)
                break
        else:
            modes.append(seg)
            mode_of_seed.append(len(modes) - 1)
        segs.append(seg)
    return StabilityResult(seeds=seeds, segmentations=segs, mode_of_seed=mode_of_seed, modes=modes)


def write_record_csv(path, record_ids: Sequence[int], metrics: dict[str, np.ndarray]) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["record_id", "ari", "mse", "kl"])
        for i, rid in enumerate(record_ids):
            writer.writerow([int(rid)] + [repr(float(metrics[key][i])) for key in ("ari", "mse", "kl")])
    return path


def summarize(metrics: dict[str, np.ndarray]) -> dict[str, dict[str, float]]:
    out = {}
    for key in ("ari", "mse", "kl"):
        q25, med, q75 = np.percentile(metrics[key], [25, 50, 75])
        out[key] = {"median": float(med), "q25": float(q25), "q75": float(q75)}
    out["count"] = int(len(metrics["ari"]))
    return out


def write_summary(path, metrics: dict[str, np.ndarray], extra: dict | None = None) -> Path:
    path = Path(path)
    body = summarize(metrics)
    if extra:
        body.update(extra)
    path.write_text(json.dumps(body, indent=2, sort_keys=True) + "\n")
    return path

