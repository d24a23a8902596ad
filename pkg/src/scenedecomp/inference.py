"""Iterative amortized inference over K slot posteriors.

Each iteration samples slot latents, decodes them, scores the image under the
spatial mixture, computes the gradient-based auxiliary inputs with a backward
pass on that iteration's loss, and applies an additive update predicted by
the refinement network. Slots only interact through the auxiliary inputs.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Graph, ParamStore, Tensor
from .decoder import SLOT_AXIS, DecoderConfig, decode, init_decoder, mixture_loglik

SIGMA_FLOOR = 1e-6
LOO_FLOOR = -100.0
# cap on log(N_k / p(x)) when forming the mask gradient; keeps f32 finite
_MASK_GRAD_LOG_CAP = 60.0

# image-like input channels, in order, with their widths (RGB images)
INPUT_CHANNELS: tuple[tuple[str, int], ...] = (
    ("image", 3),
    ("means", 3),
    ("mask", 1),
    ("mask_logits", 1),
    ("mask_posterior", 1),
    ("grad_means", 3),
    ("grad_mask", 1),
    ("likelihood", 1),
    ("loo_likelihood", 1),
    ("coords", 2),
)
VECTOR_INPUTS = ("lambda", "grad_lambda")
ABLATABLE = tuple(name for name, _ in INPUT_CHANNELS) + VECTOR_INPUTS
STOPPED_INPUTS = ("grad_means", "grad_mask", "likelihood", "loo_likelihood", "grad_lambda")


def image_channel_count(img_channels: int = 3) -> int:
    return sum(img_channels if name in ("image", "means", "grad_means") else width
               for name, width in INPUT_CHANNELS)


def parse_ablation(flags) -> frozenset[str]:
    """Accepts names like ``no-grad-means`` or ``grad_means``."""
    out = set()
    for flag in flags or ():
        name = flag.strip()
        if not name:
            continue
        if name.startswith("no-"):
            name = name[3:]
        name = name.replace("-", "_")
        if name == "loo":
            name = "loo_likelihood"
        if name not in ABLATABLE:
            raise ValueError(f"unknown ablation flag {flag!r}; choose from {', '.join(ABLATABLE)}")
        out.add(name)
    return frozenset(out)


@dataclass(frozen=True)
class RefinerConfig:
    conv_channels: tuple[int, ...] = (32, 32, 32)
    kernel: int = 3
    strides: tuple[int, ...] = (1, 1, 1)
    mlp_hidden: int = 128
    lstm_hidden: int = 0  # 0 disables the LSTM

    def __post_init__(self):
        if len(self.strides) != len(self.conv_channels):
            raise ValueError("refiner strides and conv_channels differ in length")


@dataclass(frozen=True)
class ModelConfig:
    decoder: DecoderConfig = DecoderConfig()
    refiner: RefinerConfig = RefinerConfig()

    @property
    def latent_dim(self) -> int:
        return self.decoder.latent_dim

    @property
    def sigma(self) -> float:
        return self.decoder.sigma


def init_refiner(store: ParamStore, model_cfg: ModelConfig, rng: np.random.Generator) -> None:
    cfg = model_cfg.refiner
    m = model_cfg.latent_dim
    c_in = image_channel_count(model_cfg.decoder.channels)
    for i, c_out in enumerate(cfg.conv_channels):
        store.add(f"ref.conv{i}.w", ad.conv_weight(rng, c_out, c_in, cfg.kernel, store.dtype))
        store.add(f"ref.conv{i}.b", np.zeros(c_out, dtype=store.dtype))
        c_in = c_out
    store.add("ref.mlp.w", ad.dense_weight(rng, c_in, cfg.mlp_hidden, store.dtype))
    store.add("ref.mlp.b", np.zeros(cfg.mlp_hidden, dtype=store.dtype))
    width = cfg.mlp_hidden + 4 * m
    if cfg.lstm_hidden:
        n_in = width + cfg.lstm_hidden
        store.add("ref.lstm.w", ad.dense_weight(rng, n_in, 4 * cfg.lstm_hidden, store.dtype))
        store.add("ref.lstm.b", np.zeros(4 * cfg.lstm_hidden, dtype=store.dtype))
        width = cfg.lstm_hidden
    store.add("ref.head.w", ad.dense_weight(rng, width, 2 * m, store.dtype))
    store.add("ref.head.b", np.zeros(2 * m, dtype=store.dtype))


def init_params(model_cfg: ModelConfig, rng: np.random.Generator, dtype=np.float32) -> ParamStore:
    """Decoder, refiner and the trainable initial posterior (matching the prior)."""
    store = ParamStore(dtype)
    init_decoder(store, model_cfg.decoder, rng)
    init_refiner(store, model_cfg, rng)
    lam = np.zeros((2, model_cfg.latent_dim), dtype=dtype)
    lam[1] = np.log(np.expm1(1.0))  # softplus(raw) == 1
    store.add("init.lambda", lam)
    return store


# ------------------------------------------------------------------ posterior

@dataclass
class PosteriorParams:
    mean: Tensor  # [..., K, M]
    raw_scale: Tensor  # [..., K, M]

    @property
    def sigma(self) -> Tensor:
        return ad.add(ad.softplus(self.raw_scale), SIGMA_FLOOR)

    def numpy(self) -> tuple[np.ndarray, np.ndarray]:
        return self.mean.data.copy(), self.raw_scale.data.copy()


def init_posterior(lambda1: Tensor, k: int, batch: int | None = None) -> PosteriorParams:
    """Replicate the shared ``[2, M]`` initial posterior across K slots (and batch)."""
    m = lambda1.shape[-1]
    shape = (k, m) if batch is None else (batch, k, m)
    return PosteriorParams(
        mean=ad.broadcast_to(lambda1[0], shape),
        raw_scale=ad.broadcast_to(lambda1[1], shape),
    )


def sample_slots(
    post: PosteriorParams,
    rng: np.random.Generator | None,
    shared_noise: bool = False,
) -> Tensor:
    """Reparameterised z = mean + sigma * eps, independently per slot.

    ``rng=None`` gives z = mean (zero-variance inference). ``shared_noise``
    reuses one draw for every slot of an example.
    """
    if rng is None:
        return ad.add(post.mean, 0.0)
    shape = post.mean.shape
    if shared_noise:
        eps = rng.standard_normal(shape[:-2] + (1, shape[-1]))
        eps = np.broadcast_to(eps, shape)
    else:
        eps = rng.standard_normal(shape)
    return ad.add(post.mean, ad.mul(post.sigma, eps.astype(post.mean.dtype)))


def kl_to_prior(post: PosteriorParams) -> Tensor:
    """KL(N(mean, sigma^2) || N(0, I)) summed over slots and latent dims."""
    sigma = post.sigma
    var = ad.square(sigma)
    terms = ad.mul(ad.sub(ad.add(ad.square(post.mean), var), ad.add(ad.log(var), 1.0)), 0.5)
    return ad.tsum(terms, axis=(-2, -1))


# ------------------------------------------------------------------ aux inputs

@dataclass
class AuxInputs:
    image_like: Tensor  # [..., K, 17, H, W]
    vector_like: Tensor  # [..., K, 4M]
    stopped: dict[str, np.ndarray] = field(default_factory=dict, repr=False)


def leave_one_out_loglik(log_masks: np.ndarray, comp: np.ndarray, k: int) -> np.ndarray:
    """log sum_{j != k} m~_j N_j with the remaining masks renormalised.

    Arrays are ``[..., K, 1, H, W]`` (log-masks and per-slot log-densities);
    the result is ``[..., 1, H, W]``. With K=1 (or when every other slot has
    zero mass) the value is ``LOO_FLOOR``.
    """
    n_slots = comp.shape[SLOT_AXIS]
    if n_slots < 2:
        return np.full(comp.shape[:-4] + comp.shape[-3:], LOO_FLOOR, dtype=comp.dtype)
    keep = [j for j in range(n_slots) if j != k]
    lm = np.take(log_masks, keep, axis=SLOT_AXIS)
    terms = lm + np.take(comp, keep, axis=SLOT_AXIS)
    num = _np_logsumexp(terms, SLOT_AXIS)
    den = _np_logsumexp(lm, SLOT_AXIS)
    out = num - den
    return np.where(np.isfinite(out), out, LOO_FLOOR).astype(comp.dtype)


def _np_logsumexp(a: np.ndarray, axis: int) -> np.ndarray:
    m = a.max(axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    with np.errstate(divide="ignore"):
        return np.squeeze(np.log(np.sort(np.exp(a - m), axis=axis).sum(axis=axis, keepdims=True)) + m, axis=axis)


def _ln(a: np.ndarray, axes) -> np.ndarray:
    with ad.untracked():
        return ad.layernorm(Tensor(a), axis=axes).data


def stopped_inputs(
    mix, grad_means: np.ndarray, grad_lambda: np.ndarray
) -> dict[str, np.ndarray]:
    """Layer-normalised, gradient-free auxiliary inputs for one iteration."""
    comp = mix.component_loglik.data
    log_masks = mix.log_masks.data
    pix = mix.pixelwise_loglik.data
    n_slots = comp.shape[SLOT_AXIS]
    pix_k = np.expand_dims(pix, SLOT_AXIS)
    # dL/dm_k = -N_k / p(x); evaluated in log space
    grad_mask = -np.exp(np.minimum(comp - pix_k, _MASK_GRAD_LOG_CAP))
    like = np.broadcast_to(pix_k, comp.shape)
    loo = np.stack([leave_one_out_loglik(log_masks, comp, k) for k in range(n_slots)], axis=SLOT_AXIS)
    img_axes = (-3, -2, -1)
    return {
        "grad_means": _ln(grad_means, img_axes),
        "grad_mask": _ln(grad_mask, img_axes),
        "likelihood": _ln(np.ascontiguousarray(like), img_axes),
        "loo_likelihood": _ln(loo, img_axes),
        "grad_lambda": _ln(grad_lambda, -1),
    }


def assemble_inputs(
    x: np.ndarray,
    post: PosteriorParams,
    mix,
    logits: Tensor,
    stopped: dict[str, np.ndarray],
    ablation: frozenset[str] = frozenset(),
) -> AuxInputs:
    """Stack the 17 image-like channels and the 4M vector-like inputs per slot.

    ``x`` is ``[..., C, H, W]``; slot tensors are ``[..., K, ...]``. Ablated
    inputs are replaced by zeros, keeping every shape fixed.
    """
    means = mix.means
    lead = means.shape[:-3]
    h, w = means.shape[-2:]
    dtype = means.dtype
    posterior_mask = ad.softmax(mix.component_loglik, axis=SLOT_AXIS, order_invariant=True)
    coords = ad.coordinate_grid(h, w, dtype)
    parts = {
        "image": Tensor(np.broadcast_to(np.expand_dims(x, SLOT_AXIS), lead + x.shape[-3:]).astype(dtype)),
        "means": means,
        "mask": mix.masks,
        "mask_logits": logits,
        "mask_posterior": posterior_mask,
        "grad_means": Tensor(stopped["grad_means"]),
        "grad_mask": Tensor(stopped["grad_mask"]),
        "likelihood": Tensor(stopped["likelihood"]),
        "loo_likelihood": Tensor(stopped["loo_likelihood"]),
        "coords": Tensor(np.broadcast_to(coords, lead + coords.shape)),
    }
    channels = []
    for name, _ in INPUT_CHANNELS:
        t = parts[name]
        if name in ablation:
            t = Tensor(np.zeros(t.shape, dtype=dtype))
        channels.append(t)
    image_like = ad.concat(channels, axis=-3)

    lam = ad.concat([post.mean, post.raw_scale], axis=-1)
    if "lambda" in ablation:
        lam = Tensor(np.zeros(lam.shape, dtype=dtype))
    glam = stopped["grad_lambda"]
    if "grad_lambda" in ablation:
        glam = np.zeros_like(glam)
    vector_like = ad.concat([lam, Tensor(glam.astype(dtype, copy=False))], axis=-1)
    return AuxInputs(image_like=image_like, vector_like=vector_like, stopped=stopped)


# ------------------------------------------------------------------ refinement

def refine(
    post: PosteriorParams,
    aux: AuxInputs,
    state,
    store: ParamStore,
    model_cfg: ModelConfig,
):
    """Additive posterior update from the refinement network.

    All slots share weights and are processed as one batch. Returns the new
    posterior and the new recurrent state (``None`` without an LSTM).
    """
    cfg = model_cfg.refiner
    m = model_cfg.latent_dim
    img = aux.image_like
    lead = img.shape[:-3]
    n = int(np.prod(lead))
    h = ad.reshape(img, (n,) + img.shape[-3:])
    for i, stride in enumerate(cfg.strides):
        h = ad.elu(ad.conv2d(h, store[f"ref.conv{i}.w"], store[f"ref.conv{i}.b"], stride=stride))
    h = ad.avg_pool_global(h)
    h = ad.elu(ad.linear(h, store["ref.mlp.w"], store["ref.mlp.b"]))
    h = ad.concat([h, ad.reshape(aux.vector_like, (n, 4 * m))], axis=-1)
    new_state = None
    if cfg.lstm_hidden:
        if state is None:
            zeros = np.zeros((n, cfg.lstm_hidden), dtype=h.dtype)
            state = (Tensor(zeros), Tensor(zeros))
        h, new_state = ad.lstm_cell(h, state, store["ref.lstm.w"], store["ref.lstm.b"])
    delta = ad.reshape(ad.linear(h, store["ref.head.w"], store["ref.head.b"]), lead[:-1] + (lead[-1], 2 * m))
    new_post = PosteriorParams(
        mean=ad.add(post.mean, delta[..., :m]),
        raw_scale=ad.add(post.raw_scale, delta[..., m:]),
    )
    return new_post, new_state


# ------------------------------------------------------------------ main loop

@dataclass
class InferenceTrace:
    """Per-iteration record of one inference run (batched over inputs)."""

    losses: list[Tensor] = field(default_factory=list)  # each [B]
    kl: list[Tensor] = field(default_factory=list)
    nll: list[Tensor] = field(default_factory=list)
    lambdas: list[tuple[np.ndarray, np.ndarray]] = field(default_factory=list)
    samples: list[np.ndarray] = field(default_factory=list)
    masks: list[np.ndarray] = field(default_factory=list)
    means: list[np.ndarray] = field(default_factory=list)
    stopped: list[dict[str, np.ndarray]] = field(default_factory=list)
    final_lambda: tuple[np.ndarray, np.ndarray] | None = None
    final_masks: np.ndarray | None = None  # decode of the final posterior mean
    final_means: np.ndarray | None = None
    final_sample_masks: np.ndarray | None = None  # decode of a fresh final sample
    final_sample_means: np.ndarray | None = None
    single: bool = False

    @property
    def iterations(self) -> int:
        return len(self.losses)

    def loss_values(self) -> np.ndarray:
        """[T, B] array of per-iteration losses."""
        return np.stack([np.atleast_1d(l.data) for l in self.losses])


def run_inference(
    x: np.ndarray,
    store: ParamStore,
    model_cfg: ModelConfig,
    k: int,
    t_steps: int,
    rng: np.random.Generator | None,
    ablation: frozenset[str] = frozenset(),
    *,
    record_final: bool = True,
    frozen_stopped: list[dict[str, np.ndarray]] | None = None,
    shared_noise: bool = False,
) -> InferenceTrace:
    """Unrolled inference for a batch ``[B, C, H, W]`` (or one ``[C, H, W]`` image).

    When a :class:`Graph` is active the whole unrolled computation is recorded
    there, so a later backward pass trains decoder, refiner and initial
    posterior. Gradient-derived inputs never carry gradient. ``rng=None``
    runs with zero posterior variance. ``frozen_stopped`` substitutes
    previously captured gradient-free inputs (used to check that training
    gradients ignore them). Without ``record_final`` the last refinement,
    which no loss term depends on, is skipped.
    """
    if t_steps < 1 or k < 1:
        raise ValueError("need T >= 1 and K >= 1")
    x = np.asarray(x, dtype=store.dtype)
    single = x.ndim == 3
    if single:
        x = x[None]
    dcfg = model_cfg.decoder
    if x.shape[1:] != (dcfg.channels, dcfg.height, dcfg.width):
        raise ad.ShapeError(f"input shape {x.shape[1:]} does not match decoder {(dcfg.channels, dcfg.height, dcfg.width)}")
    batch = x.shape[0]
    outer = ad.tensor._active_graph.get()
    trace = InferenceTrace(single=single)

    post = None
    state = None
    for t in range(t_steps):
        graph = outer if outer is not None else Graph()
        with graph:
            if post is None:
                post = init_posterior(store["init.lambda"], k, batch)
            elif outer is None:
                post = PosteriorParams(Tensor(post.mean.data, requires_grad=True),
                                       Tensor(post.raw_scale.data, requires_grad=True))
                if state is not None:
                    state = (Tensor(state[0].data), Tensor(state[1].data))
            z = sample_slots(post, rng, shared_noise=shared_noise)
            dec = decode(z, store, dcfg)
            mix = mixture_loglik(x, dec.means, sigma=dcfg.sigma, mask_logits=dec.mask_logits)
            kl = kl_to_prior(post)
            nll = ad.neg(mix.total_loglik)
            loss = ad.add(kl, nll)
            if not np.all(np.isfinite(loss.data)):
                raise ad.NonFiniteError(
                    f"non-finite loss at iteration {t + 1}: kl={kl.data}, nll={nll.data}"
                )
            trace.losses.append(loss)
            trace.kl.append(kl)
            trace.nll.append(nll)
            trace.lambdas.append(post.numpy())
            trace.samples.append(z.data.copy())
            trace.masks.append(mix.masks.data)
            trace.means.append(dec.means.data)

            if t == t_steps - 1 and not record_final:
                break
            if frozen_stopped is not None:
                stopped = frozen_stopped[t]
            else:
                g_means, g_mean, g_raw = graph.grad(
                    ad.tsum(loss), [dec.means, post.mean, post.raw_scale]
                )
                stopped = stopped_inputs(mix, g_means, np.concatenate([g_mean, g_raw], axis=-1))
            trace.stopped.append(stopped)
            aux = assemble_inputs(x, post, mix, dec.mask_logits, stopped, ablation)
            post, state = refine(post, aux, state, store, model_cfg)
        if outer is None:
            graph.release()
    if outer is None and t_steps > 0:
        graph.release()

    if record_final:
        trace.final_lambda = post.numpy()
        with ad.untracked():
            mean_dec = decode(Tensor(post.mean.data), store, dcfg)
            trace.final_means = mean_dec.means.data
            trace.final_masks = ad.softmax(mean_dec.mask_logits, axis=SLOT_AXIS, order_invariant=True).data
            zf = sample_slots(PosteriorParams(Tensor(post.mean.data), Tensor(post.raw_scale.data)), rng)
            sample_dec = decode(zf, store, dcfg)
            trace.final_sample_means = sample_dec.means.data
            trace.final_sample_masks = ad.softmax(sample_dec.mask_logits, axis=SLOT_AXIS, order_invariant=True).data
    return trace
