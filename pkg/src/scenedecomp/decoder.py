"""Spatial-broadcast slot decoder and the per-pixel Gaussian mixture likelihood.

Slot tensors carry the slot axis fourth from the end: ``[K, C, H, W]`` for a
single image or ``[B, K, C, H, W]`` for a batch.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import ParamStore, Tensor

SLOT_AXIS = -4


@dataclass(frozen=True)
class DecoderConfig:
    latent_dim: int = 32
    height: int = 20
    width: int = 20
    channels: int = 3
    hidden: tuple[int, ...] = (32, 32, 32)
    kernel: int = 3
    sigma: float = 0.1

    def __post_init__(self):
        if not self.sigma > 0:
            raise ValueError("sigma must be positive")
        if self.kernel % 2 == 0:
            raise ValueError("decoder kernel must be odd")

    @property
    def out_channels(self) -> int:
        return self.channels + 1


@dataclass
class SlotDecode:
    means: Tensor  # [..., C, H, W]
    mask_logits: Tensor  # [..., 1, H, W]


@dataclass
class MixtureOutput:
    masks: Tensor
    means: Tensor
    pixelwise_loglik: Tensor  # [..., 1, H, W]
    total_loglik: Tensor  # scalar, or [B] for batches
    log_masks: Tensor | None = None
    component_loglik: Tensor | None = field(default=None, repr=False)  # [..., K, 1, H, W]


def init_decoder(store: ParamStore, cfg: DecoderConfig, rng: np.random.Generator) -> None:
    c_in = cfg.latent_dim + 2
    widths = list(cfg.hidden) + [cfg.out_channels]
    for i, c_out in enumerate(widths):
        store.add(f"dec.conv{i}.w", ad.conv_weight(rng, c_out, c_in, cfg.kernel, store.dtype))
        store.add(f"dec.conv{i}.b", np.zeros(c_out, dtype=store.dtype))
        c_in = c_out


def decode(z, store: ParamStore, cfg: DecoderConfig) -> SlotDecode:
    """Decode latents ``[..., M]`` independently with shared weights."""
    z = ad.as_tensor(z)
    lead = z.shape[:-1]
    if z.shape[-1] != cfg.latent_dim:
        raise ad.ShapeError(f"latent size {z.shape[-1]} != decoder latent_dim {cfg.latent_dim}")
    flat = ad.reshape(z, (-1, cfg.latent_dim))
    n_layers = len(cfg.hidden) + 1
    # first layer fuses the broadcast with the convolution
    h = ad.broadcast_conv2d(flat, store["dec.conv0.w"], store["dec.conv0.b"], cfg.height, cfg.width)
    for i in range(1, n_layers):
        h = ad.elu(h)
        w = store[f"dec.conv{i}.w"]
        if w.shape[1] != h.shape[1]:
            raise ad.ShapeError(f"dec.conv{i}.w expects {w.shape[1]} channels, got {h.shape[1]}")
        h = ad.conv2d(h, w, store[f"dec.conv{i}.b"], stride=1, padding="same")
    out = ad.reshape(h, lead + (cfg.out_channels, cfg.height, cfg.width))
    c = cfg.channels
    return SlotDecode(means=out[..., :c, :, :], mask_logits=out[..., c:, :, :])


def decode_slot(z_k, store: ParamStore, cfg: DecoderConfig) -> SlotDecode:
    return decode(z_k, store, cfg)


def normalize_masks(logits) -> Tensor:
    """Softmax over the slot axis; permuting slots permutes masks bitwise."""
    return ad.softmax(logits, axis=SLOT_AXIS, order_invariant=True)


def component_loglik(x, means, sigma: float) -> Tensor:
    """Per-slot pixel log-density with channels summed: ``[..., K, 1, H, W]``."""
    x = ad.as_tensor(x)
    xs = ad.reshape(x, x.shape[:-3] + (1,) + x.shape[-3:])
    return ad.tsum(ad.gaussian_logpdf(xs, means, sigma), axis=-3, keepdims=True)


def mixture_loglik(
    x,
    means,
    masks=None,
    sigma: float = 0.1,
    *,
    mask_logits=None,
) -> MixtureOutput:
    """log p(x | z) of the spatial mixture, per pixel and in total.

    Pass either normalised ``masks`` or raw ``mask_logits``; with logits the
    log-masks come from a log-softmax, which stays finite for extreme logits.
    """
    if not sigma > 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    means = ad.as_tensor(means)
    comp = component_loglik(x, means, sigma)
    if mask_logits is not None:
        log_masks = ad.log_softmax(mask_logits, axis=SLOT_AXIS, order_invariant=True)
        masks = ad.exp(log_masks)
    else:
        masks = ad.as_tensor(masks)
        with np.errstate(divide="ignore"):
            log_masks = ad.log(masks)
    pix = ad.logsumexp(ad.add(log_masks, comp), axis=SLOT_AXIS, order_invariant=True)
    total = ad.tsum(pix, axis=(-3, -2, -1))
    return MixtureOutput(
        masks=masks,
        means=means,
        pixelwise_loglik=pix,
        total_loglik=total,
        log_masks=log_masks,
        component_loglik=comp,
    )


def reconstruct(means, masks) -> np.ndarray:
    """Mixture mean sum_k m_k mu_k (unclamped), independent of slot order."""
    means = means.data if isinstance(means, Tensor) else np.asarray(means)
    masks = masks.data if isinstance(masks, Tensor) else np.asarray(masks)
    return np.sort(means * masks, axis=SLOT_AXIS).sum(axis=SLOT_AXIS)


def to_u8(image: np.ndarray) -> np.ndarray:
    """Clamp a [0, 1] image and convert to bytes; the only place clamping happens."""
    return np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)


def generate_from_prior(
    store: ParamStore, cfg: DecoderConfig, k: int, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray]:
    """Sample K latents from N(0, I) and render. Returns (image [C,H,W], masks [K,1,H,W])."""
    z = rng.standard_normal((k, cfg.latent_dim)).astype(store.dtype)
    return render_latents(z, store, cfg)


def render_latents(z: np.ndarray, store: ParamStore, cfg: DecoderConfig) -> tuple[np.ndarray, np.ndarray]:
    with ad.untracked():
        dec = decode(Tensor(z), store, cfg)
        masks = normalize_masks(dec.mask_logits)
    return reconstruct(dec.means, masks), masks.data
