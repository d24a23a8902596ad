"""Layer primitives built on the tensor engine: convolution, dense, LSTM."""

from __future__ import annotations

import numpy as np

from .tensor import ShapeError, Tensor, _finish, add, as_tensor, concat, matmul, mul, reshape, sigmoid, tanh


def _same_pads(size: int, k: int, stride: int) -> tuple[int, int, int]:
    out = -(-size // stride)
    total = max((out - 1) * stride + k - size, 0)
    # symmetric, extra pixel (if any) goes after
    return total // 2, total - total // 2, out


def _im2col(xp: np.ndarray, kh: int, kw: int, ho: int, wo: int, stride: int) -> np.ndarray:
    """Patches of a channels-last padded array as rows ``[N*ho*wo, kh*kw*C]``."""
    n, c = xp.shape[0], xp.shape[-1]
    cols = np.empty((n, ho, wo, kh, kw, c), dtype=xp.dtype)
    hs, ws = (ho - 1) * stride + 1, (wo - 1) * stride + 1
    for i in range(kh):
        for j in range(kw):
            cols[:, :, :, i, j] = xp[:, i : i + hs : stride, j : j + ws : stride]
    return cols.reshape(n * ho * wo, -1)


def conv2d(x, w, b=None, stride: int = 1, padding: str = "same") -> Tensor:
    """2-D cross-correlation.

    ``x`` is ``[N, C_in, H, W]`` (or ``[C_in, H, W]``), ``w`` is
    ``[C_out, C_in, kh, kw]``. ``padding`` is ``"same"`` (zero padding,
    floor-split) or ``"valid"``.
    """
    x, w = as_tensor(x), as_tensor(w)
    squeeze = x.ndim == 3
    if squeeze:
        x = reshape(x, (1,) + x.shape)
    n, c, h, wd = x.shape
    o, ci, kh, kw = w.shape
    if ci != c:
        raise ShapeError(f"conv2d channel mismatch: input has {c}, kernel expects {ci}")
    if stride not in (1, 2):
        raise ValueError(f"unsupported stride {stride}")
    if padding == "same":
        if kh % 2 == 0 or kw % 2 == 0:
            raise ValueError("same padding needs odd kernel sizes")
        pt, pb, ho = _same_pads(h, kh, stride)
        pl, pr, wo = _same_pads(wd, kw, stride)
    elif padding == "valid":
        pt = pb = pl = pr = 0
        ho = (h - kh) // stride + 1
        wo = (wd - kw) // stride + 1
    else:
        raise ValueError(f"unknown padding {padding!r}")

    # im2col on a channels-last copy: the gather then moves contiguous channel runs
    xp = np.zeros((n, h + pt + pb, wd + pl + pr, c), dtype=x.data.dtype)
    xp[:, pt : pt + h, pl : pl + wd] = x.data.transpose(0, 2, 3, 1)
    cols = _im2col(xp, kh, kw, ho, wo, stride)
    wmat = w.data.transpose(0, 2, 3, 1).reshape(o, -1)
    out = (cols @ wmat.T).reshape(n, ho, wo, o).transpose(0, 3, 1, 2)

    def backward(g, needs):
        gh = g.transpose(0, 2, 3, 1)
        g2 = gh.reshape(-1, o)
        gx = gw = None
        if needs[1]:
            gw = (g2.T @ cols).reshape(o, kh, kw, c).transpose(0, 3, 1, 2)
        if needs[0]:
            if stride == 1:
                # transposed conv: correlate the padded gradient with the flipped kernel
                gp = np.zeros((n, ho + kh - 1, wo + kw - 1, o), dtype=g.dtype)
                gp[:, kh - 1 - pt : kh - 1 - pt + ho, kw - 1 - pl : kw - 1 - pl + wo] = gh
                flipped = w.data[:, :, ::-1, ::-1].transpose(1, 2, 3, 0).reshape(c, -1)
                gcols = _im2col(gp, kh, kw, h, wd, 1)
                gx = (gcols @ flipped.T).reshape(n, h, wd, c).transpose(0, 3, 1, 2)
            else:
                dcols = (g2 @ wmat).reshape(n, ho, wo, kh, kw, c)
                gxp = np.zeros(xp.shape, dtype=g.dtype)
                hs, ws = (ho - 1) * stride + 1, (wo - 1) * stride + 1
                for i in range(kh):
                    for j in range(kw):
                        gxp[:, i : i + hs : stride, j : j + ws : stride] += dcols[:, :, :, i, j]
                gx = gxp[:, pt : pt + h, pl : pl + wd].transpose(0, 3, 1, 2)
        return gx, gw

    y = _finish(np.ascontiguousarray(out), (x, w), backward)
    if b is not None:
        y = add(y, reshape(as_tensor(b), (1, o, 1, 1)))
    if squeeze:
        y = reshape(y, y.shape[1:])
    return y


def avg_pool_global(x) -> Tensor:
    """Mean over the two trailing spatial axes."""
    x = as_tensor(x)
    return x.mean(axis=(-2, -1))


def linear(x, w, b=None) -> Tensor:
    y = matmul(x, w)
    return y if b is None else add(y, b)


def lstm_cell(x, state, w, b) -> tuple[Tensor, tuple[Tensor, Tensor]]:
    """Single-layer LSTM step without peepholes.

    ``w`` is ``[in + hidden, 4 * hidden]`` with gate blocks ordered
    input, forget, candidate, output.
    """
    h, c = state
    hidden = h.shape[-1]
    if w.shape[1] != 4 * hidden or w.shape[0] != x.shape[-1] + hidden:
        raise ShapeError(f"lstm weight shape {w.shape} does not fit input {x.shape[-1]} / hidden {hidden}")
    gates = add(matmul(concat([x, h], axis=-1), w), b)
    i = sigmoid(gates[..., :hidden])
    f = sigmoid(gates[..., hidden : 2 * hidden])
    cand = tanh(gates[..., 2 * hidden : 3 * hidden])
    o = sigmoid(gates[..., 3 * hidden :])
    c_new = add(mul(f, c), mul(i, cand))
    h_new = mul(o, tanh(c_new))
    return h_new, (h_new, c_new)


def coordinate_grid(h: int, w: int, dtype=np.float32) -> np.ndarray:
    """``[2, h, w]``: channel 0 ramps -1..1 left to right, channel 1 top to bottom."""
    xs = np.linspace(-1.0, 1.0, w, dtype=dtype)
    ys = np.linspace(-1.0, 1.0, h, dtype=dtype)
    return np.stack([np.broadcast_to(xs[None, :], (h, w)), np.broadcast_to(ys[:, None], (h, w))])


def spatial_broadcast(z, h: int, w: int) -> Tensor:
    """Tile ``z`` (``[M]`` or ``[N, M]``) over an ``h x w`` grid and append coordinates."""
    z = as_tensor(z)
    if h < 2 or w < 2:
        raise ValueError("broadcast grid must be at least 2x2")
    squeeze = z.ndim == 1
    if squeeze:
        z = reshape(z, (1, z.shape[0]))
    n, m = z.shape
    tiled = _tile(z, h, w)
    coords = np.broadcast_to(coordinate_grid(h, w, z.dtype), (n, 2, h, w))
    out = concat([tiled, Tensor(coords)], axis=1)
    return reshape(out, out.shape[1:]) if squeeze else out


def _tile(z: Tensor, h: int, w: int) -> Tensor:
    n, m = z.shape
    data = np.broadcast_to(z.data[:, :, None, None], (n, m, h, w))
    return _finish(data, (z,), lambda g, needs: (g.sum(axis=(2, 3)),))


def broadcast_conv2d(z, w, b=None, h: int = 0, wd: int = 0) -> Tensor:
    """``conv2d(spatial_broadcast(z, h, wd), w, b)`` with stride 1 and same padding.

    The tiled latent is constant across the grid, so each kernel offset
    contributes one ``[N, C_out]`` product masked by where that offset lands
    inside the image. This skips the im2col over ``h * wd`` copies of ``z``.
    """
    z, w = as_tensor(z), as_tensor(w)
    if z.ndim != 2:
        raise ShapeError(f"broadcast_conv2d expects [N, M] latents, got {z.shape}")
    n, m = z.shape
    o, ci, kh, kw = w.shape
    if ci != m + 2:
        raise ShapeError(f"kernel expects {ci} channels, broadcast input has {m + 2}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ValueError("same padding needs odd kernel sizes")
    if h < 2 or wd < 2:
        raise ValueError("broadcast grid must be at least 2x2")
    pt, pb, _ = _same_pads(h, kh, 1)
    pl, pr, _ = _same_pads(wd, kw, 1)
    pad = ((0, 0), (pt, pb), (pl, pr), (0, 0))
    dtype = z.data.dtype
    valid = _im2col(np.pad(np.ones((1, h, wd, 1), dtype), pad), kh, kw, h, wd, 1)  # [HW, P]
    coords = coordinate_grid(h, wd, dtype).transpose(1, 2, 0)[None]
    ccols = _im2col(np.pad(coords, pad), kh, kw, h, wd, 1)  # [HW, P*2]
    p = kh * kw
    wz = w.data[:, :m].transpose(1, 2, 3, 0).reshape(m, p * o)
    wc = w.data[:, m:].transpose(2, 3, 1, 0).reshape(p * 2, o)
    per_offset = (z.data @ wz).reshape(n, p, o)
    out = valid @ per_offset + ccols @ wc  # [N, HW, O]
    out = out.reshape(n, h, wd, o).transpose(0, 3, 1, 2)

    def backward(g, needs):
        gh = g.transpose(0, 2, 3, 1).reshape(n, h * wd, o)
        g_off = (valid.T @ gh).reshape(n, p * o)
        gz = gw = None
        if needs[0]:
            gz = g_off @ wz.T
        if needs[1]:
            gwz = (z.data.T @ g_off).reshape(m, kh, kw, o).transpose(3, 0, 1, 2)
            gwc = (ccols.T @ gh.sum(axis=0)).reshape(kh, kw, 2, o).transpose(3, 2, 0, 1)
            gw = np.concatenate([gwz, gwc], axis=1)
        return gz, gw

    y = _finish(np.ascontiguousarray(out), (z, w), backward)
    if b is not None:
        y = add(y, reshape(as_tensor(b), (1, o, 1, 1)))
    return y


def glorot_uniform(rng: np.random.Generator, shape, fan_in: int, fan_out: int, dtype=np.float32) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


def conv_weight(rng, c_out: int, c_in: int, k: int, dtype=np.float32) -> np.ndarray:
    return glorot_uniform(rng, (c_out, c_in, k, k), c_in * k * k, c_out * k * k, dtype)


def dense_weight(rng, n_in: int, n_out: int, dtype=np.float32) -> np.ndarray:
    return glorot_uniform(rng, (n_in, n_out), n_in, n_out, dtype)
