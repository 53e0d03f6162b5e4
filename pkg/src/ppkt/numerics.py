"""Dense f64 array primitives with hand-written vector-Jacobian products.

Arrays are plain ``numpy.ndarray`` objects of dtype float64, images and
feature maps are laid out H x W x C. Each differentiable op comes as a
forward function and a ``*_backward`` function that takes the upstream
gradient plus whatever the forward needed.

Random numbers come from numpy's PCG64 bit generator, seeded through
``SeedSequence(seed, spawn_key=(stream,))``. That pairing is the
repository's fixed RNG contract.
"""
from __future__ import annotations

import math

import numpy as np
from numpy.lib.stride_tricks import as_strided

from . import kernels


class ShapeError(ValueError):
    pass


class GradCheckError(RuntimeError):
    pass


def make_rng(seed: int, stream: int = 0) -> np.random.Generator:
    """Deterministic generator for a (seed, stream) pair."""
    if seed < 0 or stream < 0:
        raise ValueError("seed and stream must be non-negative")
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=(int(stream),))
    return np.random.Generator(np.random.PCG64(ss))


# ---------------------------------------------------------------------------
# convolution


def _check_conv(x, w, b, stride):
    if x.ndim != 3 or w.ndim != 4:
        raise ShapeError(f"conv2d expects HxWxCin input and kxkxCinxCout weights, got {x.shape} and {w.shape}")
    k = w.shape[0]
    if w.shape[1] != k or k % 2 == 0:
        raise ShapeError(f"conv2d kernel must be square with odd size, got {w.shape[:2]}")
    if x.shape[2] != w.shape[2]:
        raise ShapeError(f"conv2d channel mismatch: input has {x.shape[2]} channels, weights expect {w.shape[2]}")
    if b.shape != (w.shape[3],):
        raise ShapeError(f"conv2d bias shape {b.shape} does not match Cout={w.shape[3]}")
    if x.shape[0] < k or x.shape[1] < k:
        raise ShapeError(f"conv2d input {x.shape[:2]} smaller than kernel {k}x{k}")
    if stride < 1:
        raise ValueError("stride must be positive")


def _im2col(x, k, stride):
    pad = (k - 1) // 2
    xp = np.pad(x, ((pad, pad), (pad, pad), (0, 0))) if pad else x
    h, w, c = x.shape
    ho = -(-h // stride)
    wo = -(-w // stride)
    s0, s1, s2 = xp.strides
    cols = as_strided(xp, shape=(ho, wo, k, k, c), strides=(s0 * stride, s1 * stride, s0, s1, s2), writeable=False)
    return cols, xp.shape


def conv2d(x: np.ndarray, w: np.ndarray, b: np.ndarray, stride: int = 1) -> np.ndarray:
    """Zero-padded 'same' cross-correlation; output is ceil(H/stride) x ceil(W/stride) x Cout."""
    _check_conv(x, w, b, stride)
    k, _, cin, cout = w.shape
    cols, _ = _im2col(x, k, stride)
    ho, wo = cols.shape[:2]
    out = cols.reshape(ho * wo, k * k * cin) @ w.reshape(k * k * cin, cout) + b
    return out.reshape(ho, wo, cout)


def conv2d_backward(grad: np.ndarray, x: np.ndarray, w: np.ndarray, stride: int = 1):
    """Returns (dx, dw, db)."""
    k, _, cin, cout = w.shape
    cols, padded_shape = _im2col(x, k, stride)
    ho, wo = cols.shape[:2]
    g2 = grad.reshape(ho * wo, cout)
    flat = cols.reshape(ho * wo, k * k * cin)
    dw = (flat.T @ g2).reshape(w.shape)
    db = g2.sum(axis=0)
    dcols = np.ascontiguousarray((g2 @ w.reshape(k * k * cin, cout).T).reshape(ho, wo, k, k, cin))
    dxp = kernels.get("col2im")(dcols, padded_shape[0], padded_shape[1], stride)
    pad = (k - 1) // 2
    dx = dxp[pad:pad + x.shape[0], pad:pad + x.shape[1]] if pad else dxp
    return np.ascontiguousarray(dx), dw, db


# ---------------------------------------------------------------------------
# bilinear resize (half-pixel centres, clamped)


def resize_coords(src: int, dst: int):
    """Lower index, upper index and blend fraction for each output coordinate."""
    t = np.arange(dst, dtype=np.float64)
    s = np.clip((t + 0.5) * (src / dst) - 0.5, 0.0, src - 1)
    i0 = np.floor(s).astype(np.int64)
    i1 = np.minimum(i0 + 1, src - 1)
    return i0, i1, s - i0


def _check_resize(x, out_h, out_w):
    if x.ndim != 3 or x.shape[0] < 1 or x.shape[1] < 1:
        raise ShapeError(f"bilinear_resize expects a non-empty h x w x C array, got {x.shape}")
    if out_h < 1 or out_w < 1:
        raise ShapeError(f"bilinear_resize output extents must be positive, got {out_h}x{out_w}")


def bilinear_resize(x: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    _check_resize(x, out_h, out_w)
    h, w = x.shape[:2]
    y0, y1, fy = resize_coords(h, out_h)
    x0, x1, fx = resize_coords(w, out_w)
    return kernels.get("bilinear_fwd")(np.ascontiguousarray(x, dtype=np.float64), y0, y1, fy, x0, x1, fx)


def bilinear_resize_backward(grad: np.ndarray, in_h: int, in_w: int) -> np.ndarray:
    out_h, out_w = grad.shape[:2]
    y0, y1, fy = resize_coords(in_h, out_h)
    x0, x1, fx = resize_coords(in_w, out_w)
    return kernels.get("bilinear_bwd")(np.ascontiguousarray(grad), in_h, in_w, y0, y1, fy, x0, x1, fx)


def bilinear_sample(x: np.ndarray, out_h: int, out_w: int, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
    """Values of ``bilinear_resize(x, out_h, out_w)[rows, cols]`` without building the full map.

    Uses the same blend order as the full resize, so results match it bit for bit.
    """
    _check_resize(x, out_h, out_w)
    h, w = x.shape[:2]
    y0, y1, fy = resize_coords(h, out_h)
    x0, x1, fx = resize_coords(w, out_w)
    ya, yb, f = y0[rows], y1[rows], fy[rows][:, None]
    xa, xb, g = x0[cols], x1[cols], fx[cols][:, None]
    a = x[ya, xa]
    left = a + f * (x[yb, xa] - a)
    a = x[ya, xb]
    right = a + f * (x[yb, xb] - a)
    return left + g * (right - left)


def bilinear_sample_backward(grad, in_h, in_w, out_h, out_w, rows, cols):
    y0, y1, fy = resize_coords(in_h, out_h)
    x0, x1, fx = resize_coords(in_w, out_w)
    ya, yb, f = y0[rows], y1[rows], fy[rows][:, None]
    xa, xb, g = x0[cols], x1[cols], fx[cols][:, None]
    gl = grad * (1.0 - g)
    gr = grad * g
    out = np.zeros((in_h, in_w, grad.shape[1]))
    np.add.at(out, (ya, xa), gl * (1.0 - f))
    np.add.at(out, (yb, xa), gl * f)
    np.add.at(out, (ya, xb), gr * (1.0 - f))
    np.add.at(out, (yb, xb), gr * f)
    return out


# ---------------------------------------------------------------------------
# pointwise and dense


def l2_normalize_rows(x: np.ndarray, epsilon: float = 1e-12):
    """Divide each row by max(norm, epsilon). Returns (normalized, divisor)."""
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    norms = np.sqrt(np.einsum("ij,ij->i", x, x))
    div = np.maximum(norms, epsilon)
    return x / div[:, None], div


def l2_normalize_rows_backward(grad, y, div, epsilon: float = 1e-12):
    # rows clamped at epsilon are a plain scaling
    proj = np.einsum("ij,ij->i", y, grad)
    dx = (grad - y * proj[:, None]) / div[:, None]
    clamped = div <= epsilon
    if clamped.any():
        dx[clamped] = grad[clamped] / epsilon
    return dx


def relu(x):
    return np.maximum(x, 0.0)


def relu_backward(grad, x):
    return grad * (x > 0.0)


def linear(x, w, b):
    return x @ w + b


def linear_backward(grad, x, w):
    """Returns (dx, dw, db)."""
    return grad @ w.T, x.T @ grad, grad.sum(axis=0)


def logsumexp_rows(s: np.ndarray) -> np.ndarray:
    m = s.max(axis=1, keepdims=True)
    return m[:, 0] + np.log(np.exp(s - m).sum(axis=1))


def softmax_rows(s: np.ndarray) -> np.ndarray:
    e = np.exp(s - s.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


# ---------------------------------------------------------------------------
# finite-difference harness


def grad_check(loss_fn, params, step: float = 1e-6, sample_count: int = 32, rng=None) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``loss_fn(params)`` must return the scalar loss and write its gradient
    into ``params`` (accumulating onto zeroed slots). Only trainable entries
    are probed.
    """
    if not 1e-7 <= step <= 1e-4:
        raise ValueError(f"step {step} outside [1e-7, 1e-4]")
    if rng is None:
        rng = make_rng(0)
    params.zero_grad()
    base = float(loss_fn(params))
    if not math.isfinite(base):
        raise GradCheckError(f"non-finite loss {base} at the unperturbed point")
    names = [n for n, p in params.items() if p.trainable]
    analytic = {n: params[n].grad.copy() for n in names}
    sizes = np.array([params[n].value.size for n in names])
    total = int(sizes.sum())
    if total == 0:
        raise GradCheckError("no trainable parameters to probe")
    picks = rng.choice(total, size=min(sample_count, total), replace=False)
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    worst = 0.0
    for flat in np.sort(picks):
        k = int(np.searchsorted(offsets, flat, side="right") - 1)
        name = names[k]
        idx = int(flat - offsets[k])
        value = params[name].value.reshape(-1)
        orig = value[idx]
        value[idx] = orig + step
        fp = float(loss_fn(params))
        value[idx] = orig - step
        fm = float(loss_fn(params))
        value[idx] = orig
        if not (math.isfinite(fp) and math.isfinite(fm)):
            raise GradCheckError(f"non-finite loss while probing {name}[{idx}]")
        numeric = (fp - fm) / (2.0 * step)
        a = analytic[name].reshape(-1)[idx]
        err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
        worst = max(worst, err)
    params.zero_grad()
    return worst
