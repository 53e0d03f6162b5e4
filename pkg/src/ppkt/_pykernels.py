"""Pure numpy implementations of the loop-heavy kernels.

Every function here has a twin in ``_ckernels.pyx``. Accumulation order is
kept identical so both backends produce the same bits.
"""
import numpy as np


def bilinear_fwd(inp, y0, y1, fy, x0, x1, fx):
    a = inp[y0]
    r = a + fy[:, None, None] * (inp[y1] - a)
    left = r[:, x0]
    return left + fx[None, :, None] * (r[:, x1] - left)


def bilinear_bwd(grad, h, w, y0, y1, fy, x0, x1, fx):
    oh = grad.shape[0]
    c = grad.shape[2]
    gr = np.zeros((oh, w, c))
    np.add.at(gr, (slice(None), x0), grad * (1.0 - fx)[None, :, None])
    np.add.at(gr, (slice(None), x1), grad * fx[None, :, None])
    gin = np.zeros((h, w, c))
    np.add.at(gin, y0, gr * (1.0 - fy)[:, None, None])
    np.add.at(gin, y1, gr * fy[:, None, None])
    return gin


def segment_sum(values, group, n_groups):
    out = np.zeros((n_groups, values.shape[1]))
    np.add.at(out, group, values)
    return out


def col2im(dcols, hp, wp, stride):
    ho, wo, k, _, c = dcols.shape
    dxp = np.zeros((hp, wp, c))
    for di in range(k):
        for dj in range(k):
            dxp[di:di + stride * (ho - 1) + 1:stride,
                dj:dj + stride * (wo - 1) + 1:stride] += dcols[:, :, di, dj, :]
    return dxp


def ray_aabb_nearest(origin, dirs, mins, maxs, t_eps):
    """Nearest slab-method hit of each ray against a list of boxes.

    Returns (t, box, axis); misses get t=inf, box=-1, axis=-1.
    """
    p = dirs.shape[0]
    nb = mins.shape[0]
    if nb == 0:
        return np.full(p, np.inf), np.full(p, -1, dtype=np.int64), np.full(p, -1, dtype=np.int64)
    d = dirs[:, None, :]
    lo = (mins - origin)[None, :, :]
    hi = (maxs - origin)[None, :, :]
    zero = d == 0.0
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / d
        t1 = lo * inv
        t2 = hi * inv
    inside = (lo <= 0.0) & (hi >= 0.0)
    tlo = np.where(zero, np.where(inside, -np.inf, np.inf), np.minimum(t1, t2))
    thi = np.where(zero, np.where(inside, np.inf, -np.inf), np.maximum(t1, t2))
    axis = np.argmax(tlo, axis=2)
    tnear = np.take_along_axis(tlo, axis[..., None], axis=2)[..., 0]
    tfar = thi.min(axis=2)
    hit = (tnear <= tfar) & (tnear > t_eps)
    tcand = np.where(hit, tnear, np.inf)
    box = np.argmin(tcand, axis=1)
    t = tcand[np.arange(p), box]
    ax = axis[np.arange(p), box]
    miss = ~np.isfinite(t)
    box = np.where(miss, -1, box).astype(np.int64)
    ax = np.where(miss, -1, ax).astype(np.int64)
    return t, box, ax
