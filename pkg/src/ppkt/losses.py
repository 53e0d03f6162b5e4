"""Point-pixel NCE and the baseline objectives, each with its analytic gradient.

Every loss returns a :class:`LossOutput` whose ``grads`` map input names
("z3d", "z2d", "student_logits", "logits", ...) to arrays shaped like the
inputs. Teacher-side inputs of the baselines get no gradient entry.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .numerics import ShapeError, l2_normalize_rows, l2_normalize_rows_backward, logsumexp_rows, softmax_rows


@dataclass
class LossOutput:
    value: float
    per_pair: np.ndarray
    grads: dict[str, np.ndarray] = field(default_factory=dict)
    positive_sim: float = float("nan")

    def mean(self) -> float:
        return self.value / max(len(self.per_pair), 1)


def _sum(values) -> float:
    # exactly rounded, so the total does not depend on pair order
    return math.fsum(values.tolist())


def ppnce(z3d: np.ndarray, z2d: np.ndarray, tau: float = 0.04) -> LossOutput:
    """Sum over points of -log softmax_j(z3d_i . z2d_j / tau)[i].

    Anchors are 3D rows; the softmax runs over the 2D rows only.
    """
    if z3d.shape != z2d.shape or z3d.ndim != 2:
        raise ShapeError(f"ppnce needs matching M x C inputs, got {z3d.shape} and {z2d.shape}")
    m = z3d.shape[0]
    if m == 0:
        raise ValueError("ppnce needs at least one pair")
    if tau <= 0:
        raise ValueError("tau must be positive")
    sim = z3d @ z2d.T
    s = sim / tau
    mx = s.max(axis=1, keepdims=True)
    e = np.exp(s - mx)
    lse = mx[:, 0] + np.log(np.sort(e, axis=1).sum(axis=1))
    diag = np.diagonal(s)
    per_pair = lse - diag
    p = e / e.sum(axis=1, keepdims=True)
    p[np.arange(m), np.arange(m)] -= 1.0
    g3 = p @ z2d / tau
    g2 = p.T @ z3d / tau
    return LossOutput(_sum(per_pair), per_pair, {"z3d": g3, "z2d": g2}, float(np.diagonal(sim).mean()))


def ppnce_naive(z3d, z2d, tau):
    """Double-loop reference of the point-pixel NCE value."""
    m = len(z3d)
    total = 0.0
    for i in range(m):
        logits = [sum(z3d[i][k] * z2d[j][k] for k in range(len(z3d[i]))) / tau for j in range(m)]
        top = max(logits)
        denom = sum(math.exp(x - top) for x in logits)
        total += -(logits[i] - top - math.log(denom))
    return total


def ppkd(teacher_logits: np.ndarray, student_logits: np.ndarray, kd_temp: float = 4.0) -> LossOutput:
    """kd_temp^2 * sum_i KL(softmax(t_i/T) || softmax(s_i/T)); teacher detached."""
    if teacher_logits.shape != student_logits.shape or teacher_logits.ndim != 2:
        raise ShapeError(f"ppkd needs matching M x K logits, got {teacher_logits.shape} and {student_logits.shape}")
    if teacher_logits.shape[1] < 2:
        raise ValueError("ppkd needs at least two classes")
    if kd_temp <= 0:
        raise ValueError("kd_temp must be positive")
    t = teacher_logits / kd_temp
    s = student_logits / kd_temp
    log_pt = t - logsumexp_rows(t)[:, None]
    log_ps = s - logsumexp_rows(s)[:, None]
    pt = np.exp(log_pt)
    kl = np.maximum((pt * (log_pt - log_ps)).sum(axis=1), 0.0)
    per_row = kd_temp ** 2 * kl
    grad = kd_temp * (np.exp(log_ps) - pt)
    return LossOutput(_sum(per_row), per_row, {"student_logits": grad})


def global_l2(z3d: np.ndarray, z2d: np.ndarray) -> LossOutput:
    """Squared distance between the normalised mean rows of each side; 2D side detached."""
    if z3d.ndim != 2 or z3d.shape[0] < 1 or z3d.shape[1] != z2d.shape[1]:
        raise ShapeError(f"global_l2 needs non-empty inputs with equal widths, got {z3d.shape} and {z2d.shape}")
    m = z3d.shape[0]
    a, adiv = l2_normalize_rows(z3d.mean(axis=0, keepdims=True))
    b, _ = l2_normalize_rows(z2d.mean(axis=0, keepdims=True))
    diff = a - b
    value = float((diff ** 2).sum())
    da = l2_normalize_rows_backward(2.0 * diff, a, adiv)
    g3 = np.repeat(da / m, m, axis=0)
    return LossOutput(value, np.array([value]), {"z3d": g3})


def global_nce(pooled3d: np.ndarray, pooled2d: np.ndarray, tau: float = 0.04) -> LossOutput:
    """Frame-level InfoNCE across a batch of pooled, normalised features; 2D side detached."""
    if pooled3d.shape[0] < 2:
        raise ValueError("global_nce needs at least two frames in the batch")
    out = ppnce(pooled3d, pooled2d, tau)
    del out.grads["z2d"]
    return out


def pool_normalize(z: np.ndarray):
    """Mean over rows then unit-normalise; returns (pooled 1 x C, divisor)."""
    return l2_normalize_rows(z.mean(axis=0, keepdims=True))


def pool_normalize_backward(grad, pooled, div, m):
    d = l2_normalize_rows_backward(grad, pooled, div)
    return np.repeat(d / m, m, axis=0)


def cross_entropy(logits: np.ndarray, labels: np.ndarray, ignore_label: int = -1) -> LossOutput:
    """Mean negative log-softmax over rows whose label is not ``ignore_label``."""
    labels = np.asarray(labels)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(f"cross_entropy needs N x K logits and N labels, got {logits.shape} and {labels.shape}")
    keep = labels != ignore_label
    n = int(keep.sum())
    if n == 0:
        raise ValueError("cross_entropy: every label is ignored")
    k = logits.shape[1]
    lab = labels[keep]
    if lab.min() < 0 or lab.max() >= k:
        raise ValueError(f"labels must lie in 0..{k - 1} or equal {ignore_label}")
    sub = logits[keep]
    per_row = logsumexp_rows(sub) - sub[np.arange(n), lab]
    grad = np.zeros_like(logits)
    p = softmax_rows(sub)
    p[np.arange(n), lab] -= 1.0
    grad[keep] = p / n
    return LossOutput(_sum(per_row) / n, per_row, {"logits": grad})
