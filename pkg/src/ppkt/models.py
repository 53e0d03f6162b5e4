"""Teacher CNN, upsampling projection layer, point student, and linear heads.

Parameters live in a :class:`ParamStore` under dotted namespaces:

    teacher.*      frozen 2D teacher (three 3x3 stride-2 convs)
    teacher_cls.*  per-cell classifier used to pretrain the teacher and for PPKD targets
    upl.*          1x1 conv projection, bilinearly upsampled to the frame size
    student.*      shared point MLP with one voxel-mean context block
    head.*         linear projection of student features into the embedding space
    kd_cls.*       student classifier trained by the PPKD objective
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .numerics import (
    ShapeError,
    bilinear_resize,
    bilinear_sample,
    bilinear_sample_backward,
    conv2d,
    conv2d_backward,
    l2_normalize_rows,
    l2_normalize_rows_backward,
    linear,
    linear_backward,
    relu,
    relu_backward,
)

TEACHER_STRIDE = 8
# fixed colour standardisation applied inside the teacher
TEACHER_MEAN = 0.5
TEACHER_STD = 0.25
SMALL_WIDTHS = (32, 64)


@dataclass
class Param:
    value: np.ndarray
    grad: np.ndarray
    trainable: bool = True


class ParamStore:
    """Ordered name -> Param mapping. Iteration follows insertion order."""

    def __init__(self):
        self._items: dict[str, Param] = {}

    def add(self, name: str, value: np.ndarray, trainable: bool = True) -> Param:
        if name in self._items:
            raise KeyError(f"parameter {name!r} already exists")
        value = np.ascontiguousarray(value, dtype=np.float64)
        p = Param(value, np.zeros_like(value), trainable)
        self._items[name] = p
        return p

    def __getitem__(self, name: str) -> Param:
        return self._items[name]

    def __contains__(self, name: str) -> bool:
        return name in self._items

    def __len__(self) -> int:
        return len(self._items)

    def items(self):
        return self._items.items()

    def names(self) -> list[str]:
        return list(self._items)

    def value(self, name: str) -> np.ndarray:
        return self._items[name].value

    def accumulate(self, name: str, grad: np.ndarray) -> None:
        p = self._items[name]
        if p.trainable:
            if grad.shape != p.value.shape:
                raise ShapeError(f"gradient for {name} has shape {grad.shape}, expected {p.value.shape}")
            p.grad += grad

    def zero_grad(self) -> None:
        for p in self._items.values():
            p.grad.fill(0.0)

    def set_trainable(self, namespace: str, trainable: bool) -> None:
        for name, p in self._items.items():
            if in_namespace(name, namespace):
                p.trainable = trainable

    def is_trainable(self, name: str) -> bool:
        return self._items[name].trainable

    def has_namespace(self, namespace: str) -> bool:
        return any(in_namespace(n, namespace) for n in self._items)

    def merge(self, other: "ParamStore") -> "ParamStore":
        for name, p in other.items():
            q = self.add(name, p.value.copy(), p.trainable)
            q.grad[...] = p.grad
        return self

    def subset(self, *namespaces: str) -> "ParamStore":
        out = ParamStore()
        for name, p in self._items.items():
            if any(in_namespace(name, ns) for ns in namespaces):
                out.add(name, p.value.copy(), p.trainable)
        return out

    def copy(self) -> "ParamStore":
        return ParamStore().merge(self)


def in_namespace(name: str, namespace: str) -> bool:
    return name == namespace or name.startswith(namespace + ".")


@dataclass
class ModelConfig:
    embed_dim: int = 128
    teacher_channels: tuple[int, ...] = (16, 32, 64)
    student_widths: tuple[int, ...] = (64, 128)
    tau: float = 0.04
    upl_target: str = "input"
    class_count: int = 6
    voxel_size: float = 0.025

    def __post_init__(self):
        self.teacher_channels = tuple(int(c) for c in self.teacher_channels)
        self.student_widths = tuple(int(c) for c in self.student_widths)
        if self.embed_dim < 2:
            raise ValueError("embed_dim must be >= 2")
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        if len(self.teacher_channels) != 3 or len(self.student_widths) != 2:
            raise ValueError("teacher_channels needs 3 widths and student_widths needs 2")
        if min(self.teacher_channels + self.student_widths) < 1:
            raise ValueError("widths must be >= 1")
        if self.upl_target != "input":
            raise ValueError("only upl_target='input' is supported")
        if self.voxel_size <= 0:
            raise ValueError("voxel_size must be positive")


# ---------------------------------------------------------------------------
# initialisation


def glorot(rng, shape, fan_in, fan_out):
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def _add_conv(store, name, rng, k, cin, cout):
    store.add(f"{name}.w", glorot(rng, (k, k, cin, cout), k * k * cin, k * k * cout))
    store.add(f"{name}.b", np.zeros(cout))


def _add_linear(store, name, rng, cin, cout):
    store.add(f"{name}.w", glorot(rng, (cin, cout), cin, cout))
    store.add(f"{name}.b", np.zeros(cout))


def init_teacher(store: ParamStore, cfg: ModelConfig, rng) -> ParamStore:
    cin = 3
    for i, c in enumerate(cfg.teacher_channels, start=1):
        _add_conv(store, f"teacher.conv{i}", rng, 3, cin, c)
        cin = c
    _add_linear(store, "teacher_cls", rng, cin, cfg.class_count)
    return store


def init_upl(store: ParamStore, cfg: ModelConfig, rng) -> ParamStore:
    _add_conv(store, "upl", rng, 1, cfg.teacher_channels[-1], cfg.embed_dim)
    return store


def init_student(store: ParamStore, cfg: ModelConfig, rng) -> ParamStore:
    w1, w2 = cfg.student_widths
    _add_linear(store, "student.fc1", rng, 6, w1)
    _add_linear(store, "student.fc2", rng, w1, w2)
    _add_linear(store, "student.fc3", rng, 2 * w2, w2)
    _add_linear(store, "head", rng, w2, cfg.embed_dim)
    return store


def init_classifier(store: ParamStore, name: str, in_dim: int, class_count: int, rng=None) -> ParamStore:
    """Affine classifier; zero-initialised when ``rng`` is None."""
    if rng is None:
        store.add(f"{name}.w", np.zeros((in_dim, class_count)))
        store.add(f"{name}.b", np.zeros(class_count))
    else:
        _add_linear(store, name, rng, in_dim, class_count)
    return store


# ---------------------------------------------------------------------------
# teacher


def _check_teacher_input(color):
    if color.ndim != 3 or color.shape[2] != 3:
        raise ShapeError(f"teacher expects an H x W x 3 image, got {color.shape}")
    h, w = color.shape[:2]
    if h % TEACHER_STRIDE or w % TEACHER_STRIDE:
        raise ShapeError(f"teacher input {h}x{w} must have extents divisible by {TEACHER_STRIDE}")


def teacher_forward(color: np.ndarray, params: ParamStore) -> np.ndarray:
    """H x W x 3 image -> (H/8) x (W/8) x Ct feature map."""
    return teacher_forward_train(color, params)[0]


def teacher_forward_train(color, params):
    _check_teacher_input(color)
    x = (color - TEACHER_MEAN) / TEACHER_STD
    cache = []
    for i in (1, 2, 3):
        w = params.value(f"teacher.conv{i}.w")
        pre = conv2d(x, w, params.value(f"teacher.conv{i}.b"), stride=2)
        cache.append((x, pre))
        x = relu(pre)
    return x, cache


def teacher_backward(grad, cache, params):
    for i in (3, 2, 1):
        x, pre = cache[i - 1]
        g = relu_backward(grad, pre)
        dx, dw, db = conv2d_backward(g, x, params.value(f"teacher.conv{i}.w"), stride=2)
        params.accumulate(f"teacher.conv{i}.w", dw)
        params.accumulate(f"teacher.conv{i}.b", db)
        grad = dx
    return grad / TEACHER_STD


# ---------------------------------------------------------------------------
# upsampling projection layer


def _upl_project(fmap, params):
    w = params.value("upl.w")
    if fmap.ndim != 3 or fmap.shape[2] != w.shape[2]:
        raise ShapeError(f"UPL expects {w.shape[2]} input channels, got feature map {fmap.shape}")
    return conv2d(fmap, w, params.value("upl.b"))


def upl_forward(fmap: np.ndarray, params: ParamStore, out_h: int, out_w: int) -> np.ndarray:
    """1x1 conv, bilinear upsample to (out_h, out_w), then unit-normalise every pixel."""
    proj = _upl_project(fmap, params)
    up = bilinear_resize(proj, out_h, out_w)
    c = up.shape[2]
    z, _ = l2_normalize_rows(up.reshape(-1, c))
    return z.reshape(out_h, out_w, c)


def upl_sample_train(fmap, params, out_h, out_w, rows, cols):
    """UPL output at selected pixels only; equal to ``upl_forward(...)[rows, cols]``."""
    proj = _upl_project(fmap, params)
    up = bilinear_sample(proj, out_h, out_w, rows, cols)
    z, div = l2_normalize_rows(up)
    return z, (fmap, out_h, out_w, rows, cols, z, div)


def upl_sample(fmap, params, out_h, out_w, rows, cols):
    return upl_sample_train(fmap, params, out_h, out_w, rows, cols)[0]


def upl_backward(grad, cache, params):
    fmap, out_h, out_w, rows, cols, z, div = cache
    dup = l2_normalize_rows_backward(grad, z, div)
    dproj = bilinear_sample_backward(dup, fmap.shape[0], fmap.shape[1], out_h, out_w, rows, cols)
    dfmap, dw, db = conv2d_backward(dproj, fmap, params.value("upl.w"))
    params.accumulate("upl.w", dw)
    params.accumulate("upl.b", db)
    return dfmap


# ---------------------------------------------------------------------------
# point student


@dataclass
class VoxelGroups:
    """Voxel membership of every point plus a permutation-invariant summation order."""

    group: np.ndarray
    counts: np.ndarray
    order: np.ndarray = field(repr=False)

    @property
    def n_groups(self) -> int:
        return len(self.counts)


def voxel_groups(inputs: np.ndarray, voxel_size: float) -> VoxelGroups:
    """Group points (N x 6 student inputs, xyz first) by floor(xyz / voxel_size)."""
    keys = np.floor(inputs[:, :3] / voxel_size).astype(np.int64)
    _, group, counts = np.unique(keys, axis=0, return_inverse=True, return_counts=True)
    group = group.reshape(-1).astype(np.int64)
    # sum members in an order fixed by their values, not their positions
    cols = [inputs[:, j] for j in range(inputs.shape[1] - 1, -1, -1)]
    order = np.lexsort(cols + [group])
    return VoxelGroups(group, counts, order)


def student_input(cloud) -> np.ndarray:
    """xyz concatenated with rgb; the student's 6-column point features."""
    if cloud.feats.shape[1] != 3:
        raise ShapeError(f"expected 3 colour columns in the cloud, got {cloud.feats.shape[1]}")
    return np.concatenate([cloud.coords, cloud.feats], axis=1)


def student_forward_train(inputs, params, groups: VoxelGroups, rows=None):
    """Embeddings for ``rows`` (all points when None), plus the backward cache.

    Only points sharing a voxel with a requested row are evaluated.
    """
    if inputs.ndim != 2 or inputs.shape[1] != 6:
        raise ShapeError(f"student expects N x 6 (xyz+rgb) inputs, got {inputs.shape}")
    if inputs.shape[0] < 1:
        raise ShapeError("student needs at least one point")
    n = inputs.shape[0]
    rows = np.arange(n) if rows is None else np.asarray(rows, dtype=np.int64)
    wanted = np.zeros(groups.n_groups, dtype=bool)
    wanted[groups.group[rows]] = True
    # members in canonical order; local ids index the reduced group table
    members = groups.order[wanted[groups.group[groups.order]]]
    used, local = np.unique(groups.group[members], return_inverse=True)
    local = local.reshape(-1).astype(np.int64)
    counts = groups.counts[used].astype(np.float64)

    x = inputs[members]
    a1 = linear(x, params.value("student.fc1.w"), params.value("student.fc1.b"))
    h1 = relu(a1)
    a2 = linear(h1, params.value("student.fc2.w"), params.value("student.fc2.b"))
    h2 = relu(a2)
    ctx = kernels.get("segment_sum")(np.ascontiguousarray(h2), local, len(used)) / counts[:, None]

    pos = np.empty(n, dtype=np.int64)
    pos[members] = np.arange(len(members))
    rpos = pos[rows]
    cat = np.concatenate([h2[rpos], ctx[local[rpos]]], axis=1)
    a3 = linear(cat, params.value("student.fc3.w"), params.value("student.fc3.b"))
    h3 = relu(a3)
    e = linear(h3, params.value("head.w"), params.value("head.b"))
    z, div = l2_normalize_rows(e)
    cache = dict(x=x, a1=a1, h1=h1, a2=a2, h2=h2, local=local, counts=counts, rpos=rpos,
                 cat=cat, a3=a3, h3=h3, z=z, div=div)
    return z, cache


def student_forward(cloud_or_inputs, params: ParamStore, voxel_size: float = 0.025) -> np.ndarray:
    """Unit-norm N x C embeddings of every point."""
    inputs = cloud_or_inputs if isinstance(cloud_or_inputs, np.ndarray) else student_input(cloud_or_inputs)
    if inputs.ndim != 2 or inputs.shape[1] != 6:
        raise ShapeError(f"student expects N x 6 (xyz+rgb) inputs, got {inputs.shape}")
    return student_forward_train(inputs, params, voxel_groups(inputs, voxel_size))[0]


def student_features_train(inputs, params, groups, rows=None):
    """Backbone features (before the projection head) for ``rows``."""
    z, cache = student_forward_train(inputs, params, groups, rows)
    return cache["h3"], cache


def student_backward(grad_z, cache, params, grad_h3=None):
    """Accumulate student/head gradients. ``grad_z`` may be None when only
    backbone features received gradient (``grad_h3``)."""
    dh3 = np.zeros_like(cache["h3"]) if grad_h3 is None else grad_h3.copy()
    if grad_z is not None:
        de = l2_normalize_rows_backward(grad_z, cache["z"], cache["div"])
        dh, dw, db = linear_backward(de, cache["h3"], params.value("head.w"))
        params.accumulate("head.w", dw)
        params.accumulate("head.b", db)
        dh3 += dh
    if not any(params.is_trainable(f"student.fc{i}.{k}") for i in (1, 2, 3) for k in "wb"):
        return
    da3 = relu_backward(dh3, cache["a3"])
    dcat, dw, db = linear_backward(da3, cache["cat"], params.value("student.fc3.w"))
    params.accumulate("student.fc3.w", dw)
    params.accumulate("student.fc3.b", db)
    w2 = cache["h2"].shape[1]
    local, counts, rpos = cache["local"], cache["counts"], cache["rpos"]
    dctx_rows = dcat[:, w2:]
    dctx = np.zeros((len(counts), w2))
    np.add.at(dctx, local[rpos], dctx_rows)
    dh2 = (dctx / counts[:, None])[local]
    np.add.at(dh2, rpos, dcat[:, :w2])
    da2 = relu_backward(dh2, cache["a2"])
    dh1, dw, db = linear_backward(da2, cache["h1"], params.value("student.fc2.w"))
    params.accumulate("student.fc2.w", dw)
    params.accumulate("student.fc2.b", db)
    da1 = relu_backward(dh1, cache["a1"])
    _, dw, db = linear_backward(da1, cache["x"], params.value("student.fc1.w"))
    params.accumulate("student.fc1.w", dw)
    params.accumulate("student.fc1.b", db)


# ---------------------------------------------------------------------------
# linear heads


def classifier_forward(embeddings: np.ndarray, params: ParamStore, class_count: int | None = None,
                       name: str = "cls") -> np.ndarray:
    w = params.value(f"{name}.w")
    if class_count is not None and w.shape[1] != class_count:
        raise ShapeError(f"classifier {name} has {w.shape[1]} outputs, expected {class_count}")
    if embeddings.shape[1] != w.shape[0]:
        raise ShapeError(f"classifier {name} expects {w.shape[0]} input columns, got {embeddings.shape[1]}")
    return linear(embeddings, w, params.value(f"{name}.b"))


def classifier_backward(grad, embeddings, params, name="cls"):
    dx, dw, db = linear_backward(grad, embeddings, params.value(f"{name}.w"))
    params.accumulate(f"{name}.w", dw)
    params.accumulate(f"{name}.b", db)
    return dx


def teacher_logits(fmap: np.ndarray, params: ParamStore) -> np.ndarray:
    """Per-cell class logits of the teacher map, h x w x K."""
    h, w, c = fmap.shape
    return classifier_forward(fmap.reshape(-1, c), params, name="teacher_cls").reshape(h, w, -1)
