"""Momentum SGD, the exponential schedule, checkpoints, and the training stages.

Stages:

* ``run_teacher_pretrain``: supervised pretraining of the 2D teacher on
  per-cell labels (max-pooled to the teacher's 1/8 resolution).
* ``run_pretrain``: contrastive pixel-to-point transfer into the point
  student, or one of the baseline objectives.
* probing lives in :mod:`ppkt.evalkit`.

Checkpoint file (little-endian)::

    "PPKC" | u32 version=1 | u64 step | u32 entry count
    per entry: u16 name length | name (UTF-8) | u8 ndim | u64 dims[ndim] | f64 data
"""
from __future__ import annotations

import csv
import dataclasses
import io
import logging
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import losses
from .geometry import back_project, sample_correspondences
from .models import (
    ModelConfig,
    ParamStore,
    TEACHER_STRIDE,
    classifier_backward,
    classifier_forward,
    in_namespace,
    init_classifier,
    init_student,
    init_teacher,
    init_upl,
    student_backward,
    student_forward_train,
    student_input,
    teacher_backward,
    teacher_forward_train,
    teacher_logits,
    upl_backward,
    upl_sample_train,
    voxel_groups,
)
from .numerics import ShapeError, bilinear_sample, make_rng

log = logging.getLogger(__name__)

LOSS_KINDS = ("ppnce", "ppkd", "global_l2", "global_nce")
METRICS_HEADER = ["step", "lr", "loss_sum", "loss_mean", "pos_sim_mean"]
CKPT_MAGIC = b"PPKC"
CKPT_VERSION = 1

# RNG streams per stage; fixed so runs stay reproducible across versions
STREAM_INIT = 0
STREAM_BATCH = 1


class CheckpointError(ValueError):
    pass


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    lr0: float = 0.5
    momentum: float = 0.9
    weight_decay: float = 1e-4
    steps: int = 2000
    batch_frames: int = 8
    pairs_per_frame: int = 256
    lr_final_factor: float = 0.01
    loss_kind: str = "ppnce"
    seed: int = 0
    frozen: tuple[str, ...] = ("teacher", "teacher_cls")
    cross_frame: bool = False
    kd_temp: float = 4.0
    grad_scale: str = "sum"

    def __post_init__(self):
        self.frozen = tuple(self.frozen)
        if self.lr0 < 0:
            raise ValueError("lr0 must be >= 0")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")
        if self.steps < 1 or self.batch_frames < 1 or self.pairs_per_frame < 1:
            raise ValueError("steps, batch_frames and pairs_per_frame must be >= 1")
        if not 0 < self.lr_final_factor <= 1:
            raise ValueError("lr_final_factor must lie in (0, 1]")
        if self.loss_kind not in LOSS_KINDS:
            raise ValueError(f"loss_kind must be one of {LOSS_KINDS}, got {self.loss_kind!r}")
        if self.kd_temp <= 0:
            raise ValueError("kd_temp must be positive")
        if self.grad_scale not in ("mean", "sum"):
            raise ValueError("grad_scale must be 'mean' or 'sum'")


# ---------------------------------------------------------------------------
# optimisation


def lr_schedule(step: int, cfg: TrainConfig) -> float:
    """lr0 * lr_final_factor ** (step / (steps - 1))."""
    if cfg.steps == 1:
        return cfg.lr0
    if not 0 <= step < cfg.steps:
        raise ValueError(f"step {step} outside [0, {cfg.steps})")
    if step == cfg.steps - 1:
        return cfg.lr0 * cfg.lr_final_factor
    return cfg.lr0 * cfg.lr_final_factor ** (step / (cfg.steps - 1))


def sgd_step(params: ParamStore, lr: float, momentum: float, weight_decay: float,
             velocity: dict[str, np.ndarray]) -> None:
    """v <- momentum*v + g + wd*theta; theta <- theta - lr*v; gradients are zeroed afterwards.

    Frozen parameters are left untouched.
    """
    for name, p in params.items():
        if p.trainable:
            if p.grad.shape != p.value.shape:
                raise ShapeError(f"{name}: gradient shape {p.grad.shape} != value shape {p.value.shape}")
            v = velocity.get(name)
            if v is None:
                v = velocity[name] = np.zeros_like(p.value)
            v *= momentum
            v += p.grad
            if weight_decay:
                v += weight_decay * p.value
            p.value -= lr * v
    params.zero_grad()


# ---------------------------------------------------------------------------
# checkpoints


def encode_checkpoint(params: ParamStore, step: int = 0) -> bytes:
    buf = io.BytesIO()
    buf.write(struct.pack("<4sIQI", CKPT_MAGIC, CKPT_VERSION, step, len(params)))
    for name, p in params.items():
        raw = name.encode("utf-8")
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<B", p.value.ndim))
        buf.write(struct.pack(f"<{p.value.ndim}Q", *p.value.shape))
        buf.write(p.value.astype("<f8").tobytes())
    return buf.getvalue()


def decode_checkpoint(data: bytes, name: str = "<bytes>"):
    """Returns (ParamStore, step)."""

    def need(off, n, what):
        if off + n > len(data):
            raise CheckpointError(f"{name}: truncated while reading {what} at byte offset {off}")

    need(0, 20, "header")
    magic, version, step, count = struct.unpack_from("<4sIQI", data, 0)
    if magic != CKPT_MAGIC:
        raise CheckpointError(f"{name}: bad magic {magic!r}")
    if version != CKPT_VERSION:
        raise CheckpointError(f"{name}: checkpoint version {version} is not supported (expected {CKPT_VERSION})")
    off = 20
    store = ParamStore()
    for _ in range(count):
        need(off, 2, "name length")
        (n,) = struct.unpack_from("<H", data, off)
        off += 2
        need(off, n + 1, "name")
        pname = data[off:off + n].decode("utf-8")
        off += n
        ndim = data[off]
        off += 1
        need(off, 8 * ndim, f"dims of {pname}")
        dims = struct.unpack_from(f"<{ndim}Q", data, off)
        off += 8 * ndim
        size = int(np.prod(dims)) if ndim else 1
        need(off, 8 * size, f"values of {pname}")
        value = np.frombuffer(data, "<f8", size, off).astype(np.float64).reshape(dims)
        off += 8 * size
        store.add(pname, value)
    if off != len(data):
        raise CheckpointError(f"{name}: {len(data) - off} trailing bytes after the last entry")
    return store, step


def save_checkpoint(path, params: ParamStore, step: int = 0) -> None:
    Path(path).write_bytes(encode_checkpoint(params, step))


def load_checkpoint(path):
    path = Path(path)
    return decode_checkpoint(path.read_bytes(), str(path))


def load_into(params: ParamStore, path) -> int:
    """Copy checkpoint values into an existing store; shapes must agree."""
    loaded, step = load_checkpoint(path)
    for name, p in loaded.items():
        if name not in params:
            raise CheckpointError(f"{path}: parameter {name} does not exist in the model")
        target = params[name].value
        if target.shape != p.value.shape:
            raise CheckpointError(f"{path}: parameter {name} has shape {p.value.shape}, model expects {target.shape}")
        target[...] = p.value
    return step


def model_config_from_store(store: ParamStore, base: ModelConfig | None = None) -> ModelConfig:
    """Recover widths from parameter shapes so checkpoints are self-describing."""
    base = base or ModelConfig()
    kw = dataclasses.asdict(base)
    if "teacher.conv3.w" in store:
        kw["teacher_channels"] = tuple(store.value(f"teacher.conv{i}.w").shape[3] for i in (1, 2, 3))
    if "teacher_cls.w" in store:
        kw["class_count"] = store.value("teacher_cls.w").shape[1]
    if "student.fc1.w" in store:
        kw["student_widths"] = (store.value("student.fc1.w").shape[1], store.value("student.fc2.w").shape[1])
    if "head.w" in store:
        kw["embed_dim"] = store.value("head.w").shape[1]
    return ModelConfig(**kw)


# ---------------------------------------------------------------------------
# config files and metrics


def _convert(value: str, ftype, key):
    t = str(ftype)
    try:
        if "tuple" in t:
            parts = [s.strip() for s in value.split(",") if s.strip()]
            return tuple(int(s) for s in parts) if "int" in t else tuple(parts)
        if "bool" in t:
            if value.lower() in ("1", "true", "yes"):
                return True
            if value.lower() in ("0", "false", "no"):
                return False
            raise ValueError(value)
        if "int" in t:
            return int(value)
        if "float" in t:
            return float(value)
        return value
    except ValueError:
        raise ValueError(f"config key {key}: cannot parse {value!r} as {t}") from None


CONFIG_FIELDS = {f.name: (TrainConfig, f.type) for f in dataclasses.fields(TrainConfig)}
CONFIG_FIELDS.update({f.name: (ModelConfig, f.type) for f in dataclasses.fields(ModelConfig)})


def parse_config_text(text: str) -> dict:
    """``key=value`` lines -> typed dict; unknown keys are errors."""
    out = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValueError(f"config line {lineno}: expected key=value, got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in CONFIG_FIELDS:
            raise ValueError(f"config line {lineno}: unknown key {key!r}")
        out[key] = _convert(value, CONFIG_FIELDS[key][1], key)
    return out


def split_config(values: dict):
    """Split a flat dict into (TrainConfig kwargs, ModelConfig kwargs)."""
    tkw = {k: v for k, v in values.items() if CONFIG_FIELDS[k][0] is TrainConfig}
    mkw = {k: v for k, v in values.items() if CONFIG_FIELDS[k][0] is ModelConfig}
    return tkw, mkw


def format_config(cfg: TrainConfig, model_cfg: ModelConfig | None = None) -> str:
    lines = []
    for obj in (cfg, model_cfg):
        if obj is None:
            continue
        for f in dataclasses.fields(obj):
            v = getattr(obj, f.name)
            if isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            lines.append(f"{f.name}={v}")
    return "\n".join(lines) + "\n"


def fmt_float(x: float) -> str:
    return f"{x:.16e}"


def write_metrics(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRICS_HEADER)
        for r in rows:
            w.writerow([r["step"]] + [fmt_float(r[k]) for k in METRICS_HEADER[1:]])


def read_metrics(path) -> list[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [{"step": int(r["step"]), **{k: float(r[k]) for k in METRICS_HEADER[1:]}} for r in rows]


# ---------------------------------------------------------------------------
# per-frame preparation


class PreparedFrame:
    """A frame with its point cloud, student inputs, voxel groups and (lazily) teacher features."""

    def __init__(self, frame, voxel_size):
        self.frame = frame
        self.cloud = back_project(frame.color, frame.depth, frame.intr)
        self.inputs = student_input(self.cloud)
        self.groups = voxel_groups(self.inputs, voxel_size)
        self.point_labels = frame.labels.reshape(-1)[self.cloud.pixel_index]
        self._fmap = None

    @property
    def height(self):
        return self.frame.depth.shape[0]

    @property
    def width(self):
        return self.frame.depth.shape[1]

    def teacher_map(self, params, cached=True):
        if cached and self._fmap is not None:
            return self._fmap, None
        fmap, cache = teacher_forward_train(self.frame.color, params)
        if cached:
            self._fmap = fmap
        return fmap, cache

    def pixel_rc(self, pixel_rows):
        return np.divmod(pixel_rows, self.width)


def prepare_frames(frames, voxel_size):
    return [PreparedFrame(f, voxel_size) for f in frames]


def pooled_labels(labels: np.ndarray, factor: int = TEACHER_STRIDE) -> np.ndarray:
    h, w = labels.shape
    return labels.reshape(h // factor, factor, w // factor, factor).max(axis=(1, 3))


# ---------------------------------------------------------------------------
# stage 1: teacher


def run_teacher_pretrain(frames, cfg: TrainConfig, model_cfg: ModelConfig | None = None, progress=None):
    """Cross-entropy pretraining of ``teacher.*`` and ``teacher_cls.*`` on pooled labels."""
    model_cfg = model_cfg or ModelConfig()
    if not frames:
        raise ValueError("teacher pretraining needs at least one frame")
    params = init_teacher(ParamStore(), model_cfg, make_rng(cfg.seed, STREAM_INIT))
    rng = make_rng(cfg.seed, STREAM_BATCH)
    velocity: dict[str, np.ndarray] = {}
    targets = [pooled_labels(f.labels) for f in frames]
    rows = []
    for step in range(cfg.steps):
        lr = lr_schedule(step, cfg)
        total = 0.0
        for i in rng.integers(len(frames), size=cfg.batch_frames):
            fmap, cache = teacher_forward_train(frames[i].color, params)
            h, w, c = fmap.shape
            flat = fmap.reshape(-1, c)
            logits = classifier_forward(flat, params, name="teacher_cls")
            lab = targets[i].reshape(-1)
            if (lab < 0).all():
                continue
            out = losses.cross_entropy(logits, lab)
            total += out.value
            dflat = classifier_backward(out.grads["logits"], flat, params, name="teacher_cls")
            teacher_backward(dflat.reshape(h, w, c), cache, params)
        _check_finite(total, step, rows)
        sgd_step(params, lr, cfg.momentum, cfg.weight_decay, velocity)
        rows.append({"step": step, "lr": lr, "loss_sum": total, "loss_mean": total / cfg.batch_frames,
                     "pos_sim_mean": float("nan")})
        if progress:
            progress(rows[-1])
    return params, rows


def _check_finite(total, step, rows):
    if not math.isfinite(total):
        last = rows[-1] if rows else None
        raise TrainingDiverged(f"non-finite loss at step {step}; last finite metrics: {last}")


# ---------------------------------------------------------------------------
# stage 2: pixel-to-point transfer


def build_student_store(teacher: ParamStore, cfg: TrainConfig, model_cfg: ModelConfig) -> ParamStore:
    """Teacher (loaded) plus freshly initialised UPL, student, head and, for PPKD, kd classifier.

    The UPL stays frozen for the baselines, whose pixel side is detached.
    """
    rng = make_rng(cfg.seed, STREAM_INIT)
    params = ParamStore().merge(teacher)
    init_upl(params, model_cfg, rng)
    init_student(params, model_cfg, rng)
    if cfg.loss_kind == "ppkd":
        init_classifier(params, "kd_cls", model_cfg.embed_dim, model_cfg.class_count, rng)
    for ns in cfg.frozen:
        params.set_trainable(ns, False)
    if cfg.loss_kind != "ppnce":
        # only ppnce sends gradient into the pixel side
        params.set_trainable("upl", False)
    return params


def student_namespaces(params: ParamStore):
    return [n for n in params.names() if not (in_namespace(n, "teacher") or in_namespace(n, "teacher_cls"))]


def _frame_embeddings(prep: PreparedFrame, params, pairs, rng, teacher_frozen):
    corr = sample_correspondences(prep.cloud, pairs, rng)
    v, u = prep.pixel_rc(corr.pixel_rows)
    fmap, tcache = prep.teacher_map(params, cached=teacher_frozen)
    z2d, c2 = upl_sample_train(fmap, params, prep.height, prep.width, v, u)
    z3d, c3 = student_forward_train(prep.inputs, params, prep.groups, rows=corr.point_rows)
    return dict(corr=corr, v=v, u=u, fmap=fmap, tcache=tcache, z2d=z2d, c2=c2, z3d=z3d, c3=c3)


def _backprop_frame(item, params, g3, g2):
    if g3 is not None:
        student_backward(g3, item["c3"], params)
    if g2 is not None:
        if item["tcache"] is None and not (params.is_trainable("upl.w") or params.is_trainable("upl.b")):
            return
        dfmap = upl_backward(g2, item["c2"], params)
        if item["tcache"] is not None:
            teacher_backward(dfmap, item["tcache"], params)


def pretrain_batch_loss(items, params, cfg: TrainConfig, model_cfg: ModelConfig, scale: float):
    """Evaluate ``cfg.loss_kind`` on a batch, accumulate scaled gradients. Returns (loss_sum, terms)."""
    kind = cfg.loss_kind
    tau = model_cfg.tau
    if kind == "ppnce" and cfg.cross_frame:
        z3 = np.concatenate([it["z3d"] for it in items])
        z2 = np.concatenate([it["z2d"] for it in items])
        out = losses.ppnce(z3, z2, tau)
        off = 0
        for it in items:
            m = len(it["z3d"])
            _backprop_frame(it, params, scale * out.grads["z3d"][off:off + m], scale * out.grads["z2d"][off:off + m])
            off += m
        return out.value, len(z3)
    if kind == "global_nce":
        pooled = [(losses.pool_normalize(it["z3d"]), losses.pool_normalize(it["z2d"])[0]) for it in items]
        p3 = np.concatenate([p[0][0] for p in pooled])
        p2 = np.concatenate([p[1] for p in pooled])
        out = losses.global_nce(p3, p2, tau)
        for b, it in enumerate(items):
            pz, div = pooled[b][0]
            g = losses.pool_normalize_backward(scale * out.grads["z3d"][b:b + 1], pz, div, len(it["z3d"]))
            _backprop_frame(it, params, g, None)
        return out.value, len(items)
    total, terms = 0.0, 0
    for it in items:
        if kind == "ppnce":
            out = losses.ppnce(it["z3d"], it["z2d"], tau)
            _backprop_frame(it, params, scale * out.grads["z3d"], scale * out.grads["z2d"])
            terms += len(it["z3d"])
        elif kind == "global_l2":
            out = losses.global_l2(it["z3d"], it["z2d"])
            _backprop_frame(it, params, scale * out.grads["z3d"], None)
            terms += 1
        else:  # ppkd
            tmap = teacher_logits(it["fmap"], params)
            prep_h, prep_w = it["c2"][1], it["c2"][2]
            tl = bilinear_sample(tmap, prep_h, prep_w, it["v"], it["u"])
            sl = classifier_forward(it["z3d"], params, name="kd_cls")
            out = losses.ppkd(tl, sl, cfg.kd_temp)
            dz = classifier_backward(scale * out.grads["student_logits"], it["z3d"], params, name="kd_cls")
            _backprop_frame(it, params, dz, None)
            terms += len(it["z3d"])
        total += out.value
    return total, terms


def run_pretrain(frames, teacher: ParamStore, cfg: TrainConfig, model_cfg: ModelConfig | None = None,
                 progress=None, prepared=None):
    """Pretrain UPL + student + head against the frozen teacher.

    Returns (params, metrics rows). ``params`` holds the teacher too; use
    :func:`student_store` to strip it before saving.
    """
    model_cfg = model_cfg or model_config_from_store(teacher)
    if not frames and not prepared:
        raise ValueError("pretraining needs a non-empty dataset")
    preps = prepared or prepare_frames(frames, model_cfg.voxel_size)
    params = build_student_store(teacher, cfg, model_cfg)
    teacher_frozen = all(not params.is_trainable(n) for n in params.names() if in_namespace(n, "teacher"))
    rng = make_rng(cfg.seed, STREAM_BATCH)
    velocity: dict[str, np.ndarray] = {}
    rows = []
    for step in range(cfg.steps):
        lr = lr_schedule(step, cfg)
        picks = rng.integers(len(preps), size=cfg.batch_frames)
        items = [_frame_embeddings(preps[i], params, cfg.pairs_per_frame, rng, teacher_frozen) for i in picks]
        n_pairs = sum(len(it["z3d"]) for it in items)
        scale = 1.0 / n_pairs if cfg.grad_scale == "mean" else 1.0
        total, terms = pretrain_batch_loss(items, params, cfg, model_cfg, scale)
        pos = float(np.mean(np.concatenate([np.einsum("ij,ij->i", it["z3d"], it["z2d"]) for it in items])))
        _check_finite(total, step, rows)
        sgd_step(params, lr, cfg.momentum, cfg.weight_decay, velocity)
        rows.append({"step": step, "lr": lr, "loss_sum": total, "loss_mean": total / terms, "pos_sim_mean": pos})
        if progress:
            progress(rows[-1])
    return params, rows


def student_store(params: ParamStore) -> ParamStore:
    """Everything except the teacher namespaces."""
    out = ParamStore()
    for n in student_namespaces(params):
        out.add(n, params.value(n).copy())
    return out


# ---------------------------------------------------------------------------
# whole-pipeline gradient check

GRADCHECK_MODEL = ModelConfig(embed_dim=8, teacher_channels=(4, 4, 6), student_widths=(5, 7), voxel_size=0.2)


def pipeline_grad_check(loss_kind: str = "ppnce", seed: int = 0, sample_count: int = 32, step: float = 1e-6,
                        frozen=("teacher", "teacher_cls"), cross_frame: bool = False) -> float:
    """Finite-difference check of the full transfer pipeline at tiny widths.

    Two small rendered frames, 12 pairs each. Biases are drawn positive so
    that no ReLU of the tiny network sits on its kink at the probe point.
    Returns the largest relative error over the sampled coordinates.
    """
    from .numerics import grad_check
    from . import synthdata

    model_cfg = GRADCHECK_MODEL
    frames = synthdata.generate_dataset(1, 2, seed, min_valid=256)
    preps = prepare_frames(frames, model_cfg.voxel_size)
    rng = make_rng(seed, 2)
    teacher = init_teacher(ParamStore(), model_cfg, rng)
    cfg = TrainConfig(loss_kind=loss_kind, seed=seed, frozen=tuple(frozen), cross_frame=cross_frame,
                      batch_frames=2, pairs_per_frame=12)
    params = build_student_store(teacher, cfg, model_cfg)
    for name, p in params.items():
        if name.endswith(".b"):
            p.value[...] = rng.uniform(0.05, 0.3, p.value.shape)
    teacher_frozen = not any(params.is_trainable(n) for n in params.names() if in_namespace(n, "teacher"))

    def loss(p):
        pick = make_rng(seed, 3)
        items = [_frame_embeddings(prep, p, cfg.pairs_per_frame, pick, False) for prep in preps]
        if teacher_frozen:
            for it in items:
                it["tcache"] = None
        total, _ = pretrain_batch_loss(items, p, cfg, model_cfg, 1.0)
        return total

    return grad_check(loss, params, step, sample_count, make_rng(seed, 4))
