"""Evaluation of a pretrained student: pair retrieval, linear probe, feature diversity, CSV export."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import losses
from .geometry import sample_correspondences
from .models import (
    ModelConfig,
    ParamStore,
    classifier_backward,
    classifier_forward,
    init_classifier,
    init_student,
    init_upl,
    student_backward,
    student_features_train,
    student_forward_train,
    teacher_forward,
    upl_sample,
    upl_sample_train,
)
from .numerics import l2_normalize_rows, make_rng
from .trainer import TrainConfig, fmt_float, lr_schedule, model_config_from_store, sgd_step

log = logging.getLogger(__name__)

METRIC_NAMES = (
    "retrieval_top1",
    "probe_mean_acc",
    "probe_mean_iou",
    "probe_class_acc",
    "probe_class_iou",
    "global_mean_cos",
    "pixel_mean_cos",
    "pretrain_minus_scratch_iou",
)
METRICS_COLUMNS = ["name", "split", "value", "step", "context"]


@dataclass
class MetricsRow:
    name: str
    split: str
    value: float
    step: int = -1
    context: str = ""

    def __post_init__(self):
        if self.name not in METRIC_NAMES:
            raise ValueError(f"unknown metric name {self.name!r}")
        if self.split not in ("train", "held-out"):
            raise ValueError(f"split must be 'train' or 'held-out', got {self.split!r}")
        if not math.isfinite(self.value):
            raise ValueError(f"metric {self.name} has non-finite value {self.value}")


# ---------------------------------------------------------------------------
# retrieval


def top1_accuracy(z3d: np.ndarray, z2d: np.ndarray) -> float:
    """Fraction of 3D anchors whose own pixel has the highest dot product.

    Rank is 1 + the number of pixels scoring strictly higher than the true one.
    """
    s = z3d @ z2d.T
    beaten = (s > np.diagonal(s)[:, None]).sum(axis=1)
    return float(np.mean(beaten == 0))


def pair_embeddings(prep, params, pairs, rng):
    corr = sample_correspondences(prep.cloud, pairs, rng)
    v, u = prep.pixel_rc(corr.pixel_rows)
    fmap, _ = prep.teacher_map(params)
    z2d = upl_sample(fmap, params, prep.height, prep.width, v, u)
    z3d, _ = student_forward_train(prep.inputs, params, prep.groups, rows=corr.point_rows)
    return z3d, z2d


def retrieval_top1(preps, params: ParamStore, pairs: int = 256, rng=None, per_frame: bool = False):
    """Mean top-1 retrieval over frames; frames with too few points are skipped."""
    if pairs < 2:
        raise ValueError("retrieval needs at least two pairs per frame")
    rng = rng if rng is not None else make_rng(0)
    accs = []
    for i, prep in enumerate(preps):
        if len(prep.cloud) < pairs:
            log.warning("frame %d has %d points (< %d pairs); skipped", i, len(prep.cloud), pairs)
            continue
        z3d, z2d = pair_embeddings(prep, params, pairs, rng)
        accs.append(top1_accuracy(z3d, z2d))
    if not accs:
        raise ValueError("every frame was skipped: not enough valid points for retrieval")
    return accs if per_frame else float(np.mean(accs))


def binomial_interval(n: int, p: float, level: float = 0.99):
    """Two-sided central interval on the success count of Binomial(n, p)."""
    from scipy.stats import binom  # only used by this helper

    lo = binom.ppf((1 - level) / 2, n, p)
    hi = binom.isf((1 - level) / 2, n, p)
    return int(lo), int(hi)


# ---------------------------------------------------------------------------
# linear probe


@dataclass
class ProbeResult:
    class_acc: dict[int, float]
    class_iou: dict[int, float]
    mean_acc: float
    mean_iou: float
    flagged: list[int] = field(default_factory=list)

    def rows(self, context: str = "") -> list[MetricsRow]:
        out = [MetricsRow("probe_mean_acc", "held-out", self.mean_acc, context=context),
               MetricsRow("probe_mean_iou", "held-out", self.mean_iou, context=context)]
        for c, v in self.class_acc.items():
            out.append(MetricsRow("probe_class_acc", "held-out", v, context=f"{context} class={c}".strip()))
        for c, v in self.class_iou.items():
            out.append(MetricsRow("probe_class_iou", "held-out", v, context=f"{context} class={c}".strip()))
        return out


def segmentation_metrics(pred: np.ndarray, truth: np.ndarray, class_count: int, train_classes=None) -> ProbeResult:
    """Per-class recall and IoU over pooled points, averaged over classes present in ``truth``.

    Classes missing from ``train_classes`` are flagged and left out of both means.
    """
    present = sorted(int(c) for c in np.unique(truth) if 0 <= c < class_count)
    flagged = [c for c in present if train_classes is not None and c not in train_classes]
    acc, iou = {}, {}
    for c in present:
        if c in flagged:
            continue
        tp = int(np.sum((pred == c) & (truth == c)))
        fn = int(np.sum((pred != c) & (truth == c)))
        fp = int(np.sum((pred == c) & (truth != c)))
        acc[c] = tp / (tp + fn)
        iou[c] = tp / (tp + fp + fn)
    if not acc:
        raise ValueError("no evaluable classes in the held-out split")
    return ProbeResult(acc, iou, float(np.mean(list(acc.values()))), float(np.mean(list(iou.values()))), flagged)


def _probe_points(preps, points_per_frame, rng):
    """Sampled labelled point rows per frame."""
    picks = []
    for prep in preps:
        valid = np.flatnonzero(prep.point_labels >= 0)
        k = min(points_per_frame, len(valid))
        picks.append(np.sort(valid[rng.permutation(len(valid))[:k]]))
    return picks


def point_features(preps, params, picks):
    feats, labels = [], []
    for prep, rows in zip(preps, picks):
        h3, _ = student_features_train(prep.inputs, params, prep.groups, rows=rows)
        feats.append(h3)
        labels.append(prep.point_labels[rows])
    return np.concatenate(feats), np.concatenate(labels)


def scratch_student(model_cfg: ModelConfig, seed: int) -> ParamStore:
    """Randomly initialised student, the 'no pretraining' baseline."""
    rng = make_rng(seed, 0)
    params = ParamStore()
    init_upl(params, model_cfg, rng)
    init_student(params, model_cfg, rng)
    return params


def labeled_subset(preps, fraction: float, seed: int):
    if not 0 < fraction <= 1:
        raise ValueError("labeled fraction must lie in (0, 1]")
    n = max(1, int(math.ceil(fraction * len(preps))))
    order = make_rng(seed, 7).permutation(len(preps))[:n]
    return [preps[i] for i in np.sort(order)]


def linear_probe(train_preps, held_preps, params: ParamStore, class_count: int, probe_steps: int = 500,
                 seed: int = 0, labeled_fraction: float = 1.0, points_per_frame: int = 512,
                 batch_points: int = 1024, lr: float = 0.1, finetune: bool = False) -> ProbeResult:
    """Train a linear classifier on frozen student features and score held-out points.

    Features are standardised with train-split statistics. With ``finetune``
    the student backbone is trained jointly (projection head excluded).
    """
    if finetune:
        return _finetune_probe(train_preps, held_preps, params, class_count, probe_steps, seed,
                               labeled_fraction, points_per_frame, lr)
    rng = make_rng(seed, 8)
    train = labeled_subset(train_preps, labeled_fraction, seed)
    xtr, ytr = point_features(train, params, _probe_points(train, points_per_frame, rng))
    xte, yte = point_features(held_preps, params, _probe_points(held_preps, points_per_frame, rng))
    return probe_features(xtr, ytr, xte, yte, class_count, probe_steps, rng, batch_points, lr)


def probe_features(xtr, ytr, xte, yte, class_count: int, probe_steps: int = 500, rng=None,
                   batch_points: int = 1024, lr: float = 0.1) -> ProbeResult:
    """Fit a zero-initialised linear classifier on standardised ``xtr`` and score ``xte``."""
    rng = rng if rng is not None else make_rng(0)
    mu = xtr.mean(axis=0)
    sd = xtr.std(axis=0) + 1e-6
    xtr = (xtr - mu) / sd
    xte = (xte - mu) / sd
    probe = init_classifier(ParamStore(), "probe", xtr.shape[1], class_count)
    cfg = TrainConfig(lr0=lr, steps=max(probe_steps, 1), lr_final_factor=0.1, weight_decay=0.0)
    velocity = {}
    for step in range(probe_steps):
        idx = rng.integers(len(xtr), size=min(batch_points, len(xtr)))
        out = losses.cross_entropy(classifier_forward(xtr[idx], probe, name="probe"), ytr[idx])
        classifier_backward(out.grads["logits"], xtr[idx], probe, name="probe")
        sgd_step(probe, lr_schedule(step, cfg), cfg.momentum, cfg.weight_decay, velocity)
    pred = classifier_forward(xte, probe, name="probe").argmax(axis=1)
    return segmentation_metrics(pred, yte, class_count, set(int(c) for c in np.unique(ytr)))


def _finetune_probe(train_preps, held_preps, params, class_count, steps, seed, fraction, points_per_frame, lr,
                    frames_per_step: int = 4, points_per_step: int = 256):
    rng = make_rng(seed, 8)
    params = params.copy()
    params.set_trainable("head", False)
    params.set_trainable("upl", False)
    train = labeled_subset(train_preps, fraction, seed)
    w2 = params.value("student.fc3.w").shape[1]
    init_classifier(params, "probe", w2, class_count)
    cfg = TrainConfig(lr0=lr, steps=max(steps, 1), lr_final_factor=0.1, weight_decay=0.0)
    velocity = {}
    seen = set()
    for step in range(steps):
        for i in rng.integers(len(train), size=frames_per_step):
            prep = train[i]
            valid = np.flatnonzero(prep.point_labels >= 0)
            rows = np.sort(valid[rng.permutation(len(valid))[:points_per_step]])
            h3, cache = student_features_train(prep.inputs, params, prep.groups, rows=rows)
            lab = prep.point_labels[rows]
            seen.update(int(c) for c in np.unique(lab))
            out = losses.cross_entropy(classifier_forward(h3, params, name="probe"), lab)
            g = out.grads["logits"] / frames_per_step
            dh3 = classifier_backward(g, h3, params, name="probe")
            student_backward(None, cache, params, grad_h3=dh3)
        sgd_step(params, lr_schedule(step, cfg), cfg.momentum, cfg.weight_decay, velocity)
    xte, yte = point_features(held_preps, params, _probe_points(held_preps, points_per_frame, rng))
    pred = classifier_forward(xte, params, name="probe").argmax(axis=1)
    return segmentation_metrics(pred, yte, class_count, seen or None)


# ---------------------------------------------------------------------------
# feature diversity


def mean_pairwise_cos(x: np.ndarray) -> float:
    """Mean cosine similarity over all unordered pairs of rows."""
    n = x.shape[0]
    if n < 2:
        raise ValueError("need at least two rows")
    z, _ = l2_normalize_rows(x)
    s = z @ z.T
    return float((s.sum() - np.trace(s)) / (n * (n - 1)))


def feature_diversity(preps, params: ParamStore, sample_size: int = 512, rng=None):
    """(global_mean_cos, pixel_mean_cos); lower means more diverse.

    Global features are mean-pooled teacher maps, one per frame. Pixel
    features are UPL outputs at randomly sampled valid pixels across frames;
    a store without a UPL gets a freshly initialised one drawn from ``rng``.
    """
    if len(preps) < 2:
        raise ValueError("feature diversity needs at least two frames")
    rng = rng if rng is not None else make_rng(0)
    if "upl.w" not in params:
        params = init_upl(params.copy(), model_config_from_store(params), rng)
    pooled, pixels = [], []
    per_frame = max(1, sample_size // len(preps))
    for prep in preps:
        fmap = teacher_forward(prep.frame.color, params)
        pooled.append(fmap.reshape(-1, fmap.shape[2]).mean(axis=0))
        valid = np.flatnonzero(prep.frame.depth.reshape(-1) > 0)
        pix = valid[rng.permutation(len(valid))[:per_frame]]
        v, u = np.divmod(pix, prep.width)
        pixels.append(upl_sample(fmap, params, prep.height, prep.width, v, u))
    return mean_pairwise_cos(np.array(pooled)), mean_pairwise_cos(np.concatenate(pixels))


# ---------------------------------------------------------------------------
# export


def export_metrics(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRICS_COLUMNS)
        for r in rows:
            w.writerow([r.name, r.split, fmt_float(r.value), r.step, r.context])


def read_metrics_rows(path) -> list[MetricsRow]:
    with open(path, newline="") as fh:
        return [MetricsRow(r["name"], r["split"], float(r["value"]), int(r["step"]), r["context"])
                for r in csv.DictReader(fh)]


def export_embeddings(path, embeddings: np.ndarray, labels: np.ndarray) -> None:
    """N x C embeddings plus an integer label column, header e0..e{C-1},label."""
    if embeddings.shape[0] != len(labels):
        raise ValueError("embeddings and labels differ in length")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([f"e{i}" for i in range(embeddings.shape[1])] + ["label"])
        for row, lab in zip(embeddings, labels):
            w.writerow([fmt_float(x) for x in row] + [int(lab)])


def read_embeddings(path):
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    return data[:, :-1], data[:, -1].astype(np.int64)


def sampled_embeddings(preps, params, points_per_frame, rng):
    """Student embeddings and labels for a random sample of labelled points per frame."""
    picks = _probe_points(preps, points_per_frame, rng)
    emb, lab = [], []
    for prep, rows in zip(preps, picks):
        z, _ = student_forward_train(prep.inputs, params, prep.groups, rows=rows)
        emb.append(z)
        lab.append(prep.point_labels[rows])
    return np.concatenate(emb), np.concatenate(lab)
