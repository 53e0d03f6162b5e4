"""The reference protocol: fixed datasets, teacher, pretraining runs and probes.

Everything the acceptance suite measures is produced here so that the
numbers can be regenerated with one call. Artifacts (datasets, checkpoints,
metrics) are written under a working directory and reused when present.
"""
from __future__ import annotations

import dataclasses
import json
import logging
import time
from dataclasses import dataclass
from pathlib import Path

from . import evalkit, synthdata, trainer
from .models import SMALL_WIDTHS, ModelConfig
from .numerics import make_rng

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Split:
    scenes: int
    frames_per_scene: int
    seed: int

    def generate(self):
        return synthdata.generate_dataset(self.scenes, self.frames_per_scene, self.seed)


TRAIN_SPLIT = Split(8, 32, 7)
HELD_SPLIT = Split(2, 32, 8)

TEACHER_CONFIG = trainer.TrainConfig(lr0=0.003, steps=800, batch_frames=8, seed=1)
# Gradients are divided by the pair count so the rate does not depend on the
# batch size. lr0=0.5 collapses every embedding to one vector at this scale;
# 0.005 is the largest tested rate that trains stably.
PRETRAIN_LR = 0.005
PRETRAIN_GRAD_SCALE = "mean"
PRETRAIN_STEPS = 2000
PRETRAIN_SEED = 3

RETRIEVAL_PAIRS = 256
RETRIEVAL_SEED = 5
PROBE_SEED = 0
PROBE_STEPS = 500
LABELED_FRACTIONS = (1.0, 0.5, 0.3, 0.15)
DIVERSITY_SAMPLE = 1024
DIVERSITY_SEED = 9
ABLATION_LOSSES = ("ppnce", "ppkd", "global_l2", "global_nce")


def pretrain_config(loss_kind: str = "ppnce", steps: int = PRETRAIN_STEPS) -> trainer.TrainConfig:
    return trainer.TrainConfig(lr0=PRETRAIN_LR, steps=steps, loss_kind=loss_kind, seed=PRETRAIN_SEED,
                               grad_scale=PRETRAIN_GRAD_SCALE)


class Reference:
    """Lazily computed reference artifacts rooted at ``workdir``."""

    def __init__(self, workdir, progress=None):
        self.root = Path(workdir)
        self.root.mkdir(parents=True, exist_ok=True)
        self.progress = progress
        self._frames = {}
        self._preps = {}
        self.timings: dict[str, float] = {}

    # data

    def frames(self, split: str):
        if split not in self._frames:
            spec = TRAIN_SPLIT if split == "train" else HELD_SPLIT
            d = self.root / f"data_{split}"
            if (d / synthdata.MANIFEST).exists():
                frames = synthdata.read_dataset(d)
            else:
                frames = spec.generate()
                synthdata.write_dataset(d, frames, spec.seed)
                # the file format quantises colour; train on what is on disk
                frames = synthdata.read_dataset(d)
            self._frames[split] = frames
        return self._frames[split]

    def prepared(self, split: str, voxel_size: float = ModelConfig().voxel_size):
        key = (split, voxel_size)
        if key not in self._preps:
            self._preps[key] = trainer.prepare_frames(self.frames(split), voxel_size)
        return self._preps[key]

    # training

    def _timed(self, key, fn):
        t = time.perf_counter()
        out = fn()
        self.timings[key] = time.perf_counter() - t
        return out

    def teacher(self):
        path = self.root / "teacher.ckpt"
        if not path.exists():
            params, rows = self._timed("teacher", lambda: trainer.run_teacher_pretrain(
                self.frames("train"), TEACHER_CONFIG, ModelConfig(), self.progress))
            trainer.save_checkpoint(path, params, TEACHER_CONFIG.steps)
            trainer.write_metrics(self.root / "teacher_metrics.csv", rows)
        return trainer.load_checkpoint(path)[0]

    def student(self, loss_kind: str = "ppnce", widths=None):
        """(params with teacher, metrics rows) of a reference pretraining run."""
        widths = tuple(widths or ModelConfig().student_widths)
        tag = f"{loss_kind}_{widths[0]}x{widths[1]}"
        path = self.root / f"student_{tag}.ckpt"
        mpath = self.root / f"metrics_{tag}.csv"
        teacher = self.teacher()
        model_cfg = ModelConfig(student_widths=widths)
        cfg = pretrain_config(loss_kind)
        if not path.exists():
            params, rows = self._timed(tag, lambda: trainer.run_pretrain(
                None, teacher, cfg, model_cfg, self.progress, prepared=self.prepared("train")))
            trainer.save_checkpoint(path, trainer.student_store(params), cfg.steps)
            trainer.write_metrics(mpath, rows)
        params = trainer.build_student_store(teacher, cfg, model_cfg)
        trainer.load_into(params, path)
        return params, trainer.read_metrics(mpath)

    def initial_student(self, loss_kind: str = "ppnce"):
        return trainer.build_student_store(self.teacher(), pretrain_config(loss_kind), ModelConfig())

    # evaluation

    def retrieval(self, params, per_frame: bool = False):
        return evalkit.retrieval_top1(self.prepared("held"), params, RETRIEVAL_PAIRS,
                                      make_rng(RETRIEVAL_SEED), per_frame)

    def probe(self, params, fraction: float = 1.0):
        return evalkit.linear_probe(self.prepared("train"), self.prepared("held"), params,
                                    ModelConfig().class_count, PROBE_STEPS, PROBE_SEED, fraction)

    def scratch(self, widths=None):
        cfg = ModelConfig(student_widths=tuple(widths or ModelConfig().student_widths))
        return evalkit.scratch_student(cfg, PROBE_SEED)

    def diversity(self, frames: int = 64):
        preps = self.prepared("held")[:frames]
        return evalkit.feature_diversity(preps, self.teacher(), DIVERSITY_SAMPLE, make_rng(DIVERSITY_SEED))

    def probe_table(self, params, widths=None):
        """{fraction: (pretrained mIoU, scratch mIoU)} over the labelled fractions."""
        scratch = self.scratch(widths)
        return {f: (self.probe(params, f).mean_iou, self.probe(scratch, f).mean_iou) for f in LABELED_FRACTIONS}

    def save_summary(self, summary: dict) -> Path:
        path = self.root / "summary.json"
        path.write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
        return path


def protocol() -> dict:
    """The reference settings as plain data (written next to the artifacts)."""
    return {
        "train_split": dataclasses.asdict(TRAIN_SPLIT),
        "held_split": dataclasses.asdict(HELD_SPLIT),
        "teacher": dataclasses.asdict(TEACHER_CONFIG),
        "pretrain": dataclasses.asdict(pretrain_config()),
        "small_widths": list(SMALL_WIDTHS),
        "retrieval_pairs": RETRIEVAL_PAIRS,
        "probe_steps": PROBE_STEPS,
        "labeled_fractions": list(LABELED_FRACTIONS),
    }
