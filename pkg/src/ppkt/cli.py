"""Command-line entry point: ``ppkt <command> [flags]``.

Exit codes: 0 success, 1 usage error, 2 runtime error. Environment
variables are never consulted; all randomness flows from ``--seed``.
"""
from __future__ import annotations

import argparse
import dataclasses
import math
import sys
import time
from pathlib import Path

from . import evalkit, synthdata, trainer
from .models import ModelConfig, ParamStore
from .numerics import make_rng

TRAIN_FIELDS = {f.name: f for f in dataclasses.fields(trainer.TrainConfig)}
MODEL_FIELDS = {f.name: f for f in dataclasses.fields(ModelConfig)}

HELP = {
    "lr0": "initial learning rate",
    "momentum": "SGD momentum",
    "weight_decay": "L2 weight decay added to every gradient",
    "steps": "optimisation steps",
    "batch_frames": "frames sampled (with replacement) per step",
    "pairs_per_frame": "point-pixel pairs per frame",
    "lr_final_factor": "final learning rate as a fraction of lr0",
    "loss_kind": f"objective, one of {', '.join(trainer.LOSS_KINDS)}",
    "frozen": "comma-separated parameter namespaces kept fixed",
    "cross_frame": "draw ppnce negatives from the whole batch instead of one frame",
    "kd_temp": "distillation temperature for ppkd",
    "grad_scale": "'mean' divides batch gradients by the pair count, 'sum' keeps them summed",
    "embed_dim": "projected feature dimension",
    "student_widths": "student hidden widths w1,w2",
    "tau": "NCE temperature",
    "voxel_size": "voxel edge in metres for the student's context block",
}


class UsageError(Exception):
    pass


class Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _fmt_default(v):
    if isinstance(v, tuple):
        return ",".join(str(x) for x in v)
    return str(v)


def _add_fields(p, fields, names, overrides=None):
    """Flags named after config fields; defaults are shown in help but applied later."""
    overrides = overrides or {}
    for name in names:
        f = fields[name]
        default = overrides.get(name, f.default)
        flag = "--loss" if name == "loss_kind" else "--" + name.replace("_", "-")
        kw = dict(dest=name, default=argparse.SUPPRESS, help=f"{HELP[name]} (default: {_fmt_default(default)})")
        if name == "cross_frame":
            kw["action"] = "store_true"
        elif name == "loss_kind":
            kw["choices"] = trainer.LOSS_KINDS
        elif name == "grad_scale":
            kw["choices"] = ("mean", "sum")
        else:
            kw["metavar"] = name.upper()
        p.add_argument(flag, **kw)


def _config_values(args, fields, overrides=None) -> dict:
    """Defaults, then --config file values, then explicit flags."""
    values = {name: overrides.get(name, fields[name].default) if overrides else fields[name].default
              for name in fields}
    if getattr(args, "config", None):
        try:
            text = Path(args.config).read_text()
        except OSError as exc:
            raise UsageError(f"cannot read config file: {exc}") from None
        try:
            parsed = trainer.parse_config_text(text)
        except ValueError as exc:
            raise UsageError(f"{args.config}: {exc}") from None
        values.update({k: v for k, v in parsed.items() if k in fields})
    for name in fields:
        if name in vars(args):
            raw = getattr(args, name)
            if isinstance(raw, str):
                try:
                    raw = trainer._convert(raw, fields[name].type, name)
                except ValueError as exc:
                    raise UsageError(str(exc)) from None
            values[name] = raw
    return values


def _progress(every):
    t0 = time.perf_counter()

    def report(row):
        if row["step"] % every == 0:
            sim = row.get("pos_sim_mean", math.nan)
            sim = "" if math.isnan(sim) else f"  pos_sim {sim:.4f}"
            print(f"step {row['step']:5d}  lr {row['lr']:.5f}  loss_mean {row['loss_mean']:.4f}{sim}  "
                  f"{time.perf_counter() - t0:.1f}s", flush=True)

    return report


def _class_count(data_dir) -> int:
    header, _ = synthdata.read_manifest(data_dir)
    return header["classes"]


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(args):
    frames = synthdata.generate_dataset(args.scenes, args.frames_per_scene, args.seed, args.box_count,
                                        args.noise_sigma, class_count=args.classes)
    synthdata.write_dataset(args.out, frames, args.seed)
    print(f"wrote {len(frames)} frames to {args.out}")


TEACHER_DEFAULTS = {"lr0": 0.003, "steps": 800}


def cmd_pretrain_teacher(args):
    values = _config_values(args, TRAIN_FIELDS, {**TEACHER_DEFAULTS, "seed": args.seed})
    values["seed"] = args.seed
    cfg = trainer.TrainConfig(**values)
    frames = synthdata.read_dataset(args.data)
    model_cfg = ModelConfig(class_count=_class_count(args.data))
    params, rows = trainer.run_teacher_pretrain(frames, cfg, model_cfg, _progress(args.log_every))
    trainer.save_checkpoint(args.out, params, cfg.steps)
    if args.metrics:
        trainer.write_metrics(args.metrics, rows)
    print(f"teacher checkpoint written to {args.out}")


def _pretrain_configs(args):
    tvals = _config_values(args, TRAIN_FIELDS)
    tvals["seed"] = args.seed
    mvals = _config_values(args, MODEL_FIELDS)
    return trainer.TrainConfig(**tvals), mvals


def cmd_pretrain(args):
    cfg, mvals = _pretrain_configs(args)
    teacher, _ = trainer.load_checkpoint(args.teacher)
    model_cfg = trainer.model_config_from_store(teacher, ModelConfig(**mvals))
    frames = synthdata.read_dataset(args.data)
    params, rows = trainer.run_pretrain(frames, teacher, cfg, model_cfg, _progress(args.log_every))
    trainer.save_checkpoint(args.out, trainer.student_store(params), cfg.steps)
    trainer.write_metrics(args.metrics, rows)
    print(f"student checkpoint written to {args.out}; final loss_mean {rows[-1]['loss_mean']:.4f}")


def cmd_gradcheck(args):
    err = trainer.pipeline_grad_check(args.loss, args.seed, args.samples, args.step)
    print(f"max relative error {err:.3e} ({args.loss})")
    return 0 if err < 1e-4 else 2


def _eval_store(teacher_path, student_path, voxel_size):
    teacher, _ = trainer.load_checkpoint(teacher_path)
    student, _ = trainer.load_checkpoint(student_path)
    params = ParamStore().merge(teacher).merge(student)
    cfg = trainer.model_config_from_store(params, ModelConfig(voxel_size=voxel_size))
    return params, cfg


def cmd_eval_retrieval(args):
    params, cfg = _eval_store(args.teacher, args.student, args.voxel_size)
    preps = trainer.prepare_frames(synthdata.read_dataset(args.data), cfg.voxel_size)
    acc = evalkit.retrieval_top1(preps, params, args.pairs, make_rng(args.seed))
    print(f"retrieval top-1 {acc:.4f} over {len(preps)} frames, {args.pairs} pairs each")
    if args.metrics:
        evalkit.export_metrics([evalkit.MetricsRow("retrieval_top1", "held-out", acc,
                                                   context=f"pairs={args.pairs} seed={args.seed}")], args.metrics)


def cmd_probe(args):
    mvals = _config_values(args, MODEL_FIELDS)
    if args.student == "none":
        cfg = ModelConfig(**mvals)
        params = evalkit.scratch_student(cfg, args.seed)
    else:
        params, _ = trainer.load_checkpoint(args.student)
        cfg = trainer.model_config_from_store(params, ModelConfig(**mvals))
    k = _class_count(args.train_data)
    train = trainer.prepare_frames(synthdata.read_dataset(args.train_data), cfg.voxel_size)
    held = trainer.prepare_frames(synthdata.read_dataset(args.held_data), cfg.voxel_size)
    res = evalkit.linear_probe(train, held, params, k, args.probe_steps, args.seed, args.fraction,
                               finetune=args.finetune)
    print(f"mean accuracy {res.mean_acc:.4f}  mean IoU {res.mean_iou:.4f}")
    for c in sorted(res.class_iou):
        print(f"  class {c}: accuracy {res.class_acc[c]:.4f}  IoU {res.class_iou[c]:.4f}")
    for c in res.flagged:
        print(f"  class {c}: absent from the labelled training points, excluded")
    ctx = f"student={args.student} fraction={args.fraction} seed={args.seed}"
    if args.metrics:
        evalkit.export_metrics(res.rows(ctx), args.metrics)
    if args.embeddings:
        emb, lab = evalkit.sampled_embeddings(held, params, args.embedding_points, make_rng(args.seed, 11))
        evalkit.export_embeddings(args.embeddings, emb, lab)


def cmd_diversity(args):
    teacher, _ = trainer.load_checkpoint(args.teacher)
    if args.student:
        teacher = teacher.merge(trainer.load_checkpoint(args.student)[0])
    preps = trainer.prepare_frames(synthdata.read_dataset(args.data), args.voxel_size)
    g, p = evalkit.feature_diversity(preps, teacher, args.sample, make_rng(args.seed))
    print(f"global_mean_cos {g:.4f}  pixel_mean_cos {p:.4f}")
    if args.metrics:
        evalkit.export_metrics([evalkit.MetricsRow("global_mean_cos", "held-out", g),
                                evalkit.MetricsRow("pixel_mean_cos", "held-out", p)], args.metrics)


# ---------------------------------------------------------------------------
# parser


def build_parser() -> Parser:
    parser = Parser(prog="ppkt", description="Pixel-to-point knowledge transfer on synthetic RGB-D data.")
    sub = parser.add_subparsers(dest="command", metavar="command", parser_class=Parser)
    sub.required = True
    d = "(default: %(default)s)"

    p = sub.add_parser("gen-data", help="render a synthetic RGB-D dataset")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--scenes", type=int, default=8, help=f"number of scenes {d}")
    p.add_argument("--frames-per-scene", type=int, default=32, help=f"frames rendered per scene {d}")
    p.add_argument("--box-count", type=int, default=6, help=f"object boxes per scene {d}")
    p.add_argument("--classes", type=int, default=6, help=f"number of classes {d}")
    p.add_argument("--noise-sigma", type=float, default=0.02, help=f"colour noise std {d}")
    p.add_argument("--seed", type=int, default=0, help=f"random seed {d}")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("pretrain-teacher", help="supervised pretraining of the 2D teacher")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--out", required=True, help="teacher checkpoint to write")
    p.add_argument("--metrics", help="per-step metrics CSV (default: none)")
    p.add_argument("--seed", type=int, default=0, help=f"random seed {d}")
    p.add_argument("--config", help="key=value config file; flags override it (default: none)")
    p.add_argument("--log-every", type=int, default=100, help=f"progress interval in steps {d}")
    _add_fields(p, TRAIN_FIELDS, ["lr0", "momentum", "weight_decay", "steps", "batch_frames", "lr_final_factor"],
                TEACHER_DEFAULTS)
    p.set_defaults(func=cmd_pretrain_teacher)

    p = sub.add_parser("pretrain", help="pixel-to-point pretraining of the point student")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--teacher", required=True, help="teacher checkpoint")
    p.add_argument("--out", required=True, help="student checkpoint to write")
    p.add_argument("--metrics", required=True, help="per-step metrics CSV")
    p.add_argument("--seed", type=int, default=0, help=f"random seed {d}")
    p.add_argument("--config", help="key=value config file; flags override it (default: none)")
    p.add_argument("--log-every", type=int, default=100, help=f"progress interval in steps {d}")
    _add_fields(p, TRAIN_FIELDS, [n for n in TRAIN_FIELDS if n != "seed"])
    _add_fields(p, MODEL_FIELDS, ["embed_dim", "student_widths", "tau", "voxel_size"])
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("gradcheck", help="finite-difference check of the full pipeline")
    p.add_argument("--loss", choices=trainer.LOSS_KINDS, default="ppnce", help=f"objective {d}")
    p.add_argument("--seed", type=int, default=0, help=f"random seed {d}")
    p.add_argument("--samples", type=int, default=32, help=f"coordinates probed per parameter {d}")
    p.add_argument("--step", type=float, default=1e-6, help=f"central-difference step {d}")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("eval-retrieval", help="top-1 point-to-pixel retrieval on a dataset")
    p.add_argument("--data", required=True, help="dataset directory (held-out)")
    p.add_argument("--teacher", required=True, help="teacher checkpoint")
    p.add_argument("--student", required=True, help="student checkpoint")
    p.add_argument("--pairs", type=int, default=256, help=f"pairs per frame {d}")
    p.add_argument("--voxel-size", type=float, default=0.025, help=f"student voxel size in metres {d}")
    p.add_argument("--seed", type=int, default=0, help=f"random seed {d}")
    p.add_argument("--metrics", help="metrics CSV (default: none)")
    p.set_defaults(func=cmd_eval_retrieval)

    p = sub.add_parser("probe", help="linear probe for point segmentation")
    p.add_argument("--train-data", required=True, help="labelled training dataset directory")
    p.add_argument("--held-data", required=True, help="held-out dataset directory")
    p.add_argument("--student", required=True, help="student checkpoint, or 'none' for a random-init student")
    p.add_argument("--probe-steps", type=int, default=500, help=f"classifier SGD steps {d}")
    p.add_argument("--fraction", type=float, default=1.0, help=f"fraction of training frames labelled {d}")
    p.add_argument("--finetune", action="store_true", help="train the backbone too (default: off)")
    p.add_argument("--seed", type=int, default=0, help=f"random seed {d}")
    p.add_argument("--config", help="key=value config file; flags override it (default: none)")
    p.add_argument("--metrics", help="metrics CSV (default: none)")
    p.add_argument("--embeddings", help="dump held-out embeddings with labels to this CSV (default: none)")
    p.add_argument("--embedding-points", type=int, default=64, help=f"points per frame in the dump {d}")
    _add_fields(p, MODEL_FIELDS, ["embed_dim", "student_widths", "voxel_size"])
    p.set_defaults(func=cmd_probe)

    p = sub.add_parser("diversity", help="mean pairwise cosine of global vs pixel features")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--teacher", required=True, help="teacher checkpoint")
    p.add_argument("--student", help="student checkpoint whose UPL is used (default: fresh UPL)")
    p.add_argument("--sample", type=int, default=1024, help=f"pixel features sampled {d}")
    p.add_argument("--voxel-size", type=float, default=0.025, help=f"student voxel size in metres {d}")
    p.add_argument("--seed", type=int, default=0, help=f"random seed {d}")
    p.add_argument("--metrics", help="metrics CSV (default: none)")
    p.set_defaults(func=cmd_diversity)
    return parser


RUNTIME_ERRORS = (OSError, ValueError, KeyError, RuntimeError, synthdata.FrameFormatError,
                  trainer.CheckpointError, trainer.TrainingDiverged)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args) or 0
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    except RUNTIME_ERRORS as exc:
        print(f"ppkt: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
