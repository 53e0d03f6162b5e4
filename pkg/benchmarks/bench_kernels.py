"""Time the compiled kernels against the numpy fallback.

    python3 benchmarks/bench_kernels.py [--repeat N]

Each kernel runs on inputs shaped like one training step (48x64 frames,
6x8 teacher maps) and on one whole pretraining step through the public API.
Outputs are compared bitwise before timing.
"""
import argparse
import timeit

import numpy as np

from ppkt import _pykernels, kernels, synthdata, trainer
from ppkt.models import ModelConfig
from ppkt.numerics import make_rng, resize_coords


def kernel_cases(rng):
    y0, y1, fy = resize_coords(6, 48)
    x0, x1, fx = resize_coords(8, 64)
    fmap = rng.normal(size=(6, 8, 128))
    grad = rng.normal(size=(48, 64, 128))
    h2 = rng.normal(size=(3072, 128))
    group = rng.integers(0, 2500, 3072)
    dcols = rng.normal(size=(24, 32, 3, 3, 16))
    scene = synthdata.generate_scene(rng, 6)
    lo, hi = scene.arrays()
    dirs = synthdata.pixel_rays(synthdata.DEFAULT_INTRINSICS)
    origin = np.array([0.0, 1.5, -2.5])
    return {
        "bilinear_fwd": (fmap, y0, y1, fy, x0, x1, fx),
        "bilinear_bwd": (grad, 6, 8, y0, y1, fy, x0, x1, fx),
        "segment_sum": (h2, group, 2500),
        "col2im": (dcols, 49, 65, 2),
        "ray_aabb_nearest": (origin, dirs, lo, hi, 1e-6),
    }


def same_bits(a, b):
    if isinstance(a, tuple):
        return all(same_bits(x, y) for x, y in zip(a, b))
    return np.ascontiguousarray(a).tobytes() == np.ascontiguousarray(b).tobytes()


def best_ms(fn, repeat):
    number = max(1, int(0.2 / max(timeit.timeit(fn, number=1), 1e-6)))
    return min(timeit.repeat(fn, number=number, repeat=repeat)) / number * 1e3


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    if "cython" not in kernels.available_backends():
        raise SystemExit("compiled kernels are not built; run `pip install -e . --no-build-isolation`")
    from ppkt import _ckernels

    print(f"{'kernel':<20}{'python ms':>12}{'cython ms':>12}{'speedup':>10}  bitwise")
    for name, inputs in kernel_cases(make_rng(0)).items():
        py, cy = getattr(_pykernels, name), getattr(_ckernels, name)
        ok = same_bits(py(*inputs), cy(*inputs))
        tp = best_ms(lambda: py(*inputs), args.repeat)
        tc = best_ms(lambda: cy(*inputs), args.repeat)
        print(f"{name:<20}{tp:>12.3f}{tc:>12.3f}{tp / tc:>10.1f}  {'same' if ok else 'DIFFERENT'}")

    frames = synthdata.generate_dataset(1, 8, 0)
    teacher = trainer.run_teacher_pretrain(frames, trainer.TrainConfig(steps=1, batch_frames=1))[0]
    cfg = trainer.TrainConfig(lr0=0.005, steps=5, seed=0, grad_scale="mean")
    prepared = trainer.prepare_frames(frames, ModelConfig().voxel_size)
    times, checkpoints = {}, {}
    for backend in ("python", "cython"):
        kernels.set_backend(backend)
        run = lambda: trainer.run_pretrain(None, teacher, cfg, ModelConfig(), prepared=prepared)
        times[backend] = best_ms(run, 3) / cfg.steps
        checkpoints[backend] = trainer.encode_checkpoint(trainer.student_store(run()[0]))
    ok = checkpoints["python"] == checkpoints["cython"]
    tp, tc = times["python"], times["cython"]
    print(f"{'pretrain step':<20}{tp:>12.3f}{tc:>12.3f}{tp / tc:>10.1f}  {'same' if ok else 'DIFFERENT'}")


if __name__ == "__main__":
    main()
