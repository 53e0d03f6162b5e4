"""Synthetic labelled RGB-D frames rendered from boxes on a floor, and their on-disk format.

World frame is +Y up. A scene is a floor slab (class 0) plus axis-aligned
boxes. Frames are rendered by casting one ray per pixel through a pinhole
camera and keeping the nearest slab-method hit.

Frame file (little-endian)::

    "PPKF" | u32 version=1 | u32 W | u32 H | f32 fx fy cx cy | u32 K
    u8  rgb[H*W*3]    (round-half-even of 255 * colour)
    f32 depth[H*W]
    i8  labels[H*W]

The manifest is a text file whose first line is
``count=<n> classes=<K> seed=<s>`` followed by one frame file name per line.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import kernels
from .geometry import DEFAULT_INTRINSICS, CameraIntrinsics
from .numerics import make_rng

MAGIC = b"PPKF"
VERSION = 1
HEADER = struct.Struct("<4sIII4fI")
MANIFEST = "manifest.txt"
ROOM_MIN = (-3.0, 0.0, -3.0)
ROOM_MAX = (3.0, 3.0, 3.0)
FLOOR_TOP = 0.02
LIGHT = np.array([0.4, 1.0, 0.3]) / np.linalg.norm([0.4, 1.0, 0.3])

# base colours per class; member colours scatter around these
PALETTE = np.array([
    [0.55, 0.50, 0.45],  # floor
    [0.80, 0.25, 0.20],
    [0.20, 0.60, 0.30],
    [0.25, 0.35, 0.80],
    [0.85, 0.75, 0.25],
    [0.60, 0.30, 0.70],
])
COLOR_JITTER = 0.08


class FrameFormatError(ValueError):
    pass


@dataclass
class Box:
    lo: np.ndarray
    hi: np.ndarray
    color: np.ndarray
    label: int


@dataclass
class SceneSpec:
    boxes: list[Box]
    bounds: tuple[np.ndarray, np.ndarray]
    class_count: int = 6

    def __post_init__(self):
        if not self.boxes:
            raise ValueError("a scene needs at least the floor box")
        lo, hi = self.bounds
        for b in self.boxes:
            if not (0 <= b.label < self.class_count):
                raise ValueError(f"box label {b.label} outside 0..{self.class_count - 1}")
            if (b.lo < lo).any() or (b.hi > hi).any():
                raise ValueError("box extends outside the scene bounds")

    def arrays(self):
        return (np.array([b.lo for b in self.boxes]), np.array([b.hi for b in self.boxes]))


@dataclass
class RgbdFrame:
    color: np.ndarray
    depth: np.ndarray
    labels: np.ndarray
    intr: CameraIntrinsics = field(default_factory=lambda: DEFAULT_INTRINSICS)
    class_count: int = 6


def class_palette(class_count: int) -> np.ndarray:
    if class_count <= len(PALETTE):
        return PALETTE[:class_count]
    extra = make_rng(class_count, 99).uniform(0.15, 0.9, size=(class_count - len(PALETTE), 3))
    return np.vstack([PALETTE, extra])


def generate_scene(rng, box_count: int, class_count: int = 6) -> SceneSpec:
    """Floor slab plus ``box_count`` boxes resting on it, colours drawn around per-class bases."""
    if box_count < 1:
        raise ValueError("box_count must be >= 1")
    if class_count < 2:
        raise ValueError("class_count must be >= 2")
    palette = class_palette(class_count)
    lo_room, hi_room = np.array(ROOM_MIN), np.array(ROOM_MAX)

    def color_for(label):
        return np.clip(palette[label] + rng.normal(0.0, COLOR_JITTER, 3), 0.05, 0.95)

    boxes = [Box(lo_room.copy(), np.array([hi_room[0], FLOOR_TOP, hi_room[2]]), color_for(0), 0)]
    for _ in range(box_count):
        label = int(rng.integers(1, class_count))
        size = np.array([rng.uniform(0.3, 1.0), rng.uniform(0.2, 1.2), rng.uniform(0.3, 1.0)])
        cx, cz = rng.uniform(-2.4, 2.4, size=2)
        lo = np.array([cx - size[0] / 2, FLOOR_TOP, cz - size[2] / 2])
        hi = lo + size
        lo = np.maximum(lo, lo_room)
        hi = np.minimum(hi, hi_room)
        boxes.append(Box(lo, hi, color_for(label), label))
    return SceneSpec(boxes, (lo_room, hi_room), class_count)


def camera_basis(position, target):
    """Rotation whose columns are the camera's right, down and forward axes in world coordinates."""
    fwd = np.asarray(target, dtype=np.float64) - np.asarray(position, dtype=np.float64)
    n = np.linalg.norm(fwd)
    if n < 1e-12:
        raise ValueError("degenerate camera pose: look-at target equals the camera position")
    fwd = fwd / n
    up = np.array([0.0, 1.0, 0.0])
    right = np.cross(fwd, up)
    if np.linalg.norm(right) < 1e-9:
        right = np.cross(fwd, np.array([0.0, 0.0, 1.0]))
    right /= np.linalg.norm(right)
    down = np.cross(fwd, right)
    return np.stack([right, down, fwd], axis=1)


def pixel_rays(intr: CameraIntrinsics) -> np.ndarray:
    """Camera-frame ray directions (z = 1) for every pixel in row-major order."""
    v, u = np.divmod(np.arange(intr.width * intr.height), intr.width)
    return np.stack([(u - intr.cx) / intr.fx, (v - intr.cy) / intr.fy, np.ones(u.shape)], axis=1)


def render_frame(scene: SceneSpec, camera_pose, intr: CameraIntrinsics = DEFAULT_INTRINSICS,
                 noise_sigma: float = 0.0, rng=None) -> RgbdFrame:
    """Ray-cast one RGB-D frame. ``camera_pose`` is (position, look-at target).

    Depth is stored at float32 precision so the frame survives the file format bit-exactly.
    """
    if noise_sigma < 0:
        raise ValueError("noise_sigma must be >= 0")
    position, target = (np.asarray(p, dtype=np.float64) for p in camera_pose)
    rot = camera_basis(position, target)
    lo, hi = scene.arrays()
    if ((position > lo) & (position < hi)).all(axis=1).any():
        raise ValueError("camera position lies inside a box")
    dirs_cam = pixel_rays(intr)
    dirs = np.ascontiguousarray(dirs_cam @ rot.T)
    t, box, axis = kernels.get("ray_aabb_nearest")(position, dirs, np.ascontiguousarray(lo),
                                                   np.ascontiguousarray(hi), 1e-6)
    hit = box >= 0
    h, w = intr.height, intr.width
    depth = np.where(hit, t, 0.0).astype(np.float32).astype(np.float64)
    labels = np.full(h * w, -1, dtype=np.int64)
    colors = np.array([b.color for b in scene.boxes])
    box_labels = np.array([b.label for b in scene.boxes])
    labels[hit] = box_labels[box[hit]]
    color = np.zeros((h * w, 3))
    if hit.any():
        ax = axis[hit]
        normal = np.zeros((int(hit.sum()), 3))
        normal[np.arange(len(ax)), ax] = -np.sign(dirs[hit, ax])
        shade = 0.6 + 0.4 * np.maximum(normal @ LIGHT, 0.0)
        color[hit] = colors[box[hit]] * shade[:, None]
    if noise_sigma > 0:
        if rng is None:
            raise ValueError("noise_sigma > 0 needs an rng")
        color = color + rng.normal(0.0, noise_sigma, size=color.shape)
    color = np.clip(color, 0.0, 1.0)
    return RgbdFrame(color.reshape(h, w, 3), depth.reshape(h, w), labels.reshape(h, w), intr, scene.class_count)


def sample_camera_pose(scene: SceneSpec, rng):
    """Random position in free space looking at the centre of a random object box."""
    lo_room, hi_room = scene.bounds
    objects = scene.boxes[1:] or scene.boxes
    lo, hi = scene.arrays()
    while True:
        pos = np.array([rng.uniform(lo_room[0] + 0.2, hi_room[0] - 0.2),
                        rng.uniform(1.4, 2.4),
                        rng.uniform(lo_room[2] + 0.2, hi_room[2] - 0.2)])
        target_box = objects[int(rng.integers(len(objects)))]
        target = (target_box.lo + target_box.hi) / 2
        inside = ((pos > lo) & (pos < hi)).all(axis=1).any()
        if not inside and np.linalg.norm(target - pos) > 0.5:
            return pos, target


def generate_dataset(scenes: int, frames_per_scene: int, seed: int, box_count: int = 6,
                     noise_sigma: float = 0.02, intr: CameraIntrinsics = DEFAULT_INTRINSICS,
                     class_count: int = 6, min_valid: int = 1024) -> list[RgbdFrame]:
    """Render ``scenes * frames_per_scene`` frames; poses with fewer than
    ``min_valid`` hit pixels are redrawn."""
    frames = []
    for s in range(scenes):
        scene = generate_scene(make_rng(seed, 2 * s), box_count, class_count)
        rng = make_rng(seed, 2 * s + 1)
        for _ in range(frames_per_scene):
            for _attempt in range(200):
                pose = sample_camera_pose(scene, rng)
                frame = render_frame(scene, pose, intr, noise_sigma, rng)
                if int((frame.depth > 0).sum()) >= min_valid:
                    break
            else:
                raise RuntimeError(f"scene {s}: no camera pose with {min_valid} valid pixels")
            frames.append(frame)
    return frames


# ---------------------------------------------------------------------------
# file format


def encode_frame(frame: RgbdFrame) -> bytes:
    h, w = frame.depth.shape
    i = frame.intr
    head = HEADER.pack(MAGIC, VERSION, w, h, i.fx, i.fy, i.cx, i.cy, frame.class_count)
    rgb = np.rint(np.clip(frame.color, 0.0, 1.0) * 255.0).astype(np.uint8)
    return b"".join([head, rgb.tobytes(), frame.depth.astype("<f4").tobytes(),
                     frame.labels.astype(np.int8).tobytes()])


def decode_frame(data: bytes, name: str = "<bytes>") -> RgbdFrame:
    if len(data) < HEADER.size:
        raise FrameFormatError(f"{name}: truncated header at byte offset {len(data)} (need {HEADER.size})")
    magic, version, w, h, fx, fy, cx, cy, k = HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise FrameFormatError(f"{name}: bad magic {magic!r} at byte offset 0")
    if version != VERSION:
        raise FrameFormatError(f"{name}: unsupported version {version} at byte offset 4")
    if w == 0 or h == 0 or w > 1 << 16 or h > 1 << 16:
        raise FrameFormatError(f"{name}: bad extents {w}x{h} at byte offset 8")
    n = w * h
    expected = HEADER.size + n * 8
    if len(data) != expected:
        where = min(len(data), expected)
        raise FrameFormatError(f"{name}: {'truncated' if len(data) < expected else 'trailing data'} "
                               f"at byte offset {where} (expected {expected} bytes, got {len(data)})")
    off = HEADER.size
    rgb = np.frombuffer(data, np.uint8, n * 3, off).reshape(h, w, 3)
    off += n * 3
    depth = np.frombuffer(data, "<f4", n, off).astype(np.float64).reshape(h, w)
    off += n * 4
    labels = np.frombuffer(data, np.int8, n, off).astype(np.int64).reshape(h, w)
    try:
        intr = CameraIntrinsics(float(fx), float(fy), float(cx), float(cy), w, h)
    except ValueError as exc:
        raise FrameFormatError(f"{name}: bad intrinsics at byte offset 16: {exc}") from None
    return RgbdFrame(rgb.astype(np.float64) / 255.0, depth, labels, intr, k)


def write_frame(path, frame: RgbdFrame) -> None:
    Path(path).write_bytes(encode_frame(frame))


def read_frame(path) -> RgbdFrame:
    path = Path(path)
    return decode_frame(path.read_bytes(), str(path))


def frame_name(i: int) -> str:
    return f"frame_{i:05d}.ppkf"


def write_dataset(directory, frames, seed: int) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    k = frames[0].class_count if frames else 0
    names = [frame_name(i) for i in range(len(frames))]
    for name, frame in zip(names, frames):
        write_frame(d / name, frame)
    lines = [f"count={len(frames)} classes={k} seed={seed}"] + names
    (d / MANIFEST).write_text("\n".join(lines) + "\n")
    return d


def read_manifest(directory):
    d = Path(directory)
    path = d / MANIFEST
    try:
        lines = path.read_text().splitlines()
    except FileNotFoundError:
        raise FileNotFoundError(f"no dataset manifest at {path}") from None
    if not lines:
        raise FrameFormatError(f"{path}: empty manifest")
    try:
        fields = dict(item.split("=", 1) for item in lines[0].split())
        header = {"count": int(fields["count"]), "classes": int(fields["classes"]), "seed": int(fields["seed"])}
    except (KeyError, ValueError):
        raise FrameFormatError(f"{path}: malformed header line {lines[0]!r}") from None
    names = [ln for ln in lines[1:] if ln.strip()]
    if len(names) != header["count"]:
        raise FrameFormatError(f"{path}: header says count={header['count']} but lists {len(names)} files")
    return header, names


def read_dataset(directory) -> list[RgbdFrame]:
    d = Path(directory)
    _, names = read_manifest(d)
    return [read_frame(d / n) for n in names]
