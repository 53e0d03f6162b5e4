import hashlib

import numpy as np
import pytest

from ppkt import geometry as geo
from ppkt import synthdata as sd
from ppkt.numerics import make_rng

CENTERED = geo.CameraIntrinsics(60.0, 60.0, 32.0, 24.0, 64, 48)


def wall_scene():
    wall = sd.Box(np.array([-1.0, -1.0, 2.0]), np.array([1.0, 1.0, 3.0]), np.array([0.5, 0.5, 0.5]), 0)
    return sd.SceneSpec([wall], (np.full(3, -3.0), np.full(3, 3.0)), 6)


def test_scene_counts_and_determinism():
    a = sd.generate_scene(make_rng(5), 1)
    assert len(a.boxes) == 2 and a.boxes[0].label == 0
    b = sd.generate_scene(make_rng(5), 1)
    for x, y in zip(a.boxes, b.boxes):
        assert x.lo.tobytes() == y.lo.tobytes() and x.hi.tobytes() == y.hi.tobytes()
        assert x.color.tobytes() == y.color.tobytes() and x.label == y.label


def test_scenes_inside_bounds():
    for s in range(100):
        scene = sd.generate_scene(make_rng(s), 6)
        lo, hi = scene.bounds
        for b in scene.boxes:
            assert np.all(b.lo >= lo) and np.all(b.hi <= hi) and np.all(b.lo < b.hi)
            assert 0 <= b.label < 6 and np.all((b.color >= 0) & (b.color <= 1))


def test_scene_validation():
    with pytest.raises(ValueError):
        sd.generate_scene(make_rng(0), 0)
    bad = sd.Box(np.zeros(3), np.full(3, 9.0), np.zeros(3), 0)
    with pytest.raises(ValueError, match="outside"):
        sd.SceneSpec([bad], (np.zeros(3), np.ones(3)))


def test_center_pixel_depth_on_facing_wall():
    frame = sd.render_frame(wall_scene(), ((0, 0, 0), (0, 0, 1)), CENTERED)
    assert abs(frame.depth[24, 32] - 2.0) < 1e-9
    assert frame.labels[24, 32] == 0
    assert 0.6 * 0.5 - 1e-12 <= frame.color[24, 32, 0] <= 0.5 + 1e-12


def test_degenerate_pose_rejected():
    with pytest.raises(ValueError, match="degenerate"):
        sd.render_frame(wall_scene(), ((0, 0, 0), (0, 0, 0)), CENTERED)


def test_camera_inside_box_rejected():
    with pytest.raises(ValueError, match="inside"):
        sd.render_frame(wall_scene(), ((0, 0, 2.5), (0, 0, 3)), CENTERED)


def test_render_deterministic():
    scene = sd.generate_scene(make_rng(1), 4)
    pose = sd.sample_camera_pose(scene, make_rng(2))
    a = sd.render_frame(scene, pose, noise_sigma=0.0)
    b = sd.render_frame(scene, pose, noise_sigma=0.0)
    assert a.color.tobytes() == b.color.tobytes() and a.depth.tobytes() == b.depth.tobytes()
    c = sd.render_frame(scene, pose, noise_sigma=0.05, rng=make_rng(3))
    d = sd.render_frame(scene, pose, noise_sigma=0.05, rng=make_rng(3))
    assert c.color.tobytes() == d.color.tobytes()


def test_hits_lie_on_labelled_box_surface():
    for seed in range(6):
        scene = sd.generate_scene(make_rng(seed), 6)
        pos, target = sd.sample_camera_pose(scene, make_rng(seed, 1))
        frame = sd.render_frame(scene, (pos, target), noise_sigma=0.02, rng=make_rng(seed, 2))
        valid = frame.depth > 0
        assert np.array_equal(valid, frame.labels >= 0)
        assert np.all((frame.color >= 0) & (frame.color <= 1))
        cloud = geo.back_project(frame.color, frame.depth, frame.intr)
        world = pos + cloud.coords @ sd.camera_basis(pos, target).T
        labels = frame.labels.reshape(-1)[cloud.pixel_index]
        for i, p in enumerate(world):
            ok = False
            for b in scene.boxes:
                if b.label != labels[i]:
                    continue
                inside = np.all(p >= b.lo - 1e-4) and np.all(p <= b.hi + 1e-4)
                on_face = np.min(np.minimum(np.abs(p - b.lo), np.abs(p - b.hi))) < 1e-4
                ok = ok or (inside and on_face)
            assert ok, f"pixel {cloud.pixel_index[i]} is off its box surface"


# file format


def test_frame_round_trip(tmp_path, small_frames):
    f = small_frames[0]
    sd.write_frame(tmp_path / "a.ppkf", f)
    g = sd.read_frame(tmp_path / "a.ppkf")
    assert g.depth.tobytes() == f.depth.tobytes()
    assert np.array_equal(g.labels, f.labels)
    assert np.array_equal(np.rint(g.color * 255), np.rint(f.color * 255))
    assert g.intr == f.intr and g.class_count == f.class_count


def test_header_layout(small_frames):
    data = sd.encode_frame(small_frames[0])
    assert data[:4] == b"PPKF"
    assert int.from_bytes(data[4:8], "little") == 1
    assert int.from_bytes(data[8:12], "little") == 64 and int.from_bytes(data[12:16], "little") == 48
    assert len(data) == 36 + 64 * 48 * 8


@pytest.mark.parametrize("mutate,pattern", [
    (lambda b: b[:100], r"truncated at byte offset 100"),
    (lambda b: b[:10], r"truncated header"),
    (lambda b: b"XXXX" + b[4:], r"bad magic .* byte offset 0"),
    (lambda b: b[:4] + (7).to_bytes(4, "little") + b[8:], r"version 7 at byte offset 4"),
    (lambda b: b[:8] + (0).to_bytes(4, "little") + b[12:], r"extents .* byte offset 8"),
    (lambda b: b + b"\0", r"trailing data"),
])
def test_corrupt_files_are_reported(tmp_path, small_frames, mutate, pattern):
    p = tmp_path / "bad.ppkf"
    p.write_bytes(mutate(sd.encode_frame(small_frames[0])))
    with pytest.raises(sd.FrameFormatError, match=pattern) as info:
        sd.read_frame(p)
    assert "bad.ppkf" in str(info.value)


def test_dataset_manifest_and_checksums(tmp_path):
    frames = sd.generate_dataset(4, 25, 3, min_valid=256)
    d = sd.write_dataset(tmp_path / "ds", frames, seed=3)
    header, names = sd.read_manifest(d)
    assert header == {"count": 100, "classes": 6, "seed": 3}
    on_disk = sorted(p.name for p in d.glob("*.ppkf"))
    assert names == on_disk
    for name, f in zip(names, frames):
        assert hashlib.sha256((d / name).read_bytes()).digest() == hashlib.sha256(sd.encode_frame(f)).digest()
    back = sd.read_dataset(d)
    assert all(a.depth.tobytes() == b.depth.tobytes() for a, b in zip(frames, back))


def test_manifest_count_mismatch(tmp_path, small_frames):
    d = sd.write_dataset(tmp_path, small_frames[:2], 0)
    text = (d / sd.MANIFEST).read_text().replace("count=2", "count=3")
    (d / sd.MANIFEST).write_text(text)
    with pytest.raises(sd.FrameFormatError, match="count=3"):
        sd.read_manifest(d)


def test_dataset_generation_deterministic():
    a = sd.generate_dataset(1, 3, 17)
    b = sd.generate_dataset(1, 3, 17)
    assert b"".join(map(sd.encode_frame, a)) == b"".join(map(sd.encode_frame, b))
    c = sd.generate_dataset(1, 3, 18)
    assert sd.encode_frame(a[0]) != sd.encode_frame(c[0])
