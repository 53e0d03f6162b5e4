import math

import numpy as np
import pytest

from ppkt import evalkit as ek
from ppkt import models as M
from ppkt import synthdata as sd
from ppkt import trainer as tr
from ppkt.numerics import make_rng

from conftest import TINY


@pytest.fixture(scope="module")
def default_preps():
    return tr.prepare_frames(sd.generate_dataset(1, 24, 31), 0.025)


@pytest.fixture(scope="module")
def random_full_store():
    cfg = M.ModelConfig()
    s = M.init_teacher(M.ParamStore(), cfg, make_rng(2))
    M.init_upl(s, cfg, make_rng(3))
    M.init_student(s, cfg, make_rng(4))
    return s


# retrieval


def test_top1_tie_policy_and_oracle():
    z = np.eye(4)
    assert ek.top1_accuracy(z, z) == 1.0
    # anchor 0 ties with pixel 1: a tie is not a loss
    z3 = np.array([[1.0, 1.0], [0.0, 1.0]]) / np.array([[math.sqrt(2)], [1.0]])
    z2 = np.array([[1.0, 0.0], [0.0, 1.0]])
    assert ek.top1_accuracy(z3, z2) == 1.0
    assert ek.top1_accuracy(z2[::-1], z2) == 0.0


def test_retrieval_oracle_embeddings_exactly_one(default_preps, random_full_store):
    rng = make_rng(0)
    for prep in default_preps[:5]:
        _, z2 = ek.pair_embeddings(prep, random_full_store, 256, rng)
        assert ek.top1_accuracy(z2, z2) == 1.0


def test_retrieval_at_init_is_chance(default_preps, random_full_store):
    accs = ek.retrieval_top1(default_preps, random_full_store, 256, make_rng(1), per_frame=True)
    assert len(accs) >= 20
    hits = int(round(sum(a * 256 for a in accs)))
    lo, hi = ek.binomial_interval(256 * len(accs), 1 / 256, 0.99)
    assert lo <= hits <= hi


def test_binomial_interval_contains_mean():
    lo, hi = ek.binomial_interval(5120, 1 / 256)
    assert lo < 20 < hi and lo >= 0


def test_retrieval_skips_small_frames(default_preps, random_full_store, caplog):
    with pytest.raises(ValueError, match="skipped"):
        ek.retrieval_top1(default_preps[:2], random_full_store, 10**6)
    with pytest.raises(ValueError):
        ek.retrieval_top1(default_preps[:2], random_full_store, 1)


# probe


def test_segmentation_metrics_hand_case():
    truth = np.array([0, 0, 1, 1, 2, 2])
    pred = np.array([0, 1, 1, 1, 2, 0])
    r = ek.segmentation_metrics(pred, truth, 3)
    assert r.class_acc == {0: 0.5, 1: 1.0, 2: 0.5}
    assert r.class_iou == {0: 1 / 3, 1: 2 / 3, 2: 0.5}
    assert r.mean_iou <= r.mean_acc
    flagged = ek.segmentation_metrics(pred, truth, 3, train_classes={0, 1})
    assert flagged.flagged == [2] and 2 not in flagged.class_iou


def test_probe_on_one_hot_features():
    rng = make_rng(5)
    y = rng.integers(0, 6, 600)
    x = np.eye(6)[y]
    r = ek.probe_features(x[:400], y[:400], x[400:], y[400:], 6, probe_steps=100, rng=make_rng(1))
    assert r.mean_acc == 1.0 and r.mean_iou == 1.0


def test_zero_step_probe_is_uniform_guess():
    rng = make_rng(6)
    y = np.repeat(np.arange(6), 50)
    x = rng.normal(size=(300, 8))
    r = ek.probe_features(x, y, x, y, 6, probe_steps=0)
    assert r.mean_acc == pytest.approx(1 / 6)


def test_linear_probe_deterministic_and_consistent(default_preps):
    params = ek.scratch_student(TINY, 0)
    prep = tr.prepare_frames([p.frame for p in default_preps[:6]], TINY.voxel_size)
    a = ek.linear_probe(prep[:4], prep[4:], params, 6, probe_steps=30, seed=2, points_per_frame=128)
    b = ek.linear_probe(prep[:4], prep[4:], params, 6, probe_steps=30, seed=2, points_per_frame=128)
    assert a == b
    assert a.mean_iou <= a.mean_acc
    assert all(a.class_iou[c] <= a.class_acc[c] for c in a.class_iou)
    ft = ek.linear_probe(prep[:4], prep[4:], params, 6, probe_steps=5, seed=2, points_per_frame=128, finetune=True)
    assert 0 <= ft.mean_iou <= ft.mean_acc <= 1


def test_labeled_subset():
    items = list(range(20))
    sub = ek.labeled_subset(items, 0.15, 3)
    assert len(sub) == 3 and sub == sorted(sub)
    assert ek.labeled_subset(items, 1.0, 3) == items
    with pytest.raises(ValueError):
        ek.labeled_subset(items, 0.0, 3)


def test_scratch_student_has_no_teacher():
    names = ek.scratch_student(TINY, 1).names()
    assert "student.fc1.w" in names and not any(n.startswith("teacher") for n in names)


# diversity


def test_mean_pairwise_cos_examples():
    assert ek.mean_pairwise_cos(np.eye(5)) == 0.0
    assert ek.mean_pairwise_cos(np.ones((3, 4))) == pytest.approx(1.0, abs=1e-15)
    with pytest.raises(ValueError):
        ek.mean_pairwise_cos(np.ones((1, 4)))


def test_diversity_duplicate_frames(default_preps, random_full_store):
    twin = [default_preps[0], default_preps[0]]
    g, p = ek.feature_diversity(twin, random_full_store, 64, make_rng(0))
    assert g == pytest.approx(1.0, abs=1e-12)
    assert -1.0 <= p <= 1.0


# export


def test_metrics_rows_validation():
    with pytest.raises(ValueError):
        ek.MetricsRow("accuracy", "held-out", 1.0)
    with pytest.raises(ValueError):
        ek.MetricsRow("retrieval_top1", "test", 1.0)
    with pytest.raises(ValueError):
        ek.MetricsRow("retrieval_top1", "held-out", float("nan"))


def test_export_empty_and_round_trip(tmp_path):
    ek.export_metrics([], tmp_path / "e.csv")
    assert (tmp_path / "e.csv").read_text() == "name,split,value,step,context\n"
    rows = [ek.MetricsRow("retrieval_top1", "held-out", 1 / 3, 2000, "seed=3"),
            ek.MetricsRow("pixel_mean_cos", "train", -math.pi * 1e-7)]
    ek.export_metrics(rows, tmp_path / "m.csv")
    assert ek.read_metrics_rows(tmp_path / "m.csv") == rows


def test_embedding_dump(tmp_path, default_preps):
    params = ek.scratch_student(TINY, 0)
    prep = tr.prepare_frames([p.frame for p in default_preps[:3]], TINY.voxel_size)
    emb, lab = ek.sampled_embeddings(prep, params, 40, make_rng(0))
    ek.export_embeddings(tmp_path / "emb.csv", emb, lab)
    lines = (tmp_path / "emb.csv").read_text().splitlines()
    assert lines[0] == ",".join([f"e{i}" for i in range(TINY.embed_dim)] + ["label"])
    assert len(lines) - 1 == len(emb) == 120
    back, blab = ek.read_embeddings(tmp_path / "emb.csv")
    assert np.array_equal(back, emb) and np.array_equal(blab, lab)
