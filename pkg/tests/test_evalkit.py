import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from darkadapt.encoders import ToyVisualEncoder
from darkadapt.errors import InvalidInputError
from darkadapt.evalkit import (ActivationProfile, binned_from_scores, binned_metric, build_report,
                               channel_activation_profile, day2dark_gap, emit_report, evaluate, hamming_distance,
                               load_report, partition_metrics, profile_shift, top1_accuracy)
from darkadapt.toybench import BenchConfig, generate_clip, generate_dataset

PNG_MAGIC = b"\x89PNG\r\n\x1a\n"


def one_hot(idx, n):
    out = np.zeros((len(idx), n))
    out[np.arange(len(idx)), idx] = 1
    return out


def test_accuracy_examples():
    assert top1_accuracy(one_hot([0, 1, 2], 3), [0, 1, 2]) == 1.0
    assert top1_accuracy(one_hot([0, 0, 0, 0], 3), [0, 1, 2, 2]) == 0.25
    # tie resolves to the lowest index
    assert top1_accuracy([[0.5, 0.5]], [0]) == 1.0
    with pytest.raises(InvalidInputError):
        top1_accuracy(np.zeros((0, 3)), [])
    with pytest.raises(InvalidInputError):
        top1_accuracy(np.zeros((2, 3)), [0])


def test_accuracy_matches_counting_loop(rng):
    scores = rng.normal(size=(500, 7))
    labels = rng.integers(0, 7, size=500)
    hits = 0
    for row, y in zip(scores, labels):
        best = 0
        for j in range(1, 7):
            if row[j] > row[best]:
                best = j
        hits += best == y
    assert top1_accuracy(scores, labels) == hits / 500


def test_hamming_examples():
    y = np.array([[1, 0, 1, 0]])
    assert hamming_distance(y.astype(float), y) == 0.0
    assert hamming_distance(1.0 - y, y) == 1.0
    assert hamming_distance(np.array([[1, 1, 1, 0]], float), y) == 0.25
    assert hamming_distance(np.array([[0.5, 0.0, 0.5, 0.0]]), y) == 0.0
    with pytest.raises(InvalidInputError):
        hamming_distance(np.zeros((1, 3)), y)


def test_gap_sign():
    assert day2dark_gap(0.9, 0.6) == pytest.approx(0.3)
    assert day2dark_gap(0.1, 0.3, "hamming") == pytest.approx(0.2)
    assert day2dark_gap(None, 0.5) is None


def test_single_bin_equals_overall(rng):
    scores = rng.normal(size=(50, 4))
    labels = rng.integers(0, 4, size=50)
    ys = rng.uniform(0, 200, size=50)
    curve = binned_from_scores(scores, labels, ys, [0, 256])
    assert len(curve.bins) == 1 and curve.bins[0].value == top1_accuracy(scores, labels)


def test_two_bins_at_threshold_match_gap(rng):
    scores = rng.normal(size=(80, 4))
    labels = rng.integers(0, 4, size=80)
    ys = np.concatenate([rng.uniform(1, 39.5, 40), rng.uniform(41, 200, 40)])
    curve = binned_from_scores(scores, labels, ys, [0, 40, 256])
    day, dark, gap, n_day, n_dark = partition_metrics(scores, labels, ys, 40)
    assert curve.bins[1].value - curve.bins[0].value == pytest.approx(gap)
    assert (n_day, n_dark) == (40, 40)


def test_empty_bins_omitted_and_overflow():
    scores = one_hot([0, 1], 2)
    curve = binned_from_scores(scores, [0, 1], [5.0, 300.0], [0, 10, 20, 30])
    assert [(b.lo, b.hi) for b in curve.bins] == [(0.0, 10.0)]
    assert curve.overflow == 1 and curve.total == 2


@given(st.lists(st.floats(0, 255), min_size=1, max_size=60))
@settings(max_examples=50, deadline=None)
def test_bin_counts_conserve_clips(ys):
    n = len(ys)
    scores = np.eye(3)[np.arange(n) % 3]
    curve = binned_from_scores(scores, np.arange(n) % 3, ys, np.arange(0, 270, 10))
    assert curve.total == n


def test_binned_metric_with_callable():
    cfg = BenchConfig(frame_geometry=(2, 8, 8))
    clips = [generate_clip(c, y, seed=i, config=cfg) for i, (c, y) in enumerate([(0, 20), (1, 80), (2, 90)])]
    oracle = lambda cs: one_hot([c.label for c in cs], 8)  # noqa: E731
    curve = binned_metric(oracle, clips, [0, 40, 256])
    assert [b.value for b in curve.bins] == [1.0, 1.0]


def test_constant_encoder_profile_is_flat():
    cfg = BenchConfig(frame_geometry=(2, 8, 8))
    clips = [generate_clip(0, y, seed=i, config=cfg) for i, y in enumerate([15, 35, 60, 90, 120])]
    feats = np.tile(np.arange(6.0), (5, 1))
    prof = channel_activation_profile(None, clips, [0, 40, 80, 130], n_channels=6, activations=feats)
    m = prof.classes[0].matrix
    assert prof.classes[0].channels == list(range(6))
    assert np.allclose(m, m[0]) and prof.classes[0].counts.tolist() == [2, 1, 2]
    cross, adjacent = profile_shift(prof)
    assert cross == 0 and adjacent == 0


def test_profile_sampling_seeded(rng):
    cfg = BenchConfig(frame_geometry=(2, 8, 8))
    clips = [generate_clip(c, 50.0, seed=c, config=cfg) for c in range(3)]
    feats = rng.normal(size=(3, 20))
    a = channel_activation_profile(None, clips, [0, 256], n_channels=5, seed=1, activations=feats)
    b = channel_activation_profile(None, clips, [0, 256], n_channels=5, seed=1, activations=feats)
    assert all(a.classes[c].channels == b.classes[c].channels for c in range(3))
    back = ActivationProfile.from_dict(a.to_dict())
    assert np.array_equal(back.classes[1].matrix, a.classes[1].matrix)
    with pytest.raises(InvalidInputError):
        channel_activation_profile(None, clips, [0, 256], n_channels=21, activations=feats)


def test_profile_from_encoder():
    torch.manual_seed(0)
    cfg = BenchConfig(frame_geometry=(2, 8, 8))
    enc = ToyVisualEncoder((2, 8, 8), (2, 4, 4), d_v=8)
    clips = [generate_clip(0, y, seed=i, config=cfg) for i, y in enumerate([20, 60])]
    prof = channel_activation_profile(enc, clips, [0, 40, 256], n_channels=8)
    assert prof.classes[0].matrix.shape == (2, 8) and not np.isnan(prof.classes[0].matrix).any()


def _report(rng, n=60):
    scores = rng.normal(size=(n, 4))
    labels = rng.integers(0, 4, size=n)
    ys = rng.uniform(5, 150, size=n)
    return build_report(scores, labels, ys, [0, 40, 80, 160], fingerprints={"model": "abc"})


def test_report_files_deterministic(tmp_path, rng):
    rep = _report(rng)
    emit_report(rep, tmp_path / "a")
    emit_report(rep, tmp_path / "b")
    for name in ("report.json", "report.txt", "curve.csv", "partition.csv", "curve.png"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    rows = (tmp_path / "a" / "curve.csv").read_text().strip().splitlines()
    assert rows[0] == "bin_lo,bin_hi,n,accuracy" and len(rows) == 1 + 3
    assert (tmp_path / "a" / "curve.png").read_bytes().startswith(PNG_MAGIC)


def test_png_decodes(tmp_path, rng):
    import matplotlib.image as mpimg

    emit_report(_report(rng), tmp_path)
    img = mpimg.imread(tmp_path / "curve.png")
    assert img.ndim == 3 and img.shape[0] > 100 and img.shape[1] > 100


def test_report_roundtrip(tmp_path, rng):
    rep = _report(rng)
    emit_report(rep, tmp_path, plots=False)
    back = load_report(tmp_path)
    assert back.to_dict() == rep.to_dict()
    assert back.day2dark_gap == rep.day2dark_gap


def test_evaluate_multilabel_and_empty():
    ds = generate_dataset(BenchConfig(n_classes=3, clips_per_class=2, val_per_class=0, test_per_class=2,
                                      unlabeled_pool_size=0, frame_geometry=(2, 8, 8), multilabel=True,
                                      dark_fraction_train=0.5))
    rep = evaluate(lambda cs: np.stack([c.label for c in cs]).astype(float), ds.test, [0, 40, 256])
    assert rep.metric == "hamming" and rep.overall["test"]["value"] == 0.0
    with pytest.raises(InvalidInputError):
        evaluate(lambda cs: None, [], [0, 256])
