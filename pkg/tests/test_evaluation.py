import itertools
from collections import Counter

import numpy as np
import pytest
import torch

from bsl.datasets import ArrayDataset, Degradation
from bsl.evaluation import (MetricReport, UndefinedMetricError, ablation_configs, accuracy, auc,
                            chebyshev_histogram, restoration_histogram, robustness_sweep,
                            roc_points, write_reports)
from bsl.models import build_model
from bsl.shuffle import ShuffleConfig, normalize_coords
from bsl.training import RunConfig

from oracles import pairwise_auc


def test_auc_examples():
    assert auc([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1]) == 1.0
    assert auc([0.3] * 6, [0, 1, 0, 1, 1, 0]) == 0.5
    scores, labels = [0.2, 0.7, 0.7, 0.4, 0.9, 0.1], [0, 1, 0, 1, 1, 0]
    assert auc(scores, labels) == pairwise_auc(scores, labels) == pytest.approx(7.5 / 9)


def test_auc_single_class():
    with pytest.raises(UndefinedMetricError):
        auc([0.1, 0.2], [1, 1])


def test_auc_matches_oracle_random(rng):
    for _ in range(30):
        n = int(rng.integers(2, 200))
        labels = rng.integers(0, 2, n)
        labels[:2] = [0, 1]
        scores = np.round(rng.random(n), 1)  # coarse values force ties
        assert auc(scores, labels) == pairwise_auc(scores, labels)


def test_auc_monotone_invariance(rng):
    scores, labels = rng.normal(size=300), rng.integers(0, 2, 300)
    base = auc(scores, labels)
    for f in (np.exp, lambda s: 3 * s - 7, lambda s: np.arctan(s)):
        assert auc(f(scores), labels) == base


def test_accuracy_examples(rng):
    labels = rng.integers(0, 2, 50)
    assert accuracy(labels.astype(float), labels) == 1.0
    assert accuracy(1.0 - labels, labels) == 0.0
    big = np.repeat([0, 1], 5000)
    assert abs(accuracy(rng.random(10_000), big) - 0.5) <= 0.02
    assert accuracy([0.6, 0.4], [1, 1], threshold=0.3) == 1.0


def test_roc_points(rng):
    pts = roc_points([0.9, 0.8, 0.3, 0.1], [1, 0, 1, 0])
    assert pts[0] == (0.0, 0.5, 0.9) and pts[-1][:2] == (1.0, 1.0)
    fpr = np.r_[0, [p[0] for p in pts]]
    tpr = np.r_[0, [p[1] for p in pts]]
    assert np.trapezoid(tpr, fpr) == pytest.approx(auc([0.9, 0.8, 0.3, 0.1], [1, 0, 1, 0]))


def _center_distance_counts(m):
    c = (m - 1) // 2
    return Counter(max(abs(i - c), abs(j - c)) for i, j in itertools.product(range(m), repeat=2))


def test_histogram_of_untrained_head_is_center_distance_law(rng):
    images = rng.random((5, 224, 224, 3)).astype(np.float32)
    cfg = ShuffleConfig(16, 32)

    def zero_head(batch, outcomes):
        return np.zeros((len(batch), 2, 7, 7))

    hist = restoration_histogram(zero_head, images, cfg, seed=3)
    law = _center_distance_counts(7)  # {0: 1, 1: 8, 2: 16, 3: 24}
    assert law == {0: 1, 1: 8, 2: 16, 3: 24}
    np.testing.assert_array_equal(hist.counts, [5 * law[d] for d in range(4)])
    assert hist.total == 5 * 49
    assert hist.fractions.sum() == pytest.approx(1.0)


def test_histogram_oracle_head_point_mass(rng):
    images = rng.random((6, 64, 64, 3)).astype(np.float32)

    def oracle(batch, outcomes):
        return np.stack([o.coords.M for o in outcomes])

    hist = restoration_histogram(oracle, images, ShuffleConfig(8, 16), seed=0)
    assert list(hist.counts) == [6 * 16] and hist.within_one == 1.0


def test_histogram_with_model(rng):
    torch.manual_seed(0)
    model = build_model("small_cnn", 8, 16, 64)
    hist = restoration_histogram(model, rng.random((3, 64, 64, 3)).astype(np.float32),
                                 ShuffleConfig(8, 16))
    assert hist.total == 3 * 16


def test_histogram_requires_head():
    with pytest.raises(NotImplementedError):
        restoration_histogram(object(), np.zeros((1, 64, 64, 3)), ShuffleConfig(8, 16))


def test_chebyshev_diagonal_counts_one():
    pred = np.array([[[1, 1]]])
    true = np.array([[[0, 0]]])
    assert list(chebyshev_histogram(pred, true).counts) == [0, 1]


def test_robustness_sweep_order(rng):
    torch.manual_seed(0)
    model = build_model("small_cnn", 8, 16, 64)
    data = ArrayDataset(rng.random((8, 64, 64, 3)), np.array([0, 1] * 4))
    only = robustness_sweep(model, data, [])
    assert [r.tag for r in only] == ["clean"]
    reps = robustness_sweep(model, data, [Degradation("blur", 5), "resize:24"])
    assert [r.tag for r in reps] == ["clean", "blur:5", "resize:24"]
    assert all(0 <= r.acc <= 1 and 0 <= r.auc <= 1 and r.n == 8 for r in reps)


def test_ablation_configs_rows():
    rows = ablation_configs(RunConfig())
    assert [n for n, _ in rows] == ["baseline", "+intra", "+intra+adv", "+intra+adv+inter", "full"]
    base = rows[0][1]
    assert base.shuffle.q_range == (0.0, 0.0) and base.shuffle.p_inter == 0.0
    assert (base.weights.alpha, base.weights.beta) == (0.0, 0.0)
    full = rows[-1][1]
    assert full.shuffle == RunConfig().shuffle and full.weights == RunConfig().weights
    assert rows[3][1].shuffle.p_inter == 1.0 and rows[3][1].weights.beta == 0.0


def test_write_reports(tmp_path):
    stem = write_reports([MetricReport(0.5, 0.75, 10, "blur:3")], tmp_path / "r")
    assert stem.with_suffix(".csv").read_text().splitlines() == ["tag,acc,auc,n", "blur:3,0.5,0.75,10"]
    assert '"auc": 0.75' in stem.with_suffix(".json").read_text()
