import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from amal import analysis, svg
from amal.data import synthetic_splits
from amal.errors import ConfigError
from amal.metaopt import MixingWeights, train_supervised
from amal import nncore
from amal.nncore import SgdState

lam_tables = st.integers(1, 30).flatmap(
    lambda n: arrays(np.float64, (n, 2), elements=st.floats(0, 1)))


def test_equal_lambdas_fill_one_bin():
    t = np.full((6, 2), 0.3)
    mask = np.array([0, 1, 0, 1, 0, 0], dtype=bool)
    h = analysis.lambda_diff_histogram(t, mask, bins=10)
    assert np.count_nonzero(h.clean) == 1 and h.clean.sum() == 4
    assert np.count_nonzero(h.noisy) == 1 and h.noisy.sum() == 2


def test_all_half_lambdas_sum_to_one():
    h = analysis.lambda_sum_histogram(np.full((5, 2), 0.5), np.zeros(5, bool), bins=[0, 0.5, 0.99, 1.01, 2])
    assert list(h.clean) == [0, 0, 5, 0] and not h.noisy.any()


def test_clean_only_mask_leaves_noisy_empty():
    rng = np.random.default_rng(0)
    h = analysis.lambda_diff_histogram(rng.uniform(size=(20, 2)), np.zeros(20, bool))
    assert h.noisy.sum() == 0 and h.clean.sum() == 20


@settings(max_examples=50, deadline=None)
@given(lam_tables, st.data())
def test_histogram_counts_sum_to_group_sizes(t, data):
    mask = np.array(data.draw(st.lists(st.booleans(), min_size=len(t), max_size=len(t))))
    for fn in (analysis.lambda_diff_histogram, analysis.lambda_sum_histogram):
        h = fn(t, mask, bins=7)
        assert h.clean.sum() == (~mask).sum() and h.noisy.sum() == mask.sum()


def test_multi_auxiliary_table_rejected():
    with pytest.raises(ConfigError):
        analysis.lambda_diff_histogram(np.zeros((3, 3)), np.zeros(3, bool))
    with pytest.raises(ConfigError):
        analysis.coreset_probs(MixingWeights(np.zeros((3, 3))), "sq")


def test_group_means():
    t = np.array([[0.2, 0.8], [0.6, 0.4], [0.5, 0.5]])
    m = analysis.group_means(t, np.array([True, False, False]))
    assert m["diff_noisy"] == pytest.approx(0.6)
    assert m["diff_clean"] == pytest.approx(-0.1)
    assert m["sum_clean"] == pytest.approx(1.0)
    assert math.isnan(analysis.group_means(t, np.zeros(3, bool))["sum_noisy"])


def test_confidence_buckets_by_hand():
    t = np.array([[0.5, 0.2], [0.5, 0.4], [0.5, 0.9], [0.5, 0.7]])
    probs = np.array([0.1, 0.3, 0.6, 1.0])
    mask = np.array([False, False, True, False])
    b = analysis.confidence_buckets(t, probs, mask, [0.0, 0.5, 1.0])
    assert np.allclose(b.clean_mean, [0.3, 0.7])
    assert b.clean_sem[0] == pytest.approx(np.std([0.2, 0.4], ddof=1) / math.sqrt(2))
    assert list(b.clean_count) == [2, 1] and list(b.noisy_count) == [0, 1]
    assert math.isnan(b.noisy_mean[0]) and b.noisy_mean[1] == pytest.approx(0.9)
    assert b.empty.tolist() == [[False, True], [False, False]]


def test_uniform_lambdas_give_flat_buckets():
    rng = np.random.default_rng(1)
    b = analysis.confidence_buckets(np.full((50, 2), 0.4), rng.uniform(size=50), rng.uniform(size=50) < 0.3,
                                    [0, 0.25, 0.5, 0.75, 1])
    assert np.allclose(b.clean_mean[~np.isnan(b.clean_mean)], 0.4)


def test_bucket_edges_must_be_sorted():
    with pytest.raises(ConfigError):
        analysis.confidence_buckets(np.zeros((2, 2)), [0.1, 0.2], [False, True], [0.5, 0.2, 1.0])


def test_coreset_probs_examples():
    p, fb = analysis.coreset_probs(np.full((4, 2), 0.3), "sq")
    assert np.allclose(p, 0.25) and not fb
    p, _ = analysis.coreset_probs(np.array([[1.0, 0.0], [0.0, 1.0]]), "absdiff")
    assert np.allclose(p, [0.5, 0.5])
    p, _ = analysis.coreset_probs(np.array([[0.5, 0.5], [0.1, 0.9]]), "ratio")
    assert np.allclose(p, [0.1, 0.9], atol=1e-7)
    p, fb = analysis.coreset_probs(np.full((3, 2), 0.4), "absdiff")
    assert fb and np.allclose(p, 1 / 3)
    with pytest.raises(ConfigError):
        analysis.coreset_probs(np.zeros((2, 2)), "entropy")


@settings(max_examples=60, deadline=None)
@given(lam_tables, st.sampled_from(analysis.CORESET_STRATEGIES), st.integers(0, 1000))
def test_coreset_probs_valid_and_permutation_equivariant(t, strategy, seed):
    p, _ = analysis.coreset_probs(t, strategy)
    assert np.all(p >= 0) and abs(p.sum() - 1.0) <= 1e-12
    perm = np.random.default_rng(seed).permutation(len(t))
    q, _ = analysis.coreset_probs(t[perm], strategy)
    assert np.allclose(q, p[perm], rtol=1e-12, atol=1e-15)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 60), st.floats(0.01, 1.0), st.integers(0, 1000))
def test_sample_coreset_size_and_determinism(n, fraction, seed):
    probs = np.random.default_rng(seed).uniform(size=n)
    probs /= probs.sum()
    a = analysis.sample_coreset(probs, fraction, seed)
    assert len(a) == round(fraction * n) and len(np.unique(a)) == len(a)
    assert np.array_equal(a, analysis.sample_coreset(probs, fraction, seed))


def test_sample_coreset_full_and_support():
    probs = np.array([0.5, 0.0, 0.25, 0.0, 0.25])
    assert list(analysis.sample_coreset(probs, 1.0, 0)) == [0, 1, 2, 3, 4]
    for seed in range(20):
        assert set(analysis.sample_coreset(probs, 0.6, seed)) == {0, 2, 4}
    with pytest.raises(ConfigError):
        analysis.sample_coreset(probs, 0.0, 0)


@pytest.fixture(scope="module")
def small():
    return synthetic_splits(0, sizes=(200, 50, 80), n_classes=4, noise=0.0)


def test_full_coreset_reproduces_skyline(small):
    sgd = SgdState(milestones=(2,))
    res = analysis.retrain_on_coreset(np.arange(200), small.train, small.val, small.test, (14, 8, 4), sgd, 3, 1)
    ref = train_supervised(small.train, small.val, nncore.init_mlp((14, 8, 4), 1), sgd, 3, 1, small.test)
    for a, b in zip(res.final_params.arrays(), ref.final_params.arrays()):
        assert np.array_equal(a, b)
    assert res.config["coreset_size"] == 200


def test_coreset_retrain_deterministic_and_nonempty(small):
    idx = analysis.sample_coreset(np.full(200, 1 / 200), 0.2, 0)
    a = analysis.retrain_on_coreset(idx, small.train, None, small.test, (14, 8, 4), SgdState(), 2, 3)
    b = analysis.retrain_on_coreset(idx, small.train, None, small.test, (14, 8, 4), SgdState(), 2, 3)
    strip = lambda recs: [{k: v for k, v in r.items() if k != "seconds"} for r in recs]
    assert strip(a.metrics) == strip(b.metrics)
    assert all(np.array_equal(x, y) for x, y in zip(a.final_params.arrays(), b.final_params.arrays()))
    with pytest.raises(ConfigError):
        analysis.retrain_on_coreset([], small.train, None, None, (14, 4), SgdState(), 1, 0)


def test_csv_writers(tmp_path):
    h = analysis.lambda_diff_histogram(np.array([[0.1, 0.9], [0.9, 0.1]]), [True, False], bins=2)
    analysis.write_csv(tmp_path / "h.csv", analysis.HISTOGRAM_HEADER, analysis.histogram_rows(h))
    lines = (tmp_path / "h.csv").read_text().splitlines()
    assert lines[0] == "bin_lo,bin_hi,clean,noisy"
    assert lines[1:] == ["-0.8,0.0,1,0", "0.0,0.8,0,1"]


def test_svg_output_is_deterministic_and_well_formed():
    a = svg.line_chart({"amal": ([0, 1, 2], [0.5, 0.6, 0.7], [0.01, 0.02, 0.01]),
                        "none": ([0, 1, 2], [0.4, 0.5, 0.55], None)}, "curves", "epoch", "acc")
    b = svg.line_chart({"amal": ([0, 1, 2], [0.5, 0.6, 0.7], [0.01, 0.02, 0.01]),
                        "none": ([0, 1, 2], [0.4, 0.5, 0.55], None)}, "curves", "epoch", "acc")
    assert a == b and a.startswith("<svg") and 'width="800"' in a and 'height="500"' in a
    assert "amal" in a and "none" in a
    bars = svg.bar_chart([0, 0.5, 1], {"clean": [3, 1], "noisy": [0, 2]}, "h", "x", "count")
    assert bars.count("<rect") >= 4 and bars.rstrip().endswith("</svg>")
