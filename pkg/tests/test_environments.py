import math

import numpy as np
import pytest
from scipy import stats

from simpa.environments import (
    FEATURE_MAGIC,
    FeatureEpisodeSource,
    FeatureFileError,
    RegressionTaskSpec,
    load_feature_episodes,
    make_regression_task,
    read_feature_file,
    sample_blob_classification_task,
    sample_regression_spec,
    sample_regression_task,
    write_feature_file,
)
from simpa.stochastic import RngStream


def test_noise_free_linear_identity():
    spec = RegressionTaskSpec("linear", a=1.0, b=0.0, noise_sigma=0.0)
    t = make_regression_task(spec, RngStream(0), 5, 15)
    assert np.array_equal(t.support_y, t.support_x) and np.array_equal(t.query_y, t.query_x)


def test_noise_free_sinusoid_peak():
    spec = RegressionTaskSpec("sinusoid", A=1.0, phi=0.0, noise_sigma=0.0)
    assert spec.mean(np.array([math.pi / 2]))[0] == pytest.approx(1.0, abs=1e-15)


def test_spec_fields_per_kind():
    with pytest.raises(ValueError):
        RegressionTaskSpec("sinusoid", A=1.0)
    with pytest.raises(ValueError):
        RegressionTaskSpec("linear", a=1.0, b=0.0, A=1.0)
    with pytest.raises(ValueError):
        RegressionTaskSpec("cubic")


def test_task_counts_and_oracle():
    t = sample_regression_task(RngStream(1), 5, 15, n_oracle=10_000)
    assert (t.m_t, t.m_v) == (5, 15) and t.support_x.shape == (5, 1) and t.query_y.shape == (15, 1)
    assert t.oracle_x.shape == (10_000, 1) and t.oracle_y.shape == (10_000, 1)
    assert np.all(np.abs(t.support_x) <= 5) and np.all(np.abs(t.oracle_x) <= 5)
    assert sample_regression_task(RngStream(1)).oracle_x is None


def test_support_query_disjoint_by_construction():
    # continuous draws, so a shared point would be a sampling bug
    for i in range(50):
        t = sample_regression_task(RngStream(2, 0, i), n_oracle=100)
        xs = np.concatenate([t.support_x, t.query_x, t.oracle_x]).ravel()
        assert len(np.unique(xs)) == xs.size


def test_kind_frequency_and_parameter_marginals():
    specs = [sample_regression_spec(RngStream(3, 0, i)) for i in range(10_000)]
    sin = [s for s in specs if s.kind == "sinusoid"]
    lin = [s for s in specs if s.kind == "linear"]
    assert abs(len(sin) / 10_000 - 0.5) < 0.015
    A = np.array([s.A for s in sin])
    assert A.min() >= 0.1 and A.max() <= 5.0
    # KS uniformity at significance 0.01
    assert stats.kstest(A, stats.uniform(0.1, 4.9).cdf).pvalue > 0.01
    assert stats.kstest([s.phi for s in sin], stats.uniform(0, math.pi).cdf).pvalue > 0.01
    assert stats.kstest([s.a for s in lin], stats.uniform(-5, 10).cdf).pvalue > 0.01
    assert stats.kstest([s.b for s in lin], stats.uniform(-5, 10).cdf).pvalue > 0.01


def test_x_uniform_on_domain():
    xs = np.concatenate([sample_regression_task(RngStream(4, 0, i)).query_x.ravel() for i in range(700)])
    assert stats.kstest(xs, stats.uniform(-5, 10).cdf).pvalue > 0.01


def test_regression_noise_level():
    spec = RegressionTaskSpec("linear", a=0.0, b=0.0)
    t = make_regression_task(spec, RngStream(5), 5, 15, n_oracle=20_000)
    assert t.oracle_y.std() == pytest.approx(0.3, rel=0.02)


def test_blob_counts():
    t = sample_blob_classification_task(RngStream(6), N=5, k=1)
    assert t.support_x.shape == (5, 2) and t.query_x.shape == (75, 2)
    assert sorted(t.support_y.tolist()) == list(range(5))
    assert np.bincount(t.query_y).tolist() == [15] * 5


def test_blob_errors():
    with pytest.raises(ValueError):
        sample_blob_classification_task(RngStream(0), N=1)
    with pytest.raises(ValueError):
        sample_blob_classification_task(RngStream(0), N=3, k=0)


def nearest_centroid_accuracy(t):
    classes = np.unique(t.support_y)
    cents = np.array([t.support_x[t.support_y == c].mean(axis=0) for c in classes])
    pred = classes[np.argmin(((t.query_x[:, None, :] - cents[None]) ** 2).sum(-1), axis=1)]
    return np.mean(pred == t.query_y)


def test_far_centers_are_perfectly_separable():
    centers = np.array([[0.0, 0.0], [100.0, 0.0]])
    for i in range(20):
        t = sample_blob_classification_task(RngStream(7, 0, i), N=2, k=1, centers=centers)
        assert nearest_centroid_accuracy(t) == 1.0


def test_identical_centers_give_chance_accuracy():
    centers = np.zeros((5, 2))
    accs = [nearest_centroid_accuracy(sample_blob_classification_task(RngStream(8, 0, i), N=5, k=1, centers=centers)) for i in range(400)]
    assert abs(np.mean(accs) - 0.2) < 0.02


def test_labels_shuffled_per_episode():
    centers = np.array([[0.0, 0.0], [50.0, 0.0], [0.0, 50.0]])
    first = set()
    for i in range(30):
        t = sample_blob_classification_task(RngStream(9, 0, i), N=3, k=1, centers=centers)
        first.add(int(t.support_y[np.argmin(np.abs(t.support_x).sum(1))]))
    assert len(first) == 3


def make_file(tmp_path, n_classes=2, count=20, dim=4, seed=0):
    rng = np.random.default_rng(seed)
    feats = [rng.normal(size=(count, dim)) + 10 * c for c in range(n_classes)]
    path = tmp_path / "feats.bin"
    write_feature_file(path, feats, [f"c{c}" for c in range(n_classes)])
    return path, feats


def test_feature_file_round_trip(tmp_path):
    path, feats = make_file(tmp_path)
    got, names = read_feature_file(path)
    assert names == ["c0", "c1"]
    assert all(np.array_equal(a, b) for a, b in zip(got, feats))
    raw = path.read_bytes()
    assert raw[:8] == FEATURE_MAGIC and len(raw) == 8 + 12 + 2 * (4 + 20 * 4 * 8)


def test_feature_episode_two_way_one_shot(tmp_path):
    path, _ = make_file(tmp_path)
    src = load_feature_episodes(path, N=2, k=1, m_v_per_class=15)
    t = src.sample(RngStream(0))
    assert t.support_x.shape == (2, 4) and t.query_x.shape == (30, 4)
    for c, sup, qry in t.info["rows"]:
        assert not set(sup) & set(qry)


def test_feature_episodes_reproducible_across_loads(tmp_path):
    path, _ = make_file(tmp_path, n_classes=4)
    a = load_feature_episodes(path, N=3, k=2, m_v_per_class=5).sample(RngStream(11, 2, 1))
    b = load_feature_episodes(path, N=3, k=2, m_v_per_class=5).sample(RngStream(11, 2, 1))
    assert np.array_equal(a.query_x, b.query_x) and np.array_equal(a.support_y, b.support_y)


def test_feature_file_errors(tmp_path):
    empty = tmp_path / "empty.bin"
    empty.write_bytes(b"")
    with pytest.raises(FeatureFileError):
        read_feature_file(empty)
    path, _ = make_file(tmp_path)
    raw = path.read_bytes()
    trunc = tmp_path / "trunc.bin"
    trunc.write_bytes(raw[:-5])
    with pytest.raises(FeatureFileError, match="truncated"):
        read_feature_file(trunc)
    extra = tmp_path / "extra.bin"
    extra.write_bytes(raw + b"\0")
    with pytest.raises(FeatureFileError, match="trailing"):
        read_feature_file(extra)
    with pytest.raises(FeatureFileError):
        FeatureEpisodeSource([np.zeros((5, 2)), np.zeros((5, 2))], ["a", "b"], N=2, k=1, m_v_per_class=15)
