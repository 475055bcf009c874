import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from motsmos.clustering import (
    ClusterMapping,
    GmmModel,
    assign,
    fit_gmm,
    kmeans_plus_plus,
    load_gmm,
    map_clusters,
    sample_for_fit,
    save_gmm,
    segment,
)
from motsmos.errors import ConfigError


def two_blobs(rng, n=2000, e=4, sep=3.0):
    """Two unit-variance isotropic blobs whose centers are ``sep`` sigma apart per axis."""
    centers = np.zeros((2, e))
    centers[1] = sep
    labels = rng.integers(0, 2, n)
    return centers[labels] + rng.normal(size=(n, e)), labels, centers


def naive_log_density(x, w, mu, var):
    out = np.log(w)
    for d in range(len(x)):
        out += -0.5 * np.log(2 * np.pi * var[d]) - 0.5 * (x[d] - mu[d]) ** 2 / var[d]
    return out


def test_two_blob_recovery(rng):
    x, labels, centers = two_blobs(rng)
    model = fit_gmm(x, 2, seed=0)
    order = np.argsort(model.means[:, 0])
    np.testing.assert_allclose(model.means[order], centers, atol=0.1)
    pred, _ = assign(model, x)
    acc = np.mean(order[labels] == pred)
    assert acc >= 0.99


def test_k1_closed_form(rng):
    x = rng.normal(loc=2.0, scale=[1.0, 3.0, 0.5], size=(500, 3))
    model = fit_gmm(x, 1)
    np.testing.assert_allclose(model.means[0], x.mean(axis=0), atol=1e-9)
    np.testing.assert_allclose(model.variances[0], x.var(axis=0), atol=1e-9)
    assert model.weights.tolist() == [1.0]


@pytest.mark.parametrize("seed", range(5))
def test_log_likelihood_monotone(seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(400, 3)) * rng.uniform(0.2, 3, size=3) + rng.integers(0, 4, size=(400, 1))
    model = fit_gmm(x, 5, seed=seed, tol=0.0, max_iter=60)
    assert model.reseeds == 0
    assert (np.diff(model.log_likelihood) >= -1e-9).all()


def test_argument_errors(rng):
    x = rng.normal(size=(5, 2))
    with pytest.raises(ConfigError):
        fit_gmm(x, 6)
    with pytest.raises(ConfigError):
        fit_gmm(x, 0)
    with pytest.raises(ConfigError):
        fit_gmm(np.zeros((5, 2)), 2)
    with pytest.raises(ConfigError):
        fit_gmm(np.zeros((0, 2)), 1)


def test_invariants_after_fit(rng):
    x, _, _ = two_blobs(rng, n=500)
    model = fit_gmm(x, 4, var_floor=1e-6)
    assert abs(model.weights.sum() - 1) < 1e-9
    assert (model.variances >= 1e-6).all()


def test_duplicate_points_hit_variance_floor():
    x = np.vstack([np.zeros((50, 2)), np.ones((50, 2))])
    model = fit_gmm(x, 2, var_floor=1e-6)
    np.testing.assert_allclose(model.variances, 1e-6)
    assert np.isfinite(model.log_likelihood).all()


def test_permutation_invariance_given_init(rng):
    x, _, _ = two_blobs(rng, n=600)
    init = x[[0, 1, 2]]
    a = fit_gmm(x, 3, init_means=init, max_iter=30, tol=0)
    perm = rng.permutation(len(x))
    b = fit_gmm(x[perm], 3, init_means=init, max_iter=30, tol=0)
    np.testing.assert_allclose(a.means, b.means, atol=1e-8)
    np.testing.assert_allclose(a.variances, b.variances, atol=1e-8)
    np.testing.assert_allclose(a.weights, b.weights, atol=1e-10)


@pytest.mark.parametrize("scale", [0.25, 2.0, 8.0])
def test_kmeanspp_scale_invariant_choices(rng, scale):
    x = rng.normal(size=(300, 5))
    a = kmeans_plus_plus(x, 10, np.random.default_rng(7))
    b = kmeans_plus_plus(x * scale, 10, np.random.default_rng(7))
    assert a.tolist() == b.tolist()
    ma = fit_gmm(x, 3, seed=1, max_iter=5, tol=0)
    mb = fit_gmm(x * scale, 3, seed=1, max_iter=5, tol=0)
    np.testing.assert_allclose(mb.means, ma.means * scale, atol=1e-9)


def test_sample_for_fit_small_pool(rng):
    frames = [rng.normal(size=(50, 3)) for _ in range(10)]
    s, origin = sample_for_fit(frames, 10, 200_000, seed=0)
    assert len(s) == 500
    np.testing.assert_array_equal(s, np.concatenate(frames))


def test_sample_for_fit_first_frames_and_determinism(rng):
    frames = [np.full((100, 2), i, dtype=float) for i in range(15)]
    s1, o1 = sample_for_fit(frames, 10, 300, seed=3)
    s2, o2 = sample_for_fit(frames, 10, 300, seed=3)
    np.testing.assert_array_equal(s1, s2)
    assert len(s1) == 300 and o1.max() <= 9
    assert len(np.unique(s1.view([("a", float), ("b", float)]))) <= 10


def test_sample_for_fit_uniform_origins():
    frames = [np.zeros((1000, 1)) for _ in range(10)]
    _, origin = sample_for_fit(frames, 10, 2000, seed=0)
    counts = np.bincount(origin, minlength=10)
    # hypergeometric: mean 200, std below the binomial sqrt(2000 * 0.1 * 0.9) ~ 13.4
    assert np.all(np.abs(counts - 200) <= 3 * np.sqrt(2000 * 0.1 * 0.9))


def test_assign_component_mean_and_tie_break():
    model = GmmModel(np.array([0.5, 0.5]), np.array([[0.0, 0.0], [10.0, 10.0]]), np.ones((2, 2)))
    assert assign(model, np.array([10.0, 10.0]))[0] == 1
    label, resp = assign(model, np.array([5.0, 5.0]))
    assert label == 0 and resp[0] == resp[1]


def test_assign_matches_naive_density(rng):
    k, e = 4, 3
    model = GmmModel(rng.dirichlet(np.ones(k)), rng.normal(size=(k, e)), rng.uniform(0.2, 2, size=(k, e)))
    z = rng.normal(size=(50, e))
    labels, resp = assign(model, z)
    np.testing.assert_allclose(resp.sum(axis=1), 1.0, atol=1e-9)
    for i in range(50):
        logs = np.array([naive_log_density(z[i], model.weights[j], model.means[j], model.variances[j]) for j in range(k)])
        expected = np.exp(logs - logs.max())
        expected /= expected.sum()
        np.testing.assert_allclose(resp[i], expected, rtol=1e-9, atol=1e-12)
        assert labels[i] == int(np.argmax(logs))
    with pytest.raises(ConfigError):
        assign(model, np.zeros(e + 1))


def test_map_clusters_rules():
    labels = np.array([0, 0, 1, 1, 2, 2])
    mask = np.array([True, True, False, False, False, False])
    m = map_clusters(labels, mask, 3, 0.15)
    assert m.moving_clusters == {0}
    assert m.ious.tolist() == [1.0, 0.0, 0.0]
    empty = map_clusters(labels, np.zeros(6, bool), 3)
    assert empty.moving_clusters == frozenset() and empty.warning


def test_map_clusters_threshold_inclusive():
    # cluster 0 holds 3 of 20 voxels; mask = exactly those 3 plus 17 others -> IoU 3/20 = 0.15
    labels = np.array([0] * 3 + [1] * 17)
    mask = np.ones(20, bool)
    m = map_clusters(labels, mask, 2, 0.15)
    assert 0 in m.moving_clusters


def test_segment_rules(rng):
    model = GmmModel(np.full(3, 1 / 3), rng.normal(size=(3, 2)) * 5, np.ones((3, 2)))
    z = rng.normal(size=(40, 2)) * 5
    assert not segment(model, ClusterMapping(frozenset(), np.zeros(3)), z).any()
    assert segment(model, ClusterMapping(frozenset({0, 1, 2}), np.zeros(3)), z).all()
    mapping = ClusterMapping(frozenset({1}), np.zeros(3))
    labels, _ = assign(model, z)
    np.testing.assert_array_equal(segment(model, mapping, z), labels == 1)
    np.testing.assert_array_equal(segment(model, mapping, z), segment(model, mapping, z))


def test_gmm_roundtrip(tmp_path, rng):
    x, _, _ = two_blobs(rng, n=300)
    model = fit_gmm(x, 3)
    mapping = ClusterMapping(frozenset({2, 0}), np.array([0.5, 0.1, 0.2]))
    save_gmm(tmp_path / "g.gmm", model, mapping)
    m2, map2 = load_gmm(tmp_path / "g.gmm")
    np.testing.assert_allclose(m2.means, model.means, rtol=1e-6)
    assert map2.moving_clusters == {0, 2}
    np.testing.assert_allclose(map2.ious, [0.5, 0.1, 0.2], rtol=1e-6)
    save_gmm(tmp_path / "h.gmm", m2, map2)
    m3, _ = load_gmm(tmp_path / "h.gmm")
    np.testing.assert_allclose(m3.weights, m2.weights, rtol=1e-7)
    save_gmm(tmp_path / "n.gmm", model)
    assert load_gmm(tmp_path / "n.gmm")[1] is None


@settings(max_examples=100, deadline=None)
@given(
    st.lists(st.tuples(st.integers(0, 4), st.booleans()), min_size=1, max_size=60),
    st.floats(0.05, 1.0),
)
def test_mapping_matches_brute_force(pairs, threshold):
    labels = np.array([p[0] for p in pairs])
    moving = np.array([p[1] for p in pairs])
    mapping = map_clusters(labels, moving, 5, threshold)
    for c in range(5):
        inter = sum(1 for l, m in pairs if l == c and m)
        union = sum(1 for l, m in pairs if l == c or m)
        iou = inter / union if union else 0.0
        assert mapping.ious[c] == pytest.approx(iou)
        assert (c in mapping.moving_clusters) == (union > 0 and iou >= threshold)
