from pathlib import Path

import numpy as np
import pytest
from scipy import linalg
from scipy.stats import ortho_group

from tokenpolicy.metrics import (EMBED_DIM, FeatureEmbedding, GaussianStats, diversity_from_features,
                                 diversity_metric, exact_divergence, feature_embed, fit_stats, frechet_distance,
                                 load_stats, save_stats, stats_from_features, toy_fid)
from tokenpolicy.world import (decode_tokens, deterministic_world, exact_statistics, iid_world, make_codebook,
                               sample_world, tiny_markov_world)

FIXTURES = Path(__file__).parent / "fixtures"


def frechet_oracle(a, b):
    """Textbook formula with scipy's general matrix square root."""
    root = linalg.sqrtm(a.cov @ b.cov)
    return float(np.sum((a.mean - b.mean) ** 2) + np.trace(a.cov + b.cov - 2 * root.real))


def random_stats(rng, d):
    A, B = rng.normal(size=(d, d)), rng.normal(size=(d, d))
    return GaussianStats(rng.normal(size=d), A @ A.T + 0.1 * np.eye(d), 100), \
        GaussianStats(rng.normal(size=d), B @ B.T + 0.1 * np.eye(d), 100)


def test_embedding_dimension_and_determinism():
    img = np.zeros((16, 16, 3))
    f = feature_embed(img)
    assert f.shape == (EMBED_DIM,)
    emb = FeatureEmbedding().fit(img[None])
    # zero image: tanh of the (shifted) projection bias; the oracle sums in another order
    np.testing.assert_allclose(f, np.tanh(-0.5 * emb.weights_.sum(axis=0) + emb.bias_), rtol=0, atol=1e-12)
    np.testing.assert_array_equal(feature_embed(img), f)
    pair = feature_embed(np.stack([img, img]))
    np.testing.assert_array_equal(pair[0], pair[1])


def test_embedding_matches_pinned_fixture():
    fx = np.load(FIXTURES / "embedding_fixture.npz")
    np.testing.assert_array_equal(feature_embed(fx["image"]), fx["features"])


def test_embedding_rejects_wrong_width():
    emb = FeatureEmbedding().fit(np.zeros((1, 4, 4, 3)))
    with pytest.raises(ValueError):
        emb.transform(np.zeros((1, 5, 4, 3)))


def test_fit_stats_examples(rng):
    s = stats_from_features(np.array([[0.0], [2.0]]), jitter=0.0)
    assert s.mean[0] == 1.0 and s.cov[0, 0] == 2.0
    same = fit_stats(np.ones((10, 4, 4, 3)))
    np.testing.assert_allclose(same.cov, 1e-6 * np.eye(EMBED_DIM), atol=1e-15)
    big = stats_from_features(rng.normal(size=(10000, 3)))
    assert np.all(np.abs(big.mean) < 0.05)
    assert np.all(np.abs(np.diag(big.cov) - 1) < 0.1)
    with pytest.raises(ValueError):
        fit_stats(np.ones((1, 4, 4, 3)))


def test_gaussian_stats_validation():
    with pytest.raises(ValueError):
        GaussianStats(np.zeros(2), np.array([[1.0, 0.5], [0.0, 1.0]]), 5)
    with pytest.raises(ValueError):
        GaussianStats(np.zeros(2), np.eye(2), 1)
    with pytest.raises(ValueError):
        GaussianStats(np.zeros(2), np.eye(3), 5)


def test_frechet_closed_form_examples():
    a = GaussianStats([0.0], [[1.0]], 10)
    assert frechet_distance(a, a) == 0.0
    assert frechet_distance(a, GaussianStats([1.0], [[1.0]], 10)) == pytest.approx(1.0, abs=1e-12)
    a2 = GaussianStats([0.0, 0.0], np.eye(2), 10)
    b2 = GaussianStats([1.0, 0.0], np.diag([4.0, 1.0]), 10)
    assert frechet_distance(a2, b2) == pytest.approx(2.0, abs=1e-12)
    assert frechet_oracle(a2, b2) == pytest.approx(2.0, abs=1e-10)
    with pytest.raises(ValueError):
        frechet_distance(a, a2)


def test_frechet_matches_independent_oracle(rng):
    for d in (2, 5, 32):
        for _ in range(5):
            a, b = random_stats(rng, d)
            assert frechet_distance(a, b) == pytest.approx(frechet_oracle(a, b), rel=1e-8, abs=1e-8)


def test_frechet_symmetry_and_rotation(rng):
    for _ in range(10):
        a, b = random_stats(rng, 6)
        assert abs(frechet_distance(a, b) - frechet_distance(b, a)) < 1e-6
        Q = ortho_group.rvs(6, random_state=rng)
        ra = GaussianStats(Q @ a.mean, Q @ a.cov @ Q.T, 100)
        rb = GaussianStats(Q @ b.mean, Q @ b.cov @ Q.T, 100)
        ra.cov = 0.5 * (ra.cov + ra.cov.T)
        rb.cov = 0.5 * (rb.cov + rb.cov.T)
        assert abs(frechet_distance(ra, rb) - frechet_distance(a, b)) < 1e-6


def test_frechet_nonnegative_for_near_identical(rng):
    f = rng.normal(size=(500, 8))
    a, b = stats_from_features(f), stats_from_features(f.copy())
    assert frechet_distance(a, b) >= 0.0


def test_diversity_examples():
    assert diversity_from_features(np.ones((5, 3))) == 0.0
    assert diversity_from_features(np.array([[0.0, 0.0], [3.0, 0.0]])) == pytest.approx(3.0)
    assert diversity_metric(np.zeros((4, 4, 4, 3))) == 0.0
    with pytest.raises(ValueError):
        diversity_metric(np.zeros((1, 4, 4, 3)))


def test_diversity_real_beats_repeated():
    spec = tiny_markov_world()
    cb = make_codebook(spec.codebook_size)
    X = sample_world(spec, np.arange(200) % 2, np.random.default_rng(0))
    imgs = decode_tokens(X, cb, spec.grid)
    assert diversity_metric(imgs) > diversity_metric(np.repeat(imgs[:1], 200, axis=0))


def test_toy_fid_self_noise_floor():
    spec = tiny_markov_world()
    cb = make_codebook(spec.codebook_size)
    rng = np.random.default_rng(0)
    ref = fit_stats(decode_tokens(sample_world(spec, rng.integers(0, 2, 4000), rng), cb, spec.grid))
    real = decode_tokens(sample_world(spec, rng.integers(0, 2, 1000), rng), cb, spec.grid)
    fake = decode_tokens(np.zeros((1000, 4), dtype=int), cb, spec.grid)
    assert toy_fid(real, ref) < toy_fid(fake, ref)


def test_exact_divergence_examples():
    spec = iid_world([[0.5, 0.5]], n_tokens=2)
    point = np.zeros((100, 2), dtype=int)
    assert exact_divergence(point, spec)["tv"] == pytest.approx(0.75)
    det = deterministic_world([[0, 1, 2]], 3)
    assert exact_divergence(np.tile([0, 1, 2], (50, 1)), det)["tv"] == 0.0


def test_exact_divergence_sampling_bound_and_shrinks():
    spec = tiny_markov_world()
    outcomes = exact_statistics(spec).table.shape[1]
    tvs = []
    for n in (2000, 8000, 32000):
        X = sample_world(spec, 0, np.random.default_rng(n), size=n)
        tv = exact_divergence(X, spec, cls=0)["tv"]
        assert tv < 3 * np.sqrt(outcomes / n)
        tvs.append(tv)
    assert tvs[-1] < tvs[0]


def test_exact_divergence_needs_enumerable():
    from tokenpolicy.world import default_world
    with pytest.raises(ValueError):
        exact_divergence(np.zeros((2, 16), dtype=int), default_world())


def test_stats_file_round_trip_and_integrity(tmp_path, rng):
    s = stats_from_features(rng.normal(size=(50, 4)))
    path = tmp_path / "ref.json"
    save_stats(path, s)
    back = load_stats(path)
    np.testing.assert_array_equal(back.mean, s.mean)
    np.testing.assert_array_equal(back.cov, s.cov)
    text = path.read_text().replace('"count": 50', '"count": 51')
    path.write_text(text)
    with pytest.raises(ValueError, match="integrity"):
        load_stats(path)
    with pytest.raises(FileNotFoundError, match="missing.json"):
        load_stats(tmp_path / "missing.json")
