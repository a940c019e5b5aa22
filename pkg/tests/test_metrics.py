import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from sklearn.metrics import f1_score, silhouette_score

from sudokusens.metrics import accuracy, macro_f1, pca, project_embeddings, silhouette


def test_perfect_and_all_wrong():
    assert accuracy([0, 1, 2], [0, 1, 2]) == 1.0 and macro_f1([0, 1, 2], [0, 1, 2]) == 1.0
    assert accuracy([1, 0, 1], [0, 1, 0]) == 0.0 and macro_f1([1, 0, 1], [0, 1, 0]) == 0.0


def test_three_class_hand_example():
    pred, truth = ["a", "a", "b", "c"], ["a", "b", "b", "c"]
    assert accuracy(pred, truth) == 0.75
    # hand confusion matrix: F1(a) = 2/3, F1(b) = 2/3, F1(c) = 1
    assert macro_f1(pred, truth) == pytest.approx((2 / 3 + 2 / 3 + 1) / 3)
    assert round(macro_f1(pred, truth), 4) == 0.7778


def test_metric_input_errors():
    with pytest.raises(ValueError, match="empty"):
        accuracy([], [])
    with pytest.raises(ValueError):
        macro_f1([1, 2], [1])


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 4), st.integers(0, 4)), min_size=1, max_size=60))
def test_macro_f1_matches_sklearn(pairs):
    pred, truth = zip(*pairs)
    assert macro_f1(pred, truth) == pytest.approx(f1_score(truth, pred, average="macro"), abs=1e-12)
    assert 0.0 <= accuracy(pred, truth) <= 1.0


def test_silhouette_separated_clusters():
    rng = np.random.default_rng(0)
    x = np.concatenate([rng.normal(0, 0.01, size=(20, 3)), rng.normal(10, 0.01, size=(20, 3))])
    assert silhouette(x, [0] * 20 + [1] * 20) > 0.95


def test_silhouette_duplicated_cluster():
    # cluster B is an exact copy of A: b = S/n, a = S/(n-1) for every point, so SC = -1/n
    n = 50
    a = np.random.default_rng(1).normal(size=(n, 2))
    sc = silhouette(np.concatenate([a, a]), [0] * n + [1] * n)
    assert sc == pytest.approx(-1 / n, abs=1e-12)
    assert abs(sc) < 0.05


def test_silhouette_needs_two_sessions():
    with pytest.raises(ValueError, match="two sessions"):
        silhouette(np.zeros((5, 2)), ["s"] * 5)


@settings(max_examples=40, deadline=None)
@given(n=st.integers(4, 40), k=st.integers(2, 5), d=st.integers(1, 6), seed=st.integers(0, 1000))
def test_silhouette_matches_sklearn(n, k, d, seed):
    rng = np.random.default_rng(seed)
    labels = np.concatenate([np.arange(k), rng.integers(0, k, size=n - k)]) if n >= k else np.arange(n)
    x = rng.normal(size=(len(labels), d)) + labels[:, None]
    ours = silhouette(x, labels)
    assert -1.0 <= ours <= 1.0
    if len(np.unique(labels)) < len(labels):  # sklearn needs n_labels <= n_samples - 1
        assert ours == pytest.approx(silhouette_score(x, labels), abs=1e-9)


def test_pca_matches_dense_eigensolver():
    rng = np.random.default_rng(2)
    x = rng.normal(size=(200, 80)) @ rng.normal(size=(80, 80))
    scores, var = pca(x, 50)
    eig = np.sort(np.linalg.eigvalsh(np.cov(x, rowvar=False)))[::-1]
    np.testing.assert_allclose(var[:80], eig, rtol=1e-8)
    np.testing.assert_allclose(scores.var(axis=0, ddof=1), eig[:50], rtol=1e-8)
    _, retained = project_embeddings(x, 2, pca_dim=50)
    assert retained >= eig[:50].sum() / eig.sum() - 1e-12


def test_projection_of_2d_points_is_a_rotation():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(30, 2)) * [3.0, 1.0]
    pts, retained = project_embeddings(x, 2)
    assert retained == pytest.approx(1.0)
    xc = x - x.mean(axis=0)
    d_in = np.linalg.norm(xc[:, None] - xc[None], axis=-1)
    d_out = np.linalg.norm(pts[:, None] - pts[None], axis=-1)
    np.testing.assert_allclose(d_out, d_in, atol=1e-10)
    assert pts.var(axis=0).sum() == pytest.approx(xc.var(axis=0).sum())


def test_projection_is_deterministic():
    x = np.random.default_rng(4).normal(size=(40, 10))
    a, _ = project_embeddings(x, 2)
    b, _ = project_embeddings(x.copy(), 2)
    assert a.tobytes() == b.tobytes()


def test_projection_rejects_identical_points():
    with pytest.raises(ValueError, match="zero variance"):
        project_embeddings(np.ones((10, 4)), 2)
