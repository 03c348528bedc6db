import numpy as np
import pytest
from conftest import random_dag

from msgaf import numerics as nx
from msgaf.gat import Neighborhood, aggregate, attention_scores, embed, gat_level, pool
from msgaf.numerics import ShapeError, grad_check


def _elu(x):
    return np.where(x > 0, x, np.expm1(np.minimum(x, 0)))


def test_embed_identity_and_zero(rng):
    X_c = rng.normal(size=(3, 9))
    np.testing.assert_array_equal(embed(X_c, np.eye(9)).value, X_c)
    np.testing.assert_array_equal(embed(np.zeros((3, 9)), rng.normal(size=(9, 4))).value, 0.0)


def test_embed_matches_manual_product():
    r = np.random.default_rng(3)
    X_c, W = r.normal(size=(3, 9)), r.normal(size=(9, 4))
    manual = [[sum(X_c[i, f] * W[f, j] for f in range(9)) for j in range(4)] for i in range(3)]
    np.testing.assert_allclose(embed(X_c, W).value, manual, atol=1e-12)


def test_embed_shape_mismatch():
    with pytest.raises(ShapeError):
        embed(np.ones((3, 8)), np.ones((9, 4)))


def test_neighborhood_threshold_and_self_loops():
    A_c = np.array([[0.0, 5e-7, 2e-6], [0.0, 0.0, 0.0], [1.0, 0.0, 0.0]])
    assert Neighborhood.from_adjacency(A_c).indices() == [[0, 2], [1], [0, 2]]


def test_zero_attention_vector_is_uniform(rng):
    A = random_dag(5, rng)
    nbh = Neighborhood.from_adjacency(A)
    alpha = attention_scores(rng.normal(size=(5, 4)), rng.normal(size=(4, 3)), np.zeros(6), nbh).value
    for i, members in enumerate(nbh.indices()):
        np.testing.assert_allclose(alpha[i, members], 1.0 / len(members))
        assert np.all(alpha[i, np.setdiff1d(np.arange(5), members)] == 0.0)


def test_single_node_attention(rng):
    alpha = attention_scores(rng.normal(size=(1, 4)), rng.normal(size=(4, 3)), rng.normal(size=6),
                             Neighborhood.from_adjacency(np.zeros((1, 1))))
    np.testing.assert_array_equal(alpha.value, [[1.0]])


def test_identical_mutual_pair_splits_evenly(rng):
    h = rng.normal(size=(1, 4))
    alpha = attention_scores(np.vstack([h, h]), rng.normal(size=(4, 3)), rng.normal(size=6),
                             Neighborhood.from_adjacency([[0.0, 1.0], [1.0, 0.0]]))
    np.testing.assert_allclose(alpha.value, 0.5, atol=1e-15)


def test_attention_matches_per_edge_definition(rng):
    H, W, a = rng.normal(size=(4, 5)), rng.normal(size=(5, 3)), rng.normal(size=6)
    A = random_dag(4, rng, p=0.7)
    nbh = Neighborhood.from_adjacency(A)
    alpha = attention_scores(H, W, a, nbh).value
    for i, members in enumerate(nbh.indices()):
        scores = []
        for j in members:
            z = a @ np.concatenate([H[i] @ W, H[j] @ W])
            scores.append(z if z > 0 else 0.2 * z)
        w = np.exp(np.array(scores) - max(scores))
        np.testing.assert_allclose(alpha[i, members], w / w.sum(), atol=1e-12)
        assert abs(alpha[i].sum() - 1.0) <= 1e-10


def test_aggregate_single_node(rng):
    H, W = rng.normal(size=(1, 4)), rng.normal(size=(4, 3))
    np.testing.assert_allclose(aggregate(H, [[1.0]], W).value, _elu(H @ W), atol=1e-15)


def test_aggregate_uniform_identical_neighbors(rng):
    h = rng.normal(size=(1, 4))
    H, W = np.repeat(h, 3, axis=0), rng.normal(size=(4, 3))
    out = aggregate(H, np.full((3, 3), 1 / 3), W).value
    np.testing.assert_allclose(out, np.repeat(_elu(h @ W), 3, axis=0), atol=1e-12)


def test_aggregate_matches_dense_oracle(rng):
    H, W = rng.normal(size=(3, 4)), rng.normal(size=(4, 3))
    alpha = nx.row_softmax(rng.normal(size=(3, 3))).value
    expected = _elu(alpha @ (W.T @ H.T).T)
    np.testing.assert_allclose(aggregate(H, alpha, W).value, expected, atol=1e-12)


def test_pool_examples(rng):
    v = rng.normal(size=(1, 4))
    np.testing.assert_array_equal(pool(v).value, v[0])
    np.testing.assert_array_equal(pool(np.vstack([v, -v])).value, np.zeros(4))
    np.testing.assert_allclose(pool([[1.0, 3.0], [3.0, 5.0]]).value, [2.0, 4.0])


def test_permutation_equivariance(rng):
    X, A = rng.normal(size=(6, 9)), random_dag(6, rng)
    We, Wa, a = rng.normal(size=(9, 5)), rng.normal(size=(5, 4)), rng.normal(size=8)
    base = gat_level(X, A, We, Wa, a)
    perm = rng.permutation(6)
    moved = gat_level(X[perm], A[np.ix_(perm, perm)], We, Wa, a)
    np.testing.assert_allclose(moved.H_prime.value, base.H_prime.value[perm], atol=1e-12)
    np.testing.assert_allclose(moved.h.value, base.h.value, atol=1e-10)


def test_full_level_gradient(rng):
    X, A = rng.normal(size=(5, 9)), random_dag(5, rng)
    w = rng.normal(size=4)

    def f(p):
        return nx.sum(gat_level(X, A, p["We"], p["Wa"], p["a"]).h * w)

    params = {"We": rng.normal(size=(9, 5)) * 0.5, "Wa": rng.normal(size=(5, 4)) * 0.5,
              "a": rng.normal(size=8)}
    assert grad_check(f, params) <= 1e-4
