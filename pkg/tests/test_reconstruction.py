"""Class-weight losses, scoring, and background back-projection."""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fewseg import autodiff as ad
from fewseg.autodiff import Parameter, Tensor
from fewseg.gradcheck import check_gradients
from fewseg.prototypes import Prototype
from fewseg.reconstruction import (
    BackgroundScore, ClassWeights, background_scores, cross_correlation,
    init_class_weights, known_class_loss, latent_class_loss,
    reconstruct_background, reconstruct_query_background,
)


def proto(vec) -> Prototype:
    return Prototype(vector=Tensor(np.asarray(vec, float)), kind="query")


def exact_orthonormal(n: int, d: int, fg_offset: int = 0) -> np.ndarray:
    """Signed permutation rows: orthonormal with exact float entries."""
    mat = np.zeros((n, d))
    for i in range(n):
        mat[i, (i + fg_offset) % d] = 1.0 if i % 2 == 0 else -1.0
    return mat


# --- initialization ---

def test_init_shapes_and_parameter_count():
    weights = init_class_weights(15, 15, 256, rng_seed=0)
    assert weights.known.shape == (15, 256)
    assert weights.latent.shape == (15, 256)
    assert weights.concat().shape == (30, 256)
    assert weights.num_parameters == 7680


def test_init_bounds():
    weights = init_class_weights(15, 15, 256, rng_seed=1)
    full = weights.concat().data
    assert np.all(full > -1.0 / 16.0) and np.all(full < 1.0 / 16.0)


def test_init_deterministic():
    a = init_class_weights(4, 4, 8, rng_seed=7).concat().data
    b = init_class_weights(4, 4, 8, rng_seed=7).concat().data
    assert np.array_equal(a, b)


def test_init_zero_latent_concat_is_known():
    weights = init_class_weights(5, 0, 8, rng_seed=3)
    assert weights.concat().shape == (5, 8)
    assert weights.num_parameters == 40


def test_init_rejects_bad_sizes():
    with pytest.raises(ValueError):
        init_class_weights(0, 4, 8, rng_seed=0)
    with pytest.raises(ValueError):
        init_class_weights(4, -1, 8, rng_seed=0)
    with pytest.raises(ValueError):
        init_class_weights(4, 4, 0, rng_seed=0)


# --- known-class loss ---

def test_known_loss_saturated_correct_class():
    w_k = Tensor(np.eye(4))
    loss = known_class_loss(proto([20.0, 0.0, 0.0, 0.0]), 0, w_k)
    assert 0.0 <= loss.item() < 1e-8


def test_known_loss_zero_prototype_is_uniform():
    weights = init_class_weights(6, 0, 8, rng_seed=2)
    loss = known_class_loss(proto(np.zeros(8)), 3, weights)
    assert abs(loss.item() - np.log(6)) < 1e-12


def test_known_loss_matches_softmax_oracle():
    rng = np.random.default_rng(11)
    for _ in range(20):
        w_k = rng.normal(size=(4, 6))
        p_f = rng.normal(size=6)
        target = int(rng.integers(0, 4))
        loss = known_class_loss(proto(p_f), target, Tensor(w_k)).item()

        logits = w_k @ p_f
        exp = np.exp(logits - logits.max())
        expected = -np.log(exp[target] / exp.sum())
        assert abs(loss - expected) < 1e-6


def test_known_loss_rejects_out_of_range_class():
    weights = init_class_weights(4, 2, 8, rng_seed=0)
    with pytest.raises(ValueError):
        known_class_loss(proto(np.zeros(8)), 4, weights)
    with pytest.raises(ValueError):
        known_class_loss(proto(np.zeros(8)), -1, weights)


# --- cross-correlation and latent loss ---

def test_cross_correlation_orthonormal_rows_give_identity():
    w_c = exact_orthonormal(4, 8)
    assert np.array_equal(cross_correlation(Tensor(w_c)).data, np.eye(4))


def test_cross_correlation_hand_example():
    w_c = Tensor(np.array([[1.0, 0.0], [1.0, 0.0]]))
    assert np.array_equal(cross_correlation(w_c).data, np.ones((2, 2)))


def test_cross_correlation_zero_annihilates():
    assert np.array_equal(cross_correlation(Tensor(np.zeros((3, 5)))).data,
                          np.zeros((3, 3)))


def test_cross_correlation_symmetric():
    w = cross_correlation(Tensor(np.random.default_rng(0).normal(size=(5, 7))))
    assert np.allclose(w.data, w.data.T, atol=1e-12)


def test_latent_loss_identity_is_zero():
    assert latent_class_loss(Tensor(np.eye(5))).item() == 0.0


def test_latent_loss_hand_example():
    loss = latent_class_loss(Tensor(np.ones((2, 2))))
    assert abs(loss.item() - 2.0) < 1e-12  # (1-1)^2 * 2 + 1^2 + 1^2


def test_latent_loss_zero_matrix_counts_diagonal():
    for n in (2, 5, 9):
        assert abs(latent_class_loss(Tensor(np.zeros((n, n)))).item() - n) < 1e-12


def test_latent_loss_matches_term_by_term_oracle():
    rng = np.random.default_rng(21)
    for _ in range(20):
        n = int(rng.integers(2, 6))
        w = rng.normal(size=(n, n))
        total = 0.0
        for i in range(n):
            total += (1.0 - w[i, i]) ** 2
            for j in range(n):
                if j != i:
                    total += w[i, j] ** 2
        assert abs(latent_class_loss(Tensor(w)).item() - total) < 1e-6


def test_latent_loss_floor_when_rows_exceed_d():
    # rank(W) <= d, so at least n - d unit eigenvalues of I are unreachable
    weights = init_class_weights(4, 2, 3, rng_seed=5)  # 6 rows in R^3
    params = weights.parameters()
    for _ in range(2000):
        for p in params:
            p.grad = None
        loss = latent_class_loss(cross_correlation(weights))
        loss.backward()
        for p in params:
            p.data -= 0.02 * p.grad
    final = latent_class_loss(cross_correlation(weights)).item()
    assert final >= (6 - 3) - 1e-6
    assert final < 3.5  # optimization actually approached the floor


# --- scores and back-projection ---

def test_scores_zero_foreground_exactly():
    rng = np.random.default_rng(31)
    weights = init_class_weights(4, 3, 8, rng_seed=1)
    for fg in range(4):
        score = background_scores(proto(rng.normal(size=8)), fg, weights)
        assert score.scores.data[fg] == 0.0


def test_scores_orthogonal_prototype_gives_zeros():
    w_c = exact_orthonormal(3, 8)
    p_q = np.zeros(8)
    p_q[6] = 1.0  # orthogonal to all three rows
    score = background_scores(proto(p_q), 0, Tensor(w_c))
    assert np.array_equal(score.scores.data, np.zeros(3))


def test_scores_row_prototype_gives_one_hot():
    w_c = exact_orthonormal(5, 8)
    j, fg = 3, 1
    score = background_scores(proto(w_c[j]), fg, Tensor(w_c))
    expected = np.zeros(5)
    expected[j] = 1.0
    assert np.array_equal(score.scores.data, expected)


def test_scores_latent_entries_never_zeroed():
    weights = init_class_weights(3, 4, 6, rng_seed=9)
    p_q = np.random.default_rng(4).normal(size=6)
    score = background_scores(proto(p_q), 2, weights)
    raw = weights.concat().data @ p_q
    assert np.allclose(score.scores.data[3:], raw[3:], atol=1e-12)


def test_scores_reject_out_of_range_foreground():
    weights = init_class_weights(3, 4, 6, rng_seed=9)
    with pytest.raises(ValueError):
        background_scores(proto(np.zeros(6)), 3, weights)


def test_reconstruct_one_hot_selects_row():
    w_c = np.random.default_rng(5).normal(size=(4, 6))
    for i in range(4):
        s = np.zeros(4)
        s[i] = 1.0
        out = reconstruct_background(Tensor(s), Tensor(w_c))
        assert out.kind == "background"
        assert np.allclose(out.vector.data, w_c[i], atol=1e-12)


def test_reconstruct_zero_scores_annihilate():
    w_c = np.random.default_rng(6).normal(size=(4, 6))
    out = reconstruct_background(Tensor(np.zeros(4)), Tensor(w_c))
    assert np.array_equal(out.vector.data, np.zeros(6))


def test_reconstruct_matches_row_sum_oracle():
    rng = np.random.default_rng(7)
    w_c = rng.normal(size=(4, 6))
    s = rng.normal(size=4)
    out = reconstruct_background(Tensor(s), Tensor(w_c)).vector.data

    expected = np.zeros(6)
    for i in range(4):
        expected += w_c[i] * s[i]
    assert np.allclose(out, expected, atol=1e-6)


def test_reconstruct_rejects_length_mismatch():
    with pytest.raises(ValueError):
        reconstruct_background(Tensor(np.zeros(3)), Tensor(np.zeros((4, 6))))


# --- pipeline invariants ---

def test_round_trip_orthonormal_exact():
    w_c = exact_orthonormal(6, 8)
    fg = 2
    for j in (0, 1, 3, 4, 5):
        out = reconstruct_query_background(proto(w_c[j]), fg, Tensor(w_c))
        assert np.array_equal(out.vector.data, w_c[j])


def test_round_trip_removes_foreground_row():
    w_c = exact_orthonormal(6, 8)
    out = reconstruct_query_background(proto(w_c[2]), 2, Tensor(w_c))
    assert np.array_equal(out.vector.data, np.zeros(8))


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10_000), fg=st.integers(0, 3))
def test_foreground_elimination_property(seed, fg):
    rng = np.random.default_rng(seed)
    weights = init_class_weights(4, 4, 8, rng_seed=seed)
    score = background_scores(proto(rng.normal(size=8) * 10.0), fg, weights)
    assert score.scores.data[fg] == 0.0


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_reconstruction_linearity(seed):
    rng = np.random.default_rng(seed)
    w_c = rng.normal(size=(5, 7))
    s1, s2 = rng.normal(size=5), rng.normal(size=5)
    a, b = rng.normal(), rng.normal()
    combined = reconstruct_background(Tensor(a * s1 + b * s2), Tensor(w_c))
    separate = (a * reconstruct_background(Tensor(s1), Tensor(w_c)).vector.data
                + b * reconstruct_background(Tensor(s2), Tensor(w_c)).vector.data)
    assert np.allclose(combined.vector.data, separate, atol=1e-9)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_reconstruction_span_membership(seed):
    rng = np.random.default_rng(seed)
    w_c = rng.normal(size=(4, 9))
    p_q = rng.normal(size=9)
    out = reconstruct_query_background(proto(p_q), 1, Tensor(w_c)).vector.data
    coeffs, *_ = np.linalg.lstsq(w_c.T, out, rcond=None)
    assert np.allclose(w_c.T @ coeffs, out, atol=1e-8)


def test_detach_query_blocks_gradient_to_prototype():
    weights = init_class_weights(3, 2, 5, rng_seed=0)
    p = Parameter(np.random.default_rng(1).normal(size=5))
    query = Prototype(vector=p, kind="query")
    out = reconstruct_query_background(query, 0, weights, detach_query=True)
    ad.tsum(out.vector * out.vector).backward()
    assert p.grad is None
    for w in weights.parameters():
        assert w.grad is not None


# --- gradient verification against finite differences ---

def test_known_loss_gradients():
    rng = np.random.default_rng(41)
    w_k = Parameter(rng.normal(size=(4, 8)) * 0.5)
    p_f = Parameter(rng.normal(size=8))

    def loss():
        return known_class_loss(p_f, 2, w_k)

    assert check_gradients(loss, [w_k, p_f]) < 1e-5


def test_latent_loss_gradients_through_concat():
    weights = init_class_weights(4, 4, 8, rng_seed=13)

    def loss():
        return latent_class_loss(cross_correlation(weights))

    assert check_gradients(loss, weights.parameters()) < 1e-5


def test_full_reconstruction_gradients():
    rng = np.random.default_rng(43)
    weights = init_class_weights(4, 4, 8, rng_seed=17)
    p_q = Parameter(rng.normal(size=8))
    probe = rng.normal(size=8)  # fixed projection makes the output scalar

    def loss():
        out = reconstruct_query_background(p_q, 1, weights)
        return ad.matmul(out.vector, Tensor(probe))

    assert check_gradients(loss, [p_q, *weights.parameters()]) < 1e-5
