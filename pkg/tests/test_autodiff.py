"""Finite-difference verification of every autodiff op."""

import numpy as np
import pytest

from fewseg import autodiff as ad
from fewseg.autodiff import Parameter, Tensor
from fewseg.gradcheck import check_gradients, numerical_gradient, max_relative_error


def rng(seed=0):
    return np.random.default_rng(seed)


def test_add_mul_broadcast_gradients():
    a = Parameter(rng(1).normal(size=(3, 4)))
    b = Parameter(rng(2).normal(size=(4,)))

    def loss():
        return ad.tsum((a + b) * (a * 2.0 + 1.0))

    assert check_gradients(loss, [a, b]) < 1e-6


def test_div_pow_gradients():
    a = Parameter(rng(3).uniform(0.5, 2.0, size=(5,)))
    b = Parameter(rng(4).uniform(0.5, 2.0, size=(5,)))

    def loss():
        return ad.tsum(a / b + ad.power(a, 3.0) + ad.sqrt(b))

    assert check_gradients(loss, [a, b]) < 1e-6


@pytest.mark.parametrize("shape_a,shape_b", [((3, 4), (4, 5)),
                                             ((3, 4), (4,)),
                                             ((4,), (4, 5)),
                                             ((4,), (4,))])
def test_matmul_gradients(shape_a, shape_b):
    a = Parameter(rng(5).normal(size=shape_a))
    b = Parameter(rng(6).normal(size=shape_b))

    def loss():
        out = ad.matmul(a, b)
        return ad.tsum(out * out)

    assert check_gradients(loss, [a, b]) < 1e-6


def test_sum_mean_axes_gradients():
    a = Parameter(rng(7).normal(size=(2, 3, 4)))

    def loss():
        partial = ad.tsum(a, axis=(0, 2))
        kept = ad.tmean(a, axis=1, keepdims=True)
        return ad.tmean(partial * partial) + ad.tsum(kept * kept)

    assert check_gradients(loss, [a]) < 1e-6


def test_reshape_transpose_concat_gradients():
    a = Parameter(rng(8).normal(size=(2, 6)))
    b = Parameter(rng(9).normal(size=(3, 4)))

    def loss():
        left = ad.reshape(a, (3, 4))
        flipped = ad.transpose(ad.transpose(b, (1, 0)), (1, 0))
        merged = ad.concat([left, b, flipped], axis=0)
        return ad.tsum(merged * merged)

    assert check_gradients(loss, [a, b]) < 1e-6


def test_relu_gradient_away_from_kink():
    values = rng(10).normal(size=(4, 4))
    values[np.abs(values) < 0.05] = 0.1  # keep finite differences clean
    a = Parameter(values)

    def loss():
        return ad.tsum(ad.relu(a) * 3.0)

    assert check_gradients(loss, [a]) < 1e-6


def test_broadcast_to_gradient():
    a = Parameter(rng(11).normal(size=(3, 1, 1)))

    def loss():
        tiled = ad.broadcast_to(a, (3, 4, 5))
        return ad.tsum(tiled * tiled)

    assert check_gradients(loss, [a]) < 1e-6


@pytest.mark.parametrize("stride,padding", [(1, 0), (1, 1), (2, 1)])
def test_conv2d_gradients(stride, padding):
    x = Parameter(rng(12).normal(size=(2, 3, 6, 6)))
    w = Parameter(rng(13).normal(size=(4, 3, 3, 3)) * 0.3)
    b = Parameter(rng(14).normal(size=(4,)) * 0.1)

    def loss():
        out = ad.conv2d(x, w, b, stride=stride, padding=padding)
        return ad.tsum(out * out)

    assert check_gradients(loss, [x, w, b]) < 1e-5


def test_conv2d_matches_direct_loop():
    x = rng(15).normal(size=(1, 2, 5, 5))
    w = rng(16).normal(size=(3, 2, 3, 3))
    out = ad.conv2d(Tensor(x), Tensor(w), stride=2, padding=1).data

    padded = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    expected = np.zeros_like(out)
    for o in range(3):
        for i in range(out.shape[2]):
            for j in range(out.shape[3]):
                window = padded[0, :, i * 2 : i * 2 + 3, j * 2 : j * 2 + 3]
                expected[0, o, i, j] = (window * w[o]).sum()
    assert np.allclose(out, expected, atol=1e-12)


def test_matrix_resample_gradient_and_values():
    from fewseg.nn import bilinear_matrix
    x = Parameter(rng(17).normal(size=(2, 4, 4)))
    rows = bilinear_matrix(8, 4)
    cols = bilinear_matrix(8, 4)

    def loss():
        out = ad.matrix_resample(x, rows, cols)
        return ad.tsum(out * out)

    assert check_gradients(loss, [x]) < 1e-6
    # constant input stays constant under interpolation
    const = ad.matrix_resample(Tensor(np.full((1, 4, 4), 2.5)), rows, cols)
    assert np.allclose(const.data, 2.5)


def test_cross_entropy_matches_explicit_formula():
    logits = rng(18).normal(size=(4, 3, 3))
    targets = rng(19).integers(0, 4, size=(3, 3))
    loss = ad.cross_entropy_logits(Tensor(logits), targets).item()

    total = 0.0
    for i in range(3):
        for j in range(3):
            z = logits[:, i, j]
            p = np.exp(z - z.max())
            p /= p.sum()
            total += -np.log(p[targets[i, j]])
    assert abs(loss - total / 9.0) < 1e-10


def test_cross_entropy_gradient():
    logits = Parameter(rng(20).normal(size=(5, 2, 2)))
    targets = rng(21).integers(0, 5, size=(2, 2))

    def loss():
        return ad.cross_entropy_logits(logits, targets)

    assert check_gradients(loss, [logits]) < 1e-6


def test_cross_entropy_scalar_target():
    logits = Parameter(np.array([2.0, -1.0, 0.5]))
    loss = ad.cross_entropy_logits(logits, np.asarray(0))
    z = logits.data
    expected = -np.log(np.exp(z[0]) / np.exp(z).sum())
    assert abs(loss.item() - expected) < 1e-12


def test_cross_entropy_rejects_bad_targets():
    logits = Tensor(np.zeros((3, 2)))
    with pytest.raises(ValueError):
        ad.cross_entropy_logits(logits, np.array([3, 0]))
    with pytest.raises(ValueError):
        ad.cross_entropy_logits(logits, np.array([[0, 1]]))


def test_detach_blocks_gradient():
    a = Parameter(np.array([1.0, 2.0]))
    out = ad.tsum(a.detach() * a)
    out.backward()
    assert np.allclose(a.grad, a.data)  # only the non-detached path contributes


def test_no_grad_skips_graph():
    a = Parameter(np.array([1.0, 2.0]))
    with ad.no_grad():
        out = ad.tsum(a * a)
    assert out._backward is None and not out.requires_grad


def test_backward_requires_scalar():
    a = Parameter(np.ones((2, 2)))
    with pytest.raises(ValueError):
        (a * 2.0).backward()


def test_gradient_accumulates_across_uses():
    a = Parameter(np.array([3.0]))
    out = a * 2.0 + a * 5.0
    ad.tsum(out).backward()
    assert np.allclose(a.grad, [7.0])


def test_numerical_gradient_self_consistency():
    value = rng(22).normal(size=(3,))
    holder = Parameter(value.copy())

    def func():
        return ad.tsum(holder * holder * holder)

    numeric = numerical_gradient(func, holder.data)
    assert max_relative_error(3.0 * holder.data ** 2, numeric) < 1e-6
