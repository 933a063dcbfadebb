"""Shared decoder head and the segmentation losses."""

import numpy as np
import pytest

from fewseg import autodiff as ad
from fewseg.autodiff import Parameter, Tensor
from fewseg.decoder import Decoder, MaskLogits, background_loss, foreground_loss
from fewseg.gradcheck import check_gradients
from fewseg.prototypes import Prototype


def make_decoder(**overrides):
    base = dict(d=6, feature_size=4, image_size=16, hidden=8, rng_seed=0)
    base.update(overrides)
    return Decoder(**base)


def proto(vec) -> Prototype:
    return Prototype(vector=Tensor(np.asarray(vec, float)), kind="foreground")


def features(seed=0, d=6, h=4, w=4) -> Tensor:
    return Tensor(np.random.default_rng(seed).normal(size=(d, h, w)))


def test_output_matches_image_resolution():
    out = make_decoder().decode(proto(np.ones(6)), features())
    assert out.shape == (2, 16, 16)


def test_same_parameters_serve_every_prototype_kind():
    dec = make_decoder()
    before = [p.data.copy() for p in dec.named_parameters()]
    fg = Prototype(vector=Tensor(np.ones(6)), kind="foreground")
    bg = Prototype(vector=Tensor(-np.ones(6)), kind="background")
    dec.decode(fg, features(1))
    dec.decode(bg, features(1))
    # literally the same parameter objects, untouched by decoding
    assert dec.named_parameters() is not None
    for p, b in zip(dec.named_parameters(), before):
        assert np.array_equal(p.data, b)
    assert len({id(p) for p in dec.named_parameters()}) == 4


def test_gradients_from_both_losses_reach_shared_parameters():
    dec = make_decoder()
    f_q = features(2)
    mask = (np.random.default_rng(3).random((16, 16)) < 0.5).astype(np.uint8)
    loss_f = foreground_loss(dec.decode(proto(np.ones(6)), f_q), mask)
    loss_b = background_loss(dec.decode(proto(-np.ones(6)), f_q), mask)
    ad.add(loss_f, loss_b).backward()
    for p in dec.named_parameters():
        assert p.grad is not None and np.abs(p.grad).sum() > 0


def test_degenerate_inputs_stay_finite():
    out = make_decoder().decode(proto(np.zeros(6)),
                                Tensor(np.zeros((6, 4, 4))))
    assert np.isfinite(out.logits.data).all()


def test_channel_mismatch_rejected():
    dec = make_decoder()
    with pytest.raises(ValueError):
        dec.decode(proto(np.ones(5)), features())
    with pytest.raises(ValueError):
        dec.decode(proto(np.ones(6)), Tensor(np.zeros((5, 4, 4))))


def test_prior_channel_reserved():
    dec = make_decoder()
    with pytest.raises(ValueError):
        dec.decode(proto(np.ones(6)), features(), prior=np.zeros((4, 4)))
    with_prior = make_decoder(prior_channel=True)
    out = with_prior.decode(proto(np.ones(6)), features(),
                            prior=np.zeros((4, 4)))
    assert out.shape == (2, 16, 16)
    with pytest.raises(ValueError):
        with_prior.decode(proto(np.ones(6)), features())


def test_predicted_mask_is_channel_argmax():
    logits = np.zeros((2, 3, 3))
    logits[1, 0, 0] = 5.0
    logits[0, 2, 2] = 5.0
    mask = MaskLogits(Tensor(logits)).predicted_mask()
    assert mask[0, 0] == 1 and mask[2, 2] == 0


# --- losses ---

def test_foreground_loss_saturated_prediction():
    mask = (np.random.default_rng(4).random((5, 5)) < 0.5).astype(np.uint8)
    logits = np.zeros((2, 5, 5))
    logits[1][mask == 1] = 20.0
    logits[0][mask == 0] = 20.0
    assert foreground_loss(MaskLogits(Tensor(logits)), mask).item() < 1e-8


def test_foreground_loss_uniform_logits_is_ln2():
    mask = np.ones((4, 4), np.uint8)
    loss = foreground_loss(MaskLogits(Tensor(np.zeros((2, 4, 4)))), mask)
    assert abs(loss.item() - np.log(2.0)) < 1e-12


def test_foreground_loss_matches_pixel_oracle():
    rng = np.random.default_rng(5)
    logits = rng.normal(size=(2, 4, 4))
    mask = (rng.random((4, 4)) < 0.5).astype(np.uint8)
    loss = foreground_loss(MaskLogits(Tensor(logits)), mask).item()

    total = 0.0
    for i in range(4):
        for j in range(4):
            z = logits[:, i, j]
            p = np.exp(z - z.max())
            p /= p.sum()
            total += -np.log(p[mask[i, j]])
    assert abs(loss - total / 16.0) < 1e-6


def test_background_loss_is_complement_identity():
    rng = np.random.default_rng(6)
    for _ in range(5):
        logits = MaskLogits(Tensor(rng.normal(size=(2, 4, 4))))
        mask = (rng.random((4, 4)) < 0.5).astype(np.uint8)
        assert (background_loss(logits, mask).item()
                == foreground_loss(logits, 1 - mask).item())


def test_background_loss_saturated_complement():
    mask = (np.random.default_rng(7).random((5, 5)) < 0.5).astype(np.uint8)
    logits = np.zeros((2, 5, 5))
    logits[1][mask == 0] = 20.0  # predicts the complement perfectly
    logits[0][mask == 1] = 20.0
    assert background_loss(MaskLogits(Tensor(logits)), mask).item() < 1e-8


def test_loss_shape_mismatch_rejected():
    logits = MaskLogits(Tensor(np.zeros((2, 4, 4))))
    with pytest.raises(ValueError):
        foreground_loss(logits, np.zeros((5, 5), np.uint8))
    with pytest.raises(ValueError):
        background_loss(logits, np.zeros((5, 5), np.uint8))


def test_decoder_gradients_against_finite_differences():
    dec = make_decoder(rng_seed=3)
    vec = Parameter(np.random.default_rng(8).normal(size=6))
    f_q = Parameter(np.random.default_rng(9).normal(size=(6, 4, 4)))
    mask = (np.random.default_rng(10).random((16, 16)) < 0.5).astype(np.uint8)

    def loss():
        logits = dec.decode(Prototype(vector=vec, kind="foreground"), f_q)
        return foreground_loss(logits, mask)

    params = [vec, f_q, dec.conv1.weight, dec.conv1.bias,
              dec.conv2.weight, dec.conv2.bias]
    assert check_gradients(loss, params, tolerance=1e-4) < 1e-4
