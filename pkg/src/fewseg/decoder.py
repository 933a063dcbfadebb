"""Dense mask prediction from a (prototype, query features) pair.

One small convolutional head serves every prototype kind: the prototype is
tiled over the feature grid, concatenated with the query features and a
cosine-similarity channel, convolved twice, and bilinearly upsampled to
two per-pixel channels (0 = not-target, 1 = target).  Foreground and
background predictions therefore share every parameter by construction.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor
from .nn import Conv2d, bilinear_matrix
from .prototypes import Prototype

_COSINE_EPS = 1e-8
_COSINE_GAIN = 10.0  # relu features compress cosine range; rescale for contrast


@dataclass
class MaskLogits:
    """(2, H, W) scores at image resolution; argmax gives the binary mask."""

    logits: Tensor

    @property
    def shape(self) -> tuple[int, ...]:
        return self.logits.shape

    def predicted_mask(self) -> np.ndarray:
        return (self.logits.data[1] > self.logits.data[0]).astype(np.uint8)


class Decoder:
    def __init__(self, d: int, feature_size: int, image_size: int,
                 hidden: int = 48, depth: int = 2,
                 similarity_channel: bool = True,
                 prior_channel: bool = False, rng_seed: int = 0):
        if depth < 2:
            raise ValueError("decoder needs at least 2 convolution layers")
        rng = np.random.default_rng(rng_seed)
        in_channels = 2 * d + int(similarity_channel) + int(prior_channel)
        self.d = d
        self.feature_size = feature_size
        self.image_size = image_size
        self.similarity_channel = similarity_channel
        self.prior_channel = prior_channel
        widths = [in_channels] + [hidden] * (depth - 1) + [2]
        self.convs = [Conv2d(widths[i], widths[i + 1], 3, padding=1, rng=rng,
                             name=f"decoder.conv{i + 1}")
                      for i in range(depth)]
        self._upsample = bilinear_matrix(image_size, feature_size)

    @property
    def conv1(self) -> Conv2d:
        return self.convs[0]

    @property
    def conv2(self) -> Conv2d:
        return self.convs[-1]

    def _job_channels(self, prototype: Prototype, features, prior):
        f_q = getattr(features, "tensor", features)
        f_q = ad.as_tensor(f_q)
        if f_q.ndim != 3 or f_q.shape[0] != self.d:
            raise ValueError(f"expected ({self.d}, h, w) features, "
                             f"got {f_q.shape}")
        if prototype.d != self.d:
            raise ValueError(f"prototype has d={prototype.d}, decoder wants "
                             f"{self.d}")
        _, h, w = f_q.shape
        vec = prototype.vector
        tiled = ad.broadcast_to(ad.reshape(vec, (self.d, 1, 1)), (self.d, h, w))
        channels = [f_q, tiled]
        if self.similarity_channel:
            inner = ad.tsum(ad.mul(f_q, ad.reshape(vec, (self.d, 1, 1))),
                            axis=0, keepdims=True)
            f_norm = ad.sqrt(ad.tsum(ad.mul(f_q, f_q), axis=0, keepdims=True)
                             + _COSINE_EPS)
            p_norm = ad.sqrt(ad.tsum(ad.mul(vec, vec)) + _COSINE_EPS)
            cosine = ad.div(inner, ad.mul(f_norm, p_norm))
            channels.append(ad.mul(cosine, _COSINE_GAIN))
        if self.prior_channel:
            if prior is None:
                raise ValueError("decoder was built with a prior channel")
            channels.append(ad.reshape(ad.as_tensor(prior), (1, h, w)))
        elif prior is not None:
            raise ValueError("decoder was built without a prior channel")
        return ad.concat(channels, axis=0)

    def decode_batch(self, jobs: list[tuple[Prototype, object]],
                     priors: list | None = None) -> list[MaskLogits]:
        """Decode several (prototype, features) pairs through one pass.

        All jobs share the head parameters; batching them only saves
        per-op overhead.
        """
        if not jobs:
            return []
        priors = priors or [None] * len(jobs)
        x = ad.stack([self._job_channels(p, f, prior)
                      for (p, f), prior in zip(jobs, priors)], axis=0)
        for conv in self.convs[:-1]:
            x = ad.relu(conv(x))
        x = self.convs[-1](x)
        logits = ad.matrix_resample(x, self._upsample, self._upsample)
        return [MaskLogits(logits=ad.index0(logits, i))
                for i in range(len(jobs))]

    def decode(self, prototype: Prototype, features, prior=None) -> MaskLogits:
        """Score every query pixel against `prototype`.

        `prior` is reserved for decoders that consume an external prior
        map; this head must be constructed with `prior_channel=True` to
        accept one.
        """
        return self.decode_batch([(prototype, features)], [prior])[0]

    def named_parameters(self) -> list[Parameter]:
        return [p for conv in self.convs for p in conv.parameters()]


def foreground_loss(prediction: MaskLogits, mask: np.ndarray) -> Tensor:
    """Mean per-pixel two-class cross-entropy against the binary mask."""
    mask = np.asarray(mask)
    if mask.shape != prediction.logits.shape[1:]:
        raise ValueError(f"mask shape {mask.shape} does not match logits "
                         f"{prediction.logits.shape[1:]}")
    return ad.cross_entropy_logits(prediction.logits,
                                   (mask != 0).astype(np.int64))


def background_loss(prediction: MaskLogits, mask: np.ndarray) -> Tensor:
    """Same cross-entropy with the complement mask as the target."""
    mask = np.asarray(mask)
    if mask.shape != prediction.logits.shape[1:]:
        raise ValueError(f"mask shape {mask.shape} does not match logits "
                         f"{prediction.logits.shape[1:]}")
    return foreground_loss(prediction, 1 - (mask != 0).astype(np.int64))
