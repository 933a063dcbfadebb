"""Prototype extraction: masked/global average pooling and k-shot fusion."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


class EmptyMaskError(ValueError):
    """Masked pooling was asked to average over zero foreground pixels."""


@dataclass
class Prototype:
    """A d-dimensional summary vector of a semantic region."""

    vector: Tensor
    kind: str  # "foreground" | "query" | "background"
    class_id: int | None = None

    @property
    def d(self) -> int:
        return self.vector.shape[0]


def _feature_tensor(features) -> Tensor:
    tensor = getattr(features, "tensor", features)
    tensor = ad.as_tensor(tensor)
    if tensor.ndim != 3:
        raise ValueError(f"expected (d, h, w) features, got {tensor.shape}")
    return tensor


def masked_average_pool(features, mask: np.ndarray,
                        kind: str = "foreground",
                        class_id: int | None = None) -> Prototype:
    """Mean feature vector over the positions where `mask` is 1.

    The indicator semantics are exact: channel sums over active positions
    divided by the active-pixel count.  An all-zero mask is an error (the
    mean is undefined), as is a spatial shape mismatch.
    """
    tensor = _feature_tensor(features)
    mask = np.asarray(mask)
    if mask.shape != tensor.shape[1:]:
        raise ValueError(
            f"mask shape {mask.shape} does not match features {tensor.shape[1:]}")
    count = float((mask != 0).sum())
    if count == 0:
        raise EmptyMaskError("mask has no foreground pixels")
    weights = (mask != 0).astype(np.float64)
    pooled = ad.mul(ad.tsum(ad.mul(tensor, weights[None, :, :]), axis=(1, 2)),
                    1.0 / count)
    return Prototype(vector=pooled, kind=kind, class_id=class_id)


def global_average_pool(features, kind: str = "query") -> Prototype:
    """Per-channel mean over all spatial positions."""
    tensor = _feature_tensor(features)
    return Prototype(vector=ad.tmean(tensor, axis=(1, 2)), kind=kind)


def fuse_support_prototypes(prototypes: list[Prototype]) -> Prototype:
    """Element-wise mean of the k support prototypes."""
    if not prototypes:
        raise ValueError("need at least one prototype to fuse")
    d = prototypes[0].d
    if any(p.d != d for p in prototypes):
        raise ValueError("prototypes disagree on dimensionality")
    total = prototypes[0].vector
    for p in prototypes[1:]:
        total = ad.add(total, p.vector)
    mean = ad.mul(total, 1.0 / len(prototypes))
    return Prototype(vector=mean, kind="foreground",
                     class_id=prototypes[0].class_id)
