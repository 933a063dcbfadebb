"""Shared convolutional trunk plus mid/late feature fusion.

A four-stage trunk (strides 2, 2, 2, 1) maps an image to two feature maps
at 1/8 resolution: the stage-3 output (mid) and the stride-1 stage-4
output (late).  The pair is concatenated and encoded to d channels by a
fusion convolution that is either a single 3x3 layer shared between the
support and query branches or a pair of independent 1x1 layers, matching
the two fusion conventions of the prototype-based segmenters this sandbox
mirrors.  Both images of an episode pass through identical trunk weights.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor
from .nn import Conv2d

DEFAULT_STRIDES = (2, 2, 1, 1)
FUSION_MODES = ("shared-3x3", "independent-1x1")


class NumericError(RuntimeError):
    """A forward pass produced non-finite activations."""


@dataclass(frozen=True)
class EncoderConfig:
    stage_channels: tuple[int, ...] = (16, 32, 48, 48)
    stage_strides: tuple[int, ...] = DEFAULT_STRIDES
    d: int = 64
    frozen_stages: tuple[str, ...] = ()
    fusion_mode: str = "independent-1x1"
    image_channels: int = 3

    def __post_init__(self):
        if len(self.stage_channels) != 4:
            raise ValueError("trunk has exactly 4 stages")
        if len(self.stage_strides) != 4 or any(s not in (1, 2)
                                               for s in self.stage_strides):
            raise ValueError("stage strides must be four values of 1 or 2")
        if self.stage_strides[-1] != 1:
            raise ValueError("the late stage must keep the mid resolution")
        if self.fusion_mode not in FUSION_MODES:
            raise ValueError(f"fusion_mode must be one of {FUSION_MODES}")
        valid = {f"stage{i}" for i in range(1, 5)}
        unknown = set(self.frozen_stages) - valid
        if unknown:
            raise ValueError(f"unknown stage names: {sorted(unknown)}")

    @property
    def spatial_scale(self) -> int:
        return int(np.prod(self.stage_strides))


@dataclass
class FeatureMap:
    """(d, h, w) activations plus the image-to-feature downscale factor."""

    tensor: Tensor
    spatial_scale: int

    @property
    def shape(self) -> tuple[int, ...]:
        return self.tensor.shape


class Encoder:
    def __init__(self, config: EncoderConfig, rng_seed: int = 0):
        self.config = config
        rng = np.random.default_rng(rng_seed)
        channels = [config.image_channels, *config.stage_channels]
        self.stages = [
            Conv2d(channels[i], channels[i + 1], 3,
                   stride=config.stage_strides[i],
                   padding=1, rng=rng, name=f"stage{i + 1}")
            for i in range(4)
        ]
        fused_in = config.stage_channels[2] + config.stage_channels[3]
        if config.fusion_mode == "shared-3x3":
            shared = Conv2d(fused_in, config.d, 3, padding=1, rng=rng,
                            name="fusion")
            self._fusion = {"support": shared, "query": shared}
        else:
            self._fusion = {
                "support": Conv2d(fused_in, config.d, 1, rng=rng,
                                  name="fusion_support"),
                "query": Conv2d(fused_in, config.d, 1, rng=rng,
                                name="fusion_query"),
            }
        self.set_frozen_stages(config.frozen_stages)

    def set_frozen_stages(self, names) -> None:
        """Mark stage parameters non-trainable; values then never change."""
        frozen = set(names)
        for i, stage in enumerate(self.stages, start=1):
            trainable = f"stage{i}" not in frozen
            for p in stage.parameters():
                p.requires_grad = trainable
        self._frozen = frozen

    @property
    def frozen_stages(self) -> set[str]:
        return set(self._frozen)

    def trunk_batch(self, images: np.ndarray) -> tuple[Tensor, Tensor]:
        """Run the trunk on (N, C, H, W) images; returns batched (mid, late)."""
        images = np.asarray(images, dtype=np.float64)
        if images.ndim != 4 or images.shape[1] != self.config.image_channels:
            raise ValueError(
                f"expected (N, {self.config.image_channels}, H, W) images, "
                f"got {images.shape}")
        x = Tensor(images)
        activations = []
        for stage in self.stages:
            x = ad.relu(stage(x))
            activations.append(x)
        mid, late = activations[2], activations[3]
        if not (np.isfinite(mid.data).all() and np.isfinite(late.data).all()):
            raise NumericError("trunk produced non-finite activations")
        return mid, late

    def fuse_batch(self, mid: Tensor, late: Tensor, branch: str) -> Tensor:
        """Fuse batched (mid, late) maps to (N, d, h, w)."""
        if branch not in self._fusion:
            raise ValueError("branch must be 'support' or 'query'")
        if mid.shape[2:] != late.shape[2:]:
            raise ValueError("mid and late feature maps are not aligned")
        return ad.relu(self._fusion[branch](ad.concat([mid, late], axis=1)))

    def extract_stage_features(self, image) -> tuple[FeatureMap, FeatureMap]:
        """Run the trunk; returns the (mid, late) pair at 1/8 resolution."""
        image = np.asarray(image, dtype=np.float64)
        if image.ndim != 3:
            raise ValueError(f"expected (C, H, W) image, got {image.shape}")
        mid, late = self.trunk_batch(image[None])
        scale = self.config.spatial_scale
        return (FeatureMap(ad.index0(mid, 0), spatial_scale=scale),
                FeatureMap(ad.index0(late, 0), spatial_scale=scale))

    def fuse_features(self, mid: FeatureMap, late: FeatureMap,
                      branch: str) -> FeatureMap:
        """Concatenate the stage pair and encode it to d channels."""
        if mid.tensor.shape[1:] != late.tensor.shape[1:]:
            raise ValueError("mid and late feature maps are not aligned")
        fused = self.fuse_batch(ad.reshape(mid.tensor, (1, *mid.tensor.shape)),
                                ad.reshape(late.tensor, (1, *late.tensor.shape)),
                                branch)
        return FeatureMap(ad.index0(fused, 0), spatial_scale=mid.spatial_scale)

    def encode(self, image, branch: str) -> FeatureMap:
        """extract + fuse in one call."""
        mid, late = self.extract_stage_features(image)
        return self.fuse_features(mid, late, branch)

    def encode_batch(self, images: np.ndarray, branch: str) -> Tensor:
        mid, late = self.trunk_batch(images)
        return self.fuse_batch(mid, late, branch)

    def named_parameters(self) -> list[Parameter]:
        params: list[Parameter] = []
        for stage in self.stages:
            params.extend(stage.parameters())
        seen = set()
        for layer in self._fusion.values():
            if id(layer) not in seen:
                seen.add(id(layer))
                params.extend(layer.parameters())
        return params

    def trainable_parameters(self) -> list[Parameter]:
        return [p for p in self.named_parameters() if p.requires_grad]
