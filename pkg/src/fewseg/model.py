"""The composed few-shot segmenter.

Wires encoder, prototype pooling, class-weight reconstruction, and the
shared decoder into episode-level losses and predictions.  The class
weights exist only for training: inference touches just the foreground
path, and the exported inference state carries no class-weight rows.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor
from .data import Episode, downsample_mask
from .decoder import Decoder, MaskLogits, background_loss, foreground_loss
from .encoder import Encoder, EncoderConfig, FeatureMap
from .prototypes import Prototype, fuse_support_prototypes, \
    global_average_pool, masked_average_pool
from .reconstruction import ClassWeights, init_class_weights, \
    cross_correlation, known_class_loss, latent_class_loss, \
    reconstruct_query_background
from .seeding import derive_seed

CLASS_WEIGHT_PREFIX = "class_weights."
BACKGROUND_SOURCES = ("query", "support")
BACKGROUND_MODES = ("reconstruct", "mask")


@dataclass(frozen=True)
class ModelConfig:
    known_class_ids: tuple[int, ...]
    encoder: EncoderConfig = EncoderConfig()
    n_latent: int = 0
    image_size: int = 64
    decoder_hidden: int = 48
    decoder_depth: int = 2
    similarity_channel: bool = True
    detach_query_scores: bool = False

    def __post_init__(self):
        if len(self.known_class_ids) < 1:
            raise ValueError("need at least one known class id")
        if self.n_latent < 0:
            raise ValueError("n_latent must be non-negative")

    @property
    def n_known(self) -> int:
        return len(self.known_class_ids)

    def to_dict(self) -> dict:
        return asdict(self)

    @staticmethod
    def from_dict(payload: dict) -> "ModelConfig":
        encoder = dict(payload["encoder"])
        encoder["stage_channels"] = tuple(encoder["stage_channels"])
        encoder["stage_strides"] = tuple(encoder["stage_strides"])
        encoder["frozen_stages"] = tuple(encoder["frozen_stages"])
        rest = {k: v for k, v in payload.items() if k != "encoder"}
        rest["known_class_ids"] = tuple(rest["known_class_ids"])
        return ModelConfig(encoder=EncoderConfig(**encoder), **rest)


@dataclass
class EpisodeTerms:
    """The four loss components of one episode, as graph tensors."""

    base_f: Tensor
    base_b: Tensor | None
    known: Tensor | None
    latent: Tensor | None


class FewShotSegmenter:
    def __init__(self, config: ModelConfig, rng_seed: int = 0):
        self.config = config
        self.encoder = Encoder(config.encoder,
                               rng_seed=derive_seed(rng_seed, "encoder"))
        self._feature_size = config.image_size // config.encoder.spatial_scale
        self.decoder = Decoder(
            d=config.encoder.d,
            feature_size=self._feature_size,
            image_size=config.image_size,
            hidden=config.decoder_hidden,
            depth=config.decoder_depth,
            similarity_channel=config.similarity_channel,
            rng_seed=derive_seed(rng_seed, "decoder"),
        )
        self.class_weights = init_class_weights(
            config.n_known, config.n_latent, config.encoder.d,
            rng_seed=derive_seed(rng_seed, "class-weights"))
        self._class_row = {cid: row
                           for row, cid in enumerate(config.known_class_ids)}

    # ------------------------------------------------------------------
    # forward paths
    # ------------------------------------------------------------------

    def _support_features(self, episode: Episode) -> list[FeatureMap]:
        return [self.encoder.encode(pair.image, "support")
                for pair in episode.support]

    def foreground_prototype(self, episode: Episode,
                             support_features=None) -> Prototype:
        feats = support_features or self._support_features(episode)
        protos = []
        for fmap, pair in zip(feats, episode.support):
            small = downsample_mask(pair.mask, fmap.shape[1:])
            protos.append(masked_average_pool(fmap, small,
                                              class_id=episode.class_id))
        return fuse_support_prototypes(protos)

    def class_row(self, class_id: int) -> int:
        if class_id not in self._class_row:
            raise ValueError(f"class {class_id} is not a known class of "
                             f"this model")
        return self._class_row[class_id]

    def episode_terms(self, episode: Episode, alpha: float, beta: float,
                      background_source: str = "query",
                      background_mode: str = "reconstruct") -> EpisodeTerms:
        """All loss components of one training episode.

        Components whose weight is zero are skipped entirely, so an
        alpha = beta = 0 run builds exactly the baseline forward graph.
        """
        return self.episode_batch_terms([episode], alpha, beta,
                                        background_source, background_mode)[0]

    def episode_batch_terms(self, episodes: list[Episode], alpha: float,
                            beta: float, background_source: str = "query",
                            background_mode: str = "reconstruct"
                            ) -> list[EpisodeTerms]:
        """episode_terms over a batch, sharing the convolutional passes."""
        if background_source not in BACKGROUND_SOURCES:
            raise ValueError(f"background_source must be one of "
                             f"{BACKGROUND_SOURCES}")
        if background_mode not in BACKGROUND_MODES:
            raise ValueError(f"background_mode must be one of "
                             f"{BACKGROUND_MODES}")
        support_images = np.stack([pair.image for ep in episodes
                                   for pair in ep.support])
        query_images = np.stack([ep.query.image for ep in episodes])
        s_fused = self.encoder.encode_batch(support_images, "support")
        q_fused = self.encoder.encode_batch(query_images, "query")
        grid = q_fused.shape[2:]

        prototypes, queries, support_maps = [], [], []
        offset = 0
        for i, episode in enumerate(episodes):
            shots, feats = [], []
            for j, pair in enumerate(episode.support):
                fmap = ad.index0(s_fused, offset + j)
                feats.append(fmap)
                small = downsample_mask(pair.mask, grid)
                shots.append(masked_average_pool(fmap, small,
                                                 class_id=episode.class_id))
            offset += len(episode.support)
            prototypes.append(fuse_support_prototypes(shots))
            queries.append(ad.index0(q_fused, i))
            support_maps.append(feats)

        jobs = list(zip(prototypes, queries))
        if alpha > 0.0:
            for i, episode in enumerate(episodes):
                p_b = self._background_prototype(
                    episode, queries[i], support_maps[i],
                    source=background_source, mode=background_mode)
                jobs.append((p_b, queries[i]))
        logits = self.decoder.decode_batch(jobs)

        shared_latent = (latent_class_loss(cross_correlation(self.class_weights))
                         if beta > 0.0 else None)
        terms = []
        for i, episode in enumerate(episodes):
            base_f = foreground_loss(logits[i], episode.query.mask)
            base_b = (background_loss(logits[len(episodes) + i],
                                      episode.query.mask)
                      if alpha > 0.0 else None)
            known = (known_class_loss(prototypes[i],
                                      self.class_row(episode.class_id),
                                      self.class_weights)
                     if beta > 0.0 else None)
            terms.append(EpisodeTerms(base_f=base_f, base_b=base_b,
                                      known=known, latent=shared_latent))
        return terms

    def _background_prototype(self, episode: Episode, f_q,
                              support_features: list,
                              source: str, mode: str) -> Prototype:
        f_q_tensor = getattr(f_q, "tensor", f_q)
        if mode == "mask":
            small = downsample_mask(episode.query.mask, f_q_tensor.shape[1:])
            return masked_average_pool(f_q, 1 - (small != 0),
                                       kind="background")
        if source == "query":
            pooled = global_average_pool(f_q)
        else:
            gaps = [global_average_pool(fmap) for fmap in support_features]
            pooled = Prototype(
                vector=fuse_support_prototypes(gaps).vector, kind="query")
        return reconstruct_query_background(
            pooled, self.class_row(episode.class_id), self.class_weights,
            detach_query=self.config.detach_query_scores)

    def predict(self, episode: Episode) -> np.ndarray:
        """Inference: decode the foreground prototype only (no class weights)."""
        with ad.no_grad():
            p_f = self.foreground_prototype(episode)
            f_q = self.encoder.encode(episode.query.image, "query")
            return self.decoder.decode(p_f, f_q).predicted_mask()

    def decode_vector(self, vector: np.ndarray, episode: Episode,
                      kind: str = "background") -> np.ndarray:
        """Decode an arbitrary prototype vector against the episode query."""
        with ad.no_grad():
            f_q = self.encoder.encode(episode.query.image, "query")
            proto = Prototype(vector=Tensor(vector), kind=kind)
            return self.decoder.decode(proto, f_q).predicted_mask()

    # ------------------------------------------------------------------
    # parameters and state
    # ------------------------------------------------------------------

    def named_parameters(self) -> dict[str, Parameter]:
        params = {}
        for p in (*self.encoder.named_parameters(),
                  *self.decoder.named_parameters(),
                  *self.class_weights.parameters()):
            if p.name in params:
                raise RuntimeError(f"duplicate parameter name {p.name}")
            params[p.name] = p
        return params

    def trainable_parameters(self) -> list[Parameter]:
        return [p for p in self.named_parameters().values() if p.requires_grad]

    def training_state(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy()
                for name, p in self.named_parameters().items()}

    def inference_state(self) -> dict[str, np.ndarray]:
        """Deployed parameters: the class-weight rows are training-only."""
        return {name: p.data.copy()
                for name, p in self.named_parameters().items()
                if not name.startswith(CLASS_WEIGHT_PREFIX)}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        params = self.named_parameters()
        for name, value in state.items():
            if name not in params:
                raise KeyError(f"unknown parameter {name}")
            if params[name].data.shape != value.shape:
                raise ValueError(f"shape mismatch for {name}")
            params[name].data = np.asarray(value, dtype=np.float64).copy()
