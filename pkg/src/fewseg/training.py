"""Episodic training: loss combination, poly LR schedule, and the run loop.

A run has two phases.  Phase one teaches the trunk to discriminate the
fold's training classes (pooled-feature classification); the configured
stages are then frozen, mirroring the fixed-backbone contract of the
full-scale setting.  Phase two optimizes the fusion and decoder layers,
plus the class-weight rows when their losses are active, over a seeded
stream of episodes with SGD and polynomial learning-rate decay.

Two checkpoints come out of a run: the training checkpoint carries every
parameter, the inference checkpoint drops the class-weight rows (they are
training-only machinery).
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, fields, replace

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .checkpoint import save_checkpoint
from .data import FoldSplit, SceneDataset, downsample_mask, episode_stream, \
    mask_code
from .encoder import EncoderConfig, NumericError
from .model import FewShotSegmenter, ModelConfig
from .nn import SGD, Linear
from .prototypes import masked_average_pool
from .seeding import derive_seed

LOSS_CSV_COLUMNS = ("step", "total", "base_f", "base_b", "known", "latent", "lr")


@dataclass(frozen=True)
class TrainConfig:
    """Everything a training run depends on (all of it seeded)."""

    alpha: float = 1.0
    beta: float = 0.5
    n_latent: int = 8
    k: int = 1
    epochs: int = 30
    episodes_per_epoch: int = 80
    batch_size: int = 4
    lr: float = 0.0025
    momentum: float = 0.9
    weight_decay: float = 1e-4
    poly_power: float = 0.9
    seed: int = 0
    class_weight_lr_mult: float = 1.0
    # model shape
    d: int = 64
    image_size: int = 64
    stage_channels: tuple[int, ...] = (16, 32, 48, 48)
    stage_strides: tuple[int, ...] = (2, 2, 1, 1)
    decoder_hidden: int = 48
    decoder_depth: int = 2
    fusion_mode: str = "independent-1x1"
    similarity_channel: bool = True
    detach_query_scores: bool = False
    # background-prototype variants (ablations)
    background_source: str = "query"    # "query" | "support"
    background_mode: str = "reconstruct"  # "reconstruct" | "mask"
    # two-phase schedule
    pretrain: bool = True
    pretrain_steps: int = 800
    pretrain_batch: int = 8
    pretrain_lr: float = 0.02
    frozen_after_pretrain: tuple[str, ...] = ("stage1", "stage2", "stage3")

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("alpha and beta must be non-negative")
        if self.batch_size < 1 or self.epochs < 1 or self.episodes_per_epoch < 1:
            raise ValueError("epochs, episodes, and batch size must be positive")

    @property
    def steps(self) -> int:
        return self.epochs * max(self.episodes_per_epoch // self.batch_size, 1)


@dataclass
class LossBreakdown:
    step: int
    total: float
    base_f: float
    base_b: float
    known: float
    latent: float
    lr: float


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss; the last good state was kept."""


def total_loss(base_f, base_b, known, latent, alpha: float, beta: float):
    """base_f + alpha * base_b + beta * (known + latent).

    Accepts floats or graph tensors; a non-finite part raises with the
    offending term named.
    """
    parts = {"base_f": base_f, "base_b": base_b, "known": known,
             "latent": latent}
    for name, part in parts.items():
        value = part.data if isinstance(part, Tensor) else part
        if not np.all(np.isfinite(value)):
            raise NumericError(f"loss term {name} is not finite")
    if isinstance(base_f, Tensor) or any(isinstance(p, Tensor)
                                         for p in parts.values()):
        out = base_f
        if alpha != 0.0:
            out = ad.add(out, ad.mul(base_b, alpha))
        if beta != 0.0:
            out = ad.add(out, ad.mul(ad.add(known, latent), beta))
        return out
    return base_f + alpha * base_b + beta * (known + latent)


def poly_lr(base_lr: float, step: int, max_steps: int, power: float) -> float:
    """base_lr * (1 - step / max_steps) ** power."""
    if not 0 <= step <= max_steps:
        raise ValueError(f"step {step} outside [0, {max_steps}]")
    return base_lr * (1.0 - step / max_steps) ** power


def model_config_for(config: TrainConfig, fold: FoldSplit) -> ModelConfig:
    return ModelConfig(
        known_class_ids=tuple(sorted(fold.train_classes)),
        encoder=EncoderConfig(
            stage_channels=tuple(config.stage_channels),
            stage_strides=tuple(config.stage_strides),
            d=config.d,
            fusion_mode=config.fusion_mode,
        ),
        n_latent=config.n_latent,
        image_size=config.image_size,
        decoder_hidden=config.decoder_hidden,
        decoder_depth=config.decoder_depth,
        similarity_channel=config.similarity_channel,
        detach_query_scores=config.detach_query_scores,
    )


def inference_config_dict(model_config: ModelConfig) -> dict:
    """The part of the configuration that defines the test-time graph.

    Training-only knobs (class-weight sizes, loss wiring) are excluded on
    purpose: checkpoints trained with different QSR settings are
    interchangeable at inference time.
    """
    full = model_config.to_dict()
    return {k: full[k] for k in ("encoder", "image_size", "decoder_hidden",
                                 "similarity_channel")}


def pretrain_trunk(model: FewShotSegmenter, dataset: SceneDataset,
                   classes, config: TrainConfig) -> None:
    """Phase one: classify pooled late-stage features of the train classes."""
    class_list = sorted(classes)
    row = {cid: i for i, cid in enumerate(class_list)}
    rng = np.random.default_rng(derive_seed(config.seed, "pretrain"))
    head = Linear(config.stage_channels[-1], len(class_list),
                  rng=np.random.default_rng(
                      derive_seed(config.seed, "pretrain-head")),
                  name="pretrain_head")
    params = [p for stage in model.encoder.stages for p in stage.parameters()]
    params += head.parameters()
    optimizer = SGD(params, momentum=config.momentum,
                    weight_decay=config.weight_decay)
    for step in range(config.pretrain_steps):
        optimizer.zero_grad()
        chosen = []
        for _ in range(config.pretrain_batch):
            cid = int(rng.choice(class_list))
            idx = int(rng.choice(dataset.indices_for_class(cid)))
            chosen.append((cid, dataset.pair(idx)))
        _, late = model.encoder.trunk_batch(
            np.stack([pair.image for _, pair in chosen]))
        logit_rows = []
        for i, (cid, pair) in enumerate(chosen):
            fmap = ad.index0(late, i)
            small = downsample_mask(
                (pair.mask == mask_code(cid)).astype(np.uint8),
                fmap.shape[1:])
            logit_rows.append(head(masked_average_pool(fmap, small).vector))
        logits = ad.transpose(ad.stack(logit_rows, axis=0), (1, 0))
        targets = np.array([row[cid] for cid, _ in chosen])
        ad.cross_entropy_logits(logits, targets).backward()
        optimizer.step(poly_lr(config.pretrain_lr, step, config.pretrain_steps,
                               config.poly_power))


@dataclass
class TrainResult:
    model: FewShotSegmenter
    log: list[LossBreakdown]
    training_path: str | None = None
    inference_path: str | None = None
    loss_csv_path: str | None = None
    config_path: str | None = None
    diverged: bool = False


def train_run(config: TrainConfig, fold: FoldSplit, dataset: SceneDataset,
              out_dir: str | None = None) -> TrainResult:
    """Train on the fold's train classes; emit checkpoints and a loss log."""
    for cid in fold.train_classes:
        if len(dataset.indices_for_class(cid)) < config.k + 1:
            raise ValueError(f"class {cid} has too few images for "
                             f"k={config.k} episodes")

    model_config = model_config_for(config, fold)
    model = FewShotSegmenter(model_config,
                             rng_seed=derive_seed(config.seed, "model"))

    if config.pretrain:
        pretrain_trunk(model, dataset, fold.train_classes, config)
        model.encoder.set_frozen_stages(config.frozen_after_pretrain)

    lr_mults = {id(p): config.class_weight_lr_mult
                for p in model.class_weights.parameters()}
    optimizer = SGD(model.trainable_parameters(), momentum=config.momentum,
                    weight_decay=config.weight_decay, lr_multipliers=lr_mults)
    episodes = episode_stream(dataset, fold.train_classes, config.k,
                              seed=derive_seed(config.seed, "episodes"))

    log: list[LossBreakdown] = []
    diverged = False
    for step in range(config.steps):
        optimizer.zero_grad()
        batch = [next(episodes) for _ in range(config.batch_size)]
        terms = model.episode_batch_terms(
            batch, config.alpha, config.beta,
            background_source=config.background_source,
            background_mode=config.background_mode)

        def mean_of(attr):
            values = [getattr(t, attr) for t in terms]
            if values[0] is None:
                return 0.0
            out = values[0]
            for v in values[1:]:
                out = ad.add(out, v)
            return ad.mul(out, 1.0 / len(values))

        base_f, base_b = mean_of("base_f"), mean_of("base_b")
        known, latent = mean_of("known"), mean_of("latent")
        try:
            batch_loss = total_loss(base_f, base_b, known, latent,
                                    config.alpha, config.beta)
        except NumericError:
            diverged = True  # abort before the step: parameters are last-good
            break
        lr = poly_lr(config.lr, step, config.steps, config.poly_power)
        batch_loss.backward()
        optimizer.step(lr)

        def value(term) -> float:
            return float(term.data) if isinstance(term, Tensor) else float(term)

        log.append(LossBreakdown(
            step=step, total=value(batch_loss), base_f=value(base_f),
            base_b=value(base_b), known=value(known), latent=value(latent),
            lr=lr))

    result = TrainResult(model=model, log=log, diverged=diverged)
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        result.training_path = os.path.join(out_dir, "training.npz")
        result.inference_path = os.path.join(out_dir, "inference.npz")
        result.loss_csv_path = os.path.join(out_dir, "losses.csv")
        result.config_path = os.path.join(out_dir, "train_config.cfg")
        save_checkpoint(result.training_path, model.training_state(),
                        {"model": model_config.to_dict(), "kind": "training"})
        save_checkpoint(result.inference_path, model.inference_state(),
                        {"model": model_config.to_dict(), "kind": "inference",
                         "inference": inference_config_dict(model_config)})
        write_loss_csv(result.loss_csv_path, log)
        write_config(config, result.config_path)
    if diverged:
        raise DivergenceError(
            f"non-finite loss at step {len(log)}; last good state "
            + ("saved" if out_dir else "kept on the model"))
    return result


def write_loss_csv(path: str, log: list[LossBreakdown]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(LOSS_CSV_COLUMNS)
        for entry in log:
            writer.writerow([entry.step, repr(entry.total), repr(entry.base_f),
                             repr(entry.base_b), repr(entry.known),
                             repr(entry.latent), repr(entry.lr)])


def read_loss_csv(path: str) -> list[LossBreakdown]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        return [LossBreakdown(step=int(r["step"]), total=float(r["total"]),
                              base_f=float(r["base_f"]),
                              base_b=float(r["base_b"]),
                              known=float(r["known"]),
                              latent=float(r["latent"]), lr=float(r["lr"]))
                for r in reader]


# ---------------------------------------------------------------------------
# flat key-value config files
# ---------------------------------------------------------------------------

_TUPLE_FIELDS = {"stage_channels", "stage_strides", "frozen_after_pretrain"}


def write_config(config: TrainConfig, path: str) -> None:
    """One `key = value` line per field; `#` starts a comment."""
    with open(path, "w") as fh:
        fh.write("# fewseg training configuration\n")
        for f in fields(TrainConfig):
            value = getattr(config, f.name)
            if f.name in _TUPLE_FIELDS:
                value = ",".join(str(v) for v in value)
            fh.write(f"{f.name} = {value}\n")


def read_config(path: str, overrides: dict | None = None) -> TrainConfig:
    known = {f.name: f for f in fields(TrainConfig)}
    values: dict = {}
    with open(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected 'key = value'")
            key, _, text = line.partition("=")
            key, text = key.strip(), text.strip()
            if key not in known:
                raise ValueError(f"{path}:{lineno}: unknown config key "
                                 f"{key!r}")
            values[key] = _parse_value(key, text)
    if overrides:
        for key, value in overrides.items():
            if key not in known:
                raise ValueError(f"unknown config key {key!r}")
            values[key] = value
    return TrainConfig(**values)


def _parse_value(key: str, text: str):
    if key in _TUPLE_FIELDS:
        if key in ("stage_channels", "stage_strides"):
            return tuple(int(v) for v in text.split(",") if v)
        return tuple(v.strip() for v in text.split(",") if v.strip())
    blank = TrainConfig(seed=0)
    current = getattr(blank, key)
    if isinstance(current, bool):
        if text.lower() in ("true", "1", "yes"):
            return True
        if text.lower() in ("false", "0", "no"):
            return False
        raise ValueError(f"config key {key!r} expects a boolean, got {text!r}")
    if isinstance(current, int):
        try:
            return int(text)
        except ValueError as exc:
            raise ValueError(f"config key {key!r} expects an integer, "
                             f"got {text!r}") from exc
    if isinstance(current, float):
        try:
            return float(text)
        except ValueError as exc:
            raise ValueError(f"config key {key!r} expects a number, "
                             f"got {text!r}") from exc
    return text


def with_overrides(config: TrainConfig, **overrides) -> TrainConfig:
    return replace(config, **overrides)
