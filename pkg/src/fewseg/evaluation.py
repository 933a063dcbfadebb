"""Metrics, cross-validation, ablation grids, and latent visualization."""

from __future__ import annotations

import csv
import json
import os
import warnings
from dataclasses import asdict, dataclass, replace

import numpy as np
from PIL import Image

from . import autodiff as ad
from .checkpoint import config_hash
from .data import Episode, FoldSplit, SceneDataset, sample_episode
from .model import FewShotSegmenter
from .prototypes import global_average_pool
from .seeding import derive_seed
from .training import TrainConfig, TrainResult, train_run

FPR_MODES = ("pooled", "per-episode")


@dataclass
class ConfusionCounts:
    """Pixel counts of one binary prediction against one binary truth."""

    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp,
                               self.fn + other.fn, self.tn + other.tn)

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn


def confusion_from_masks(prediction: np.ndarray,
                         truth: np.ndarray) -> ConfusionCounts:
    prediction = np.asarray(prediction) != 0
    truth = np.asarray(truth) != 0
    if prediction.shape != truth.shape:
        raise ValueError("prediction and truth shapes differ")
    return ConfusionCounts(
        tp=int((prediction & truth).sum()),
        fp=int((prediction & ~truth).sum()),
        fn=int((~prediction & truth).sum()),
        tn=int((~prediction & ~truth).sum()),
    )


def iou(counts: ConfusionCounts) -> float:
    union = counts.tp + counts.fp + counts.fn
    if union == 0:
        raise ValueError("IoU undefined: empty union")
    return counts.tp / union


def miou(per_class: dict[int, ConfusionCounts]) -> float:
    """Mean over classes of TP / (TP + FP + FN).

    Classes whose union is empty are excluded with a warning that reports
    how many were dropped.
    """
    values, excluded = [], 0
    for counts in per_class.values():
        try:
            values.append(iou(counts))
        except ValueError:
            excluded += 1
    if excluded:
        warnings.warn(f"mIoU: excluded {excluded} class(es) with empty union")
    if not values:
        raise ValueError("mIoU undefined: every class had an empty union")
    return float(np.mean(values))


def fb_iou(counts: ConfusionCounts) -> float:
    """Mean of merged-foreground IoU and background IoU."""
    foreground = iou(counts)
    background_union = counts.tn + counts.fp + counts.fn
    if background_union == 0:
        raise ValueError("FB-IoU undefined: no non-TP pixels")
    return (foreground + counts.tn / background_union) / 2.0


def fpr(counts: ConfusionCounts) -> float:
    """FP / (FP + TN) over pixels whose truth is background."""
    denom = counts.fp + counts.tn
    if denom == 0:
        raise ValueError("FPR undefined: truth has no background pixels")
    return counts.fp / denom


@dataclass
class FoldReport:
    fold_id: int
    per_class_iou: dict[int, float]
    miou: float
    fb_iou: float
    fpr: float | None
    episodes: int
    failed: bool = False

    def to_dict(self) -> dict:
        return {"fold_id": self.fold_id,
                "per_class_iou": {str(k): v
                                  for k, v in self.per_class_iou.items()},
                "miou": self.miou, "fb_iou": self.fb_iou, "fpr": self.fpr,
                "episodes": self.episodes, "failed": self.failed}


@dataclass
class EvalReport:
    folds: list[FoldReport]
    mean_miou: float
    mean_fb_iou: float
    mean_fpr: float | None
    seed: int
    config_hash: str
    k: int = 1

    def to_dict(self) -> dict:
        return {"folds": [f.to_dict() for f in self.folds],
                "mean_miou": self.mean_miou, "mean_fb_iou": self.mean_fb_iou,
                "mean_fpr": self.mean_fpr, "seed": self.seed,
                "config_hash": self.config_hash, "k": self.k}

    def save_json(self, path: str) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=1, sort_keys=True)

    def save_csv(self, path: str) -> None:
        """Table-style export: one row per fold plus a 'Mean' row."""
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["fold", "miou", "fb_iou", "fpr", "episodes"])
            for fold in self.folds:
                writer.writerow([fold.fold_id, repr(fold.miou),
                                 repr(fold.fb_iou),
                                 "" if fold.fpr is None else repr(fold.fpr),
                                 fold.episodes])
            writer.writerow(["Mean", repr(self.mean_miou),
                             repr(self.mean_fb_iou),
                             "" if self.mean_fpr is None
                             else repr(self.mean_fpr), ""])


def evaluate_fold(model: FewShotSegmenter, dataset: SceneDataset,
                  fold: FoldSplit, episodes: int, k: int, seed: int,
                  fpr_mode: str = "pooled") -> FoldReport:
    """Run seeded episodes over the fold's test classes and pool counts."""
    if episodes < 1:
        raise ValueError("episodes must be positive")
    if fpr_mode not in FPR_MODES:
        raise ValueError(f"fpr_mode must be one of {FPR_MODES}")
    rng = np.random.default_rng(seed)
    per_class: dict[int, ConfusionCounts] = {}
    pooled = ConfusionCounts()
    episode_rates: list[float] = []
    for _ in range(episodes):
        episode = sample_episode(dataset, fold.test_classes, k, rng)
        counts = confusion_from_masks(model.predict(episode),
                                      episode.query.mask)
        per_class[episode.class_id] = \
            per_class.get(episode.class_id, ConfusionCounts()) + counts
        pooled = pooled + counts
        if fpr_mode == "per-episode":
            try:
                episode_rates.append(fpr(counts))
            except ValueError:
                pass
    per_class_iou = {}
    for cid, counts in sorted(per_class.items()):
        try:
            per_class_iou[cid] = iou(counts)
        except ValueError:
            per_class_iou[cid] = float("nan")
    try:
        rate = (fpr(pooled) if fpr_mode == "pooled"
                else float(np.mean(episode_rates)) if episode_rates else None)
    except ValueError:
        rate = None
    return FoldReport(fold_id=fold.fold_id, per_class_iou=per_class_iou,
                      miou=miou(per_class), fb_iou=fb_iou(pooled), fpr=rate,
                      episodes=episodes)


def cross_validate(config: TrainConfig, folds: list[FoldSplit],
                   dataset: SceneDataset, episodes_per_fold: int,
                   fpr_mode: str = "pooled",
                   keep_models: bool = False
                   ) -> tuple[EvalReport, list[TrainResult | None]]:
    """Train on each fold's train classes, evaluate on its test classes.

    A fold whose training diverges is marked failed and excluded from the
    means; the report is then partial rather than absent.
    """
    if episodes_per_fold < 1:
        raise ValueError("episodes_per_fold must be positive")
    reports: list[FoldReport] = []
    results: list[TrainResult | None] = []
    for fold in folds:
        fold_config = replace(config, seed=derive_seed(config.seed,
                                                       f"fold{fold.fold_id}"))
        try:
            result = train_run(fold_config, fold, dataset)
        except Exception:
            reports.append(FoldReport(fold_id=fold.fold_id, per_class_iou={},
                                      miou=float("nan"), fb_iou=float("nan"),
                                      fpr=None, episodes=0, failed=True))
            results.append(None)
            continue
        reports.append(evaluate_fold(
            result.model, dataset, fold, episodes_per_fold, config.k,
            seed=derive_seed(config.seed, f"eval-fold{fold.fold_id}"),
            fpr_mode=fpr_mode))
        results.append(result if keep_models else None)
    healthy = [r for r in reports if not r.failed]
    if not healthy:
        raise RuntimeError("every fold failed to train")
    rates = [r.fpr for r in healthy if r.fpr is not None]
    report = EvalReport(
        folds=reports,
        mean_miou=float(np.mean([r.miou for r in healthy])),
        mean_fb_iou=float(np.mean([r.fb_iou for r in healthy])),
        mean_fpr=float(np.mean(rates)) if rates else None,
        seed=config.seed,
        config_hash=config_hash(asdict(config)),
        k=config.k)
    return report, results


# ---------------------------------------------------------------------------
# ablation grids
# ---------------------------------------------------------------------------

GRID_KEYS = {
    "n_latent": lambda cfg, v: replace(cfg, n_latent=int(v)),
    "alpha": lambda cfg, v: replace(cfg, alpha=float(v)),
    "beta": lambda cfg, v: replace(cfg, beta=float(v)),
    "background_source": lambda cfg, v: replace(cfg, background_source=str(v)),
    "background_mode": lambda cfg, v: _apply_mode(cfg, str(v)),
}


def _apply_mode(cfg: TrainConfig, mode: str) -> TrainConfig:
    # the direct-mask variant has no class weights to train, so the
    # class-weight losses are switched off with it
    if mode == "mask":
        return replace(cfg, background_mode="mask", beta=0.0)
    return replace(cfg, background_mode=mode)


@dataclass
class AblationRow:
    settings: dict
    report: EvalReport | None
    error: str | None = None


def ablation_run(config: TrainConfig, grid: dict[str, list],
                 folds: list[FoldSplit], dataset: SceneDataset,
                 episodes_per_fold: int) -> list[AblationRow]:
    """One cross-validation per grid point; failures isolated per row."""
    for key in grid:
        if key not in GRID_KEYS:
            raise ValueError(f"unknown grid key {key!r}; valid keys: "
                             f"{sorted(GRID_KEYS)}")
    points: list[dict] = [{}]
    for key, values in grid.items():
        points = [dict(p, **{key: v}) for p in points for v in values]
    rows = []
    for point in points:
        cfg = config
        for key, value in point.items():
            cfg = GRID_KEYS[key](cfg, value)
        try:
            report, _ = cross_validate(cfg, folds, dataset, episodes_per_fold)
            rows.append(AblationRow(settings=point, report=report))
        except Exception as exc:  # isolate the failing grid point
            rows.append(AblationRow(settings=point, report=None,
                                    error=str(exc)))
    return rows


def write_ablation_csv(rows: list[AblationRow], path: str) -> None:
    axes = sorted({key for row in rows for key in row.settings})
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([*axes, "mean_miou", "mean_fb_iou", "mean_fpr",
                         "error"])
        for row in rows:
            cells = [row.settings.get(a, "") for a in axes]
            if row.report is None:
                writer.writerow([*cells, "", "", "", row.error or "failed"])
            else:
                writer.writerow([
                    *cells, repr(row.report.mean_miou),
                    repr(row.report.mean_fb_iou),
                    "" if row.report.mean_fpr is None
                    else repr(row.report.mean_fpr), ""])


# ---------------------------------------------------------------------------
# latent-class visualization
# ---------------------------------------------------------------------------

def latent_visualization(model: FewShotSegmenter, episode: Episode,
                         top_n: int = 3) -> dict:
    """Decode the top-scoring latent classes as masks, plus the full
    reconstructed background.

    The episode must come from the model's training classes (the
    reconstruction machinery only exists for them).  Returns
    {"latent": [(latent_index, score, mask), ...], "background": mask};
    masks are (H, W) uint8 arrays for visual inspection only (no
    containment relation is implied).
    """
    if model.class_weights.n_latent == 0:
        raise ValueError("model was trained without latent classes")
    if top_n < 1:
        raise ValueError("top_n must be positive")
    top_n = min(top_n, model.class_weights.n_latent)
    with ad.no_grad():
        f_q = model.encoder.encode(episode.query.image, "query")
        p_q = global_average_pool(f_q).vector.data
    w_c = model.class_weights.concat().data
    n_known = model.class_weights.n_known
    scores = w_c @ p_q
    latent_scores = scores[n_known:]
    order = np.argsort(latent_scores)[::-1][:top_n]

    entries = []
    for latent_idx in order:
        row = w_c[n_known + int(latent_idx)]
        mask = model.decode_vector(row, episode)
        entries.append((int(latent_idx), float(latent_scores[latent_idx]),
                        mask))

    keep = np.ones(len(scores))
    keep[model.class_row(episode.class_id)] = 0.0
    background_vec = w_c.T @ (scores * keep)
    background = model.decode_vector(background_vec, episode)
    return {"latent": entries, "background": background}


def save_mask_png(mask: np.ndarray, path: str) -> None:
    Image.fromarray((np.asarray(mask) != 0).astype(np.uint8) * 255,
                    mode="L").save(path)


def export_latent_masks(result: dict, out_dir: str, episode_name: str) -> list[str]:
    """Write `{episode}_{latent_idx}.png` files plus the background mask."""
    os.makedirs(out_dir, exist_ok=True)
    paths = []
    for latent_idx, _, mask in result["latent"]:
        path = os.path.join(out_dir, f"{episode_name}_{latent_idx}.png")
        save_mask_png(mask, path)
        paths.append(path)
    background_path = os.path.join(out_dir, f"{episode_name}_background.png")
    save_mask_png(result["background"], background_path)
    paths.append(background_path)
    return paths
