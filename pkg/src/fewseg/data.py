"""Synthetic shape-scene datasets: generation, folds, and episode sampling.

Scenes are procedurally drawn 64x64 (by default) RGB images containing one
foreground object of a requested class, a few distractor objects from other
known classes, and unlabelled texture regions (background "stuff").  Every
known class is a (shape, texture, hue) combination; masks are pixel-exact
and reproducible from the scene manifest alone.

Mask encoding: pixel value 0 is background and class ``c`` is stored as
``c + 1`` (see :func:`mask_code`), so that class identifiers can stay dense
integers starting at 0 throughout the rest of the package.
"""

from __future__ import annotations

import colorsys
import json
import math
import os
from dataclasses import dataclass, field, asdict
from typing import Iterator, Protocol, Sequence

import numpy as np
from PIL import Image

SHAPE_KINDS = ("circle", "square", "triangle", "diamond", "star",
               "cross", "ring", "hexagon", "bar", "crescent")
TEXTURE_KINDS = ("flat", "stripes", "checker", "dots", "gradient")
DISTRACTOR_FAMILIES = ("noise_wall", "stripe_mat", "checker_floor",
                       "dot_cloth", "hue_patch")

GOLDEN = 0.618033988749895


class GenerationError(RuntimeError):
    """Object placement failed after the bounded number of retries."""


class SamplingError(RuntimeError):
    """Episode sampling could not satisfy the support/query requirements."""


def mask_code(class_id: int) -> int:
    """Pixel value that encodes `class_id` in a stored mask."""
    return class_id + 1


@dataclass(frozen=True)
class ClassSpec:
    class_id: int
    shape: str
    texture: str
    hue: float


@dataclass(frozen=True)
class ClassCatalog:
    """Known classes plus the unlabelled distractor families of a dataset."""

    classes: tuple[ClassSpec, ...]
    distractor_families: tuple[str, ...] = DISTRACTOR_FAMILIES

    def __post_init__(self):
        if len(self.classes) < 2:
            raise ValueError("catalog needs at least 2 known classes")
        ids = [c.class_id for c in self.classes]
        if ids != list(range(len(ids))):
            raise ValueError("class ids must be dense integers starting at 0")

    @property
    def num_classes(self) -> int:
        return len(self.classes)

    def spec(self, class_id: int) -> ClassSpec:
        if not 0 <= class_id < self.num_classes:
            raise ValueError(f"unknown class id {class_id}")
        return self.classes[class_id]


def make_catalog(num_classes: int,
                 distractor_families: Sequence[str] = DISTRACTOR_FAMILIES
                 ) -> ClassCatalog:
    """Catalog of `num_classes` visually distinct (shape, texture, hue) classes."""
    if num_classes < 2:
        raise ValueError("need at least 2 classes")
    classes = []
    for i in range(num_classes):
        # Shapes cycle mod 4 and textures mod 5, so a (shape, texture)
        # combination is unique for up to 20 classes while every held-out
        # class recombines parts already seen in training folds.  Hues use
        # golden-ratio stepping: spread around the circle and decorrelated
        # from class ids, so a contiguous fold block never holds out a
        # whole unseen hue arc.
        classes.append(ClassSpec(
            class_id=i,
            shape=SHAPE_KINDS[i % 4],
            texture=TEXTURE_KINDS[i % len(TEXTURE_KINDS)],
            hue=(0.05 + i * GOLDEN) % 1.0,
        ))
    return ClassCatalog(tuple(classes), tuple(distractor_families))


@dataclass(frozen=True)
class PlacedObject:
    """One entry of a scene manifest; geometry fully determines the mask."""

    class_id: int | None  # None for unlabelled texture regions
    shape: str
    center_y: float
    center_x: float
    scale: float
    rotation: float


@dataclass
class ImageMaskPair:
    image: np.ndarray          # (3, H, W) float64 in [0, 1]
    mask: np.ndarray           # (H, W) uint8; 0 background, class c -> c + 1
    manifest: list[PlacedObject]
    identifier: str = ""


@dataclass(frozen=True)
class Episode:
    """One few-shot task: k support pairs and a query, binarized to a class."""

    support: tuple[ImageMaskPair, ...]
    query: ImageMaskPair
    class_id: int

    def __post_init__(self):
        if len(self.support) < 1:
            raise ValueError("episode needs at least one support pair")
        names = [p.identifier for p in self.support] + [self.query.identifier]
        if len(set(names)) != len(names):
            raise ValueError("support/query identifiers must be distinct")

    @property
    def k(self) -> int:
        return len(self.support)


@dataclass(frozen=True)
class FoldSplit:
    fold_id: int
    train_classes: tuple[int, ...]
    test_classes: tuple[int, ...]


@dataclass(frozen=True)
class SceneParams:
    """Knobs of the scene generator."""

    image_size: int = 64
    primary_scale: tuple[float, float] = (12.0, 18.0)
    distractor_scale: tuple[float, float] = (8.0, 12.0)
    max_distractors: int = 2
    unlabelled_regions: tuple[int, int] = (1, 3)
    margin: float = 2.0
    placement_retries: int = 300
    scene_retries: int = 20
    visibility_grid: int = 8  # primary object must survive pooling to this grid
    noise_amplitude: int = 5


# ---------------------------------------------------------------------------
# analytic shape membership and rasterization
# ---------------------------------------------------------------------------

def shape_membership(shape: str, ys: np.ndarray, xs: np.ndarray,
                     scale: float, rotation: float) -> np.ndarray:
    """Boolean membership of points (ys, xs) relative to the shape center.

    All shapes are defined analytically so a scene manifest can be
    re-rendered exactly by any independent implementation of the same
    geometry.
    """
    cos_r, sin_r = math.cos(-rotation), math.sin(-rotation)
    x = xs * cos_r - ys * sin_r
    y = xs * sin_r + ys * cos_r
    r = scale
    if shape == "circle":
        return x * x + y * y <= r * r
    if shape == "square":
        half = 0.8 * r
        return (np.abs(x) <= half) & (np.abs(y) <= half)
    if shape == "triangle":
        # equilateral, circumradius r, apex pointing up (negative y)
        return ((y <= 0.5 * r)
                & (y >= math.sqrt(3.0) * x - r)
                & (y >= -math.sqrt(3.0) * x - r))
    if shape == "diamond":
        return np.abs(x) + np.abs(y) <= 1.1 * r
    if shape == "star":
        rho = np.sqrt(x * x + y * y)
        phi = np.arctan2(y, x)
        sector = np.mod(phi, 2.0 * math.pi / 5.0) / (2.0 * math.pi / 5.0)
        spike = np.abs(sector * 2.0 - 1.0)  # 1 at the points, 0 between
        return rho <= r * (0.5 + 0.5 * spike)
    if shape == "cross":
        arm = r / 3.0
        return (((np.abs(x) <= arm) & (np.abs(y) <= r))
                | ((np.abs(y) <= arm) & (np.abs(x) <= r)))
    if shape == "ring":
        rho2 = x * x + y * y
        return (rho2 <= r * r) & (rho2 > (0.55 * r) ** 2)
    if shape == "hexagon":
        half = math.sqrt(3.0) / 2.0 * r
        return ((np.abs(x) <= half)
                & (np.abs(0.5 * x) + np.abs(math.sqrt(3.0) / 2.0 * y) <= half))
    if shape == "bar":
        return (np.abs(x) <= r) & (np.abs(y) <= 0.4 * r)
    if shape == "crescent":
        inside = x * x + y * y <= r * r
        bite = (x - 0.55 * r) ** 2 + y * y <= (0.75 * r) ** 2
        return inside & ~bite
    raise ValueError(f"unknown shape kind: {shape}")


def _object_region(obj: PlacedObject, size: int) -> np.ndarray:
    jj, ii = np.meshgrid(np.arange(size), np.arange(size))
    ys = ii + 0.5 - obj.center_y
    xs = jj + 0.5 - obj.center_x
    return shape_membership(obj.shape, ys, xs, obj.scale, obj.rotation)


def rasterize_manifest(manifest: Sequence[PlacedObject], size: int) -> np.ndarray:
    """Render a mask from a manifest; labelled objects paint in list order."""
    mask = np.zeros((size, size), dtype=np.uint8)
    for obj in manifest:
        if obj.class_id is None:
            continue
        mask[_object_region(obj, size)] = mask_code(obj.class_id)
    return mask


# ---------------------------------------------------------------------------
# textures
# ---------------------------------------------------------------------------

def _hsv_rgb(hue: float, sat: float, val: float) -> np.ndarray:
    return np.array(colorsys.hsv_to_rgb(hue % 1.0, sat, val)) * 255.0


def _texture_field(kind: str, size: int, color_a: np.ndarray,
                   color_b: np.ndarray, rng: np.random.Generator,
                   structure: np.random.Generator | None = None) -> np.ndarray:
    """A full-canvas (H, W, 3) float texture in [0, 255].

    Structural parameters (stripe angle/period, checker cell, dot spacing)
    come from `structure` when given, so a class can pin down its pattern
    exactly while stuff regions keep drawing fresh ones from `rng`.
    """
    structure = structure or rng
    jj, ii = np.meshgrid(np.arange(size, dtype=float),
                         np.arange(size, dtype=float))
    if kind == "flat":
        t = np.zeros((size, size))
    elif kind == "stripes":
        angle = structure.uniform(0.0, math.pi)
        period = structure.uniform(5.0, 9.0)
        wave = np.sin(2.0 * math.pi * (ii * math.sin(angle)
                                       + jj * math.cos(angle)) / period)
        t = 0.5 + 0.5 * wave
    elif kind == "checker":
        cell = structure.integers(3, 6)
        t = ((ii // cell + jj // cell) % 2).astype(float)
    elif kind == "dots":
        spacing = structure.integers(5, 8)
        radius = spacing / 3.0
        t = (((ii % spacing) - spacing / 2.0) ** 2
             + ((jj % spacing) - spacing / 2.0) ** 2
             <= radius ** 2).astype(float)
    elif kind == "gradient":
        angle = structure.uniform(0.0, 2.0 * math.pi)
        proj = ii * math.sin(angle) + jj * math.cos(angle)
        t = (proj - proj.min()) / max(proj.max() - proj.min(), 1.0)
    else:
        raise ValueError(f"unknown texture kind: {kind}")
    return color_a[None, None, :] * (1.0 - t[..., None]) + color_b[None, None, :] * t[..., None]


def _class_texture(spec: ClassSpec, size: int,
                   rng: np.random.Generator) -> np.ndarray:
    # Within-class appearance is kept tight and the pattern structure is a
    # deterministic function of the class: finding the foreground should be
    # easy, telling it from lookalike background stuff is the hard part.
    structure = np.random.default_rng(7919 * spec.class_id + 13)
    hue = spec.hue + rng.uniform(-0.012, 0.012)
    val = rng.uniform(0.82, 0.92)
    color_a = _hsv_rgb(hue, 0.85, val)
    color_b = _hsv_rgb(hue, 0.5, min(val + 0.12, 1.0))
    return _texture_field(spec.texture, size, color_a, color_b, rng,
                          structure=structure)


def _distractor_texture(family: str, size: int, rng: np.random.Generator,
                        class_hues: tuple[float, ...] = ()) -> np.ndarray:
    """Background stuff.

    Each family keeps a fixed texture kind but draws a fresh hue every
    instance, so stuff regions recur semantically (stripey mats, checkered
    floors) without a memorizable color signature.  Hues frequently land
    near the known-class hues, which makes color alone useless for telling
    stuff from objects.
    """
    def stuff_hue() -> float:
        if class_hues and rng.random() < 0.5:
            return float(rng.choice(class_hues)) + rng.uniform(-0.06, 0.06)
        return rng.uniform(0.0, 1.0)

    if family == "noise_wall":
        base = _hsv_rgb(stuff_hue(), rng.uniform(0.1, 0.4),
                        rng.uniform(0.35, 0.7))
        field_ = np.tile(base, (size, size, 1))
        field_ += rng.uniform(-14.0, 14.0, size=(size, size, 1))
        return field_
    if family == "stripe_mat":
        hue = stuff_hue()
        color_a = _hsv_rgb(hue, rng.uniform(0.5, 0.8), rng.uniform(0.5, 0.85))
        color_b = _hsv_rgb(hue + rng.uniform(-0.08, 0.08), 0.3,
                           rng.uniform(0.6, 0.9))
        return _texture_field("stripes", size, color_a, color_b, rng)
    if family == "checker_floor":
        hue = stuff_hue()
        color_a = _hsv_rgb(hue, rng.uniform(0.3, 0.6), rng.uniform(0.35, 0.6))
        color_b = _hsv_rgb(hue, rng.uniform(0.2, 0.4), rng.uniform(0.65, 0.9))
        return _texture_field("checker", size, color_a, color_b, rng)
    if family == "dot_cloth":
        hue = stuff_hue()
        color_a = _hsv_rgb(hue, rng.uniform(0.4, 0.7), rng.uniform(0.4, 0.7))
        color_b = _hsv_rgb(hue + 0.5, rng.uniform(0.3, 0.5),
                           rng.uniform(0.6, 0.9))
        return _texture_field("dots", size, color_a, color_b, rng)
    if family == "hue_patch":
        # saturated object-like blobs: the hardest false-positive bait
        hue = stuff_hue()
        color_a = _hsv_rgb(hue, 0.80, rng.uniform(0.7, 0.95))
        color_b = _hsv_rgb(hue + rng.uniform(-0.06, 0.06), 0.45, 0.9)
        kind = str(rng.choice(["flat", "stripes", "gradient"]))
        return _texture_field(kind, size, color_a, color_b, rng)
    raise ValueError(f"unknown distractor family: {family}")


# ---------------------------------------------------------------------------
# scene generation
# ---------------------------------------------------------------------------

def _place_objects(rng: np.random.Generator, scales: list[float],
                   size: int, margin: float, retries: int
                   ) -> list[tuple[float, float]] | None:
    """Non-overlapping centers for the given radii, or None on failure."""
    centers: list[tuple[float, float]] = []
    for scale in scales:
        low = margin + scale
        high = size - margin - scale
        if low >= high:
            return None
        placed = False
        for _ in range(retries):
            cy = rng.uniform(low, high)
            cx = rng.uniform(low, high)
            ok = all((cy - oy) ** 2 + (cx - ox) ** 2
                     >= (scale + other + 1.0) ** 2
                     for (oy, ox), other in zip(centers, scales))
            if ok:
                centers.append((cy, cx))
                placed = True
                break
        if not placed:
            return None
    return centers


def _unlabelled_patch(rng: np.random.Generator, size: int) -> PlacedObject:
    shape = str(rng.choice(["bar", "square", "circle"]))
    return PlacedObject(
        class_id=None,
        shape=shape,
        center_y=rng.uniform(0.0, size),
        center_x=rng.uniform(0.0, size),
        scale=rng.uniform(size / 4.5, size / 2.2),
        rotation=rng.uniform(0.0, math.pi),
    )


def generate_scene(catalog: ClassCatalog, class_id: int, rng_seed: int,
                   params: SceneParams = SceneParams()) -> ImageMaskPair:
    """Draw one scene whose foreground object belongs to `class_id`.

    The scene always contains exactly one object of `class_id`, up to
    `params.max_distractors` objects of other known classes, and at least
    one unlabelled texture region, on a textured background.  Deterministic
    for a fixed (catalog, class_id, seed, params).
    """
    catalog.spec(class_id)  # validates the id
    if params.image_size < 32:
        raise ValueError("image size must be at least 32")

    for attempt in range(params.scene_retries):
        rng = np.random.default_rng(
            np.random.SeedSequence((rng_seed, class_id, attempt)))
        pair = _generate_scene_once(catalog, class_id, rng, params)
        if pair is not None:
            return pair
    raise GenerationError(
        f"could not place objects for class {class_id} "
        f"after {params.scene_retries} attempts (seed {rng_seed})")


def _generate_scene_once(catalog: ClassCatalog, class_id: int,
                         rng: np.random.Generator, params: SceneParams
                         ) -> ImageMaskPair | None:
    size = params.image_size

    # at least one known-class distractor plus one unlabelled region per
    # scene, so both the known and the latent class rows see signal
    n_distractors = int(rng.integers(1, params.max_distractors + 1))
    others = [c for c in range(catalog.num_classes) if c != class_id]
    distractor_ids = list(rng.choice(others, size=min(n_distractors, len(others)),
                                     replace=False)) if n_distractors else []

    scales = [rng.uniform(*params.primary_scale)]
    scales += [rng.uniform(*params.distractor_scale) for _ in distractor_ids]
    centers = _place_objects(rng, scales, size, params.margin,
                             params.placement_retries)
    while centers is None and distractor_ids:
        # drop the last distractor and retry rather than fail the scene
        distractor_ids.pop()
        scales.pop()
        centers = _place_objects(rng, scales, size, params.margin,
                                 params.placement_retries)
    if centers is None:
        return None

    objects = []
    for cid, (cy, cx), scale in zip([class_id] + distractor_ids, centers, scales):
        objects.append(PlacedObject(
            class_id=int(cid),
            shape=catalog.spec(int(cid)).shape,
            center_y=cy, center_x=cx, scale=scale,
            rotation=rng.uniform(0.0, 2.0 * math.pi),
        ))

    n_patches = int(rng.integers(params.unlabelled_regions[0],
                                 params.unlabelled_regions[1] + 1))
    patches = [_unlabelled_patch(rng, size) for _ in range(max(n_patches, 1))]
    manifest = patches + objects  # patches first: mask only sees labelled objects

    mask = rasterize_manifest(manifest, size)

    # the foreground object must survive nearest-neighbour pooling
    grid = params.visibility_grid
    binary = (mask == mask_code(class_id)).astype(np.uint8)
    if not downsample_mask(binary, (grid, grid)).any():
        return None
    for cid in distractor_ids:
        if not (mask == mask_code(int(cid))).any():
            return None

    # paint: background family, unlabelled patches, then labelled objects
    calm = [f for f in catalog.distractor_families if f != "hue_patch"] \
        or list(catalog.distractor_families)
    hues = tuple(spec.hue for spec in catalog.classes)
    canvas = _distractor_texture(str(rng.choice(calm)), size, rng,
                                 class_hues=hues)
    lookalike_pool = [c for c in range(catalog.num_classes) if c != class_id]
    for patch in patches:
        region = _object_region(patch, size)
        roll = rng.random()
        if roll < 0.4:
            # unlabelled stuff wearing a known class's exact appearance
            # (think of a printed poster): the sharpest false-positive bait.
            # Never the scene's own foreground class, so episode masks stay
            # unambiguous.
            lookalike = catalog.spec(int(rng.choice(lookalike_pool)))
            canvas[region] = _class_texture(lookalike, size, rng)[region]
        else:
            if roll < 0.7 and "hue_patch" in catalog.distractor_families:
                family = "hue_patch"
            else:
                family = str(rng.choice(catalog.distractor_families))
            canvas[region] = _distractor_texture(family, size, rng,
                                                 class_hues=hues)[region]
    for obj in objects:
        region = _object_region(obj, size)
        canvas[region] = _class_texture(
            catalog.spec(obj.class_id), size, rng)[region]

    noise = rng.integers(-params.noise_amplitude, params.noise_amplitude + 1,
                         size=(size, size, 1))
    rgb = np.clip(np.rint(canvas) + noise, 0, 255).astype(np.uint8)
    image = rgb.transpose(2, 0, 1).astype(np.float64) / 255.0
    return ImageMaskPair(image=image, mask=mask, manifest=manifest)


# ---------------------------------------------------------------------------
# datasets, folds, episodes
# ---------------------------------------------------------------------------

class SegmentationPool(Protocol):
    """Adapter contract for any fold-based segmentation dataset.

    Real datasets plug in by implementing this protocol (a list of pairs
    plus per-class indices); the episode sampler and the trainers use
    nothing else.
    """

    @property
    def catalog(self) -> ClassCatalog: ...

    def class_ids(self) -> Sequence[int]: ...

    def indices_for_class(self, class_id: int) -> Sequence[int]: ...

    def pair(self, index: int) -> ImageMaskPair: ...


@dataclass
class SceneDataset:
    """In-memory synthetic dataset; satisfies :class:`SegmentationPool`."""

    catalog: ClassCatalog
    pairs: list[ImageMaskPair]
    primary_class: list[int]
    _by_class: dict[int, list[int]] = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if not self._by_class:
            for idx, cid in enumerate(self.primary_class):
                self._by_class.setdefault(cid, []).append(idx)

    def class_ids(self) -> Sequence[int]:
        return sorted(self._by_class)

    def indices_for_class(self, class_id: int) -> Sequence[int]:
        return self._by_class.get(class_id, [])

    def pair(self, index: int) -> ImageMaskPair:
        return self.pairs[index]


def build_dataset(catalog: ClassCatalog, images_per_class: int, seed: int,
                  params: SceneParams = SceneParams()) -> SceneDataset:
    """Generate `images_per_class` scenes per known class, deterministically."""
    if images_per_class < 1:
        raise ValueError("images_per_class must be positive")
    pairs: list[ImageMaskPair] = []
    primary: list[int] = []
    for class_id in range(catalog.num_classes):
        for j in range(images_per_class):
            pair = generate_scene(catalog, class_id,
                                  rng_seed=seed * 1_000_003 + class_id * 10_007 + j,
                                  params=params)
            pair.identifier = f"cls{class_id}_{j:04d}"
            pairs.append(pair)
            primary.append(class_id)
    return SceneDataset(catalog=catalog, pairs=pairs, primary_class=primary)


def make_fold_split(num_classes: int, num_folds: int) -> list[FoldSplit]:
    """Partition class ids into `num_folds` contiguous test blocks."""
    if num_folds < 1:
        raise ValueError("num_folds must be positive")
    if num_classes % num_folds != 0:
        raise ValueError(
            f"{num_classes} classes not divisible into {num_folds} folds")
    per_fold = num_classes // num_folds
    folds = []
    for f in range(num_folds):
        test = tuple(range(f * per_fold, (f + 1) * per_fold))
        train = tuple(c for c in range(num_classes) if c not in test)
        folds.append(FoldSplit(fold_id=f, train_classes=train, test_classes=test))
    return folds


def binarize_pair(pair: ImageMaskPair, class_id: int) -> ImageMaskPair:
    """Copy of `pair` whose mask is 1 where the class appears, else 0."""
    return ImageMaskPair(
        image=pair.image,
        mask=(pair.mask == mask_code(class_id)).astype(np.uint8),
        manifest=pair.manifest,
        identifier=pair.identifier,
    )


def sample_episode(pool: SegmentationPool, classes: Sequence[int], k: int,
                   rng: int | np.random.Generator) -> Episode:
    """Draw one k-shot episode from the pool, restricted to `classes`.

    The episode class is uniform over `classes`; its k + 1 images are
    sampled without replacement, so support and query are always distinct.
    """
    if k < 1:
        raise ValueError("k must be at least 1")
    if not classes:
        raise ValueError("need a non-empty class set")
    gen = np.random.default_rng(rng) if isinstance(rng, int) else rng
    class_id = int(gen.choice(sorted(classes)))
    indices = list(pool.indices_for_class(class_id))
    if len(indices) < k + 1:
        raise SamplingError(
            f"class {class_id} has {len(indices)} images, needs {k + 1}")
    chosen = gen.choice(indices, size=k + 1, replace=False)
    pairs = [binarize_pair(pool.pair(int(i)), class_id) for i in chosen]
    return Episode(support=tuple(pairs[:k]), query=pairs[k], class_id=class_id)


def episode_stream(pool: SegmentationPool, classes: Sequence[int], k: int,
                   seed: int) -> Iterator[Episode]:
    """Endless seeded stream of episodes (the training sampler)."""
    for class_id in sorted(classes):
        if len(pool.indices_for_class(class_id)) < k + 1:
            raise SamplingError(
                f"class {class_id} has fewer than {k + 1} images")
    gen = np.random.default_rng(seed)
    while True:
        yield sample_episode(pool, classes, k, gen)


def downsample_mask(mask: np.ndarray, target: tuple[int, int]) -> np.ndarray:
    """Nearest-neighbour reduction of a binary mask to `target` (h, w).

    Sample i of the output reads source index floor((i + 0.5) * in / out)
    along each axis (half-pixel centers), which keeps values binary.
    """
    h_in, w_in = mask.shape
    h_out, w_out = target
    if h_out > h_in or w_out > w_in:
        raise ValueError("target size exceeds source size")
    rows = np.minimum(((np.arange(h_out) + 0.5) * h_in / h_out).astype(int),
                      h_in - 1)
    cols = np.minimum(((np.arange(w_out) + 0.5) * w_in / w_out).astype(int),
                      w_in - 1)
    return mask[np.ix_(rows, cols)]


# ---------------------------------------------------------------------------
# disk format: PNG pairs + manifest.json + folds.json
# ---------------------------------------------------------------------------

def _manifest_entry(obj: PlacedObject) -> dict:
    entry = asdict(obj)
    return entry


def save_dataset(dataset: SceneDataset, out_dir: str,
                 folds: list[FoldSplit] | None = None) -> None:
    """Write images/masks as PNG plus a manifest.json describing everything."""
    os.makedirs(out_dir, exist_ok=True)
    records = []
    for pair, cid in zip(dataset.pairs, dataset.primary_class):
        image_name = f"{pair.identifier}.png"
        mask_name = f"{pair.identifier}_mask.png"
        rgb = np.rint(pair.image * 255.0).astype(np.uint8).transpose(1, 2, 0)
        Image.fromarray(rgb).save(os.path.join(out_dir, image_name))
        Image.fromarray(pair.mask, mode="L").save(os.path.join(out_dir, mask_name))
        records.append({
            "id": pair.identifier,
            "image": image_name,
            "mask": mask_name,
            "primary_class": cid,
            "objects": [_manifest_entry(o) for o in pair.manifest],
        })
    manifest = {
        "classes": [asdict(c) for c in dataset.catalog.classes],
        "distractor_families": list(dataset.catalog.distractor_families),
        "pairs": records,
    }
    with open(os.path.join(out_dir, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
    if folds is not None:
        save_folds(folds, os.path.join(out_dir, "folds.json"))


def load_dataset(in_dir: str) -> SceneDataset:
    with open(os.path.join(in_dir, "manifest.json")) as fh:
        manifest = json.load(fh)
    catalog = ClassCatalog(
        classes=tuple(ClassSpec(**c) for c in manifest["classes"]),
        distractor_families=tuple(manifest["distractor_families"]),
    )
    pairs, primary = [], []
    for rec in manifest["pairs"]:
        rgb = np.asarray(Image.open(os.path.join(in_dir, rec["image"])))
        mask = np.asarray(Image.open(os.path.join(in_dir, rec["mask"])))
        pairs.append(ImageMaskPair(
            image=rgb.transpose(2, 0, 1).astype(np.float64) / 255.0,
            mask=mask.astype(np.uint8),
            manifest=[PlacedObject(**o) for o in rec["objects"]],
            identifier=rec["id"],
        ))
        primary.append(int(rec["primary_class"]))
    return SceneDataset(catalog=catalog, pairs=pairs, primary_class=primary)


def save_folds(folds: list[FoldSplit], path: str) -> None:
    payload = [{"fold_id": f.fold_id,
                "train_classes": list(f.train_classes),
                "test_classes": list(f.test_classes)} for f in folds]
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=1, sort_keys=True)


def load_folds(path: str) -> list[FoldSplit]:
    with open(path) as fh:
        payload = json.load(fh)
    return [FoldSplit(fold_id=int(f["fold_id"]),
                      train_classes=tuple(f["train_classes"]),
                      test_classes=tuple(f["test_classes"])) for f in payload]
