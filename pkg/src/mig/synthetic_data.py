"""Deterministic shape x texture scenes with exact boxes and masks."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .prompt_library import TRAIN, Annotation, BoundingBox, Corpus, ImageSample

SHAPES = ("circle", "square", "triangle")
TEXTURES = ("striped", "dotted")
# one base colour per category, in category-id order
PALETTE = np.array([
    [220, 70, 60], [60, 170, 220], [230, 200, 50],
    [90, 200, 90], [200, 90, 210], [240, 140, 40],
    [150, 150, 255], [255, 150, 170],
], dtype=np.float64)
SPLIT_CODES = {"train": 0, "test": 1}
MIN_VISIBLE_PIXELS = 12


@dataclass(frozen=True)
class SceneSpec:
    canvas: int = 64
    n_categories: int = 6
    objects_per_image: tuple[int, int] = (1, 3)
    size_range: tuple[int, int] = (14, 28)
    occlusion_prob: float = 0.0
    distractor_rate: float = 0.3
    outlier_rate: float = 0.1
    seed: int = 0

    def __post_init__(self):
        for name in ("occlusion_prob", "distractor_rate", "outlier_rate"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")
        if not 2 <= self.n_categories <= len(SHAPES) * len(TEXTURES):
            raise ValueError(f"n_categories must be in [2, {len(SHAPES) * len(TEXTURES)}]")
        lo, hi = self.objects_per_image
        if lo < 0 or hi < lo or hi > 15:
            raise ValueError("objects_per_image must satisfy 0 <= lo <= hi <= 15")


CATEGORY_ORDER = ("striped-circle", "dotted-square", "striped-triangle",
                  "dotted-circle", "striped-square", "dotted-triangle")


def category_table(n: int) -> dict[int, str]:
    return {i + 1: CATEGORY_ORDER[i] for i in range(n)}


def shape_mask(kind: str, h: int, w: int) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w]
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    if kind == "circle":
        return ((yy - cy) / (h / 2.0)) ** 2 + ((xx - cx) / (w / 2.0)) ** 2 <= 1.0
    if kind == "square":
        return np.ones((h, w), dtype=bool)
    if kind == "triangle":
        # apex at top centre, base along the bottom row
        t = (yy + 0.5) / h
        return np.abs(xx + 0.5 - w / 2.0) <= t * w / 2.0
    raise ValueError(kind)


def texture_mask(kind: str, h: int, w: int, phase: int) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w]
    if kind == "striped":
        return ((xx + yy + phase) // 3) % 2 == 0
    if kind == "dotted":
        return ((xx + phase) % 5 < 2) & ((yy + phase) % 5 < 2)
    raise ValueError(kind)


def _background(rng: np.random.Generator, size: int) -> np.ndarray:
    level = rng.uniform(20, 60)
    img = level + rng.normal(0.0, 6.0, size=(size, size, 1)) + rng.normal(0.0, 2.0, size=(size, size, 3))
    return img


def _draw_distractor(img: np.ndarray, rng: np.random.Generator) -> None:
    size = img.shape[0]
    h, w = rng.integers(8, size // 2, size=2)
    y, x = rng.integers(0, size - h), rng.integers(0, size - w)
    m = shape_mask("circle", h, w)
    shade = rng.uniform(0.4, 0.8)
    region = img[y:y + h, x:x + w]
    region[m] = region[m] * shade + rng.uniform(0, 20)


def _render_object(rng: np.random.Generator, cat: int, names: dict[int, str], h: int, w: int,
                   outlier: bool, bg_level: float) -> tuple[np.ndarray, np.ndarray]:
    texture, shape = names[cat].split("-")
    m = shape_mask(shape, h, w)
    if outlier:
        # hard instance: no texture, faded towards the background in another category's colour
        other = int(rng.integers(1, len(names)))
        other += other >= cat
        color = bg_level + 0.7 * (PALETTE[other - 1] + rng.uniform(-20, 20, size=3) - bg_level)
        patch = np.broadcast_to(color, (h, w, 3)) + rng.normal(0.0, 10.0, size=(h, w, 3))
        return patch, m
    color = PALETTE[cat - 1] + rng.uniform(-20, 20, size=3)
    patch = np.broadcast_to(color, (h, w, 3)).copy()
    tex = texture_mask(texture, h, w, int(rng.integers(0, 6)))
    patch[tex] *= 0.5
    patch += rng.normal(0.0, 4.0, size=(h, w, 3))
    return patch, m


def _overlaps(a, b, gap=1) -> bool:
    ay, ax, ah, aw = a
    by, bx, bh, bw = b
    return not (ax + aw + gap <= bx or bx + bw + gap <= ax or ay + ah + gap <= by or by + bh + gap <= ay)


def render_image(spec: SceneSpec, rng: np.random.Generator, image_id: int, split: str,
                 outlier_rate: float | None = None) -> ImageSample:
    names = category_table(spec.n_categories)
    outlier_rate = spec.outlier_rate if outlier_rate is None else outlier_rate
    S = spec.canvas
    img = _background(rng, S)
    bg_level = float(img.mean())
    for _ in range(int(rng.binomial(2, spec.distractor_rate))):
        _draw_distractor(img, rng)

    n_obj = int(rng.integers(spec.objects_per_image[0], spec.objects_per_image[1] + 1))
    placed: list[tuple[int, int, int, int]] = []
    objects = []
    for _ in range(n_obj):
        cat = int(rng.integers(1, spec.n_categories + 1))
        outlier = bool(rng.random() < outlier_rate)
        may_overlap = bool(rng.random() < spec.occlusion_prob)
        lo, hi = spec.size_range
        for _attempt in range(30):
            h, w = (int(v) for v in rng.integers(lo, hi + 1, size=2))
            y, x = int(rng.integers(0, S - h + 1)), int(rng.integers(0, S - w + 1))
            if may_overlap or not any(_overlaps((y, x, h, w), p) for p in placed):
                break
        else:
            continue
        placed.append((y, x, h, w))
        patch, m = _render_object(rng, cat, names, h, w, outlier, bg_level)
        region = img[y:y + h, x:x + w]
        region[m] = patch[m]
        full = np.zeros((S, S), dtype=bool)
        full[y:y + h, x:x + w] = m
        objects.append((cat, outlier, full))

    anns = []
    for k, (cat, outlier, full) in enumerate(objects):
        visible = full.copy()
        for _, _, later in objects[k + 1:]:
            visible &= ~later
        if visible.sum() < max(MIN_VISIBLE_PIXELS, 0.25 * full.sum()):
            continue
        rows, cols = np.flatnonzero(visible.any(1)), np.flatnonzero(visible.any(0))
        box = BoundingBox(float(cols[0]), float(rows[0]), float(cols[-1] - cols[0] + 1),
                          float(rows[-1] - rows[0] + 1))
        anns.append(Annotation(box, cat, visible, image_id * 16 + k, outlier))
    pixels = np.clip(np.rint(img), 0, 255).astype(np.uint8)
    return ImageSample(pixels, anns, image_id, split)


def generate(spec: SceneSpec, count: int, split: str = TRAIN, id_offset: int = 0,
             outlier_rate: float | None = None) -> Corpus:
    """Render ``count`` images; image ``i`` draws from its own (seed, split, i) stream."""
    if count < 1:
        raise ValueError("count must be >= 1")
    code = SPLIT_CODES[split]
    images = [render_image(spec, np.random.default_rng([spec.seed, code, i]), id_offset + i, split, outlier_rate)
              for i in range(count)]
    return Corpus(images, category_table(spec.n_categories))


def generate_splits(spec: SceneSpec, n_train: int, n_test: int,
                    test_outlier_rate: float | None = None) -> tuple[Corpus, Corpus]:
    """Train and test corpora from disjoint rng streams and disjoint image ids."""
    train = generate(spec, n_train, "train")
    test = generate(spec, n_test, "test", id_offset=n_train, outlier_rate=test_outlier_rate)
    return train, test
