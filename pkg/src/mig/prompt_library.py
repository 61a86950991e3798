"""Box-annotated corpora, instance cropping and the categorized prompt library."""
from __future__ import annotations

import hashlib
import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np
from PIL import Image

from .errors import EmptyCategory, EmptyCrop, OutOfBounds, SplitViolation, UnknownCategory

TRAIN = "train"


@dataclass(frozen=True)
class BoundingBox:
    """Axis-aligned box in pixels, (x, y) is the top-left corner."""

    x: float
    y: float
    w: float
    h: float

    def __post_init__(self):
        if not (self.w > 0 and self.h > 0):
            raise ValueError(f"box needs positive size, got w={self.w} h={self.h}")
        if self.x < 0 or self.y < 0:
            raise ValueError(f"box origin must be non-negative, got ({self.x}, {self.y})")

    def as_list(self) -> list[float]:
        return [float(self.x), float(self.y), float(self.w), float(self.h)]


@dataclass
class Annotation:
    box: BoundingBox
    category_id: int
    mask: np.ndarray | None = None  # bool H x W
    annotation_id: int = 0
    outlier: bool = False


@dataclass
class ImageSample:
    """One image (uint8 H x W x 3) with its instance annotations."""

    pixels: np.ndarray
    annotations: list[Annotation] = field(default_factory=list)
    image_id: int = 0
    split: str = TRAIN

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    def validate(self) -> None:
        H, W = self.height, self.width
        if self.pixels.ndim != 3 or self.pixels.shape[2] != 3:
            raise ValueError(f"expected H x W x 3 pixels, got {self.pixels.shape}")
        for ann in self.annotations:
            b = ann.box
            if b.x + b.w > W + 1e-9 or b.y + b.h > H + 1e-9:
                raise ValueError(f"annotation {ann.annotation_id} exceeds image bounds")
            if ann.mask is not None and ann.mask.shape != (H, W):
                raise ValueError(f"annotation {ann.annotation_id} mask shape {ann.mask.shape}")


@dataclass
class Corpus:
    images: list[ImageSample]
    categories: dict[int, str]

    def annotations(self) -> Iterable[tuple[ImageSample, Annotation]]:
        for img in self.images:
            for ann in img.annotations:
                yield img, ann

    def digest(self) -> str:
        h = hashlib.sha256()
        for cid in sorted(self.categories):
            h.update(f"{cid}:{self.categories[cid]};".encode())
        for img in self.images:
            h.update(f"{img.image_id}:{img.split}:".encode())
            h.update(np.ascontiguousarray(img.pixels).tobytes())
            for ann in img.annotations:
                h.update(json.dumps([ann.annotation_id, ann.category_id, ann.box.as_list(), ann.outlier]).encode())
                if ann.mask is not None:
                    h.update(np.packbits(ann.mask).tobytes())
        return h.hexdigest()


@dataclass(frozen=True)
class PromptInstance:
    pixels: np.ndarray  # uint8 h_p x w_p x 3
    category: int
    source: tuple[str, int, int]  # (split, image_id, annotation_id)
    outlier: bool = False

    @property
    def key(self) -> tuple[int, int]:
        return (self.source[1], self.source[2])


def _round_half_up(v: float) -> int:
    return int(math.floor(v + 0.5))


def crop_instance(image: ImageSample, box: BoundingBox, category: int = -1,
                  source: tuple[str, int, int] | None = None, outlier: bool = False) -> PromptInstance:
    """Cut ``image[y:y+h, x:x+w]`` out of an image.

    Coordinates are rounded half-up and clamped to the image; boxes lying
    completely outside raise :class:`OutOfBounds`, clamped crops smaller
    than one pixel raise :class:`EmptyCrop`.
    """
    H, W = image.height, image.width
    x0, y0 = _round_half_up(box.x), _round_half_up(box.y)
    x1, y1 = _round_half_up(box.x + box.w), _round_half_up(box.y + box.h)
    if x0 >= W or y0 >= H or x1 <= 0 or y1 <= 0:
        raise OutOfBounds(f"box {box.as_list()} does not intersect {W}x{H} image")
    x0, x1 = max(0, min(W, x0)), max(0, min(W, x1))
    y0, y1 = max(0, min(H, y0)), max(0, min(H, y1))
    if x1 - x0 < 1 or y1 - y0 < 1:
        raise EmptyCrop(f"box {box.as_list()} clamps to an empty region")
    if source is None:
        source = (image.split, image.image_id, -1)
    return PromptInstance(image.pixels[y0:y1, x0:x1].copy(), category, source, outlier)


class PromptLibrary:
    """Per-category prompt crops taken from a training split.

    Immutable after :func:`build_library`; ``add`` enforces the leakage guard.
    """

    def __init__(self, categories: dict[int, str], seed: int = 0, source_digest: str = "",
                 guard: bool = True):
        self.categories = dict(sorted(categories.items()))
        self.instances: dict[int, list[PromptInstance]] = {c: [] for c in self.categories}
        self.seed = seed
        self.source_digest = source_digest
        self.guard = guard

    def add(self, inst: PromptInstance) -> None:
        if inst.source[0] != TRAIN:
            if self.guard:
                raise SplitViolation(f"prompt from split {inst.source[0]!r} (image {inst.source[1]})")
            return
        if inst.category not in self.instances:
            raise UnknownCategory(inst.category)
        self.instances[inst.category].append(inst)

    def counts(self) -> dict[int, int]:
        return {c: len(v) for c, v in self.instances.items()}

    def empty_categories(self) -> list[int]:
        return [c for c, n in self.counts().items() if n == 0]

    def manifest(self) -> dict:
        return {
            "categories": {str(c): n for c, n in self.categories.items()},
            "counts": {str(c): n for c, n in self.counts().items()},
            "empty": self.empty_categories(),
            "seed": self.seed,
            "source_digest": self.source_digest,
            "instances": [
                {"category": c, "split": i.source[0], "image_id": i.source[1],
                 "annotation_id": i.source[2], "outlier": i.outlier}
                for c, insts in self.instances.items() for i in insts
            ],
        }

    def digest(self) -> str:
        h = hashlib.sha256(json.dumps(self.manifest(), sort_keys=True).encode())
        for insts in self.instances.values():
            for i in insts:
                h.update(i.pixels.tobytes())
        return h.hexdigest()

    def __len__(self) -> int:
        return sum(self.counts().values())

    def save(self, root: str | os.PathLike) -> Path:
        root = Path(root)
        root.mkdir(parents=True, exist_ok=True)
        for c, insts in self.instances.items():
            d = root / str(c)
            d.mkdir(exist_ok=True)
            for i in insts:
                Image.fromarray(i.pixels).save(d / f"{i.source[2]}.png")
        (root / "manifest.json").write_text(json.dumps(self.manifest(), indent=1))
        return root

    @classmethod
    def load(cls, root: str | os.PathLike, guard: bool = True) -> "PromptLibrary":
        root = Path(root)
        man = json.loads((root / "manifest.json").read_text())
        lib = cls({int(k): v for k, v in man["categories"].items()}, man["seed"],
                  man["source_digest"], guard=guard)
        for rec in man["instances"]:
            px = np.asarray(Image.open(root / str(rec["category"]) / f"{rec['annotation_id']}.png").convert("RGB"))
            lib.add(PromptInstance(px, rec["category"], (rec["split"], rec["image_id"], rec["annotation_id"]),
                                   rec.get("outlier", False)))
        return lib


def build_library(corpus: Corpus, guard: bool = True, seed: int = 0) -> PromptLibrary:
    """One prompt per training-split annotation, grouped by category.

    With ``guard`` on, any non-training image in ``corpus`` raises
    :class:`SplitViolation`; with it off such images are skipped.
    """
    lib = PromptLibrary(corpus.categories, seed=seed, source_digest=corpus.digest(), guard=guard)
    for img, ann in corpus.annotations():
        if img.split != TRAIN:
            if guard:
                raise SplitViolation(f"annotation {ann.annotation_id} belongs to split {img.split!r}")
            continue
        lib.add(crop_instance(img, ann.box, ann.category_id, (img.split, img.image_id, ann.annotation_id),
                              ann.outlier))
    return lib


def scan_manifest(manifest: dict) -> list[dict]:
    """Return manifest entries whose source split is not the training split."""
    return [r for r in manifest.get("instances", []) if r["split"] != TRAIN]


def sample_indices(count: int, n: int, rng: np.random.Generator) -> np.ndarray:
    if count < n:
        return rng.integers(0, count, size=n)
    return rng.choice(count, size=n, replace=False)


def sample_prompts(library: PromptLibrary, category: int, n: int = 8,
                   rng: np.random.Generator | None = None) -> list[PromptInstance]:
    """Draw ``n`` prompts of one category.

    Without replacement when the category holds at least ``n`` instances,
    uniformly with replacement otherwise.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    if category not in library.instances:
        raise UnknownCategory(category)
    pool = library.instances[category]
    if not pool:
        raise EmptyCategory(f"category {category} has no prompts")
    rng = rng if rng is not None else np.random.default_rng(library.seed)
    return [pool[i] for i in sample_indices(len(pool), n, rng)]


# --- COCO-format I/O ---------------------------------------------------------

def mask_to_rle(mask: np.ndarray) -> dict:
    """Uncompressed COCO RLE (column-major, starts with a zero run)."""
    flat = np.asarray(mask, dtype=np.uint8).flatten(order="F")
    change = np.flatnonzero(np.diff(flat)) + 1
    bounds = np.concatenate([[0], change, [flat.size]])
    counts = np.diff(bounds).tolist()
    if flat.size and flat[0] == 1:
        counts = [0] + counts
    return {"size": [int(mask.shape[0]), int(mask.shape[1])], "counts": counts}


def rle_to_mask(rle: dict) -> np.ndarray:
    h, w = rle["size"]
    counts = rle["counts"]
    if isinstance(counts, str):
        raise ValueError("compressed RLE strings are not supported")
    vals = np.zeros(h * w, dtype=bool)
    pos, on = 0, False
    for c in counts:
        if on:
            vals[pos:pos + c] = True
        pos += c
        on = not on
    return vals.reshape((h, w), order="F")


def polygons_to_mask(polys: list[list[float]], h: int, w: int) -> np.ndarray:
    from PIL import ImageDraw

    canvas = Image.new("L", (w, h), 0)
    draw = ImageDraw.Draw(canvas)
    for p in polys:
        draw.polygon([(p[i], p[i + 1]) for i in range(0, len(p), 2)], fill=1)
    return np.asarray(canvas, dtype=bool)


def write_coco(corpus: Corpus, json_path: str | os.PathLike, image_dir: str | os.PathLike) -> None:
    image_dir = Path(image_dir)
    image_dir.mkdir(parents=True, exist_ok=True)
    images, anns = [], []
    for img in corpus.images:
        fname = f"{img.image_id:06d}.png"
        Image.fromarray(img.pixels).save(image_dir / fname)
        images.append({"id": img.image_id, "file_name": fname, "height": img.height,
                       "width": img.width, "split": img.split})
        for a in img.annotations:
            rec = {"id": a.annotation_id, "image_id": img.image_id, "category_id": a.category_id,
                   "bbox": a.box.as_list(), "area": float(a.mask.sum()) if a.mask is not None else a.box.w * a.box.h,
                   "iscrowd": 0, "outlier": a.outlier}
            if a.mask is not None:
                rec["segmentation"] = mask_to_rle(a.mask)
            anns.append(rec)
    cats = [{"id": c, "name": n} for c, n in sorted(corpus.categories.items())]
    Path(json_path).write_text(json.dumps({"images": images, "annotations": anns, "categories": cats}))


def load_coco(json_path: str | os.PathLike, image_dir: str | os.PathLike,
              split: str | None = None) -> Corpus:
    """Read a COCO-format file; ``split`` overrides per-image split tags."""
    data = json.loads(Path(json_path).read_text())
    image_dir = Path(image_dir)
    by_img: dict[int, list[dict]] = {}
    for a in data.get("annotations", []):
        by_img.setdefault(a["image_id"], []).append(a)
    images = []
    for rec in data.get("images", []):
        px = np.asarray(Image.open(image_dir / rec["file_name"]).convert("RGB"))
        h, w = px.shape[:2]
        anns = []
        for a in by_img.get(rec["id"], []):
            seg = a.get("segmentation")
            if isinstance(seg, dict):
                mask = rle_to_mask(seg)
            elif isinstance(seg, list) and seg:
                mask = polygons_to_mask(seg, h, w)
            else:
                mask = None
            anns.append(Annotation(BoundingBox(*a["bbox"]), a["category_id"], mask, a["id"],
                                   bool(a.get("outlier", False))))
        images.append(ImageSample(px, anns, rec["id"], split or rec.get("split", TRAIN)))
    cats = {c["id"]: c["name"] for c in data.get("categories", [])}
    return Corpus(images, cats)
