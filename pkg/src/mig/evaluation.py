"""COCO-style box/mask AP and the prompt ablation harness."""
from __future__ import annotations

import csv
import io
import json
import multiprocessing
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .prompt_library import ImageSample

IOU_THRESHOLDS = np.linspace(0.5, 0.95, 10)
RECALL_POINTS = np.linspace(0.0, 1.0, 101)


@dataclass
class Prediction:
    """Detections for one image: ``boxes`` are pixel (x, y, w, h)."""

    image_id: int
    boxes: np.ndarray
    scores: np.ndarray
    categories: np.ndarray
    masks: np.ndarray | None = None  # bool (k, H, W)


@dataclass
class EvalReport:
    task: str
    AP: float
    AP50: float
    per_category: dict[int, float] = field(default_factory=dict)
    per_category_ap50: dict[int, float] = field(default_factory=dict)
    counts: dict[str, int] = field(default_factory=dict)

    def to_json(self) -> dict:
        d = asdict(self)
        d["per_category"] = {str(k): v for k, v in self.per_category.items()}
        d["per_category_ap50"] = {str(k): v for k, v in self.per_category_ap50.items()}
        return d

    def save(self, path: str | os.PathLike) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=1))

    def table(self) -> str:
        lines = [f"{'category':>10} {'AP':>7} {'AP50':>7}"]
        for c in sorted(self.per_category):
            lines.append(f"{c:>10} {self.per_category[c]:7.4f} {self.per_category_ap50[c]:7.4f}")
        lines.append(f"{'all(' + self.task + ')':>10} {self.AP:7.4f} {self.AP50:7.4f}")
        return "\n".join(lines)


def box_iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """IoU between xywh boxes a (n, 4) and b (m, 4)."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    ix = np.minimum(a[:, None, 0] + a[:, None, 2], b[None, :, 0] + b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    iy = np.minimum(a[:, None, 1] + a[:, None, 3], b[None, :, 1] + b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    inter = np.clip(ix, 0, None) * np.clip(iy, 0, None)
    union = (a[:, 2] * a[:, 3])[:, None] + (b[:, 2] * b[:, 3])[None, :] - inter
    return np.where(union > 0, inter / np.where(union > 0, union, 1), 0.0)


def mask_iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=bool).reshape(len(a), -1).astype(np.float64)
    b = np.asarray(b, dtype=bool).reshape(len(b), -1).astype(np.float64)
    inter = a @ b.T
    union = a.sum(1)[:, None] + b.sum(1)[None, :] - inter
    return np.where(union > 0, inter / np.where(union > 0, union, 1), 0.0)


def interpolated_ap(tp: np.ndarray, n_gt: int) -> float:
    """101-point interpolated AP from a score-ordered TP indicator."""
    if n_gt == 0:
        return float("nan")
    if len(tp) == 0:
        return 0.0
    tps = np.cumsum(tp)
    fps = np.cumsum(1 - tp)
    recall = tps / n_gt
    precision = tps / (tps + fps)
    # precision envelope, right to left
    precision = np.maximum.accumulate(precision[::-1])[::-1]
    idx = np.searchsorted(recall, RECALL_POINTS, side="left")
    q = np.where(idx < len(precision), precision[np.minimum(idx, len(precision) - 1)], 0.0)
    return float(q.mean())


def greedy_match(ious: np.ndarray, thr: float) -> np.ndarray:
    """Score-ordered detections (rows) against truths (cols); returns TP flags.

    Each detection takes the free truth of highest IoU >= ``thr``; equal IoUs
    go to the later truth, as in the COCO reference evaluator.
    """
    n_det, n_gt = ious.shape
    taken = np.zeros(n_gt, dtype=bool)
    tp = np.zeros(n_det)
    t = min(thr, 1 - 1e-10)
    for d in range(n_det):
        row = np.where(taken, -1.0, ious[d])
        best = row.max(initial=-1.0)
        if best < t:
            continue
        g = n_gt - 1 - int(np.argmax(row[::-1] == best))
        taken[g] = True
        tp[d] = 1
    return tp


def compute_ap(predictions: list[Prediction], truth: list[ImageSample], task: str = "box",
               max_dets: int = 100) -> EvalReport:
    """Per-category greedy matching at IoU 0.50:0.05:0.95, 101-point AP.

    Categories without ground truth are skipped.
    """
    if task not in ("box", "mask"):
        raise ValueError(f"task must be 'box' or 'mask', got {task!r}")
    preds = {p.image_id: p for p in predictions}
    cats = sorted({a.category_id for img in truth for a in img.annotations})
    per_cat, per_cat50 = {}, {}
    n_dets = 0
    for c in cats:
        entries = []  # (score, image index, det index)
        gts = {}
        n_gt = 0
        for ii, img in enumerate(truth):
            g = [a for a in img.annotations if a.category_id == c]
            gts[ii] = g
            n_gt += len(g)
            p = preds.get(img.image_id)
            if p is None:
                continue
            keep = np.argsort(-p.scores, kind="mergesort")[:max_dets]
            for k in keep:
                if p.categories[k] == c:
                    entries.append((-float(p.scores[k]), ii, int(k)))
        entries.sort(key=lambda e: e[0])  # stable: ties keep image/det order
        n_dets += len(entries)
        # per image: score-ordered detection rows against that image's truths
        rows_by_img: dict[int, list[int]] = {}
        for j, (_, ii, _) in enumerate(entries):
            rows_by_img.setdefault(ii, []).append(j)
        ious_by_img = {}
        for ii, rows in rows_by_img.items():
            g = gts[ii]
            p = preds[truth[ii].image_id]
            ks = [entries[j][2] for j in rows]
            if not g:
                ious_by_img[ii] = np.zeros((len(rows), 0))
            elif task == "box":
                ious_by_img[ii] = box_iou_matrix(p.boxes[ks], np.array([a.box.as_list() for a in g]))
            else:
                ious_by_img[ii] = mask_iou_matrix(p.masks[ks], np.stack([a.mask for a in g]))
        aps = []
        for thr in IOU_THRESHOLDS:
            tp = np.zeros(len(entries))
            for ii, rows in rows_by_img.items():
                tp[rows] = greedy_match(ious_by_img[ii], thr)
            aps.append(interpolated_ap(tp, n_gt))
        per_cat[c] = float(np.mean(aps))
        per_cat50[c] = float(aps[0])
    AP = float(np.mean(list(per_cat.values()))) if per_cat else 0.0
    AP50 = float(np.mean(list(per_cat50.values()))) if per_cat50 else 0.0
    counts = {"images": len(truth), "truths": sum(len(i.annotations) for i in truth), "detections": n_dets,
              "categories": len(cats)}
    return EvalReport(task, AP, AP50, per_cat, per_cat50, counts)


# --- ablations ----------------------------------------------------------------

ABLATIONS = {
    "selector": ("train.selector", "selector_grid", "Prompt feature selection"),
    "frequency": ("train.prompt_update_every", "frequency_grid", "Prompt update interval K"),
    "quantity": ("train.n_prompts", "quantity_grid", "Prompts per category N"),
}


@dataclass
class AblationTable:
    kind: str
    key: str
    rows: list[dict] = field(default_factory=list)  # {"value", "seeds": {seed: metrics}, "median_AP50", ...}

    def median(self, value) -> float:
        for r in self.rows:
            if r["value"] == value:
                return r["median_AP50"]
        raise KeyError(value)

    def to_json(self) -> dict:
        return {"kind": self.kind, "key": self.key, "rows": self.rows}

    def text(self) -> str:
        seeds = sorted({int(s) for r in self.rows for s in r["seeds"]})
        head = f"{ABLATIONS[self.kind][2]:<28}" + "".join(f"{'seed ' + str(s):>10}" for s in seeds)
        lines = [head + f"{'AP50 med':>10}{'AP med':>10}"]
        for r in self.rows:
            cells = "".join(f"{100 * r['seeds'][str(s)]['box_AP50']:10.2f}" for s in seeds)
            lines.append(f"{str(r['value']):<28}{cells}{100 * r['median_AP50']:10.2f}{100 * r['median_AP']:10.2f}")
        return "\n".join(lines)

    def csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow([self.key, "seed", "box_AP50", "box_AP", "final_loss"])
        for r in self.rows:
            for s, m in sorted(r["seeds"].items(), key=lambda kv: int(kv[0])):
                w.writerow([r["value"], s, f"{m['box_AP50']:.6f}", f"{m['box_AP']:.6f}", f"{m['final_loss']:.6f}"])
        for r in self.rows:
            w.writerow([r["value"], "median", f"{r['median_AP50']:.6f}", f"{r['median_AP']:.6f}", ""])
        return buf.getvalue()

    def save(self, out_dir: str | os.PathLike) -> dict[str, Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        paths = {"json": out / f"ablation_{self.kind}.json", "txt": out / f"ablation_{self.kind}.txt",
                 "csv": out / f"ablation_{self.kind}.csv"}
        paths["json"].write_text(json.dumps(self.to_json(), indent=1))
        paths["txt"].write_text(self.text() + "\n")
        paths["csv"].write_text(self.csv())
        return paths


def worker_limit(configured: int) -> int:
    """Configured worker count, capped by ``MIG_WORKERS`` when set."""
    n = max(1, configured)
    env = os.environ.get("MIG_WORKERS")
    if env:
        n = min(n, max(1, int(env)))
    return n


def _run_cell(args):
    from .config import apply_overrides
    from .pipeline import train_and_eval

    cfg, overrides = args
    return train_and_eval(apply_overrides(cfg, overrides))


def run_ablation(kind: str, cfg, grid=None, seeds=None, workers: int | None = None,
                 progress=None, cache: dict | None = None) -> AblationTable:
    """Train one model per (grid value, seed) and tabulate median held-out box AP50.

    ``cache`` maps a resolved cell config to its result; cells already present
    (e.g. the default setting shared by several ablations) are not retrained.
    """
    if kind not in ABLATIONS:
        raise ValueError(f"unknown ablation {kind!r}; choose from {sorted(ABLATIONS)}")
    key, grid_field, _ = ABLATIONS[kind]
    grid = tuple(grid if grid is not None else getattr(cfg.ablation, grid_field))
    seeds = tuple(seeds if seeds is not None else cfg.ablation.seeds)
    if kind == "selector":
        from .pfsm import SELECTORS

        bad = [g for g in grid if g not in SELECTORS]
        if bad:
            raise ValueError(f"unknown selectors {bad}")
    elif any(int(g) < 1 for g in grid):
        raise ValueError(f"{key} values must be >= 1")
    from .config import apply_overrides, dump_config

    jobs = [(g, s) for g in grid for s in seeds]
    cells = [apply_overrides(cfg, {key: str(g), "train.seed": str(s)}) for g, s in jobs]
    cache = {} if cache is None else cache
    keys = [dump_config(c) for c in cells]
    todo: list[int] = []
    for i, k in enumerate(keys):
        if k not in cache and all(keys[j] != k for j in todo):
            todo.append(i)

    def record(i, r):
        cache[keys[i]] = r
        if progress:
            progress(kind, *jobs[i], r)

    workers = worker_limit(workers if workers is not None else cfg.ablation.workers)
    if workers == 1 or len(todo) <= 1:
        from .pipeline import Workspace, train_and_eval

        ws = Workspace.build(cfg) if todo else None
        for i in todo:
            record(i, train_and_eval(cells[i], ws))
    else:
        ctx = multiprocessing.get_context("spawn")
        with ProcessPoolExecutor(workers, mp_context=ctx) as pool:
            for i, r in zip(todo, pool.map(_run_cell, [(cells[i], {}) for i in todo])):
                record(i, r)
    results = [cache[k] for k in keys]
    table = AblationTable(kind, key)
    for g in grid:
        cell = {str(s): r for (gg, s), r in zip(jobs, results) if gg == g}
        table.rows.append({
            "value": g,
            "seeds": cell,
            "median_AP50": float(np.median([m["box_AP50"] for m in cell.values()])),
            "median_AP": float(np.median([m["box_AP"] for m in cell.values()])),
        })
    return table
