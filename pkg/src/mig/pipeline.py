"""End-to-end workflows shared by the CLI and the ablation harness."""
from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass
from pathlib import Path

import torch

from .config import RunConfig, save_config
from .evaluation import EvalReport, compute_ap
from .prompt_library import Corpus, PromptLibrary, build_library
from .synthetic_data import SceneSpec, generate_splits
from .training import PromptBank, TrainData, TrainState, load_checkpoint, make_state, predict, save_checkpoint, train

log = logging.getLogger(__name__)

CHECKPOINT = "checkpoint.migc"
TRAIN_LOG = "train_log.jsonl"
SNAPSHOT = "resolved.cfg"


def scene_spec(cfg: RunConfig) -> SceneSpec:
    d = cfg.data
    return SceneSpec(canvas=d.canvas, n_categories=d.n_categories, objects_per_image=(d.objects_min, d.objects_max),
                     size_range=(d.size_min, d.size_max), occlusion_prob=d.occlusion_prob,
                     distractor_rate=d.distractor_rate, outlier_rate=d.outlier_rate, seed=d.seed)


def make_corpora(cfg: RunConfig) -> tuple[Corpus, Corpus]:
    d = cfg.data
    test_rate = None if d.test_outlier_rate < 0 else d.test_outlier_rate
    return generate_splits(scene_spec(cfg), d.n_train, d.n_test, test_rate)


@dataclass
class Workspace:
    """Corpora, library and cached prompt embeddings for one data config."""

    train: Corpus
    test: Corpus
    library: PromptLibrary
    bank: PromptBank
    data: TrainData

    @classmethod
    def build(cls, cfg: RunConfig) -> "Workspace":
        train_c, test_c = make_corpora(cfg)
        lib = build_library(train_c, guard=cfg.library.guard, seed=cfg.library.seed)
        return cls(train_c, test_c, lib, PromptBank(lib), TrainData.from_corpus(train_c, cfg.model.mask_stride))


def snapshot(cfg: RunConfig, out_dir: str | os.PathLike) -> Path:
    from . import __version__

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / SNAPSHOT
    save_config(cfg, path)
    with open(path, "a") as fh:
        fh.write(f"# code version {__version__}\n")
    return path


def run_training(cfg: RunConfig, out_dir: str | os.PathLike | None = None, ws: Workspace | None = None,
                 resume: str | os.PathLike | None = None) -> tuple[TrainState, Workspace]:
    """Train to ``cfg.train.iterations``; resumes from a checkpoint when given."""
    ws = ws or Workspace.build(cfg)
    if resume:
        state = load_checkpoint(resume, cfg.resolved_model(), cfg.train)
    else:
        state = make_state(cfg.resolved_model(), cfg.train)
    log_path = dump_dir = None
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        log_path, dump_dir = out / TRAIN_LOG, str(out)
        if not resume and log_path.exists():
            log_path.unlink()
    remaining = cfg.train.iterations - state.iteration
    train(state, ws.data, ws.bank, max(remaining, 0), log_path=log_path, dump_dir=dump_dir)
    if out_dir is not None:
        save_checkpoint(state, Path(out_dir) / CHECKPOINT)
    return state, ws


def run_eval(cfg: RunConfig, model, ws: Workspace, with_masks: bool = True) -> dict[str, EvalReport]:
    n = cfg.eval.n_prompts if cfg.eval.n_prompts > 0 else cfg.train.n_prompts
    preds = predict(model, ws.test, ws.bank, n, seed=cfg.eval.seed, batch_size=cfg.eval.batch_size,
                    max_dets=cfg.eval.max_dets, with_masks=with_masks)
    out = {"box": compute_ap(preds, ws.test.images, "box", cfg.eval.max_dets)}
    if with_masks:
        out["mask"] = compute_ap(preds, ws.test.images, "mask", cfg.eval.max_dets)
    return out


def write_reports(reports: dict[str, EvalReport], out_dir: str | os.PathLike) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "eval_report.json"
    path.write_text(json.dumps({k: r.to_json() for k, r in reports.items()}, indent=1))
    (out / "eval_report.txt").write_text("\n\n".join(r.table() for r in reports.values()) + "\n")
    return path


def train_and_eval(cfg: RunConfig, ws: Workspace | None = None) -> dict[str, float]:
    """One ablation cell: train from scratch, return held-out AP numbers."""
    torch.set_num_threads(1)
    state, ws = run_training(cfg, ws=ws)
    reports = run_eval(cfg, state.model, ws, with_masks=False)
    return {"box_AP50": reports["box"].AP50, "box_AP": reports["box"].AP, "final_loss": state.trace[-1]}
