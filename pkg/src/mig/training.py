"""Random image-prompt training loop, inference and checkpointing."""
from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import torch
import torch.nn.functional as F

from .checkpoint import load_sections, save_sections
from .config import TrainConfig
from .embedding import EmbeddingProvider, ToyEmbedder, embed_prompts
from .errors import CorruptSection, NonFiniteLoss, SplitViolation
from .evaluation import Prediction
from .perception import LossBreakdown, MIGModel, ModelConfig, match_and_loss
from .perception.model import DetectionSet
from .prompt_library import TRAIN, Corpus, PromptLibrary, sample_prompts, scan_manifest

log = logging.getLogger(__name__)

PIXEL_MEAN, PIXEL_STD = 0.5, 0.25


def to_input(pixels: np.ndarray) -> torch.Tensor:
    """uint8 (B, H, W, 3) -> normalized float (B, 3, H, W)."""
    x = torch.from_numpy(np.ascontiguousarray(pixels)).permute(0, 3, 1, 2).float() / 255.0
    return (x - PIXEL_MEAN) / PIXEL_STD


@dataclass
class TrainData:
    """Stacked images plus per-image targets in model coordinates."""

    pixels: np.ndarray  # uint8 (N, H, W, 3)
    categories: list[np.ndarray]  # category ids per image
    boxes: list[torch.Tensor]  # (n, 4) normalized cx, cy, w, h
    masks: list[torch.Tensor]  # (n, H/s, W/s) coverage fractions

    @classmethod
    def from_corpus(cls, corpus: Corpus, mask_stride: int = 4) -> "TrainData":
        pixels = np.stack([img.pixels for img in corpus.images])
        cats, boxes, masks = [], [], []
        for img in corpus.images:
            H, W = img.height, img.width
            cats.append(np.array([a.category_id for a in img.annotations], dtype=np.int64))
            b = np.array([[(a.box.x + a.box.w / 2) / W, (a.box.y + a.box.h / 2) / H, a.box.w / W, a.box.h / H]
                          for a in img.annotations], dtype=np.float32).reshape(-1, 4)
            boxes.append(torch.from_numpy(b))
            s = mask_stride
            m = np.stack([a.mask for a in img.annotations]) if img.annotations else np.zeros((0, H, W), bool)
            m = m.reshape(len(m), H // s, s, W // s, s).mean(axis=(2, 4)).astype(np.float32)
            masks.append(torch.from_numpy(m))
        return cls(pixels, cats, boxes, masks)

    def __len__(self) -> int:
        return len(self.pixels)

    def targets(self, idx, column_of: dict[int, int]) -> list[dict]:
        """Targets for images ``idx``; objects whose category is not prompted are dropped."""
        out = []
        for i in idx:
            keep = np.array([c in column_of for c in self.categories[i]], dtype=bool)
            labels = torch.tensor([column_of[c] for c in self.categories[i][keep]], dtype=torch.long)
            k = torch.from_numpy(keep)
            out.append({"labels": labels, "boxes": self.boxes[i][k], "masks": self.masks[i][k]})
        return out


class PromptBank:
    """Frozen embeddings of every library instance, computed once.

    The provider is deterministic, so caching by instance is equivalent to
    re-embedding at every resample.
    """

    def __init__(self, library: PromptLibrary, provider: EmbeddingProvider | None = None):
        bad = scan_manifest(library.manifest())
        if bad:
            raise SplitViolation(f"{len(bad)} library instances come from non-training splits")
        self.library = library
        self.provider = provider or ToyEmbedder()
        self.categories = [c for c in library.categories if library.instances[c]]
        self.rows: dict[int, dict[tuple[int, int], int]] = {}
        self.values: dict[int, torch.Tensor] = {}
        for c in self.categories:
            insts = library.instances[c]
            self.values[c] = torch.from_numpy(embed_prompts(self.provider, insts).values)
            self.rows[c] = {inst.key: r for r, inst in enumerate(insts)}

    def sample(self, n: int, rng: np.random.Generator) -> tuple[torch.Tensor, list[list[tuple[int, int]]]]:
        """(C, n, D) prompt features in category order, plus the sampled instance keys."""
        feats, keys = [], []
        for c in self.categories:
            picked = sample_prompts(self.library, c, n, rng)
            for p in picked:
                if p.source[0] != TRAIN:
                    raise SplitViolation(f"prompt {p.source} is not from the training split")
            k = [p.key for p in picked]
            feats.append(self.values[c][[self.rows[c][kk] for kk in k]])
            keys.append(k)
        return torch.stack(feats), keys


@dataclass
class TrainState:
    model: MIGModel
    optimizer: torch.optim.Optimizer
    rng: np.random.Generator
    cfg: TrainConfig
    iteration: int = 0
    prompts: torch.Tensor | None = None
    prompt_keys: list = field(default_factory=list)
    trace: list[float] = field(default_factory=list)


def make_state(model_cfg: ModelConfig, cfg: TrainConfig) -> TrainState:
    model = MIGModel(model_cfg)
    opt = torch.optim.AdamW(model.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay, foreach=False)
    return TrainState(model, opt, np.random.default_rng([cfg.seed, 7]), cfg)


def _dump_nonfinite(state: TrainState, loss: LossBreakdown, dump_dir: str | None) -> str:
    info = {"iteration": state.iteration, "loss": {k: repr(v) for k, v in loss.as_dict().items()},
            "prompt_keys": state.prompt_keys,
            "nonfinite_params": [n for n, p in state.model.named_parameters() if not torch.isfinite(p).all()]}
    if dump_dir:
        Path(dump_dir).mkdir(parents=True, exist_ok=True)
        p = Path(dump_dir) / f"nonfinite_{state.iteration}.json"
        p.write_text(json.dumps(info, indent=1))
        return str(p)
    return json.dumps(info)


def learning_rate(cfg: TrainConfig, iteration: int) -> float:
    """Constant lr, optionally dropped once at ``cfg.lr_drop_at``."""
    if cfg.lr_drop_at > 0 and iteration >= cfg.lr_drop_at:
        return cfg.lr * cfg.lr_drop_factor
    return cfg.lr


def train_step(state: TrainState, batch_idx: np.ndarray, data: TrainData, bank: PromptBank,
               dump_dir: str | None = None) -> tuple[TrainState, LossBreakdown, bool]:
    """One optimization step; returns (state, loss breakdown, prompts-resampled flag)."""
    cfg = state.cfg
    resample = state.prompts is None or state.iteration % cfg.prompt_update_every == 0
    if resample:
        state.prompts, state.prompt_keys = bank.sample(cfg.n_prompts, state.rng)
    C = len(bank.categories)
    perm = state.rng.permutation(C) if cfg.shuffle_categories else np.arange(C)
    column_of = {bank.categories[p]: j for j, p in enumerate(perm)}
    prompts = state.prompts[torch.from_numpy(perm)]
    targets = data.targets(batch_idx, column_of)
    images = to_input(data.pixels[batch_idx])

    model = state.model
    model.train()
    pred = model(images, prompts.to(images.dtype))
    loss = match_and_loss(pred, targets, cfg.loss_weights, cfg.cost_weights, aux=cfg.aux_loss)
    total = loss.total
    if not torch.isfinite(total):
        where = _dump_nonfinite(state, loss, dump_dir)
        raise NonFiniteLoss(f"non-finite loss at iteration {state.iteration}; diagnostics: {where}")
    state.optimizer.zero_grad(set_to_none=True)
    total.backward()
    if cfg.grad_clip > 0:
        torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
    for group in state.optimizer.param_groups:
        group["lr"] = learning_rate(cfg, state.iteration)
    state.optimizer.step()
    state.iteration += 1
    state.trace.append(float(total.detach()))
    return state, loss, resample


def draw_batch(state: TrainState, n_images: int) -> np.ndarray:
    return state.rng.choice(n_images, size=min(state.cfg.batch_size, n_images), replace=False)


def train(state: TrainState, data: TrainData, bank: PromptBank, iterations: int,
          log_path: str | os.PathLike | None = None, dump_dir: str | None = None,
          callback: Callable[[TrainState, dict], None] | None = None) -> TrainState:
    """Run ``iterations`` steps, appending one JSON line per step to ``log_path``."""
    fh = open(log_path, "a") if log_path else None
    try:
        for _ in range(iterations):
            idx = draw_batch(state, len(data))
            state, loss, resampled = train_step(state, idx, data, bank, dump_dir)
            rec = {"iter": state.iteration - 1, **loss.as_dict(),
                   "lr": state.optimizer.param_groups[0]["lr"], "prompt_resample": resampled}
            if fh and (state.iteration - 1) % state.cfg.log_every == 0:
                fh.write(json.dumps(rec) + "\n")
            if callback:
                callback(state, rec)
    finally:
        if fh:
            fh.close()
    return state


# --- checkpointing ----------------------------------------------------------

def _state_json(state: TrainState) -> dict:
    return {"iteration": state.iteration, "rng": state.rng.bit_generator.state,
            "prompt_keys": state.prompt_keys, "trace": state.trace}


def save_checkpoint(state: TrainState, path: str | os.PathLike) -> None:
    secs: dict[str, np.ndarray] = {}
    for name, p in state.model.named_parameters():
        prefix = "pfsm/" if name.startswith("selector.") else "model/"
        secs[prefix + name] = p.detach().numpy()
    names = {id(p): n for n, p in state.model.named_parameters()}
    for group in state.optimizer.param_groups:
        for p in group["params"]:
            st = state.optimizer.state.get(p)
            if not st:
                continue
            n = names[id(p)]
            secs[f"optim/{n}/exp_avg"] = st["exp_avg"].numpy()
            secs[f"optim/{n}/exp_avg_sq"] = st["exp_avg_sq"].numpy()
            secs[f"optim/{n}/step"] = np.asarray(st["step"].numpy(), dtype=np.float32).reshape(1)
    if state.prompts is not None:
        secs["state/prompts"] = state.prompts.numpy()
    meta = json.dumps(_state_json(state), default=int).encode()
    secs["state/json"] = np.frombuffer(meta, dtype=np.uint8)
    save_sections(secs, path)


def load_checkpoint(path: str | os.PathLike, model_cfg: ModelConfig, cfg: TrainConfig) -> TrainState:
    secs = load_sections(path)
    state = make_state(model_cfg, cfg)
    try:
        with torch.no_grad():
            for name, p in state.model.named_parameters():
                prefix = "pfsm/" if name.startswith("selector.") else "model/"
                p.copy_(torch.from_numpy(secs[prefix + name]))
        for name, p in state.model.named_parameters():
            key = f"optim/{name}/exp_avg"
            if key in secs:
                state.optimizer.state[p] = {
                    "step": torch.tensor(float(secs[f"optim/{name}/step"][0])),
                    "exp_avg": torch.from_numpy(secs[key]),
                    "exp_avg_sq": torch.from_numpy(secs[f"optim/{name}/exp_avg_sq"]),
                }
        meta = json.loads(bytes(secs["state/json"]).decode())
    except KeyError as exc:
        raise CorruptSection(f"{path}: missing section {exc}") from exc
    state.iteration = meta["iteration"]
    state.rng.bit_generator.state = meta["rng"]
    state.prompt_keys = [[tuple(k) for k in ks] for ks in meta["prompt_keys"]]
    state.trace = meta["trace"]
    if "state/prompts" in secs:
        state.prompts = torch.from_numpy(secs["state/prompts"])
    return state


# --- inference ----------------------------------------------------------------

def detections_to_predictions(det: DetectionSet, image_ids, categories: list[int], height: int, width: int,
                              max_dets: int = 100, with_masks: bool = True) -> list[Prediction]:
    probs = det.logits.sigmoid()
    B, M, C = probs.shape
    out = []
    for b in range(B):
        flat = probs[b].flatten()
        k = min(max_dets, flat.numel())
        scores, idx = torch.topk(flat, k)
        q, col = idx // C, idx % C
        cx, cy, w, h = det.boxes[b, q].double().unbind(-1)
        x0 = ((cx - w / 2) * width).clamp(0, width)
        y0 = ((cy - h / 2) * height).clamp(0, height)
        x1 = ((cx + w / 2) * width).clamp(0, width)
        y1 = ((cy + h / 2) * height).clamp(0, height)
        boxes = torch.stack([x0, y0, x1 - x0, y1 - y0], -1).numpy()
        masks = None
        if with_masks and det.masks is not None:
            up = F.interpolate(det.masks[b, q][None], size=(height, width), mode="bilinear", align_corners=False)[0]
            masks = (up > 0).numpy()
        cats = np.array([categories[c] for c in col.tolist()], dtype=np.int64)
        out.append(Prediction(int(image_ids[b]), boxes, scores.double().numpy(), cats, masks))
    return out


@torch.no_grad()
def predict(model: MIGModel, corpus: Corpus, bank: PromptBank, n_prompts: int, seed: int = 1234,
            batch_size: int = 25, max_dets: int = 100, with_masks: bool = True) -> list[Prediction]:
    """Detect every prompted category in ``corpus``; prompts are redrawn per batch."""
    model.eval()
    rng = np.random.default_rng([seed, 11])
    preds = []
    images = corpus.images
    for start in range(0, len(images), batch_size):
        chunk = images[start:start + batch_size]
        prompts, _ = bank.sample(n_prompts, rng)
        x = to_input(np.stack([img.pixels for img in chunk]))
        det = model(x, prompts)
        preds += detections_to_predictions(det, [img.image_id for img in chunk], bank.categories,
                                           chunk[0].height, chunk[0].width, max_dets, with_masks)
    return preds

