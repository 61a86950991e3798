"""Set matching and the four-term detection/segmentation loss."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from scipy.optimize import linear_sum_assignment

from .boxes import box_cxcywh_to_xyxy, elementwise_giou, pairwise_giou
from .model import DetectionSet


@dataclass
class LossBreakdown:
    cls: torch.Tensor
    l1: torch.Tensor
    giou: torch.Tensor
    mask: torch.Tensor
    weights: tuple[float, float, float, float] = (1.0, 1.0, 1.0, 1.0)

    @property
    def total(self) -> torch.Tensor:
        wc, wl, wg, wm = self.weights
        if self.weights == (1.0, 1.0, 1.0, 1.0):
            return self.cls + self.l1 + self.giou + self.mask
        return wc * self.cls + wl * self.l1 + wg * self.giou + wm * self.mask

    def __add__(self, other: "LossBreakdown") -> "LossBreakdown":
        return LossBreakdown(self.cls + other.cls, self.l1 + other.l1, self.giou + other.giou,
                             self.mask + other.mask, self.weights)

    def as_dict(self) -> dict[str, float]:
        vals = {"class": self.cls, "l1": self.l1, "giou": self.giou, "mask": self.mask, "total": self.total}
        return {k: float(torch.as_tensor(v).detach()) for k, v in vals.items()}


def hungarian_match(cost: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Minimum-cost one-to-one assignment; returns (query indices, truth indices) sorted by truth."""
    cost = np.asarray(cost, dtype=np.float64)
    if cost.size == 0:
        return np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64)
    rows, cols = linear_sum_assignment(cost)
    order = np.argsort(cols)
    return rows[order].astype(np.int64), cols[order].astype(np.int64)


def matching_cost(boxes: torch.Tensor, logits: torch.Tensor, labels: torch.Tensor, tgt_boxes: torch.Tensor,
                  weights=(2.0, 5.0, 2.0)) -> torch.Tensor:
    """(M, n) cost for one image: class, L1 and (1 - GIoU) terms."""
    wc, wl, wg = weights
    prob = logits.sigmoid()[:, labels]
    l1 = torch.cdist(boxes, tgt_boxes, p=1)
    g = pairwise_giou(box_cxcywh_to_xyxy(boxes), box_cxcywh_to_xyxy(tgt_boxes))
    return -wc * prob + wl * l1 + wg * (1 - g)


@torch.no_grad()
def match(pred: DetectionSet, targets: list[dict], weights=(2.0, 5.0, 2.0)):
    out = []
    for b, t in enumerate(targets):
        if len(t["labels"]) == 0:
            out.append((np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64)))
            continue
        c = matching_cost(pred.boxes[b], pred.logits[b], t["labels"], t["boxes"], weights)
        # non-finite predictions still get matched; the loss itself then reports them
        c = torch.nan_to_num(c, nan=1e6, posinf=1e6, neginf=-1e6)
        out.append(hungarian_match(c.double().numpy()))
    return out


def _set_loss(pred: DetectionSet, targets, indices, num_boxes, loss_weights) -> LossBreakdown:
    logits = pred.logits
    onehot = torch.zeros_like(logits)
    src, tgt, mask_terms = [], [], []
    for b, (qi, ti) in enumerate(indices):
        if len(qi) == 0:
            continue
        qi_t, ti_t = torch.as_tensor(qi), torch.as_tensor(ti)
        onehot[b, qi_t, targets[b]["labels"][ti_t]] = 1.0
        src.append(pred.boxes[b, qi_t])
        tgt.append(targets[b]["boxes"][ti_t])
        if pred.masks is not None and "masks" in targets[b]:
            pm = pred.masks[b, qi_t]
            tm = targets[b]["masks"][ti_t].to(pm.dtype)
            mask_terms.append(F.binary_cross_entropy_with_logits(pm, tm, reduction="none").flatten(1).mean(1).sum())
    cls = F.binary_cross_entropy_with_logits(logits, onehot, reduction="sum") / num_boxes
    zero = logits.sum() * 0.0
    if src:
        s, t = torch.cat(src), torch.cat(tgt)
        l1 = (s - t).abs().sum() / num_boxes
        giou = (1 - elementwise_giou(box_cxcywh_to_xyxy(s), box_cxcywh_to_xyxy(t))).sum() / num_boxes
    else:
        l1 = giou = zero
    mask = torch.stack(mask_terms).sum() / num_boxes if mask_terms else zero
    return LossBreakdown(cls, l1, giou, mask, tuple(loss_weights))


def match_and_loss(pred: DetectionSet, targets: list[dict], loss_weights=(1.0, 1.0, 1.0, 1.0),
                   cost_weights=(2.0, 5.0, 2.0), aux: bool = True) -> LossBreakdown:
    """Hungarian-match each image, then sum the four loss terms.

    ``targets[b]`` holds ``labels`` (n,) prompt-column indices, ``boxes``
    (n, 4) normalized cx, cy, w, h and optionally ``masks`` (n, h, w) at the
    mask-logit resolution. Intermediate decoder outputs in ``pred.aux`` add
    their own matched class and box terms.
    """
    num_boxes = max(sum(len(t["labels"]) for t in targets), 1)
    total = _set_loss(pred, targets, match(pred, targets, cost_weights), num_boxes, loss_weights)
    if aux:
        for layer in pred.aux:
            total = total + _set_loss(layer, targets, match(layer, targets, cost_weights), num_boxes, loss_weights)
    return total
