"""Bilinear sampling and the multi-scale deformable attention primitive."""
from __future__ import annotations

import torch
import torch.nn.functional as F

from ..errors import WeightNotNormalized


def _grid_sample(value: torch.Tensor, loc: torch.Tensor) -> torch.Tensor:
    """value (B, C, H, W), loc (B, Q, P, 2) in [0, 1] -> (B, C, Q, P)."""
    return F.grid_sample(value, loc * 2 - 1, mode="bilinear", padding_mode="zeros", align_corners=False)


def bilinear_sample(value: torch.Tensor, loc: torch.Tensor) -> torch.Tensor:
    """Sample ``value`` (B, H, W, C) at normalized (x, y) locations ``loc`` (B, K, 2).

    Pixel (i, j) has its centre at ((j + 0.5) / W, (i + 0.5) / H); taps that
    fall outside the map contribute zero.
    """
    out = _grid_sample(value.permute(0, 3, 1, 2), loc.unsqueeze(2))  # B, C, K, 1
    return out.squeeze(-1).transpose(1, 2)


def deform_attend(value_maps: list[torch.Tensor], reference_points: torch.Tensor, offsets: torch.Tensor,
                  weights: torch.Tensor, check: bool = True, tol: float = 1e-4,
                  channels_last: bool = True) -> torch.Tensor:
    """Weighted sum of bilinear samples at ``reference + offset`` on every level.

    value_maps: L tensors (B, H_l, W_l, C) (or (B, C, H_l, W_l) with
    ``channels_last=False``); reference_points (B, Q, 2) in [0, 1]; offsets
    (B, Q, L, P, 2) in normalized units; weights (B, Q, L, P), summing to one
    over (L, P) for every query. Returns (B, Q, C).
    """
    B, Q, L, P, _ = offsets.shape
    if len(value_maps) != L:
        raise ValueError(f"{len(value_maps)} value maps for {L} offset levels")
    if check:
        s = weights.detach().sum(dim=(-1, -2))
        if not torch.allclose(s, torch.ones_like(s), atol=tol, rtol=0):
            raise WeightNotNormalized(f"attention weights sum to {s.min().item():.6g}..{s.max().item():.6g}")
    loc = reference_points[:, :, None, None, :] + offsets
    out = 0
    for lvl, vmap in enumerate(value_maps):
        if channels_last:
            vmap = vmap.permute(0, 3, 1, 2)
        samp = _grid_sample(vmap, loc[:, :, lvl])  # B, C, Q, P
        out = out + (samp * weights[:, None, :, lvl]).sum(-1)
    return out.transpose(1, 2)
