"""Multi-scale encoder, prompt fusion, query decoder and prediction heads."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
import torch.nn.functional as F
from torch import nn

from ..errors import ShapeMismatch
from ..pfsm import make_selector
from .deform import deform_attend


@dataclass
class ModelConfig:
    prompt_dim: int = 64  # D, width of the frozen prompt embeddings
    d_model: int = 64  # D2
    pfsm_dim: int = 64  # D1
    n_heads: int = 4
    n_points: int = 4
    strides: tuple[int, ...] = (8, 16, 32)
    enc_layers: int = 3
    dec_layers: int = 3
    num_queries: int = 100
    ffn_dim: int = 128
    mask_stride: int = 4
    tau_init: float = 0.07
    selector: str = "pfsm"
    n_prompts: int = 8
    pfsm_use_value: bool = False
    seed: int = 0


@dataclass
class MultiScaleFeatures:
    levels: list[torch.Tensor]  # each (B, D2, H_l, W_l)
    strides: tuple[int, ...]
    pixel: torch.Tensor | None = None  # stride-4 backbone features for the mask head

    def __post_init__(self):
        if len(self.levels) < 2 or len(self.levels) != len(self.strides):
            raise ShapeMismatch("need >= 2 levels with one stride each")
        if any(b <= a for a, b in zip(self.strides, self.strides[1:])):
            raise ShapeMismatch(f"strides must increase strictly: {self.strides}")
        if len({lv.shape[1] for lv in self.levels}) != 1:
            raise ShapeMismatch("levels must share a channel count")

    @property
    def shapes(self) -> list[tuple[int, int]]:
        return [tuple(lv.shape[-2:]) for lv in self.levels]

    def flatten(self) -> torch.Tensor:
        return torch.cat([lv.flatten(2).transpose(1, 2) for lv in self.levels], dim=1)

    def with_tokens(self, tokens: torch.Tensor) -> "MultiScaleFeatures":
        out, start = [], 0
        B, _, C = tokens.shape
        for h, w in self.shapes:
            out.append(tokens[:, start:start + h * w].transpose(1, 2).reshape(B, C, h, w))
            start += h * w
        return MultiScaleFeatures(out, self.strides, self.pixel)


@dataclass
class DetectionSet:
    boxes: torch.Tensor  # (B, M, 4) normalized cx, cy, w, h
    logits: torch.Tensor  # (B, M, C) alignment logits
    masks: torch.Tensor | None = None  # (B, M, H/4, W/4) mask logits
    aux: list["DetectionSet"] = field(default_factory=list)

    def __len__(self) -> int:
        return self.boxes.shape[1]


def inverse_sigmoid(x: torch.Tensor, eps: float = 1e-5) -> torch.Tensor:
    x = x.clamp(eps, 1 - eps)
    return torch.log(x / (1 - x))


def sine_position(h: int, w: int, dim: int, dtype=torch.float32) -> torch.Tensor:
    """(h*w, dim) sine/cosine encoding of normalized pixel-centre coordinates."""
    ys = (torch.arange(h, dtype=torch.float64) + 0.5) / h
    xs = (torch.arange(w, dtype=torch.float64) + 0.5) / w
    yy, xx = torch.meshgrid(ys, xs, indexing="ij")
    return _sine(torch.stack([xx.flatten(), yy.flatten()], -1), dim).to(dtype)


def _sine(coords: torch.Tensor, dim: int) -> torch.Tensor:
    quarter = dim // 4
    freq = 2 * math.pi * (10.0 ** (torch.arange(quarter, dtype=coords.dtype) / max(quarter - 1, 1)))
    parts = []
    for k in range(coords.shape[-1]):
        a = coords[..., k:k + 1] * freq
        parts += [a.sin(), a.cos()]
    return torch.cat(parts, -1)


def reference_grid(shapes: list[tuple[int, int]], dtype=torch.float32) -> torch.Tensor:
    refs = []
    for h, w in shapes:
        ys = (torch.arange(h, dtype=dtype) + 0.5) / h
        xs = (torch.arange(w, dtype=dtype) + 0.5) / w
        yy, xx = torch.meshgrid(ys, xs, indexing="ij")
        refs.append(torch.stack([xx.flatten(), yy.flatten()], -1))
    return torch.cat(refs, 0)


def conv(cin, cout, stride=1, k=3):
    return nn.Conv2d(cin, cout, k, stride, padding=k // 2, padding_mode="replicate")


class Backbone(nn.Module):
    """Small strided conv net with per-level projections to ``d`` channels."""

    def __init__(self, d: int, strides=(8, 16, 32)):
        super().__init__()
        self.strides = tuple(strides)
        self.stem = nn.Sequential(conv(3, 32, 2), nn.GELU(), conv(32, 32, 2), nn.GELU())  # /4
        stages, cin = [], 32
        s = 4
        for stride in self.strides:
            blocks = []
            while s < stride:
                blocks += [conv(cin, 64, 2), nn.GELU()]
                cin, s = 64, s * 2
            blocks += [conv(cin, 64, 1), nn.GELU()]
            cin = 64
            stages.append(nn.Sequential(*blocks))
        self.stages = nn.ModuleList(stages)
        self.proj = nn.ModuleList([nn.Sequential(nn.Conv2d(64, d, 1), nn.GroupNorm(8, d)) for _ in self.strides])

    def forward(self, x):
        c4 = self.stem(x)
        feats, y = [], c4
        for stage, proj in zip(self.stages, self.proj):
            y = stage(y)
            feats.append(proj(y))
        return feats, c4


class MultiHeadAttention(nn.Module):
    def __init__(self, d: int, n_heads: int):
        super().__init__()
        self.h = n_heads
        self.q = nn.Linear(d, d)
        self.k = nn.Linear(d, d)
        self.v = nn.Linear(d, d)
        self.out = nn.Linear(d, d)

    def forward(self, q, k, v):
        B, Lq, d = q.shape
        Lk = k.shape[1]
        dh = d // self.h
        qh = self.q(q).view(B, Lq, self.h, dh).transpose(1, 2)
        kh = self.k(k).view(B, Lk, self.h, dh).transpose(1, 2)
        vh = self.v(v).view(B, Lk, self.h, dh).transpose(1, 2)
        attn = torch.softmax(qh @ kh.transpose(-1, -2) / math.sqrt(dh), dim=-1)
        out = (attn @ vh).transpose(1, 2).reshape(B, Lq, d)
        return self.out(out), attn


class MSDeformAttn(nn.Module):
    """Multi-head deformable attention over multi-scale value tokens."""

    def __init__(self, d: int, n_levels: int, n_heads: int, n_points: int):
        super().__init__()
        self.h, self.L, self.P = n_heads, n_levels, n_points
        self.offsets = nn.Linear(d, n_heads * n_levels * n_points * 2)
        self.weights = nn.Linear(d, n_heads * n_levels * n_points)
        self.value = nn.Linear(d, d)
        self.out = nn.Linear(d, d)
        nn.init.zeros_(self.offsets.weight)
        theta = torch.arange(n_heads, dtype=torch.float64) * (2 * math.pi / n_heads)
        grid = torch.stack([theta.cos(), theta.sin()], -1)
        grid = grid / grid.abs().max(-1, keepdim=True)[0]
        grid = grid.view(n_heads, 1, 1, 2).repeat(1, n_levels, n_points, 1)
        grid = grid * torch.arange(1, n_points + 1, dtype=torch.float64).view(1, 1, -1, 1)
        with torch.no_grad():
            self.offsets.bias.copy_(grid.flatten().float() * 0.5)
        nn.init.zeros_(self.weights.weight)
        nn.init.zeros_(self.weights.bias)

    def forward(self, query, ref, tokens, shapes):
        """query (B, Q, d), ref (B, Q, 2), tokens (B, S, d) -> (B, Q, d)."""
        B, Q, d = query.shape
        h, L, P = self.h, self.L, self.P
        dh = d // h
        v = self.value(tokens).view(B, -1, h, dh)
        maps, start = [], 0
        for hh, ww in shapes:
            lv = v[:, start:start + hh * ww].permute(0, 2, 3, 1).reshape(B * h, dh, hh, ww)
            maps.append(lv)
            start += hh * ww
        scale = torch.tensor([[w_, h_] for h_, w_ in shapes], dtype=query.dtype)
        off = self.offsets(query).view(B, Q, h, L, P, 2) / scale[None, None, None, :, None, :]
        w = torch.softmax(self.weights(query).view(B, Q, h, L * P), -1).view(B, Q, h, L, P)
        off = off.permute(0, 2, 1, 3, 4, 5).reshape(B * h, Q, L, P, 2)
        w = w.permute(0, 2, 1, 3, 4).reshape(B * h, Q, L, P)
        r = ref.unsqueeze(1).expand(B, h, Q, 2).reshape(B * h, Q, 2)
        out = deform_attend(maps, r, off, w, check=False, channels_last=False)
        return self.out(out.view(B, h, Q, dh).transpose(1, 2).reshape(B, Q, d))


class FFN(nn.Module):
    def __init__(self, d, hidden):
        super().__init__()
        self.fc1 = nn.Linear(d, hidden)
        self.fc2 = nn.Linear(hidden, d)

    def forward(self, x):
        return self.fc2(F.gelu(self.fc1(x)))


class FusionLayer(nn.Module):
    """Deformable self-attention, cross-attention to prompt rows, FFN; post-norm residuals."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        d = cfg.d_model
        self.self_attn = MSDeformAttn(d, len(cfg.strides), cfg.n_heads, cfg.n_points)
        self.cross = MultiHeadAttention(d, cfg.n_heads)
        self.ffn = FFN(d, cfg.ffn_dim)
        self.n1, self.n2, self.n3 = nn.LayerNorm(d), nn.LayerNorm(d), nn.LayerNorm(d)
        self.last_cross_weights = None

    def forward(self, x, pos, ref, shapes, prompts):
        x = self.n1(x + self.self_attn(x + pos, ref, x, shapes))
        if prompts is None:
            delta = torch.zeros_like(x)
            self.last_cross_weights = None
        else:
            delta, self.last_cross_weights = self.cross(x + pos, prompts, prompts)
        x = self.n2(x + delta)
        return self.n3(x + self.ffn(x))


class DecoderLayer(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        d = cfg.d_model
        self.self_attn = MultiHeadAttention(d, cfg.n_heads)
        self.cross = MSDeformAttn(d, len(cfg.strides), cfg.n_heads, cfg.n_points)
        self.ffn = FFN(d, cfg.ffn_dim)
        self.n1, self.n2, self.n3 = nn.LayerNorm(d), nn.LayerNorm(d), nn.LayerNorm(d)

    def forward(self, q, qpos, ref, memory, shapes):
        x = q + qpos
        q = self.n1(q + self.self_attn(x, x, q)[0])
        q = self.n2(q + self.cross(q + qpos, ref, memory, shapes))
        return self.n3(q + self.ffn(q))


class MLP(nn.Module):
    def __init__(self, d_in, d_hidden, d_out, n_layers=3):
        super().__init__()
        dims = [d_in] + [d_hidden] * (n_layers - 1) + [d_out]
        self.layers = nn.ModuleList(nn.Linear(a, b) for a, b in zip(dims, dims[1:]))

    def forward(self, x):
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = F.gelu(x)
        return x


def align(objects: torch.Tensor, prompts: torch.Tensor, logit_scale: torch.Tensor | float) -> torch.Tensor:
    """Cosine similarity between object rows and prompt rows, times 1/tau.

    objects (..., M, D2); prompts (C, D2) or (..., C, D2) -> (..., M, C).
    """
    if objects.shape[-1] != prompts.shape[-1]:
        raise ShapeMismatch(f"object width {objects.shape[-1]} != prompt width {prompts.shape[-1]}")
    o = F.normalize(objects, dim=-1)
    p = F.normalize(prompts, dim=-1)
    return (o @ p.transpose(-1, -2)) * logit_scale


class MIGModel(nn.Module):
    def __init__(self, cfg: ModelConfig | None = None):
        super().__init__()
        cfg = cfg or ModelConfig()
        self.cfg = cfg
        # stop gradients through the refined boxes passed between decoder layers
        self.detach_reference = True
        with torch.random.fork_rng():
            torch.manual_seed(cfg.seed)
            self._build(cfg)

    def _build(self, cfg: ModelConfig):
        d = cfg.d_model
        self.selector = make_selector(cfg.selector, cfg.prompt_dim, cfg.pfsm_dim, d, cfg.n_prompts,
                                      seed=cfg.seed, use_value=cfg.pfsm_use_value)
        self.backbone = Backbone(d, cfg.strides)
        self.level_embed = nn.Parameter(torch.randn(len(cfg.strides), d) * 0.1)
        self.encoder = nn.ModuleList(FusionLayer(cfg) for _ in range(cfg.enc_layers))
        self.query_embed = nn.Parameter(torch.randn(cfg.num_queries, d) * 0.1)
        self.query_pos = nn.Parameter(torch.randn(cfg.num_queries, d) * 0.1)
        ref = torch.rand(cfg.num_queries, 4) * 0.8 + 0.1
        ref[:, 2:] = 0.3
        self.ref_init = nn.Parameter(inverse_sigmoid(ref))
        self.decoder = nn.ModuleList(DecoderLayer(cfg) for _ in range(cfg.dec_layers))
        self.box_heads = nn.ModuleList(MLP(d, d, 4) for _ in range(cfg.dec_layers))
        for head in self.box_heads:
            nn.init.zeros_(head.layers[-1].weight)
            nn.init.zeros_(head.layers[-1].bias)
        self.mask_embed = MLP(d, d, d)
        self.pixel_in = nn.Conv2d(32, d, 1)
        self.pixel_mix = nn.Sequential(conv(d, d), nn.GELU(), nn.Conv2d(d, d, 1))
        # both sides of the mask dot product see position: pixels their own, queries their predicted box
        self.pixel_pos = nn.Linear(d, d)
        self.mask_box = nn.Linear(d, d)
        self.logit_scale = nn.Parameter(torch.tensor(math.log(1.0 / cfg.tau_init)))

    # -- operations -----------------------------------------------------
    def select_prompts(self, prompt_features: torch.Tensor) -> torch.Tensor:
        """(C, N, D) frozen prompt embeddings -> (C, D2) selected features."""
        return self.selector(prompt_features)

    def encode_image(self, images: torch.Tensor) -> MultiScaleFeatures:
        s = max(self.cfg.strides)
        H, W = images.shape[-2:]
        if H % s or W % s:
            images = F.pad(images, (0, (-W) % s, 0, (-H) % s))
        levels, c4 = self.backbone(images)
        return MultiScaleFeatures(levels, self.cfg.strides, c4)

    def _positions(self, feats: MultiScaleFeatures, dtype):
        d = self.cfg.d_model
        pos = [sine_position(h, w, d, dtype) + self.level_embed[i] for i, (h, w) in enumerate(feats.shapes)]
        return torch.cat(pos, 0), reference_grid(feats.shapes, dtype)

    def fuse(self, feats: MultiScaleFeatures, prompts: torch.Tensor | None) -> MultiScaleFeatures:
        """Encoder layers over image tokens; ``prompts`` (C, D2) or None for the prompt-free path."""
        if prompts is not None:
            if prompts.ndim != 2 or prompts.shape[1] != self.cfg.d_model or prompts.shape[0] < 1:
                raise ShapeMismatch(f"prompts must be (C>=1, {self.cfg.d_model}), got {tuple(prompts.shape)}")
        x = feats.flatten()
        B = x.shape[0]
        pos, ref = self._positions(feats, x.dtype)
        ref = ref.unsqueeze(0).expand(B, -1, -1)
        p = None if prompts is None else prompts.unsqueeze(0).expand(B, -1, -1)
        for layer in self.encoder:
            x = layer(x, pos, ref, feats.shapes, p)
        return feats.with_tokens(x)

    def decode(self, fused: MultiScaleFeatures, prompts: torch.Tensor, M: int | None = None):
        """Decoder queries -> (object embeddings (B, M, D2), DetectionSet)."""
        M = M or self.cfg.num_queries
        d = self.cfg.d_model
        if M > self.cfg.num_queries:
            raise ValueError(f"model has {self.cfg.num_queries} queries, asked for {M}")
        memory = fused.flatten()
        B = memory.shape[0]
        q = self.query_embed[:M].unsqueeze(0).expand(B, -1, -1)
        qpos = self.query_pos[:M].unsqueeze(0).expand(B, -1, -1)
        ref = torch.sigmoid(self.ref_init[:M]).unsqueeze(0).expand(B, -1, -1)
        pixel = self.pixel_embedding(fused)
        outs = []
        for layer, head in zip(self.decoder, self.box_heads):
            q = layer(q, qpos, ref[..., :2], memory, fused.shapes)
            boxes = torch.sigmoid(head(q) + inverse_sigmoid(ref))
            outs.append(DetectionSet(boxes, align(q, prompts, self.logit_scale.exp().clamp(max=100.0))))
            ref = boxes.detach() if self.detach_reference else boxes
        final = outs[-1]
        box_code = self.mask_box(_sine(ref.detach() if self.detach_reference else ref, d // 2))
        final.masks = torch.einsum("bmd,bdhw->bmhw", self.mask_embed(q + box_code), pixel)
        final.aux = outs[:-1]
        return q, final

    def pixel_embedding(self, fused: MultiScaleFeatures) -> torch.Tensor:
        c4 = fused.pixel
        h, w = c4.shape[-2:]
        up = F.interpolate(fused.levels[0], size=(h, w), mode="bilinear", align_corners=False)
        pos = self.pixel_pos(sine_position(h, w, self.cfg.d_model, c4.dtype)).T.reshape(1, -1, h, w)
        return self.pixel_mix(self.pixel_in(c4) + up + pos)

    def forward(self, images: torch.Tensor, prompt_features: torch.Tensor) -> DetectionSet:
        prompts = self.select_prompts(prompt_features)
        fused = self.fuse(self.encode_image(images), prompts)
        return self.decode(fused, prompts)[1]
