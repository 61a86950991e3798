"""Prompt feature selection: self-attention over a category's prompt rows, then pooling.

The forward/backward pair is written out by hand (no autograd) so it can be
checked against finite differences; :class:`PFSM` wraps it as a torch
module for end-to-end training.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, fields

import torch
from torch import nn

from .errors import FixedNViolation, ShapeMismatch, StaleCache

_SQRT_HALF = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(x: torch.Tensor) -> torch.Tensor:
    return 0.5 * x * (1.0 + torch.erf(x * _SQRT_HALF))


def gelu_grad(x: torch.Tensor) -> torch.Tensor:
    cdf = 0.5 * (1.0 + torch.erf(x * _SQRT_HALF))
    return cdf + x * torch.exp(-0.5 * x * x) * _INV_SQRT_2PI


@dataclass
class PFSMParams:
    """Affine maps are stored as (in, out) weights: ``y = x @ W + b``."""

    wq: torch.Tensor
    bq: torch.Tensor
    wk: torch.Tensor
    bk: torch.Tensor
    wv: torch.Tensor
    bv: torch.Tensor
    w1: torch.Tensor  # FFN in -> hidden
    b1: torch.Tensor
    w2: torch.Tensor  # FFN hidden -> D2
    b2: torch.Tensor
    ws: torch.Tensor  # skip D -> D2
    bs: torch.Tensor
    use_value: bool = False

    @property
    def D(self) -> int:
        return self.wq.shape[0]

    @property
    def D1(self) -> int:
        return self.wq.shape[1]

    @property
    def D2(self) -> int:
        return self.ws.shape[1]

    def tensors(self) -> dict[str, torch.Tensor]:
        return {f.name: getattr(self, f.name) for f in fields(self) if f.name != "use_value"}

    @classmethod
    def init(cls, D: int, D1: int, D2: int, seed: int = 0, use_value: bool = False,
             dtype=torch.float32) -> "PFSMParams":
        """Fan-in scaled uniform init from a private generator."""
        g = torch.Generator().manual_seed(seed)
        ffn_in = D1 if use_value else D

        def lin(n_in, n_out):
            bound = 1.0 / math.sqrt(n_in)
            w = (torch.rand(n_in, n_out, generator=g, dtype=torch.float64) * 2 - 1) * bound
            b = (torch.rand(n_out, generator=g, dtype=torch.float64) * 2 - 1) * bound
            return w.to(dtype), b.to(dtype)

        wq, bq = lin(D, D1)
        wk, bk = lin(D, D1)
        wv, bv = lin(D, D1)
        w1, b1 = lin(ffn_in, 2 * D1)
        w2, b2 = lin(2 * D1, D2)
        ws, bs = lin(D, D2)
        return cls(wq, bq, wk, bk, wv, bv, w1, b1, w2, b2, ws, bs, use_value)


@dataclass
class PFSMCache:
    t: torch.Tensor
    q: torch.Tensor
    k: torch.Tensor
    v: torch.Tensor | None
    attn: torch.Tensor
    z: torch.Tensor
    h: torch.Tensor
    g: torch.Tensor
    params: PFSMParams
    versions: tuple[int, ...]


def _versions(params: PFSMParams) -> tuple[int, ...]:
    return tuple(t._version for t in params.tensors().values())


def _osum(x: torch.Tensor, dim: int) -> torch.Tensor:
    """Sum along the prompt axis in sorted order, so row permutations give bitwise-equal results."""
    return x.sort(dim=dim).values.sum(dim)


def pfsm_forward(params: PFSMParams, t: torch.Tensor):
    """Select one feature from ``t`` (..., N, D).

    Returns ``(selected (..., D2), attention (..., N, N), cache)``.
    """
    if t.ndim < 2 or t.shape[-1] != params.D:
        raise ShapeMismatch(f"expected (..., N, {params.D}) prompt features, got {tuple(t.shape)}")
    if t.shape[-2] < 1:
        raise ShapeMismatch("need at least one prompt row")
    p = params
    q = t @ p.wq + p.bq
    k = t @ p.wk + p.bk
    logits = q @ k.transpose(-1, -2) / math.sqrt(p.D1)
    e = torch.exp(logits - logits.amax(dim=-1, keepdim=True))
    attn = e / _osum(e, -1).unsqueeze(-1)
    v = t @ p.wv + p.bv if p.use_value else None
    src = v if p.use_value else t
    z = _osum(attn.unsqueeze(-1) * src.unsqueeze(-3), -2)
    h = z @ p.w1 + p.b1
    g = gelu(h)
    out = g @ p.w2 + p.b2 + t @ p.ws + p.bs
    selected = _osum(out, -2) / out.shape[-2]
    cache = PFSMCache(t, q, k, v, attn, z, h, g, p, _versions(p))
    return selected, attn, cache


def _sum_lead(x: torch.Tensor, ndim: int) -> torch.Tensor:
    """Sum leading batch dims so the result has ``ndim`` dims."""
    while x.ndim > ndim:
        x = x.sum(0)
    return x


def pfsm_backward(cache: PFSMCache, grad_selected: torch.Tensor) -> tuple[dict[str, torch.Tensor], torch.Tensor]:
    """Analytic gradients of ``<grad_selected, selected>`` w.r.t. params and input."""
    p = cache.params
    if _versions(p) != cache.versions:
        raise StaleCache("parameters changed since the forward pass")
    t, attn = cache.t, cache.attn
    n = t.shape[-2]
    mT = lambda x: x.transpose(-1, -2)  # noqa: E731

    d_out = (grad_selected / n).unsqueeze(-2).expand(*grad_selected.shape[:-1], n, grad_selected.shape[-1])
    grads = {}
    grads["ws"] = _sum_lead(mT(t) @ d_out, 2)
    grads["bs"] = _sum_lead(d_out, 1)
    dt = d_out @ p.ws.T

    grads["w2"] = _sum_lead(mT(cache.g) @ d_out, 2)
    grads["b2"] = _sum_lead(d_out, 1)
    dh = (d_out @ p.w2.T) * gelu_grad(cache.h)
    grads["w1"] = _sum_lead(mT(cache.z) @ dh, 2)
    grads["b1"] = _sum_lead(dh, 1)
    dz = dh @ p.w1.T

    x = cache.v if p.use_value else t
    d_attn = dz @ mT(x)
    dx = mT(attn) @ dz
    d_logits = attn * (d_attn - (d_attn * attn).sum(-1, keepdim=True))
    d_logits = d_logits / math.sqrt(p.D1)
    dq = d_logits @ cache.k
    dk = mT(d_logits) @ cache.q
    grads["wq"] = _sum_lead(mT(t) @ dq, 2)
    grads["bq"] = _sum_lead(dq, 1)
    grads["wk"] = _sum_lead(mT(t) @ dk, 2)
    grads["bk"] = _sum_lead(dk, 1)
    dt = dt + dq @ p.wq.T + dk @ p.wk.T
    if p.use_value:
        grads["wv"] = _sum_lead(mT(t) @ dx, 2)
        grads["bv"] = _sum_lead(dx, 1)
        dt = dt + dx @ p.wv.T
    else:
        grads["wv"] = torch.zeros_like(p.wv)
        grads["bv"] = torch.zeros_like(p.bv)
        dt = dt + dx
    return grads, dt


_PARAM_ORDER = ("wq", "bq", "wk", "bk", "wv", "bv", "w1", "b1", "w2", "b2", "ws", "bs")


class _PFSMFunction(torch.autograd.Function):
    @staticmethod
    def forward(ctx, use_value, t, *tensors):
        params = PFSMParams(*tensors, use_value=use_value)
        selected, attn, cache = pfsm_forward(params, t)
        ctx.cache = cache
        ctx.mark_non_differentiable(attn)
        return selected, attn

    @staticmethod
    def backward(ctx, grad_selected, _grad_attn):
        grads, dt = pfsm_backward(ctx.cache, grad_selected)
        return (None, dt, *[grads[k] for k in _PARAM_ORDER])


class PFSM(nn.Module):
    """Shared-parameter selector: (C, N, D) prompt features -> (C, D2)."""

    kind = "pfsm"

    def __init__(self, D: int = 64, D1: int = 64, D2: int = 64, seed: int = 0, use_value: bool = False):
        super().__init__()
        self.use_value = use_value
        init = PFSMParams.init(D, D1, D2, seed, use_value)
        for name in _PARAM_ORDER:
            self.register_parameter(name, nn.Parameter(getattr(init, name)))
        self.last_attention = None

    def params(self) -> PFSMParams:
        return PFSMParams(*[getattr(self, k) for k in _PARAM_ORDER], use_value=self.use_value)

    def forward(self, t: torch.Tensor) -> torch.Tensor:
        selected, attn = _PFSMFunction.apply(self.use_value, t, *[getattr(self, k) for k in _PARAM_ORDER])
        self.last_attention = attn
        return selected


class MeanPoolSelector(nn.Module):
    """skip(mean of rows)."""

    kind = "mean-pool"

    def __init__(self, D: int = 64, D2: int = 64):
        super().__init__()
        self.skip = nn.Linear(D, D2)

    def forward(self, t):
        return self.skip(t.mean(dim=-2))


class FCSelector(nn.Module):
    """Affine map over the flattened N x D prompt block; N is frozen at construction."""

    kind = "fc"

    def __init__(self, D: int = 64, D2: int = 64, n_prompts: int = 8):
        super().__init__()
        self.n_prompts = n_prompts
        self.fc = nn.Linear(n_prompts * D, D2)

    def forward(self, t):
        if t.shape[-2] != self.n_prompts:
            raise FixedNViolation(f"trained with N={self.n_prompts}, called with N={t.shape[-2]}")
        return self.fc(t.flatten(-2))


class CNNSelector(nn.Module):
    """1-D convolution along the prompt axis, mean over prompts, affine to D2."""

    kind = "cnn"

    def __init__(self, D: int = 64, D2: int = 64, kernel: int = 3):
        super().__init__()
        self.conv = nn.Conv1d(D, D, kernel, padding=kernel // 2)
        self.out = nn.Linear(D, D2)

    def forward(self, t):
        lead = t.shape[:-2]
        x = t.reshape(-1, *t.shape[-2:]).transpose(1, 2)  # B, D, N
        x = nn.functional.gelu(self.conv(x)).mean(dim=-1)
        return self.out(x).reshape(*lead, -1)


SELECTORS = ("pfsm", "mean-pool", "fc", "cnn")


def make_selector(kind: str, D: int = 64, D1: int = 64, D2: int = 64, n_prompts: int = 8,
                  seed: int = 0, use_value: bool = False) -> nn.Module:
    if kind == "pfsm":
        return PFSM(D, D1, D2, seed=seed, use_value=use_value)
    if kind == "mean-pool":
        return MeanPoolSelector(D, D2)
    if kind == "fc":
        return FCSelector(D, D2, n_prompts)
    if kind == "cnn":
        return CNNSelector(D, D2)
    raise ValueError(f"unknown selector kind {kind!r}; expected one of {SELECTORS}")


def baseline_select(kind: str, t: torch.Tensor, selector: nn.Module) -> torch.Tensor:
    """Run one of the non-attention selectors on ``t`` (..., N, D)."""
    if kind not in ("mean-pool", "fc", "cnn"):
        raise ValueError(f"{kind!r} is not a baseline selector")
    if getattr(selector, "kind", None) != kind:
        raise ValueError(f"selector module is {getattr(selector, 'kind', '?')!r}, asked for {kind!r}")
    return selector(t)
