import numpy as np
import pytest
import torch

from mig.errors import FixedNViolation, ShapeMismatch, StaleCache
from mig.pfsm import (PFSM, CNNSelector, FCSelector, MeanPoolSelector, PFSMParams, baseline_select, gelu,
                      make_selector, pfsm_backward, pfsm_forward)
from oracles import central_differences, pfsm_batched_numpy, pfsm_scalar


def _params(D=4, D1=5, D2=3, seed=0, use_value=False):
    return PFSMParams.init(D, D1, D2, seed=seed, use_value=use_value, dtype=torch.float64)


def _np(p):
    return {k: v.numpy().copy() for k, v in p.tensors().items()}


def test_single_prompt():
    p = _params()
    t = torch.randn(1, 4, dtype=torch.float64, generator=torch.Generator().manual_seed(1))
    sel, attn, _ = pfsm_forward(p, t)
    assert torch.equal(attn, torch.ones(1, 1, dtype=torch.float64))
    expect = gelu(t[0] @ p.w1 + p.b1) @ p.w2 + p.b2 + t[0] @ p.ws + p.bs
    assert torch.allclose(sel, expect, atol=1e-12)


def test_identical_rows_give_uniform_attention():
    p = _params()
    row = torch.randn(1, 4, dtype=torch.float64, generator=torch.Generator().manual_seed(2))
    sel, attn, _ = pfsm_forward(p, row.repeat(5, 1))
    assert torch.allclose(attn, torch.full((5, 5), 0.2, dtype=torch.float64), atol=1e-15)
    assert torch.allclose(sel, pfsm_forward(p, row)[0], atol=1e-12)


@pytest.mark.parametrize("use_value", [False, True])
def test_matches_scalar_oracle(use_value):
    p = _params(seed=3, use_value=use_value)
    t = torch.randn(3, 4, dtype=torch.float64, generator=torch.Generator().manual_seed(3))
    sel, attn, _ = pfsm_forward(p, t)
    pp = {k: v.tolist() for k, v in p.tensors().items()}
    ref_sel, ref_attn = pfsm_scalar(pp, t.tolist(), use_value)
    assert np.allclose(sel.numpy(), ref_sel, atol=1e-6, rtol=0)
    assert np.allclose(attn.numpy(), ref_attn, atol=1e-6, rtol=0)


def test_batched_numpy_oracle_agrees_with_scalar_oracle():
    p = _params(seed=4)
    t = np.random.default_rng(4).standard_normal((3, 4))
    pp = _np(p)
    batched = pfsm_batched_numpy({k: v[None] for k, v in pp.items()}, t[None])[0]
    ref, _ = pfsm_scalar({k: v.tolist() for k, v in pp.items()}, t.tolist())
    assert np.allclose(batched, ref, atol=1e-12)


def test_batched_input_matches_loop():
    p = _params(D=6, D1=6, D2=6, seed=5)
    t = torch.randn(4, 7, 6, dtype=torch.float64, generator=torch.Generator().manual_seed(5))
    sel, attn, _ = pfsm_forward(p, t)
    for c in range(4):
        s, a, _ = pfsm_forward(p, t[c])
        assert torch.allclose(sel[c], s, atol=1e-14) and torch.allclose(attn[c], a, atol=1e-14)


def test_shape_errors():
    p = _params()
    with pytest.raises(ShapeMismatch):
        pfsm_forward(p, torch.zeros(3, 5, dtype=torch.float64))
    with pytest.raises(ShapeMismatch):
        pfsm_forward(p, torch.zeros(0, 4, dtype=torch.float64))


@pytest.mark.parametrize("seed", range(6))
def test_gradients_match_central_differences(seed):
    use_value = seed % 2 == 1
    p = _params(16, 16, 16, seed=seed, use_value=use_value)
    rng = np.random.default_rng(seed)
    t = rng.standard_normal((8, 16))
    w = rng.standard_normal(16)
    _, _, cache = pfsm_forward(p, torch.from_numpy(t))
    grads, dt = pfsm_backward(cache, torch.from_numpy(w))
    fd = central_differences(_np(p), t, w, use_value)
    grads["t"] = dt
    for name, g in grads.items():
        a, f = g.numpy(), fd[name]
        err = np.abs(a - f) / np.maximum(np.maximum(np.abs(a), np.abs(f)), 1e-7)
        assert err.max() < 1e-3, name


def test_zero_upstream_gradient():
    p = _params()
    _, _, cache = pfsm_forward(p, torch.randn(5, 4, dtype=torch.float64))
    grads, dt = pfsm_backward(cache, torch.zeros(3, dtype=torch.float64))
    assert all(torch.count_nonzero(g) == 0 for g in grads.values())
    assert torch.count_nonzero(dt) == 0


def test_single_prompt_gradient_skips_attention():
    p = _params()
    _, _, cache = pfsm_forward(p, torch.randn(1, 4, dtype=torch.float64))
    grads, _ = pfsm_backward(cache, torch.randn(3, dtype=torch.float64))
    for k in ("wq", "bq", "wk", "bk"):
        assert torch.allclose(grads[k], torch.zeros_like(grads[k]), atol=1e-15)
    assert grads["w1"].abs().sum() > 0 and grads["ws"].abs().sum() > 0


def test_stale_cache():
    p = _params()
    _, _, cache = pfsm_forward(p, torch.randn(3, 4, dtype=torch.float64))
    p.wq.add_(1.0)
    with pytest.raises(StaleCache):
        pfsm_backward(cache, torch.ones(3, dtype=torch.float64))


def test_module_autograd_uses_analytic_backward():
    torch.manual_seed(0)
    m = PFSM(8, 8, 8, seed=1).double()
    t = torch.randn(3, 5, 8, dtype=torch.float64, requires_grad=True)
    assert torch.autograd.gradcheck(lambda x: m(x), (t,), eps=1e-6, atol=1e-6)
    out = m(t).sum()
    out.backward()
    assert m.wq.grad is not None and m.last_attention.shape == (3, 5, 5)


def test_row_stochastic_and_permutation_invariant():
    p = PFSMParams.init(16, 16, 16, seed=7)
    g = torch.Generator().manual_seed(7)
    t = torch.randn(8, 16, generator=g)
    sel, attn, _ = pfsm_forward(p, t)
    assert torch.allclose(attn.double().sum(-1), torch.ones(8, dtype=torch.float64), atol=1e-6)
    for _ in range(50):
        perm = torch.randperm(8, generator=g)
        s2, a2, _ = pfsm_forward(p, t[perm])
        assert torch.equal(s2, sel)
        assert torch.equal(a2, attn[perm][:, perm])


def test_outlier_column_gets_less_than_uniform_mass():
    D, N = 8, 6
    p = PFSMParams.init(D, D, D, seed=0, dtype=torch.float64)
    p.wq = torch.eye(D, dtype=torch.float64)
    p.wk = torch.eye(D, dtype=torch.float64)
    p.bq = torch.zeros(D, dtype=torch.float64)
    p.bk = torch.zeros(D, dtype=torch.float64)
    base = torch.zeros(D, dtype=torch.float64)
    base[0] = 2.0
    rows = [base + 0.05 * torch.eye(D, dtype=torch.float64)[1 + i % 3] for i in range(N - 1)]
    outlier = torch.zeros(D, dtype=torch.float64)
    outlier[D - 1] = 2.0
    t = torch.stack(rows + [outlier])
    _, attn, _ = pfsm_forward(p, t)
    assert (attn[: N - 1, N - 1] < 1.0 / N).all()


def test_baselines():
    torch.manual_seed(0)
    r = torch.randn(1, 6)
    mp = MeanPoolSelector(6, 4)
    assert torch.allclose(baseline_select("mean-pool", r.repeat(5, 1), mp), mp.skip(r[0]), atol=1e-6)
    sym = torch.cat([r, -r])
    assert torch.allclose(baseline_select("mean-pool", sym, mp), mp.skip(torch.zeros(6)), atol=1e-6)
    fc = FCSelector(6, 4, n_prompts=8)
    assert baseline_select("fc", torch.randn(3, 8, 6), fc).shape == (3, 4)
    with pytest.raises(FixedNViolation):
        baseline_select("fc", torch.randn(5, 6), fc)
    cnn = CNNSelector(6, 4)
    assert baseline_select("cnn", torch.randn(3, 5, 6), cnn).shape == (3, 4)
    assert baseline_select("cnn", torch.randn(5, 6), cnn).shape == (4,)
    with pytest.raises(ValueError):
        baseline_select("pfsm", r, mp)
    with pytest.raises(ValueError):
        make_selector("nope")
