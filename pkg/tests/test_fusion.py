import numpy as np
import pytest
import torch

from swimvg.config import profile
from swimvg.fusion import (
    CIA,

    DoSA,
    EmptyContext,
    bridge_project,

    cross_attention,
    dosa_forward,
    swip_schedule,
)



def _softmax(x):
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def _np_mhca(q_in, ctx, wq, wk, wv, heads):
    """Reference multi-head attention written loop-by-loop."""
    c_d = wq.shape[1]
    hd = c_d // heads
    q, k, v = q_in @ wq, ctx @ wk, ctx @ wv
    out = np.zeros((q_in.shape[0], c_d))
    for h in range(heads):
        sl = slice(h * hd, (h + 1) * hd)
        w = _softmax(q[:, sl] @ k[:, sl].T / np.sqrt(hd))
        out[:, sl] = w @ v[:, sl]
    return out


def _t(a):
    return torch.tensor(a, dtype=torch.float64)


def test_bridge_examples(rng):
    w = rng.normal(size=(3, 4))
    x = rng.normal(size=(2, 3))
    assert np.allclose(bridge_project(_t(x), _t(w)).numpy(), x @ w, atol=1e-14)
    assert torch.equal(bridge_project(torch.zeros(1, 3, dtype=torch.float64), _t(w)), torch.zeros(1, 4, dtype=torch.float64))
    eye = torch.eye(5, dtype=torch.float64)
    x5 = _t(rng.normal(size=(4, 5)))
    assert torch.equal(bridge_project(x5, eye), x5)


def test_swip_schedule_examples():
    full = swip_schedule(profile("full"))
    assert [s.inject for s in full] == [True] * 12 + [False] * 12
    assert [s.source_text_layer for s in full[:12]] == list(range(12))
    toy = swip_schedule(profile("toy"))
    assert [s.inject for s in toy] == [True, True, False, False]
    off = swip_schedule(profile("toy", swip_enabled=False))
    assert not any(s.inject for s in off)


def test_cross_attention_single_context(rng):
    q = _t(rng.normal(size=(5, 4)))
    ctx = _t(rng.normal(size=(1, 6)))
    wq, wk, wv = _t(rng.normal(size=(4, 4))), _t(rng.normal(size=(6, 4))), _t(rng.normal(size=(6, 4)))
    out = cross_attention(q, ctx, wq, wk, wv, heads=2)
    assert torch.allclose(out, (ctx @ wv).expand(5, 4), atol=1e-14)
    assert torch.equal(cross_attention(q, ctx, wq, wk, torch.zeros_like(wv), 2), torch.zeros(5, 4, dtype=torch.float64))


@pytest.mark.parametrize("heads", [1, 2])
def test_cross_attention_matches_dense_oracle(rng, heads):
    q, ctx = rng.normal(size=(2, 4)), rng.normal(size=(3, 6))
    wq, wk, wv = rng.normal(size=(4, 4)), rng.normal(size=(6, 4)), rng.normal(size=(6, 4))
    out = cross_attention(_t(q), _t(ctx), _t(wq), _t(wk), _t(wv), heads).numpy()
    assert np.allclose(out, _np_mhca(q, ctx, wq, wk, wv, heads), atol=1e-12)


def test_cross_attention_masks_pad(rng):
    q, ctx = _t(rng.normal(size=(2, 4))), _t(rng.normal(size=(3, 6)))
    w = [_t(rng.normal(size=s)) for s in ((4, 4), (6, 4), (6, 4))]
    mask = torch.tensor([False, False, True])
    assert torch.allclose(cross_attention(q, ctx, *w, 2, mask), cross_attention(q, ctx[:2], *w, 2), atol=1e-14)
    with pytest.raises(EmptyContext):
        cross_attention(q, ctx, *w, 2, torch.ones(3, dtype=torch.bool))


def _cia(rng, c_v=5, c_t=3, c_d=2, heads=1, scale=0.7):
    m = CIA(c_v, c_t, c_d, heads, scale, own_bridge=True).double()
    with torch.no_grad():
        for p in m.parameters():
            p.copy_(_t(rng.normal(size=tuple(p.shape))))
    return m


def test_cia_matches_stepwise_oracle(rng):
    m = _cia(rng)
    f_v, text = rng.normal(size=(2, 5)), rng.normal(size=(3, 3))
    P = {n: p.detach().numpy() for n, p in m.named_parameters()}
    c = text @ P["bridge.weight"]
    f_l = np.maximum(f_v @ P["down"], 0) @ P["linear"]
    f_up = (f_l + _np_mhca(f_l, c, P["wq"], P["wk"], P["wv"], 1)) @ P["up"]
    expected = f_v + 0.7 * f_up
    assert np.allclose(m(_t(f_v), _t(text)).detach().numpy(), expected, atol=1e-12)


def test_cia_residual_identities(rng):
    m = _cia(rng)
    f_v, text = _t(rng.normal(size=(4, 5))), _t(rng.normal(size=(3, 3)))
    m.scale = 0.0
    assert torch.equal(m(f_v, text), f_v)
    m.scale = 0.7
    with torch.no_grad():
        m.up.zero_()
    assert torch.equal(m(f_v, text), f_v)


def test_cia_initialises_to_identity(rng):
    m = CIA(48, 32, 8, 2, 0.2, own_bridge=True)
    m.reset_parameters(torch.Generator().manual_seed(0))
    f_v = torch.randn(7, 48)
    assert torch.equal(m(f_v, torch.randn(4, 32)), f_v)


def _dosa(rng, c_t=4, c_d=2, scale=0.5):
    m = DoSA(c_t, c_d, scale).double()
    with torch.no_grad():
        m.down.copy_(_t(rng.normal(size=(c_t, c_d))))
        m.up.copy_(_t(rng.normal(size=(c_d, c_t))))
    return m


def test_dosa_matches_oracle(rng):
    m = _dosa(rng)
    f = rng.normal(size=(2, 4))
    expected = f + 0.5 * np.maximum(f @ m.down.detach().numpy(), 0) @ m.up.detach().numpy()
    assert np.allclose(dosa_forward(_t(f), m).detach().numpy(), expected, atol=1e-12)


def test_dosa_identities(rng):
    m = _dosa(rng)
    f = _t(rng.normal(size=(3, 4)))
    m.scale = 0.0
    assert torch.equal(m(f), f)
    m.scale = 0.5
    with torch.no_grad():
        m.down.copy_(-m.down.abs())
    pos = f.abs()
    assert torch.equal(m(pos), pos)


def test_dosa_parameter_count():
    assert sum(p.numel() for p in DoSA(32, 8, 0.2).parameters()) == 512
