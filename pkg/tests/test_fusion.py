import math

import numpy as np
import pytest
import torch
from hypothesis import given, strategies as st

from csctrack.fusion import AttentionBlock, CSCFusion, FusionConfig, attention, fuse

import oracles
from conftest import randomize_
from gradcheck import sampled_fd_errors


def _fusion(seed=0, **kw):
    torch.manual_seed(seed)
    f = CSCFusion(FusionConfig(dim=6, **kw)).double()
    return randomize_(f, seed)


def test_attention_single_key_returns_value():
    q = torch.randn(3, 4, dtype=torch.float64)
    k = torch.randn(1, 4, dtype=torch.float64)
    v = torch.randn(1, 5, dtype=torch.float64)
    assert torch.allclose(attention(q, k, v), v.expand(3, 5))


def test_attention_identical_keys_average_values():
    q = torch.randn(2, 4, dtype=torch.float64)
    k = torch.ones(3, 4, dtype=torch.float64)
    v = torch.randn(3, 2, dtype=torch.float64)
    assert torch.allclose(attention(q, k, v), v.mean(0).expand(2, 2))


def test_attention_hand_logits():
    q = [[1.0, 0.0], [0.0, 2.0]]
    k = [[1.0, 1.0], [0.0, -1.0]]
    v = [[1.0, 2.0], [3.0, -1.0]]
    got = attention(torch.tensor(q), torch.tensor(k), torch.tensor(v))
    # first query: logits (1/sqrt2, 0)
    w = 1 / (1 + math.exp(-1 / math.sqrt(2)))
    assert got[0, 0].item() == pytest.approx(w * 1 + (1 - w) * 3, rel=1e-6)
    np.testing.assert_allclose(got.numpy(), oracles.attention(q, k, v), rtol=1e-6)


def test_attention_errors():
    with pytest.raises(ValueError):
        attention(torch.zeros(1, 2), torch.zeros(0, 2), torch.zeros(0, 2))
    with pytest.raises(ValueError):
        attention(torch.zeros(1, 2), torch.zeros(2, 2), torch.zeros(3, 2))
    with pytest.raises(ValueError):
        attention(torch.zeros(1, 3), torch.zeros(2, 2), torch.zeros(2, 2))


@pytest.mark.parametrize("readout", ["object", "mean"])
@given(seed=st.integers(0, 10_000))
def test_part_permutation_invariance(readout, seed):
    f = _fusion(3, readout=readout)
    g = torch.Generator().manual_seed(seed)
    parts = torch.randn(2, 4, 6, generator=g, dtype=torch.float64)
    sem = torch.randn(2, 6, generator=g, dtype=torch.float64)
    ctx = torch.randn(2, 6, generator=g, dtype=torch.float64)
    perm = torch.randperm(4, generator=g)
    a = f(parts, sem, ctx)
    b = f(parts[:, perm], sem, ctx)
    assert torch.allclose(a, b, rtol=0, atol=1e-12)


def test_output_dimension_independent_of_part_count():
    f = _fusion()
    for n in (1, 4, 9):
        assert f(torch.randn(1, n, 6, dtype=torch.float64), torch.randn(1, 6, dtype=torch.float64),
                 torch.randn(1, 6, dtype=torch.float64)).shape == (1, 6)


def test_all_inputs_equal_gives_projection_of_transformed_token():
    f = _fusion(readout="mean")
    v = torch.randn(6, dtype=torch.float64)
    out = fuse(v.expand(4, 6), v, v, f)
    tok = f.self_attn(v.view(1, 1, 6), v.view(1, 1, 6))
    tok = f.cross_attn(tok, v.view(1, 1, 6))
    assert torch.allclose(out, f.project(tok[0, 0]))


def test_context_sensitivity():
    f = _fusion()
    parts, sem = torch.randn(4, 6, dtype=torch.float64), torch.randn(6, dtype=torch.float64)
    assert not torch.equal(fuse(parts, sem, torch.randn(6, dtype=torch.float64), f),
                           fuse(parts, sem, torch.randn(6, dtype=torch.float64), f))


def test_zero_context_leaves_only_residual_path():
    """Scalar-dimension trace: with a zero context the value term vanishes."""
    f = CSCFusion(FusionConfig(dim=1, use_parts=True, use_context=True, layer_norm=False,
                               readout="mean")).double()
    with torch.no_grad():
        for blk, (wq, wk, wv, wo) in ((f.self_attn, (0.5, -1.0, 2.0, 0.3)),
                                      (f.cross_attn, (1.5, 0.7, -0.4, 2.0))):
            blk.q.weight.fill_(wq); blk.k.weight.fill_(wk); blk.v.weight.fill_(wv); blk.o.weight.fill_(wo)
        f.project.weight.fill_(1.7)
        f.project.bias.fill_(-0.2)
    parts = [0.2, -0.5, 1.0, 0.4]
    obj = 0.8
    tokens = [[t] for t in parts + [obj]]
    # self-attention by hand
    q = [[0.5 * t[0]] for t in tokens]
    k = [[-1.0 * t[0]] for t in tokens]
    v = [[2.0 * t[0]] for t in tokens]
    att = oracles.attention(q, k, v)
    after_self = [t[0] + 0.3 * a[0] for t, a in zip(tokens, att)]
    want = 1.7 * (sum(after_self) / 5) - 0.2        # cross-attention adds wo * wv * 0
    got = fuse(torch.tensor(parts, dtype=torch.float64).view(4, 1),
               torch.tensor([obj], dtype=torch.float64), torch.zeros(1, dtype=torch.float64), f)
    assert got.item() == pytest.approx(want, rel=1e-12)


def test_variants_ignore_missing_levels():
    f = _fusion(use_parts=False, use_context=False)
    sem = torch.randn(3, 6, dtype=torch.float64)
    assert f(None, sem, None).shape == (3, 6)
    with pytest.raises(ValueError):
        _fusion()(None, sem, torch.randn(3, 6, dtype=torch.float64))


def test_concat_baseline_skips_attention():
    f = _fusion(mode="concat", use_context=False)
    parts, sem = torch.randn(2, 4, 6, dtype=torch.float64), torch.randn(2, 6, dtype=torch.float64)
    want = f.concat_project(torch.cat([sem.unsqueeze(1), parts], 1).flatten(1))
    assert torch.allclose(f(parts, sem, None), want)


def test_shape_errors():
    f = _fusion()
    with pytest.raises(ValueError):
        f(torch.randn(1, 4, 5, dtype=torch.float64), torch.randn(1, 6, dtype=torch.float64),
          torch.randn(1, 6, dtype=torch.float64))
    with pytest.raises(ValueError):
        AttentionBlock(6, heads=4)


def test_residual_branch_starts_silent():
    torch.manual_seed(0)
    f = CSCFusion(FusionConfig(dim=6))
    sem = torch.randn(2, 6)
    with_parts = f(torch.randn(2, 4, 6), sem, torch.randn(2, 6))
    alone = CSCFusion(FusionConfig(dim=6, use_parts=False, use_context=False))
    alone.load_state_dict(f.state_dict())
    assert torch.allclose(with_parts, alone(None, sem, None), atol=1e-6)


def test_finite_difference_gradients():
    f = _fusion(7, heads=2)
    g = torch.Generator().manual_seed(1)
    parts = torch.randn(3, 4, 6, generator=g, dtype=torch.float64)
    sem = torch.randn(3, 6, generator=g, dtype=torch.float64)
    ctx = torch.randn(3, 6, generator=g, dtype=torch.float64)
    probe = torch.randn(6, generator=g, dtype=torch.float64)

    def loss():
        return (f(parts, sem, ctx) * probe).sum()

    errs = sampled_fd_errors(loss, list(f.named_parameters()), per_tensor=10)
    worst = max(errs, key=lambda e: e[-1])
    assert worst[-1] < 1e-4, worst
