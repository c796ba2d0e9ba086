import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from iac_forge.errors import InvalidArgumentError, NumericalDomainError
from iac_forge.relaxation import (
    ArchParams,
    ChannelMask,
    edge_weights_pcdarts,
    edge_weights_tan_rescaled,
    mixed_op_forward,
    node_forward,
    op_mixture_weights,
    sample_channel_mask,
)
from iac_forge.search_space import OpKind, SearchSpaceConfig, instantiate_op


def tan_rescaled_oracle(beta):
    """Literal transcription: softmax of tan, then the proportional cap."""
    t = [math.tan(b) for b in beta]
    m = max(t)
    e = [math.exp(v - m) for v in t]
    psi = [v / sum(e) for v in e]
    top = max(range(len(psi)), key=lambda i: psi[i])
    if psi[top] <= 0.5:
        return psi
    rest = sum(p for i, p in enumerate(psi) if i != top)
    return [0.5 if i == top else 0.5 * p / rest for i, p in enumerate(psi)]


def test_uniform_alpha_gives_uniform_phi():
    phi = op_mixture_weights(torch.ones(8))
    assert torch.allclose(phi, torch.full((8,), 1 / 8, dtype=phi.dtype))


def test_ln7_example():
    phi = op_mixture_weights([math.log(7)] + [0.0] * 7)
    expected = [0.5] + [1 / 14] * 7
    assert np.allclose(phi.numpy(), expected, atol=1e-12)


@given(st.lists(st.floats(-20, 20), min_size=1, max_size=8), st.floats(-50, 50))
def test_softmax_shift_invariant(logits, c):
    a = op_mixture_weights(logits)
    b = op_mixture_weights([v + c for v in logits])
    assert torch.allclose(a, b, atol=1e-9)
    assert abs(float(a.sum()) - 1) < 1e-6


@given(st.lists(st.integers(-1000, 1000), min_size=2, max_size=8, unique=True))
def test_argmax_preserved(ints):
    logits = [i / 100 for i in ints]
    assert int(op_mixture_weights(logits).argmax()) == int(np.argmax(logits))


@pytest.mark.parametrize("bad", [[float("nan"), 0.0], [float("inf"), 1.0]])
def test_non_finite_rejected(bad):
    for fn in (op_mixture_weights, edge_weights_pcdarts, edge_weights_tan_rescaled):
        with pytest.raises(InvalidArgumentError):
            fn(bad)


@pytest.mark.parametrize("beta,expected", [
    ([1.0, 1.0], [0.5, 0.5]),
    ([0.0, 0.0, 0.0], [1 / 3] * 3),
    ([math.log(2), 0.0], [2 / 3, 1 / 3]),
])
def test_pcdarts_examples(beta, expected):
    assert np.allclose(edge_weights_pcdarts(beta).numpy(), expected, atol=1e-12)


def test_tan_rescaled_worked_example():
    beta = [1.0, 0.5, 0.2]
    oracle = tan_rescaled_oracle(beta)
    # frozen values of the uncapped and capped weights
    t = [math.tan(b) for b in beta]
    e = [math.exp(v) for v in t]
    assert [round(v / sum(e), 4) for v in e] == [0.6166, 0.2243, 0.1591]
    assert [round(v, 4) for v in oracle] == [0.5, 0.2925, 0.2075]
    out = edge_weights_tan_rescaled(beta).numpy()
    assert np.allclose(out, oracle, atol=1e-12)
    assert [round(float(v), 4) for v in out] == [0.5, 0.2925, 0.2075]


def test_tan_rescaled_init_symmetric():
    assert edge_weights_tan_rescaled([1.0, 1.0]).tolist() == [0.5, 0.5]


def test_tan_rescaled_exact_half_not_capped():
    # two equal entries at 0.5 each: boundary stays on the uncapped branch
    out = edge_weights_tan_rescaled([0.3, 0.3])
    assert out.tolist() == [0.5, 0.5]


def test_tan_rescaled_single_edge():
    assert edge_weights_tan_rescaled([0.7]).tolist() == [1.0]


@pytest.mark.parametrize("pole", [math.pi / 2, -math.pi / 2, 3 * math.pi / 2, math.pi / 2 + 5e-7])
def test_tan_pole_rejected(pole):
    with pytest.raises(NumericalDomainError):
        edge_weights_tan_rescaled([0.1, pole])


betas = st.lists(st.floats(-1.5, 1.5), min_size=2, max_size=5)


@settings(max_examples=300)
@given(betas)
def test_tan_rescaled_matches_oracle(beta):
    out = edge_weights_tan_rescaled(beta).numpy()
    assert np.allclose(out, tan_rescaled_oracle(beta), atol=1e-12)
    assert abs(out.sum() - 1) < 1e-6
    assert out.max() <= 0.5 + 1e-9


@settings(max_examples=200)
@given(st.lists(st.floats(-1.5, 1.5), min_size=2, max_size=5, unique=True))
def test_tan_rescaled_preserves_order(beta):
    out = edge_weights_tan_rescaled(beta).numpy()
    order = np.argsort(beta, kind="stable")
    assert np.all(np.diff(out[order]) >= -1e-12)


def test_tan_rescaled_gradient_flows():
    beta = torch.tensor([1.0, 0.5, 0.2], dtype=torch.float64, requires_grad=True)
    (edge_weights_tan_rescaled(beta) * torch.tensor([1.0, 2.0, 3.0], dtype=torch.float64)).sum().backward()
    # the capped argmax entry is constant, so its beta gets no gradient
    assert beta.grad[0] == 0 and beta.grad[1] != 0


@pytest.mark.parametrize("C,K,expected", [(8, 4, 2), (8, 1, 8), (3, 8, 1), (16, 4, 4), (1, 4, 1)])
def test_mask_counts(C, K, expected, gen):
    m = sample_channel_mask(C, K, gen)
    v = m.as_vector()
    assert m.active_count == expected == int(v.sum())
    assert set(v.tolist()) <= {0.0, 1.0}
    assert torch.equal(m.active, torch.sort(m.active).values)


def test_mask_deterministic():
    a = sample_channel_mask(16, 4, torch.Generator().manual_seed(5))
    b = sample_channel_mask(16, 4, torch.Generator().manual_seed(5))
    assert torch.equal(a.active, b.active)


def test_mask_rejects_bad_args():
    with pytest.raises(InvalidArgumentError):
        sample_channel_mask(0, 2)


def _ops(kinds, C, gen):
    return [instantiate_op(k, C, gen).eval() for k in kinds]


def test_mixed_op_identity_collapse(gen):
    x = torch.randn(6, 5, 5, generator=gen)
    ops = _ops([OpKind.IDENTITY] * 3, 6, gen)
    for K in (1, 2, 4):
        out = mixed_op_forward(x, torch.randn(3, generator=gen), ops, sample_channel_mask(6, K, gen))
        assert torch.allclose(out, x, atol=1e-6)


def test_mixed_op_one_hot_zero(gen):
    x = torch.randn(2, 4, 6, 6, generator=gen)
    ops = _ops(list(OpKind), 4, gen)
    alpha = torch.zeros(8)
    alpha[OpKind.ZERO] = 40.0
    out = mixed_op_forward(x, alpha, ops, ChannelMask.full(4))
    assert out.abs().max() < 1e-12


def test_mixed_op_inactive_channels_pass_through(gen):
    x = torch.randn(1, 8, 6, 6, generator=gen)
    ops = _ops([OpKind.ZERO, OpKind.SEP_CONV_3X3], 2, gen)
    mask = sample_channel_mask(8, 4, gen)
    out = mixed_op_forward(x, torch.tensor([0.0, 1.0]), ops, mask)
    inactive = [c for c in range(8) if c not in mask.active.tolist()]
    assert torch.equal(out[:, inactive], x[:, inactive])
    expected = 1 / (1 + math.e) * 0 + math.e / (1 + math.e) * ops[1](x[:, mask.active])
    assert torch.allclose(out[:, mask.active], expected, atol=1e-6)


def test_mixed_op_errors(gen):
    x = torch.randn(4, 5, 5, generator=gen)
    ops = _ops([OpKind.IDENTITY] * 2, 4, gen)
    with pytest.raises(InvalidArgumentError):
        mixed_op_forward(x, torch.zeros(3), ops, ChannelMask.full(4))
    with pytest.raises(InvalidArgumentError):
        mixed_op_forward(x, torch.zeros(2), ops, ChannelMask.full(5))
    with pytest.raises(InvalidArgumentError):
        mixed_op_forward(torch.zeros(5, 5), torch.zeros(2), ops, ChannelMask.full(4))


def test_node_forward_examples():
    e = [torch.full((2, 3), v) for v in (1.0, 2.0, 3.0)]
    out = node_forward([0.5, 0.2925, 0.2075], e)
    assert torch.allclose(out, torch.full((2, 3), 1.7075), atol=1e-6)
    assert torch.equal(node_forward([1.0], e[:1]), e[0])
    assert torch.allclose(node_forward([0.5, 0.5], e[:2]), 0.5 * e[0] + 0.5 * e[1])
    with pytest.raises(InvalidArgumentError):
        node_forward([0.5, 0.5], e)


def test_arch_params_init_and_bytes():
    arch = ArchParams(SearchSpaceConfig())
    assert arch.alpha.shape == (14, 8)
    assert [b.numel() for b in arch.betas] == [2, 3, 4, 5]
    assert arch.numel() == 14 * 8 + 14
    assert torch.all(arch.alpha == 1) and all(torch.all(b == 1) for b in arch.betas)
    raw = arch.to_bytes()
    assert len(raw) == 4 * arch.numel()
    assert np.all(np.frombuffer(raw, dtype="<f4") == 1.0)
