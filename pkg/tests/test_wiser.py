import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from wisernet.autodiff import Tensor, check_gradients, conv2d
from wisernet.exceptions import ConfigurationError
from wisernet.wiser import (
    WiserParams,
    edge_boost,
    edge_energy,
    edge_select,
    ortho_loss,
    wiser_forward,
)


def np_conv_relu_stack(x, stack):
    for conv in stack.convs:
        x = conv2d(Tensor(x), conv.weight, conv.bias, pad=1).data
        x = np.maximum(x, 0)
    return x


def np_instance_norm(x, eps=1e-5):
    mu = x.mean(axis=(2, 3), keepdims=True)
    var = x.var(axis=(2, 3), keepdims=True)
    return (x - mu) / np.sqrt(var + eps)


def reference_wiser(s, p):
    """Plain numpy transcription of the block, sharing only the conv kernel."""
    a, b = s[:, :, 0::2, 0::2], s[:, :, 0::2, 1::2]
    c, d = s[:, :, 1::2, 0::2], s[:, :, 1::2, 1::2]
    ll, lh, hl = (a + b + c + d) / 2, (a + b - c - d) / 2, (a - b + c - d) / 2
    normed = np_instance_norm(ll)
    f_c = np_conv_relu_stack(normed, p.phi_c)
    f_s = np_conv_relu_stack(ll, p.phi_s)
    ll_f = normed + f_c
    e = (np.abs(lh) + np.abs(hl)).mean(axis=1, keepdims=True)
    lo = e.min(axis=(1, 2, 3), keepdims=True)
    hi = e.max(axis=(1, 2, 3), keepdims=True)
    e = (e - lo) / (hi - lo + 1e-8)
    tau = e.mean(axis=(1, 2, 3), keepdims=True) + p.beta * e.std(axis=(1, 2, 3), keepdims=True)
    e_eff = np.where(e >= tau, 1 + p.kappa * e, p.a0)
    z = np.einsum("oc,bchw->bohw", p.gate_conv.weight.data[:, :, 0, 0], f_c) + p.gate_conv.bias.data[:, None, None]
    e_s = 1 + p.eps_gate * (2 / (1 + np.exp(-z)) - 1)
    lh_f, hl_f = lh * e_s * e_eff, hl * e_s * e_eff
    out = np.zeros_like(s)
    out[:, :, 0::2, 0::2] = (ll_f + lh_f + hl_f) / 2
    out[:, :, 0::2, 1::2] = (ll_f + lh_f - hl_f) / 2
    out[:, :, 1::2, 0::2] = (ll_f - lh_f + hl_f) / 2
    out[:, :, 1::2, 1::2] = (ll_f - lh_f - hl_f) / 2
    vc, vs = f_c.mean(axis=(2, 3)), f_s.mean(axis=(2, 3))
    vc, vs = vc - vc.mean(1, keepdims=True), vs - vs.mean(1, keepdims=True)
    cos = (vc * vs).sum(1) / ((np.linalg.norm(vc, axis=1) + 1e-8) * (np.linalg.norm(vs, axis=1) + 1e-8))
    return p.alpha * s + out, float(np.mean(cos**2))


def random_block(channels, seed, gate_scale=0.5):
    rng = np.random.default_rng(seed)
    p = WiserParams(channels, rng=rng, alpha=0.5, beta=0.5, eps_gate=0.25, kappa=1.0, a0=0.25)
    p.gate_conv.weight.data = rng.standard_normal(p.gate_conv.weight.shape) * gate_scale
    for conv in p.phi_c.convs + p.phi_s.convs:
        conv.bias.data = rng.standard_normal(conv.bias.shape) * 0.1
    return p


def test_matches_numpy_reference(f64):
    p = random_block(4, 0)
    s = np.random.default_rng(1).standard_normal((2, 4, 8, 8))
    out = wiser_forward(Tensor(s), p)
    ref, ortho = reference_wiser(s, p)
    np.testing.assert_allclose(out.s_tilde.data, ref, atol=1e-10)
    assert abs(out.ortho_term.item() - ortho) < 1e-10


def test_output_shape_preserved_for_odd_maps():
    p = WiserParams(3, rng=np.random.default_rng(0))
    out = wiser_forward(Tensor(np.random.default_rng(1).random((1, 3, 7, 5))), p)
    assert out.s_tilde.shape == (1, 3, 7, 5)


def test_constant_map_gives_scaled_residual(f64):
    # no detail bands and IN(LL) = 0, so only alpha * s survives when phi_c starts at zero
    p = WiserParams(2, rng=np.random.default_rng(0), zero_init_content=True)
    s = np.full((1, 2, 4, 4), 3.0)
    out = wiser_forward(Tensor(s), p)
    np.testing.assert_allclose(out.s_tilde.data, 0.5 * s, atol=1e-12)
    np.testing.assert_array_equal(out.extras["e_eff"].data, 1.0)


def test_zero_gate_weights_give_unit_selector():
    p = WiserParams(3, rng=np.random.default_rng(0))
    f_c = Tensor(np.random.default_rng(1).random((2, 3, 4, 4)))
    np.testing.assert_allclose(edge_select(f_c, p).data, 1.0)


@pytest.mark.parametrize("bias,expected", [(60.0, 1.25), (-60.0, 0.75)])
def test_selector_saturates_at_one_plus_minus_eps(bias, expected):
    p = WiserParams(2, rng=np.random.default_rng(0), eps_gate=0.25)
    p.gate_conv.bias.data[:] = bias
    np.testing.assert_allclose(edge_select(Tensor(np.zeros((1, 2, 2, 2))), p).data, expected)


def test_edge_energy_is_min_max_scaled():
    rng = np.random.default_rng(2)
    e = edge_energy(Tensor(rng.standard_normal((3, 4, 5, 5))), Tensor(rng.standard_normal((3, 4, 5, 5)))).data
    assert e.shape == (3, 1, 5, 5)
    np.testing.assert_allclose(e.min(axis=(1, 2, 3)), 0, atol=1e-6)
    np.testing.assert_allclose(e.max(axis=(1, 2, 3)), 1, atol=1e-6)


def test_edge_boost_threshold_rule():
    p = WiserParams(1, beta=0.0, kappa=2.0, a0=0.1)
    e = Tensor(np.array([0.0, 0.2, 0.4, 1.0]).reshape(1, 1, 2, 2))
    # tau = mean = 0.4
    np.testing.assert_allclose(edge_boost(e, p).data.ravel(), [0.1, 0.1, 1.8, 3.0], rtol=1e-6)


def test_ortho_closed_forms(f64):
    def pooled(v):
        return Tensor(np.asarray(v, dtype=float).reshape(1, -1, 1, 1))

    # the 1e-8 guard in the normalizer shifts results by that order
    assert abs(ortho_loss(pooled([1, 2, 3]), pooled([2, 4, 6])).item() - 1.0) < 1e-7
    assert abs(ortho_loss(pooled([1, 0, -1]), pooled([1, -2, 1])).item()) < 1e-12
    # centered (1, 0, -1) vs (1, -1, 0): cosine 1/2
    assert abs(ortho_loss(pooled([1, 0, -1]), pooled([1, -1, 0])).item() - 0.25) < 1e-7


def test_channel_mismatch_rejected():
    p = WiserParams(3)
    with pytest.raises(ConfigurationError):
        wiser_forward(Tensor(np.zeros((1, 2, 4, 4))), p)
    with pytest.raises(ConfigurationError):
        WiserParams(3, eps_gate=1.0)
    with pytest.raises(ConfigurationError):
        WiserParams(3, a0=1.5)


def test_block_gradients(f64):
    p = random_block(4, 3)
    s = Tensor(np.random.default_rng(4).standard_normal((1, 4, 8, 8)), requires_grad=True)
    leaves = [s] + p.parameters()
    assert check_gradients(lambda: wiser_forward(s, p).s_tilde, leaves, max_entries=6) < 1e-6
    assert check_gradients(lambda: wiser_forward(s, p).ortho_term, leaves, max_entries=6) < 1e-6


def test_every_parameter_receives_gradient():
    p = random_block(4, 5)
    s = Tensor(np.random.default_rng(6).standard_normal((2, 4, 8, 8)))
    out = wiser_forward(s, p)
    # a plain sum of the reconstruction ignores the detail bands, so project randomly
    w = Tensor(np.random.default_rng(7).standard_normal(out.s_tilde.shape))
    ((out.s_tilde * w).sum() + out.ortho_term).backward()
    for name, param in p.named_parameters():
        assert param.grad is not None and np.any(param.grad != 0), name


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2**16), b=st.integers(1, 3))
def test_ortho_term_in_unit_interval(seed, b):
    rng = np.random.default_rng(seed)
    val = ortho_loss(Tensor(rng.standard_normal((b, 5, 3, 3))), Tensor(rng.standard_normal((b, 5, 3, 3)))).item()
    assert -1e-6 <= val <= 1 + 1e-6


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2**16), bias=st.floats(-50, 50))
def test_selector_stays_in_band(seed, bias):
    p = WiserParams(3, eps_gate=0.25)
    rng = np.random.default_rng(seed)
    p.gate_conv.weight.data = rng.standard_normal(p.gate_conv.weight.shape).astype(np.float32)
    p.gate_conv.bias.data[:] = bias
    e_s = edge_select(Tensor(rng.standard_normal((1, 3, 4, 4))), p).data
    assert e_s.min() >= 0.75 - 1e-6 and e_s.max() <= 1.25 + 1e-6


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2**16), shift=st.floats(-3, 3))
def test_content_ignores_per_channel_offsets_of_the_skip(seed, shift):
    # a constant per channel only moves LL by a constant, which IN removes
    p = random_block(3, seed)
    rng = np.random.default_rng(seed)
    s = rng.standard_normal((1, 3, 8, 8))
    offset = shift * rng.standard_normal((1, 3, 1, 1))
    a = wiser_forward(Tensor(s, dtype=np.float64), p).f_c.data
    b = wiser_forward(Tensor(s + offset, dtype=np.float64), p).f_c.data
    np.testing.assert_allclose(a, b, atol=1e-6)
