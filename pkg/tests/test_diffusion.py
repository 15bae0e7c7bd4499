"""Schedule construction, forward/reverse algebra, CFG mixing."""

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from cidlab.diffusion import (FixedStepConfig, ShapeMismatchError, build_schedule,
                              cfg_mix, eps_to_x0, forward_diffuse,
                              one_step_restore, x0_to_eps)
from cidlab.oracle import brute_force_alpha_bar


def test_single_step_schedule_closed_form():
    s = build_schedule(1, 0.1, 0.1)
    assert s.alpha_bar[0] == pytest.approx(np.sqrt(0.9), abs=1e-12)
    assert s.beta_bar[0] == pytest.approx(np.sqrt(0.1), abs=1e-12)


@given(st.integers(min_value=1, max_value=400),
       st.floats(min_value=1e-5, max_value=0.01),
       st.floats(min_value=0.0, max_value=0.02))
@settings(max_examples=50, deadline=None)
def test_variance_preserving_identity(T, beta_min, spread):
    s = build_schedule(T, beta_min, beta_min + spread)
    assert np.abs(s.alpha_bar ** 2 + s.beta_bar ** 2 - 1.0).max() < 1e-12


def test_underflowing_schedule_rejected():
    with pytest.raises(ValueError, match="underflow"):
        build_schedule(400, 0.03, 0.53)


def test_alpha_bar_matches_brute_force_product():
    s = build_schedule(1000, 1e-4, 2e-2)
    for t in (1, 2, 500, 999, 1000):
        assert s.alpha_bar[t - 1] == pytest.approx(
            brute_force_alpha_bar(s.beta, t), abs=1e-12)


def test_alpha_bar_strictly_decreasing():
    s = build_schedule(1000, 1e-4, 2e-2)
    assert np.all(np.diff(s.alpha_bar) < 0)
    assert np.all((s.alpha_bar > 0) & (s.alpha_bar < 1))
    assert np.all((s.beta_bar > 0) & (s.beta_bar < 1))


@pytest.mark.parametrize("bad", [(0, 0.0, 0.1), (10, 0.2, 0.1), (10, 0.1, 1.0),
                                 (10, -0.1, 0.1)])
def test_build_schedule_rejects_bad_bounds(bad):
    T, lo, hi = bad
    with pytest.raises(ValueError):
        build_schedule(T, lo, hi)


SCHED = build_schedule(1000, 1e-4, 2e-2)


def test_forward_diffuse_zero_noise_and_zero_signal():
    z = torch.randn(2, 3, generator=torch.Generator().manual_seed(0))
    zero = torch.zeros_like(z)
    a, b = SCHED.coeffs(10)
    assert torch.allclose(forward_diffuse(z, 10, zero, SCHED), a * z)
    assert torch.allclose(forward_diffuse(zero, 10, z, SCHED), b * z)


def test_forward_diffuse_basis_vectors_match_product_oracle():
    z = torch.tensor([[1.0, 0.0]])
    eps = torch.tensor([[0.0, 1.0]])
    out = forward_diffuse(z, 10, eps, SCHED)
    a10 = brute_force_alpha_bar(SCHED.beta, 10)
    b10 = np.sqrt(1 - a10 ** 2)
    assert out[0, 0].item() == pytest.approx(a10, rel=1e-6)
    assert out[0, 1].item() == pytest.approx(b10, rel=1e-6)


def test_forward_diffuse_rejects_mismatch_and_bad_t():
    z = torch.zeros(2, 3)
    with pytest.raises(ShapeMismatchError):
        forward_diffuse(z, 10, torch.zeros(2, 4), SCHED)
    with pytest.raises(ValueError):
        forward_diffuse(z, 0, torch.zeros(2, 3), SCHED)
    with pytest.raises(ValueError):
        forward_diffuse(z, 1001, torch.zeros(2, 3), SCHED)


def test_eps_x0_roundtrip_recovers_signal():
    # 1e-6 relative error across the full t range requires double precision:
    # at t near T the inversion multiplies rounding error by 1/alpha_bar.
    g = torch.Generator().manual_seed(1)
    z = torch.randn(4, 16, 8, 8, generator=g, dtype=torch.float64)
    eps = torch.randn(4, 16, 8, 8, generator=g, dtype=torch.float64)
    for t in (1, 250, 999):
        z_t = forward_diffuse(z, t, eps, SCHED)
        back = eps_to_x0(z_t, eps, t, SCHED)
        rel = ((back - z).norm() / z.norm()).item()
        assert rel < 1e-6


def test_eps_x0_roundtrip_float32_moderate_t():
    g = torch.Generator().manual_seed(1)
    z = torch.randn(4, 16, 8, 8, generator=g)
    eps = torch.randn(4, 16, 8, 8, generator=g)
    for t in (1, 250, 500):
        z_t = forward_diffuse(z, t, eps, SCHED)
        rel = ((eps_to_x0(z_t, eps, t, SCHED) - z).norm() / z.norm()).item()
        assert rel < 1e-5


def test_x0_eps_mutual_inverse():
    g = torch.Generator().manual_seed(2)
    z_t = torch.randn(3, 5, generator=g)
    e = torch.randn(3, 5, generator=g)
    for t in (7, 700):
        assert torch.allclose(x0_to_eps(z_t, eps_to_x0(z_t, e, t, SCHED), t, SCHED),
                              e, rtol=1e-5, atol=1e-6)


def test_eps_to_x0_worked_example():
    z_t = torch.tensor([[1.0, 1.0]])
    eps_hat = torch.tensor([[0.5, 0.0]])
    a, b = SCHED.coeffs(10)
    out = eps_to_x0(z_t, eps_hat, 10, SCHED)
    expect = (z_t - b * eps_hat) / a
    assert torch.equal(out, expect)


def test_per_sample_timestep_tensor():
    g = torch.Generator().manual_seed(3)
    z = torch.randn(5, 4, generator=g)
    eps = torch.randn(5, 4, generator=g)
    t = torch.tensor([1, 10, 100, 500, 1000])
    batched = forward_diffuse(z, t, eps, SCHED)
    rows = [forward_diffuse(z[i:i + 1], int(t[i]), eps[i:i + 1], SCHED)
            for i in range(5)]
    assert torch.allclose(batched, torch.cat(rows), atol=1e-7)


def test_one_step_restore_fixed_coeffs_closed_form():
    g = torch.Generator().manual_seed(4)
    z_l = torch.randn(2, 4, 8, 8, generator=g)
    eps_hat = torch.randn(2, 4, 8, 8, generator=g)
    cfg = FixedStepConfig(t_s=500, use_fixed_coeffs=True)
    out = one_step_restore(z_l, lambda z, t, c: eps_hat, cfg, SCHED)
    assert torch.equal(out, 2.0 * z_l - eps_hat)


def test_one_step_restore_zero_predictor():
    z_l = torch.full((1, 3), 0.3)
    cfg_fixed = FixedStepConfig(t_s=500, use_fixed_coeffs=True)
    zero = lambda z, t, c: torch.zeros_like(z)
    assert torch.equal(one_step_restore(z_l, zero, cfg_fixed, SCHED), 2.0 * z_l)
    cfg_sched = FixedStepConfig(t_s=500, use_fixed_coeffs=False)
    a, _ = SCHED.coeffs(500)
    assert torch.allclose(one_step_restore(z_l, zero, cfg_sched, SCHED), z_l / a)


def test_one_step_restore_worked_example():
    z_l = torch.tensor([0.3])
    cfg = FixedStepConfig(t_s=1, use_fixed_coeffs=True)
    out = one_step_restore(z_l, lambda z, t, c: torch.tensor([0.1]), cfg, SCHED)
    assert out.item() == pytest.approx(0.5, abs=1e-7)


def test_fixed_step_config_validation():
    with pytest.raises(ValueError):
        FixedStepConfig(t_s=0).validate(1000)
    with pytest.raises(ValueError):
        FixedStepConfig(t_s=1001).validate(1000)


def test_cfg_mix_endpoints_and_worked_example():
    g = torch.Generator().manual_seed(5)
    fc = torch.randn(2, 3, generator=g)
    fu = torch.randn(2, 3, generator=g)
    assert torch.allclose(cfg_mix(fc, fu, 1.0), fc)
    assert torch.allclose(cfg_mix(fc, fu, 0.0), fu)
    out = cfg_mix(torch.tensor([1.0]), torch.tensor([0.0]), 7.5)
    assert out.item() == pytest.approx(7.5)


@given(st.floats(min_value=-20, max_value=20))
@settings(max_examples=30, deadline=None)
def test_cfg_mix_collapse(kappa):
    f = torch.linspace(-2, 2, 6).reshape(2, 3)
    assert torch.allclose(cfg_mix(f, f, kappa), f, atol=1e-5)
