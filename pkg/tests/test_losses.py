"""Value contracts of every training objective."""

import math

import pytest
import torch

from cidlab.losses import (LossWeights, adv_generator_loss, batch_inner,
                           cid_fake_score_loss, cid_generator_loss,
                           cid_real_score_loss, cida_total, edge_l1,
                           loss_gan_pair, loss_mse, loss_repa, omega_weight,
                           sid_generator_loss, sid_l1, stage1_loss,
                           vsd_generator_loss)
from cidlab.nets import DiscHead, seeded


def rand(shape, seed):
    return torch.randn(shape, generator=torch.Generator().manual_seed(seed),
                       dtype=torch.float64)


class TestRepa:
    def test_parallel_gives_minus_one(self):
        h = rand((5, 4), 0)
        assert loss_repa(h, h).item() == pytest.approx(-1.0, abs=1e-12)

    def test_orthogonal_gives_zero(self):
        h_ref = torch.tensor([[1.0, 0.0], [0.0, 1.0]])
        h_proj = torch.tensor([[0.0, 1.0], [1.0, 0.0]])
        assert loss_repa(h_ref, h_proj).item() == pytest.approx(0.0, abs=1e-12)

    def test_cos45_closed_form(self):
        out = loss_repa(torch.tensor([[1.0, 0.0]]), torch.tensor([[1.0, 1.0]]))
        assert out.item() == pytest.approx(-math.cos(math.pi / 4), abs=1e-6)

    def test_range_and_zero_norm_guard(self):
        for seed in range(10):
            v = loss_repa(rand((6, 3), seed), rand((6, 3), seed + 100)).item()
            assert -1.0 <= v <= 1.0
        # zero-norm row is guarded, not an exception
        out = loss_repa(torch.zeros(1, 3), torch.ones(1, 3))
        assert torch.isfinite(out)

    def test_batched_tokens(self):
        h = rand((2, 5, 4), 1)
        assert loss_repa(h, h).item() == pytest.approx(-1.0, abs=1e-12)


class TestMse:
    def test_zero_iff_equal(self):
        a = rand((3, 4), 2)
        assert loss_mse(a, a).item() == 0.0
        assert loss_mse(a, a + 1.0).item() == pytest.approx(1.0, abs=1e-12)

    def test_matches_naive_loop(self):
        a, b = rand((2, 3, 4), 3), rand((2, 3, 4), 4)
        naive = 0.0
        for x, y in zip(a.reshape(-1).tolist(), b.reshape(-1).tolist()):
            naive += (x - y) ** 2
        naive /= a.numel()
        assert loss_mse(a, b).item() == pytest.approx(naive, abs=1e-10)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            loss_mse(torch.zeros(2, 3), torch.zeros(3, 2))


class TestGanPair:
    def test_half_probabilities(self):
        maps = torch.full((2, 4), 0.5)
        disc, gen = loss_gan_pair(maps, maps)
        assert disc.item() == pytest.approx(2 * math.log(2), abs=1e-6)
        assert gen.item() == pytest.approx(math.log(2), abs=1e-6)

    def test_generator_optimum(self):
        _, gen = loss_gan_pair(torch.full((3, 3), 1.0), torch.full((3, 3), 0.5))
        assert gen.item() < 2e-6
        _, gen64 = loss_gan_pair(torch.full((3, 3), 1.0, dtype=torch.float64),
                                 torch.full((3, 3), 0.5, dtype=torch.float64))
        assert gen64.item() == pytest.approx(-math.log(1 - 1e-6), abs=1e-12)

    def test_matches_naive_loop(self):
        g = torch.Generator().manual_seed(5)
        d_fake = torch.rand(4, 5, generator=g, dtype=torch.float64)
        d_real = torch.rand(4, 5, generator=g, dtype=torch.float64)
        disc, gen = loss_gan_pair(d_fake, d_real)
        nd = ng = 0.0
        for pf, pr in zip(d_fake.reshape(-1).tolist(), d_real.reshape(-1).tolist()):
            nd -= (math.log(pr) + math.log(1 - pf)) / d_fake.numel()
            ng -= math.log(pf) / d_fake.numel()
        assert disc.item() == pytest.approx(nd, abs=1e-10)
        assert gen.item() == pytest.approx(ng, abs=1e-10)

    def test_extreme_probabilities_clipped(self):
        disc, gen = loss_gan_pair(torch.zeros(2, 2), torch.ones(2, 2))
        assert torch.isfinite(disc) and torch.isfinite(gen)


class TestOmega:
    def test_unit_when_norm_equals_C(self):
        z_h = torch.tensor([3.0, 4.0])
        assert omega_weight(z_h, torch.zeros(2), 5.0) == pytest.approx(1.0)

    def test_linear_in_C(self):
        z_h, f = rand((4,), 6), rand((4,), 7)
        assert omega_weight(z_h, f, 2.0) == pytest.approx(
            2 * omega_weight(z_h, f, 1.0))

    def test_worked_example(self):
        out = omega_weight(torch.tensor([3.0, 4.0]), torch.zeros(2), 1.0)
        assert out == pytest.approx(0.2)

    def test_zero_denominator_guarded(self):
        z = torch.zeros(3)
        assert omega_weight(z, z, 1.0) == pytest.approx(1.0 / 1e-8)

    def test_rejects_nonpositive_C(self):
        with pytest.raises(ValueError):
            omega_weight(torch.ones(2), torch.zeros(2), 0.0)

    def test_returns_plain_float(self):
        f = rand((3,), 8).requires_grad_(True)
        out = omega_weight(torch.zeros(3), f, 1.0)
        assert isinstance(out, float)


class TestVsd:
    def test_equal_scores_zero_loss_and_grad(self):
        e = rand((2, 3), 9)
        z_g = rand((2, 3), 10).requires_grad_(True)
        loss = vsd_generator_loss(e, e.clone(), z_g, 1.0)
        assert loss.item() == 0.0
        (g,) = torch.autograd.grad(loss, z_g)
        assert torch.all(g == 0)

    def test_gradient_is_score_difference(self):
        e_phi, e_psi = rand((2, 3), 11), rand((2, 3), 12)
        z_g = rand((2, 3), 13).requires_grad_(True)
        loss = vsd_generator_loss(e_phi, e_psi, z_g, 1.0)
        (g,) = torch.autograd.grad(loss, z_g)
        assert torch.allclose(g, (e_phi - e_psi) / z_g.shape[0])

    def test_omega_scales_gradient(self):
        e_phi, e_psi = rand((2, 3), 14), rand((2, 3), 15)
        z_g = rand((2, 3), 16).requires_grad_(True)
        g1 = torch.autograd.grad(
            vsd_generator_loss(e_phi, e_psi, z_g, 1.0), z_g)[0]
        g3 = torch.autograd.grad(
            vsd_generator_loss(e_phi, e_psi, z_g, 3.0), z_g)[0]
        assert torch.allclose(g3, 3.0 * g1)


class TestSidL1:
    def test_zero_iff_equal(self):
        f = rand((2, 5), 17)
        assert sid_l1(f, f).item() == 0.0

    def test_sum_convention(self):
        f_phi = torch.tensor([[1.0, 1.0]])
        assert sid_l1(f_phi, torch.zeros(1, 2)).item() == pytest.approx(2.0)

    def test_matches_naive_oracle(self):
        a, b = rand((3, 4), 18), rand((3, 4), 19)
        naive = sum((x - y) ** 2 for x, y in
                    zip(a.reshape(-1).tolist(), b.reshape(-1).tolist())) / 3
        assert sid_l1(a, b).item() == pytest.approx(naive, abs=1e-10)


class TestCidScoreLosses:
    def test_perfect_prediction_zero(self):
        z = rand((2, 4), 20)
        assert cid_fake_score_loss(z, z.clone()).item() == 0.0
        assert cid_real_score_loss(z, z.clone()).item() == 0.0

    def test_fake_loss_detaches_target(self):
        z_g = rand((2, 4), 21).requires_grad_(True)
        pred = rand((2, 4), 22).requires_grad_(True)
        loss = cid_fake_score_loss(pred, z_g)
        g_pred, g_zg = torch.autograd.grad(loss, [pred, z_g], allow_unused=True)
        assert g_pred is not None
        assert g_zg is None

    def test_matches_naive_oracle(self):
        a, b = rand((2, 3), 23), rand((2, 3), 24)
        naive = sum((x - y) ** 2 for x, y in
                    zip(a.reshape(-1).tolist(), b.reshape(-1).tolist())) / a.numel()
        assert cid_real_score_loss(a, b).item() == pytest.approx(naive, abs=1e-12)


class TestCidGenerator:
    def test_equal_scores_vanish(self):
        f = rand((2, 4), 25)
        z_h = rand((2, 4), 26)
        assert cid_generator_loss(f, f.clone(), z_h, 0.9, 1.2).item() == 0.0

    def test_xi_zero_reduces_to_inner_product_term(self):
        f_phi, f_psi, z_h = rand((2, 4), 27), rand((2, 4), 28), rand((2, 4), 29)
        out = cid_generator_loss(f_phi, f_psi, z_h, 0.7, 0.0)
        expect = 0.7 * batch_inner(f_phi - f_psi, f_phi - z_h)
        assert out.item() == pytest.approx(expect.item(), abs=1e-12)

    def test_factored_equals_expanded_form(self):
        for seed in range(1000):
            f_phi = rand((2, 3), 3 * seed)
            f_psi = rand((2, 3), 3 * seed + 1)
            z_h = rand((2, 3), 3 * seed + 2)
            omega, xi = 0.8, 1.2
            factored = cid_generator_loss(f_phi, f_psi, z_h, omega, xi)
            d = f_phi - f_psi
            expanded = omega * batch_inner(d, (1 - xi) * f_phi - z_h + xi * f_psi)
            assert abs(factored.item() - expanded.item()) < 1e-10

    def test_sid_generator_ablation_arm(self):
        f_phi, f_psi, z_g = rand((2, 3), 30), rand((2, 3), 31), rand((2, 3), 32)
        out = sid_generator_loss(f_phi, f_psi, z_g, 0.5)
        expect = 0.5 * batch_inner(f_phi - f_psi, f_phi - z_g)
        assert out.item() == pytest.approx(expect.item(), abs=1e-12)


class TestAdvAndTotal:
    def test_half_map_gives_ln2(self):
        disc = seeded(lambda: DiscHead(3, conv=False), 0)
        with torch.no_grad():
            for p in disc.parameters():
                p.zero_()
        feats = torch.randn(4, 3, generator=torch.Generator().manual_seed(33))
        out = adv_generator_loss(disc, feats)
        assert out.item() == pytest.approx(math.log(2), abs=1e-6)

    def test_confident_real_gives_zero(self):
        disc = seeded(lambda: DiscHead(3, conv=False), 1)
        with torch.no_grad():
            disc.h2.bias.fill_(50.0)  # sigmoid saturates toward 1
        feats = torch.randn(4, 3, generator=torch.Generator().manual_seed(34))
        assert adv_generator_loss(disc, feats).item() < 1e-5

    def test_cida_total_weighted_sum(self):
        w = LossWeights()
        one = torch.tensor(1.0)
        out = cida_total(one, one, one, w)
        assert out.item() == pytest.approx(10.11)
        zero_w = LossWeights(lambda1=0.0, lambda2=0.0, lambda3=0.0)
        assert cida_total(one, one, one, zero_w).item() == 0.0

    def test_cida_total_linear_in_components(self):
        w = LossWeights()
        base = cida_total(torch.tensor(1.0), torch.tensor(0.0),
                          torch.tensor(0.0), w)
        double = cida_total(torch.tensor(2.0), torch.tensor(0.0),
                            torch.tensor(0.0), w)
        assert double.item() == pytest.approx(2 * base.item())

    def test_cida_total_rejects_nonfinite(self):
        w = LossWeights()
        with pytest.raises(ValueError):
            cida_total(torch.tensor(float("nan")), torch.tensor(0.0),
                       torch.tensor(0.0), w)


class TestStage1:
    def test_equal_inputs_zero(self):
        z = rand((2, 3, 4, 4), 35)
        assert stage1_loss(z, z.clone()).item() == 0.0

    def test_zero_percep_equals_mse(self):
        a, b = rand((2, 3, 4, 4), 36), rand((2, 3, 4, 4), 37)
        assert stage1_loss(a, b, percep_weight=0.0).item() == pytest.approx(
            loss_mse(a, b).item())

    def test_sum_of_component_oracles(self):
        a, b = rand((2, 3, 4, 4), 38), rand((2, 3, 4, 4), 39)
        expect = loss_mse(a, b) + 0.5 * edge_l1(a, b)
        assert stage1_loss(a, b, 0.5).item() == pytest.approx(expect.item(),
                                                              abs=1e-12)

    def test_2d_track_edge_term(self):
        a, b = rand((4, 2), 40), rand((4, 2), 41)
        out = stage1_loss(a, b, 1.0)
        da = a[:, 1:] - a[:, :-1]
        db = b[:, 1:] - b[:, :-1]
        expect = loss_mse(a, b) + (da - db).abs().mean()
        assert out.item() == pytest.approx(expect.item(), abs=1e-12)


class TestLossWeights:
    def test_two_phase_schedule(self):
        w = LossWeights()
        assert w.at_progress(0.0).lambda1 == 10.0
        assert w.at_progress(0.19).lambda1 == 10.0
        assert w.at_progress(0.2).lambda1 == 1.0
        assert w.at_progress(0.99).lambda1 == 1.0

    def test_paper_defaults(self):
        w = LossWeights()
        assert (w.lambda1_hi, w.lambda1_lo) == (10.0, 1.0)
        assert (w.lambda2, w.lambda3) == (0.01, 0.1)
        assert w.xi == 1.2
        assert w.kappa == 7.5

    def test_rejects_nonfinite(self):
        with pytest.raises(ValueError):
            LossWeights(xi=float("inf"))
