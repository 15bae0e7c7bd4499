"""Network contracts: generator forward, LoRA no-op/merge/switch, heads."""

import copy

import pytest
import torch

from cidlab.checkpoint import module_checksum
from cidlab.diffusion import FixedStepConfig, build_schedule
from cidlab.nets import (AdaptedLinear, ConvBackbone, DiscHead, GeneratorNet,
                         LoRAAdapter, MlpBackbone, RepaHead, ScoreNet,
                         SharedScoreBase, adapter_switch, disc_forward,
                         generator_forward, lora_forward, lora_merge, seeded,
                         to_tokens)

SCHED = build_schedule(1000, 1e-4, 2e-2)


def _conv(seed=0, channels=16, width=16):
    return seeded(lambda: ConvBackbone(channels=channels, width=width), seed)


def _mlp(seed=0):
    return seeded(lambda: MlpBackbone(), seed)


def _perturb_adapter(adapter, seed=0, scale=0.05):
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in adapter.parameters():
            p.add_(torch.randn(p.shape, generator=g) * scale)


class TestGenerator:
    def test_zero_head_gives_skip_path(self):
        # the output head is zero-initialized at construction
        bb = _conv(0)
        g = torch.Generator().manual_seed(1)
        z_l = torch.randn(2, 16, 8, 8, generator=g)
        c = torch.randn(8, generator=g)
        gen_fixed = GeneratorNet(copy.deepcopy(bb), SCHED,
                                 FixedStepConfig(500, use_fixed_coeffs=True))
        z_g, _ = gen_fixed(z_l, c)
        assert torch.equal(z_g, 2.0 * z_l)
        gen_sched = GeneratorNet(bb, SCHED, FixedStepConfig(500, False))
        z_g2, _ = gen_sched(z_l, c)
        a, _b = SCHED.coeffs(500)
        assert torch.allclose(z_g2, z_l / a)

    def test_deterministic_forward(self):
        bb = _conv(2)
        with torch.no_grad():
            bb.out.weight.normal_()
        gen = GeneratorNet(bb, SCHED, FixedStepConfig(500, True))
        g = torch.Generator().manual_seed(3)
        z_l = torch.randn(2, 16, 8, 8, generator=g)
        c = torch.randn(8, generator=g)
        out1, tap1 = gen(z_l, c)
        out2, tap2 = gen(z_l, c)
        assert torch.equal(out1, out2) and torch.equal(tap1, tap2)

    def test_shape_contract(self):
        gen = GeneratorNet(_conv(4), SCHED, FixedStepConfig(500, True))
        z_l = torch.randn(2, 16, 8, 8)
        z_g, h_t = generator_forward(gen, z_l, 500, torch.randn(8))
        assert z_g.shape == z_l.shape
        assert h_t.shape == (2, 32, 4, 4)

    def test_channel_mismatch_rejected(self):
        gen = GeneratorNet(_conv(5, channels=4), SCHED, FixedStepConfig(500, True))
        with pytest.raises(ValueError):
            gen(torch.randn(1, 16, 8, 8), torch.randn(8))


class TestLoRA:
    def test_zero_init_noop_bit_exact(self):
        for builder in (_conv, _mlp):
            bb = builder(6)
            with torch.no_grad():
                bb.fc_out.weight.normal_() if hasattr(bb, "fc_out") \
                    else bb.out.weight.normal_()
            x = torch.randn(3, 16, 8, 8) if isinstance(bb, ConvBackbone) \
                else torch.randn(3, 2)
            c = torch.randn(8)
            base_out, _ = bb(x, 10, c)
            adapter = LoRAAdapter(bb, rank=2, alpha=4.0)
            adapter.bind(bb)
            adapted_out, _ = bb(x, 10, c)
            assert torch.equal(base_out, adapted_out)

    def test_scale_zero_noop(self):
        layer = seeded(lambda: AdaptedLinear(8, 8), 7)
        adapter = LoRAAdapter(torch.nn.ModuleDict({"l": layer}), rank=2,
                              alpha=0.0, targets=["l"])
        _perturb_adapter(adapter, 8)
        x = torch.randn(4, 8)
        assert torch.allclose(lora_forward(layer, adapter, "l", x), layer(x))

    def test_rank_exceeding_min_dim_rejected(self):
        bb = _mlp(9)
        with pytest.raises(ValueError):
            LoRAAdapter(bb, rank=4, targets=["fc_in"])  # fc_in is 2-wide

    def test_forward_matches_dense_merge(self):
        bb = _conv(10)
        adapter = LoRAAdapter(bb, rank=4, alpha=8.0)
        _perturb_adapter(adapter, 11)
        merged = lora_merge(bb, adapter)
        adapter.bind(bb)
        g = torch.Generator().manual_seed(12)
        worst = 0.0
        for _ in range(100):
            x = torch.randn(1, 16, 8, 8, generator=g)
            c = torch.randn(8, generator=g)
            ya, _ = bb(x, 37, c)
            ym, _ = merged(x, 37, c)
            worst = max(worst, ((ya - ym).norm() / ya.norm()).item())
        assert worst <= 1e-5

    def test_merge_of_zero_adapter_identical(self):
        bb = _mlp(13)
        adapter = LoRAAdapter(bb, rank=2, alpha=4.0)
        merged = lora_merge(bb, adapter)
        assert module_checksum(merged) == module_checksum(bb)

    def test_double_merge_differs_from_single(self):
        bb = _mlp(14)
        adapter = LoRAAdapter(bb, rank=2, alpha=4.0)
        _perturb_adapter(adapter, 15)
        once = lora_merge(bb, adapter)
        twice = lora_merge(once, adapter)
        assert module_checksum(once) != module_checksum(twice)

    def test_layerwise_forward_adds_low_rank_delta(self):
        layer = seeded(lambda: AdaptedLinear(6, 5), 16)
        holder = torch.nn.ModuleDict({"l": layer})
        adapter = LoRAAdapter(holder, rank=3, alpha=6.0, targets=["l"])
        _perturb_adapter(adapter, 17)
        a, b, scale = adapter.entry("l")
        x = torch.randn(4, 6)
        expect = layer(x) + scale * (x @ a.T @ b.T)
        assert torch.allclose(lora_forward(layer, adapter, "l", x), expect,
                              atol=1e-6)


class TestSharedScoreBase:
    def _shared(self, seed=18):
        return seeded(lambda: SharedScoreBase(_conv(seed), SCHED, rank=4), seed + 1)

    def test_switch_matches_standalone_model(self):
        shared = self._shared()
        _perturb_adapter(shared.adapter("real"), 19)
        _perturb_adapter(shared.adapter("fake"), 20)
        g = torch.Generator().manual_seed(21)
        x = torch.randn(2, 16, 8, 8, generator=g)
        c = torch.randn(8, generator=g)
        for which in ("real", "fake"):
            standalone = copy.deepcopy(shared.base)
            LoRAAdapter.unbind(standalone)
            shared.adapter(which).bind(standalone)
            want, _ = standalone(x, 11, c)
            adapter_switch(shared, which)
            got, _ = shared.base(x, 11, c)
            assert torch.equal(got, want)

    def test_switch_idempotent(self):
        shared = self._shared(22)
        _perturb_adapter(shared.adapter("real"), 23)
        x = torch.randn(1, 16, 8, 8)
        c = torch.randn(8)
        adapter_switch(shared, "real")
        y1, _ = shared.base(x, 5, c)
        adapter_switch(shared, "real")
        y2, _ = shared.base(x, 5, c)
        assert torch.equal(y1, y2)

    def test_interleaved_switching_reproduces_both(self):
        shared = self._shared(24)
        _perturb_adapter(shared.adapter("real"), 25)
        _perturb_adapter(shared.adapter("fake"), 26)
        x = torch.randn(1, 16, 8, 8)
        c = torch.randn(8)
        ref = {}
        for which in ("real", "fake"):
            adapter_switch(shared, which)
            ref[which], _ = shared.base(x, 9, c)
        for which in ("fake", "real", "fake"):
            adapter_switch(shared, which)
            out, _ = shared.base(x, 9, c)
            assert torch.equal(out, ref[which])

    def test_unknown_adapter_rejected(self):
        with pytest.raises(KeyError):
            adapter_switch(self._shared(27), "imaginary")

    def test_updating_fake_leaves_real_and_base(self):
        shared = self._shared(28)
        base_sum = module_checksum(shared.base)
        real_sum = module_checksum(shared.adapter("real"))
        _perturb_adapter(shared.adapter("fake"), 29)
        assert module_checksum(shared.base) == base_sum
        assert module_checksum(shared.adapter("real")) == real_sum

    def test_base_frozen(self):
        shared = self._shared(30)
        assert all(not p.requires_grad for p in shared.base.parameters())
        assert all(p.requires_grad for p in shared.adapter("fake").parameters())


class TestHeads:
    def test_disc_zero_weights_give_half(self):
        d = seeded(lambda: DiscHead(8, conv=True), 31)
        with torch.no_grad():
            for p in d.parameters():
                p.zero_()
        probs = disc_forward(d, torch.randn(2, 8, 2, 2))
        assert torch.allclose(probs, torch.full_like(probs, 0.5))

    def test_disc_outputs_bounded(self):
        d = seeded(lambda: DiscHead(8, conv=True), 32)
        probs = disc_forward(d, torch.randn(4, 8, 2, 2) * 10)
        assert torch.all(probs > 0) and torch.all(probs < 1)

    def test_disc_seeded_reproducibility(self):
        d1 = seeded(lambda: DiscHead(8, conv=True), 33)
        d2 = seeded(lambda: DiscHead(8, conv=True), 33)
        assert module_checksum(d1) == module_checksum(d2)

    def test_disc_rejects_wrong_feature_shape(self):
        d = seeded(lambda: DiscHead(8, conv=True), 34)
        with pytest.raises(ValueError):
            disc_forward(d, torch.randn(2, 4, 2, 2))

    def test_repa_head_projects_to_ref_dim(self):
        head = seeded(lambda: RepaHead(32, 17), 35)
        out = head(torch.randn(2, 32, 4, 4))
        assert out.shape == (2, 16, 17)
        out2 = head(torch.randn(3, 32))
        assert out2.shape == (3, 1, 17)

    def test_repa_head_rejects_wrong_tap_dim(self):
        head = seeded(lambda: RepaHead(32, 8), 36)
        with pytest.raises(ValueError):
            head(torch.randn(2, 16, 4, 4))

    def test_to_tokens_shapes(self):
        assert to_tokens(torch.randn(2, 5, 3, 3)).shape == (2, 9, 5)
        assert to_tokens(torch.randn(2, 5)).shape == (2, 1, 5)


class TestScoreNet:
    def test_x0_prediction_consistent_with_eps(self):
        net = ScoreNet(_conv(37), SCHED)
        with torch.no_grad():
            net.net.out.weight.normal_()
        g = torch.Generator().manual_seed(38)
        z_t = torch.randn(2, 16, 8, 8, generator=g)
        c = torch.randn(8, generator=g)
        eps_hat, _ = net.predict_eps(z_t, 44, c)
        a, b = SCHED.coeffs(44)
        assert torch.allclose(net(z_t, 44, c), (z_t - b * eps_hat) / a,
                              atol=1e-5)

    def test_features_are_deep_tap(self):
        net = ScoreNet(_conv(39), SCHED)
        feats = net.features(torch.randn(2, 16, 8, 8), 10, torch.randn(8))
        assert feats.shape == (2, 64, 2, 2)
