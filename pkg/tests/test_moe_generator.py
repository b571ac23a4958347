import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from conftest import central_fd, mini_config, rel_error
from drc import moe_generator
from drc.latent_prior import LatentLayout
from drc.moe_generator import (GeneratorNet, MixtureModel, compose, expected_complete_loglik, gating,
                               identity_grid, region_loglik, resample, responsibilities)


def mixture(seed=0, reassign=True, image_size=8):
    torch.manual_seed(seed)
    layout = LatentLayout(4, 4, 4)
    channels = [4] * int(math.log2(image_size // 4))
    return MixtureModel(layout, image_size, 4, channels, reassign=reassign).double()


class TestResample:
    @pytest.mark.parametrize("h,w", [(1, 1), (1, 2), (5, 7), (8, 8), (64, 64)])
    def test_identity_grid_is_exact(self, h, w):
        img = torch.randn(2, 3, h, w)
        out = resample(img, identity_grid(2, h, w, dtype=img.dtype))
        assert torch.equal(out, img)

    def test_center_grid_on_odd_image(self):
        img = torch.randn(1, 2, 5, 7)
        out = resample(img, torch.zeros(1, 5, 7, 2))
        assert torch.equal(out, img[:, :, 2:3, 3:4].expand_as(out))

    def test_half_pixel_shift(self):
        img = torch.tensor([[[[0.0, 1.0]]]])
        grid = torch.zeros(1, 1, 2, 2)  # both outputs sample x = 0, the midpoint of the span
        assert resample(img, grid)[0, 0, 0, 0].item() == 0.5

    def test_matches_manual_bilinear(self):
        g = torch.Generator().manual_seed(3)
        img = torch.randn(1, 1, 4, 5, generator=g)
        grid = torch.rand(1, 4, 5, 2, generator=g) * 2.4 - 1.2
        out = resample(img, grid)
        a = img[0, 0].numpy()
        for i in range(4):
            for j in range(5):
                x = np.clip((grid[0, i, j, 0].item() + 1) / 2 * 4, 0, 4)
                y = np.clip((grid[0, i, j, 1].item() + 1) / 2 * 3, 0, 3)
                x0, y0 = int(np.floor(x)), int(np.floor(y))
                x1, y1 = min(x0 + 1, 4), min(y0 + 1, 3)
                fx, fy = x - x0, y - y0
                v = ((1 - fy) * ((1 - fx) * a[y0, x0] + fx * a[y0, x1])
                     + fy * ((1 - fx) * a[y1, x0] + fx * a[y1, x1]))
                assert out[0, 0, i, j].item() == pytest.approx(v, abs=1e-12)

    def test_border_clamp(self):
        img = torch.arange(6.0).reshape(1, 1, 2, 3)
        grid = torch.full((1, 2, 3, 2), 5.0)
        assert torch.equal(resample(img, grid), torch.full((1, 1, 2, 3), 5.0))

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2**31 - 1), st.floats(-3, 3), st.floats(-3, 3))
    def test_linear_in_image(self, seed, a, b):
        g = torch.Generator().manual_seed(seed)
        x, y = torch.randn(2, 3, 6, 5, generator=g), torch.randn(2, 3, 6, 5, generator=g)
        grid = torch.rand(2, 6, 5, 2, generator=g) * 2.2 - 1.1
        lhs = resample(a * x + b * y, grid)
        rhs = a * resample(x, grid) + b * resample(y, grid)
        assert (lhs - rhs).abs().max() < 1e-9

    def test_grid_gradient(self):
        g = torch.Generator().manual_seed(5)
        img = torch.randn(1, 2, 4, 4, generator=g)
        grid = (torch.rand(1, 4, 4, 2, generator=g) * 1.6 - 0.8).requires_grad_(True)
        (ga,) = torch.autograd.grad(resample(img, grid).square().sum(), grid)
        gd = grid.detach().clone()
        fd = central_fd(lambda: resample(img, gd).square().sum(), [gd])[0]
        assert rel_error(ga, fd) < 1e-6


class TestGatingAndLikelihood:
    def test_gating_values(self):
        pf, pb = gating(torch.zeros(1, 1, 2, 2), torch.zeros(1, 1, 2, 2))
        assert torch.equal(pf, torch.full_like(pf, 0.5))
        pf, pb = gating(torch.full((1, 1, 1, 1), math.log(3)), torch.zeros(1, 1, 1, 1))
        assert pf.item() == pytest.approx(0.75, abs=1e-15) and pb.item() == pytest.approx(0.25, abs=1e-15)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2**31 - 1), st.floats(-100, 100))
    def test_gating_properties(self, seed, c):
        g = torch.Generator().manual_seed(seed)
        lf, lb = torch.randn(2, 1, 4, 4, generator=g) * 5, torch.randn(2, 1, 4, 4, generator=g) * 5
        pf, pb = gating(lf, lb)
        assert ((pf + pb - 1).abs() < 1e-6).all()
        assert ((pf > 0) & (pf < 1)).all()
        pf2, pb2 = gating(lf + c, lb + c)
        assert (pf2 - pf).abs().max() < 1e-9

    def test_region_loglik(self):
        x = torch.randn(1, 3, 2, 2)
        assert torch.equal(region_loglik(x, x), torch.zeros(1, 1, 2, 2))
        one = torch.tensor([[[[0.18]]]])
        assert region_loglik(one, torch.zeros(1, 1, 1, 1), 0.3, "l1").item() == pytest.approx(-1.0, abs=1e-12)
        three = torch.tensor([[[[0.3]]]])
        assert region_loglik(three, torch.zeros(1, 1, 1, 1), 0.3, "l2").item() == pytest.approx(-0.5, abs=1e-12)

    def test_region_loglik_sums_channels(self):
        r = torch.tensor([0.1, -0.2, 0.3]).reshape(1, 3, 1, 1)
        assert region_loglik(r, torch.zeros_like(r)).item() == pytest.approx(-0.6 / 0.18, abs=1e-12)


class TestResponsibilities:
    def test_equal_likelihoods(self):
        ll = torch.full((1, 1, 1, 1), -2.0)
        gam = responsibilities(torch.full_like(ll, 0.8), torch.full_like(ll, 0.2), ll, ll)
        assert abs(gam.item() - 0.8) < 1e-6

    def test_half_half(self):
        pf = torch.full((1, 1, 1, 1), 0.5)
        gam = responsibilities(pf, pf, torch.log(torch.full_like(pf, 0.9)), torch.log(torch.full_like(pf, 0.1)))
        assert gam.item() == pytest.approx(0.9, abs=1e-7)

    def test_bayes_rule_oracle(self):
        g = torch.Generator().manual_seed(0)
        pf = torch.rand(1000, generator=g)
        llf, llb = -torch.rand(1000, generator=g) * 20, -torch.rand(1000, generator=g) * 20
        gam = responsibilities(pf, 1 - pf, llf, llb, epsilon=0)
        # direct two-component Bayes rule, elementwise in Python floats
        ref = [a * math.exp(f) / (a * math.exp(f) + (1 - a) * math.exp(b))
               for a, f, b in zip(pf.tolist(), llf.tolist(), llb.tolist())]
        assert max(abs(u - v) for u, v in zip(gam.tolist(), ref)) < 1e-9

    def test_stable_for_very_negative_loglik(self):
        pf = torch.full((3,), 0.3)
        gam = responsibilities(pf, 1 - pf, torch.tensor([-2000.0, -1e4, -5.0]), torch.tensor([-2001.0, -1e4, -5.0]),
                               epsilon=0)
        assert torch.isfinite(gam).all()
        assert gam[1].item() == pytest.approx(0.3)

    def test_stop_gradient(self):
        pf = torch.full((4,), 0.4, requires_grad=True)
        gam = responsibilities(pf, 1 - pf, torch.zeros(4), torch.zeros(4))
        assert not gam.requires_grad

    def test_in_unit_interval(self):
        g = torch.Generator().manual_seed(1)
        pf = torch.rand(500, generator=g)
        gam = responsibilities(pf, 1 - pf, torch.randn(500, generator=g) * 30, torch.randn(500, generator=g) * 30)
        assert ((gam >= 0) & (gam <= 1)).all()


class TestCompose:
    def test_cases(self):
        g = torch.Generator().manual_seed(2)
        fg, bg = torch.randn(1, 3, 4, 4, generator=g), torch.randn(1, 3, 4, 4, generator=g)
        one, zero = torch.ones(1, 1, 4, 4), torch.zeros(1, 1, 4, 4)
        assert torch.equal(compose(fg, bg, one, zero), fg)
        assert torch.equal(compose(fg, bg, zero, one), bg)
        pf = torch.rand(1, 1, 4, 4, generator=g)
        assert torch.allclose(compose(fg, fg, pf, 1 - pf), fg, atol=1e-15)


class TestGenerators:
    def test_foreground_deterministic(self):
        z = torch.randn(3, 4, generator=torch.Generator().manual_seed(0))
        a = mixture(seed=1).generate_foreground(z)
        b = mixture(seed=1).generate_foreground(z)
        assert all(torch.equal(u, v) for u, v in zip(a, b))

    def test_zero_final_conv_gives_constant_tanh_bias(self):
        m = mixture()
        with torch.no_grad():
            m.fg_net.out.weight.zero_()
            m.fg_net.out.bias.copy_(torch.tensor([0.5, -1.0, 2.0, 0.3]))
        rgb, logit = m.generate_foreground(torch.randn(2, 4))
        expected = torch.tanh(torch.tensor([0.5, -1.0, 2.0])).reshape(1, 3, 1, 1)
        assert torch.equal(rgb, expected.expand_as(rgb))
        assert torch.equal(logit, torch.full_like(logit, 0.3))

    @pytest.mark.parametrize("size", [32, 64, 128])
    def test_output_shapes(self, size):
        n = int(math.log2(size // 4))
        net = GeneratorNet(8, 4, size, 8, [4] * n)
        out, feat = net(torch.randn(2, 8))
        assert out.shape == (2, 4, size, size)
        assert feat.shape[-1] == size // 2

    def test_block_structure(self):
        net = GeneratorNet(8, 4, 32, 16, [8, 8, 8])
        block = net.blocks[0]
        assert isinstance(block[0], torch.nn.Upsample)
        assert isinstance(block[2], torch.nn.InstanceNorm2d)
        assert block[3].negative_slope == 0.01

    def test_experts_share_no_parameters(self):
        m = mixture()
        fg_ids = {id(p) for p in m.fg_net.parameters()}
        assert not fg_ids & {id(p) for p in m.bg_net.parameters()}
        assert not fg_ids & {id(p) for p in m.pix_net.parameters()}

    def test_identity_grid_keeps_background(self, monkeypatch):
        m = mixture()
        monkeypatch.setattr(m.pix_net, "forward",
                            lambda z, cond=None: (identity_grid(z.shape[0], 8, 8, dtype=z.dtype)
                                                  .permute(0, 3, 1, 2), None))
        bg, bl, grid, bg_re, bl_re = m.generate_background(torch.randn(2, 4), torch.randn(2, 4))
        assert torch.equal(bg_re, bg) and torch.equal(bl_re, bl)

    def test_single_grid_used_for_rgb_and_logit(self, monkeypatch):
        seen = []
        real = moe_generator.resample

        def spy(image, grid):
            seen.append(grid)
            return real(image, grid)

        monkeypatch.setattr(moe_generator, "resample", spy)
        m = mixture()
        _, _, grid, _, _ = m.generate_background(torch.randn(2, 4), torch.randn(2, 4))
        assert len(seen) == 2 and seen[0] is seen[1] is grid

    def test_feature_is_gradient_blocked(self):
        m = mixture()
        _, _, grid, _, _ = m.generate_background(torch.randn(2, 4), torch.randn(2, 4))
        grid.square().sum().backward()
        assert all(p.grad is None or not p.grad.any() for p in m.bg_net.parameters())
        assert any(p.grad is not None and p.grad.any() for p in m.pix_net.parameters())

    def test_disable_reassignment_uses_identity(self):
        m = mixture(reassign=False)
        out = m(torch.randn(3, 12))
        assert torch.equal(out.grid, identity_grid(3, 8, 8, dtype=out.grid.dtype))
        assert torch.equal(out.bg_rgb_reassigned, out.bg_rgb)

    def test_gating_uses_reassigned_logit(self):
        m = mixture()
        out = m(torch.randn(2, 12))
        pf, _ = gating(out.fg_logit, out.bg_logit_reassigned)
        assert torch.equal(out.pi_f, pf)


class TestMixtureForward:
    def test_invariants(self):
        m = mixture(seed=3)
        x = torch.rand(2, 3, 8, 8) * 2 - 1
        out = m(torch.randn(2, 12), x)
        assert ((out.pi_f + out.pi_b - 1).abs() < 1e-6).all()
        assert ((out.gamma_f >= 0) & (out.gamma_f <= 1)).all()
        assert torch.equal(out.composed, compose(out.fg_rgb, out.bg_rgb_reassigned, out.pi_f, out.pi_b))

    def test_deterministic(self):
        z = torch.randn(2, 12, generator=torch.Generator().manual_seed(4))
        a, b = mixture(seed=5)(z), mixture(seed=5)(z)
        assert torch.equal(a.composed, b.composed) and torch.equal(a.grid, b.grid)

    def test_expected_complete_loglik_oracle(self):
        m = mixture(seed=6)
        x = torch.rand(2, 3, 8, 8) * 2 - 1
        out = m(torch.randn(2, 12), x)
        got = expected_complete_loglik(out, out.gamma_f, 1e-8)
        g, pf, pb = out.gamma_f.numpy(), out.pi_f.detach().numpy(), out.pi_b.detach().numpy()
        llf = -np.abs(out.fg_rgb.detach().numpy() - x.numpy()).sum(1, keepdims=True) / 0.18
        llb = -np.abs(out.bg_rgb_reassigned.detach().numpy() - x.numpy()).sum(1, keepdims=True) / 0.18
        ref = g * (np.log(pf + 1e-8) + llf) + (1 - g) * (np.log(pb + 1e-8) + llb)
        assert np.abs(got.detach().numpy() - ref).max() < 1e-9
