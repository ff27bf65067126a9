import math

import pytest
import torch

from dynview.losses import (LossWeights, loss_depth_consistency, loss_dynamic, loss_entropy,
                            loss_flow_cycle, loss_flow_slow, loss_full, loss_mask, loss_patch,
                            loss_static, total_loss)

D = torch.float64


def t(x):
    return torch.tensor(x, dtype=D)


class TestPhotometric:
    def test_static_hand_value(self):
        assert float(loss_static(t([[0.6, 0.5, 0.5]]), t([[0.5, 0.5, 0.5]]), t([0.0]))) == pytest.approx(0.01)

    def test_static_fully_masked_is_zero(self):
        g = torch.Generator().manual_seed(0)
        a, b = torch.rand(5, 3, generator=g, dtype=D), torch.rand(5, 3, generator=g, dtype=D)
        assert float(loss_static(a, b, torch.ones(5, dtype=D))) == 0.0

    def test_dynamic_hand_value_and_boundary(self):
        gt = t([[0.5, 0.5, 0.5]])
        colors = {-1: gt.clone(), 0: t([[0.7, 0.5, 0.5]]), 1: gt.clone()}
        assert float(loss_dynamic(colors, gt)) == pytest.approx(0.04)
        assert float(loss_dynamic({0: gt + 0.1, 1: gt + 0.1}, gt)) == pytest.approx(2 * 0.03)

    def test_full_identical_is_zero(self):
        x = t([[0.1, 0.2, 0.3]])
        assert float(loss_full(x, x)) == 0.0


class TestFlowRegularizers:
    def test_slow_hand_value(self):
        assert float(loss_flow_slow(t([[0.1, -0.2, 0.0]]), t([[0.0, 0.0, 0.0]]))) == pytest.approx(0.3)

    def test_slow_homogeneous(self):
        f = t([[0.1, -0.2, 0.3], [0.0, 0.5, -0.1]])
        assert float(loss_flow_slow(2 * f, 2 * f)) == pytest.approx(2 * float(loss_flow_slow(f, f)))

    def test_slow_missing_direction(self):
        assert float(loss_flow_slow(t([[0.1, 0, 0]]), None)) == pytest.approx(0.1)

    def test_cycle_hand_value(self):
        z = t([[0.0, 0.0, 0.0]])
        v = loss_flow_cycle(t([[1.0, 0, 0]]), t([[-1.0, 0, 0.1]]), z, z)
        assert float(v) == pytest.approx(0.1)

    def test_cycle_perfect_and_symmetric(self):
        a, b = t([[0.3, 0.1, -0.2]]), t([[0.05, -0.4, 0.0]])
        assert float(loss_flow_cycle(a, -a, b, -b)) == pytest.approx(0.0)
        c, e = t([[0.1, 0.0, 0.0]]), t([[0.0, 0.2, 0.0]])
        assert float(loss_flow_cycle(a, c, b, e)) == pytest.approx(float(loss_flow_cycle(b, e, a, c)))

    def test_cycle_gradient_finite_at_zero(self):
        f = torch.zeros(2, 3, dtype=D, requires_grad=True)
        loss_flow_cycle(f, -f, None, None).backward()
        assert bool(torch.isfinite(f.grad).all())


class TestEntropy:
    def test_one_hot(self):
        assert float(loss_entropy(t([[0.0, 1.0, 0.0]]))) == pytest.approx(0.0, abs=1e-7)

    def test_uniform(self):
        K = 8
        assert float(loss_entropy(torch.full((1, K), 1.0 / K, dtype=D))) == pytest.approx(math.log(K), abs=1e-6)

    def test_half_half(self):
        assert float(loss_entropy(t([[0.5, 0.5, 0.0, 0.0]]))) == pytest.approx(math.log(2), abs=1e-6)

    def test_low_mass_ray_ignored(self):
        assert float(loss_entropy(t([[0.04, 0.04, 0.0]]))) == 0.0


class TestMask:
    def test_hand_bce(self):
        assert float(loss_mask(t([0.9]), t([1.0]))) == pytest.approx(-math.log(0.9))

    def test_half(self):
        assert float(loss_mask(t([0.5, 0.5]), t([0.0, 1.0]))) == pytest.approx(math.log(2))

    def test_match(self):
        assert float(loss_mask(t([1.0, 0.0]), t([1.0, 0.0]))) == pytest.approx(0.0, abs=1e-6)


def test_depth_consistency_static_pixels_only():
    v = loss_depth_consistency(t([2.0, 5.0]), t([1.5, 1.0]), t([0.0, 1.0]))
    assert float(v) == pytest.approx(0.25)


class TestPatch:
    def test_identical_is_zero(self):
        x = torch.rand(4, 4, 3, dtype=D)
        assert float(loss_patch(x, x, torch.ones(4, 4, dtype=D))) == 0.0

    def test_normalized_by_valid_elements(self):
        a = torch.zeros(2, 2, 3, dtype=D)
        b = torch.full((2, 2, 3), 0.3, dtype=D)
        m = t([[1.0, 0.0], [0.0, 0.0]])
        assert float(loss_patch(a, b, m)) == pytest.approx(0.3)

    def test_empty_mask_is_zero(self):
        a = torch.rand(2, 2, 3, dtype=D)
        assert float(loss_patch(a, a + 1, torch.zeros(2, 2, dtype=D))) == 0.0


class TestTotal:
    def test_weighted_sum(self):
        w = LossWeights()
        total, rep = total_loss({"static": t(2.0), "slow": t(3.0)}, w)
        assert float(total) == pytest.approx(2.0 + 0.03)
        assert rep.terms == {"static": 2.0, "slow": 3.0}

    def test_unknown_term(self):
        with pytest.raises(KeyError):
            total_loss({"bogus": t(1.0)}, LossWeights())

    def test_weights_validated(self):
        with pytest.raises(ValueError):
            LossWeights(patch=-1.0)
        with pytest.raises(ValueError):
            LossWeights(static=float("inf"))

    def test_report_line(self):
        _, rep = total_loss({"static": t(0.5)}, LossWeights())
        assert rep.line(10) == "iter=10 static=0.5 total=0.5"


class TestSurface:
    @staticmethod
    def _setup(flow_mode="rigid", growth=0.0):
        from dynview.geometry import image_rays
        from dynview.renderer import sample_along_rays
        from dynview.synthscene import OracleDynamicField, SceneConfig, SyntheticScene, TrajectoryConfig
        scene = SyntheticScene(SceneConfig(growth=growth, mover_size=0.12 if growth else 0.18))
        traj = TrajectoryConfig(width=24, height=24, focal=30.0)
        t, dt = traj.times()[4], 1 / 11
        rays = image_rays(traj.camera(), traj.poses()[4], 1.2, 3.6, torch.float64)
        return OracleDynamicField(scene, dt, flow_mode), rays, sample_along_rays(rays, 64), t, dt

    def test_no_gated_rays_gives_zero(self):
        from dynview.losses import loss_surface
        field, rays, smp, t, dt = self._setup()
        assert float(loss_surface(field, rays, smp, t, dt, 1, gate=2.0)) == 0.0

    def test_triple_reuse_matches_direct(self):
        from dynview.losses import loss_surface
        from dynview.renderer import render_dynamic_triple
        field, rays, smp, t, dt = self._setup()
        tri = render_dynamic_triple(field, rays, smp, t, dt)
        for k in (1, -1):
            a = loss_surface(field, rays, smp, t, dt, k)
            b = loss_surface(field, rays, smp, t, dt, k, tri)
            assert float(a) == pytest.approx(float(b), abs=1e-12)

    def test_direction_validated(self):
        from dynview.losses import surface_terms
        field, rays, smp, t, dt = self._setup()
        with pytest.raises(ValueError):
            surface_terms(field, rays, smp, t, dt, 2)
