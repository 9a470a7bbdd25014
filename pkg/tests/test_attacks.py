import numpy as np
import pytest

from sfattack.attacks import (
    AttackConfig,
    TargetMask,
    attack_loss,
    check_feasibility,
    fgsm_sf,
    make_target_mask,
    pgd_sf,
    random_attack,
)
from sfattack.estimators import Estimator, OTConfig, OTEstimator
from sfattack.scene import FlowField, PointCloud, ScenePair, ValidationError
from sfattack.synth import MotionSpec, make_pair
from sfattack import autodiff as ad


class NegativeFlowEstimator(Estimator):
    """Predicts flow = -pos1: loss gradients are analytic in closed form."""

    tag = "negflow"

    def flow_tensor(self, pos1, col1, pair):
        return ad.smul(pos1, -1.0)


class ZeroFlowEstimator(Estimator):
    tag = "zeroflow"

    def flow_tensor(self, pos1, col1, pair):
        return ad.smul(pos1, 0.0)


def simple_pair(n=6, seed=0, color=True, flow_scale=0.1):
    rng = np.random.default_rng(seed)
    pos = rng.uniform(-1, 1, size=(n, 3))
    col = rng.uniform(0.2, 0.8, size=(n, 3)) if color else None
    gt = FlowField(rng.normal(0, flow_scale, size=(n, 3)))
    return ScenePair(PointCloud(pos, col), PointCloud(pos + gt.vectors, col), gt, "t")


class TestTargetMask:
    @pytest.mark.parametrize("spec,domain,axes", [
        ("all-dims", "positions", {0, 1, 2}),
        ("dim=0", "positions", {0}),
        ("dim=1,2", "positions", {1, 2}),
        ("all-channels", "colors", {0, 1, 2}),
        ("channel=2", "colors", {2}),
    ])
    def test_parse(self, spec, domain, axes):
        mask = make_target_mask(spec)
        assert (mask.domain, set(mask.axes)) == (domain, axes)
        assert mask.spec_string() == spec

    @pytest.mark.parametrize("spec", ["", "dims", "dim=3", "dim=", "channel=x",
                                      "dim=0;1", "color=1"])
    def test_parse_rejects(self, spec):
        with pytest.raises(ValidationError):
            make_target_mask(spec)

    def test_axis_row(self):
        assert np.array_equal(TargetMask("positions", frozenset({0, 2})).axis_row(),
                              [1.0, 0.0, 1.0])

    def test_color_mask_needs_colors(self):
        pair = simple_pair(color=False)
        cfg = AttackConfig(eps=0.1, mask=TargetMask("colors"))
        with pytest.raises(ValidationError):
            fgsm_sf(pair, ZeroFlowEstimator(), cfg)


class TestAttackConfig:
    def test_auto_alpha(self):
        assert AttackConfig(eps=0.1, iters=10).resolved_alpha() == pytest.approx(0.025)
        assert AttackConfig(eps=2.0, iters=10).resolved_alpha() == pytest.approx(0.5)

    def test_explicit_alpha(self):
        assert AttackConfig(eps=0.1, iters=4, alpha=0.01).resolved_alpha() == 0.01

    def test_validation(self):
        with pytest.raises(ValidationError):
            AttackConfig(eps=0.0)
        with pytest.raises(ValidationError):
            AttackConfig(eps=0.1, iters=0)
        with pytest.raises(ValidationError):
            AttackConfig(eps=0.1, alpha=-1.0)
        with pytest.raises(ValidationError):
            AttackConfig(eps=0.1, random_mode="gaussian")


class TestAttackLoss:
    def test_zero_estimator_loss_is_gt_magnitude(self):
        pair = simple_pair()
        loss = attack_loss(pair, ZeroFlowEstimator())
        expect = np.linalg.norm(pair.gt_flow.vectors, axis=1).mean()
        assert float(loss.data) == pytest.approx(expect, abs=1e-15)

    def test_requires_gt(self):
        pair = simple_pair()
        stripped = ScenePair(pair.pc1, pair.pc2, None, "x")
        with pytest.raises(ValidationError):
            attack_loss(stripped, ZeroFlowEstimator())


class TestFgsm:
    def test_analytic_direction(self):
        # est(-pos1) vs gt=0: loss = mean ||pos1||, grad = pos1/(N*||pos1||);
        # sign(grad) = sign(pos1), so delta = eps * sign(pos1)
        rng = np.random.default_rng(1)
        pos = rng.uniform(0.2, 1.0, size=(5, 3)) * rng.choice([-1, 1], size=(5, 3))
        pair = ScenePair(PointCloud(pos), PointCloud(pos),
                         FlowField(np.zeros((5, 3))), "a")
        res = fgsm_sf(pair, NegativeFlowEstimator(), AttackConfig(eps=0.05))
        assert np.array_equal(res.adv_pc1.positions, pos + 0.05 * np.sign(pos))

    def test_sign_zero_is_zero(self):
        pos = np.array([[0.3, -0.4, 0.5]])
        pair = ScenePair(PointCloud(pos), PointCloud(pos),
                         FlowField(np.zeros((1, 3))), "z")
        # zero estimator: loss independent of pos1, grad = 0, delta = 0
        res = fgsm_sf(pair, ZeroFlowEstimator(), AttackConfig(eps=0.05))
        assert np.array_equal(res.delta, np.zeros((1, 3)))
        assert res.loss_after == res.loss_before

    def test_mask_restricts_axes(self):
        pair = simple_pair(seed=2)
        cfg = AttackConfig(eps=0.05, mask=TargetMask("positions", frozenset({1})))
        res = fgsm_sf(pair, NegativeFlowEstimator(), cfg)
        assert np.all(res.delta[:, [0, 2]] == 0.0)
        assert np.abs(res.delta[:, 1]).max() > 0.0

    def test_increases_ot_loss(self):
        pair = make_pair(32, MotionSpec(angle=0.2, translation=(0.1, 0.0, 0.0)),
                         with_color=False, seed=3)
        est = OTEstimator()
        res = fgsm_sf(pair, est, AttackConfig(eps=0.1))
        assert res.loss_after > res.loss_before

    def test_gt_flow_untouched(self):
        pair = simple_pair(seed=4)
        before = pair.gt_flow.vectors.tobytes()
        fgsm_sf(pair, NegativeFlowEstimator(), AttackConfig(eps=0.1))
        assert pair.gt_flow.vectors.tobytes() == before

    def test_color_attack_clamps(self):
        pair = simple_pair(seed=5)
        cfg = AttackConfig(eps=0.5, mask=TargetMask("colors"))
        res = fgsm_sf(pair, OTEstimator(OTConfig(reg=0.1)), cfg)
        assert res.adv_pc1.colors.min() >= 0.0
        assert res.adv_pc1.colors.max() <= 1.0
        assert np.array_equal(res.adv_pc1.positions, pair.pc1.positions)


class TestPgd:
    def test_reduces_to_fgsm(self):
        pair = make_pair(24, MotionSpec(angle=0.15, translation=(0.05, -0.1, 0.0)),
                         with_color=True, seed=6)
        est = OTEstimator()
        for mask in (TargetMask("positions"), TargetMask("colors", frozenset({0, 1}))):
            cfg = AttackConfig(eps=0.08, iters=1, alpha=0.08, mask=mask)
            a = fgsm_sf(pair, est, cfg)
            b = pgd_sf(pair, est, cfg)
            assert a.delta.tobytes() == b.delta.tobytes()
            assert a.loss_after == b.loss_after

    def test_at_least_fgsm_on_ot(self):
        pair = make_pair(32, MotionSpec(angle=0.2, translation=(0.1, 0.0, 0.0)),
                         with_color=False, seed=7)
        est = OTEstimator()
        f = fgsm_sf(pair, est, AttackConfig(eps=0.1))
        p = pgd_sf(pair, est, AttackConfig(eps=0.1, iters=5))
        assert p.loss_after >= f.loss_after - 1e-9

    def test_feasible_with_random_start(self):
        pair = simple_pair(seed=8)
        cfg = AttackConfig(eps=0.07, iters=4, random_start=True)
        res = pgd_sf(pair, NegativeFlowEstimator(), cfg, seed=3)
        assert check_feasibility(pair, cfg, res) == []
        assert res.iters_run == 4

    def test_random_start_seeded(self):
        pair = simple_pair(seed=9)
        # small alpha so the iterates keep the random start visible instead
        # of saturating every coordinate at the box corners
        cfg = AttackConfig(eps=0.05, iters=3, alpha=0.001, random_start=True)
        a = pgd_sf(pair, NegativeFlowEstimator(), cfg, seed=11)
        b = pgd_sf(pair, NegativeFlowEstimator(), cfg, seed=11)
        c = pgd_sf(pair, NegativeFlowEstimator(), cfg, seed=12)
        assert a.delta.tobytes() == b.delta.tobytes()
        assert a.delta.tobytes() != c.delta.tobytes()

    def test_color_iterates_stay_clamped(self):
        pair = simple_pair(seed=10)
        cfg = AttackConfig(eps=0.6, iters=5, mask=TargetMask("colors"))
        res = pgd_sf(pair, OTEstimator(OTConfig(reg=0.1)), cfg)
        assert check_feasibility(pair, cfg, res) == []


class TestRandomAttack:
    def test_deterministic(self):
        pair = simple_pair(seed=11)
        cfg = AttackConfig(eps=0.1)
        a = random_attack(pair, cfg, seed=5)
        b = random_attack(pair, cfg, seed=5)
        c = random_attack(pair, cfg, seed=6)
        assert a.delta.tobytes() == b.delta.tobytes()
        assert a.delta.tobytes() != c.delta.tobytes()

    def test_uniform_inside_box(self):
        pair = simple_pair(seed=12)
        cfg = AttackConfig(eps=0.1)
        res = random_attack(pair, cfg, seed=0)
        assert check_feasibility(pair, cfg, res) == []
        assert np.abs(res.delta).max() < 0.1

    def test_rademacher_hits_corners(self):
        pair = simple_pair(seed=13)
        cfg = AttackConfig(eps=0.1, random_mode="rademacher")
        res = random_attack(pair, cfg, seed=0)
        assert np.allclose(np.abs(res.delta), 0.1, rtol=0, atol=1e-15)

    def test_with_estimator_reports_losses(self):
        pair = simple_pair(seed=14, color=False)
        res = random_attack(pair, AttackConfig(eps=0.1), seed=1,
                            est=NegativeFlowEstimator())
        assert res.loss_before > 0.0
        assert res.loss_after != 0.0


class TestFeasibility:
    @pytest.mark.parametrize("mask_spec", ["all-dims", "dim=0", "dim=1,2",
                                           "all-channels", "channel=1"])
    def test_all_attacks_feasible(self, mask_spec):
        pair = simple_pair(seed=15)
        mask = make_target_mask(mask_spec)
        cfg = AttackConfig(eps=0.05, iters=3, mask=mask)
        est = OTEstimator(OTConfig(reg=0.1))
        for res in (fgsm_sf(pair, est, AttackConfig(eps=0.05, mask=mask)),
                    pgd_sf(pair, est, cfg),
                    random_attack(pair, cfg, seed=0)):
            assert check_feasibility(pair, cfg, res) == []

    def test_detects_violation(self):
        pair = simple_pair(seed=16)
        cfg = AttackConfig(eps=0.05)
        res = fgsm_sf(pair, NegativeFlowEstimator(), cfg)
        bad = type(res)(adv_pc1=res.adv_pc1, delta=res.delta * 3.0,
                        loss_before=res.loss_before, loss_after=res.loss_after,
                        iters_run=res.iters_run)
        assert "delta exceeds eps" in check_feasibility(pair, cfg, bad)
