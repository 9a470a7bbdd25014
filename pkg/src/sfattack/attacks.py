"""White-box L-infinity attacks on the first point cloud of a scene pair.

FGSM-SF takes one signed-gradient step of size eps; PGD-SF iterates
smaller signed steps and projects back onto the eps box around the clean
cloud after every step.  A random-perturbation baseline completes the
set.  Perturbations can target either position axes or color channels,
restricted to any subset via a target mask; the ground-truth flow is
never adjusted.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Graph, Tensor
from .estimators import Estimator, epe_loss
from .scene import PointCloud, ScenePair, ValidationError

AUTO = "auto"


@dataclass(frozen=True)
class TargetMask:
    """Which part of pc1 the attack may touch: position axes or color channels."""

    domain: str  # "positions" or "colors"
    axes: frozenset = frozenset({0, 1, 2})

    def __post_init__(self):
        if self.domain not in ("positions", "colors"):
            raise ValidationError(f"bad mask domain {self.domain!r}")
        axes = frozenset(int(a) for a in self.axes)
        if not axes or not axes <= {0, 1, 2}:
            raise ValidationError(f"mask axes must be a nonempty subset of {{0,1,2}}")
        object.__setattr__(self, "axes", axes)

    def check(self, pair: ScenePair) -> None:
        if self.domain == "colors" and not pair.pc1.has_colors:
            raise ValidationError("color mask on a pair without colors")

    def axis_row(self) -> np.ndarray:
        row = np.zeros(3)
        row[sorted(self.axes)] = 1.0
        return row

    def spec_string(self) -> str:
        word = "dim" if self.domain == "positions" else "channel"
        if self.axes == {0, 1, 2}:
            return "all-dims" if self.domain == "positions" else "all-channels"
        return f"{word}=" + ",".join(str(a) for a in sorted(self.axes))


def make_target_mask(spec: str) -> TargetMask:
    """Parse "all-dims", "dim=i[,j]", "all-channels", or "channel=i[,j]"."""
    spec = spec.strip()
    if spec == "all-dims":
        return TargetMask("positions")
    if spec == "all-channels":
        return TargetMask("colors")
    for prefix, domain in (("dim=", "positions"), ("channel=", "colors")):
        if spec.startswith(prefix):
            body = spec[len(prefix):]
            try:
                axes = frozenset(int(p) for p in body.split(","))
            except ValueError as exc:
                raise ValidationError(f"bad mask spec {spec!r}") from exc
            if not axes or not axes <= {0, 1, 2}:
                raise ValidationError(f"mask index out of range in {spec!r}")
            return TargetMask(domain, axes)
    raise ValidationError(f"unrecognized mask spec {spec!r}")


@dataclass(frozen=True)
class AttackConfig:
    eps: float
    iters: int = 1
    alpha: object = AUTO  # float or AUTO -> 2.5 * eps / iters
    mask: TargetMask = field(default_factory=lambda: TargetMask("positions"))
    random_start: bool = False
    clamp_colors: bool = True
    random_mode: str = "uniform"  # random baseline: "uniform" or "rademacher"

    def __post_init__(self):
        if not (np.isfinite(self.eps) and self.eps > 0.0):
            raise ValidationError("eps must be finite and > 0")
        if self.iters < 1:
            raise ValidationError("iters must be >= 1")
        if self.alpha != AUTO:
            a = float(self.alpha)
            if not (np.isfinite(a) and a > 0.0):
                raise ValidationError("alpha must be finite and > 0")
            object.__setattr__(self, "alpha", a)
        if self.random_mode not in ("uniform", "rademacher"):
            raise ValidationError(f"bad random_mode {self.random_mode!r}")

    def resolved_alpha(self) -> float:
        if self.alpha == AUTO:
            return 2.5 * self.eps / self.iters
        return float(self.alpha)


@dataclass(frozen=True)
class AttackResult:
    adv_pc1: PointCloud
    delta: np.ndarray
    loss_before: float
    loss_after: float
    iters_run: int


def attack_loss(pair: ScenePair, est: Estimator) -> Tensor:
    """EPE between the estimated flow and the fixed ground truth."""
    loss, _, _ = _loss_graph(pair, est, pair.pc1.positions,
                             pair.pc1.colors if pair.pc1.has_colors else None)
    return loss


def _loss_graph(pair: ScenePair, est: Estimator,
                pos1_val: np.ndarray, col1_val: Optional[np.ndarray]):
    if pair.gt_flow is None:
        raise ValidationError("attack requires a pair with gt_flow")
    g = Graph()
    pos1 = g.leaf(pos1_val)
    col1 = g.leaf(col1_val) if col1_val is not None else None
    pred = est.flow_tensor(pos1, col1, pair)
    return epe_loss(pred, pair.gt_flow), pos1, col1


def _masked_grad(pair: ScenePair, est: Estimator, cfg: AttackConfig,
                 pos1_val, col1_val) -> tuple[float, np.ndarray]:
    """Loss value and the gradient on the masked domain, zeroed off-axes."""
    loss, pos1, col1 = _loss_graph(pair, est, pos1_val, col1_val)
    value = float(loss.data)
    grads = ad.backward(loss)
    leaf = pos1 if cfg.mask.domain == "positions" else col1
    grad = grads[leaf.node_id] * cfg.mask.axis_row()
    return value, grad


def _loss_value(pair: ScenePair, est: Estimator, pos1_val, col1_val) -> float:
    loss, _, _ = _loss_graph(pair, est, pos1_val, col1_val)
    return float(loss.data)


def _domain_values(pair: ScenePair, cfg: AttackConfig):
    pos = pair.pc1.positions
    col = pair.pc1.colors if pair.pc1.has_colors else None
    base = pos if cfg.mask.domain == "positions" else col
    return pos, col, base


def _result(pair: ScenePair, cfg: AttackConfig, est: Optional[Estimator],
            adv_domain: np.ndarray, loss_before: float, iters_run: int) -> AttackResult:
    pos, col, base = _domain_values(pair, cfg)
    delta = adv_domain - base
    if cfg.mask.domain == "positions":
        adv_pc1 = PointCloud(adv_domain, col)
        adv_pos, adv_col = adv_domain, col
    else:
        adv_pc1 = PointCloud(pos, adv_domain)
        adv_pos, adv_col = pos, adv_domain
    if est is not None:
        loss_after = _loss_value(pair, est, adv_pos, adv_col)
    else:
        loss_after = loss_before
    return AttackResult(adv_pc1=adv_pc1, delta=delta, loss_before=loss_before,
                        loss_after=loss_after, iters_run=iters_run)


def fgsm_sf(pair: ScenePair, est: Estimator, cfg: AttackConfig) -> AttackResult:
    """One-step signed-gradient attack: delta = eps * sign(grad), sign(0)=0."""
    cfg.mask.check(pair)
    pos, col, base = _domain_values(pair, cfg)
    loss_before, grad = _masked_grad(pair, est, cfg, pos, col)
    adv = base + cfg.eps * np.sign(grad)
    if cfg.mask.domain == "colors" and cfg.clamp_colors:
        adv = np.clip(adv, 0.0, 1.0)
    return _result(pair, cfg, est, adv, loss_before, iters_run=1)


def pgd_sf(pair: ScenePair, est: Estimator, cfg: AttackConfig,
           seed: int = 0) -> AttackResult:
    """Iterated signed-gradient ascent projected onto the eps box around pc1.

    At iters=1, alpha=eps, no random start this reduces to fgsm_sf exactly.
    The gradient (and any hard neighbor selection inside the estimator) is
    recomputed from the current iterate at every step.
    """
    cfg.mask.check(pair)
    pos, col, base = _domain_values(pair, cfg)
    alpha = cfg.resolved_alpha()
    is_color = cfg.mask.domain == "colors"
    clamp = is_color and cfg.clamp_colors

    # Positions track delta (projection is exact in delta space); colors
    # track the iterate itself so the [0,1] clamp composes with the box.
    x = base.copy()
    if cfg.random_start:
        rng = np.random.default_rng(seed)
        x = x + rng.uniform(-cfg.eps, cfg.eps, size=x.shape) * cfg.mask.axis_row()
        if clamp:
            x = np.clip(x, 0.0, 1.0)

    loss_before = None
    for t in range(cfg.iters):
        if is_color:
            value, grad = _masked_grad(pair, est, cfg, pos, x)
        else:
            value, grad = _masked_grad(pair, est, cfg, x, col)
        if t == 0 and not cfg.random_start:
            loss_before = value
        # grad is already zero off the masked axes, so those entries never move
        if is_color:
            x = np.clip(x + alpha * np.sign(grad), base - cfg.eps, base + cfg.eps)
            if clamp:
                x = np.clip(x, 0.0, 1.0)
        else:
            x = base + np.clip((x - base) + alpha * np.sign(grad), -cfg.eps, cfg.eps)
    if loss_before is None:
        loss_before = _loss_value(pair, est, pos, col)
    return _result(pair, cfg, est, x, loss_before, iters_run=cfg.iters)


def random_attack(pair: ScenePair, cfg: AttackConfig, seed: int,
                  est: Optional[Estimator] = None) -> AttackResult:
    """Seeded random perturbation inside the eps box (uniform or +-eps)."""
    cfg.mask.check(pair)
    pos, col, base = _domain_values(pair, cfg)
    rng = np.random.default_rng(seed)
    if cfg.random_mode == "rademacher":
        noise = cfg.eps * rng.choice([-1.0, 1.0], size=base.shape)
    else:
        noise = rng.uniform(-cfg.eps, cfg.eps, size=base.shape)
    adv = base + noise * cfg.mask.axis_row()
    if cfg.mask.domain == "colors" and cfg.clamp_colors:
        adv = np.clip(adv, 0.0, 1.0)
    loss_before = _loss_value(pair, est, pos, col) if est is not None else 0.0
    return _result(pair, cfg, est, adv, loss_before, iters_run=1)


def check_feasibility(pair: ScenePair, cfg: AttackConfig, result: AttackResult,
                      tol: float = 1e-12) -> list[str]:
    """Assertable attack invariants; empty list means all hold."""
    out = []
    if np.abs(result.delta).max() > cfg.eps + tol:
        out.append("delta exceeds eps")
    off = sorted({0, 1, 2} - cfg.mask.axes)
    if off and np.any(result.delta[:, off] != 0.0):
        out.append("delta nonzero off the masked axes")
    pos, col, base = _domain_values(pair, cfg)
    if cfg.mask.domain == "positions":
        if col is not None and not np.array_equal(result.adv_pc1.colors, col):
            out.append("colors changed by a position attack")
        if not np.array_equal(result.adv_pc1.positions, base + result.delta):
            out.append("adv positions != pc1 + delta")
    else:
        if not np.array_equal(result.adv_pc1.positions, pos):
            out.append("positions changed by a color attack")
        if not np.array_equal(result.adv_pc1.colors, base + result.delta):
            out.append("adv colors != colors + delta")
        if result.adv_pc1.colors.min() < 0.0 or result.adv_pc1.colors.max() > 1.0:
            out.append("adv colors outside [0,1]")
    return out
