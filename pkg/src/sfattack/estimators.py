"""Differentiable scene-flow estimators and the end-point-error loss.

Two estimators share one interface: an entropic optimal-transport matcher
(soft correspondence via Sinkhorn, flow = barycentric target minus source)
and a tiny trainable flow-embedding network (per-point encoder plus
softmax attention over k nearest second-cloud points).  Both expose the
flow as a graph tensor so attacks can backpropagate to the first cloud.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Graph, Tensor, constant
from .scene import FlowField, FormatError, LengthError, ScenePair, ValidationError


class NumericError(ArithmeticError):
    """Numerical breakdown (underflow to a degenerate Sinkhorn marginal)."""


class TrainingError(RuntimeError):
    """Training aborted on a non-finite loss."""


# -- loss -----------------------------------------------------------------

def epe_loss(pred, gt) -> Tensor:
    """Mean Euclidean distance between predicted and true flow vectors."""
    pred_t = pred if isinstance(pred, Tensor) else constant(_vectors(pred))
    gt_v = _vectors(gt)
    if pred_t.shape != gt_v.shape:
        raise ad.ShapeError(f"flow shapes differ: {pred_t.shape} vs {gt_v.shape}")
    return ad.tmean(ad.rownorm(ad.sub(pred_t, constant(gt_v))))


def epe(pred, gt) -> float:
    """Plain-number EPE for reporting."""
    return float(epe_loss(pred, gt).data)


def _vectors(flow) -> np.ndarray:
    if isinstance(flow, FlowField):
        return flow.vectors
    return np.asarray(flow, dtype=np.float64)


def _recip(t: Tensor) -> Tensor:
    # 1/x for strictly positive x, expressed in the primitive closure
    return ad.exp(ad.smul(ad.log(t), -1.0))


def median_scale(cost: Tensor) -> Tensor:
    """Divide a cost matrix by its (lower) median entry, differentiably.

    The median entry is located on detached values; the division then goes
    through the graph so gradients account for the scale.  A non-positive
    median leaves the cost unscaled (nothing to guard against).
    """
    if not isinstance(cost, Tensor):
        cost = constant(cost)
    vals = cost.data
    n, m = vals.shape
    order = np.argsort(vals, axis=None, kind="stable")
    r, c = divmod(int(order[(vals.size - 1) // 2]), m)
    if vals[r, c] <= 1e-300:
        return cost
    row = ad.gather_rows(cost, [r])                       # (1, m)
    onehot = np.zeros((m, 1))
    onehot[c, 0] = 1.0
    med = ad.matmul(row, constant(onehot))                # (1, 1)
    inv = ad.exp(ad.smul(ad.log(med), -1.0))
    return ad.mul(cost, ad.broadcast(inv, (n, m)))


def sinkhorn(cost, reg: float, iters: int) -> Tensor:
    """Row-stochastic entropic transport plan from alternating normalization.

    The cost is pre-divided by its median entry as an overflow guard, then
    K = exp(-cost/reg) is alternately normalized (rows to 1/N, columns to
    1/M) for `iters` rounds and finally rescaled so each row sums to 1.
    """
    if reg <= 0.0:
        raise ValidationError("sinkhorn reg must be > 0")
    if iters < 1:
        raise ValidationError("sinkhorn iters must be >= 1")
    if not isinstance(cost, Tensor):
        cost = constant(cost)
    if cost.data.ndim != 2:
        raise ad.ShapeError("cost must be a matrix")
    if not np.all(np.isfinite(cost.data)):
        raise ad.DomainError("cost must be finite")
    n, m = cost.shape
    ones_row = constant(np.ones((1, n)))
    k = ad.exp(ad.smul(median_scale(cost), -1.0 / reg))
    for _ in range(iters):
        r = ad.row_sum(k)                                  # (n,)
        _check_marginal(r.data, "row")
        k = ad.smul(ad.mul(k, ad.broadcast(_recip(r), (n, m), axis=1)), 1.0 / n)
        c = ad.matmul(ones_row, k)                         # (1, m)
        _check_marginal(c.data, "column")
        k = ad.smul(ad.mul(k, ad.broadcast(_recip(c), (n, m), axis=0)), 1.0 / m)
    r = ad.row_sum(k)
    _check_marginal(r.data, "row")
    return ad.mul(k, ad.broadcast(_recip(r), (n, m), axis=1))


def _check_marginal(v: np.ndarray, which: str) -> None:
    if v.min() <= 0.0 or not np.all(np.isfinite(v)):
        raise NumericError(f"degenerate {which} marginal in sinkhorn (underflow)")


# -- estimators -----------------------------------------------------------

@dataclass(frozen=True)
class OTConfig:
    reg: float = 0.02
    sinkhorn_iters: int = 30
    color_weight: float = 1.0

    def __post_init__(self):
        if self.reg <= 0.0:
            raise ValidationError("reg must be > 0")
        if self.sinkhorn_iters < 1:
            raise ValidationError("sinkhorn_iters must be >= 1")
        if self.color_weight < 0.0:
            raise ValidationError("color_weight must be >= 0")


class Estimator:
    """Interface: estimate() for plain flow, flow_tensor() for gradients."""

    tag = "estimator"

    def flow_tensor(self, pos1: Tensor, col1: Optional[Tensor], pair: ScenePair) -> Tensor:
        raise NotImplementedError

    def estimate(self, pair: ScenePair) -> FlowField:
        pos1 = constant(pair.pc1.positions)
        col1 = constant(pair.pc1.colors) if pair.pc1.has_colors else None
        return FlowField(self.flow_tensor(pos1, col1, pair).data)

    def config_digest(self) -> str:
        import hashlib
        return hashlib.sha256(repr(self._digest_key()).encode()).hexdigest()[:12]

    def _digest_key(self):
        return self.tag


class OTEstimator(Estimator):
    """Soft-correspondence flow from an entropic transport plan."""

    tag = "ot"

    def __init__(self, cfg: OTConfig = OTConfig()):
        self.cfg = cfg

    def flow_tensor(self, pos1, col1, pair):
        pos2 = constant(pair.pc2.positions)
        cost = median_scale(ad.pairwise_sqdist(pos1, pos2))
        if self.cfg.color_weight > 0.0 and pair.pc2.has_colors and col1 is not None:
            col2 = constant(pair.pc2.colors)
            cost = ad.add(cost, ad.smul(ad.pairwise_sqdist(col1, col2),
                                        self.cfg.color_weight))
        plan = sinkhorn(cost, self.cfg.reg, self.cfg.sinkhorn_iters)
        return ad.sub(ad.matmul(plan, pos2), pos1)

    def _digest_key(self):
        return (self.tag, self.cfg.reg, self.cfg.sinkhorn_iters, self.cfg.color_weight)


HIDDEN = 32


@dataclass
class TinyNetWeights:
    """Two-layer point encoder plus two-layer flow head."""

    w1: np.ndarray  # (in, 32)
    b1: np.ndarray  # (1, 32)
    w2: np.ndarray  # (32, 32)
    b2: np.ndarray  # (1, 32)
    w3: np.ndarray  # (64, 32)
    b3: np.ndarray  # (1, 32)
    w4: np.ndarray  # (32, 3)
    b4: np.ndarray  # (1, 3)
    k_neighbors: int = 8

    def __post_init__(self):
        in_dim = self.w1.shape[0]
        expect = {
            "w1": (in_dim, HIDDEN), "b1": (1, HIDDEN),
            "w2": (HIDDEN, HIDDEN), "b2": (1, HIDDEN),
            "w3": (2 * HIDDEN, HIDDEN), "b3": (1, HIDDEN),
            "w4": (HIDDEN, 3), "b4": (1, 3),
        }
        if in_dim not in (3, 6):
            raise ValidationError(f"input width must be 3 or 6, got {in_dim}")
        for name, shape in expect.items():
            arr = np.asarray(getattr(self, name), dtype=np.float64)
            if arr.shape != shape:
                raise ValidationError(f"{name} must be {shape}, got {arr.shape}")
            if not np.all(np.isfinite(arr)):
                raise ValidationError(f"{name} has non-finite entries")
            setattr(self, name, arr)
        if self.k_neighbors < 1:
            raise ValidationError("k_neighbors must be >= 1")

    @property
    def in_dim(self) -> int:
        return self.w1.shape[0]

    def arrays(self) -> list[np.ndarray]:
        return [self.w1, self.b1, self.w2, self.b2, self.w3, self.b3, self.w4, self.b4]

    def replace_arrays(self, arrays) -> "TinyNetWeights":
        return TinyNetWeights(*[np.asarray(a) for a in arrays], k_neighbors=self.k_neighbors)


def init_weights(in_dim: int, seed: int, k_neighbors: int = 8) -> TinyNetWeights:
    """Seeded init; the first layer starts near a scaled pass-through of the
    coordinates so encoding distances reflect point geometry from step one."""
    rng = np.random.default_rng(seed)

    def layer(n_in, n_out):
        return rng.normal(0.0, np.sqrt(2.0 / n_in), size=(n_in, n_out))

    w1 = layer(in_dim, HIDDEN) * 0.1
    w1[:3, :3] += 2.0 * np.eye(3)
    w2 = layer(HIDDEN, HIDDEN) * 0.1
    w2[:HIDDEN, :HIDDEN] += np.eye(HIDDEN)
    return TinyNetWeights(
        w1=w1, b1=np.zeros((1, HIDDEN)),
        w2=w2, b2=np.zeros((1, HIDDEN)),
        w3=layer(2 * HIDDEN, HIDDEN), b3=np.zeros((1, HIDDEN)),
        w4=layer(HIDDEN, 3) * 0.1, b4=np.zeros((1, 3)),
        k_neighbors=k_neighbors,
    )


def knn_indices(query: np.ndarray, points: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k nearest rows of `points` for each row of `query`."""
    k = min(k, points.shape[0])
    d = ((query[:, None, :] - points[None, :, :]) ** 2).sum(axis=2)
    return np.argsort(d, axis=1, kind="stable")[:, :k]


def _affine(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    return ad.add(ad.matmul(x, w), b)  # bias row broadcasts over rows


class TinyNetEstimator(Estimator):
    """Tiny flow-embedding network: encode both clouds, attend over the k
    nearest second-cloud points, decode a flow vector per first-cloud point."""

    tag = "tiny"

    def __init__(self, weights: TinyNetWeights):
        self.weights = weights

    def flow_tensor(self, pos1, col1, pair):
        w = [constant(a) for a in self.weights.arrays()]
        return tiny_flow(pos1, col1, pair, w, self.weights.k_neighbors)

    def _digest_key(self):
        import hashlib
        blob = save_weights(self.weights)
        return (self.tag, hashlib.sha256(blob).hexdigest()[:12])


def tiny_flow(pos1: Tensor, col1: Optional[Tensor], pair: ScenePair,
              w: list[Tensor], k_neighbors: int) -> Tensor:
    """Differentiable tiny-net forward with explicit weight tensors.

    Neighbor indices are hard (recomputed from the current, possibly
    perturbed, first-cloud positions against the unperturbed second cloud);
    gradients flow through the attention logits only.
    """
    w1, b1, w2, b2, w3, b3, w4, b4 = w
    in_dim = w1.shape[0]
    use_color = in_dim == 6
    if use_color and (col1 is None or not pair.pc2.has_colors):
        raise ValidationError("weights expect colors but the pair has none")

    f1 = ad.concat(pos1, col1, axis=1) if use_color else pos1
    pos2 = constant(pair.pc2.positions)
    if use_color:
        f2 = ad.concat(pos2, constant(pair.pc2.colors), axis=1)
    else:
        f2 = pos2

    def encode(x):
        h = ad.relu(_affine(x, w1, b1))
        return ad.relu(_affine(h, w2, b2))

    e1 = encode(f1)                                       # (N, 32)
    e2 = encode(f2)                                       # (M, 32)

    idx = knn_indices(pos1.data, pair.pc2.positions, k_neighbors)
    n, k = idx.shape

    neigh_feats = []
    logits = []
    for j in range(k):
        f2j = ad.gather_rows(e2, idx[:, j])               # (N, 32)
        d = ad.sub(e1, f2j)
        logits.append(ad.smul(ad.row_sum(ad.mul(d, d)), -1.0))  # (N,)
        neigh_feats.append(f2j)

    # constant per-row shift: softmax-invariant, keeps exp in range
    shift = constant(np.maximum.reduce([l.data for l in logits]))
    exps = [ad.exp(ad.sub(l, shift)) for l in logits]
    total = exps[0]
    for e in exps[1:]:
        total = ad.add(total, e)
    inv_total = _recip(total)                             # (N,)

    attended = None
    for e, f2j in zip(exps, neigh_feats):
        wgt = ad.mul(e, inv_total)                        # (N,)
        term = ad.mul(ad.broadcast(wgt, (n, HIDDEN), axis=1), f2j)
        attended = term if attended is None else ad.add(attended, term)

    h = ad.concat(e1, attended, axis=1)                   # (N, 64)
    h = ad.relu(_affine(h, w3, b3))
    return _affine(h, w4, b4)


# -- training -------------------------------------------------------------

def train_tiny(dataset: list[ScenePair], epochs: int, lr: float, seed: int,
               k_neighbors: int = 8) -> tuple[TinyNetWeights, list[float]]:
    """Plain full-gradient descent over shuffled minibatches of 4 pairs.

    Returns the final weights and the per-epoch mean EPE trace.
    """
    if not dataset:
        raise ValidationError("empty training set")
    for pair in dataset:
        if pair.gt_flow is None:
            raise ValidationError(f"pair {pair.id} lacks gt_flow")
    with_color = dataset[0].pc1.has_colors
    weights = init_weights(6 if with_color else 3, seed, k_neighbors)
    arrays = [a.copy() for a in weights.arrays()]
    rng = np.random.default_rng(seed)
    trace = []
    batch_size = 4

    for epoch in range(epochs):
        order = rng.permutation(len(dataset))
        epoch_losses = []
        for start in range(0, len(dataset), batch_size):
            batch = [dataset[i] for i in order[start:start + batch_size]]
            g = Graph()
            w = [g.leaf(a) for a in arrays]
            loss = None
            for pair in batch:
                pos1 = constant(pair.pc1.positions)
                col1 = constant(pair.pc1.colors) if with_color else None
                pred = tiny_flow(pos1, col1, pair, w, k_neighbors)
                term = epe_loss(pred, pair.gt_flow)
                loss = term if loss is None else ad.add(loss, term)
            loss = ad.smul(loss, 1.0 / len(batch))
            value = float(loss.data)
            if not np.isfinite(value):
                raise TrainingError(f"non-finite loss at epoch {epoch}")
            grads = ad.backward(loss)
            for i, wt in enumerate(w):
                arrays[i] = arrays[i] - lr * grads[wt.node_id]
            epoch_losses.append(value)
        trace.append(float(np.mean(epoch_losses)))
    return weights.replace_arrays(arrays), trace


# -- SFTN weight file -----------------------------------------------------
#
# magic "SFTN" | u32 layer count | per layer: u32 rows, u32 cols,
# f32 data row-major.  k_neighbors rides along as a trailing 1x1 layer.

_WMAGIC = b"SFTN"


def save_weights(w: TinyNetWeights) -> bytes:
    layers = w.arrays() + [np.array([[float(w.k_neighbors)]])]
    chunks = [_WMAGIC, struct.pack("<I", len(layers))]
    for layer in layers:
        rows, cols = layer.shape
        chunks.append(struct.pack("<II", rows, cols))
        chunks.append(np.ascontiguousarray(layer, dtype="<f4").tobytes())
    return b"".join(chunks)


def load_weights(data: bytes) -> TinyNetWeights:
    if len(data) < 8:
        raise LengthError("SFTN header needs 8 bytes")
    if data[:4] != _WMAGIC:
        raise FormatError(f"bad magic {data[:4]!r}")
    (count,) = struct.unpack_from("<I", data, 4)
    if count != 9:
        raise FormatError(f"expected 9 layers, header says {count}")
    offset = 8
    layers = []
    for _ in range(count):
        if len(data) < offset + 8:
            raise LengthError("truncated layer header")
        rows, cols = struct.unpack_from("<II", data, offset)
        offset += 8
        nbytes = rows * cols * 4
        if len(data) < offset + nbytes:
            raise LengthError("truncated layer data")
        arr = np.frombuffer(data, dtype="<f4", count=rows * cols, offset=offset)
        with np.errstate(invalid="ignore"):  # corrupt payloads may hold signaling NaNs
            layers.append(arr.astype(np.float64).reshape(rows, cols))
        offset += nbytes
    if offset != len(data):
        raise LengthError(f"{len(data) - offset} trailing bytes")
    ktail = layers.pop()
    if ktail.shape != (1, 1):
        raise FormatError("k_neighbors layer must be 1x1")
    try:
        return TinyNetWeights(*layers, k_neighbors=int(round(float(ktail[0, 0]))))
    except (ValidationError, TypeError, ValueError, OverflowError) as exc:
        raise FormatError(f"inconsistent layer data: {exc}") from exc


def zero_flow_aepe(dataset: list[ScenePair]) -> float:
    """AEPE of the constant-zero predictor: mean ground-truth magnitude."""
    return float(np.mean([
        np.linalg.norm(p.gt_flow.vectors, axis=1).mean() for p in dataset
    ]))
