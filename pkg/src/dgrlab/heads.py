"""Training heads over the distortion graphs.

* type-discrimination: a GCN collapses one graph to a compact code; a
  triplet hinge on squared L2 distances pulls same-type codes together.
* level prediction: a hyper predictor emits per-node (mu, sigma); the level
  estimate is a reparameterized Gaussian sample so gradients reach both.
* score regression: two FC layers over concatenated node and self-loop edge
  embeddings, one scalar per node.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, concat, mean_over_axis, relu, softplus, squared_l2_distance
from .graph import DGR, edge_pooling, normalize_adjacency, self_loop_edges
from .nn import GcnStack, Mlp

SIGMA_FLOOR = 1e-4

REGRESSION_INPUTS = ("both", "nodes", "edges")


@dataclass
class TripletCodes:
    anchor: Tensor
    positive: Tensor
    negative: Tensor


@dataclass
class LevelPrediction:
    """Per-node Gaussian hyper-parameters and the sampled level estimates.

    y = mu + sigma * epsilon holds exactly; sigma is strictly positive.
    """

    mu: Tensor       # (N,)
    sigma: Tensor    # (N,)
    y: Tensor        # (N,)
    epsilon: np.ndarray  # (N,) standard normal draws


@dataclass
class LossBundle:
    l_dist: Tensor
    l_level: Tensor
    lam: float
    total: Tensor


def tdn_code(dgr: DGR, stack: GcnStack) -> Tensor:
    """Graph code: GCN over the pooled node adjacency, then mean over nodes.

    The mean readout makes the code invariant to node order.
    """
    adj = normalize_adjacency(dgr.A_V)
    out = stack.propagate(adj, dgr.V, final_relu=True)
    return mean_over_axis(out, 0)


def triplet_loss(codes: TripletCodes, margin: float) -> Tensor:
    """max(d(a, p) - d(a, n) + margin, 0) with d the squared L2 distance."""
    if margin < 0:
        raise ValueError(f"margin must be nonnegative, got {margin}")
    d_pos = squared_l2_distance(codes.anchor, codes.positive)
    d_neg = squared_l2_distance(codes.anchor, codes.negative)
    return relu(d_pos - d_neg + margin)


def reparameterize(mu: Tensor, sigma: Tensor, epsilon: np.ndarray) -> Tensor:
    """y = mu + sigma * epsilon; gradients flow to mu and sigma, not epsilon."""
    return mu + sigma * Tensor(epsilon)


class HyperPredictor:
    """Two FC layers mapping [node || pooled-edge] rows to (mu, sigma_raw)."""

    def __init__(self, node_dim: int, edge_dim: int, hidden: int,
                 rng: np.random.Generator, name: str = "fpn"):
        self.name = name
        self.net = Mlp([node_dim + edge_dim, hidden, 2], rng, name=name)

    def __call__(self, x: Tensor) -> Tensor:
        return self.net(x)

    def parameters(self) -> dict[str, Tensor]:
        return self.net.parameters()


def fpn_predict(dgr: DGR, hyper: HyperPredictor, rng: np.random.Generator,
                epsilon: np.ndarray | None = None) -> LevelPrediction:
    """Predict per-node level distributions and draw reparameterized samples.

    ``epsilon`` overrides the standard-normal draw (tests force 0).
    """
    n = dgr.n
    x = concat([dgr.V, edge_pooling(dgr.E)], axis=1)
    out = hyper(x)  # (N, 2): column 0 is mu, column 1 the raw scale
    mu = (out @ Tensor([[1.0], [0.0]])).reshape(n)
    raw = (out @ Tensor([[0.0], [1.0]])).reshape(n)
    sigma = softplus(raw) + SIGMA_FLOOR
    if epsilon is not None:
        eps = np.broadcast_to(np.asarray(epsilon, dtype=np.float64), (n,)).copy()
    else:
        eps = rng.standard_normal(n)
    y = reparameterize(mu, sigma, eps)
    return LevelPrediction(mu=mu, sigma=sigma, y=y, epsilon=eps)


def level_loss(pred: LevelPrediction, targets: np.ndarray) -> Tensor:
    """Sum of squared errors between sampled levels and integer targets."""
    t = np.asarray(targets, dtype=np.float64)
    if t.shape != pred.y.shape:
        raise ValueError(f"targets shape {t.shape} does not match predictions {pred.y.shape}")
    d = pred.y - Tensor(t)
    return (d * d).sum()


def combined_loss(l_dist: Tensor, l_level: Tensor, lam: float = 0.25) -> LossBundle:
    """total = l_dist + lam * l_level."""
    if float(l_dist.data) < 0 or float(l_level.data) < 0:
        raise ValueError("loss terms must be nonnegative")
    total = l_dist + l_level * lam
    return LossBundle(l_dist=l_dist, l_level=l_level, lam=lam, total=total)


def regression_score(dgr: DGR, head: Mlp, inputs: str = "both") -> Tensor:
    """One quality score per node from node and/or self-loop edge embeddings."""
    if inputs not in REGRESSION_INPUTS:
        raise ValueError(f"inputs must be one of {REGRESSION_INPUTS}, got {inputs!r}")
    if inputs == "nodes":
        x = dgr.V
    elif inputs == "edges":
        x = self_loop_edges(dgr.E)
    else:
        x = concat([dgr.V, self_loop_edges(dgr.E)], axis=1)
    out = head(x)
    return out.reshape(dgr.n)


def score_loss(pred: Tensor, gt: np.ndarray) -> Tensor:
    """Mean squared error against ground-truth scores."""
    t = np.asarray(gt, dtype=np.float64)
    if t.shape != pred.shape:
        raise ValueError(f"ground truth shape {t.shape} does not match predictions {pred.shape}")
    d = pred - Tensor(t)
    return (d * d).sum() / t.size
