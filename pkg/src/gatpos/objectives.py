"""Losses, L2 regularization and the Adam optimizer."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Value
from .exceptions import ContractError, ShapeError
from .graph import Graph, NegativeDistribution, sample_negatives


@dataclass(frozen=True)
class LossReport:
    supervised: float
    unsupervised: float
    l2_penalty: float
    total: float

    def as_dict(self):
        return {
            "supervised": self.supervised,
            "unsupervised": self.unsupervised,
            "l2_penalty": self.l2_penalty,
            "total": self.total,
        }


def supervised_loss(logits: Value, labels, train_idx) -> Value:
    """Summed cross-entropy over the labeled training nodes."""
    if len(train_idx) == 0:
        raise ContractError("train_idx is empty")
    return ad.cross_entropy_rows(logits, labels, train_idx)


def draw_arc_negatives(graph: Graph, dist: NegativeDistribution, num_negatives: int, rng) -> np.ndarray:
    """Negative node ids, ``num_negatives`` per stored arc -> ``[arcs, Q]``."""
    if num_negatives < 1:
        raise ContractError("need at least one negative sample per arc")
    return sample_negatives(dist, (graph.num_arcs, num_negatives), rng)


def unsupervised_loss(p: Value, graph: Graph, dist: NegativeDistribution, num_negatives: int = 1, rng=None,
                      negatives: np.ndarray | None = None) -> Value:
    """Skip-gram negative-sampling loss summed over every ordered arc (v, u).

    Each arc contributes ``softplus(-p_v.p_u) + sum_j softplus(p_v.p_{u'_j})``,
    i.e. ``-log sigmoid`` of the positive and negated negative scores. Pass
    ``negatives`` (``[arcs, Q]``) to hold the Monte Carlo draws fixed;
    otherwise they are drawn from ``dist`` with ``rng``.
    """
    if graph.num_arcs == 0:
        raise ContractError("the unsupervised loss needs at least one edge")
    src, dst = graph.arc_sources, graph.neighbor_targets
    if negatives is None:
        negatives = draw_arc_negatives(graph, dist, num_negatives, rng)
    negatives = np.asarray(negatives, dtype=np.int64).reshape(graph.num_arcs, -1)

    positive = ad.total(ad.softplus(ad.scale(ad.pair_dots(p, src, dst), -1.0)))
    left = np.repeat(src, negatives.shape[1])
    negative = ad.total(ad.softplus(ad.pair_dots(p, left, negatives.ravel())))
    return ad.add(positive, negative)


def l2_penalty(weights) -> Value:
    """``0.5 * sum ||W||^2`` over the given weight values."""
    weights = list(weights)
    if not weights:
        raise ContractError("l2_penalty needs at least one weight")
    terms = [ad.total(ad.mul(w, w)) for w in weights]
    out = terms[0]
    for t in terms[1:]:
        out = ad.add(out, t)
    return ad.scale(out, 0.5)


@dataclass
class AdamState:
    lr: float = 5e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(state: AdamState, params: dict, grads: dict) -> dict:
    """One bias-corrected Adam update of ``params`` (in place) for ``grads``."""
    state.step += 1
    bc1 = 1.0 - state.beta1 ** state.step
    bc2 = 1.0 - state.beta2 ** state.step
    for name, g in grads.items():
        w = params[name]
        if g.shape != w.shape:
            raise ShapeError(f"gradient for {name} has shape {g.shape}, parameter {w.shape}")
        if name not in state.m:
            state.m[name] = np.zeros_like(w)
            state.v[name] = np.zeros_like(w)
        m, v = state.m[name], state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        w -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
    return params


class Adam:
    def __init__(self, lr=5e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.state = AdamState(lr, beta1, beta2, eps)

    def step(self, params: dict, grads: dict) -> dict:
        return adam_step(self.state, params, grads)
