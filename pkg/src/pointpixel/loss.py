"""PairInfoNCE loss, an independent extended-precision oracle, and SGD+momentum.

For anchor i with positive p_i, undisturbed negatives n_ij and disturbed
negatives q_k (shared across anchors)::

    L = -sum_i log( exp(a_i.p_i/tau) / (sum_j exp(a_i.n_ij/tau) + sum_k exp(a_i.q_k/tau)) )

With ``include_positive_in_denominator`` the positive term is added to the
denominator as well (the usual InfoNCE form).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import mpmath
import numpy as np

from .errors import ConfigError, ContractError, TrainingAborted

UNIT_TOL = 1e-6


@dataclass(frozen=True)
class LossConfig:
    tau: float = 0.4
    include_positive_in_denominator: bool = False

    def __post_init__(self):
        if not (self.tau > 0 and np.isfinite(self.tau)):
            raise ConfigError(f"temperature must be positive, got {self.tau}")


class LossGrads(NamedTuple):
    anchors: np.ndarray
    positives: np.ndarray
    negatives: np.ndarray
    disturbed: np.ndarray


def _check_unit(name: str, x: np.ndarray) -> None:
    if x.size and np.abs(np.linalg.norm(x, axis=-1) - 1.0).max() > UNIT_TOL:
        raise ContractError(f"{name} rows must have unit L2 norm")


def undisturbed_negatives(positives: np.ndarray) -> np.ndarray:
    """B x (B-1) x D block: for anchor i, the positives of every j != i."""
    b = positives.shape[0]
    keep = ~np.eye(b, dtype=bool)
    return np.broadcast_to(positives, (b,) + positives.shape)[keep].reshape(b, b - 1, -1)


def fold_negative_grads(d_negatives: np.ndarray) -> np.ndarray:
    """Accumulate gradients of the shared negative block back onto positive rows."""
    b = d_negatives.shape[0]
    out = np.zeros((b, d_negatives.shape[2]))
    for i in range(b):
        out[:i] += d_negatives[i, :i]
        out[i + 1:] += d_negatives[i, i:]
    return out


def _blocks(anchors, positives, negatives, disturbed):
    a = np.asarray(anchors, dtype=np.float64)
    p = np.asarray(positives, dtype=np.float64)
    b, dim = a.shape
    n = np.zeros((b, 0, dim)) if negatives is None else np.asarray(negatives, dtype=np.float64)
    q = np.zeros((0, dim)) if disturbed is None else np.asarray(disturbed, dtype=np.float64)
    if p.shape != a.shape or n.ndim != 3 or n.shape[0] != b or n.shape[2] != dim or q.ndim != 2 or q.shape[1] != dim:
        raise ContractError("inconsistent feature block shapes")
    return a, p, n, q


def pair_info_nce(anchors, positives, negatives, disturbed, cfg: LossConfig = LossConfig()):
    """Stabilized loss and its gradient with respect to every feature block.

    ``negatives`` is B x Nn x D (per-anchor), ``disturbed`` is Nd x D (shared);
    either may be ``None`` for an empty set.
    """
    a, p, n, q = _blocks(anchors, positives, negatives, disturbed)
    for name, x in (("anchors", a), ("positives", p), ("negatives", n), ("disturbed", q)):
        _check_unit(name, x)
    inc = cfg.include_positive_in_denominator
    if n.shape[1] + q.shape[0] + int(inc) == 0:
        raise ContractError("the denominator has no terms")
    t = cfg.tau

    s_pos = np.einsum("id,id->i", a, p) / t
    s_neg = np.einsum("id,ijd->ij", a, n) / t
    s_dis = a @ q.T / t
    parts = [s_neg, s_dis] + ([s_pos[:, None]] if inc else [])
    logits = np.concatenate(parts, axis=1)
    m = logits.max(axis=1, keepdims=True)
    e = np.exp(logits - m)
    z = e.sum(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(z[:, 0])
    loss = float(np.sum(lse - s_pos))

    w = e / z
    nn, nd = s_neg.shape[1], s_dis.shape[1]
    w_neg, w_dis = w[:, :nn], w[:, nn:nn + nd]
    g_pos = w[:, -1] - 1.0 if inc else np.full(a.shape[0], -1.0)

    da = (g_pos[:, None] * p + np.einsum("ij,ijd->id", w_neg, n) + w_dis @ q) / t
    dp = g_pos[:, None] * a / t
    dn = w_neg[:, :, None] * a[:, None, :] / t
    dq = w_dis.T @ a / t
    return loss, LossGrads(da, dp, dn, dq)


def loss_oracle(anchors, positives, negatives, disturbed, cfg: LossConfig = LossConfig(), dps: int = 50) -> float:
    """Literal evaluation of the formula in arbitrary precision; for tests only."""
    a, p, n, q = _blocks(anchors, positives, negatives, disturbed)
    for name, x in (("anchors", a), ("positives", p), ("negatives", n), ("disturbed", q)):
        _check_unit(name, x)
    with mpmath.workdps(dps):
        tau = mpmath.mpf(cfg.tau)

        def sim(u, v):
            return mpmath.fsum(mpmath.mpf(x) * mpmath.mpf(y) for x, y in zip(u, v)) / tau

        total = mpmath.mpf(0)
        for i in range(a.shape[0]):
            numerator = mpmath.exp(sim(a[i], p[i]))
            denominator = mpmath.fsum(mpmath.exp(sim(a[i], v)) for v in n[i])
            denominator += mpmath.fsum(mpmath.exp(sim(a[i], v)) for v in q)
            if cfg.include_positive_in_denominator:
                denominator += numerator
            total -= mpmath.log(numerator / denominator)
        return float(total)


# --- optimizer --------------------------------------------------------------


@dataclass
class OptState:
    total_iters: int
    base_lr: float = 0.8
    momentum: float = 0.9
    weight_decay: float = 1e-4
    power: float = 0.9
    buffers: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if not self.base_lr > 0:
            raise ConfigError("base_lr must be positive")
        if not 0 <= self.momentum < 1:
            raise ConfigError("momentum must lie in [0, 1)")
        if self.weight_decay < 0 or self.power < 0 or self.total_iters < 0:
            raise ConfigError("weight_decay, power and total_iters must be >= 0")


def poly_lr(k: int, opt: OptState) -> float:
    if not 0 <= k <= opt.total_iters or opt.total_iters == 0:
        raise ContractError(f"iteration {k} outside [0, {opt.total_iters}]")
    return opt.base_lr * (1.0 - k / opt.total_iters) ** opt.power


def sgd_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], opt: OptState, k: int,
             batch_seed: int = -1) -> dict[str, np.ndarray]:
    """One momentum step. Weight decay touches matrices only, never bias vectors."""
    for name, g in grads.items():
        if g.shape != params[name].shape:
            raise ContractError(f"gradient shape mismatch for {name}")
        if not np.all(np.isfinite(g)):
            raise TrainingAborted(f"non-finite gradient for {name}", k, batch_seed)
    lr = poly_lr(k, opt)
    out = {}
    for name, theta in params.items():
        g = grads[name]
        if theta.ndim == 2:
            g = g + opt.weight_decay * theta
        v = opt.buffers.get(name)
        v = g.copy() if v is None else opt.momentum * v + g
        opt.buffers[name] = v
        out[name] = theta - lr * v
    return out
