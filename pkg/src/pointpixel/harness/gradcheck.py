"""Finite-difference check of the full encoder + fusion + PairInfoNCE gradient.

Each trial draws a small random scene, two jittered views, a pair batch with
disturbed negatives and random encoder weights, then compares every analytic
parameter gradient against a central difference. Parameters whose
perturbation flips a relu (so the loss is not differentiable within the
stencil) are skipped and counted.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..augment import AugmentConfig, make_views
from ..model import FUSION_MODES, assemble_inputs, backward, forward, init_params
from ..pairing import HardnessSchedule, build_pair_batch
from ..scene import SceneConfig, generate_scene
from .config import TrainConfig
from .train import objective_loss

TOLERANCE = 1e-5


@dataclass(frozen=True)
class TrialResult:
    fusion_mode: str
    include_positive: bool
    trial: int
    max_rel_error: float
    checked: int
    skipped: int


@dataclass(frozen=True)
class GradcheckReport:
    trials: list[TrialResult]
    delta: float

    @property
    def max_rel_error(self) -> float:
        return max(t.max_rel_error for t in self.trials)

    @property
    def passed(self) -> bool:
        return self.max_rel_error < TOLERANCE

    def summary(self) -> str:
        lines = []
        for fm in FUSION_MODES:
            for inc in (False, True):
                rows = [t for t in self.trials if t.fusion_mode == fm and t.include_positive == inc]
                if rows:
                    lines.append(f"{fm:6s} include_positive={inc!s:5s} trials={len(rows)} "
                                 f"max_rel_err={max(t.max_rel_error for t in rows):.3e} "
                                 f"checked={sum(t.checked for t in rows)} skipped={sum(t.skipped for t in rows)}")
        verdict = "PASS" if self.passed else "FAIL"
        lines.append(f"{verdict}: max relative error {self.max_rel_error:.3e} (tolerance {TOLERANCE:g})")
        return "\n".join(lines)


def _relu_pattern(cache) -> tuple:
    out = []
    for key in ("c3", "c2"):
        c = cache[key]
        if c is not None:
            out.extend([c[2] > 0, c[3] > 0])
    return tuple(out)


def _same_pattern(p, q) -> bool:
    return all(np.array_equal(a, b) for a, b in zip(p, q))


def check_instance(fusion_mode: str, include_positive: bool, seed: int, trial: int = 0, delta: float = 1e-6,
                   hidden: int = 8, dim: int = 4, knn_k: int = 4, batch_size: int = 4) -> TrialResult:
    rng = np.random.default_rng(seed)
    scene = generate_scene(int(rng.integers(2**31)), SceneConfig(n_primitives=2, points_per_primitive=32))
    v1, v2, corr = make_views(scene, AugmentConfig(image_size=32), int(rng.integers(2**31)))
    schedule = HardnessSchedule.default(scene.extent, 10)
    batch = build_pair_batch(v1.scene.points, corr, int(rng.integers(10)), batch_size, schedule, rng)
    cfg = TrainConfig(objective="p4contrast", fusion_mode=fusion_mode, loss_include_positive=include_positive)
    inputs = assemble_inputs(v1, v2, batch, knn_k, fusion_mode, cfg.objective, disturbed=True)
    params = init_params(hidden, dim, knn_k, fusion_mode, seed=int(rng.integers(2**31)))

    def loss_and_pattern(p):
        feats, cache = forward(inputs, p)
        return objective_loss(feats, inputs, cfg)[0], _relu_pattern(cache)

    feats, cache = forward(inputs, params)
    _, upstream = objective_loss(feats, inputs, cfg)
    grads = backward(cache, upstream, params)
    base = _relu_pattern(cache)
    tensors = params.tensors()
    worst, checked, skipped = 0.0, 0, 0
    for name, t in tensors.items():
        for idx in np.ndindex(t.shape):
            plus = {k: v.copy() for k, v in tensors.items()}
            minus = {k: v.copy() for k, v in tensors.items()}
            plus[name][idx] += delta
            minus[name][idx] -= delta
            lp, pp = loss_and_pattern(params.with_tensors(plus))
            lm, pm = loss_and_pattern(params.with_tensors(minus))
            if not (_same_pattern(pp, base) and _same_pattern(pm, base)):
                skipped += 1
                continue
            fd = (lp - lm) / (2 * delta)
            worst = max(worst, abs(grads[name][idx] - fd) / max(1.0, abs(fd)))
            checked += 1
    return TrialResult(fusion_mode, include_positive, trial, worst, checked, skipped)


def gradcheck(trials: int = 20, delta: float = 1e-6, seed: int = 0) -> GradcheckReport:
    """``trials`` instances for every fusion mode and both denominator variants."""
    results = []
    for m, fm in enumerate(FUSION_MODES):
        for inc in (False, True):
            for t in range(trials):
                s = int(np.random.SeedSequence([seed, m, int(inc), t]).generate_state(1)[0])
                results.append(check_instance(fm, inc, s, t, delta))
    return GradcheckReport(results, delta)
