"""Pretraining loop for the three objectives and the run report."""

from __future__ import annotations

import csv
import io
import json
import logging
import time
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np

from ..augment import View, make_view, make_views
from ..errors import TrainingAborted
from ..loss import fold_negative_grads, pair_info_nce, poly_lr, sgd_step, undisturbed_negatives
from ..model import (
    EncoderParams, assemble_inputs, backward, forward, init_params, save_checkpoint, scene_features,
)
from ..pairing import build_pair_batch, hardness_bound
from ..scene import Scene, default_camera, generate_scene, load_scene, save_scene
from .config import TrainConfig, dump_config
from .probe import ProbeResult, collapse_metric, linear_probe

log = logging.getLogger(__name__)

METRICS_COLUMNS = ("iter", "loss", "lr", "hardness_bound", "collapse", "fallbacks")


# --- corpus -------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class Corpus:
    train: tuple[Scene, ...]
    test: tuple[Scene, ...]

    @property
    def n_classes(self) -> int:
        return self.train[0].n_classes

    def save(self, out_dir) -> None:
        for split, scenes in (("train", self.train), ("test", self.test)):
            d = Path(out_dir) / split
            d.mkdir(parents=True, exist_ok=True)
            for i, s in enumerate(scenes):
                save_scene(s, d / f"scene_{i:04d}.p4cs")

    @classmethod
    def load(cls, root) -> "Corpus":
        root = Path(root)
        split = {name: tuple(load_scene(p) for p in sorted((root / name).glob("*.p4cs"))) for name in ("train", "test")}
        return cls(split["train"], split["test"])


def _scene_seed(corpus_seed: int, split: int, i: int) -> int:
    return int(np.random.SeedSequence([corpus_seed, split, i]).generate_state(1)[0])


@lru_cache(maxsize=8)
def _cached_corpus(seed, n_train, n_test, scene_cfg) -> Corpus:
    train = tuple(generate_scene(_scene_seed(seed, 0, i), scene_cfg) for i in range(n_train))
    test = tuple(generate_scene(_scene_seed(seed, 1, i), scene_cfg) for i in range(n_test))
    return Corpus(train, test)


def make_corpus(cfg: TrainConfig) -> Corpus:
    return _cached_corpus(cfg.corpus_seed, cfg.corpus_n_train, cfg.corpus_n_test, cfg.scene_config())


def canonical_view(scene: Scene, image_size: int = 64) -> View:
    """Un-augmented view used for downstream features."""
    return make_view(scene, default_camera(scene.extent, image_size, image_size))


def corpus_features(scenes, params: EncoderParams, objective: str, image_size: int = 64):
    feats = [scene_features(canonical_view(s, image_size), params, objective) for s in scenes]
    return np.concatenate(feats), np.concatenate([s.labels for s in scenes])


# --- objectives -----------------------------------------------------------------


def _contrast(anchors, positives, disturbed, loss_cfg):
    loss, g = pair_info_nce(anchors, positives, undisturbed_negatives(positives), disturbed, loss_cfg)
    return loss, g.anchors, g.positives + fold_negative_grads(g.negatives), g.disturbed


def objective_loss(feats: dict, inputs, cfg: TrainConfig):
    """Loss and upstream feature gradients for the configured objective."""
    loss_cfg = cfg.loss_config()
    nd = inputs.n_disturbed

    def grads_for(block):
        a, p, q = inputs.split(block)
        loss, da, dp, dq = _contrast(a, p, q if nd else None, loss_cfg)
        return loss, np.concatenate([da, dp, dq])

    if cfg.objective == "crossmodal":
        a, _, _ = inputs.split(feats["f3d"])
        _, p, _ = inputs.split(feats["f2d"])
        loss, da, dp, _ = _contrast(a, p, None, loss_cfg)
        zeros = np.zeros_like(feats["f3d"])
        d3, d2 = zeros.copy(), zeros.copy()
        d3[: len(a)] = da
        d2[len(a): 2 * len(a)] = dp
        return loss, {"f3d": d3, "f2d": d2}
    if cfg.train_branches == "separate":
        l3, d3 = grads_for(feats["f3d"])
        l2, d2 = grads_for(feats["f2d"])
        return l3 + l2, {"f3d": d3, "f2d": d2}
    loss, d = grads_for(feats["fused"])
    return loss, {"fused": d}


# --- report ---------------------------------------------------------------------


@dataclass
class RunReport:
    fingerprint: str
    config: dict
    losses: list[float] = field(default_factory=list)
    lrs: list[float] = field(default_factory=list)
    bounds: list[float] = field(default_factory=list)
    fallbacks: list[int] = field(default_factory=list)  # cumulative
    collapse: dict[int, float] = field(default_factory=dict)
    probe: ProbeResult | None = None
    control_probe: ProbeResult | None = None
    finetune_probe: ProbeResult | None = None
    finetune_control_probe: ProbeResult | None = None
    final_collapse: float | None = None
    control_collapse: float | None = None
    wall_time: float = 0.0  # not serialized: keeps report files bit-reproducible

    @property
    def fallback_count(self) -> int:
        return self.fallbacks[-1] if self.fallbacks else 0

    def to_dict(self) -> dict:
        return {
            "fingerprint": self.fingerprint,
            "config": self.config,
            "losses": self.losses,
            "lrs": self.lrs,
            "hardness_bounds": self.bounds,
            "fallbacks": self.fallbacks,
            "fallback_count": self.fallback_count,
            "collapse": {str(k): v for k, v in sorted(self.collapse.items())},
            "final_collapse": self.final_collapse,
            "control_collapse": self.control_collapse,
            "probe": self.probe.to_dict() if self.probe else None,
            "control_probe": self.control_probe.to_dict() if self.control_probe else None,
            "finetune_probe": self.finetune_probe.to_dict() if self.finetune_probe else None,
            "finetune_control_probe": self.finetune_control_probe.to_dict() if self.finetune_control_probe else None,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)

    def metrics_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf)
        w.writerow(METRICS_COLUMNS)
        for k, loss in enumerate(self.losses):
            c = self.collapse.get(k + 1)
            w.writerow([k, repr(loss), repr(self.lrs[k]), repr(self.bounds[k]),
                        "" if c is None else repr(c), self.fallbacks[k]])
        return buf.getvalue()


def _collapse_sample(features: np.ndarray, m: int, seed: int) -> float:
    rng = np.random.default_rng(seed)
    rows = rng.choice(len(features), size=min(m, len(features)), replace=False)
    return collapse_metric(features[np.sort(rows)])


def _iteration_seed(seed: int, k: int) -> int:
    return int(np.random.SeedSequence([seed, 7, k]).generate_state(1)[0])


def _test_collapse(corpus: Corpus, params, cfg: TrainConfig) -> float:
    f, _ = corpus_features(corpus.test, params, cfg.objective, cfg.augment_image_size)
    return _collapse_sample(f, cfg.report_collapse_samples, cfg.seed)


def pretrain(cfg: TrainConfig, corpus: Corpus | None = None, probe: bool = True):
    """Run one pretraining job; returns ``(params, report)``."""
    cfg.validate()
    start = time.perf_counter()
    corpus = make_corpus(cfg) if corpus is None else corpus
    aug = cfg.augment_config()
    schedule = cfg.schedule()
    opt = cfg.opt_state()
    params = init_params(cfg.model_hidden, cfg.model_dim, cfg.model_knn_k, cfg.fusion_mode, seed=cfg.seed)
    init = params
    report = RunReport(cfg.fingerprint(), cfg.to_flat())
    disturbed = cfg.objective == "p4contrast"
    fallbacks = 0

    for k in range(cfg.iterations):
        batch_seed = _iteration_seed(cfg.seed, k)
        rng = np.random.default_rng(batch_seed)
        scene = corpus.train[int(rng.integers(len(corpus.train)))]
        v1, v2, corr = make_views(scene, aug, int(rng.integers(2**63)))
        batch = build_pair_batch(v1.scene.points, corr, k, cfg.batch_size, schedule, rng)
        inputs = assemble_inputs(v1, v2, batch, cfg.model_knn_k, cfg.fusion_mode, cfg.objective, disturbed)
        feats, cache = forward(inputs, params)
        loss, upstream = objective_loss(feats, inputs, cfg)
        if not np.isfinite(loss):
            raise TrainingAborted("non-finite loss", k, batch_seed)
        grads = backward(cache, upstream, params)
        params = params.with_tensors(sgd_step(params.tensors(), grads, opt, k, batch_seed))

        if disturbed:
            fallbacks += batch.n_fallbacks
        report.losses.append(loss)
        report.lrs.append(poly_lr(k, opt))
        report.bounds.append(hardness_bound(k, schedule) if disturbed else float("nan"))
        report.fallbacks.append(fallbacks)
        if (k + 1) % cfg.report_collapse_every == 0 or k + 1 == cfg.iterations:
            report.collapse[k + 1] = _test_collapse(corpus, params, cfg)

    if probe:
        evaluate(report, params, init, corpus, cfg)
    report.wall_time = time.perf_counter() - start
    log.info("run %s done in %.1fs", report.fingerprint, report.wall_time)
    return params, report


def evaluate(report: RunReport, params, init, corpus: Corpus, cfg: TrainConfig) -> None:
    """Probe the trained features and the random-init control on held-out scenes.

    With ``probe.finetune_encoder`` both encoders are also fine-tuned under
    supervision; from the random init that is the train-from-scratch baseline.
    """
    nc = corpus.n_classes
    size = cfg.augment_image_size
    for attr, p in (("probe", params), ("control_probe", init)):
        tr_x, tr_y = corpus_features(corpus.train, p, cfg.objective, size)
        te_x, te_y = corpus_features(corpus.test, p, cfg.objective, size)
        setattr(report, attr, linear_probe(tr_x, tr_y, te_x, te_y, nc, cfg.probe_steps, cfg.probe_lr))
        c = _collapse_sample(te_x, cfg.report_collapse_samples, cfg.seed)
        if attr == "probe":
            report.final_collapse = c
        else:
            report.control_collapse = c
    if cfg.probe_finetune_encoder:
        from .finetune import finetune_probe
        for attr, p in (("finetune_probe", params), ("finetune_control_probe", init)):
            res, _ = finetune_probe(p, corpus.train, corpus.test, nc, cfg.objective, cfg.probe_steps, cfg.probe_lr, size)
            setattr(report, attr, res)


def write_run(out_dir, params, report: RunReport, cfg: TrainConfig) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(params, out / "checkpoint.p4ck")
    (out / "report.json").write_text(report.to_json())
    (out / "metrics.csv").write_text(report.metrics_csv())
    (out / "config.txt").write_text(dump_config(cfg))
    (out / "timing.json").write_text(json.dumps({"wall_time_s": report.wall_time}))
