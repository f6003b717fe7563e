"""Command-line entry point: pretrain, probe, ablate, gradcheck, demo, corpus."""

from __future__ import annotations

import argparse
import json
import logging
import statistics
import sys
from pathlib import Path

from ..errors import ConfigError, ContractError, TrainingAborted
from ..model import load_checkpoint
from .config import TrainConfig, load_config, parse_config_text


def _config(args) -> TrainConfig:
    cfg = load_config(args.config) if getattr(args, "config", None) else TrainConfig()
    if getattr(args, "set", None):
        cfg = cfg.with_overrides(parse_config_text("\n".join(args.set)))
    cfg.validate()
    return cfg


def cmd_pretrain(args) -> int:
    from .train import pretrain, write_run

    cfg = _config(args)
    params, report = pretrain(cfg)
    write_run(args.out, params, report, cfg)
    print(f"fingerprint {report.fingerprint}  probe mIoU {report.probe.miou:.4f}  "
          f"control mIoU {report.control_probe.miou:.4f}  collapse {report.final_collapse:.4f}")
    return 0


def cmd_probe(args) -> int:
    from .finetune import finetune_probe
    from .probe import linear_probe
    from .train import Corpus, corpus_features

    cfg = _config(args)
    params = load_checkpoint(args.checkpoint)
    corpus = Corpus.load(args.corpus)
    if not corpus.train or not corpus.test:
        raise ContractError(f"{args.corpus} needs non-empty train/ and test/ scene directories")
    size = cfg.augment_image_size
    tr = corpus_features(corpus.train, params, args.objective, size)
    te = corpus_features(corpus.test, params, args.objective, size)
    out = {"linear": linear_probe(*tr, *te, corpus.n_classes, cfg.probe_steps, cfg.probe_lr).to_dict()}
    if args.finetune_encoder:
        res, _ = finetune_probe(params, corpus.train, corpus.test, corpus.n_classes, args.objective,
                                cfg.probe_steps, cfg.probe_lr, size)
        out["finetune"] = res.to_dict()
    print(json.dumps(out, indent=1))
    return 0


def cmd_ablate(args) -> int:
    from .ablate import ablate, load_grid, rows_to_csv

    grid = load_grid(args.grid)
    if args.set:
        grid = type(grid)({**grid.base, **parse_config_text("\n".join(args.set))}, grid.cells)
    rows = ablate(grid, args.seeds, args.workers)
    Path(args.out).write_text(rows_to_csv(rows), newline="")
    failed = sum(r["status"] != "ok" for r in rows)
    print(f"{len(rows)} rows written to {args.out} ({failed} errors)")
    return 0


def cmd_gradcheck(args) -> int:
    from .gradcheck import gradcheck

    report = gradcheck(args.trials, args.delta, args.seed)
    print(report.summary())
    return 0 if report.passed else 1


def cmd_demo(args) -> int:
    """Fusion-ordering experiment: p4contrast(hybrid) vs pointcontrast(early) vs random init."""
    from .train import pretrain

    base = _config(args)
    rows = {"p4contrast(hybrid)": [], "pointcontrast(early)": [], "random-init": []}
    for seed in range(args.seeds):
        for name, obj, fusion in (("p4contrast(hybrid)", "p4contrast", "hybrid"),
                                  ("pointcontrast(early)", "pointcontrast", "early")):
            cfg = base.with_overrides({"objective": obj, "fusion_mode": fusion, "seed": seed})
            _, report = pretrain(cfg)
            rows[name].append(report.probe.miou)
            if obj == "p4contrast":
                rows["random-init"].append(report.control_probe.miou)
            print(f"seed {seed} {name:22s} mIoU {report.probe.miou:.4f} (control {report.control_probe.miou:.4f})",
                  flush=True)
    print("median probe mIoU:")
    for name, vals in rows.items():
        print(f"  {name:22s} {statistics.median(vals):.4f}")
    return 0


def cmd_corpus(args) -> int:
    from .train import make_corpus

    cfg = _config(args)
    make_corpus(cfg).save(args.out)
    print(f"wrote {cfg.corpus_n_train} train + {cfg.corpus_n_test} test scenes to {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="pointpixel", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def with_config(sp):
        sp.add_argument("--config", help="flat key = value config file")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
        return sp

    sp = with_config(sub.add_parser("pretrain", help="pretrain an encoder and write checkpoint + report"))
    sp.add_argument("--out", required=True, help="output directory")
    sp.set_defaults(func=cmd_pretrain)

    sp = with_config(sub.add_parser("probe", help="linear probe (optionally fine-tune) a checkpoint"))
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--corpus", required=True, help="directory with train/ and test/ scene files")
    sp.add_argument("--objective", default="p4contrast", help="crossmodal selects the modality masks")
    sp.add_argument("--finetune-encoder", action="store_true")
    sp.set_defaults(func=cmd_probe)

    sp = sub.add_parser("ablate", help="run a grid of configs over seeds into a CSV")
    sp.add_argument("--grid", required=True, help="grid file, or table5 / table6 / table7 / acceptance")
    sp.add_argument("--seeds", type=int, default=5)
    sp.add_argument("--out", required=True, help="CSV path")
    sp.add_argument("--workers", type=int, default=1)
    sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override applied to every cell")
    sp.set_defaults(func=cmd_ablate)

    sp = sub.add_parser("gradcheck", help="finite-difference check of all parameter gradients")
    sp.add_argument("--trials", type=int, default=20)
    sp.add_argument("--delta", type=float, default=1e-6)
    sp.add_argument("--seed", type=int, default=0)
    sp.set_defaults(func=cmd_gradcheck)

    sp = with_config(sub.add_parser("demo", help="run the fusion-ordering experiment"))
    sp.add_argument("--seeds", type=int, default=5)
    sp.set_defaults(func=cmd_demo)

    sp = with_config(sub.add_parser("corpus", help="write the synthetic scene corpus to disk"))
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_corpus)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, ContractError, TrainingAborted, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
    return 2


if __name__ == "__main__":
    sys.exit(main())
