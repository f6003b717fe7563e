"""Grid runner for the context, hardness and augmentation ablations.

A grid file is INI text: an optional ``[base]`` section of overrides shared by
every cell, then one section per cell, each holding config keys::

    [base]
    iterations = 1000

    [cell p4-hybrid]
    objective = p4contrast
    fusion_mode = hybrid

Every cell runs once per seed. A failing run becomes an error row and the
grid continues.
"""

from __future__ import annotations

import configparser
import csv
import io
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

from ..errors import ConfigError
from .config import TrainConfig, field_of
from .train import pretrain

log = logging.getLogger(__name__)

CSV_COLUMNS = ("cell", "seed", "miou", "control_miou", "collapse", "fallbacks", "status", "error")


@dataclass(frozen=True)
class Grid:
    base: dict[str, str]
    cells: dict[str, dict[str, str]]  # insertion order is the row order

    def config(self, cell: str, seed: int) -> TrainConfig:
        return TrainConfig().with_overrides({**self.base, **self.cells[cell], "seed": str(seed)})


def parse_grid(text: str) -> Grid:
    cp = configparser.ConfigParser(interpolation=None, default_section="__none__", strict=True)
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"bad grid file: {exc}") from exc
    base: dict[str, str] = {}
    cells: dict[str, dict[str, str]] = {}
    for section in cp.sections():
        items = dict(cp.items(section))
        for key in items:
            field_of(key)  # unknown keys are errors
        if section == "base":
            base = items
        elif section.startswith("cell "):
            cells[section[5:].strip()] = items
        else:
            raise ConfigError(f"grid section [{section}] must be [base] or [cell <name>]")
    if not cells:
        raise ConfigError("grid has no cells")
    return Grid(base, cells)


_CONTEXT = """
[cell p4contrast-early]
objective = p4contrast
fusion_mode = early
[cell p4contrast-late]
objective = p4contrast
fusion_mode = late
[cell p4contrast-hybrid]
objective = p4contrast
fusion_mode = hybrid
[cell pointcontrast-early]
objective = pointcontrast
fusion_mode = early
[cell crossmodal-late]
objective = crossmodal
fusion_mode = late
"""

_HARDNESS = "".join(f"[cell {m}]\nhardness.mode = {m}\n" for m in ("easy", "hard", "progressive"))

_AUGMENT = "".join(f"[cell {m}]\naugment.mode = {m}\n"
                   for m in ("jitter", "rot", "scal", "trans", "flip", "rot+scal", "mvr"))

# every cell the ordering, hardness, collapse and cross-modal checks compare
_ACCEPTANCE = """
[cell p4contrast-hybrid]
objective = p4contrast
fusion_mode = hybrid
[cell pointcontrast-early]
objective = pointcontrast
fusion_mode = early
[cell p4contrast-hard]
hardness.mode = hard
[cell p4contrast-rot+scal]
augment.mode = rot+scal
[cell crossmodal-late]
objective = crossmodal
fusion_mode = late
"""

BUILTIN_GRIDS = {"table5": _CONTEXT, "table6": _HARDNESS, "table7": _AUGMENT, "acceptance": _ACCEPTANCE}


def load_grid(path_or_name: str) -> Grid:
    """A grid file path, or a builtin name: table5, table6, table7 or acceptance."""
    if path_or_name in BUILTIN_GRIDS:
        return parse_grid(BUILTIN_GRIDS[path_or_name])
    return parse_grid(Path(path_or_name).read_text())


def run_cell(grid: Grid, cell: str, seed: int) -> dict:
    row = {"cell": cell, "seed": seed, "miou": "", "control_miou": "", "collapse": "", "fallbacks": "",
           "status": "ok", "error": ""}
    try:
        cfg = grid.config(cell, seed)
        _, report = pretrain(cfg)
        row.update(miou=report.probe.miou, control_miou=report.control_probe.miou,
                   collapse=report.final_collapse, fallbacks=report.fallback_count)
    except Exception as exc:  # recorded as an error row, the grid keeps going
        log.warning("cell %s seed %d failed: %s", cell, seed, exc)
        row.update(status="error", error=f"{type(exc).__name__}: {exc}")
    return row


def _run_job(job):
    return run_cell(*job)


def ablate(grid: Grid, seeds: int, workers: int = 1) -> list[dict]:
    """Rows ordered by (cell, seed) in grid order, whatever the completion order."""
    if seeds < 1:
        raise ConfigError("need at least one seed")
    jobs = [(grid, cell, s) for cell in grid.cells for s in range(seeds)]
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            rows = list(pool.map(_run_job, jobs))
    else:
        rows = [_run_job(j) for j in jobs]
    order = {c: i for i, c in enumerate(grid.cells)}
    return sorted(rows, key=lambda r: (order[r["cell"]], r["seed"]))


def rows_to_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=CSV_COLUMNS, lineterminator="\r\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})
    return buf.getvalue()
