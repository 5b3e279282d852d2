"""Ablation matrices, candidate-pool sweeps and trace reports."""

from __future__ import annotations

import csv
import io
import json
import logging
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from statistics import mean
from typing import Sequence

import numpy as np

from .core import (
    PipelineConfig,
    Problem,
    SelectionPolicy,
    Violation,
    config_from_dict,
    derive_seed,
    ensure_valid,
    load_suite,
    read_structured,
)
from .exceptions import ConfigError
from .pipeline import PipelineError, PipelineTrace, read_traces, run_pipeline, write_traces
from .verify import compute_metrics

log = logging.getLogger(__name__)

CONFIGURATIONS = {
    "no_rm": (SelectionPolicy.SINGLE, SelectionPolicy.SINGLE),
    "rm_f_only": (SelectionPolicy.BEST_OF_N, SelectionPolicy.SINGLE),
    "rm_s_only": (SelectionPolicy.SINGLE, SelectionPolicy.BEST_OF_N),
    "full": (SelectionPolicy.BEST_OF_N, SelectionPolicy.BEST_OF_N),
    "random_of_n": (SelectionPolicy.RANDOM_OF_N, SelectionPolicy.RANDOM_OF_N),
}


def make_synthetic_suite(n_problems: int, seed: int = 0, prefix: str = "syn") -> list[Problem]:
    """Problems with integer optimal values, for use with synthetic backends."""
    rng = np.random.default_rng(seed)
    out = []
    for k in range(n_problems):
        a, b, cap = (int(v) for v in rng.integers(1, 20, size=3))
        out.append(Problem(
            id=f"{prefix}{k:03d}",
            statement=f"Maximize {a}x + {b}y subject to x + y <= {cap}, x, y >= 0 integer.",
            ground_truth=float(max(a, b) * cap),
        ))
    return out


@dataclass(frozen=True)
class AblationSpec:
    configurations: tuple[str, ...]
    n_values: tuple[int, ...]
    seeds: tuple[int, ...]
    problems: tuple[Problem, ...]
    base: PipelineConfig = field(default_factory=PipelineConfig)
    suite_name: str = "suite"

    def violations(self) -> list[Violation]:
        out = []
        if not self.configurations:
            out.append(Violation("configurations", "must be non-empty"))
        for c in self.configurations:
            if c not in CONFIGURATIONS:
                out.append(Violation("configurations", f"unknown configuration {c!r}"))
        if not self.n_values:
            out.append(Violation("n_values", "must be non-empty"))
        if any(n < 1 for n in self.n_values):
            out.append(Violation("n_values", "every N must be >= 1"))
        if not self.seeds:
            out.append(Violation("seeds", "must be non-empty"))
        if not self.problems:
            out.append(Violation("suite", "no problems loaded"))
        return out

    def validate(self) -> "AblationSpec":
        v = self.violations()
        if v:
            raise ConfigError(v)
        ensure_valid(self.base)
        return self

    @classmethod
    def from_dict(cls, d: dict, base_dir: Path | str = ".") -> "AblationSpec":
        base_dir = Path(base_dir)
        if "suite" in d:
            suite_path = base_dir / d["suite"]
            problems = load_suite(suite_path)
            name = d.get("suite_name", suite_path.stem)
        else:
            problems = make_synthetic_suite(int(d.get("synthetic_problems", 50)), int(d.get("suite_seed", 0)))
            name = d.get("suite_name", "synthetic")
        return cls(
            configurations=tuple(d.get("configurations", ())),
            n_values=tuple(int(n) for n in d.get("n_values", ())),
            seeds=tuple(int(s) for s in d.get("seeds", ())),
            problems=tuple(problems),
            base=config_from_dict(d.get("pipeline", {})),
            suite_name=name,
        )

    @classmethod
    def load(cls, path) -> "AblationSpec":
        path = Path(path)
        return cls.from_dict(read_structured(path), path.parent)


@dataclass
class CellResult:
    configuration: str
    n: int
    seed: int
    metrics: object = None
    error: str | None = None
    n_failed: int = 0


@dataclass
class AblationReport:
    cells: list[CellResult]
    traces: list[PipelineTrace]
    suite_name: str = "suite"

    def sa_by_seed(self, configuration: str, n: int) -> list[float]:
        return [c.metrics.sa for c in self.cells
                if c.configuration == configuration and c.n == n and c.metrics is not None]

    def er_by_seed(self, configuration: str, n: int) -> list[float]:
        return [c.metrics.er for c in self.cells
                if c.configuration == configuration and c.n == n and c.metrics is not None]

    def mean_sa(self, configuration: str, n: int) -> float:
        return mean(self.sa_by_seed(configuration, n))

    def rows(self) -> list[dict]:
        return summarize(self.traces)

    def write(self, out_dir, *, keep_candidates: bool = True) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_traces(out / "traces.jsonl", self.traces, keep_candidates=keep_candidates)
        rows = self.rows()
        (out / "report.txt").write_text(render_rows(rows, "table"))
        (out / "report.csv").write_text(render_rows(rows, "csv"))
        cells = [
            {"configuration": c.configuration, "n": c.n, "seed": c.seed,
             "metrics": c.metrics.to_dict() if c.metrics else None,
             "error": c.error, "n_failed": c.n_failed}
            for c in self.cells
        ]
        (out / "ablation.json").write_text(json.dumps({"suite": self.suite_name, "cells": cells}, indent=2) + "\n")


def cell_config(base: PipelineConfig, configuration: str, n: int, seed: int) -> PipelineConfig:
    f_policy, s_policy = CONFIGURATIONS[configuration]
    return base.replace(
        n_formulations=n, n_solutions=n,
        formulation_policy=f_policy, solution_policy=s_policy, seed=derive_seed("cell-seed", seed),
    )


def run_cell(spec: AblationSpec, configuration: str, n: int, seed: int, executor=None):
    """Run one (configuration, N, seed) cell over the whole suite.

    The run seed depends only on ``seed``, so every configuration and N sees
    the same random stream (common random numbers) and removing a cell never
    changes another.
    """
    cfg = cell_config(spec.base, configuration, n, seed)
    label = {"configuration": configuration, "n": n, "seed": seed, "suite": spec.suite_name}
    traces, errors = [], []
    for problem in spec.problems:
        try:
            traces.append(run_pipeline(problem, cfg, label=label, executor=executor))
        except PipelineError as exc:
            traces.append(exc.trace)
            errors.append(f"{problem.id}: {exc}")
    done = [t.final_outcome for t in traces if t.final_outcome is not None]
    cell = CellResult(configuration, n, seed, compute_metrics(done) if done else None,
                      "; ".join(errors) or None, len(errors))
    return cell, traces


def run_ablation(spec: AblationSpec, executor=None) -> AblationReport:
    spec.validate()
    cells, traces = [], []
    for configuration in spec.configurations:
        for n in spec.n_values:
            for seed in spec.seeds:
                cell, cell_traces = run_cell(spec, configuration, n, seed, executor)
                if cell.error:
                    log.warning("cell %s N=%d seed=%d: %s", configuration, n, seed, cell.error)
                cells.append(cell)
                traces.extend(cell_traces)
    return AblationReport(cells, traces, spec.suite_name)


def run_scale(spec: AblationSpec, executor=None) -> AblationReport:
    """Pool-size sweep: best-of-N on both stages against random-of-N."""
    return run_ablation(AblationSpec(("full", "random_of_n"), spec.n_values, spec.seeds, spec.problems, spec.base, spec.suite_name),
                        executor)


# -- reports ----------------------------------------------------------------


def summarize(traces: Sequence[PipelineTrace]) -> list[dict]:
    """Mean ER/SA per (configuration, N, suite), averaged over seeds.

    Each seed's metrics are computed over its problems first; failed runs
    (no final outcome) are counted but not scored.
    """
    per_seed = defaultdict(list)
    failed = defaultdict(int)
    for t in traces:
        lab = t.label or {}
        key = (str(lab.get("configuration", "run")), int(lab.get("n", 0)), str(lab.get("suite", "suite")))
        if t.final_outcome is None:
            failed[key] += 1
            continue
        per_seed[(key, lab.get("seed", 0))].append(t.final_outcome)
    groups = defaultdict(list)
    for (key, _seed), outcomes in sorted(per_seed.items(), key=lambda kv: (kv[0][0], str(kv[0][1]))):
        groups[key].append(compute_metrics(outcomes))
    for key in failed:
        groups.setdefault(key, [])
    order = list(CONFIGURATIONS)
    rows = []
    for (conf, n, suite), reports in sorted(
        groups.items(), key=lambda kv: (order.index(kv[0][0]) if kv[0][0] in order else len(order), kv[0])
    ):
        rows.append({
            "configuration": conf,
            "n": n,
            "suite": suite,
            "er": mean(r.er for r in reports) if reports else float("nan"),
            "sa": mean(r.sa for r in reports) if reports else float("nan"),
            "n_seeds": len(reports),
            "n_runs": sum(r.n_total for r in reports),
            "n_failed": failed.get((conf, n, suite), 0),
        })
    return rows


def render_rows(rows: list[dict], fmt: str = "table") -> str:
    if fmt == "jsonl":
        return "".join(json.dumps(r, sort_keys=True) + "\n" for r in rows)
    if fmt == "csv":
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["configuration", "n", "suite", "er", "sa", "n_seeds", "n_runs", "n_failed"])
        for r in rows:
            w.writerow([r["configuration"], r["n"], r["suite"], f"{r['er']:.6f}", f"{r['sa']:.6f}",
                        r["n_seeds"], r["n_runs"], r["n_failed"]])
        return buf.getvalue()
    if fmt != "table":
        raise ValueError(f"unknown report format {fmt!r}")
    return _render_table(rows)


def _render_table(rows: list[dict]) -> str:
    """ER and SA per suite, one line per (configuration, N); ``*`` marks the column best."""
    suites = sorted({r["suite"] for r in rows})
    lines_keys = []
    for r in rows:
        k = (r["configuration"], r["n"])
        if k not in lines_keys:
            lines_keys.append(k)
    cell = {(r["configuration"], r["n"], r["suite"]): r for r in rows}
    columns = [("ER", s) for s in suites] + [("SA", s) for s in suites]
    best = {}
    for metric, s in columns:
        vals = [cell[(c, n, s)][metric.lower()] for c, n in lines_keys if (c, n, s) in cell]
        vals = [v for v in vals if v == v]
        best[(metric, s)] = max(vals) if vals else None
    header = ["Configuration", "N"] + [f"{m}:{s}" for m, s in columns]
    body = []
    for c, n in lines_keys:
        row = [c, str(n)]
        for metric, s in columns:
            r = cell.get((c, n, s))
            if r is None or r[metric.lower()] != r[metric.lower()]:
                row.append("-")
                continue
            v = r[metric.lower()]
            mark = "*" if best[(metric, s)] is not None and v == best[(metric, s)] and len(lines_keys) > 1 else ""
            row.append(f"{v:.2f}{mark}")
        body.append(row)
    widths = [max(len(x[i]) for x in [header, *body]) for i in range(len(header))]

    def fmt(row):
        return "  ".join(x.ljust(w) if i == 0 else x.rjust(w) for i, (x, w) in enumerate(zip(row, widths))).rstrip()

    lines = [fmt(header), "  ".join("-" * w for w in widths)] + [fmt(r) for r in body]
    return "\n".join(lines) + "\n"


def report(traces_path, fmt: str = "table") -> str:
    """Render a report from persisted traces (a file or a directory holding traces.jsonl)."""
    path = Path(traces_path)
    if path.is_dir():
        path = path / "traces.jsonl"
    return render_rows(summarize(read_traces(path)), fmt)
