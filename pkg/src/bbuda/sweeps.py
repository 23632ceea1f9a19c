"""End-to-end runs and the ablation / openness / sensitivity sweeps.

A *cell* is one benchmark + adaptation configuration. Each cell runs every
seed, scoring both the adapted model and the SO++ baseline. Benchmarks and
source models are memoized by a hash of their manifest, so cells that differ
only in adaptation settings reuse the same data.
"""
from __future__ import annotations

import csv
import hashlib
import io
import itertools
import logging
import math
import statistics
from dataclasses import asdict, dataclass, replace
from typing import Callable, Dict, List, Optional, Sequence, Tuple

from . import jsonio
from .benchgen import BenchmarkSpec, LabeledDataset, LabelPartition, SourceTrainConfig, generate, train_source
from .blackbox import InProcessPredictor, PredictionCache, fill_cache
from .evaluation import EvalReport, GroundTruth, evaluate, so_plus_plus
from .model import TargetModel
from .trainer import AdaptConfig, adapt, predict

log = logging.getLogger(__name__)

ABLATIONS: Dict[str, dict] = {
    "distill-only": {"alpha_fixed": 1.0, "beta": 0.0},
    "distill+self": {"beta": 0.0},
    "full": {},
}

CSV_FIELDS = ["kind", "cell", "params", "seed", "method", "status", "h_score", "acc_in", "acc_out", "aa"]


def manifest_hash(spec: BenchmarkSpec, src_cfg: Optional[SourceTrainConfig] = None) -> str:
    doc = {"benchmark": spec.to_dict()}
    if src_cfg is not None:
        doc["source"] = asdict(src_cfg)
    return hashlib.sha256(jsonio.dumps(doc).encode("utf-8")).hexdigest()


@dataclass
class Prepared:
    source: LabeledDataset
    target: LabeledDataset
    partition: LabelPartition
    source_model: TargetModel
    source_accuracy: float
    cache: PredictionCache
    truth: GroundTruth


class Workbench:
    """Memoizes benchmark generation and source training by manifest hash."""

    def __init__(self):
        self._store: Dict[str, Prepared] = {}
        self.generated = 0

    def prepare(self, spec: BenchmarkSpec, src_cfg: SourceTrainConfig) -> Prepared:
        key = manifest_hash(spec, src_cfg)
        if key not in self._store:
            src, tgt, part = generate(spec)
            res = train_source(src, part.k, cfg=src_cfg)
            cache = fill_cache(InProcessPredictor(res.model), tgt.inputs, source="in-process")
            self._store[key] = Prepared(src, tgt, part, res.model, res.train_accuracy, cache,
                                        GroundTruth(tgt.labels, part.k))
            self.generated += 1
        return self._store[key]


@dataclass
class RunScores:
    method: EvalReport
    baseline: EvalReport


def run_once(prep: Prepared, cfg: AdaptConfig) -> RunScores:
    """Adapt against the cached source outputs and score against SO++."""
    res = adapt(prep.target.inputs, InProcessPredictor(prep.source_model), cfg, cache=prep.cache)
    return RunScores(evaluate(predict(res.model, prep.target.inputs), prep.truth),
                     so_plus_plus(prep.cache.outputs, prep.truth))


@dataclass
class Cell:
    name: str
    params: str
    spec: Optional[BenchmarkSpec]       # None marks an infeasible cell
    adapt_overrides: dict
    skip_reason: str = ""


def ablation_cells(spec: BenchmarkSpec, grid: dict) -> List[Cell]:
    names = grid.get("methods", list(ABLATIONS))
    unknown = set(names) - set(ABLATIONS)
    if unknown:
        raise ValueError(f"unknown ablation methods {sorted(unknown)}")
    return [Cell(n, n, spec, dict(ABLATIONS[n])) for n in names]


def split_openness(union: int, n_common: int) -> Tuple[int, int]:
    """Split the non-shared classes of a fixed union between the two domains."""
    rest = union - n_common
    s = rest // 2
    return s, rest - s


def openness_cells(spec: BenchmarkSpec, grid: dict) -> List[Cell]:
    union = int(grid.get("union", spec.partition.n_total))
    cells = []
    for c in grid.get("n_common", [5, 10, 15]):
        c = int(c)
        name = f"common={c}"
        if c < 1 or c > union:
            cells.append(Cell(name, f"union={union}", None, {}, f"n_common={c} outside [1, {union}]"))
            continue
        s, t = split_openness(union, c)
        if c + s < 2:
            cells.append(Cell(name, f"union={union}", None, {}, "source label space would have < 2 classes"))
            continue
        part = LabelPartition(c, s, t)
        cells.append(Cell(name, f"common={c};source_private={s};target_private={t}",
                          replace(spec, partition=part), {}))
    return cells


SENSITIVITY_KEYS = ("rho", "beta", "m_prototypes")


def sensitivity_cells(spec: BenchmarkSpec, grid: dict) -> List[Cell]:
    unknown = set(grid) - set(SENSITIVITY_KEYS)
    if unknown:
        raise ValueError(f"unknown sensitivity axes {sorted(unknown)}")
    axes = [(k, grid[k]) for k in SENSITIVITY_KEYS if k in grid]
    cells = []
    for combo in itertools.product(*[vals for _, vals in axes]):
        over = {k: v for (k, _), v in zip(axes, combo)}
        label = ";".join(f"{k}={v}" for k, v in over.items())
        cells.append(Cell(label, label, spec, over))
    return cells


CELL_BUILDERS: Dict[str, Callable[[BenchmarkSpec, dict], List[Cell]]] = {
    "ablation": ablation_cells,
    "openness": openness_cells,
    "sensitivity": sensitivity_cells,
}


@dataclass
class SweepRow:
    kind: str
    cell: str
    params: str
    seed: str
    method: str
    status: str
    h_score: Optional[float] = None
    acc_in: Optional[float] = None
    acc_out: Optional[float] = None
    aa: Optional[float] = None


@dataclass
class SweepResult:
    rows: List[SweepRow]
    failed: int
    skipped: int

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_FIELDS)
        for r in self.rows:
            vals = [getattr(r, f) for f in CSV_FIELDS]
            w.writerow(["" if v is None else (format(v, ".17g") if isinstance(v, float) else v)
                        for v in vals])
        return buf.getvalue()


def _report_row(kind, cell: Cell, seed, method, rep: EvalReport) -> SweepRow:
    return SweepRow(kind, cell.name, cell.params, str(seed), method, "ok",
                    rep.h_score, rep.acc_in, rep.acc_out, rep.aa)


def _summaries(kind: str, cell: Cell, rows: List[SweepRow]) -> List[SweepRow]:
    out = []
    for method in ("ours", "so++"):
        mine = [r for r in rows if r.method == method]
        for stat, fn in (("mean", statistics.fmean), ("std", statistics.pstdev)):
            vals = {}
            for f in ("h_score", "acc_in", "acc_out", "aa"):
                xs = [getattr(r, f) for r in mine if getattr(r, f) is not None]
                vals[f] = float(fn(xs)) if xs else None
            out.append(SweepRow(kind, cell.name, cell.params, stat, method, "ok", **vals))
    return out


def run_sweep(kind: str, grid: dict, seeds: Sequence[int], spec: BenchmarkSpec = BenchmarkSpec(),
              src_cfg: SourceTrainConfig = SourceTrainConfig(), base: AdaptConfig = AdaptConfig(),
              bench: Optional[Workbench] = None) -> SweepResult:
    """Run every cell of a sweep over ``seeds``.

    Per seed the benchmark seed, source-training seed and adaptation seed are
    all set to that seed. A cell that raises is marked ``failed`` and the
    sweep continues; infeasible cells are marked ``skipped``.
    """
    if kind not in CELL_BUILDERS:
        raise ValueError(f"unknown sweep kind {kind!r}")
    bench = bench or Workbench()
    cells = CELL_BUILDERS[kind](spec, grid)
    rows: List[SweepRow] = []
    failed = skipped = 0
    for cell in cells:
        if cell.spec is None:
            log.warning("skipping cell %s: %s", cell.name, cell.skip_reason)
            rows.append(SweepRow(kind, cell.name, cell.params, "", "", f"skipped: {cell.skip_reason}"))
            skipped += 1
            continue
        cell_rows: List[SweepRow] = []
        try:
            for seed in seeds:
                prep = bench.prepare(replace(cell.spec, seed=seed), replace(src_cfg, seed=seed))
                cfg = replace(base, seed=seed, **cell.adapt_overrides)
                scores = run_once(prep, cfg)
                cell_rows.append(_report_row(kind, cell, seed, "ours", scores.method))
                cell_rows.append(_report_row(kind, cell, seed, "so++", scores.baseline))
                log.info("%s %s seed=%s h=%s so++=%s", kind, cell.name, seed,
                         scores.method.h_score, scores.baseline.h_score)
        except Exception as exc:
            log.error("cell %s failed: %s", cell.name, exc)
            rows.extend(cell_rows)
            rows.append(SweepRow(kind, cell.name, cell.params, "", "", f"failed: {exc}"))
            failed += 1
            continue
        rows.extend(cell_rows)
        rows.extend(_summaries(kind, cell, cell_rows))
    return SweepResult(rows, failed, skipped)


def mean_scores(result: SweepResult) -> Dict[Tuple[str, str], float]:
    """``{(cell, method): mean h_score}`` from a sweep's summary rows."""
    return {(r.cell, r.method): r.h_score for r in result.rows
            if r.seed == "mean" and r.h_score is not None and not math.isnan(r.h_score)}
