"""Command-line entry point: ``bbuda <command> ...``.

Run configs are JSON documents::

    {"schema_version": 1,
     "benchmark": {BenchmarkSpec fields; partition/shift as nested objects},
     "source":    {SourceTrainConfig fields, plus "layer_sizes", "activation"},
     "adapt":     {AdaptConfig fields},
     "grid":      {sweep axes; see "bbuda sweep --help"}}

Every section is optional and missing fields take library defaults. Unknown
keys are rejected before any work starts.

Exit codes: 0 success, 1 runtime failure, 2 bad usage / config / input file.
"""
from __future__ import annotations

import argparse
import hashlib
import logging
import sys
from dataclasses import fields, replace
from pathlib import Path
from typing import List, Optional

from . import jsonio
from .benchgen import (BenchmarkSpec, DomainShift, GenerationError, LabelPartition, SourceTrainConfig,
                       TrainingError, generate, load_dataset, save_dataset, train_source)
from .blackbox import (InProcessPredictor, ProtocolError, RemotePredictor, TransportError, fill_cache,
                       PredictionServer)
from .evaluation import GroundTruth, evaluate, so_plus_plus
from .model import load_model, save_model
from .numerics import InvalidInput
from .trainer import AdaptationError, AdaptConfig, adapt, predict

log = logging.getLogger("bbuda")

SECTIONS = ("benchmark", "source", "adapt", "grid")


class UsageError(Exception):
    """Bad config, arguments or input files (exit code 2)."""


# -- config -----------------------------------------------------------------

def _check_keys(section: str, doc: dict, allowed) -> None:
    if not isinstance(doc, dict):
        raise UsageError(f"config section {section!r} must be an object")
    extra = set(doc) - set(allowed)
    if extra:
        raise UsageError(f"unknown keys in {section!r}: {sorted(extra)}")


def load_config(path: Optional[str]) -> dict:
    if path is None:
        return {"schema_version": jsonio.SCHEMA_VERSION}
    try:
        doc = jsonio.read(path)
    except FileNotFoundError:
        raise UsageError(f"config file not found: {path}")
    except ValueError as exc:
        raise UsageError(f"config {path} is not valid JSON: {exc}")
    if not isinstance(doc, dict):
        raise UsageError("config must be a JSON object")
    if doc.get("schema_version") != jsonio.SCHEMA_VERSION:
        raise UsageError(f"config schema_version must be {jsonio.SCHEMA_VERSION}")
    _check_keys("<top level>", doc, ("schema_version",) + SECTIONS)
    # one file drives every command, so a typo anywhere fails early
    benchmark_spec(doc)
    source_config(doc)
    adapt_config(doc)
    return doc


def benchmark_spec(cfg: dict) -> BenchmarkSpec:
    doc = dict(cfg.get("benchmark", {}))
    _check_keys("benchmark", doc, [f.name for f in fields(BenchmarkSpec)])
    try:
        if "partition" in doc:
            _check_keys("benchmark.partition", doc["partition"], [f.name for f in fields(LabelPartition)])
        if "shift" in doc:
            _check_keys("benchmark.shift", doc["shift"], [f.name for f in fields(DomainShift)])
        return BenchmarkSpec.from_dict(doc)
    except (InvalidInput, TypeError) as exc:
        raise UsageError(f"invalid benchmark config: {exc}")


def source_config(cfg: dict):
    doc = dict(cfg.get("source", {}))
    _check_keys("source", doc, [f.name for f in fields(SourceTrainConfig)] + ["layer_sizes", "activation"])
    sizes = doc.pop("layer_sizes", None)
    activation = doc.pop("activation", "tanh")
    try:
        return SourceTrainConfig(**doc), sizes, activation
    except (InvalidInput, TypeError) as exc:
        raise UsageError(f"invalid source config: {exc}")


def adapt_config(cfg: dict) -> AdaptConfig:
    try:
        return AdaptConfig.from_dict(dict(cfg.get("adapt", {})))
    except (InvalidInput, TypeError) as exc:
        raise UsageError(f"invalid adapt config: {exc}")


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _load_data(path: str):
    try:
        return load_dataset(path)
    except FileNotFoundError:
        raise UsageError(f"dataset not found: {path}")
    except (ValueError, KeyError) as exc:
        raise UsageError(f"cannot read dataset {path}: {exc}")


def _load_model(path: str):
    try:
        return load_model(path)
    except FileNotFoundError:
        raise UsageError(f"model artifact not found: {path}")
    except (ValueError, KeyError) as exc:
        raise UsageError(f"cannot read model artifact {path}: {exc}")


def _num_classes(ds, spec, override: Optional[int]) -> int:
    if override is not None:
        return override
    if spec is not None:
        return spec.partition.k
    raise UsageError("dataset carries no benchmark spec; pass --k")


# -- commands ---------------------------------------------------------------

def cmd_gen(args) -> int:
    cfg = load_config(args.config)
    spec = benchmark_spec(cfg)
    if args.seed is not None:
        spec = replace(spec, seed=args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    src, tgt, part = generate(spec)
    save_dataset(src, out / "source.json", spec)
    save_dataset(tgt, out / "target.json", spec)
    manifest = {"schema_version": jsonio.SCHEMA_VERSION, "seed": spec.seed, "spec": spec.to_dict(),
                "files": {name: _sha256(out / name) for name in ("source.json", "target.json")}}
    jsonio.write(out / "manifest.json", manifest)
    print(f"wrote {len(src)} source and {len(tgt)} target instances (K={part.k}) to {out}")
    return 0


def cmd_train_source(args) -> int:
    cfg = load_config(args.config)
    src_cfg, sizes, activation = source_config(cfg)
    if args.seed is not None:
        src_cfg = replace(src_cfg, seed=args.seed)
    ds, spec = _load_data(args.data)
    k = _num_classes(ds, spec, args.k)
    res = train_source(ds, k, sizes, src_cfg, activation)
    save_model(res.model, args.out)
    print(f"train_accuracy={res.train_accuracy:.6f}")
    return 0


def cmd_serve(args) -> int:
    artifact = _load_model(args.artifact)
    host, _, port = args.bind.rpartition(":")
    try:
        server = PredictionServer(artifact, host or "127.0.0.1", int(port))
    except ValueError:
        raise UsageError(f"bad --bind {args.bind!r}; expected host:port")
    except OSError as exc:
        print(f"error: cannot bind {args.bind}: {exc}", file=sys.stderr)
        return 1
    print(f"serving K={artifact.k} input_dim={artifact.input_dim} at {server.url}", flush=True)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.httpd.server_close()
    return 0


def _make_predictor(spec: str, max_batch: int):
    kind, _, where = spec.partition(":")
    if kind == "local" and where:
        return InProcessPredictor(_load_model(where))
    if kind == "remote" and where:
        return RemotePredictor(where, max_batch=max_batch)
    raise UsageError(f"--predictor must be local:<artifact> or remote:<url>, got {spec!r}")


def cmd_adapt(args) -> int:
    cfg = adapt_config(load_config(args.config))
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    ds, _ = _load_data(args.target)
    truth = None
    if args.truth:
        tds, tspec = _load_data(args.truth)
        truth = GroundTruth(tds.labels, _num_classes(tds, tspec, args.k))
    predictor = _make_predictor(args.predictor, cfg.max_batch)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    res = adapt(ds.inputs, predictor, cfg, truth=truth)
    save_model(res.model, out / "model.json")
    res.history.save_csv(out / "history.csv")
    res.cache.save(out / "cache.json")
    if truth is not None:
        rep = evaluate(predict(res.model, ds.inputs), truth)
        rep.save(out / "report.json")
        rep.save(out / "report.csv")
        print(f"h_score={rep.h_score} acc_in={rep.acc_in} acc_out={rep.acc_out} aa={rep.aa}")
    print(f"wrote model, history ({len(res.history)} epochs) and cache to {out}")
    return 0


def cmd_eval(args) -> int:
    ds, spec = _load_data(args.data)
    if (args.model is None) == (args.predictor is None):
        raise UsageError("give exactly one of --model or --predictor")
    if args.model is not None:
        model = _load_model(args.model)
        truth = GroundTruth(ds.labels, _num_classes(ds, spec, args.k or model.k))
        rep = evaluate(predict(model, ds.inputs), truth)
    else:
        predictor = _make_predictor(args.predictor, args.max_batch)
        truth = GroundTruth(ds.labels, _num_classes(ds, spec, args.k or predictor.num_classes()))
        rep = so_plus_plus(fill_cache(predictor, ds.inputs, args.max_batch).outputs, truth)
    if args.out:
        rep.save(args.out)
    print(rep.to_json())
    return 0


def _parse_seeds(text: str) -> List[int]:
    try:
        return [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise UsageError(f"--seeds must be comma-separated integers, got {text!r}")


def cmd_sweep(args) -> int:
    from .sweeps import run_sweep

    cfg = load_config(args.grid)
    spec = benchmark_spec(cfg)
    src_cfg, sizes, activation = source_config(cfg)
    if sizes is not None or activation != "tanh":
        raise UsageError("sweeps use the default source architecture")
    base = adapt_config(cfg)
    grid = cfg.get("grid", {})
    seeds = _parse_seeds(args.seeds) if args.seeds else [args.seed if args.seed is not None else 0]
    try:
        result = run_sweep(args.kind, grid, seeds, spec, src_cfg, base)
    except ValueError as exc:
        raise UsageError(str(exc))
    Path(args.out).write_text(result.to_csv(), encoding="utf-8")
    print(f"wrote {len(result.rows)} rows to {args.out} "
          f"({result.failed} failed, {result.skipped} skipped cells)")
    return 1 if result.failed else 0


def cmd_gradcheck(args) -> int:
    from .gradcheck import TOLERANCE, run_suite

    results = run_suite(args.configs, seed=args.seed or 0)
    bad = [r for r in results if not r.ok]
    for term in dict.fromkeys(r.term for r in results):
        worst = max(r.error for r in results if r.term == term)
        print(f"{term:12s} max_rel_error={worst:.3e} {'ok' if worst < TOLERANCE else 'FAIL'}")
    return 1 if bad else 0


# -- parser -----------------------------------------------------------------

SWEEP_HELP = """\
--grid points to a run config whose "grid" section selects the cells:
  ablation:    {"methods": ["distill-only", "distill+self", "full"]}
  openness:    {"n_common": [5, 10, 15], "union": 21}
               the classes outside the common set are split between the domains,
               source-private = floor(rest/2), target-private = the remainder
  sensitivity: {"rho": [...], "beta": [...], "m_prototypes": [...]}  (cartesian product)
Output CSV columns: kind,cell,params,seed,method,status,h_score,acc_in,acc_out,aa.
Methods are "ours" and "so++"; seed "mean"/"std" rows summarize each cell.
"""


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None,
                        help="override the config seed (ignored by commands without randomness)")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")

    p = argparse.ArgumentParser(prog="bbuda", description=__doc__,
                                formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", parents=[common], help="generate source/target datasets + manifest")
    g.add_argument("--config")
    g.add_argument("--out", required=True, help="output directory")
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train-source", parents=[common], help="train the source model on labeled data")
    t.add_argument("--data", required=True, help="source dataset JSON")
    t.add_argument("--config")
    t.add_argument("--k", type=int, help="number of source classes (default: from the dataset spec)")
    t.add_argument("--out", required=True, help="model artifact JSON")
    t.set_defaults(func=cmd_train_source)

    s = sub.add_parser("serve", parents=[common], help="serve a model artifact over HTTP")
    s.add_argument("--artifact", required=True)
    s.add_argument("--bind", default="127.0.0.1:8000", help="host:port (port 0 picks a free port)")
    s.set_defaults(func=cmd_serve)

    a = sub.add_parser("adapt", parents=[common], help="adapt a target model through a black-box predictor")
    a.add_argument("--target", required=True, help="target dataset JSON (labels are not used)")
    a.add_argument("--predictor", required=True, help="local:<artifact.json> or remote:<http://host:port>")
    a.add_argument("--config")
    a.add_argument("--truth", help="labeled target dataset for per-epoch metrics and a final report")
    a.add_argument("--k", type=int)
    a.add_argument("--out", required=True, help="output directory")
    a.set_defaults(func=cmd_adapt)

    e = sub.add_parser("eval", parents=[common], help="score a model (or SO++ of a predictor)")
    e.add_argument("--data", required=True, help="labeled target dataset JSON")
    e.add_argument("--model", help="adapted model JSON")
    e.add_argument("--predictor", help="score SO++ of local:<artifact> or remote:<url>")
    e.add_argument("--k", type=int)
    e.add_argument("--max-batch", type=int, default=256)
    e.add_argument("--out", help="report path; .csv for CSV, anything else for JSON")
    e.set_defaults(func=cmd_eval)

    w = sub.add_parser("sweep", parents=[common], help="ablation / openness / sensitivity sweeps",
                       epilog=SWEEP_HELP, formatter_class=argparse.RawDescriptionHelpFormatter)
    w.add_argument("--kind", required=True, choices=["ablation", "openness", "sensitivity"])
    w.add_argument("--grid", help="run config with a grid section")
    w.add_argument("--seeds", help="comma-separated seeds, e.g. 0,1,2")
    w.add_argument("--out", required=True, help="CSV path")
    w.set_defaults(func=cmd_sweep)

    c = sub.add_parser("gradcheck", parents=[common], help="verify analytic gradients by finite differences")
    c.add_argument("--configs", type=int, default=10, help="random configurations to check")
    c.set_defaults(func=cmd_gradcheck)
    return p


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except TransportError as exc:
        print(f"error: predictor unreachable: {exc}", file=sys.stderr)
        return 1
    except (ProtocolError, InvalidInput, GenerationError, TrainingError, AdaptationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
