"""Command-line entry point: ``npu-cosearch <command>``.

Commands: search, validate-models, deploy, simulate, report.

Run configuration precedence: built-in defaults < ``--config`` JSON file <
command-line flags.

Exit codes: 0 success, 1 usage/config/IO error, 2 validation failure,
3 model deviation detected, 4 bundle integrity (checksum) failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

from . import deploy, kpi, search, sweep, techdb
from .evaluator import EvaluatorSpec
from .nn_ir import DEFAULT_SPACE, Candidate, NetworkConfig, SearchSpace, validate
from .npu_sim import ROLES, SimulationError, Tensor
from .quantizer import quantize_array

log = logging.getLogger("npu_cosearch")

EXIT_OK, EXIT_USAGE, EXIT_VALIDATION, EXIT_DEVIATION, EXIT_INTEGRITY = 0, 1, 2, 3, 4


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    input_channels: int = 40
    input_length: int = 101
    num_classes: int = 12
    bounds: search.Bounds = field(default_factory=search.Bounds)
    budget: int = 3000
    population: int = 100
    seed: int = 0
    tech_db: Optional[str] = None
    evaluator: EvaluatorSpec = field(default_factory=EvaluatorSpec)
    period: int = kpi.DEFAULT_PERIOD
    workers: int = 1
    out: str = "search_out"

    def check(self) -> None:
        if self.budget < 1 or self.population < 1 or self.budget < self.population:
            raise ConfigError("need budget >= population >= 1")
        if self.tech_db is not None and not Path(self.tech_db).exists():
            raise ConfigError(f"technology database {self.tech_db} not found")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")

    @property
    def space(self) -> SearchSpace:
        return replace(DEFAULT_SPACE, input_channels=self.input_channels,
                       input_length=self.input_length, num_classes=self.num_classes)

    @classmethod
    def from_dict(cls, doc: dict) -> "RunConfig":
        doc = dict(doc)
        task = doc.pop("task", {})
        kw = {k: task[k] for k in ("input_channels", "input_length", "num_classes") if k in task}
        if "bounds" in doc:
            kw["bounds"] = search.Bounds(**doc.pop("bounds"))
        if "evaluator" in doc:
            kw["evaluator"] = EvaluatorSpec.from_dict(doc.pop("evaluator"))
        unknown = set(doc) - {f for f in cls.__dataclass_fields__}
        if unknown:
            raise ConfigError(f"unknown run-config keys {sorted(unknown)}")
        kw.update(doc)
        return cls(**kw)

    def to_dict(self) -> dict:
        return {
            "task": {"input_channels": self.input_channels, "input_length": self.input_length,
                     "num_classes": self.num_classes},
            "bounds": self.bounds.to_dict(),
            "budget": self.budget,
            "population": self.population,
            "seed": self.seed,
            "tech_db": self.tech_db,
            "evaluator": self.evaluator.to_dict(),
            "period": self.period,
            "workers": self.workers,
            "out": self.out,
        }


def _tech(path: Optional[str]) -> techdb.TechDatabase:
    return techdb.load(path) if path else techdb.load_default()


def load_run_config(args) -> RunConfig:
    cfg = RunConfig()
    if args.config:
        cfg = RunConfig.from_dict(json.loads(Path(args.config).read_text()))
    for name in ("seed", "tech_db", "out", "workers", "budget", "population"):
        v = getattr(args, name, None)
        if v is not None:
            setattr(cfg, name, v)
    cfg.check()
    return cfg


def summarize(history: search.SearchHistory, bounds: search.Bounds) -> dict:
    ok = [e for e in history if e.failure is None]
    best = {}
    for k in search.METRIC_NAMES:
        if ok:
            e = min(ok, key=lambda e: getattr(e.metrics, k))
            best[k] = {"index": e.index, "value": getattr(e.metrics, k)}
    front = search.pareto_front(history)
    return {
        "entries": len(history),
        "failed": len(history) - len(ok),
        "bound_satisfying": sum(bounds.satisfied_by(e.metrics) for e in history),
        "pareto_size": len(front),
        "best": best,
        "bounds": bounds.to_dict(),
    }


def write_search_outputs(out: Path, history: search.SearchHistory, bounds: search.Bounds) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "history.jsonl").write_text(history.to_jsonl())
    (out / "pareto.csv").write_text(search.pareto_table(search.pareto_front(history)))
    (out / "points.csv").write_text(search.pareto_table(list(history)))
    (out / "summary.json").write_text(json.dumps(summarize(history, bounds), indent=2, sort_keys=True) + "\n")


def cmd_search(args) -> int:
    cfg = load_run_config(args)
    tech = _tech(cfg.tech_db)
    log.info("search: budget %d, population %d, seed %d", cfg.budget, cfg.population, cfg.seed)
    history = search.run_search(
        space=cfg.space, budget=cfg.budget, pop_size=cfg.population, bounds=cfg.bounds,
        evaluator=cfg.evaluator, tech=tech, seed=cfg.seed, period=cfg.period, workers=cfg.workers,
    )
    write_search_outputs(Path(cfg.out), history, cfg.bounds)
    print(json.dumps(summarize(history, cfg.bounds), sort_keys=True))
    return EXIT_OK


def cmd_validate_models(args, latency_fn=None, access_fn=None) -> int:
    if args.sweep:
        spec = json.loads(Path(args.sweep).read_text())
        count, seed = int(spec.get("count", 1000)), int(spec.get("seed", 0))
    else:
        count, seed = args.count, args.seed if args.seed is not None else 0
    if latency_fn is None and getattr(args, "latency_model", "corrected") == "uncorrected":
        latency_fn = kpi.latency_layer_uncorrected
    points = sweep.random_sweep(count, seed)
    rng = np.random.default_rng([seed, 1])
    devs = [sweep.compare(p, rng, latency_fn, access_fn) for p in points]
    rows = sweep.report_rows(devs)
    text = "\n".join(rows) + "\n"
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text)
    bad = sum(not d.ok for d in devs)
    print(f"{len(devs)} configs, {bad} with deviation")
    return EXIT_DEVIATION if bad else EXIT_OK


def cmd_deploy(args) -> int:
    net = NetworkConfig.from_json(Path(args.net).read_text())
    errs = validate(net)
    if errs:
        print("invalid network: " + "; ".join(errs), file=sys.stderr)
        return EXIT_VALIDATION
    rng = np.random.default_rng(args.seed or 0)
    layers = deploy.flatten(net)
    params = deploy.load_params(args.params) if args.params else deploy.random_parameters(layers, rng)
    x = np.load(args.input) if args.input else rng.uniform(-1, 1, (net.input_channels, net.input_length))
    bundle = deploy.build_bundle(net, params, args.array_size, _tech(args.tech_db), x, args.lmem_bits)
    path = bundle.write(args.out or "bundle")
    print(f"bundle written to {path}")
    return EXIT_OK


def trace_table(traces) -> str:
    rows = ["layer\trole\treads\twrites\tidles\tcycles"]
    for i, t in enumerate(traces):
        for role in ROLES:
            c = t.counts[role]
            rows.append(f"{i}\t{role}\t{c.reads}\t{c.writes}\t{c.idles}\t{t.cycles}")
    return "\n".join(rows) + "\n"


def cmd_simulate(args) -> int:
    try:
        bundle = deploy.load_bundle(args.bundle)
    except deploy.ChecksumMismatch as exc:
        print(f"refusing bundle: {exc}", file=sys.stderr)
        return EXIT_INTEGRITY
    inp = None
    if args.input:
        x = np.load(args.input)
        inp = Tensor(quantize_array(x, bundle.accel.feature_bits), bundle.accel.feature_bits)
    logits, traces = bundle.simulate(inp)
    out = Path(args.out or "sim_out")
    out.mkdir(parents=True, exist_ok=True)
    (out / "logits.json").write_text(json.dumps({"bits": logits.bits, "data": logits.data.ravel().tolist()}) + "\n")
    (out / "traces.tsv").write_text(trace_table(traces))
    cycles = sum(t.cycles for t in traces)
    print(f"{len(traces)} layers, {cycles} cycles")
    if inp is None and not np.array_equal(logits.data, bundle.output_ref.data):
        print("simulated logits differ from output.ref", file=sys.stderr)
        return EXIT_VALIDATION
    return EXIT_OK


def cmd_report(args) -> int:
    if args.history:
        history = search.SearchHistory.from_jsonl(Path(args.history).read_text())
        bounds = RunConfig.from_dict(json.loads(Path(args.config).read_text())).bounds if args.config \
            else search.Bounds()
        write_search_outputs(Path(args.out or "report_out"), history, bounds)
        print(json.dumps(summarize(history, bounds), sort_keys=True))
        return EXIT_OK
    if args.candidate:
        doc = json.loads(Path(args.candidate).read_text())
        cand = Candidate.from_dict(doc) if "network" in doc else Candidate(NetworkConfig.from_dict(doc), args.array_size)
        errs = validate(cand.net)
        if errs:
            print("invalid network: " + "; ".join(errs), file=sys.stderr)
            return EXIT_VALIDATION
        tech = _tech(args.tech_db)
        schedule, accel = deploy.deploy_candidate(cand, tech)
        report = kpi.kpi_report(schedule, accel, tech, args.period)
        doc = report.to_dict()
        doc["accelerator"] = accel.to_dict()
        print(json.dumps(doc, indent=2, sort_keys=True))
        return EXIT_OK
    print("report needs --history or --candidate", file=sys.stderr)
    return EXIT_USAGE


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="run configuration (JSON)")
    common.add_argument("--seed", type=int)
    common.add_argument("--tech-db", dest="tech_db", help="technology database file")
    common.add_argument("--out", help="output file or directory")
    common.add_argument("--workers", type=int)
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="npu-cosearch", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("search", parents=[common], help="run the co-search")
    s.add_argument("--budget", type=int)
    s.add_argument("--population", type=int)
    s.set_defaults(func=cmd_search)

    v = sub.add_parser("validate-models", parents=[common], help="analytical model vs simulator sweep")
    v.add_argument("--sweep", help="sweep spec JSON {count, seed}")
    v.add_argument("--count", type=int, default=1000)
    v.add_argument("--latency-model", dest="latency_model", choices=("corrected", "uncorrected"),
                   default="corrected", help="uncorrected = original skip series (negative control)")
    v.set_defaults(func=cmd_validate_models)

    d = sub.add_parser("deploy", parents=[common], help="build an accelerator bundle")
    d.add_argument("--net", required=True, help="network document (JSON)")
    d.add_argument("--params", help="parameters (.npz); random if omitted")
    d.add_argument("--input", help="example input (.npy, real-valued); random if omitted")
    d.add_argument("--array-size", dest="array_size", type=int, default=8)
    d.add_argument("--lmem-bits", dest="lmem_bits", type=int,
                   help="accumulator width; default is the sizing rule")
    d.set_defaults(func=cmd_deploy)

    m = sub.add_parser("simulate", parents=[common], help="simulate a bundle")
    m.add_argument("bundle")
    m.add_argument("--input", help="input (.npy); defaults to the bundle's input.ref")
    m.set_defaults(func=cmd_simulate)

    r = sub.add_parser("report", parents=[common], help="summaries from a history, or one candidate's KPIs")
    r.add_argument("--history")
    r.add_argument("--candidate", help="candidate or network document (JSON)")
    r.add_argument("--array-size", dest="array_size", type=int, default=8)
    r.add_argument("--period", type=int, default=kpi.DEFAULT_PERIOD)
    r.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, techdb.TechDatabaseError, OSError, json.JSONDecodeError, KeyError,
            deploy.DeployError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SimulationError as exc:
        print(f"simulation failed: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
