"""Evolutionary network/accelerator co-search with randomized scalarization.

Each step after the initial random population draws a fresh weight vector
``lam_i ~ U[0, 1/b_i]``, scores the last ``s`` history entries with
``max_i lam_i * m_i`` and mutates the best (lowest score) one.

Population ordering: the window is sorted by descending score, so the
"last" element that gets mutated is the best candidate.
"""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional

import numpy as np

from . import kpi
from .deploy import DeployError, deploy_candidate
from .evaluator import EvaluatorFailure, EvaluatorSpec, evaluate
from .nn_ir import DEFAULT_SPACE, Candidate, SearchSpace, ShapeError, mutate_with_kind, sample_random
from .npu_sim import SimulationError
from .techdb import TechDatabase, UnknownMacro

METRIC_NAMES = ("error_rate", "power", "latency", "area")
# stand-in for "infinitely bad"; finite so scores and JSON stay well defined
SENTINEL = 1e30


@dataclass(frozen=True)
class Metrics:
    error_rate: float
    power: float
    latency: float
    area: float

    def as_array(self) -> np.ndarray:
        return np.array([self.error_rate, self.power, self.latency, self.area], dtype=np.float64)

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in METRIC_NAMES}

    @classmethod
    def failed(cls) -> "Metrics":
        return cls(1.0, SENTINEL, SENTINEL, SENTINEL)


@dataclass(frozen=True)
class Bounds:
    b_error: float = 0.07
    b_power: float = 5.0
    b_latency: float = 25_000.0
    b_area: float = 150_000.0

    def __post_init__(self):
        if min(self.as_array()) <= 0:
            raise ValueError("bounds must be positive")

    def as_array(self) -> np.ndarray:
        return np.array([self.b_error, self.b_power, self.b_latency, self.b_area], dtype=np.float64)

    def satisfied_by(self, m: Metrics) -> bool:
        return bool(np.all(m.as_array() <= self.as_array()))

    def to_dict(self) -> dict:
        return {"b_error": self.b_error, "b_power": self.b_power,
                "b_latency": self.b_latency, "b_area": self.b_area}


@dataclass(frozen=True)
class HistoryEntry:
    index: int
    candidate: Candidate
    metrics: Metrics
    seed: int
    origin: str = "random"
    parent: Optional[int] = None
    failure: Optional[str] = None

    def to_dict(self) -> dict:
        return {
            "index": self.index,
            "seed": self.seed,
            "origin": self.origin,
            "parent": self.parent,
            "failure": self.failure,
            "candidate": self.candidate.to_dict(),
            "metrics": self.metrics.to_dict(),
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "HistoryEntry":
        return cls(
            index=doc["index"], candidate=Candidate.from_dict(doc["candidate"]),
            metrics=Metrics(**doc["metrics"]), seed=doc["seed"], origin=doc["origin"],
            parent=doc["parent"], failure=doc["failure"],
        )


@dataclass
class SearchHistory:
    entries: list[HistoryEntry] = field(default_factory=list)

    def append(self, entry: HistoryEntry) -> None:
        if self.entries and entry.index <= self.entries[-1].index:
            raise ValueError("history indices must increase")
        self.entries.append(entry)

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def to_jsonl(self) -> str:
        return "".join(json.dumps(e.to_dict(), sort_keys=True) + "\n" for e in self.entries)

    @classmethod
    def from_jsonl(cls, text: str) -> "SearchHistory":
        h = cls()
        for line in text.splitlines():
            if line.strip():
                h.append(HistoryEntry.from_dict(json.loads(line)))
        return h


def sample_lambdas(bounds: Bounds, rng: np.random.Generator) -> np.ndarray:
    return rng.uniform(0.0, 1.0 / bounds.as_array())


def scalarize(m: Metrics, lam) -> float:
    return float(np.max(np.asarray(lam, dtype=np.float64) * m.as_array()))


def step_seed(root_seed: int, n: int) -> int:
    return int(np.random.SeedSequence([root_seed, n]).generate_state(1, np.uint64)[0])


def hardware_model(cand: Candidate, tech: TechDatabase, period: int = kpi.DEFAULT_PERIOD):
    schedule, accel = deploy_candidate(cand, tech)
    report = kpi.kpi_report(schedule, accel, tech, period)
    return report.power, report.latency, report.area


def evaluate_candidate(cand: Candidate, spec: EvaluatorSpec, tech: TechDatabase,
                       period: int = kpi.DEFAULT_PERIOD) -> tuple[Metrics, Optional[str]]:
    """Metrics for one candidate; failures yield sentinel metrics and a reason."""
    try:
        power, latency, area = hardware_model(cand, tech, period)
        err = evaluate(spec, cand.net)
    except (DeployError, ShapeError, SimulationError, UnknownMacro, EvaluatorFailure) as exc:
        return Metrics.failed(), f"{type(exc).__name__}: {exc}"
    return Metrics(err, power, float(latency), area), None


def _select_parent(window: list[HistoryEntry], lam) -> HistoryEntry:
    ranked = sorted(window, key=lambda e: scalarize(e.metrics, lam), reverse=True)
    return ranked[-1]


def run_search(
    space: SearchSpace = DEFAULT_SPACE,
    budget: int = 3000,
    pop_size: int = 100,
    bounds: Bounds = Bounds(),
    evaluator: EvaluatorSpec = EvaluatorSpec(),
    tech: Optional[TechDatabase] = None,
    seed: int = 0,
    period: int = kpi.DEFAULT_PERIOD,
    workers: int = 1,
    progress: Optional[Callable[[HistoryEntry], None]] = None,
) -> SearchHistory:
    """Run the co-search for ``budget`` evaluations.

    The initial ``pop_size`` random candidates are independent and may be
    evaluated on ``workers`` threads; every later step selects from the
    complete history prefix, so results do not depend on ``workers``.
    """
    if budget < 1 or not 1 <= pop_size <= budget:
        raise ValueError("need budget >= 1 and 1 <= pop_size <= budget")
    if tech is None:
        from .techdb import load_default
        tech = load_default()
    history = SearchHistory()

    def commit(n, cand, seed_n, origin, parent, result):
        metrics, failure = result
        entry = HistoryEntry(n, cand, metrics, seed_n, origin, parent, failure)
        history.append(entry)
        if progress:
            progress(entry)

    # initial population
    seeds = [step_seed(seed, n) for n in range(1, pop_size + 1)]
    cands = [sample_random(space, np.random.default_rng(s)) for s in seeds]
    run = lambda c: evaluate_candidate(c, evaluator, tech, period)
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run, cands))
    else:
        results = [run(c) for c in cands]
    for n, (c, s, r) in enumerate(zip(cands, seeds, results), 1):
        commit(n, c, s, "random", None, r)

    for n in range(pop_size + 1, budget + 1):
        s = step_seed(seed, n)
        rng = np.random.default_rng(s)
        lam = sample_lambdas(bounds, rng)
        parent = _select_parent(history.entries[-pop_size:], lam)
        kind, child = mutate_with_kind(parent.candidate, rng, space)
        commit(n, child, s, f"mutate:{kind}", parent.index, run(child))
    return history


def dominates(a: np.ndarray, b: np.ndarray) -> bool:
    return bool(np.all(a <= b) and np.any(a < b))


def pareto_front(history: Iterable[HistoryEntry], metrics: tuple[str, ...] = METRIC_NAMES) -> list[HistoryEntry]:
    entries = list(history)
    if not entries:
        raise ValueError("empty history")
    pts = np.array([[getattr(e.metrics, k) for k in metrics] for e in entries])
    order = np.lexsort(pts.T[::-1])  # sweep in lexicographic order
    front: list[int] = []
    for i in order:
        if not any(dominates(pts[j], pts[i]) for j in front):
            front = [j for j in front if not dominates(pts[i], pts[j])]
            front.append(i)
    return [entries[i] for i in sorted(front)]


def hypervolume_2d(points, ref) -> float:
    """Area dominated by ``points`` (minimization) and bounded by ``ref``."""
    rx, ry = ref
    pts = sorted((x, y) for x, y in points if x < rx and y < ry)
    hv = 0.0
    best_y = ry
    for x, y in pts:
        if y < best_y:
            hv += (rx - x) * (best_y - y)
            best_y = y
    return hv


def pareto_table(entries: list[HistoryEntry]) -> str:
    lines = ["index,error_rate,power_uw,latency_cycles,area_um2,array_size,feature_bits,weight_bits,blocks"]
    for e in entries:
        m, c = e.metrics, e.candidate
        lines.append(
            f"{e.index},{m.error_rate!r},{m.power!r},{m.latency!r},{m.area!r},{c.array_size},"
            f"{c.net.quant.feature_bits},{c.net.quant.weight_bits},{len(c.net.blocks)}"
        )
    return "\n".join(lines) + "\n"
