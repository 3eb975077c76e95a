"""Fidelity / sparsity metrics and fixed-sparsity removal sweeps.

Every removal goes through token drops: a token-level element is one
(node, position) token, a node-level element is all tokens of that node
(its feature row becomes zero).  Graph structure never changes.
"""

from __future__ import annotations

import csv
import io
import json
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import numkernel as nk
from .errors import ConfigError, InputError
from .explain import METHODS, Explanation, explain
from .graphdata import PropagationEvent, kfold_indices
from .model import BiGcnModel, forward

DEFAULT_LEVELS = tuple(round(0.1 * i, 1) for i in range(10))
CSV_COLUMNS = ("method", "dataset", "sparsity", "fidelity_mean", "fidelity_std", "fid_sparsity")


@dataclass(frozen=True)
class EvalConfig:
    sparsity_levels: tuple[float, ...] = DEFAULT_LEVELS
    threshold: float = 0.01
    methods: tuple[str, ...] = METHODS
    folds: int = 5
    seed: int = 0
    eps: float = nk.DEFAULT_EPS
    mode: str = "conserving"

    def validate(self):
        for level in self.sparsity_levels:
            check_level(level)
        if not self.threshold > 0:
            raise ConfigError(f"threshold must be > 0, got {self.threshold}")
        bad = [m for m in self.methods if m not in METHODS]
        if bad:
            raise ConfigError(f"unknown method(s) {bad}; valid methods: {', '.join(METHODS)}")
        if self.folds < 1:
            raise ConfigError("folds must be >= 1")


def check_level(level: float) -> float:
    if not 0.0 <= level < 1.0:
        raise ConfigError(f"sparsity level must lie in [0, 1), got {level}")
    return float(level)


def total_elements(explanation: Explanation, event: PropagationEvent) -> int:
    return event.num_tokens if explanation.is_token_level else event.num_nodes


def identified(explanation: Explanation, threshold: float = 0.01) -> list:
    """Elements scoring above ``threshold``, most important first.

    Ties keep (node, position) order, so reruns remove the same set.
    """
    picked = [(s, e) for s, e in explanation.elements() if s > threshold]
    return sorted(picked, key=lambda se: -se[0])  # sorted() is stable


def drops_for(explanation: Explanation, event: PropagationEvent, elements) -> frozenset:
    if explanation.is_token_level:
        return frozenset(elements)
    return frozenset((v, t) for v in elements for t in range(len(event.posts[v].tokens)))


def prediction_changes(model: BiGcnModel, event: PropagationEvent, explanation: Explanation, elements) -> bool:
    if not elements:
        return False
    logits = forward(model, event, drops_for(explanation, event, elements)).logits
    return int(np.argmax(logits)) != explanation.predicted


def _check_pairs(events, explanations):
    if not events:
        raise InputError("fidelity is undefined on an empty event list")
    if len(events) != len(explanations):
        raise InputError("need exactly one explanation per event")
    if len({x.method for x in explanations}) > 1:
        raise InputError("explanations must all come from the same method")
    for ev, x in zip(events, explanations):
        if ev.event_id != x.event_id:
            raise InputError(f"explanation for {x.event_id!r} paired with event {ev.event_id!r}")


def fidelity(model, events: Sequence[PropagationEvent], explanations: Sequence[Explanation],
             threshold: float = 0.01) -> float:
    """Fraction of events whose prediction flips once every identified element is removed."""
    _check_pairs(events, explanations)
    flips = 0
    for ev, x in zip(events, explanations):
        elems = [e for _, e in identified(x, threshold)]
        flips += prediction_changes(model, ev, x, elems)
    return flips / len(events)


def sparsity(explanation: Explanation, event: PropagationEvent, threshold: float = 0.01) -> float:
    """One minus the identified fraction of the event's elements."""
    total = total_elements(explanation, event)
    return 1.0 - len(identified(explanation, threshold)) / total


def removal_cap(level: float, total: int) -> int:
    """Most elements that may be removed at a given sparsity level."""
    check_level(level)
    # round first so e.g. (1 - 0.7) * 10 does not ceil to 4
    return int(math.ceil(round((1.0 - level) * total, 9)))


def removal_set(explanation: Explanation, event: PropagationEvent, level: float, threshold: float = 0.01):
    ranked = [e for _, e in identified(explanation, threshold)]
    return ranked[: removal_cap(level, total_elements(explanation, event))]


def fidelity_at_sparsity(
    model: BiGcnModel,
    events: Sequence[PropagationEvent],
    method: str,
    level: float,
    threshold: float = 0.01,
    explanations: Sequence[Explanation] | None = None,
) -> float:
    """Fidelity when removal stops at the sparsity level's element budget."""
    check_level(level)
    if explanations is None:
        explanations = [explain(model, ev, method) for ev in events]
    _check_pairs(events, explanations)
    flips = sum(
        prediction_changes(model, ev, x, removal_set(x, ev, level, threshold))
        for ev, x in zip(events, explanations)
    )
    return flips / len(events)


@dataclass
class EvalRow:
    method: str
    dataset: str
    sparsity: float
    fidelity_mean: float
    fidelity_std: float
    fid_sparsity: float


@dataclass
class MethodSummary:
    """Threshold-only metrics (no sparsity cap), averaged over folds."""

    method: str
    fidelity_mean: float
    fidelity_std: float
    sparsity_mean: float
    sparsity_std: float
    fid_sparsity: float
    avg_fidelity_over_levels: float
    explain_seconds: float


@dataclass
class EvalReport:
    dataset: str
    config: EvalConfig
    rows: list[EvalRow] = field(default_factory=list)
    summaries: list[MethodSummary] = field(default_factory=list)
    per_fold: dict = field(default_factory=dict)

    def row(self, method: str, level: float) -> EvalRow:
        for r in self.rows:
            if r.method == method and math.isclose(r.sparsity, level):
                return r
        raise KeyError((method, level))

    def summary(self, method: str) -> MethodSummary:
        return next(s for s in self.summaries if s.method == method)

    def curves(self) -> dict:
        out = {}
        for m in self.config.methods:
            rows = [r for r in self.rows if r.method == m]
            out[m] = {
                "sparsity": [r.sparsity for r in rows],
                "fidelity_mean": [r.fidelity_mean for r in rows],
                "fidelity_std": [r.fidelity_std for r in rows],
            }
        return out

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(CSV_COLUMNS)
        for r in self.rows:
            writer.writerow([r.method, r.dataset, repr(r.sparsity), repr(r.fidelity_mean),
                             repr(r.fidelity_std), repr(r.fid_sparsity)])
        return buf.getvalue()

    def to_json(self, include_runtime: bool = True) -> str:
        summaries = [asdict(s) for s in self.summaries]
        if not include_runtime:
            for s in summaries:
                s.pop("explain_seconds")
        payload = {
            "dataset": self.dataset,
            "config": asdict(self.config),
            "rows": [asdict(r) for r in self.rows],
            "summaries": summaries,
            "curves": self.curves(),
            "per_fold": self.per_fold,
        }
        return json.dumps(payload, indent=1, sort_keys=True) + "\n"


def _mean_std(values):
    arr = np.asarray(values, dtype=np.float64)
    return float(arr.mean()), float(arr.std())


def explain_all(model, events, method, config: EvalConfig, jobs: int = 1) -> list[Explanation]:
    def one(ev):
        return explain(model, ev, method, eps=config.eps, mode=config.mode)

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(one, events))
    return [one(ev) for ev in events]


def sweep(
    model: BiGcnModel,
    events: Sequence[PropagationEvent],
    methods: Sequence[str] | None = None,
    config: EvalConfig = EvalConfig(),
    dataset: str = "dataset",
    jobs: int = 1,
) -> EvalReport:
    """Fidelity over the sparsity grid for each method, mean/std over seeded folds."""
    if methods is not None:
        config = EvalConfig(**{**asdict(config), "methods": tuple(methods)})
    config.validate()
    if not events:
        raise InputError("cannot evaluate an empty event list")
    folds = kfold_indices(len(events), min(config.folds, len(events)), config.seed)
    report = EvalReport(dataset, config)
    for method in config.methods:
        start = time.perf_counter()
        explanations = explain_all(model, events, method, config, jobs)
        elapsed = time.perf_counter() - start
        fold_events = [[events[i] for i in f] for f in folds]
        fold_expl = [[explanations[i] for i in f] for f in folds]

        per_level = {}
        for level in config.sparsity_levels:
            per_level[level] = [
                fidelity_at_sparsity(model, fe, method, level, config.threshold, fx)
                for fe, fx in zip(fold_events, fold_expl)
            ]
            mean, std = _mean_std(per_level[level])
            report.rows.append(EvalRow(method, dataset, float(level), mean, std, mean * float(level)))

        fid = [fidelity(model, fe, fx, config.threshold) for fe, fx in zip(fold_events, fold_expl)]
        spa = [
            float(np.mean([sparsity(x, ev, config.threshold) for ev, x in zip(fe, fx)]))
            for fe, fx in zip(fold_events, fold_expl)
        ]
        fid_m, fid_s = _mean_std(fid)
        spa_m, spa_s = _mean_std(spa)
        level_avg = float(np.mean([r.fidelity_mean for r in report.rows if r.method == method]))
        report.summaries.append(
            MethodSummary(method, fid_m, fid_s, spa_m, spa_s, fid_m * spa_m, level_avg, elapsed)
        )
        report.per_fold[method] = {
            "fidelity": fid,
            "sparsity": spa,
            "fidelity_at_level": {repr(k): v for k, v in per_level.items()},
        }
    return report
