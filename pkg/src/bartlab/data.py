"""Datasets: CSV I/O, the synthetic single-participant generator, and
condition permutation for the null check.

CSV schema (UTF-8, LF line endings)::

    condition,p,trial,pumps,outcome
    sober,0.1,0,4,cashed
"""

from __future__ import annotations

import csv
import io
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import rng
from .model import Outcome, SubjectParams, TrialRecord, check_pop_probability
from .simulate import DesignMode, simulate_pumps, simulate_trial

HEADER = ["condition", "p", "trial", "pumps", "outcome"]

# Pumping rises with intoxication even though the pop probability rises too,
# which the pooled model cannot express. Pump counts stay low and choices
# noisy, so once conditions are shuffled the pooled model fits as well.
GEORGE_CONDITIONS = (("sober", 0.10), ("tipsy", 0.15), ("drunk", 0.20))
GEORGE_PARAMS = (
    SubjectParams(gamma_plus=0.1, beta=0.7),
    SubjectParams(gamma_plus=0.5, beta=0.7),
    SubjectParams(gamma_plus=1.2, beta=0.7),
)


class DataError(ValueError):
    """A dataset file or object that breaks the schema."""


@dataclass(frozen=True)
class Condition:
    label: str
    p: float


@dataclass
class Dataset:
    conditions: list[Condition]
    trials: list[TrialRecord] = field(default_factory=list)

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        seen = set()
        for c in self.conditions:
            check_pop_probability(c.p)
        for t in self.trials:
            if not 0 <= t.condition < len(self.conditions):
                raise DataError(f"trial {t.trial} references missing condition {t.condition}")
            key = (t.condition, t.trial)
            if key in seen:
                raise DataError(f"duplicate trial index {t.trial} in condition {t.condition}")
            seen.add(key)

    def by_condition(self, c: int) -> list[TrialRecord]:
        return [t for t in self.trials if t.condition == c]

    def pumps(self) -> np.ndarray:
        return np.array([t.pumps for t in self.trials])


def _parse_row(row, lineno, labels, conditions):
    if len(row) != len(HEADER):
        raise DataError(f"line {lineno}: expected {len(HEADER)} fields, got {len(row)}")
    label, p_s, trial_s, pumps_s, outcome_s = row
    try:
        p = float(p_s)
        trial = int(trial_s)
        pumps = int(pumps_s)
    except ValueError as exc:
        raise DataError(f"line {lineno}: {exc}") from None
    try:
        outcome = Outcome(outcome_s)
    except ValueError:
        raise DataError(f"line {lineno}: unknown outcome {outcome_s!r}") from None
    if not 0 < p < 1:
        raise DataError(f"line {lineno}: pop probability {p_s} outside (0, 1)")
    if label not in labels:
        labels[label] = len(conditions)
        conditions.append(Condition(label, p))
    elif conditions[labels[label]].p != p:
        raise DataError(f"line {lineno}: condition {label!r} has inconsistent p")
    try:
        return TrialRecord(labels[label], trial, pumps, outcome)
    except ValueError as exc:
        raise DataError(f"line {lineno}: {exc}") from None


def parse_csv(text: str) -> Dataset:
    reader = csv.reader(io.StringIO(text))
    header = next(reader, None)
    if header != HEADER:
        raise DataError(f"line 1: header must be {','.join(HEADER)}")
    labels, conditions, trials = {}, [], []
    for row in reader:
        if not row:
            continue
        trials.append(_parse_row(row, reader.line_num, labels, conditions))
    try:
        return Dataset(conditions, trials)
    except DataError:
        raise
    except ValueError as exc:
        raise DataError(str(exc)) from None


def load_csv(path) -> Dataset:
    return parse_csv(Path(path).read_text(encoding="utf-8"))


def format_csv(dataset: Dataset) -> str:
    out = io.StringIO()
    w = csv.writer(out, lineterminator="\n")
    w.writerow(HEADER)
    for t in dataset.trials:
        c = dataset.conditions[t.condition]
        w.writerow([c.label, repr(float(c.p)), t.trial, t.pumps, t.outcome.value])
    return out.getvalue()


def save_csv(dataset: Dataset, path) -> None:
    Path(path).write_text(format_csv(dataset), encoding="utf-8", newline="\n")


def synth_george(seed: int = 1, params=GEORGE_PARAMS, conditions=GEORGE_CONDITIONS,
                 trials_per_condition: int = 30) -> Dataset:
    """A seeded stand-in for the single-participant data: three conditions
    of ``trials_per_condition`` balloons each, simulated with popping."""
    if len(params) != len(conditions):
        raise ValueError("need one parameter set per condition")
    conds = [Condition(label, p) for label, p in conditions]
    trials = []
    for c, (cond, prm) in enumerate(zip(conds, params)):
        stream = rng.generator(seed, rng.SYNTH, c)
        for j in range(trials_per_condition):
            trials.append(simulate_trial(prm, cond.p, DesignMode.EXPERIMENT_DESIGN,
                                         rng_stream=stream, condition=c, trial=j))
    return Dataset(conds, trials)


def simulate_design(gamma, beta, design, seed: int) -> Dataset:
    """Simulate one dataset with popping for per-condition ``gamma``, ``beta``.

    ``design`` supplies ``pop_probs`` and ``trials_per_condition``. Values are
    used as given, negative ones included.
    """
    p = np.asarray(design.pop_probs, dtype=float)
    t = design.trials_per_condition
    u = rng.uniforms(seed, rng.TRIALS, np.arange(len(p)), t)
    pumps, popped, _ = simulate_pumps(np.asarray(gamma, dtype=float), np.asarray(beta, dtype=float),
                                      p, u, DesignMode.EXPERIMENT_DESIGN)
    trials = [
        TrialRecord(c, j, int(pumps[c, j]), Outcome.POPPED if popped[c, j] else Outcome.CASHED)
        for c in range(len(p)) for j in range(t)
    ]
    return Dataset([Condition(str(i), float(x)) for i, x in enumerate(p)], trials)


def permute_conditions(dataset: Dataset, seed: int) -> Dataset:
    """Shuffle whole trials between conditions.

    Per-condition trial counts are kept and each condition keeps its pop
    probability; only the (pumps, outcome) records move.
    """
    if len(dataset.conditions) < 2:
        raise ValueError("permutation needs at least two conditions")
    order = rng.generator(seed, rng.PERMUTE).permutation(len(dataset.trials))
    trials = [
        TrialRecord(slot.condition, slot.trial, src.pumps, src.outcome)
        for slot, src in zip(dataset.trials, (dataset.trials[i] for i in order))
    ]
    return Dataset(list(dataset.conditions), trials)


def outcome_multiset(dataset: Dataset) -> Counter:
    return Counter((t.pumps, t.outcome) for t in dataset.trials)
