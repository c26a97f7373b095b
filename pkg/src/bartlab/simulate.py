"""Seeded generative simulation of the BART.

Two simulators share the same trial distribution. :func:`simulate_trial`
walks one balloon decision by decision. The bulk prior predictive runs use
an inverse-CDF sampler that needs one uniform per trial: with
``R_n = P(pumps >= n)`` known in closed form, ``pumps = #{n : u < R_n}``.
One uniform per trial means both design modes see common random numbers,
and a pop can only shorten a trial.
"""

from __future__ import annotations

import csv
import enum
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.special import log_expit

from . import rng
from .model import Outcome, PriorSpec, SubjectParams, TrialRecord, check_pop_probability, omega, theta

log = logging.getLogger(__name__)

QUANTILE_LEVELS = (0.025, 0.25, 0.5, 0.75, 0.975)
NEGATIVE_FLOOR = 1e-6
CHUNK = 1024  # simulations per work unit; fixed so output never depends on workers


class DesignMode(enum.Enum):
    LIKELIHOOD_ONLY = "likelihood"
    EXPERIMENT_DESIGN = "experiment"


@dataclass(frozen=True)
class SimConfig:
    n_sims: int = 200
    trials_per_sim: int = 30
    pop_probs: tuple = (0.10, 0.15, 0.20)
    seed: int = 20200601
    max_pumps: int = 500
    workers: int = 1

    def __post_init__(self):
        if self.n_sims < 1:
            raise ValueError("n_sims must be >= 1")
        if self.trials_per_sim < 1:
            raise ValueError("trials_per_sim must be >= 1")
        if self.max_pumps < 1:
            raise ValueError("max_pumps must be >= 1")
        if not len(self.pop_probs):
            raise ValueError("pop_probs must not be empty")
        check_pop_probability(self.pop_probs)


@dataclass
class PredictiveSummary:
    """Per-simulation pump statistics for one pop probability."""

    p: float
    upper: float
    mode: DesignMode
    mean_pumps: np.ndarray
    var_pumps: np.ndarray
    truncated: np.ndarray
    pumps: np.ndarray = field(repr=False)
    popped: np.ndarray = field(repr=False)
    params: np.ndarray = field(repr=False)

    @property
    def quantiles(self) -> np.ndarray:
        return np.quantile(self.mean_pumps, QUANTILE_LEVELS)

    @property
    def standard_error(self) -> np.ndarray:
        """Standard error of each simulation's mean pump count."""
        return np.sqrt(self.var_pumps / self.pumps.shape[1])


def simulate_trial(params: SubjectParams, p: float, mode: DesignMode, max_pumps: int = 500,
                   rng_stream: np.random.Generator | None = None, condition: int = 0,
                   trial: int = 0) -> TrialRecord:
    """Play one balloon decision by decision.

    A pop is checked after each pump (experiment design only). A
    likelihood-only run that reaches ``max_pumps`` comes back cashed and
    flagged as truncated.
    """
    check_pop_probability(p)
    r = rng_stream if rng_stream is not None else np.random.default_rng()
    w = omega(params.gamma_plus, p)
    pumps = 0
    while pumps < max_pumps:
        if r.random() >= theta(params.beta, w, pumps + 1):
            return TrialRecord(condition, trial, pumps, Outcome.CASHED)
        pumps += 1
        if mode is DesignMode.EXPERIMENT_DESIGN and r.random() < p:
            return TrialRecord(condition, trial, pumps, Outcome.POPPED)
    return TrialRecord(condition, trial, pumps, Outcome.CASHED, truncated=True)


def simulate_pumps(gamma, beta, p, u, mode: DesignMode, max_pumps: int = 500):
    """Inverse-CDF trial simulation for many rows at once.

    Parameters
    ----------
    gamma, beta, p : array_like, shape (R,)
        Per-row propensity, consistency and pop probability.
    u : np.ndarray, shape (R, T)
        One open-interval uniform per trial.

    Returns
    -------
    pumps : np.ndarray of int, shape (R, T)
    popped : np.ndarray of bool, shape (R, T)
    truncated : np.ndarray of bool, shape (R, T)
    """
    gamma = np.asarray(gamma, dtype=float)
    beta = np.asarray(beta, dtype=float)
    p = np.broadcast_to(np.asarray(p, dtype=float), gamma.shape)
    w = -gamma / np.log1p(-p)
    log_survive = np.log1p(-p)
    e = -np.log(u)
    e_max = e.max(initial=0.0)
    # a[r, n-1] = -log P(pumps >= n), built in blocks until every row exceeds e
    blocks, offset = [], np.zeros(len(gamma))
    for start in range(0, max_pumps, 64):
        k = np.arange(start + 1, min(start + 64, max_pumps) + 1, dtype=float)
        blk = offset[:, None] - np.cumsum(log_expit(-beta[:, None] * (k - w[:, None])), axis=1)
        offset = blk[:, -1]
        if mode is DesignMode.EXPERIMENT_DESIGN:
            blk = blk - (k - 1.0) * log_survive[:, None]
        blocks.append(blk)
        if len(gamma) == 0 or blk[:, -1].min() > e_max:
            break
    a = np.concatenate(blocks, axis=1)
    pumps = np.empty(u.shape, dtype=np.int64)
    for r in range(len(gamma)):
        pumps[r] = np.searchsorted(a[r], e[r], side="left")
    truncated = pumps == max_pumps
    if mode is DesignMode.EXPERIMENT_DESIGN:
        a_at = np.take_along_axis(a, np.maximum(pumps - 1, 0), axis=1)
        popped = (pumps >= 1) & (e <= a_at - log_survive[:, None]) & ~truncated
    else:
        popped = np.zeros(u.shape, dtype=bool)
    return pumps, popped, truncated


def _pump_stats(pumps):
    t = pumps.shape[-1]
    mean = pumps.mean(axis=-1)
    var = pumps.var(axis=-1, ddof=1) if t > 1 else np.zeros(pumps.shape[:-1])
    return mean, var


def _chunks(n):
    return [np.arange(s, min(s + CHUNK, n), dtype=np.uint64) for s in range(0, n, CHUNK)]


def _run_chunks(fn, n, workers):
    chunks = _chunks(n)
    if workers > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(workers) as ex:
            parts = list(ex.map(fn, chunks))
    else:
        parts = [fn(c) for c in chunks]
    return parts


def prior_predictive_flat(prior: PriorSpec, cfg: SimConfig, mode: DesignMode) -> list[PredictiveSummary]:
    """Prior predictive pump statistics for the flat model, one summary per
    pop probability. Participant ``i`` keeps the same parameter draw across
    pop probabilities, priors and modes."""
    n_p, t = len(cfg.pop_probs), cfg.trials_per_sim

    def work(idx):
        params = prior.upper * rng.uniforms(cfg.seed, rng.PARAMS, idx, 2)
        u = rng.uniforms(cfg.seed, rng.TRIALS, idx, n_p * t)
        out = []
        for j, p in enumerate(cfg.pop_probs):
            out.append(simulate_pumps(params[:, 0], params[:, 1], np.full(len(idx), p),
                                      u[:, j * t:(j + 1) * t], mode, cfg.max_pumps))
        return params, out

    parts = _run_chunks(work, cfg.n_sims, cfg.workers)
    params = np.concatenate([pr for pr, _ in parts])
    summaries = []
    for j, p in enumerate(cfg.pop_probs):
        pumps = np.concatenate([o[j][0] for _, o in parts])
        popped = np.concatenate([o[j][1] for _, o in parts])
        trunc = np.concatenate([o[j][2] for _, o in parts])
        mean, var = _pump_stats(pumps)
        summaries.append(PredictiveSummary(p, prior.upper, mode, mean, var, trunc.sum(axis=1),
                                           pumps, popped, params))
    return summaries


@dataclass
class HierPredictive:
    """Condition-level prior predictive statistics for the hierarchical model.

    ``mean_diff[:, i-1]`` is ``mean_i - mean_0``, and likewise for variances.
    """

    upper: float
    mode: DesignMode
    pop_probs: tuple
    mean_pumps: np.ndarray
    var_pumps: np.ndarray
    truncated: np.ndarray
    hyper: np.ndarray
    floored: int

    @property
    def mean_diff(self) -> np.ndarray:
        return self.mean_pumps[:, 1:] - self.mean_pumps[:, :1]

    @property
    def var_diff(self) -> np.ndarray:
        return self.var_pumps[:, 1:] - self.var_pumps[:, :1]

    def quantiles(self, which: str = "mean") -> np.ndarray:
        d = self.mean_diff if which == "mean" else self.var_diff
        return np.quantile(d, QUANTILE_LEVELS, axis=0)


def prior_predictive_hier(prior: PriorSpec, cfg: SimConfig, mode: DesignMode,
                          n_conditions: int = 3) -> HierPredictive:
    """Simulate condition differences under the hierarchical prior.

    ``cfg.pop_probs`` gives one probability per condition, or a single value
    shared by all of them. Negative condition-level draws are floored at
    ``1e-6``; the number floored is reported.
    """
    if n_conditions < 2:
        raise ValueError("need at least two conditions to form differences")
    probs = tuple(cfg.pop_probs)
    if len(probs) == 1:
        probs = probs * n_conditions
    if len(probs) != n_conditions:
        raise ValueError(f"got {len(probs)} pop probabilities for {n_conditions} conditions")
    c, t = n_conditions, cfg.trials_per_sim
    p_rows = np.array(probs)

    def work(idx):
        v = rng.uniforms(cfg.seed, rng.PARAMS, idx, 4 + 2 * c)
        hyper = prior.upper * v[:, :4]
        z = rng.normals(cfg.seed, rng.PARAMS_Z, idx, 2 * c)
        gamma = hyper[:, 0:1] + hyper[:, 1:2] * z[:, :c]
        beta = hyper[:, 2:3] + hyper[:, 3:4] * z[:, c:]
        floored = int(np.sum(gamma < 0) + np.sum(beta < 0))
        gamma = np.maximum(gamma, NEGATIVE_FLOOR)
        beta = np.maximum(beta, NEGATIVE_FLOOR)
        u = rng.uniforms(cfg.seed, rng.TRIALS, idx, c * t).reshape(len(idx) * c, t)
        pumps, _, trunc = simulate_pumps(gamma.ravel(), beta.ravel(), np.tile(p_rows, len(idx)),
                                         u, mode, cfg.max_pumps)
        mean, var = _pump_stats(pumps.reshape(len(idx), c, t))
        return hyper, mean, var, trunc.reshape(len(idx), c, t).sum(axis=2), floored

    parts = _run_chunks(work, cfg.n_sims, cfg.workers)
    def cat(i):
        return np.concatenate([pt[i] for pt in parts])

    floored = sum(pt[4] for pt in parts)
    if floored:
        log.info("floored %d negative condition-level draws at %g", floored, NEGATIVE_FLOOR)
    return HierPredictive(prior.upper, mode, probs, cat(1), cat(2), cat(3), cat(0), floored)


@dataclass(frozen=True)
class TailRow:
    upper: float
    mode: DesignMode
    quantiles: tuple
    q99: float
    max: float
    median: float


def tail_sensitivity_sweep(uppers, cfg: SimConfig, mode: DesignMode | None = None,
                           p: float = 0.10) -> list[TailRow]:
    """Per-U quantiles of per-participant mean pumps at a fixed pop
    probability, for one design mode or (``mode=None``) both."""
    uppers = [float(x) for x in uppers]
    if not uppers:
        raise ValueError("uppers must not be empty")
    if any(b <= a for a, b in zip(uppers, uppers[1:])):
        raise ValueError("uppers must be strictly ascending")
    modes = [mode] if mode is not None else list(DesignMode)
    sub = SimConfig(cfg.n_sims, cfg.trials_per_sim, (p,), cfg.seed, cfg.max_pumps, cfg.workers)
    rows = []
    for m in modes:
        for upper in uppers:
            (s,) = prior_predictive_flat(PriorSpec(upper), sub, m)
            rows.append(TailRow(upper, m, tuple(s.quantiles), float(np.quantile(s.mean_pumps, 0.99)),
                                float(s.mean_pumps.max()), float(np.median(s.mean_pumps))))
    return rows


def write_summary_csv(summaries, path) -> None:
    """Write flat prior predictive summaries, one row per simulation."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["sim_id", "p", "upper", "mode", "mean_pumps", "var_pumps", "truncated"])
        for s in summaries:
            for i in range(len(s.mean_pumps)):
                w.writerow([i, f"{s.p:.17g}", f"{s.upper:.17g}", s.mode.value,
                            f"{s.mean_pumps[i]:.17g}", f"{s.var_pumps[i]:.17g}", int(s.truncated[i])])


def write_hier_csv(result: HierPredictive, path) -> None:
    """Write hierarchical prior predictive statistics, one row per simulation
    and condition."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["sim_id", "condition", "p", "upper", "mode", "mean_pumps", "var_pumps", "truncated"])
        n, c = result.mean_pumps.shape
        for i in range(n):
            for j in range(c):
                w.writerow([i, j, f"{result.pop_probs[j]:.17g}", f"{result.upper:.17g}",
                            result.mode.value, f"{result.mean_pumps[i, j]:.17g}",
                            f"{result.var_pumps[i, j]:.17g}", int(result.truncated[i, j])])
