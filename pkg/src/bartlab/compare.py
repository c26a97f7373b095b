"""Model comparison: bridge-sampling marginal likelihoods, Bayes factors and
PSIS leave-one-out cross-validation over single choices."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import stats
from scipy.special import logsumexp

from . import rng
from .diagnostics import basic_ess
from .infer import ConvergenceError, PosteriorSamples, SamplerConfig, _map, fit
from .model import ChoiceData, PriorSpec, build_model

log = logging.getLogger(__name__)

# -- pointwise log-likelihood ----------------------------------------------


def pointwise_loglik(samples: PosteriorSamples, dataset) -> np.ndarray:
    """Log-likelihood of every choice under every draw, shape (draws, choices).

    Pump decisions of popped trials are included; their censored cash-out
    is not an observation.
    """
    data = ChoiceData.from_dataset(dataset)
    model = samples.model
    if model.data.n_conditions != data.n_conditions:
        raise ValueError(
            f"samples were fitted to {model.data.n_conditions} conditions, dataset has {data.n_conditions}"
        )
    gamma, beta = model.condition_params(samples.flat())
    return data.pointwise(gamma, beta)


# -- generalized Pareto tail fit ---------------------------------------------


@dataclass(frozen=True)
class GpdFit:
    k: float
    sigma: float

    @property
    def has_tail(self) -> bool:
        return np.isfinite(self.k)


NO_TAIL = GpdFit(-math.inf, math.inf)


def fit_gpd(x) -> GpdFit:
    """Fit a generalized Pareto distribution (location 0) to exceedances.

    Zhang and Stephens' empirical-Bayes profile estimator, then the shape is
    shrunk toward 0.5 as ``(n * k + 5) / (n + 10)``. An all-equal sample has
    no tail to fit and returns ``NO_TAIL``.
    """
    x = np.sort(np.asarray(x, dtype=float))
    n = x.size
    if n < 5:
        raise ValueError(f"need at least 5 tail values, got {n}")
    if x[0] == x[-1]:
        return NO_TAIL
    prior = 3.0
    m = 30 + int(math.sqrt(n))
    j = np.arange(1, m + 1)
    x_star = x[int(n / 4 + 0.5) - 1]
    theta = 1.0 / x[-1] + (1.0 - np.sqrt(m / (j - 0.5))) / prior / x_star
    k = np.mean(np.log1p(-theta[:, None] * x[None, :]), axis=1)
    log_lik = n * (np.log(-theta / k) - k - 1.0)
    weights = np.exp(log_lik - logsumexp(log_lik))
    theta_hat = np.sum(theta * weights)
    k_hat = float(np.mean(np.log1p(-theta_hat * x)))
    sigma = -k_hat / theta_hat
    k_hat = (n * k_hat + 5.0) / (n + 10.0)
    return GpdFit(k_hat, float(sigma))


def gpd_quantile(p, k: float, sigma: float) -> np.ndarray:
    p = np.asarray(p, dtype=float)
    if k == 0:
        return -sigma * np.log1p(-p)
    return sigma * np.expm1(-k * np.log1p(-p)) / k


# -- PSIS-LOO ------------------------------------------------------------------


def psis_smooth(log_ratios) -> tuple[np.ndarray, float]:
    """Pareto-smooth one vector of log importance ratios.

    Returns the smoothed, truncated and normalised log weights and the tail
    shape estimate (``-inf`` when there is no tail to fit).
    """
    lw = np.asarray(log_ratios, dtype=float)
    lw = lw - lw.max()
    s = lw.size
    m = min(math.ceil(0.2 * s), math.ceil(3 * math.sqrt(s)))
    order = np.argsort(lw, kind="stable")
    tail_idx = order[-m:]
    cutoff = lw[order[-m - 1]]
    tail = np.exp(lw[tail_idx]) - np.exp(cutoff)
    k = -math.inf
    if m >= 5 and np.sort(tail)[int(m / 4 + 0.5) - 1] == 0 and np.any(tail > 0):
        # most exceedances underflow: the ratios span more than the double
        # range, so the tail is too heavy to smooth or even fit
        k = math.inf
    elif m >= 5 and np.any(tail > 0):
        gpd = fit_gpd(tail)
        if gpd.has_tail:
            k = gpd.k
            probs = (np.arange(1, m + 1) - 0.5) / m
            smoothed = np.log(gpd_quantile(probs, gpd.k, gpd.sigma) + np.exp(cutoff))
            lw = lw.copy()
            lw[tail_idx] = np.minimum(smoothed, 0.0)  # truncate at the largest raw weight
    return lw - logsumexp(lw), k


@dataclass
class LooResult:
    elpd: float
    se: float
    pointwise: np.ndarray
    pareto_k: np.ndarray

    @property
    def n_bad_k(self) -> int:
        """Observations whose k-hat exceeds 0.7."""
        return int(np.sum(self.pareto_k > 0.7))

    @property
    def max_k(self) -> float:
        return float(np.max(self.pareto_k)) if self.pareto_k.size else -math.inf


def _elpd_se(pointwise: np.ndarray) -> float:
    n = pointwise.size
    return float(math.sqrt(n * pointwise.var(ddof=1))) if n > 1 else 0.0


def psis_loo(loglik) -> LooResult:
    """PSIS leave-one-out from a (draws, observations) log-likelihood matrix."""
    ll = np.asarray(loglik, dtype=float)
    if ll.ndim != 2:
        raise ValueError("log-likelihood must be a (draws, observations) matrix")
    if ll.shape[0] < 100:
        raise ValueError(f"need at least 100 draws, got {ll.shape[0]}")
    n = ll.shape[1]
    elpd_i = np.empty(n)
    k = np.empty(n)
    for i in range(n):
        lw, k[i] = psis_smooth(-ll[:, i])
        elpd_i[i] = logsumexp(lw + ll[:, i])
    return LooResult(float(elpd_i.sum()), _elpd_se(elpd_i), elpd_i, k)


def elpd_difference(a: LooResult, b: LooResult) -> tuple[float, float]:
    """``elpd(a) - elpd(b)`` with the pointwise-difference standard error."""
    if a.pointwise.shape != b.pointwise.shape:
        raise ValueError("LOO results cover different observations")
    diff = a.pointwise - b.pointwise
    return float(diff.sum()), _elpd_se(diff)


# -- bridge sampling -------------------------------------------------------------


@dataclass
class BridgeResult:
    log_ml: float
    iterations: int
    rel_change: float
    converged: bool
    proposal_mean: np.ndarray
    proposal_cov: np.ndarray
    se: float = math.nan
    trace: list = field(default_factory=list, repr=False)


class BridgeConvergenceError(RuntimeError):
    def __init__(self, trace):
        super().__init__(f"bridge sampling did not converge in {len(trace)} iterations")
        self.trace = trace


def _split_halves(draws: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """(chains, iterations, dim) -> first halves and second halves of every chain."""
    half = draws.shape[1] // 2
    return draws[:, :half], draws[:, half : 2 * half]


def bridge_sample(samples, log_posterior_fn, n_proposal_draws: int | None = None,
                  tol: float = 1e-10, max_iter: int = 1000, seed: int = 0,
                  raise_on_failure: bool = True) -> BridgeResult:
    """Log marginal likelihood of an unnormalised posterior.

    Parameters
    ----------
    samples : PosteriorSamples or array_like
        Draws on the unconstrained scale, shaped (chains, iterations, dim)
        or (iterations, dim).
    log_posterior_fn : callable
        Unnormalised log posterior, vectorised over leading axes.
    n_proposal_draws : int, optional
        Draws from the normal proposal; defaults to the number of draws in
        the second halves.
    tol, max_iter
        The fixed-point iteration stops once the relative change in the
        estimate falls below ``tol``.

    Notes
    -----
    The first half of every chain fits a moment-matched multivariate normal
    proposal; the second half enters the Meng-Wong optimal-bridge iteration,
    with its effective size in place of its length.
    """
    draws = samples.unconstrained if isinstance(samples, PosteriorSamples) else np.asarray(samples, float)
    if draws.ndim == 2:
        draws = draws[None]
    if draws.ndim != 3:
        raise ValueError("draws must be shaped (chains, iterations, dim)")
    if draws.shape[0] * draws.shape[1] < 1000:
        raise ValueError("bridge sampling needs at least 1000 draws")
    fit_half, iter_half = _split_halves(draws)
    d = draws.shape[2]
    fit_flat = fit_half.reshape(-1, d)
    post = iter_half.reshape(-1, d)
    mean = fit_flat.mean(axis=0)
    cov = np.atleast_2d(np.cov(fit_flat, rowvar=False))
    n_post = len(post)
    n_prop = n_post if n_proposal_draws is None else int(n_proposal_draws)
    proposal = stats.multivariate_normal(mean, cov, allow_singular=False)
    z = rng.normals(seed, rng.BRIDGE, np.arange(n_prop), d)
    prop = mean + z @ np.linalg.cholesky(cov).T

    ess = [basic_ess(iter_half[..., j]) for j in range(d)] if iter_half.shape[1] >= 4 else []
    ess = [e for e in ess if e]
    n_eff = min(float(np.median(ess)), n_post) if ess else float(n_post)
    s1 = n_eff / (n_eff + n_prop)
    s2 = n_prop / (n_eff + n_prop)

    with np.errstate(over="ignore", invalid="ignore"):
        l1 = np.asarray(log_posterior_fn(post), float) - proposal.logpdf(post).reshape(n_post)
        l2 = np.asarray(log_posterior_fn(prop), float) - proposal.logpdf(prop).reshape(n_prop)
    if not np.all(np.isfinite(l1)):
        raise FloatingPointError("log posterior is not finite at a posterior draw")
    l2 = np.where(np.isfinite(l2), l2, -np.inf)
    l_star = float(np.median(l1))
    e1 = np.exp(l1 - l_star)
    e2 = np.exp(l2 - l_star)

    r, trace, rel = 1.0, [], math.inf
    for i in range(1, max_iter + 1):
        num = e2 / (s1 * e2 + s2 * r)
        den = 1.0 / (s1 * e1 + s2 * r)
        r_new = float(num.mean() / den.mean())
        rel = abs(r_new - r) / r_new
        r = r_new
        trace.append(math.log(r) + l_star)
        if rel < tol or not np.isfinite(tol):
            break
    # an infinite tolerance asks for no convergence check at all
    converged = bool(np.isfinite(tol) and rel < tol)
    if not converged and np.isfinite(tol) and raise_on_failure:
        raise BridgeConvergenceError(trace)
    num = e2 / (s1 * e2 + s2 * r)
    den = 1.0 / (s1 * e1 + s2 * r)
    rel_var = num.var(ddof=1) / (n_prop * num.mean() ** 2) + den.var(ddof=1) / (n_eff * den.mean() ** 2)
    return BridgeResult(trace[-1], len(trace), rel, converged, mean, cov,
                        float(math.sqrt(rel_var)), trace)


def bayes_factor(log_ml_1: float, log_ml_0: float) -> float:
    """``log BF_10``."""
    if not (np.isfinite(log_ml_1) and np.isfinite(log_ml_0)):
        raise ValueError("log marginal likelihoods must be finite")
    return float(log_ml_1) - float(log_ml_0)


# -- prior-width sweep -----------------------------------------------------------

SWEEP_COLUMNS = ["upper", "log_bf", "bridge_iters", "elpd_h0", "se_h0", "elpd_h1", "se_h1",
                 "elpd_diff", "se_diff", "max_pareto_k"]
BF_COLUMNS = ["log_bf", "bridge_iters"]
LOO_COLUMNS = ["elpd_h0", "se_h0", "elpd_h1", "se_h1", "elpd_diff", "se_diff", "max_pareto_k"]
METHODS = ("bf", "loo", "both")


def sweep_columns(method: str = "both") -> list[str]:
    if method not in METHODS:
        raise ValueError(f"method must be one of {METHODS}, got {method!r}")
    return ["upper"] + (BF_COLUMNS if method != "loo" else []) + (LOO_COLUMNS if method != "bf" else [])


@dataclass
class ModelFit:
    samples: PosteriorSamples
    bridge: BridgeResult | None
    loo: LooResult | None


@dataclass
class SweepRow:
    upper: float
    log_bf: float = math.nan
    bridge_iters: int = 0
    elpd_h0: float = math.nan
    se_h0: float = math.nan
    elpd_h1: float = math.nan
    se_h1: float = math.nan
    elpd_diff: float = math.nan
    se_diff: float = math.nan
    max_pareto_k: float = math.nan
    fits: dict = field(default_factory=dict, repr=False)
    errors: dict = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return not self.errors

    def values(self, columns=SWEEP_COLUMNS) -> list:
        return [getattr(self, c) for c in columns]


def evaluate_model(name: str, dataset, prior: PriorSpec, cfg: SamplerConfig, check: bool = True,
                   method: str = "both") -> ModelFit:
    """Fit one model, then compute its marginal likelihood and/or PSIS-LOO."""
    sweep_columns(method)
    model = build_model(name, dataset, prior)
    samples = fit(model, cfg=cfg, check=check)
    bridge = bridge_sample(samples, model.log_density, seed=cfg.seed) if method != "loo" else None
    loo = psis_loo(pointwise_loglik(samples, dataset)) if method != "bf" else None
    return ModelFit(samples, bridge, loo)


def prior_width_sweep(dataset, uppers, cfg: SamplerConfig = SamplerConfig(), workers: int = 1,
                      check: bool = True, method: str = "both") -> list[SweepRow]:
    """Compare the pooled model (H0) with the hierarchical one (H1) at each
    prior bound in ``uppers``; every bound widens all uniform priors.

    A failing cell (sampler diagnostics, bridge non-convergence) leaves its
    row's values missing and its error in ``row.errors``; the other rows
    are still computed.
    """
    sweep_columns(method)
    uppers = [float(u) for u in uppers]
    if not uppers:
        raise ValueError("need at least one prior bound")
    if any(b <= a for a, b in zip(uppers, uppers[1:])):
        raise ValueError("prior bounds must be strictly ascending")
    cells = [(u, name) for u in uppers for name in ("flat", "hier")]

    def one(cell):
        upper, name = cell
        try:
            return evaluate_model(name, dataset, PriorSpec(upper), cfg, check, method)
        except (ConvergenceError, BridgeConvergenceError, FloatingPointError, np.linalg.LinAlgError) as exc:
            log.warning("sweep cell U=%g %s failed: %s", upper, name, exc)
            return exc

    results = dict(zip(cells, _map(one, cells, workers)))
    rows = []
    for u in uppers:
        h0, h1 = results[(u, "flat")], results[(u, "hier")]
        row = SweepRow(upper=u)
        row.errors = {n: str(r) for n, r in (("flat", h0), ("hier", h1)) if isinstance(r, Exception)}
        if row.errors:
            rows.append(row)
            continue
        row.fits = {"flat": h0, "hier": h1}
        if method != "loo":
            row.log_bf = bayes_factor(h1.bridge.log_ml, h0.bridge.log_ml)
            row.bridge_iters = max(h0.bridge.iterations, h1.bridge.iterations)
        if method != "bf":
            row.elpd_h0, row.se_h0 = h0.loo.elpd, h0.loo.se
            row.elpd_h1, row.se_h1 = h1.loo.elpd, h1.loo.se
            row.elpd_diff, row.se_diff = elpd_difference(h1.loo, h0.loo)
            row.max_pareto_k = max(h0.loo.max_k, h1.loo.max_k)
        rows.append(row)
    return rows


def write_sweep_csv(rows, path, method: str = "both") -> None:
    columns = sweep_columns(method)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for row in rows:
            w.writerow([v if isinstance(v, int) else f"{v:.17g}" for v in row.values(columns)])
