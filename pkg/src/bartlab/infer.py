"""Adaptive random-walk Metropolis, parameter recovery and simulation-based
calibration.

All chains advance together so the log density is evaluated once per
iteration for the whole batch. Each chain draws its proposals from its own
seeded stream, and the covariance and step size adapt per chain during
warmup, then stay frozen.
"""

from __future__ import annotations

import csv
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np
from scipy import optimize, stats

from . import rng
from .data import Condition, Dataset, simulate_design
from .diagnostics import basic_ess, bulk_ess, split_rhat
from .model import PriorSpec, SubjectParams, build_model

log = logging.getLogger(__name__)

_TARGET_ACCEPT = {1: 0.44, 2: 0.35, 3: 0.31, 4: 0.28}


@dataclass(frozen=True)
class SamplerConfig:
    n_chains: int = 4
    warmup: int = 2000
    samples: int = 2000
    seed: int = 1
    target_accept: float | None = None
    rhat_max: float = 1.05
    ess_min: float = 100.0
    init_starts: int = 4

    def __post_init__(self):
        if self.n_chains < 1 or self.warmup < 0 or self.samples < 1:
            raise ValueError("need n_chains >= 1, warmup >= 0 and samples >= 1")

    def target(self, dim: int) -> float:
        if self.target_accept is not None:
            return self.target_accept
        return _TARGET_ACCEPT.get(dim, 0.234)


@dataclass
class Diagnostics:
    rhat: dict
    ess: dict
    accept_rate: np.ndarray

    def failures(self, rhat_max: float, ess_min: float) -> list[str]:
        bad = []
        for name, r in self.rhat.items():
            if r is not None and r > rhat_max:
                bad.append(f"{name}: R-hat {r:.3f} > {rhat_max}")
        for name, e in self.ess.items():
            if e is not None and e < ess_min:
                bad.append(f"{name}: ESS {e:.0f} < {ess_min:g}")
        return bad

    def to_dict(self) -> dict:
        return {"rhat": self.rhat, "ess_bulk": self.ess,
                "accept_rate": [float(a) for a in self.accept_rate]}


@dataclass
class PosteriorSamples:
    """Draws shaped (chain, iteration, parameter) on both scales."""

    draws: np.ndarray
    names: list[str]
    unconstrained: np.ndarray
    unconstrained_names: list[str]
    model: object = field(repr=False)
    diagnostics: Diagnostics | None = None

    @property
    def n_chains(self) -> int:
        return self.draws.shape[0]

    @property
    def n_iter(self) -> int:
        return self.draws.shape[1]

    def flat(self, unconstrained: bool = False) -> np.ndarray:
        x = self.unconstrained if unconstrained else self.draws
        return x.reshape(-1, x.shape[-1])

    def __getitem__(self, name: str) -> np.ndarray:
        return self.draws[..., self.names.index(name)]

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["chain", "iter", *self.names])
            for c in range(self.n_chains):
                for i in range(self.n_iter):
                    w.writerow([c, i, *(f"{v:.17g}" for v in self.draws[c, i])])


class ConvergenceError(RuntimeError):
    """Raised by :func:`fit` when diagnostics breach their thresholds."""

    def __init__(self, failures, samples):
        super().__init__("sampler diagnostics failed: " + "; ".join(failures))
        self.failures = failures
        self.samples = samples


def diagnostics(samples: PosteriorSamples, accept_rate=None) -> Diagnostics:
    if samples.n_chains < 2 or samples.n_iter < 4:
        raise ValueError("diagnostics need at least 2 chains of 4 draws")
    rhat, ess = {}, {}
    for j, name in enumerate(samples.names):
        x = samples.draws[..., j]
        rhat[name] = split_rhat(x)
        ess[name] = bulk_ess(x)
    if accept_rate is None:
        accept_rate = np.full(samples.n_chains, np.nan)
    return Diagnostics(rhat, ess, np.asarray(accept_rate))


def _check_bounds(model, draws):
    upper = model.prior.upper
    if model.name == "hier":
        bounded = draws[..., :4]
    else:
        bounded = draws
    if np.any(~((bounded >= 0) & (bounded <= upper))):
        raise AssertionError("constrained draw outside its prior support")


def _warmup_windows(warmup: int) -> list[int]:
    """Iterations at which the proposal covariance is re-estimated."""
    return sorted({int(warmup * f) for f in (0.1, 0.25, 0.5, 0.9)} - {0})


def _neg_hessian(model, x, h=1e-5):
    """Negative Hessian of the log density by central differences of the
    analytic gradient."""
    eye = np.eye(len(x)) * h
    _, gp = model.log_density_grad(x + eye)
    _, gm = model.log_density_grad(x - eye)
    hess = (gp - gm) / (2 * h)
    return -0.5 * (hess + hess.T)


def _optimised_init(model, stream, n_starts: int):
    """Best of ``n_starts`` local optima from uniform(-2, 2) starts, with
    the Laplace covariance there.

    Keeps chains out of the low-density local modes the hierarchical
    posterior can have, without any cross-chain communication.
    """

    def objective(u):
        lp, grad = model.log_density_grad(u)
        return (-lp, -grad) if np.isfinite(lp) else (np.inf, np.zeros_like(u))

    best, best_f = None, np.inf
    for _ in range(n_starts):
        x0 = stream.uniform(-2, 2, model.dim)
        res = optimize.minimize(objective, x0, jac=True, method="L-BFGS-B")
        if np.isfinite(res.fun) and res.fun < best_f:
            best, best_f = res.x, res.fun
    if best is None:
        return stream.uniform(-2, 2, model.dim), np.eye(model.dim)
    w, v = np.linalg.eigh(_neg_hessian(model, best))
    w = np.clip(w, 1e-2, None)
    return best, (v / w) @ v.T


class _Coords:
    """Coordinates a random-walk step is taken in, with the log density
    correction for sampling there instead of on the model's own scale."""

    def __init__(self, fwd=None, inv=None, log_det=None, block=None, prior_only=False):
        self.identity = fwd is None
        self.fwd = fwd or (lambda u: u)
        self.inv = inv or (lambda v: v)
        self.log_det = log_det or (lambda u: 0.0)
        self.block = block
        # the step leaves the likelihood unchanged, so only the prior is
        # re-evaluated
        self.prior_only = prior_only


def _coordinate_systems(model) -> list[_Coords]:
    if hasattr(model, "to_coefficients"):
        return [
            _Coords(),
            _Coords(model.to_coefficients, model.from_coefficients, model.log_det_coefficients),
            _Coords(model.to_log_coefficients, model.from_log_coefficients, model.log_det_log_coefficients),
        ]
    if not hasattr(model, "to_centred"):
        return [_Coords()]
    n = model.n_cond
    centred = dict(fwd=model.to_centred, inv=model.from_centred, log_det=model.log_det_centred)
    coefs = dict(fwd=model.to_centred_coefficients, inv=model.from_centred_coefficients,
                 log_det=model.log_det_centred_coefficients)
    return (
        [_Coords(block=np.r_[0, 1, 4:4 + n]), _Coords(block=np.r_[2, 3, 4 + n:4 + 2 * n])]
        + [_Coords(**centred, block=np.array([4 + i, 4 + n + i])) for i in range(n)]
        + [_Coords(**coefs, block=np.array([4 + i, 4 + n + i])) for i in range(n)]
        + [_Coords(**coefs)]
        + [_Coords(**centred, block=np.array([0, 1]), prior_only=True)] * 3
        + [_Coords(**centred, block=np.array([2, 3]), prior_only=True)] * 3
    )


class _Adapter:
    """Per-chain proposal covariance and step size for one coordinate system."""

    def __init__(self, m, d, chol, target):
        self.d = d
        self.chol = chol
        self.target = target
        self.log_scale = np.full(m, np.log(2.38 / np.sqrt(d)))
        self._reset()

    def _reset(self):
        self.n = 0
        self.sum = 0.0
        self.outer = 0.0

    def step(self, noise):
        return np.exp(self.log_scale)[:, None] * np.einsum("cij,cj->ci", self.chol, noise)

    def update(self, log_alpha, v, window_end):
        alpha = np.exp(np.minimum(log_alpha, 0.0))
        self.log_scale += (self.n + 1) ** -0.6 * (alpha - self.target)
        self.sum = self.sum + v
        self.outer = self.outer + v[:, :, None] * v[:, None, :]
        self.n += 1
        if window_end and self.n > self.d + 1:
            n, d = self.n, self.d
            mean = self.sum / n
            cov = (self.outer / n - mean[:, :, None] * mean[:, None, :]) * n / (n - 1)
            # shrink toward a small multiple of the identity
            cov = (n * cov + 5e-3 * np.eye(d)) / (n + 5)
            self.chol = np.linalg.cholesky(cov)
            self.log_scale[:] = np.log(2.38 / np.sqrt(d))
            self._reset()


def run_chains(model, cfg: SamplerConfig):
    """Run the sampler; returns ``(unconstrained draws, accept rates)``.

    Each iteration takes one random-walk Metropolis step in every
    coordinate system the model offers.
    Acceptance rates refer to steps on the model's own scale.
    """
    d, m = model.dim, cfg.n_chains
    views = _coordinate_systems(model)
    n_total = cfg.warmup + cfg.samples
    streams = [rng.generator(cfg.seed, rng.SAMPLER, c) for c in range(m)]
    x = np.stack([s.uniform(-2, 2, d) for s in streams])
    noise = np.stack([s.standard_normal((n_total, len(views), d)) for s in streams], axis=2)
    logu = np.log(np.stack([s.random((n_total, len(views))) for s in streams], axis=2))

    cov = np.broadcast_to(np.eye(d), (m, d, d)).copy()
    if cfg.init_starts:
        for c, s in enumerate(streams):
            x[c], cov[c] = _optimised_init(model, s, cfg.init_starts)
    lp = model.log_density(x)
    for _ in range(100):  # re-draw inits that land on a zero-density point
        bad = ~np.isfinite(lp)
        if not bad.any():
            break
        x[bad] = np.stack([streams[c].uniform(-2, 2, d) for c in np.flatnonzero(bad)])
        lp = model.log_density(x)

    adapters = []
    for view in views:
        idx = np.arange(d) if view.block is None else np.asarray(view.block)
        if view.identity:
            start = np.linalg.cholesky(cov[:, idx[:, None], idx])
        else:
            start = np.broadcast_to(np.eye(len(idx)), (m, len(idx), len(idx))).copy()
        adapters.append((idx, _Adapter(m, len(idx), start, cfg.target(len(idx)))))
    windows = set(_warmup_windows(cfg.warmup))

    out = np.empty((m, cfg.samples, d))
    accepted = np.zeros(m)
    for t in range(n_total):
        for k, (view, (idx, ad)) in enumerate(zip(views, adapters)):
            v = view.fwd(x)
            prop_v = v.copy()
            prop_v[:, idx] += ad.step(noise[t, k, :, : len(idx)])
            prop = view.inv(prop_v)
            with np.errstate(invalid="ignore", divide="ignore", over="ignore"):
                if view.prior_only:
                    lp_prop = lp + model.log_prior(prop) - model.log_prior(x)
                else:
                    lp_prop = model.log_density(prop)
                log_alpha = lp_prop - lp + view.log_det(prop) - view.log_det(x)
            log_alpha = np.where(np.isfinite(log_alpha), log_alpha, -np.inf)
            accept = logu[t, k] < log_alpha
            x = np.where(accept[:, None], prop, x)
            lp = np.where(accept, lp_prop, lp)
            if t < cfg.warmup:
                ad.update(log_alpha, view.fwd(x)[:, idx], t + 1 in windows)
            elif k == 0:
                accepted += accept
        if t >= cfg.warmup:
            out[:, t - cfg.warmup] = x
    return out, accepted / cfg.samples


def fit(model, dataset: Dataset | None = None, prior: PriorSpec | None = None,
        cfg: SamplerConfig = SamplerConfig(), check: bool = True) -> PosteriorSamples:
    """Sample a posterior.

    ``model`` is ``"flat"``, ``"hier"`` or a model object. With ``check``
    set, a :class:`ConvergenceError` is raised when any R-hat exceeds
    ``cfg.rhat_max`` or any bulk ESS falls below ``cfg.ess_min``.
    """
    if isinstance(model, str):
        model = build_model(model, dataset, prior or PriorSpec())
    u, acc = run_chains(model, cfg)
    draws = model.constrain(u)
    _check_bounds(model, draws)
    samples = PosteriorSamples(draws, list(model.param_names), u, list(model.unconstrained_names), model)
    if cfg.n_chains >= 2 and cfg.samples >= 4:
        samples.diagnostics = diagnostics(samples, acc)
        bad = samples.diagnostics.failures(cfg.rhat_max, cfg.ess_min)
        if bad and check:
            raise ConvergenceError(bad, samples)
    return samples


def mcse_mean(x) -> float:
    """Monte Carlo standard error of the mean of draws (chains, draws)."""
    x = np.asarray(x, dtype=float)
    return float(x.std(ddof=1) / np.sqrt(basic_ess(x)))


def mcse_var(x) -> float:
    """Monte Carlo standard error of the variance of draws (chains, draws)."""
    x = np.asarray(x, dtype=float)
    sq = (x - x.mean()) ** 2
    return float(sq.std(ddof=1) / np.sqrt(basic_ess(sq)))


# -- recovery and calibration ------------------------------------------------


@dataclass(frozen=True)
class Design:
    pop_probs: tuple = (0.10, 0.15, 0.20)
    trials_per_condition: int = 30

    def empty_dataset(self) -> Dataset:
        return Dataset([Condition(str(i), p) for i, p in enumerate(self.pop_probs)], [])


def _child_seed(seed: int, *path: int) -> int:
    return int(np.random.SeedSequence([seed, *path]).generate_state(1, np.uint64)[0] >> np.uint64(1))


def _map(fn, items, workers):
    if workers > 1:
        with ThreadPoolExecutor(workers) as ex:
            return list(ex.map(fn, items))
    return [fn(i) for i in items]


class ReplicateError(RuntimeError):
    def __init__(self, index, cause):
        super().__init__(f"replicate {index} failed: {cause}")
        self.index = index
        self.cause = cause


@dataclass
class RecoveryReport:
    names: list[str]
    truth: np.ndarray
    post_mean: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    level: float

    @property
    def n_replicates(self) -> int:
        return len(self.post_mean)

    @property
    def bias(self) -> np.ndarray:
        return (self.post_mean - self.truth).mean(axis=0) if self.n_replicates else np.zeros(0)

    @property
    def rmse(self) -> np.ndarray:
        if not self.n_replicates:
            return np.zeros(0)
        return np.sqrt(((self.post_mean - self.truth) ** 2).mean(axis=0))

    @property
    def coverage(self) -> np.ndarray:
        if not self.n_replicates:
            return np.zeros(0)
        return ((self.lower <= self.truth) & (self.truth <= self.upper)).mean(axis=0)

    def rows(self) -> list[dict]:
        return [
            {"parameter": n, "truth": float(self.truth[j]), "bias": float(self.bias[j]),
             "rmse": float(self.rmse[j]), "coverage": float(self.coverage[j])}
            for j, n in enumerate(self.names)
        ] if self.n_replicates else []


def _truth_vector(model, true_params) -> np.ndarray:
    if isinstance(true_params, SubjectParams):
        true_params = {"gamma_plus": true_params.gamma_plus, "beta": true_params.beta}
    if isinstance(true_params, dict):
        return np.array([float(true_params[n]) for n in model.param_names])
    return np.asarray(true_params, dtype=float)


def parameter_recovery(model: str, true_params, design: Design, n_replicates: int,
                       cfg: SamplerConfig = SamplerConfig(), prior: PriorSpec = PriorSpec(),
                       level: float = 0.9, workers: int = 1) -> RecoveryReport:
    """Simulate ``n_replicates`` datasets at known parameters, refit, and
    report bias, RMSE and central-interval coverage."""
    template = build_model(model, design.empty_dataset(), prior)
    truth = _truth_vector(template, true_params)
    names = list(template.param_names)
    gamma, beta = template.condition_params(truth)

    def one(r):
        ds = simulate_design(gamma, beta, design, _child_seed(cfg.seed, rng.SYNTH, r))
        try:
            s = fit(model, ds, prior, replace(cfg, seed=_child_seed(cfg.seed, rng.SAMPLER, r)))
        except Exception as exc:
            raise ReplicateError(r, exc) from exc
        flat = s.flat()
        a = (1 - level) / 2
        return flat.mean(axis=0), np.quantile(flat, a, axis=0), np.quantile(flat, 1 - a, axis=0)

    res = _map(one, range(n_replicates), workers)
    cols = [np.array([r[i] for r in res]).reshape(-1, len(names)) for i in range(3)]
    return RecoveryReport(names, truth, *cols, level)


@dataclass
class SBCResult:
    names: list[str]
    ranks: np.ndarray
    n_rank_draws: int
    n_bins: int
    n_failed: int

    @property
    def histogram(self) -> np.ndarray:
        """Counts per bin, shape (n_bins, n_params)."""
        width = (self.n_rank_draws + 1) // self.n_bins
        bins = self.ranks // width
        return np.stack([np.bincount(bins[:, j], minlength=self.n_bins) for j in range(len(self.names))],
                        axis=1)

    @property
    def p_values(self) -> np.ndarray:
        return stats.chisquare(self.histogram, axis=0).pvalue

    def uniform(self, alpha: float = 0.01) -> bool:
        return bool(np.all(self.p_values > alpha))


def sbc_rank(prior_value: np.ndarray, samples: PosteriorSamples, n_rank_draws: int) -> np.ndarray:
    """Rank of each prior value among ``n_rank_draws`` posterior draws,
    thinned so the kept draws are roughly independent."""
    flat = samples.draws.reshape(-1, samples.draws.shape[-1])
    ess = [e for e in (samples.diagnostics.ess.values() if samples.diagnostics else []) if e]
    stride = max(1, int(len(flat) // min(ess))) if ess else 1
    pool = flat[::stride]
    if len(pool) < n_rank_draws:
        pool = flat
    keep = np.linspace(0, len(pool) - 1, n_rank_draws).round().astype(int)
    return np.sum(pool[keep] < prior_value, axis=0)


def sbc(model: str, design: Design, n_replicates: int, cfg: SamplerConfig = SamplerConfig(),
        prior: PriorSpec = PriorSpec(), n_rank_draws: int = 99, n_bins: int = 20,
        fit_fn: Callable = fit, workers: int = 1) -> SBCResult:
    """Simulation-based calibration.

    Each replicate draws parameters from the prior, simulates the design
    with popping, refits, and ranks the prior draw among thinned posterior
    draws. Replicates whose fit fails are dropped and counted. Condition
    values are not floored here so that simulation and inference agree.
    """
    if n_bins < 2:
        raise ValueError("need at least 2 bins")
    if (n_rank_draws + 1) % n_bins:
        raise ValueError("n_bins must divide n_rank_draws + 1")
    if n_replicates < 20:
        raise ValueError("need at least 20 replicates")
    template = build_model(model, design.empty_dataset(), prior)
    unif = rng.uniforms(cfg.seed, rng.PARAMS, np.arange(n_replicates), template.n_prior_slots)

    def one(r):
        truth = template.prior_draw(unif[r])
        gamma, beta = template.condition_params(truth)
        ds = simulate_design(gamma, beta, design, _child_seed(cfg.seed, rng.SYNTH, r))
        try:
            s = fit_fn(model, ds, prior, replace(cfg, seed=_child_seed(cfg.seed, rng.SAMPLER, r)))
        except (ConvergenceError, FloatingPointError, np.linalg.LinAlgError) as exc:
            log.info("sbc replicate %d dropped: %s", r, exc)
            return None
        return sbc_rank(truth, s, n_rank_draws)

    res = _map(one, range(n_replicates), workers)
    ok = [r for r in res if r is not None]
    ranks = np.array(ok, dtype=int).reshape(-1, len(template.param_names))
    return SBCResult(list(template.param_names), ranks, n_rank_draws, n_bins, len(res) - len(ok))
