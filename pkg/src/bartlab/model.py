"""BART model equations, priors and the unconstrained parameterisations.

Two models share one likelihood. The flat model pools every condition under
one ``(gamma_plus, beta)``; the hierarchical model draws condition-level
values from normals, written non-centred (``gamma_i = mu + sigma * z_i``).
Uniform(0, U) parameters are sampled on the real line through a scaled
log-odds map.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np
from scipy.special import expit, log_expit, logit, ndtri

LOG_2PI = math.log(2.0 * math.pi)


class Outcome(enum.Enum):
    CASHED = "cashed"
    POPPED = "popped"


@dataclass(frozen=True)
class TrialRecord:
    """One balloon.

    ``pumps`` pump decisions were made; a cashed trial also carries the
    final "stop" decision at opportunity ``pumps + 1``.
    """

    condition: int
    trial: int
    pumps: int
    outcome: Outcome
    truncated: bool = False

    def __post_init__(self):
        if self.pumps < 0:
            raise ValueError(f"pumps must be >= 0, got {self.pumps}")
        if self.outcome is Outcome.POPPED and self.pumps < 1:
            raise ValueError("a popped balloon needs at least one pump")

    def decisions(self) -> np.ndarray:
        """The 0/1 choice sequence (1 = pump, 0 = cash out)."""
        d = np.ones(self.pumps + (self.outcome is Outcome.CASHED), dtype=np.int8)
        if self.outcome is Outcome.CASHED:
            d[-1] = 0
        return d


@dataclass(frozen=True)
class SubjectParams:
    gamma_plus: float
    beta: float

    def __post_init__(self):
        if not (self.gamma_plus >= 0 and self.beta >= 0):
            raise ValueError(f"parameters must be non-negative: {self}")


@dataclass(frozen=True)
class HyperParams:
    mu_gamma: float
    sigma_gamma: float
    mu_beta: float
    sigma_beta: float

    def __post_init__(self):
        if not (self.sigma_gamma > 0 and self.sigma_beta > 0):
            raise ValueError("group standard deviations must be positive")
        if not (self.mu_gamma > 0 and self.mu_beta > 0):
            raise ValueError("group means must be positive")


@dataclass(frozen=True)
class PriorSpec:
    """Upper bound ``upper`` shared by every Uniform(0, upper) prior."""

    upper: float = 10.0

    def __post_init__(self):
        if not self.upper > 0:
            raise ValueError(f"prior upper bound must be > 0, got {self.upper}")


def check_pop_probability(p) -> None:
    p = np.asarray(p, dtype=float)
    if np.any(~((p > 0) & (p < 1))):
        raise ValueError(f"pop probability must lie strictly in (0, 1), got {p}")


def omega(gamma_plus, p):
    """Target number of pumps, ``-gamma_plus / log(1 - p)``."""
    check_pop_probability(p)
    return -np.asarray(gamma_plus, dtype=float) / np.log1p(-np.asarray(p, dtype=float))


def theta(beta, omega, k):
    """Probability of pumping at opportunity ``k``.

    ``1 / (1 + exp(beta * (k - omega)))``, saturating to 0 or 1 instead of
    overflowing.
    """
    return expit(-np.asarray(beta, dtype=float) * (np.asarray(k, dtype=float) - omega))


def log_theta(beta, omega, k):
    """``(log theta, log(1 - theta))`` evaluated without cancellation."""
    x = -np.asarray(beta, dtype=float) * (np.asarray(k, dtype=float) - omega)
    return log_expit(x), log_expit(-x)


def trial_loglik(params: SubjectParams, p: float, trial: TrialRecord) -> float:
    """Log-likelihood of one trial's decisions.

    A popped trial is censored: its pumps count, there is no cash-out term,
    and the pop itself is parameter-free so it is left out.
    """
    w = omega(params.gamma_plus, p)
    n = trial.pumps
    lt, l1mt = log_theta(params.beta, w, np.arange(1, n + 2))
    total = float(np.sum(lt[:n]))
    if trial.outcome is Outcome.CASHED:
        total += float(l1mt[n])
    return total


# -- bounded <-> unbounded -------------------------------------------------


def constrain_bounded(u, upper):
    return upper * expit(u)


def unconstrain_bounded(x, upper):
    return logit(np.asarray(x, dtype=float) / upper)


def log_prior_jacobian(u):
    """Uniform(0, U) log-density plus the log-Jacobian of the scaled log-odds
    map. The ``log U`` terms cancel."""
    return log_expit(u) + log_expit(-np.asarray(u))


def log_prior_jacobian_grad(u):
    return -np.tanh(0.5 * np.asarray(u, dtype=float))


def constrain_bounded_grad(u, upper):
    """Derivative of :func:`constrain_bounded`."""
    u = np.asarray(u, dtype=float)
    return upper * expit(u) * expit(-u)


def std_normal_logpdf(z):
    z = np.asarray(z)
    return -0.5 * (z * z + LOG_2PI)


# -- sufficient statistics -------------------------------------------------


def _cat(parts, dtype):
    return np.concatenate(parts).astype(dtype) if parts else np.zeros(0, dtype)


@dataclass(frozen=True)
class ChoiceData:
    """Count tables and per-choice arrays built from a dataset.

    ``pumps_at[c, k-1]`` counts trials in condition ``c`` with a pump at
    opportunity ``k``; ``cash_at[c, k-1]`` counts cash-outs at ``k``.
    """

    p: np.ndarray
    pumps_at: np.ndarray
    cash_at: np.ndarray
    obs_condition: np.ndarray
    obs_k: np.ndarray
    obs_d: np.ndarray

    @property
    def n_conditions(self) -> int:
        return len(self.p)

    @property
    def n_choices(self) -> int:
        return len(self.obs_d)

    @classmethod
    def from_dataset(cls, dataset) -> ChoiceData:
        p = np.array([c.p for c in dataset.conditions], dtype=float)
        if len(p):
            check_pop_probability(p)
        kmax = max((t.pumps + 1 for t in dataset.trials), default=1)
        pumps_at = np.zeros((len(p), kmax))
        cash_at = np.zeros((len(p), kmax))
        oc, ok, od = [], [], []
        for t in dataset.trials:
            pumps_at[t.condition, : t.pumps] += 1
            d = t.decisions()
            if t.outcome is Outcome.CASHED:
                cash_at[t.condition, t.pumps] += 1
            oc.append(np.full(len(d), t.condition))
            ok.append(np.arange(1, len(d) + 1))
            od.append(d)
        return cls(p, pumps_at, cash_at, _cat(oc, np.intp), _cat(ok, float), _cat(od, np.int8))

    def loglik(self, gamma, beta):
        """Total log-likelihood; ``gamma``, ``beta`` have shape (..., C)."""
        if self.n_conditions == 0:
            return np.zeros(np.shape(gamma)[:-1])
        gamma = np.asarray(gamma, dtype=float)
        beta = np.asarray(beta, dtype=float)
        w = -gamma / np.log1p(-self.p)
        k = np.arange(1, self.pumps_at.shape[1] + 1, dtype=float)
        lt, l1mt = log_theta(beta[..., None], w[..., None], k)
        return np.sum(self.pumps_at * lt + self.cash_at * l1mt, axis=(-2, -1))

    def loglik_grad(self, gamma, beta):
        """Total log-likelihood and its gradients with respect to ``gamma``
        and ``beta`` (each shaped like the inputs)."""
        gamma = np.asarray(gamma, dtype=float)
        beta = np.asarray(beta, dtype=float)
        if self.n_conditions == 0:
            return np.zeros(gamma.shape[:-1]), np.zeros_like(gamma), np.zeros_like(beta)
        c = -1.0 / np.log1p(-self.p)
        w = gamma * c
        k = np.arange(1, self.pumps_at.shape[1] + 1, dtype=float)
        x = beta[..., None] * (w[..., None] - k)
        ll = np.sum(self.pumps_at * log_expit(x) + self.cash_at * log_expit(-x), axis=(-2, -1))
        g = self.pumps_at * expit(-x) - self.cash_at * expit(x)
        d_beta = np.sum(g * (w[..., None] - k), axis=-1)
        d_gamma = beta * c * np.sum(g, axis=-1)
        return ll, d_gamma, d_beta

    def pointwise(self, gamma, beta):
        """Per-choice log-likelihood, shape (..., n_choices)."""
        gamma = np.asarray(gamma, dtype=float)[..., self.obs_condition]
        beta = np.asarray(beta, dtype=float)[..., self.obs_condition]
        w = -gamma / np.log1p(-self.p[self.obs_condition])
        lt, l1mt = log_theta(beta, w, self.obs_k)
        return np.where(self.obs_d == 1, lt, l1mt)


# -- models ----------------------------------------------------------------


class FlatModel:
    """Complete pooling: one ``(gamma_plus, beta)`` for every condition."""

    name = "flat"

    def __init__(self, dataset, prior: PriorSpec):
        self.dataset = dataset
        self.prior = prior
        self.data = ChoiceData.from_dataset(dataset)
        self.param_names = ["gamma_plus", "beta"]
        self.unconstrained_names = ["logodds_gamma_plus", "logodds_beta"]
        self.dim = 2

    def constrain(self, u):
        return constrain_bounded(np.asarray(u, dtype=float), self.prior.upper)

    def unconstrain(self, x):
        return unconstrain_bounded(x, self.prior.upper)

    def condition_params(self, x):
        """Constrained draws -> per-condition ``(gamma, beta)``, each (..., C)."""
        x = np.asarray(x, dtype=float)
        shape = x.shape[:-1] + (self.data.n_conditions,)
        return np.broadcast_to(x[..., :1], shape), np.broadcast_to(x[..., 1:2], shape)

    def log_prior(self, u):
        return np.sum(log_prior_jacobian(u), axis=-1)

    def log_density(self, u):
        u = np.asarray(u, dtype=float)
        gamma, beta = self.condition_params(self.constrain(u))
        return self.log_prior(u) + self.data.loglik(gamma, beta)

    def log_density_grad(self, u):
        """``(log_density(u), gradient)`` on the unconstrained scale."""
        u = np.asarray(u, dtype=float)
        gamma, beta = self.condition_params(self.constrain(u))
        ll, dg, db = self.data.loglik_grad(gamma, beta)
        dx = np.stack([dg.sum(axis=-1), db.sum(axis=-1)], axis=-1)
        grad = log_prior_jacobian_grad(u) + dx * constrain_bounded_grad(u, self.prior.upper)
        return self.log_prior(u) + ll, grad

    # The likelihood sees (gamma_plus, beta) only through the logistic
    # coefficients (beta * gamma_plus, beta) of c = -1 / log(1 - p) and k.
    # Weak data leave a long, curved gamma/beta ridge that is straight in
    # these coordinates, so the sampler also steps there and in their logs.

    def to_coefficients(self, u):
        x = self.constrain(u)
        return np.stack([x[..., 0] * x[..., 1], x[..., 1]], axis=-1)

    def from_coefficients(self, v):
        v = np.asarray(v, dtype=float)
        with np.errstate(divide="ignore", invalid="ignore"):
            return self.unconstrain(np.stack([v[..., 0] / v[..., 1], v[..., 1]], axis=-1))

    def log_det_coefficients(self, u):
        """log |du/dv| for v = to_coefficients(u)."""
        u = np.asarray(u, dtype=float)
        log_dx = np.log(self.prior.upper) + log_prior_jacobian(u)
        return -np.sum(log_dx, axis=-1) - np.log(self.constrain(u)[..., 1])

    def to_log_coefficients(self, u):
        return np.log(self.to_coefficients(u))

    def from_log_coefficients(self, v):
        return self.from_coefficients(np.exp(v))

    def log_det_log_coefficients(self, u):
        """log |du/dv| for v = to_log_coefficients(u)."""
        return -np.sum(log_expit(-np.asarray(u, dtype=float)), axis=-1)

    def prior_draw(self, unif):
        """Map uniforms of shape (..., 2) to a constrained prior draw."""
        return self.prior.upper * np.asarray(unif)

    n_prior_slots = 2


class HierModel:
    """Condition-level parameters under a normal hierarchy, non-centred.

    Unconstrained coordinates are the four log-odds hyperparameters followed
    by the ``gamma`` and ``beta`` z-scores. The normals are not truncated, so
    condition values may go negative.
    """

    name = "hier"
    hyper_names = ["mu_gamma", "sigma_gamma", "mu_beta", "sigma_beta"]

    def __init__(self, dataset, prior: PriorSpec):
        self.dataset = dataset
        self.prior = prior
        self.data = ChoiceData.from_dataset(dataset)
        if self.data.n_conditions < 1:
            raise ValueError("hierarchical model needs at least one condition")
        n = self.n_cond = self.data.n_conditions
        self.param_names = (
            self.hyper_names
            + [f"gamma_plus[{i}]" for i in range(n)]
            + [f"beta[{i}]" for i in range(n)]
        )
        self.unconstrained_names = (
            [f"logodds_{h}" for h in self.hyper_names]
            + [f"z_gamma[{i}]" for i in range(n)]
            + [f"z_beta[{i}]" for i in range(n)]
        )
        self.dim = 4 + 2 * n

    def constrain(self, u):
        u = np.asarray(u, dtype=float)
        n = self.n_cond
        h = constrain_bounded(u[..., :4], self.prior.upper)
        mg, sg, mb, sb = (h[..., i : i + 1] for i in range(4))
        gamma = mg + sg * u[..., 4 : 4 + n]
        beta = mb + sb * u[..., 4 + n :]
        return np.concatenate([h, gamma, beta], axis=-1)

    def unconstrain(self, x):
        x = np.asarray(x, dtype=float)
        n = self.n_cond
        h = x[..., :4]
        zg = (x[..., 4 : 4 + n] - h[..., 0:1]) / h[..., 1:2]
        zb = (x[..., 4 + n :] - h[..., 2:3]) / h[..., 3:4]
        return np.concatenate([unconstrain_bounded(h, self.prior.upper), zg, zb], axis=-1)

    def condition_params(self, x):
        x = np.asarray(x, dtype=float)
        n = self.n_cond
        return x[..., 4 : 4 + n], x[..., 4 + n :]

    def log_prior(self, u):
        u = np.asarray(u, dtype=float)
        return np.sum(log_prior_jacobian(u[..., :4]), axis=-1) + np.sum(
            std_normal_logpdf(u[..., 4:]), axis=-1
        )

    def log_density(self, u):
        u = np.asarray(u, dtype=float)
        gamma, beta = self.condition_params(self.constrain(u))
        return self.log_prior(u) + self.data.loglik(gamma, beta)

    def log_density_grad(self, u):
        """``(log_density(u), gradient)`` on the unconstrained scale."""
        u = np.asarray(u, dtype=float)
        n = self.n_cond
        h = constrain_bounded(u[..., :4], self.prior.upper)
        zg, zb = u[..., 4 : 4 + n], u[..., 4 + n :]
        gamma = h[..., 0:1] + h[..., 1:2] * zg
        beta = h[..., 2:3] + h[..., 3:4] * zb
        ll, dg, db = self.data.loglik_grad(gamma, beta)
        dh = np.stack([dg.sum(-1), (dg * zg).sum(-1), db.sum(-1), (db * zb).sum(-1)], axis=-1)
        grad_h = log_prior_jacobian_grad(u[..., :4]) + dh * constrain_bounded_grad(u[..., :4], self.prior.upper)
        grad = np.concatenate([grad_h, dg * h[..., 1:2] - zg, db * h[..., 3:4] - zb], axis=-1)
        return self.log_prior(u) + ll, grad

    @property
    def n_prior_slots(self) -> int:
        return self.dim

    # The sampler alternates random-walk steps in these coordinates with
    # steps in the non-centred ones: the non-centred steps cross the funnel
    # at small scales, the centred ones slide the hyperparameters along the
    # ridge that informative conditions carve into the z-scores.

    def to_centred(self, u):
        """Non-centred coordinates -> (log-odds hyperparameters, gamma, beta)."""
        u = np.asarray(u, dtype=float)
        x = self.constrain(u)
        return np.concatenate([u[..., :4], x[..., 4:]], axis=-1)

    def from_centred(self, v):
        v = np.asarray(v, dtype=float)
        n = self.n_cond
        h = constrain_bounded(v[..., :4], self.prior.upper)
        zg = (v[..., 4 : 4 + n] - h[..., 0:1]) / h[..., 1:2]
        zb = (v[..., 4 + n :] - h[..., 2:3]) / h[..., 3:4]
        return np.concatenate([v[..., :4], zg, zb], axis=-1)

    def log_det_centred(self, u):
        """log |du/dv| for v = to_centred(u)."""
        h = constrain_bounded(np.asarray(u, dtype=float)[..., :4], self.prior.upper)
        return -self.n_cond * (np.log(h[..., 1]) + np.log(h[..., 3]))

    # Per-condition logistic coefficients, as for the flat model; beta_i may
    # be negative here so there is no log version.

    def to_centred_coefficients(self, u):
        v = self.to_centred(u)
        n = self.n_cond
        v[..., 4 : 4 + n] *= v[..., 4 + n :]
        return v

    def from_centred_coefficients(self, v):
        v = np.array(v, dtype=float)
        n = self.n_cond
        with np.errstate(divide="ignore", invalid="ignore"):
            v[..., 4 : 4 + n] /= v[..., 4 + n :]
        return self.from_centred(v)

    def log_det_centred_coefficients(self, u):
        """log |du/dv| for v = to_centred_coefficients(u)."""
        beta = self.constrain(u)[..., 4 + self.n_cond :]
        return self.log_det_centred(u) - np.sum(np.log(np.abs(beta)), axis=-1)

    def prior_draw(self, unif):
        """Map uniforms of shape (..., dim) to a constrained prior draw."""
        unif = np.asarray(unif, dtype=float)
        n = self.n_cond
        h = self.prior.upper * unif[..., :4]
        gamma = h[..., 0:1] + h[..., 1:2] * ndtri(unif[..., 4 : 4 + n])
        beta = h[..., 2:3] + h[..., 3:4] * ndtri(unif[..., 4 + n :])
        return np.concatenate([h, gamma, beta], axis=-1)


class BernoulliModel:
    """Conjugate test harness: Bernoulli data, Uniform(0, 1) success rate,
    sampled through the same bounded transform as the BART models."""

    name = "bernoulli"

    def __init__(self, y):
        self.y = np.asarray(y, dtype=float)
        self.prior = PriorSpec(1.0)
        self.param_names = ["q"]
        self.unconstrained_names = ["logodds_q"]
        self.dim = 1

    def constrain(self, u):
        return constrain_bounded(np.asarray(u, dtype=float), 1.0)

    def unconstrain(self, x):
        return unconstrain_bounded(x, 1.0)

    def log_density(self, u):
        u = np.asarray(u, dtype=float)
        return np.sum(log_prior_jacobian(u), axis=-1) + np.sum(self.pointwise_from_u(u), axis=-1)

    def log_density_grad(self, u):
        u = np.asarray(u, dtype=float)
        dl = np.where(self.y == 1, expit(-u), -expit(u)).sum(axis=-1, keepdims=True)
        return self.log_density(u), log_prior_jacobian_grad(u) + dl

    def pointwise_from_u(self, u):
        # log q = log_expit(u), log(1 - q) = log_expit(-u)
        u = np.asarray(u, dtype=float)
        return np.where(self.y == 1, log_expit(u), log_expit(-u))

    def pointwise_loglik(self, draws):
        """Per-observation log-likelihood for constrained draws (S, 1)."""
        q = np.asarray(draws, dtype=float)
        return np.where(self.y == 1, np.log(q), np.log1p(-q))


def build_model(name: str, dataset, prior: PriorSpec):
    if name == "flat":
        return FlatModel(dataset, prior)
    if name == "hier":
        return HierModel(dataset, prior)
    raise ValueError(f"unknown model {name!r}; expected 'flat' or 'hier'")


def log_posterior_flat(point, dataset, prior: PriorSpec):
    """Flat-model log posterior density on the unconstrained scale."""
    return FlatModel(dataset, prior).log_density(point)


def log_posterior_hier(point, dataset, prior: PriorSpec):
    """Hierarchical-model log posterior density on the unconstrained scale."""
    return HierModel(dataset, prior).log_density(point)
