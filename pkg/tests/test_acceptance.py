"""End-to-end acceptance checks, one test per criterion.

Each test prints a single PASS/FAIL line (visible under ``pytest -v``) with
the measured values and runtime, then asserts the same condition.
"""
import math
import time

import numpy as np
import pytest
from scipy import stats
from scipy.special import gammaln, logsumexp

from bartlab.cli import main
from bartlab.compare import bridge_sample, fit_gpd, prior_width_sweep, psis_loo
from bartlab.data import permute_conditions, synth_george
from bartlab.infer import Design, SamplerConfig, fit, mcse_mean, mcse_var, sbc
from bartlab.model import BernoulliModel, PriorSpec
from bartlab.simulate import (DesignMode, SimConfig, prior_predictive_flat, prior_predictive_hier,
                              tail_sensitivity_sweep)

pytestmark = pytest.mark.acceptance


@pytest.fixture
def report(capsys):
    def emit(number, title, passed, detail, seconds):
        with capsys.disabled():
            status = "PASS" if passed else "FAIL"
            print(f"\n[acceptance {number}] {status}: {title} ({detail}; {seconds:.1f} s)")
        assert passed, detail
    return emit


class Clock:
    def __enter__(self):
        self.start = time.perf_counter()
        return self

    def __exit__(self, *exc):
        self.seconds = time.perf_counter() - self.start


def test_prior_check_contrast(report):
    cfg = SimConfig(n_sims=200, pop_probs=(0.10,), seed=20200601)
    with Clock() as clock:
        (lik,) = prior_predictive_flat(PriorSpec(10.0), cfg, DesignMode.LIKELIHOOD_ONLY)
        (exp,) = prior_predictive_flat(PriorSpec(10.0), cfg, DesignMode.EXPERIMENT_DESIGN)
    lik_max = float(lik.mean_pumps.max())
    n_over = int(np.sum(exp.mean_pumps > 10 + 3 * exp.standard_error))
    passed = lik_max > 100 and n_over == 0 and clock.seconds < 5
    report(1, "prior-check contrast", passed,
           f"likelihood-only max mean {lik_max:.1f} (need > 100), "
           f"experiment means above 10 + 3 SE: {n_over}", clock.seconds)


def test_tail_sensitivity(report):
    uppers = [5.0, 10.0, 20.0, 50.0]
    with Clock() as clock:
        rows = tail_sensitivity_sweep(uppers, SimConfig(), p=0.10)
    medians = np.array([r.median for r in rows if r.mode is DesignMode.EXPERIMENT_DESIGN])
    q99 = np.array([r.q99 for r in rows if r.mode is DesignMode.LIKELIHOOD_ONLY])
    spread = (medians.max() - medians.min()) / medians.min()
    passed = spread < 0.20 and bool(np.all(np.diff(q99) > 0)) and clock.seconds < 30
    report(2, "tail sensitivity", passed,
           f"experiment medians {np.round(medians, 2).tolist()} vary {spread:.1%}, "
           f"likelihood-only q99 {np.round(q99, 1).tolist()}", clock.seconds)


def _sign_flip_pvalue(d, n_flips, rng):
    d = d[d != 0]
    observed = abs(d.mean())
    flips = np.empty(n_flips)
    for i in range(n_flips):
        flips[i] = abs(np.mean(d * rng.choice([-1.0, 1.0], size=d.size)))
    return (1 + np.sum(flips >= observed)) / (1 + n_flips)


def test_hierarchical_symmetry(report):
    cfg = SimConfig(n_sims=100_000, pop_probs=(0.10,))
    with Clock() as clock:
        res = prior_predictive_hier(PriorSpec(10.0), cfg, DesignMode.EXPERIMENT_DESIGN)
        rng = np.random.default_rng(0)
        pvals = [_sign_flip_pvalue(res.mean_diff[:, j], 1000, rng) for j in range(2)]
    passed = min(pvals) > 0.01 and clock.seconds < 30
    report(3, "hierarchical symmetry", passed,
           f"sign-flip p-values {np.round(pvals, 3).tolist()}", clock.seconds)


def test_bridge_oracles(report):
    y = np.array([1, 1, 0, 1, 0, 0, 0, 1, 0, 0])
    n, k = len(y), int(y.sum())
    with Clock() as clock:
        model = BernoulliModel(y)
        binom = bridge_sample(fit(model, cfg=SamplerConfig(seed=5)), model.log_density)
        draws = 3 + 0.5 * np.random.default_rng(3).standard_normal((2, 2000, 1))
        normal = bridge_sample(draws, lambda u: -0.5 * ((u[..., 0] - 3) / 0.5) ** 2)
    log_choose = gammaln(n + 1) - gammaln(k + 1) - gammaln(n - k + 1)
    err_binom = abs(binom.log_ml + log_choose - math.log(1 / (n + 1)))
    err_normal = abs(normal.log_ml - math.log(0.5 * math.sqrt(2 * math.pi)))
    passed = err_binom < 0.05 and err_normal < 0.02 and clock.seconds < 10
    report(4, "bridge-sampling oracles", passed,
           f"beta-binomial error {err_binom:.4f}, normal error {err_normal:.4f}", clock.seconds)


def test_sampler_oracle(report):
    y = np.array([1] * 7 + [0] * 13)
    post = stats.beta(1 + y.sum(), 1 + len(y) - y.sum())
    with Clock() as clock:
        q = fit(BernoulliModel(y), cfg=SamplerConfig(seed=4))["q"]
        no_data = Design(pop_probs=(0.10,)).empty_dataset()
        empty = fit("flat", no_data, PriorSpec(10.0), SamplerConfig(seed=2))
    z = [abs(q.mean() - post.mean()) / mcse_mean(q), abs(q.var() - post.var()) / mcse_var(q)]
    for name in ("gamma_plus", "beta"):
        x = empty[name]
        z += [abs(x.mean() - 5.0) / mcse_mean(x), abs(x.var() - 100 / 12) / mcse_var(x)]
    passed = max(z) < 3 and clock.seconds < 30
    report(5, "sampler oracle", passed,
           f"errors in MC standard errors {np.round(z, 2).tolist()}", clock.seconds)


def test_psis_loo_oracle(report):
    y = np.array([1, 0, 0, 1, 1, 0, 1, 0, 0, 0, 1, 1, 0, 1, 0, 0, 1, 0, 0, 1])
    with Clock() as clock:
        full = fit(BernoulliModel(y), cfg=SamplerConfig(seed=6))
        loo = psis_loo(BernoulliModel(y).pointwise_loglik(full.flat()))
        exact = 0.0
        for i in range(len(y)):
            rest = np.delete(y, i)
            q = fit(BernoulliModel(rest), cfg=SamplerConfig(seed=100 + i))["q"]
            lik = np.log(q) if y[i] else np.log1p(-q)
            exact += logsumexp(lik) - math.log(lik.size)
        k_hat = [fit_gpd(stats.genpareto(k).rvs(10_000, random_state=np.random.default_rng(8))).k
                 for k in (0.5, 0.0)]
    loo_err = abs(loo.elpd - exact)
    k_err = [abs(k_hat[0] - 0.5), abs(k_hat[1])]
    passed = loo_err < 0.1 and max(k_err) < 0.05 and clock.seconds < 300
    report(6, "PSIS-LOO oracle", passed,
           f"PSIS {loo.elpd:.3f} vs refit {exact:.3f}, GPD k {np.round(k_hat, 3).tolist()}",
           clock.seconds)


def test_model_comparison_trends(report):
    george = synth_george(1)
    uppers = [10.0, 20.0, 50.0]
    with Clock() as clock:
        original = prior_width_sweep(george, uppers, SamplerConfig())
        permuted = prior_width_sweep(permute_conditions(george, 1), uppers, SamplerConfig())
    bf = np.array([r.log_bf for r in original])
    bf_perm = np.array([r.log_bf for r in permuted])
    elpd_ok = []
    for rows in (original, permuted):
        diff = np.array([r.elpd_diff for r in rows])
        elpd_ok.append(np.ptp(diff) < min(r.se_diff for r in rows))
    passed = (all(r.ok for r in original + permuted) and bool(np.all(bf > 0))
              and bool(np.all(np.diff(bf) <= 0)) and bool(np.all(bf_perm < 0))
              and all(elpd_ok) and clock.seconds < 1800)
    report(7, "model-comparison trends", passed,
           f"log BF {np.round(bf, 2).tolist()}, permuted {np.round(bf_perm, 2).tolist()}, "
           f"elpd diff {[round(r.elpd_diff, 2) for r in original]} "
           f"/ {[round(r.elpd_diff, 2) for r in permuted]}", clock.seconds)


def test_sbc(report):
    cache = {}

    def recording_fit(model, ds, prior, cfg):
        cache[cfg.seed] = fit(model, ds, prior, cfg)
        return cache[cfg.seed]

    def biased_fit(model, ds, prior, cfg):
        # the same posteriors, shifted off the truth
        s = cache[cfg.seed] if cfg.seed in cache else fit(model, ds, prior, cfg)
        s.draws = s.draws + 0.5
        return s

    cfg = SamplerConfig()
    with Clock() as clock:
        good = sbc("flat", Design(), 200, cfg, PriorSpec(10.0), fit_fn=recording_fit)
        bad = sbc("flat", Design(), 200, cfg, PriorSpec(10.0), fit_fn=biased_fit)
    passed = good.uniform() and not bad.uniform() and clock.seconds < 1800
    report(8, "simulation-based calibration", passed,
           f"p-values {np.round(good.p_values, 3).tolist()} with {good.n_failed} dropped, "
           f"negative control {np.round(bad.p_values, 4).tolist()}", clock.seconds)


COMMANDS = [
    ("synth", [], ["george.csv"]),
    ("permute", ["--data", "{george}"], ["permuted.csv"]),
    ("prior-check", ["--n-sims", "2000", "--no-svg"],
     ["prior_check_flat_likelihood.csv", "prior_check_flat_experiment.csv"]),
    ("prior-check", ["--model", "hier", "--n-sims", "2000", "--no-svg"],
     ["prior_check_hier_likelihood.csv", "prior_check_hier_experiment.csv"]),
    ("fit", ["--model", "hier", "--data", "{george}"], ["posterior.csv"]),
    ("compare", ["--data", "{george}", "--uppers", "10", "--no-svg"], ["sweep.csv"]),
    ("recover", ["--replicates", "3", "--warmup", "500", "--samples", "500"], ["recovery.csv"]),
    ("sbc", ["--replicates", "20", "--bins", "4", "--warmup", "500", "--samples", "500"],
     ["sbc_ranks.csv", "sbc_summary.csv"]),
]


def test_cli_determinism(report, tmp_path):
    george = tmp_path / "george.csv"
    assert main(["synth", "--out", str(tmp_path)]) == 0
    mismatched = []
    with Clock() as clock:
        for i, (command, flags, outputs) in enumerate(COMMANDS):
            runs = []
            for workers in (1, 1, 3):
                out = tmp_path / f"{i}-{len(runs)}"
                argv = [command, *(f.format(george=george) for f in flags), "--seed", "7",
                        "--workers", str(workers), "--out", str(out)]
                assert main(argv) in (0, 2), argv
                runs.append([(out / name).read_bytes() for name in outputs])
            if not runs[0] == runs[1] == runs[2]:
                mismatched.append(command)
    report(9, "CLI determinism", not mismatched,
           f"{len(COMMANDS)} commands run three times, mismatches: {mismatched or 'none'}",
           clock.seconds)
