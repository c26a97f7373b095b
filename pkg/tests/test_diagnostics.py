import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from bartlab.diagnostics import basic_ess, bulk_ess, split_rhat


def _ar1(rng, rho, chains, n):
    x = np.empty((chains, n))
    x[:, 0] = rng.standard_normal(chains)
    e = rng.standard_normal((chains, n)) * np.sqrt(1 - rho**2)
    for t in range(1, n):
        x[:, t] = rho * x[:, t - 1] + e[:, t]
    return x


def test_rhat_iid_chains(rng):
    assert 0.999 <= split_rhat(rng.standard_normal((2, 10_000))) <= 1.01


def test_rhat_separated_chains(rng):
    x = rng.standard_normal((2, 1000)) + np.array([[0.0], [10.0]])
    assert split_rhat(x) > 2


def test_rhat_detects_trend_within_chain(rng):
    # split halves disagree even though whole chains agree
    x = rng.standard_normal((4, 1000)) + np.linspace(0, 3, 1000)
    assert split_rhat(x) > 1.1


def test_rhat_detects_scale_mismatch(rng):
    x = rng.standard_normal((4, 2000)) * np.array([[1.0], [1.0], [1.0], [6.0]])
    assert split_rhat(x) > 1.01


def test_constant_chains_are_undefined():
    x = np.ones((4, 100))
    assert split_rhat(x) is None
    assert bulk_ess(x) is None
    assert basic_ess(x) is None


def test_non_finite_draws_are_undefined(rng):
    x = rng.standard_normal((2, 50))
    x[0, 3] = np.nan
    assert split_rhat(x) is None


def test_too_few_draws():
    with pytest.raises(ValueError):
        split_rhat(np.zeros((2, 3)))
    with pytest.raises(ValueError):
        bulk_ess(np.zeros((2, 3)))


@pytest.mark.parametrize("rho", [0.0, 0.5, 0.9])
def test_ess_matches_ar1_oracle(rho, rng):
    x = _ar1(rng, rho, 4, 20_000)
    expected = x.size * (1 - rho) / (1 + rho)
    assert bulk_ess(x) == pytest.approx(expected, rel=0.15)
    assert basic_ess(x) == pytest.approx(expected, rel=0.15)


def test_ess_of_antithetic_chain_exceeds_draws(rng):
    # negative autocorrelation is the only route above the draw count
    x = _ar1(rng, -0.5, 4, 2000)
    assert x.size < bulk_ess(x) <= x.size * np.log10(x.size)


@settings(max_examples=30)
@given(st.integers(2, 6), st.integers(8, 400), st.floats(0.0, 0.95), st.integers(0, 2**32))
def test_diagnostic_ranges(chains, n, rho, seed):
    x = _ar1(np.random.default_rng(seed), rho, chains, n)
    # with no between-chain spread the statistic is sqrt((h - 1) / h), h draws per split half
    h = n // 2
    assert split_rhat(x) >= np.sqrt((h - 1) / h) - 1e-12
    ess = bulk_ess(x)
    assert 0 < ess <= x.size * np.log10(x.size)


@given(st.floats(-1e3, 1e3), st.floats(1e-3, 1e3))
def test_rank_statistics_invariant_to_affine_maps(shift, scale):
    x = _ar1(np.random.default_rng(0), 0.3, 3, 200)
    # rounding can merge or split ties in the folded draws, so only approximately
    assert split_rhat(shift + scale * x) == pytest.approx(split_rhat(x), rel=1e-3)
    assert bulk_ess(shift + scale * x) == pytest.approx(bulk_ess(x), rel=1e-9)
