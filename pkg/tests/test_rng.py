import numpy as np
import pytest
from hypothesis import given, strategies as st

from bartlab import rng

# Known-answer vectors published with the Random123 library.
KAT = [
    ([0, 0, 0, 0], [0, 0], [0x6627E8D5, 0xE169C58D, 0xBC57AC4C, 0x9B00DBD8]),
    ([0xFFFFFFFF] * 4, [0xFFFFFFFF] * 2, [0x408F276D, 0x41C83B0E, 0xA20BC7C6, 0x6D5451FD]),
    ([0x243F6A88, 0x85A308D3, 0x13198A2E, 0x03707344], [0xA4093822, 0x299F31D0],
     [0xD16CFE09, 0x94FDCCEB, 0x5001E420, 0x24126EA1]),
]


@pytest.mark.parametrize("ctr,key,expected", KAT)
def test_philox_known_answers(ctr, key, expected):
    assert rng.philox4x32(ctr, key).tolist() == expected


def test_philox_batches_match_single_calls():
    ctrs = np.array([c for c, _, _ in KAT[:2]], dtype=np.uint64)
    out = rng.philox4x32(ctrs, [0, 0])
    assert out[0].tolist() == KAT[0][2]
    assert out[1].tolist() == rng.philox4x32(KAT[1][0], [0, 0]).tolist()


def test_uniforms_are_in_open_unit_interval():
    u = rng.uniforms(7, rng.TRIALS, np.arange(2000), 33)
    assert u.shape == (2000, 33)
    assert np.all((u > 0) & (u < 1))
    assert abs(u.mean() - 0.5) < 0.005


def test_uniforms_depend_only_on_their_index():
    full = rng.uniforms(3, rng.PARAMS, np.arange(100), 5)
    part = rng.uniforms(3, rng.PARAMS, np.array([17, 4, 99]), 5)
    np.testing.assert_array_equal(part, full[[17, 4, 99]])


@given(st.integers(1, 40), st.integers(1, 40))
def test_uniform_slots_are_prefix_stable(a, b):
    short, long = sorted((a, b))
    x = rng.uniforms(11, rng.TRIALS, np.arange(4), short)
    y = rng.uniforms(11, rng.TRIALS, np.arange(4), long)
    np.testing.assert_array_equal(x, y[:, :short])


def test_streams_and_seeds_differ():
    a = rng.uniforms(1, rng.PARAMS, [0], 8)
    assert not np.array_equal(a, rng.uniforms(1, rng.TRIALS, [0], 8))
    assert not np.array_equal(a, rng.uniforms(2, rng.PARAMS, [0], 8))


def test_uniforms_pass_a_ks_test():
    from scipy import stats
    u = rng.uniforms(5, rng.SAMPLER, np.arange(5000), 4).ravel()
    assert stats.kstest(u, "uniform").pvalue > 0.001


def test_generator_is_reproducible():
    a = rng.generator(9, rng.SAMPLER, 2).standard_normal(5)
    b = rng.generator(9, rng.SAMPLER, 2).standard_normal(5)
    c = rng.generator(9, rng.SAMPLER, 3).standard_normal(5)
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, c)
