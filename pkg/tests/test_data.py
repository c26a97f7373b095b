import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy import stats

from bartlab.data import (GEORGE_CONDITIONS, Condition, DataError, Dataset, format_csv, load_csv,
                          outcome_multiset, parse_csv, permute_conditions, save_csv, synth_george)
from bartlab.model import Outcome, SubjectParams, TrialRecord

HEAD = "condition,p,trial,pumps,outcome\n"


@st.composite
def datasets(draw):
    n_cond = draw(st.integers(1, 4))
    probs = draw(st.lists(st.floats(1e-6, 1 - 1e-6), min_size=n_cond, max_size=n_cond))
    conds = [Condition(f"c{i}", p) for i, p in enumerate(probs)]
    trials = []
    # a condition with no trials has no row to live on
    for c in range(n_cond):
        for j in draw(st.lists(st.integers(0, 10**6), min_size=1, max_size=8, unique=True)):
            outcome = draw(st.sampled_from(Outcome))
            pumps = draw(st.integers(1 if outcome is Outcome.POPPED else 0, 300))
            trials.append(TrialRecord(c, j, pumps, outcome))
    return Dataset(conds, trials)


@given(datasets())
def test_round_trip_is_lossless(ds):
    text = format_csv(ds)
    back = parse_csv(text)
    assert format_csv(back) == text
    assert back.trials == ds.trials
    assert back.conditions == ds.conditions


def test_save_load_byte_identical(tmp_path, george):
    save_csv(george, tmp_path / "a.csv")
    save_csv(load_csv(tmp_path / "a.csv"), tmp_path / "b.csv")
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    assert b"\r" not in (tmp_path / "a.csv").read_bytes()


@pytest.mark.parametrize("row, needle", [
    ("sober,0.1,0,-1,cashed", "line 2"),
    ("sober,0.1,0,3,exploded", "unknown outcome"),
    ("sober,1.5,0,3,cashed", "outside (0, 1)"),
    ("sober,0.1,zero,3,cashed", "line 2"),
    ("sober,0.1,0,3", "expected 5 fields"),
    ("sober,0.1,0,0,popped", "line 2"),
])
def test_malformed_rows_report_line(row, needle):
    with pytest.raises(DataError, match="line 2" if needle == "line 2" else None) as exc:
        parse_csv(HEAD + row + "\n")
    assert needle in str(exc.value)


def test_inconsistent_condition_probability():
    with pytest.raises(DataError, match="line 3"):
        parse_csv(HEAD + "a,0.1,0,1,cashed\na,0.2,1,1,cashed\n")


def test_duplicate_trial_index():
    with pytest.raises(DataError, match="duplicate"):
        parse_csv(HEAD + "a,0.1,0,1,cashed\na,0.1,0,2,cashed\n")


def test_bad_header():
    with pytest.raises(DataError, match="line 1"):
        parse_csv("cond,p,trial,pumps,outcome\n")


def test_missing_condition_reference():
    with pytest.raises(DataError):
        Dataset([Condition("a", 0.1)], [TrialRecord(1, 0, 2, Outcome.CASHED)])


def test_george_shape_and_ceiling(tmp_path, george):
    save_csv(george, tmp_path / "g.csv")
    ds = load_csv(tmp_path / "g.csv")
    assert [(c.label, c.p) for c in ds.conditions] == list(GEORGE_CONDITIONS)
    assert [len(ds.by_condition(c)) for c in range(3)] == [30, 30, 30]
    assert ds.pumps().max() <= 12


def test_george_is_deterministic():
    assert format_csv(synth_george(7)) == format_csv(synth_george(7))
    assert format_csv(synth_george(7)) != format_csv(synth_george(8))


def test_george_identical_conditions_are_exchangeable():
    # per-condition mean pumps under shared parameters: no condition stands out
    params = (SubjectParams(1.0, 0.7),) * 3
    conds = (("a", 0.1), ("b", 0.1), ("c", 0.1))
    means = np.array([[np.mean([t.pumps for t in synth_george(s, params, conds).by_condition(c)])
                       for c in range(3)] for s in range(200)])
    assert stats.friedmanchisquare(*means.T).pvalue > 0.01


def test_permutation_preserves_multiset_and_counts(george):
    perm = permute_conditions(george, 1)
    assert outcome_multiset(perm) == outcome_multiset(george)
    assert [len(perm.by_condition(c)) for c in range(3)] == [30, 30, 30]
    assert perm.conditions == george.conditions
    assert format_csv(perm) != format_csv(george)


def test_permutation_is_seeded(george):
    assert format_csv(permute_conditions(george, 3)) == format_csv(permute_conditions(george, 3))
    assert format_csv(permute_conditions(george, 3)) != format_csv(permute_conditions(george, 4))


@given(st.integers(0, 2**32), st.integers(0, 2**32))
def test_composed_permutations_preserve_multiset(s1, s2):
    ds = synth_george(2)
    twice = permute_conditions(permute_conditions(ds, s1), s2)
    assert outcome_multiset(twice) == outcome_multiset(ds)


def test_permutation_is_uniform_over_conditions():
    # tag one trial by a unique pump count and see where it lands
    trials = [TrialRecord(c, j, 1000 if (c, j) == (0, 0) else 1, Outcome.CASHED)
              for c in range(3) for j in range(10)]
    ds = Dataset([Condition(str(c), 0.1) for c in range(3)], trials)
    landed = [next(t.condition for t in permute_conditions(ds, s).trials if t.pumps == 1000)
              for s in range(900)]
    assert stats.chisquare(np.bincount(landed, minlength=3)).pvalue > 0.01


def test_permutation_needs_two_conditions():
    with pytest.raises(ValueError):
        permute_conditions(Dataset([Condition("a", 0.1)], []), 0)
