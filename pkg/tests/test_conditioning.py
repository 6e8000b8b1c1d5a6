import numpy as np
import pytest
from hypothesis import given, strategies as st

from agesynth.conditioning import (
    ConditioningError,
    EncodingKind,
    EncodingScheme,
    Health,
    decode_age,
    decode_health,
    encode_age,
    encode_age_delta,
    encode_health,
)

ages = st.integers(min_value=0, max_value=100)


def test_ordinal_examples():
    code = encode_age(3)
    assert code.shape == (100,)
    assert code[:3].tolist() == [1, 1, 1] and code[3:].sum() == 0 and len(code[3:]) == 97
    assert encode_age(0).sum() == 0
    assert encode_age(100).tolist() == [1.0] * 100


@pytest.mark.parametrize("bad", [-1, 101, float("nan"), 1e9])
def test_age_out_of_range(bad):
    with pytest.raises(ConditioningError):
        encode_age(bad)


def test_fractional_ages_floor_to_whole_years():
    assert encode_age(41.9).sum() == 41


def test_delta():
    assert encode_age_delta(67, 72).sum() == 5
    assert decode_age(encode_age_delta(67, 72)) == 5
    assert encode_age_delta(40, 40).sum() == 0
    with pytest.raises(ConditioningError):
        encode_age_delta(50, 45)


def test_health_codes():
    assert encode_health("CN").tolist() == [0, 0]
    assert encode_health(Health.MCI).tolist() == [1, 0]
    assert encode_health("ad").tolist() == [1, 1]
    with pytest.raises(ConditioningError):
        encode_health("FTD")
    sev = [encode_health(h).sum() for h in (Health.CN, Health.MCI, Health.AD)]
    assert sev == sorted(sev) and len(set(sev)) == 3
    for h in Health:
        assert decode_health(encode_health(h)) is h


def test_decode_age():
    two = np.zeros(100)
    two[:2] = 1
    assert decode_age(two) == 2
    assert decode_age(np.zeros(100)) == 0
    bad = np.zeros(100)
    bad[1] = 1
    with pytest.raises(ConditioningError):
        decode_age(bad)


def test_one_hot_and_continuous_variants():
    oh = EncodingScheme(EncodingKind.ONE_HOT, 10)
    for a in range(101):
        code = encode_age(a, oh)
        assert code.shape == (10,) and code.sum() == 1
        assert code.argmax() == min(a // 10, 9)
    cont = EncodingScheme(EncodingKind.CONTINUOUS)
    assert encode_age(37, cont).tolist() == pytest.approx([0.37])
    with pytest.raises(ConditioningError):
        EncodingScheme(EncodingKind.ONE_HOT, 1)


@given(ages, ages)
def test_ordinal_l1_equals_age_gap_and_order(a1, a2):
    c1, c2 = encode_age(a1), encode_age(a2)
    assert np.abs(c1 - c2).sum() == abs(a1 - a2)
    assert (a1 <= a2) == bool((c1 <= c2).all())


@given(ages)
def test_roundtrip(a):
    assert decode_age(encode_age(a)) == a
