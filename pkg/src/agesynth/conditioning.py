"""Ordinal condition vectors for age and health state.

Age is coded on 100 one-year positions as a prefix of ones; health state is
coded on two positions the same way (CN < MCI < AD). The one-hot and
continuous variants exist only for the encoding ablation.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

MAX_AGE = 100
AGE_CODE_LEN = MAX_AGE
HEALTH_CODE_LEN = 2


class ConditioningError(ValueError):
    """Invalid age, health state or malformed code."""


class Health(str, enum.Enum):
    CN = "CN"
    MCI = "MCI"
    AD = "AD"

    @property
    def severity(self) -> int:
        return _SEVERITY[self]

    @classmethod
    def parse(cls, value: "Health | str") -> "Health":
        if isinstance(value, Health):
            return value
        try:
            return cls(str(value).strip().upper())
        except ValueError:
            raise ConditioningError(f"unknown health state {value!r}") from None


_SEVERITY = {Health.CN: 0, Health.MCI: 1, Health.AD: 2}


class EncodingKind(str, enum.Enum):
    ORDINAL = "ordinal"
    ONE_HOT = "one_hot"
    CONTINUOUS = "continuous"


@dataclass(frozen=True)
class EncodingScheme:
    kind: EncodingKind = EncodingKind.ORDINAL
    age_groups: int = 10

    def __post_init__(self) -> None:
        object.__setattr__(self, "kind", EncodingKind(self.kind))
        if self.kind is EncodingKind.ONE_HOT and self.age_groups < 2:
            raise ConditioningError("one_hot encoding needs age_groups >= 2")

    @property
    def age_length(self) -> int:
        if self.kind is EncodingKind.ORDINAL:
            return AGE_CODE_LEN
        if self.kind is EncodingKind.ONE_HOT:
            return self.age_groups
        return 1


ORDINAL = EncodingScheme()


def _whole_years(a: float) -> int:
    if isinstance(a, (bool, np.bool_)) or not math.isfinite(float(a)):
        raise ConditioningError(f"age must be a finite number, got {a!r}")
    years = math.floor(float(a))
    if not 0 <= years <= MAX_AGE:
        raise ConditioningError(f"age {a!r} outside [0, {MAX_AGE}]")
    return years


def encode_age(a: float, scheme: EncodingScheme = ORDINAL) -> np.ndarray:
    """Encode an age in years (floored to whole years) under ``scheme``."""
    years = _whole_years(a)
    if scheme.kind is EncodingKind.ORDINAL:
        code = np.zeros(AGE_CODE_LEN, dtype=np.float32)
        code[:years] = 1.0
        return code
    if scheme.kind is EncodingKind.ONE_HOT:
        code = np.zeros(scheme.age_groups, dtype=np.float32)
        # equal-width bins over [0, 100); age 100 joins the last bin
        code[min(years * scheme.age_groups // MAX_AGE, scheme.age_groups - 1)] = 1.0
        return code
    return np.array([years / MAX_AGE], dtype=np.float32)


def encode_age_delta(a_i: float, a_o: float, scheme: EncodingScheme = ORDINAL) -> np.ndarray:
    """Code for the forward age difference ``a_o - a_i``."""
    yi, yo = _whole_years(a_i), _whole_years(a_o)
    if yo < yi:
        raise ConditioningError(f"target age {a_o} precedes input age {a_i}; synthesis is forward in time only")
    return encode_age(yo - yi, scheme)


def encode_health(h: Health | str) -> np.ndarray:
    code = np.zeros(HEALTH_CODE_LEN, dtype=np.float32)
    code[: Health.parse(h).severity] = 1.0
    return code


def decode_age(code) -> int:
    bits = np.asarray(code)
    if bits.ndim != 1 or not np.isin(bits, (0, 1)).all():
        raise ConditioningError("age code must be a binary vector")
    years = int(bits.sum())
    if not (bits[:years] == 1).all():
        raise ConditioningError("age code is not in prefix-of-ones form")
    return years


def decode_health(code) -> Health:
    bits = np.asarray(code)
    if bits.shape != (HEALTH_CODE_LEN,) or not np.isin(bits, (0, 1)).all():
        raise ConditioningError("health code must be a binary 2-vector")
    n = int(bits.sum())
    if not (bits[:n] == 1).all():
        raise ConditioningError("health code is not in prefix-of-ones form")
    return [Health.CN, Health.MCI, Health.AD][n]
