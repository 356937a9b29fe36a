"""Monobit frequency and byte-histogram chi-square tests."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import stats

_POPCOUNT = np.array([bin(i).count("1") for i in range(256)], dtype=np.int64)


@dataclass(frozen=True)
class BatteryResult:
    name: str
    statistic: float
    p_value: float
    alpha: float

    @property
    def passed(self) -> bool:
        return self.p_value > self.alpha


def byte_histogram(data) -> np.ndarray:
    buf = np.frombuffer(memoryview(data), dtype=np.uint8)
    return np.bincount(buf, minlength=256).astype(np.int64)


def monobit_from_histogram(hist: np.ndarray, alpha: float = 0.001) -> BatteryResult:
    n_bits = int(hist.sum()) * 8
    if n_bits == 0:
        return BatteryResult("monobit", 0.0, 1.0, alpha)
    ones = int(hist @ _POPCOUNT)
    s_obs = abs(2 * ones - n_bits) / math.sqrt(n_bits)
    return BatteryResult("monobit", s_obs, math.erfc(s_obs / math.sqrt(2)), alpha)


def byte_chi2_from_histogram(hist: np.ndarray, alpha: float = 0.001) -> BatteryResult:
    total = int(hist.sum())
    if total == 0:
        return BatteryResult("byte_chi2", 0.0, 1.0, alpha)
    expected = total / 256
    stat = float(((hist - expected) ** 2).sum() / expected)
    return BatteryResult("byte_chi2", stat, float(stats.chi2.sf(stat, 255)), alpha)


def monobit(data, alpha: float = 0.001) -> BatteryResult:
    return monobit_from_histogram(byte_histogram(data), alpha)


def byte_chi2(data, alpha: float = 0.001) -> BatteryResult:
    return byte_chi2_from_histogram(byte_histogram(data), alpha)


def battery(data, alpha: float = 0.001) -> list[BatteryResult]:
    hist = byte_histogram(data)
    return [monobit_from_histogram(hist, alpha), byte_chi2_from_histogram(hist, alpha)]
