"""Uniform-power greedy bit loader used as the comparison scheme.

Every subcarrier gets the same power.  Bits are added one promotion at a
time: among all subcarriers, the one whose move to its next allowed bit
level gives the lowest resulting average BER is promoted, as long as that
average stays within the target.  Since the best candidate is tried first,
the loop ends as soon as it fails.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .linkmodel import LN2, Allocation, mean_snr

__all__ = ["BaselineConfig", "CompareRow", "greedy_load", "compare", "COMPARE_FIELDS"]

COMPARE_FIELDS = ("trial", "snr_avg_db", "thr_proposed", "thr_baseline", "power_W")


@dataclass(frozen=True)
class BaselineConfig:
    """Power budget, BER target and allowed bit levels of the greedy loader.

    ``bit_set`` must contain 0 and its smallest nonzero level must be at
    least 2, mirroring the null rule applied to the proposed loader.
    """

    total_power: float
    ber_threshold: float = 1e-4
    bit_set: tuple = (0, 2, 3, 4, 5, 6, 7, 8)

    def __post_init__(self):
        if not (self.total_power > 0 and math.isfinite(self.total_power)):
            raise ValueError("total_power must be positive and finite")
        if not 0.0 < self.ber_threshold < 1.0:
            raise ValueError("ber_threshold must lie in (0, 1)")
        levels = tuple(int(v) for v in self.bit_set)
        if any(v != w for v, w in zip(levels, self.bit_set)):
            raise ValueError("bit_set must hold integers")
        if levels[0] != 0 or any(b <= a for a, b in zip(levels, levels[1:])):
            raise ValueError("bit_set must start at 0 and be strictly increasing")
        if len(levels) < 2 or levels[1] < 2:
            raise ValueError("smallest nonzero bit level must be >= 2")
        object.__setattr__(self, "bit_set", levels)


def greedy_load(cnr, config: BaselineConfig) -> Allocation:
    """Greedy BER-constrained bit loading at uniform power.

    Parameters
    ----------
    cnr : array_like
        Channel-to-noise ratios, per watt.
    config : BaselineConfig

    Returns
    -------
    Allocation
        Integer bits from ``config.bit_set``; every power equals
        ``total_power / N``, loaded or not.
    """
    cnr = np.asarray(cnr, dtype=float)
    n = len(cnr)
    p = config.total_power / n
    levels = np.asarray(config.bit_set, dtype=float)
    # weighted error b * BER(b) for every (subcarrier, level); level 0 contributes 0
    with np.errstate(divide="ignore"):
        ber = 0.2 * np.exp(-1.6 * p * cnr[:, None] / np.expm1(levels[None, 1:] * LN2))
    werr = np.hstack([np.zeros((n, 1)), levels[1:] * ber])

    idx = np.zeros(n, dtype=int)
    rows = np.arange(n)
    top = len(levels) - 1
    num = 0.0
    den = 0.0
    while True:
        can = idx < top
        if not can.any():
            break
        nxt = np.minimum(idx + 1, top)
        cand_num = num - werr[rows, idx] + werr[rows, nxt]
        cand_den = den - levels[idx] + levels[nxt]
        avg = np.where(can, cand_num / np.where(can, cand_den, 1.0), np.inf)
        i = int(np.argmin(avg))  # first minimum: lowest index wins ties
        if not avg[i] <= config.ber_threshold:
            break
        num, den = cand_num[i], cand_den[i]
        idx[i] += 1
    return Allocation(levels[idx], np.full(n, p))


@dataclass(frozen=True)
class CompareRow:
    trial: int
    snr_avg_db: float
    thr_proposed: float
    thr_baseline: float
    power_W: float
    flagged: bool = False

    def as_tuple(self):
        return tuple(getattr(self, f) for f in COMPARE_FIELDS)


def compare(channel, result, params, bit_set=BaselineConfig.bit_set, trial: Optional[int] = None) -> CompareRow:
    """Run the baseline at the proposed loader's total power on the same channel.

    ``snr_avg_db`` is the mean post-allocation ``P_i C_i`` of the proposed
    allocation, in dB (NaN when it loads nothing).  A proposed result that
    loads nothing leaves no power for the baseline either, so both
    throughputs are 0.  A non-converged proposed result gives a flagged row
    with NaN baseline figures.
    """
    cnr = channel.cnr
    trial = getattr(channel, "trial", 0) if trial is None else trial
    power = result.total_power
    if not result.converged:
        return CompareRow(trial, math.nan, math.nan, math.nan, power, True)
    if not power > 0:
        return CompareRow(trial, math.nan, result.throughput, 0.0, 0.0)
    snr = mean_snr(result.final, cnr)
    base = greedy_load(cnr, BaselineConfig(power, params.ber_threshold, bit_set))
    return CompareRow(trial, 10.0 * math.log10(snr), result.throughput, base.throughput, power)
