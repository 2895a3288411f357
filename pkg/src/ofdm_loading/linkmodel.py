"""M-QAM BER approximation and allocation-level metrics.

The per-subcarrier model is ``BER = 0.2 exp(-1.6 P C / (2^b - 1))``, which
is tight within about 1 dB for BER <= 1e-3.  Subcarriers carrying zero bits
are inactive: they are left out of every bit-weighted average because the
model is singular at ``b = 0``.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "LinkParams",
    "Allocation",
    "ModelValidityWarning",
    "BER_VALIDITY_LIMIT",
    "ber_subcarrier",
    "power_for_target_ber",
    "average_ber",
    "objective",
    "mean_snr",
]

LN2 = math.log(2.0)
BER_VALIDITY_LIMIT = 1e-3


class ModelValidityWarning(UserWarning):
    """A BER above the range where the exponential approximation is tight."""


@dataclass(frozen=True)
class LinkParams:
    """Link targets and the objective weighting.

    Parameters
    ----------
    ber_threshold : float
        Target average BER.
    power_threshold : float
        Total transmit power cap in watts; ``math.inf`` means no cap.
    alpha : float
        Weight of the power term, in (0, 1).  ``1 - alpha`` weighs the
        throughput term.
    power_unit : float
        Watts per unit of power in the weighted objective.  The objective
        adds watts to bits, so the unit sets the exchange rate between
        them; with the default of one microwatt the uncapped optimum lands
        in the 40-200 uW range at alpha = 0.5 and 10-30 dB SNR.
    """

    ber_threshold: float = 1e-4
    power_threshold: float = math.inf
    alpha: float = 0.5
    power_unit: float = 1e-6

    def __post_init__(self):
        if not 0.0 < self.alpha < 1.0:
            raise ValueError(f"alpha must lie in (0, 1), got {self.alpha}")
        if not 0.0 < self.ber_threshold <= BER_VALIDITY_LIMIT:
            raise ValueError(f"ber_threshold must lie in (0, {BER_VALIDITY_LIMIT}], got {self.ber_threshold}")
        if not self.power_threshold > 0:
            raise ValueError("power_threshold must be positive")
        if not (self.power_unit > 0 and math.isfinite(self.power_unit)):
            raise ValueError("power_unit must be positive and finite")

    @property
    def capped(self) -> bool:
        return math.isfinite(self.power_threshold)


@dataclass
class Allocation:
    """Per-subcarrier bits and powers (watts)."""

    bits: np.ndarray
    powers: np.ndarray = field(default=None)

    def __post_init__(self):
        self.bits = np.asarray(self.bits, dtype=float)
        if self.powers is None:
            self.powers = np.zeros_like(self.bits)
        self.powers = np.asarray(self.powers, dtype=float)
        if self.bits.shape != self.powers.shape:
            raise ValueError("bits and powers must have the same shape")

    @classmethod
    def empty(cls, n: int) -> "Allocation":
        return cls(np.zeros(n), np.zeros(n))

    @property
    def throughput(self) -> float:
        return float(self.bits.sum())

    @property
    def total_power(self) -> float:
        return float(self.powers.sum())

    @property
    def active(self) -> np.ndarray:
        return self.bits > 0


def ber_subcarrier(power, bits, cnr):
    """Approximate BER of M-QAM on one subcarrier.

    Parameters
    ----------
    power : float or array
        Transmit power.
    bits : float or array
        Bits per symbol, strictly positive.
    cnr : float or array
        Channel-to-noise ratio in the reciprocal unit of ``power``.

    Raises
    ------
    ValueError
        If any ``bits <= 0``; zero-bit subcarriers are inactive and have no BER.
    """
    bits = np.asarray(bits, dtype=float)
    if np.any(bits <= 0):
        raise ValueError("BER is undefined for b <= 0 (inactive subcarrier)")
    out = 0.2 * np.exp(-1.6 * np.asarray(power) * np.asarray(cnr) / np.expm1(bits * LN2))
    return out if out.ndim else float(out)


def power_for_target_ber(bits, cnr, target):
    """Power that puts a subcarrier exactly at ``target`` BER."""
    cnr = np.asarray(cnr, dtype=float)
    if np.any(cnr <= 0):
        raise ValueError("zero CNR needs infinite power; null the subcarrier instead")
    target = np.asarray(target, dtype=float)
    if np.any((target <= 0) | (target >= 0.2)):
        raise ValueError("target BER must lie in (0, 0.2)")
    out = np.expm1(np.asarray(bits, dtype=float) * LN2) * np.log(0.2 / target) / (1.6 * cnr)
    return out if out.ndim else float(out)


def average_ber(alloc: Allocation, cnr, *, warn: bool = True) -> float:
    """Bit-weighted mean BER over the active subcarriers."""
    act = alloc.active
    if not act.any():
        raise ValueError("average BER is undefined for an all-zero bit vector")
    b = alloc.bits[act]
    ber = ber_subcarrier(alloc.powers[act], b, np.asarray(cnr)[act])
    if warn and np.max(ber) > BER_VALIDITY_LIMIT:
        warnings.warn(
            f"subcarrier BER {np.max(ber):.3g} exceeds {BER_VALIDITY_LIMIT:g}; the approximation is loose there",
            ModelValidityWarning,
            stacklevel=2,
        )
    return float(np.sum(b * ber) / np.sum(b))


def objective(alloc: Allocation, alpha: float, power_unit: float = 1.0) -> float:
    """Weighted objective ``alpha * sum(P) - (1 - alpha) * sum(b)``.

    Powers are divided by ``power_unit`` first.
    """
    return alpha * alloc.total_power / power_unit - (1.0 - alpha) * alloc.throughput


def mean_snr(alloc: Allocation, cnr) -> float:
    """Mean of ``P_i C_i`` over all subcarriers (linear), nulled ones as 0."""
    return float(np.mean(alloc.powers * np.asarray(cnr, dtype=float)))
