"""Stationarity system of the slack-variable Lagrangian and its Jacobian.

Unknowns are stacked as ``x = [P_1..P_N, b_1..b_N, lambda1, aux]`` where
``aux`` is the power-cap slack ``Y2`` when the cap is inactive and the cap
multiplier ``lambda2`` when it is active.  The BER slack ``Y1`` is zero in
both solvable cases and does not appear.

Powers in the state are measured in ``params.power_unit``; CNRs and the
power cap are passed in watts-based units and converted here.

Subcarriers outside the ``active`` mask are nulled (``b = P = 0``): their
two stationarity rows are identically zero, their columns are zero, and
they contribute nothing to the BER and power rows.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from enum import Enum
from typing import Callable, Optional

import numpy as np

from .linkmodel import LN2, LinkParams

__all__ = [
    "B_FLOOR",
    "ConstraintCase",
    "KktState",
    "residuals",
    "jacobian",
    "residuals_and_jacobian",
    "central_differences",
    "finite_diff_jacobian",
    "loadable_subcarriers",
]

B_FLOOR = 0.05


class ConstraintCase(str, Enum):
    POWER_INACTIVE = "PowerInactive"  # Y1 = 0, lambda2 = 0
    POWER_ACTIVE = "PowerActive"  # Y1 = 0, Y2 = 0

    def __str__(self):
        return self.value


@dataclass
class KktState:
    """Point in the unknown space of the stationarity system.

    ``powers`` are in the objective's power unit.  ``active`` masks the
    subcarriers that take part in the system; ``None`` means all of them.
    """

    powers: np.ndarray
    bits: np.ndarray
    lambda1: float
    aux: float
    active: Optional[np.ndarray] = None

    def __post_init__(self):
        self.powers = np.asarray(self.powers, dtype=float)
        self.bits = np.asarray(self.bits, dtype=float)
        if self.powers.shape != self.bits.shape or self.powers.ndim != 1:
            raise ValueError("powers and bits must be 1-D and of equal length")
        if self.active is None:
            self.active = np.ones(len(self.bits), dtype=bool)
        self.active = np.asarray(self.active, dtype=bool)

    @property
    def n(self) -> int:
        return len(self.bits)

    def to_vector(self) -> np.ndarray:
        return np.concatenate([self.powers, self.bits, [self.lambda1, self.aux]])

    @classmethod
    def from_vector(cls, v, active=None) -> "KktState":
        v = np.asarray(v, dtype=float)
        n = (len(v) - 2) // 2
        if len(v) != 2 * n + 2:
            raise ValueError("state vector length must be 2N+2")
        return cls(v[:n].copy(), v[n : 2 * n].copy(), float(v[2 * n]), float(v[2 * n + 1]), active)

    def copy(self) -> "KktState":
        return replace(self, powers=self.powers.copy(), bits=self.bits.copy(), active=self.active.copy())


def _evaluate(v, cnr, params: LinkParams, case: ConstraintCase, active, scale_ber_row, want_jac):
    v = np.asarray(v, dtype=float)
    n = (len(v) - 2) // 2
    if not np.all(np.isfinite(v)):
        raise ValueError("non-finite state")
    act = np.ones(n, dtype=bool) if active is None else np.asarray(active, dtype=bool)
    idx = np.flatnonzero(act)
    P = v[:n][act]
    b = v[n : 2 * n][act]
    lam1 = v[2 * n]
    aux = v[2 * n + 1]
    if np.any(b < B_FLOOR):
        raise ValueError(f"bits below the iteration floor {B_FLOOR}")
    pth = params.power_threshold / params.power_unit
    if case is ConstraintCase.POWER_ACTIVE and not math.isfinite(pth):
        raise ValueError("the power-active case needs a finite power threshold")
    C = np.asarray(cnr, dtype=float)[act] * params.power_unit
    alpha = params.alpha
    bth = params.ber_threshold
    ber_scale = 1.0 / bth if scale_ber_row else 1.0
    lam2 = aux if case is ConstraintCase.POWER_ACTIVE else 0.0

    a = np.expm1(b * LN2)  # 2^b - 1
    u = a + 1.0
    z = 1.6 * C * P / a
    e = np.exp(-z)
    q = b * C * e / a
    s = z * b * u / a
    F = 0.2 * e * (1.0 + LN2 * s)

    m = 2 * n + 2
    R = np.zeros(m)
    R[idx] = alpha - 0.32 * lam1 * q + lam2
    R[n + idx] = -(1.0 - alpha) + lam1 * (F - bth)
    R[2 * n] = ber_scale * np.sum(b * (0.2 * e - bth))
    if math.isfinite(pth):
        R[2 * n + 1] = P.sum() - pth + (aux * aux if case is ConstraintCase.POWER_INACTIVE else 0.0)
    if not want_jac:
        return R, None

    J = np.zeros((m, m))
    dz_dP = 1.6 * C / a
    dz_db = -z * u * LN2 / a
    dq_dP = -q * dz_dP
    dq_db = q * (1.0 / b - dz_db - u * LN2 / a)
    J[idx, idx] = -0.32 * lam1 * dq_dP
    J[idx, n + idx] = -0.32 * lam1 * dq_db
    J[idx, 2 * n] = -0.32 * q
    if case is ConstraintCase.POWER_ACTIVE:
        J[idx, 2 * n + 1] = 1.0

    ds_dP = b * u / a * dz_dP
    ds_db = dz_db * b * u / a + z * (u / a) * (1.0 - b * LN2 / a)
    dF_dP = 0.2 * e * (-dz_dP * (1.0 + LN2 * s) + LN2 * ds_dP)
    dF_db = 0.2 * e * (-dz_db * (1.0 + LN2 * s) + LN2 * ds_db)
    J[n + idx, idx] = lam1 * dF_dP
    J[n + idx, n + idx] = lam1 * dF_db
    J[n + idx, 2 * n] = F - bth

    J[2 * n, idx] = -ber_scale * b * 0.2 * e * dz_dP
    J[2 * n, n + idx] = ber_scale * (0.2 * e - bth - b * 0.2 * e * dz_db)
    if math.isfinite(pth):
        J[2 * n + 1, idx] = 1.0
        if case is ConstraintCase.POWER_INACTIVE:
            J[2 * n + 1, 2 * n + 1] = 2.0 * aux
    return R, J


def residuals(x: KktState, cnr, params: LinkParams, case: ConstraintCase, *, scale_ber_row: bool = False) -> np.ndarray:
    """Residual vector ``S(x)`` of length ``2N+2``.

    Rows ``0..N-1`` are the power derivatives of the Lagrangian, rows
    ``N..2N-1`` the bit derivatives, row ``2N`` the average-BER equality
    (multiplied by ``1/BER_th`` when ``scale_ber_row``) and row ``2N+1`` the
    power-cap equality.  Without a cap (infinite threshold) the last row is
    identically zero.
    """
    return _evaluate(x.to_vector(), cnr, params, case, x.active, scale_ber_row, False)[0]


def jacobian(x: KktState, cnr, params: LinkParams, case: ConstraintCase, *, scale_ber_row: bool = False) -> np.ndarray:
    """Analytic Jacobian of :func:`residuals`."""
    return _evaluate(x.to_vector(), cnr, params, case, x.active, scale_ber_row, True)[1]


def residuals_and_jacobian(v, cnr, params, case, active=None, *, scale_ber_row=False, want_jac=True):
    """Vector-level entry point used by the solver loop.

    Returns ``(S, J)``; ``J`` is None when ``want_jac`` is false.
    """
    return _evaluate(v, cnr, params, case, active, scale_ber_row, want_jac)


def central_differences(fun: Callable[[np.ndarray], np.ndarray], v, rel_step: float = 1e-6) -> np.ndarray:
    """Central-difference Jacobian with step ``rel_step * max(1, |v_j|)``."""
    v = np.asarray(v, dtype=float)
    cols = []
    for j in range(len(v)):
        h = rel_step * max(1.0, abs(v[j]))
        vp = v.copy()
        vm = v.copy()
        vp[j] += h
        vm[j] -= h
        cols.append((np.asarray(fun(vp)) - np.asarray(fun(vm))) / (2.0 * h))
    return np.column_stack(cols)


def finite_diff_jacobian(x: KktState, cnr, params, case, step: float = 1e-6, *, scale_ber_row: bool = False) -> np.ndarray:
    """Test oracle for :func:`jacobian`."""

    def fun(v):
        return _evaluate(v, cnr, params, case, x.active, scale_ber_row, False)[0]

    return central_differences(fun, x.to_vector(), step)


def loadable_subcarriers(cnr, lambda1: float, lambda2: float, params: LinkParams, b: float = B_FLOOR) -> np.ndarray:
    """Subcarriers whose stationarity pair has a root with more than ``b`` bits.

    For fixed multipliers the two per-subcarrier rows reduce to one
    equation in ``b``: the power row fixes the BER as a function of ``b``
    and the bit row must then vanish.  That bit-row residual starts below
    zero and ends above it when a root exists past ``b``; a subcarrier whose
    residual is already nonnegative at ``b`` sits at the zero-bit boundary
    and is nulled.
    """
    C = np.asarray(cnr, dtype=float) * params.power_unit
    if not lambda1 > 0:
        return C > 0
    k1 = (params.alpha + lambda2) / lambda1
    k2 = params.ber_threshold + (1.0 - params.alpha) / lambda1
    a = math.expm1(b * LN2)
    with np.errstate(divide="ignore"):
        ber = k1 * a / (1.6 * b * C)
    ok = (C > 0) & (ber < 0.2)
    z = np.log(0.2 / np.where(ok, ber, 0.1))
    g = ber * (1.0 + LN2 * z * b * (a + 1.0) / a) - k2
    return ok & (g < 0)
