"""Levenberg-Marquardt iteration for square nonlinear systems ``S(x) = 0``.

Each iteration takes the damped Gauss-Newton step

    d = -(J^T J + mu I)^{-1} J^T S

and adjusts ``mu`` by the factors ``nu1`` (shrink) and ``nu2`` (grow).
Three damping schedules are available:

``"monotone"`` (default)
    Accept the candidate iff it lowers ``||S||_2``; shrink ``mu`` on
    acceptance, grow it on rejection.
``"repaired"``
    While ``mu > mu_th`` accept unconditionally and shrink ``mu``; below
    the threshold accept only improving candidates and grow ``mu``.
``"threshold"``
    The threshold rule with no improvement test at all: above ``mu_th``
    accept and shrink, otherwise reject and grow.

Termination follows the convention that a run has converged only when the
residual and the latest step are both below tolerance (infinity norms).  A
tiny step on top of a large residual is a stall.  An initial point whose
residual or step is already below tolerance stops immediately without
being reported as converged.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Optional

import numpy as np
import scipy.linalg

__all__ = [
    "LmConfig",
    "LmResult",
    "Termination",
    "TraceRow",
    "NumericalFault",
    "SCHEDULES",
    "lm_step",
    "solve",
    "solve_linear_spd",
    "write_trace",
]

SCHEDULES = ("monotone", "repaired", "threshold")


class NumericalFault(RuntimeError):
    """Internal numerical failure (e.g. a damped normal matrix that is not SPD)."""


class Termination(str, Enum):
    CONVERGED = "Converged"
    MAX_ITERATIONS = "MaxIterations"
    INITIAL_BELOW_TOLERANCE = "InitialBelowTolerance"
    STALLED = "Stalled"
    NON_FINITE = "NonFinite"

    def __str__(self):
        return self.value


@dataclass(frozen=True)
class LmConfig:
    """Damping schedule and stopping rules.

    ``stall_window`` ends a run whose ``||S||_2`` has improved by less than
    ``stall_ratio`` (relative) over that many iterations; 0 disables it.
    """

    mu0: float = 1e5
    nu1: float = 0.5
    nu2: float = 2.0
    mu_th: float = 1.0
    tol_residual: float = 1e-6
    tol_step: float = 1e-6
    k_max: int = 10_000
    schedule: str = "monotone"
    stall_window: int = 100
    stall_ratio: float = 1e-2
    keep_trace: bool = False

    def __post_init__(self):
        if not self.mu0 > 0:
            raise ValueError("mu0 must be positive")
        if not 0 < self.nu1 < 1 < self.nu2:
            raise ValueError("need 0 < nu1 < 1 < nu2")
        if not self.mu_th > 0:
            raise ValueError("mu_th must be positive")
        if not (self.tol_residual > 0 and self.tol_step > 0):
            raise ValueError("tolerances must be positive")
        if self.k_max < 1:
            raise ValueError("k_max must be >= 1")
        if self.schedule not in SCHEDULES:
            raise ValueError(f"schedule must be one of {SCHEDULES}")
        if self.stall_window < 0:
            raise ValueError("stall_window must be >= 0")


@dataclass(frozen=True)
class TraceRow:
    k: int
    mu: float
    res_norm: float
    step_norm: float
    accepted: bool


@dataclass
class LmResult:
    x: np.ndarray
    converged: bool
    iterations: int
    residual_norm: float
    step_norm: float
    termination: Termination
    n_clamped: int = 0
    trace: list = field(default_factory=list)


def solve_linear_spd(A, rhs) -> np.ndarray:
    """Solve ``A x = rhs`` for symmetric positive-definite ``A`` by Cholesky."""
    A = np.asarray(A, dtype=float)
    try:
        factor = scipy.linalg.cho_factor(A, lower=False, check_finite=True)
    except (np.linalg.LinAlgError, scipy.linalg.LinAlgError) as exc:
        with np.errstate(all="ignore"):
            cond = np.linalg.cond(A)
        raise NumericalFault(f"Cholesky failed (cond ~ {cond:.3g}): {exc}") from exc
    return scipy.linalg.cho_solve(factor, np.asarray(rhs, dtype=float))


def lm_step(J, S, mu: float) -> np.ndarray:
    """Damped Gauss-Newton step ``-(J^T J + mu I)^{-1} J^T S``."""
    J = np.atleast_2d(np.asarray(J, dtype=float))
    S = np.atleast_1d(np.asarray(S, dtype=float))
    if not mu > 0:
        raise ValueError("mu must be positive")
    if not (np.all(np.isfinite(J)) and np.all(np.isfinite(S))):
        raise ValueError("non-finite Jacobian or residual")
    A = J.T @ J
    A[np.diag_indices_from(A)] += mu
    return solve_linear_spd(A, -(J.T @ S))


def _inf(v) -> float:
    return float(np.max(np.abs(v))) if len(v) else 0.0


def solve(
    residual: Callable[[np.ndarray], np.ndarray],
    jacobian: Callable[[np.ndarray], np.ndarray],
    x0,
    config: LmConfig = LmConfig(),
    project: Optional[Callable[[np.ndarray], tuple]] = None,
) -> LmResult:
    """Run the damped iteration from ``x0``.

    Parameters
    ----------
    residual, jacobian : callable
        ``S(x)`` and ``J(x)``.  ``residual`` may raise ``ValueError`` or
        return non-finite values for points outside its domain; such
        candidates are rejected (or end the run under the schedules that
        accept without checking).
    x0 : array
        Starting point.
    config : LmConfig
    project : callable, optional
        Maps a candidate to ``(x_clamped, n_clamped)``; used to keep
        iterates inside box limits.
    """
    x = np.array(x0, dtype=float)
    S = np.asarray(residual(x), dtype=float)
    if not np.all(np.isfinite(S)):
        raise ValueError("non-finite residual at the initial point")
    J = jacobian(x)
    mu = config.mu0
    d = lm_step(J, S, mu)
    res, step = _inf(S), _inf(d)
    trace = []
    if config.keep_trace:
        trace.append(TraceRow(0, mu, res, step, True))
    if res < config.tol_residual or step < config.tol_step:
        return LmResult(x, False, 0, res, step, Termination.INITIAL_BELOW_TOLERANCE, 0, trace)

    norm2 = float(np.linalg.norm(S))
    history = [norm2]
    clamped = 0
    k = 0
    while True:
        if k >= config.k_max:
            return LmResult(x, False, k, res, step, Termination.MAX_ITERATIONS, clamped, trace)
        k += 1
        cand = x + d
        if project is not None:
            cand, nc = project(cand)
            clamped += nc
        try:
            Sc = np.asarray(residual(cand), dtype=float)
        except ValueError:
            Sc = None
        finite = Sc is not None and bool(np.all(np.isfinite(Sc)))
        improves = finite and float(np.linalg.norm(Sc)) < norm2

        if config.schedule == "monotone":
            accept = improves
            mu *= config.nu1 if accept else config.nu2
        elif mu > config.mu_th:
            accept = True
            mu *= config.nu1
        else:
            accept = improves and config.schedule == "repaired"
            mu *= config.nu2

        if accept and not finite:
            # unconditional acceptance walked off the domain
            return LmResult(x, False, k, res, step, Termination.NON_FINITE, clamped, trace)
        if accept:
            x, S = cand, Sc
            norm2 = float(np.linalg.norm(S))
            J = jacobian(x)
        d = lm_step(J, S, mu)
        res, step = _inf(S), _inf(d)
        if config.keep_trace:
            trace.append(TraceRow(k, mu, res, step, accept))
        if res < config.tol_residual and step < config.tol_step:
            return LmResult(x, True, k, res, step, Termination.CONVERGED, clamped, trace)
        if step < config.tol_step and res >= config.tol_residual:
            return LmResult(x, False, k, res, step, Termination.STALLED, clamped, trace)
        history.append(norm2)
        w = config.stall_window
        if w and len(history) > w and norm2 > (1.0 - config.stall_ratio) * history[-1 - w]:
            return LmResult(x, False, k, res, step, Termination.STALLED, clamped, trace)


TRACE_FIELDS = ("k", "mu", "res_norm", "step_norm", "accepted")


def write_trace(path, trace) -> None:
    """CSV dump of an iteration trace."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(TRACE_FIELDS)
        for r in trace:
            w.writerow([r.k, repr(r.mu), repr(r.res_norm), repr(r.step_norm), int(r.accepted)])
