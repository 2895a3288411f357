"""Joint bit and power loading: case dispatch, LM solve, integer finalization.

The continuous problem is solved first with the power cap inactive.  If the
resulting total power breaks the cap, the cap-active system is solved from
the same point with its powers scaled onto the cap.  In both cases the set
of loaded subcarriers is maintained alongside the iteration: a subcarrier
whose stationarity pair has no root above the screening level
(``LoaderOptions.screen_bits``) is nulled, and a nulled subcarrier that
becomes loadable again at the converged multipliers is brought back.  The
continuous solution is then finalized by flooring bits of at least 2 and
nulling the rest.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from . import kkt
from .channel import ChannelRealization
from .kkt import B_FLOOR, ConstraintCase, KktState
from .linkmodel import LN2, Allocation, LinkParams, average_ber, power_for_target_ber
from .lmsolver import LmConfig, LmResult, Termination, solve

__all__ = [
    "LoaderOptions",
    "LoadingResult",
    "KktReport",
    "initial_point",
    "optimize",
    "finalize",
    "verify_kkt",
]

log = logging.getLogger(__name__)

INIT_STRATEGIES = ("gap", "uniform")


@dataclass(frozen=True)
class LoaderOptions:
    """Knobs of the loading algorithm that sit outside the LM schedule.

    Attributes
    ----------
    init : {"gap", "uniform"}
        Starting bits: gap-approximation bits at a uniform nominal power, or
        ``uniform_bits`` on every subcarrier.
    scale_ber_row : bool
        Divide the average-BER row by the BER target while iterating.
    screen : bool
        Maintain the loaded-subcarrier set (see module docstring).  Without
        it every subcarrier with nonzero CNR stays in the system.
    screen_bits : float
        Bit level a subcarrier's root must exceed to stay loaded.  Roots just
        above the floor are nearly degenerate and stall the iteration; they
        end up nulled by finalization anyway.
    """

    init: str = "gap"
    uniform_bits: float = 4.0
    scale_ber_row: bool = True
    screen: bool = True
    screen_bits: float = 1.0
    max_stages: int = 8
    b_cap: float = 15.0
    power_cap_factor: float = 10.0

    def __post_init__(self):
        if self.init not in INIT_STRATEGIES:
            raise ValueError(f"init must be one of {INIT_STRATEGIES}")
        if not B_FLOOR <= self.screen_bits < 2.0:
            raise ValueError("screen_bits must lie in [B_FLOOR, 2)")
        if not B_FLOOR < self.uniform_bits <= self.b_cap:
            raise ValueError("uniform_bits must lie in (B_FLOOR, b_cap]")


@dataclass
class LoadingResult:
    """Outcome of :func:`optimize` for one channel.

    ``continuous.powers`` are in ``params.power_unit``; everything in
    ``final`` and ``total_power`` is in watts.
    """

    continuous: KktState
    final: Allocation
    case_used: Optional[ConstraintCase]
    solver: LmResult
    converged: bool
    continuous_avg_ber: float = math.nan
    achieved_avg_ber: float = math.nan
    stages: int = 0
    notes: list = field(default_factory=list)

    @property
    def throughput(self) -> float:
        return self.final.throughput

    @property
    def total_power(self) -> float:
        return self.final.total_power

    @property
    def n_loaded(self) -> int:
        return int(np.count_nonzero(self.final.bits))


def _usable_cnr(cnr):
    cnr = np.asarray(cnr, dtype=float)
    if cnr.ndim != 1 or not np.all(np.isfinite(cnr)) or np.any(cnr < 0):
        raise ValueError("cnr must be a finite, nonnegative vector")
    if not np.any(cnr > 0):
        raise ValueError("all-zero CNR vector: dead channel")
    return cnr


def nominal_power(params: LinkParams, n_loaded: int, case: ConstraintCase) -> float:
    """Per-subcarrier power (objective units) used by the gap start.

    Without a binding cap, trading one more bit (roughly doubling the
    power at high SNR) against its power cost balances at
    ``(1 - alpha) / (alpha ln 2)``.
    """
    p = (1.0 - params.alpha) / (params.alpha * LN2)
    if case is ConstraintCase.POWER_ACTIVE and params.capped:
        p = min(p, params.power_threshold / params.power_unit / max(n_loaded, 1))
    return p


def _start_values(C_u, params, case, options, n_loaded=None):
    bth = params.ber_threshold
    if options.init == "uniform":
        b = np.full(len(C_u), float(options.uniform_bits))
    else:
        gap = math.log(0.2 / bth) / 1.6
        pbar = nominal_power(params, len(C_u) if n_loaded is None else n_loaded, case)
        b = np.clip(np.log2(1.0 + C_u * pbar / gap), B_FLOOR, options.b_cap)
    return b, power_for_target_ber(b, C_u, bth)


def initial_point(
    cnr,
    params: LinkParams,
    case: ConstraintCase = ConstraintCase.POWER_INACTIVE,
    options: LoaderOptions = LoaderOptions(),
) -> KktState:
    """Starting point with every subcarrier exactly at the BER target.

    Bits come from ``options.init``; each power is the one that meets the
    BER target at those bits, so the average-BER row vanishes.  ``lambda1``
    zeroes the power row of the median-CNR subcarrier with ``lambda2 = 0``.
    For the cap-active case the powers are scaled down onto the cap if they
    exceed it.
    """
    cnr = _usable_cnr(cnr)
    n = len(cnr)
    floor = 1e-6 * cnr.max()
    C_u = np.maximum(cnr, floor) * params.power_unit
    b, P = _start_values(C_u, params, case, options)
    m = int(np.argsort(cnr, kind="stable")[n // 2])
    a = math.expm1(b[m] * LN2)
    q = b[m] * C_u[m] * math.exp(-1.6 * C_u[m] * P[m] / a) / a
    lam1 = params.alpha / (0.32 * q)
    if case is ConstraintCase.POWER_ACTIVE:
        if not params.capped:
            raise ValueError("the power-active case needs a finite power threshold")
        pth_u = params.power_threshold / params.power_unit
        if P.sum() > pth_u:
            P = P * (pth_u / P.sum())
    return KktState(P, b, lam1, 0.0)


def finalize(state: KktState, power_unit: float) -> Allocation:
    """Floor bits >= 2 keeping their power; null everything else."""
    keep = state.active & (state.bits >= 2.0)
    bits = np.where(keep, np.floor(state.bits), 0.0)
    powers = np.where(keep, state.powers * power_unit, 0.0)
    return Allocation(bits, powers)


def _multipliers(state: KktState, case: ConstraintCase):
    return state.lambda1, (state.aux if case is ConstraintCase.POWER_ACTIVE else 0.0)


def _solve_case(cnr, params, case, state: KktState, lm: LmConfig, options: LoaderOptions):
    """LM solve of one constraint case with loaded-set maintenance."""
    usable = cnr > 0
    C_u = cnr * params.power_unit
    pth_u = params.power_threshold / params.power_unit
    pmax = options.power_cap_factor * pth_u if math.isfinite(pth_u) else math.inf
    state = state.copy()
    fresh_b, fresh_P = _start_values(np.maximum(C_u, 1e-300), params, case, options)

    active = state.active & usable
    if options.screen:
        active &= kkt.loadable_subcarriers(cnr, *_multipliers(state, case), params, options.screen_bits)
    seen = set()
    result = None
    for stage in range(1, options.max_stages + 1):
        key = active.tobytes()
        if key in seen:
            break
        seen.add(key)
        revived = active & ~state.active
        state.bits[revived] = fresh_b[revived]
        state.powers[revived] = fresh_P[revived]
        state.active = active.copy()
        state.bits[~active] = 0.0
        state.powers[~active] = 0.0
        if not active.any():
            zero = LmResult(state.to_vector(), True, 0, 0.0, 0.0, Termination.CONVERGED)
            return state, zero, stage

        mask = active.copy()
        n = len(cnr)
        # Nulled subcarriers only add zero rows and columns (and so does the
        # slack when there is no cap); the LM runs on the remaining block.
        on = np.flatnonzero(mask)
        tail = [2 * n] if case is ConstraintCase.POWER_INACTIVE and not math.isfinite(pth_u) else [2 * n, 2 * n + 1]
        keep = np.concatenate([on, n + on, tail])
        base = state.to_vector()

        def expand(xc):
            v = base.copy()
            v[keep] = xc
            return v

        def fun(xc):
            return kkt.residuals_and_jacobian(expand(xc), cnr, params, case, mask, scale_ber_row=options.scale_ber_row, want_jac=False)[0][keep]

        def jac(xc):
            return kkt.residuals_and_jacobian(expand(xc), cnr, params, case, mask, scale_ber_row=options.scale_ber_row)[1][np.ix_(keep, keep)]

        m = len(on)

        def project(xc):
            w = xc.copy()
            w[:m] = np.clip(w[:m], 0.0, pmax)
            w[m : 2 * m] = np.clip(w[m : 2 * m], B_FLOOR, options.b_cap)
            return w, int(np.count_nonzero(w != xc))

        result = solve(fun, jac, base[keep], lm, project)
        # A step below tolerance away from a root can just mean the damping
        # swamps J^T S (small systems have small gradients); restart from
        # the last iterate with less damping.
        cfg = lm
        iters = result.iterations
        while (
            result.termination in (Termination.INITIAL_BELOW_TOLERANCE, Termination.STALLED)
            and result.step_norm < lm.tol_step
            and result.residual_norm >= lm.tol_residual
            and cfg.mu0 / 100.0 >= lm.mu_th
        ):
            cfg = replace(cfg, mu0=cfg.mu0 / 100.0)
            result = solve(fun, jac, result.x, cfg, project)
            iters += result.iterations
        result.iterations = iters
        result = replace(result, x=expand(result.x))
        state = KktState.from_vector(result.x, active)
        lam1, lam2 = _multipliers(state, case)

        if result.converged:
            if not options.screen:
                return state, result, stage
            loadable = kkt.loadable_subcarriers(cnr, lam1, lam2, params, options.screen_bits)
            revive = usable & ~active & loadable
            # a stationary point below the screening level is not a loaded subcarrier
            stale = active & ~loadable & (state.bits < options.screen_bits)
            if not (revive.any() or stale.any()):
                return state, result, stage
            active = (active | revive) & ~stale
            continue

        if not options.screen:
            break
        pinned = active & ((state.bits <= B_FLOOR * (1 + 1e-12)) | (state.powers <= 0.0))
        unloadable = active & ~kkt.loadable_subcarriers(cnr, lam1, lam2, params, options.screen_bits)
        # Marginal subcarriers near the cutoff may have no stationary point;
        # the ones dominating the residual are nulled (they would round to 0 bits).
        S = np.abs(kkt.residuals_and_jacobian(result.x, cnr, params, case, mask, scale_ber_row=options.scale_ber_row, want_jac=False)[0])
        row = np.maximum(S[:n], S[n : 2 * n])
        marginal = active & (state.bits < 2.0) & (row >= 0.5 * row[active].max())
        drop = pinned | unloadable
        if not drop.any():
            drop = marginal
        if not drop.any():
            break
        log.debug("stage %d (%s): nulling %d subcarriers", stage, result.termination, drop.sum())
        active = active & ~drop
    return state, result, len(seen)


def optimize(
    channel: ChannelRealization,
    params: LinkParams,
    lm: LmConfig = LmConfig(),
    options: LoaderOptions = LoaderOptions(),
    unconstrained: Optional[LoadingResult] = None,
) -> LoadingResult:
    """Solve the loading problem for one channel realization.

    ``unconstrained`` may carry a previous result for the same channel,
    ``alpha`` and BER target with no power cap; it is reused as the
    cap-inactive solution instead of solving that case again.

    Non-convergence never raises: the result carries ``converged=False``
    and an all-zero final allocation.
    """
    cnr = np.asarray(channel.cnr if isinstance(channel, ChannelRealization) else channel, dtype=float)
    n = len(cnr)
    try:
        cnr = _usable_cnr(cnr)
    except ValueError as exc:
        empty = KktState(np.zeros(n), np.zeros(n), 0.0, 0.0, np.zeros(n, dtype=bool))
        res = LmResult(empty.to_vector(), False, 0, math.nan, math.nan, Termination.STALLED)
        return LoadingResult(empty, Allocation.empty(n), None, res, False, notes=[str(exc)])

    pth_u = params.power_threshold / params.power_unit
    notes = []
    stages = 0
    # The slack Y2 enters only the cap row, so the remaining rows are solved
    # without it and Y2 is recovered from the cap row in closed form.
    if unconstrained is not None and unconstrained.case_used is ConstraintCase.POWER_INACTIVE:
        state = unconstrained.continuous.copy()
        lm_res = unconstrained.solver
        stages = unconstrained.stages
    else:
        free = replace(params, power_threshold=math.inf)
        x0 = initial_point(cnr, free, ConstraintCase.POWER_INACTIVE, options)
        state, lm_res, stages = _solve_case(cnr, free, ConstraintCase.POWER_INACTIVE, x0, lm, options)

    total_u = float(state.powers[state.active].sum())
    if lm_res.converged and total_u <= pth_u:
        state.aux = math.sqrt(pth_u - total_u) if math.isfinite(pth_u) else 0.0
        return _package(state, ConstraintCase.POWER_INACTIVE, lm_res, params, cnr, stages, notes)
    if not lm_res.converged:
        notes.append(f"power-inactive case: {lm_res.termination}")
    if not math.isfinite(pth_u):
        return _failed(state, lm_res, params, stages, notes)

    start = state.copy()
    start.aux = 0.0
    if total_u > 0:
        start.powers = start.powers * (pth_u / total_u)
    else:
        start = initial_point(cnr, params, ConstraintCase.POWER_ACTIVE, options)
    state2, lm2, st2 = _solve_case(cnr, params, ConstraintCase.POWER_ACTIVE, start, lm, options)
    stages += st2
    if lm2.converged and state2.aux >= 0:
        return _package(state2, ConstraintCase.POWER_ACTIVE, lm2, params, cnr, stages, notes)
    if lm2.converged:
        notes.append(f"power-active case converged with negative lambda2 = {state2.aux:.3g}")
    else:
        notes.append(f"power-active case: {lm2.termination}")
    return _failed(state2, lm2, params, stages, notes)


def _package(state, case, lm_res, params, cnr, stages, notes):
    final = finalize(state, params.power_unit)
    cont = Allocation(np.where(state.active, state.bits, 0.0), np.where(state.active, state.powers * params.power_unit, 0.0))
    cont_ber = average_ber(cont, cnr, warn=False) if cont.active.any() else math.nan
    fin_ber = average_ber(final, cnr, warn=False) if final.active.any() else math.nan
    return LoadingResult(state, final, case, lm_res, True, cont_ber, fin_ber, stages, notes)


def _failed(state, lm_res, params, stages, notes):
    return LoadingResult(state, Allocation.empty(state.n), None, lm_res, False, stages=stages, notes=notes)


@dataclass
class KktReport:
    """Post-hoc audit of a loading result."""

    converged: bool
    case: Optional[ConstraintCase]
    residual_norm: float
    lambda1: float
    lambda2: float
    power_slack: float
    continuous_avg_ber: float
    final_avg_ber: float
    final_ber_ok: bool
    power_ok: bool
    multipliers_ok: bool
    nulls_consistent: bool

    @property
    def ok(self) -> bool:
        return self.converged and self.final_ber_ok and self.power_ok and self.multipliers_ok

    def lines(self):
        yield f"converged          {self.converged}"
        yield f"case               {self.case}"
        yield f"|S(x_op)|_inf      {self.residual_norm:.3e}"
        yield f"lambda1            {self.lambda1:.6g}"
        yield f"lambda2            {self.lambda2:.6g}"
        yield f"power slack (W)    {self.power_slack:.6g}"
        yield f"avg BER continuous {self.continuous_avg_ber:.9g}"
        yield f"avg BER final      {self.final_avg_ber:.9g}  ok={self.final_ber_ok}"
        yield f"power constraint   ok={self.power_ok}"
        yield f"multiplier signs   ok={self.multipliers_ok}"
        yield f"nulled consistent  {self.nulls_consistent}"


def verify_kkt(
    result: LoadingResult, channel, params: LinkParams, options: LoaderOptions = LoaderOptions()
) -> KktReport:
    """Recompute the stationarity residual and constraint slacks.

    The residual uses the unscaled equations at the adopted case, so it is
    comparable across runs with and without BER-row scaling.
    """
    cnr = np.asarray(channel.cnr if isinstance(channel, ChannelRealization) else channel, dtype=float)
    st = result.continuous
    case = result.case_used
    if not result.converged or case is None:
        return KktReport(False, case, math.nan, st.lambda1, math.nan, math.nan, math.nan, math.nan, False, False, False, False)
    if st.active.any():
        res = float(np.max(np.abs(kkt.residuals(st, cnr, params, case))))
    else:
        res = 0.0
    total_w = float(st.powers[st.active].sum()) * params.power_unit
    slack = params.power_threshold - total_w
    lam1, lam2 = _multipliers(st, case)
    final_ber = result.achieved_avg_ber
    final_ok = bool(np.isnan(final_ber) or final_ber <= params.ber_threshold * (1 + 1e-9))
    if case is ConstraintCase.POWER_ACTIVE:
        power_ok = abs(slack) <= 1e-9 * params.power_threshold
    else:
        power_ok = (not params.capped) or slack >= -1e-9 * params.power_threshold
    mult_ok = lam1 > 0 and lam2 >= 0
    revivable = (~st.active) & (cnr > 0) & kkt.loadable_subcarriers(cnr, lam1, lam2, params, options.screen_bits)
    return KktReport(
        True, case, res, lam1, lam2, slack, result.continuous_avg_ber, final_ber,
        final_ok, bool(power_ok), bool(mult_ok), not revivable.any(),
    )
