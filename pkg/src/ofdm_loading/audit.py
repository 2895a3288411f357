"""Independent checks of the loader: derivative, model and optimality audits.

* :func:`jacobian_audit` compares the analytic Jacobian with central
  differences at random feasible states.
* :func:`ber_roundtrip_audit` inverts the BER model and evaluates it again.
* :func:`grid_oracle_audit` brute-forces two-subcarrier problems on a grid
  and checks the solver's continuous objective is no worse.
* :func:`dual_oracle` solves the continuous problem by bisection on the
  multipliers, one scalar root per subcarrier, without the LM iteration.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.optimize import brentq

from . import kkt
from .channel import ChannelParams, realize
from .kkt import ConstraintCase, KktState
from .linkmodel import LN2, LinkParams, ber_subcarrier, power_for_target_ber
from .loader import LoaderOptions, optimize

__all__ = [
    "AuditResult",
    "analytic_jacobian",
    "jacobian_audit",
    "ber_roundtrip_audit",
    "grid_oracle_audit",
    "grid_oracle",
    "dual_oracle",
    "run_all",
]


@dataclass
class AuditResult:
    name: str
    passed: bool
    metric: float
    limit: float
    detail: str = ""
    seconds: float = 0.0
    exceptions: list = field(default_factory=list)

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status}  {self.name:<16} {self.metric:<12.4g} limit {self.limit:<10.3g} {self.seconds:6.2f}s  {self.detail}"


def analytic_jacobian(v, cnr, params, case, active=None):
    """Jacobian under audit (indirection point for fault-injection tests)."""
    return kkt.residuals_and_jacobian(v, cnr, params, case, active)[1]


def _random_state(rng, n, case):
    """Random interior state with a finite cap and matching CNRs (per watt)."""
    unit = 1e-6
    C_u = 10.0 ** rng.uniform(-0.5, 2.0, n)
    b = rng.uniform(1.0, 8.0, n)
    P = rng.uniform(0.2, 1.5, n) * np.expm1(b * LN2) / C_u
    lam1 = 10.0 ** rng.uniform(1.0, 3.0)
    aux = rng.uniform(0.1, 2.0)
    params = LinkParams(
        ber_threshold=1e-4,
        power_threshold=float(P.sum()) * rng.uniform(0.8, 1.2) * unit,
        alpha=rng.uniform(0.1, 0.9),
        power_unit=unit,
    )
    return KktState(P, b, lam1, aux).to_vector(), C_u / unit, params


def jacobian_audit(n_states: int = 100, n: int = 8, seed: int = 0, limit: float = 1e-5, rel_step: float = 1e-6) -> AuditResult:
    """Worst relative mismatch between analytic and central-difference Jacobians.

    Each entry's error is taken relative to the largest entry of its row, so
    structurally tiny entries do not inflate the figure.  Half the states
    use each constraint case.
    """
    t0 = time.perf_counter()
    rng = np.random.default_rng(seed)
    worst = 0.0
    cases = (ConstraintCase.POWER_INACTIVE, ConstraintCase.POWER_ACTIVE)
    for k in range(n_states):
        case = cases[k % 2]
        v, cnr, params = _random_state(rng, n, case)
        Ja = analytic_jacobian(v, cnr, params, case)

        def fun(w):
            return kkt.residuals_and_jacobian(w, cnr, params, case, want_jac=False)[0]

        Jn = kkt.central_differences(fun, v, rel_step)
        scale = np.maximum(np.max(np.abs(Ja), axis=1, keepdims=True), 1e-300)
        worst = max(worst, float(np.max(np.abs(Ja - Jn) / scale)))
    return AuditResult("jacobian", worst < limit, worst, limit, f"{n_states} states, N={n}", time.perf_counter() - t0)


def ber_roundtrip_audit(n_samples: int = 10_000, seed: int = 0, limit: float = 1e-10) -> AuditResult:
    """Relative error of ``ber(power_for_target_ber(b, C, t))`` against ``t``."""
    t0 = time.perf_counter()
    rng = np.random.default_rng(seed)
    b = rng.uniform(1.0, 10.0, n_samples)
    C = 10.0 ** rng.uniform(-2.0, 4.0, n_samples)
    t = 10.0 ** rng.uniform(-6.0, -3.0, n_samples)
    P = power_for_target_ber(b, C, t)
    err = float(np.max(np.abs(ber_subcarrier(P, b, C) - t) / t))
    return AuditResult("ber-roundtrip", err < limit, err, limit, f"{n_samples} samples", time.perf_counter() - t0)


GRID_BITS = np.arange(0.5, 10.01, 0.5)


def grid_oracle(cnr, params: LinkParams, n_power: int = 400, p_range=(1e-3, 1e3)):
    """Best objective of a two-subcarrier problem over a finite grid.

    Bits run over 0.5, 1, ..., 10 on both subcarriers and powers over a
    log grid (in ``params.power_unit``).  For every bit pair and first
    power, the smallest grid power on the second subcarrier that meets the
    average-BER target is located by binary search; the cap filters the
    pair afterwards.  Returns ``(objective, P, b)`` or ``(inf, None, None)``
    if nothing on the grid is feasible.
    """
    C = np.asarray(cnr, dtype=float) * params.power_unit
    if C.shape != (2,):
        raise ValueError("the grid oracle handles exactly two subcarriers")
    alpha, bth = params.alpha, params.ber_threshold
    pth = params.power_threshold / params.power_unit
    grid = np.geomspace(p_range[0], p_range[1], n_power)
    best = (math.inf, None, None)
    for b1 in GRID_BITS:
        # weighted BER excess of subcarrier 1 at every grid power
        ex1 = b1 * (0.2 * np.exp(-1.6 * C[0] * grid / math.expm1(b1 * LN2)) - bth)
        for b2 in GRID_BITS:
            ex2 = b2 * (0.2 * np.exp(-1.6 * C[1] * grid / math.expm1(b2 * LN2)) - bth)
            # ex2 decreases along the grid; need ex2 <= -ex1
            j = np.searchsorted(-ex2, ex1, side="left")
            ok = j < n_power
            if not ok.any():
                continue
            P1 = grid[ok]
            P2 = grid[j[ok]]
            tot = P1 + P2
            ok2 = tot <= pth
            if not ok2.any():
                continue
            k = int(np.argmin(np.where(ok2, tot, np.inf)))
            obj = alpha * tot[k] - (1.0 - alpha) * (b1 + b2)
            if obj < best[0]:
                best = (obj, np.array([P1[k], P2[k]]), np.array([b1, b2]))
    return best


def grid_oracle_audit(n_instances: int = 200, seed: int = 0, required: float = 0.9, tol: float = 1e-6) -> AuditResult:
    """Solver objective versus the grid oracle on random two-subcarrier channels.

    Instances alternate between no cap and a cap of 60% of the uncapped
    total power.  An instance counts as a match when the solver's
    continuous objective is at most the best grid objective plus ``tol``;
    the rest are reported as candidate local minima.
    """
    t0 = time.perf_counter()
    rng = np.random.default_rng(seed)
    chan = ChannelParams(n_subcarriers=2, n_taps=2, decay=0.2, noise_variance=1e-9, seed=seed)
    good = 0
    exceptions = []
    for k in range(n_instances):
        ch = realize(chan, k)
        params = LinkParams(alpha=float(rng.uniform(0.2, 0.8)))
        if k % 2:
            free = optimize(ch, params)
            if free.converged and free.continuous.powers.sum() > 0:
                params = replace(params, power_threshold=0.6 * free.continuous.powers.sum() * params.power_unit)
        res = optimize(ch, params)
        g_obj, _, _ = grid_oracle(ch.cnr, params)
        if not res.converged:
            exceptions.append((k, "not converged", math.nan, g_obj))
            continue
        st = res.continuous
        f = params.alpha * st.powers[st.active].sum() - (1.0 - params.alpha) * st.bits[st.active].sum()
        if f <= g_obj + tol:
            good += 1
        else:
            exceptions.append((k, "candidate local minimum", float(f), float(g_obj)))
    frac = good / n_instances
    return AuditResult(
        "grid-oracle", frac >= required, frac, required, f"{good}/{n_instances} instances",
        time.perf_counter() - t0, exceptions,
    )


def _subcarrier_roots(C, lam1, lam2, alpha, bth, b_lo, b_hi=40.0, n_scan=400):
    """Bit root of each subcarrier's stationarity pair at fixed multipliers.

    Returns ``(b, P, ber)``; subcarriers without a root above ``b_lo`` get 0.
    The bit-row residual at fixed multipliers is scanned for its first sign
    change and refined by bisection.
    """
    k1 = (alpha + lam2) / lam1
    k2 = bth + (1.0 - alpha) / lam1

    def g(b):
        a = np.expm1(b * LN2)
        with np.errstate(divide="ignore", invalid="ignore"):
            ber = k1 * a / (1.6 * b * C)
            z = np.log(0.2 / ber)
            val = ber * (1.0 + LN2 * z * b * (a + 1.0) / a) - k2
        return np.where(ber < 0.2, val, np.inf)

    bs = np.linspace(b_lo, b_hi, n_scan)
    G = g(bs[:, None])  # (n_scan, N)
    neg0 = G[0] < 0
    cross = np.argmax(G >= 0, axis=0)
    has = neg0 & (G >= 0).any(axis=0)
    lo = bs[np.maximum(cross - 1, 0)]
    hi = bs[cross]
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        gm = g(mid)
        left = gm < 0
        lo = np.where(left, mid, lo)
        hi = np.where(left, hi, mid)
    b = np.where(has, 0.5 * (lo + hi), 0.0)
    a = np.expm1(b * LN2)
    with np.errstate(divide="ignore", invalid="ignore"):
        ber = np.where(has, k1 * a / (1.6 * b * C), 0.0)
        P = np.where(has, np.log(0.2 / ber) * a / (1.6 * C), 0.0)
    return b, P, ber


def dual_oracle(cnr, params: LinkParams, min_bits: float = LoaderOptions.screen_bits, active=None):
    """Continuous optimum by nested bisection on the multipliers.

    For fixed ``(lambda1, lambda2)`` every subcarrier decouples into one
    scalar equation in its bits.  ``lambda1`` is found from the average-BER
    equality; with a binding cap, ``lambda2`` is then found from the total
    power.  Subcarriers whose root does not exceed ``min_bits`` are nulled,
    and so is every subcarrier outside ``active`` when a mask is given.

    Returns
    -------
    KktState
        Powers in ``params.power_unit``; ``aux`` holds ``lambda2``.
    """
    C = np.asarray(cnr, dtype=float) * params.power_unit
    if active is not None:
        C = np.where(active, C, 0.0)
    alpha, bth = params.alpha, params.ber_threshold
    pth = params.power_threshold / params.power_unit

    def inner(lam2, around=None):
        def ber_row(log_l1):
            b, _, ber = _subcarrier_roots(C, math.exp(log_l1), lam2, alpha, bth, min_bits)
            return float(np.sum(b * (ber - bth)))

        # The row is not monotone in lambda1 (the loaded set changes along
        # the way), so every sign change on a log scan is refined and the
        # candidate with the lowest objective is kept.
        if around is None:
            logs = np.linspace(math.log(1e-3), math.log(1e9), 97)
        else:
            logs = np.linspace(math.log(around) - 3.0, math.log(around) + 3.0, 25)
        vals = np.array([ber_row(t) for t in logs])
        best = None
        for i in np.flatnonzero((vals[:-1] > 0) & (vals[1:] <= 0)):
            t = logs[i + 1] if vals[i + 1] == 0 else brentq(ber_row, logs[i], logs[i + 1], xtol=1e-13, rtol=1e-14)
            lam1 = math.exp(t)
            b, P, _ = _subcarrier_roots(C, lam1, lam2, alpha, bth, min_bits)
            if not b.any():
                continue
            f = alpha * P.sum() - (1.0 - alpha) * b.sum()
            if best is None or f < best[0]:
                best = (f, lam1, b, P)
        if best is None:
            raise ValueError("no stationary point found for the average-BER row")
        return best[1:]

    lam1, b, P = inner(0.0)
    lam2 = 0.0
    if math.isfinite(pth) and P.sum() > pth:
        ref = lam1
        hi = 1.0
        while inner(hi, ref)[2].sum() > pth:
            hi *= 2.0
        lam2 = brentq(lambda l2: inner(l2, ref)[2].sum() - pth, 0.0, hi, xtol=1e-13, rtol=1e-13)
        lam1, b, P = inner(lam2, ref)
    return KktState(P, b, lam1, lam2, b > 0)


def run_all(quick: bool = False, seed: int = 0):
    """Run the three release audits; ``quick`` shrinks the sample counts."""
    if quick:
        return [
            jacobian_audit(n_states=20, seed=seed),
            ber_roundtrip_audit(n_samples=2000, seed=seed),
            grid_oracle_audit(n_instances=20, seed=seed),
        ]
    return [jacobian_audit(seed=seed), ber_roundtrip_audit(seed=seed), grid_oracle_audit(seed=seed)]
