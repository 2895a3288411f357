import math

import numpy as np
import pytest

from ofdm_loading.kkt import (
    B_FLOOR,
    ConstraintCase,
    KktState,
    central_differences,
    finite_diff_jacobian,
    jacobian,
    loadable_subcarriers,
    residuals,
    residuals_and_jacobian,
)
from ofdm_loading.linkmodel import LinkParams

CASES = (ConstraintCase.POWER_INACTIVE, ConstraintCase.POWER_ACTIVE)
UNIT = 1e-6


def random_problem(rng, n=6, capped=True):
    C_u = 10 ** rng.uniform(-0.5, 2, n)
    b = rng.uniform(1, 8, n)
    P = rng.uniform(0.2, 1.5, n) * np.expm1(b * math.log(2)) / C_u
    st = KktState(P, b, 10 ** rng.uniform(1, 3), rng.uniform(0.1, 2))
    pth = P.sum() * 1.1 * UNIT if capped else math.inf
    return st, C_u / UNIT, LinkParams(1e-4, pth, rng.uniform(0.1, 0.9), UNIT)


def lagrangian(P, b, lam1, lam2, y2, C_u, p):
    """alpha sum P - (1-alpha) sum b + lam1 * BER excess + lam2 * cap row."""
    ber = 0.2 * np.exp(-1.6 * C_u * P / (2.0**b - 1.0))
    pth = p.power_threshold / p.power_unit
    return (
        p.alpha * P.sum()
        - (1 - p.alpha) * b.sum()
        + lam1 * np.sum(b * (ber - p.ber_threshold))
        + lam2 * (P.sum() - pth + y2**2)
    )


@pytest.mark.parametrize("case", CASES)
def test_stationarity_rows_are_lagrangian_gradient(case):
    rng = np.random.default_rng(1)
    st, cnr, p = random_problem(rng)
    n = st.n
    C_u = cnr * UNIT
    lam2 = st.aux if case is ConstraintCase.POWER_ACTIVE else 0.0

    def L(v):
        return np.array([lagrangian(v[:n], v[n:], st.lambda1, lam2, 0.0, C_u, p)])

    g = central_differences(L, np.concatenate([st.powers, st.bits]), 1e-6)[0]
    R = residuals(st, cnr, p, case)
    np.testing.assert_allclose(R[: 2 * n], g, rtol=1e-6, atol=1e-8)
    ber = 0.2 * np.exp(-1.6 * C_u * st.powers / np.expm1(st.bits * math.log(2)))
    assert R[2 * n] == pytest.approx(np.sum(st.bits * (ber - 1e-4)), rel=1e-12)
    y2 = st.aux**2 if case is ConstraintCase.POWER_INACTIVE else 0.0
    assert R[2 * n + 1] == pytest.approx(st.powers.sum() - p.power_threshold / UNIT + y2, rel=1e-12, abs=1e-12)


@pytest.mark.parametrize("case", CASES)
@pytest.mark.parametrize("scale", [False, True])
def test_jacobian_matches_finite_differences(case, scale):
    rng = np.random.default_rng(2)
    for _ in range(10):
        st, cnr, p = random_problem(rng)
        Ja = jacobian(st, cnr, p, case, scale_ber_row=scale)
        Jn = finite_diff_jacobian(st, cnr, p, case, scale_ber_row=scale)
        row = np.max(np.abs(Ja), axis=1, keepdims=True)
        assert np.max(np.abs(Ja - Jn) / row) < 1e-6


def test_ber_row_scaling():
    rng = np.random.default_rng(3)
    st, cnr, p = random_problem(rng)
    r0 = residuals(st, cnr, p, ConstraintCase.POWER_INACTIVE)
    r1 = residuals(st, cnr, p, ConstraintCase.POWER_INACTIVE, scale_ber_row=True)
    n = st.n
    assert r1[2 * n] == pytest.approx(r0[2 * n] / p.ber_threshold, rel=1e-14)
    np.testing.assert_array_equal(np.delete(r0, 2 * n), np.delete(r1, 2 * n))


def test_uncapped_last_row_vanishes():
    rng = np.random.default_rng(4)
    st, cnr, p = random_problem(rng, capped=False)
    R, J = residuals_and_jacobian(st.to_vector(), cnr, p, ConstraintCase.POWER_INACTIVE)
    assert R[-1] == 0.0 and not J[-1].any() and not J[:, -1].any()
    with pytest.raises(ValueError):
        residuals(st, cnr, p, ConstraintCase.POWER_ACTIVE)


def test_nulled_subcarriers_drop_out():
    rng = np.random.default_rng(5)
    st, cnr, p = random_problem(rng)
    mask = np.array([True, False, True, True, False, True])
    full = st.copy()
    st.active = mask
    st.bits[~mask] = 0.0
    st.powers[~mask] = 0.0
    R, J = residuals_and_jacobian(st.to_vector(), cnr, p, ConstraintCase.POWER_ACTIVE, mask)
    n = st.n
    for i in np.flatnonzero(~mask):
        assert R[i] == 0 and R[n + i] == 0
        assert not J[[i, n + i]].any() and not J[:, [i, n + i]].any()
    # the active part equals the system restricted to those subcarriers
    sub = KktState(full.powers[mask], full.bits[mask], full.lambda1, full.aux)
    Rs = residuals(sub, cnr[mask], p, ConstraintCase.POWER_ACTIVE)
    k = mask.sum()
    np.testing.assert_allclose(R[np.flatnonzero(mask)], Rs[:k], rtol=1e-14)
    assert R[2 * n] == pytest.approx(Rs[2 * k], rel=1e-13)
    assert R[2 * n + 1] == pytest.approx(Rs[2 * k + 1], rel=1e-12, abs=1e-12)


def test_domain_errors():
    rng = np.random.default_rng(6)
    st, cnr, p = random_problem(rng)
    v = st.to_vector()
    v[st.n] = B_FLOOR / 2
    with pytest.raises(ValueError):
        residuals_and_jacobian(v, cnr, p, ConstraintCase.POWER_INACTIVE)
    v = st.to_vector()
    v[0] = np.nan
    with pytest.raises(ValueError):
        residuals_and_jacobian(v, cnr, p, ConstraintCase.POWER_INACTIVE)


def test_state_vector_roundtrip():
    st = KktState([1.0, 2.0], [3.0, 4.0], 5.0, 6.0)
    v = st.to_vector()
    np.testing.assert_array_equal(v, [1, 2, 3, 4, 5, 6])
    back = KktState.from_vector(v)
    assert back.lambda1 == 5.0 and back.aux == 6.0 and back.active.all()
    with pytest.raises(ValueError):
        KktState.from_vector(np.zeros(5))


def bit_row_root_exists(C_u, lam1, alpha, bth, b0):
    """Brute force from the raw rows: solve the power row for P at each b,
    evaluate the bit row with a numerical derivative, look for - to + ."""
    prev = None
    for b in np.linspace(b0, 30, 6000):
        a = 2.0**b - 1
        e = alpha * a / (0.32 * lam1 * b * C_u)
        if e >= 1:
            return False
        P = -a * math.log(e) / (1.6 * C_u)
        h = 1e-6
        f = lambda bb: bb * 0.2 * math.exp(-1.6 * C_u * P / (2.0**bb - 1))
        F = (f(b + h) - f(b - h)) / (2 * h)
        g = -(1 - alpha) + lam1 * (F - bth)
        if prev is not None and prev < 0 <= g:
            return True
        if prev is None and g >= 0:
            return False
        prev = g
    return False


def test_loadable_matches_brute_force():
    rng = np.random.default_rng(7)
    p = LinkParams(power_unit=UNIT)
    C_u = 10 ** rng.uniform(-1, 3, 40)
    for lam1 in (30.0, 200.0, 2000.0):
        got = loadable_subcarriers(C_u / UNIT, lam1, 0.0, p, 1.0)
        # the sign at b0 decides; a root then exists before BER hits 0.2
        want = [bit_row_root_exists(c, lam1, 0.5, 1e-4, 1.0) for c in C_u]
        np.testing.assert_array_equal(got, want)
    assert loadable_subcarriers(np.array([0.0, 1e12]), 100.0, 0.0, p).tolist() == [False, True]
