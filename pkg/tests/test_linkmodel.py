import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ofdm_loading.linkmodel import (
    Allocation,
    LinkParams,
    ModelValidityWarning,
    average_ber,
    ber_subcarrier,
    mean_snr,
    objective,
    power_for_target_ber,
)


def test_ber_examples():
    # P C / (2^b - 1) = 1 -> 0.2 e^{-1.6}
    assert ber_subcarrier(3.0, 2.0, 1.0) == pytest.approx(0.2 * math.exp(-1.6), rel=1e-15)
    assert ber_subcarrier(0.0, 4.0, 10.0) == pytest.approx(0.2)


def test_ber_rejects_zero_bits():
    with pytest.raises(ValueError):
        ber_subcarrier(1.0, 0.0, 1.0)


def test_power_for_target_errors():
    with pytest.raises(ValueError):
        power_for_target_ber(2.0, 0.0, 1e-4)
    with pytest.raises(ValueError):
        power_for_target_ber(2.0, 1.0, 0.2)


@settings(max_examples=200, deadline=None)
@given(
    b=st.floats(1.0, 10.0),
    logc=st.floats(-2.0, 4.0),
    logt=st.floats(-6.0, -3.0),
)
def test_power_roundtrip_property(b, logc, logt):
    C, t = 10.0 ** logc, 10.0 ** logt
    P = power_for_target_ber(b, C, t)
    assert abs(ber_subcarrier(P, b, C) - t) / t < 1e-10


@settings(max_examples=100, deadline=None)
@given(b=st.floats(0.5, 12.0), P=st.floats(1e-3, 1e3), C=st.floats(1e-2, 1e3))
def test_ber_monotone(b, P, C):
    assert ber_subcarrier(P * 1.01, b, C) <= ber_subcarrier(P, b, C)
    assert ber_subcarrier(P, b + 0.1, C) >= ber_subcarrier(P, b, C)


def test_average_ber_is_bit_weighted_over_active():
    cnr = np.array([1.0, 2.0, 5.0])
    alloc = Allocation([2.0, 0.0, 4.0], [3.0, 9.0, 1.0])
    b1 = ber_subcarrier(3.0, 2.0, 1.0)
    b3 = ber_subcarrier(1.0, 4.0, 5.0)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ModelValidityWarning)
        assert average_ber(alloc, cnr) == pytest.approx((2 * b1 + 4 * b3) / 6, rel=1e-14)


def test_average_ber_errors_and_warning():
    with pytest.raises(ValueError):
        average_ber(Allocation.empty(3), np.ones(3))
    with pytest.warns(ModelValidityWarning):
        average_ber(Allocation([2.0], [0.1]), np.array([1.0]))


def test_link_params_validation():
    for kw in ({"alpha": 0.0}, {"alpha": 1.0}, {"ber_threshold": 0.01}, {"power_threshold": 0.0}, {"power_unit": 0.0}):
        with pytest.raises(ValueError):
            LinkParams(**kw)
    assert not LinkParams().capped and LinkParams(power_threshold=1e-4).capped


def test_allocation_totals_and_objective():
    a = Allocation([2.0, 3.0, 0.0], [1e-6, 2e-6, 0.0])
    assert a.throughput == 5.0 and a.total_power == pytest.approx(3e-6)
    assert objective(a, 0.5, 1e-6) == pytest.approx(0.5 * 3 - 0.5 * 5)
    assert mean_snr(a, np.array([1e6, 1e6, 1e6])) == pytest.approx(1.0)
    with pytest.raises(ValueError):
        Allocation([1.0, 2.0], [1.0])
