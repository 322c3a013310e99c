import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from deadline_spending.errors import DomainError, UnsupportedError
from deadline_spending.utility import (DualPowerZeta, PowerMu, PowerZeta, TableMu, TabulatedZeta,
                                       UtilitySpec, eval_u, is_log_concave_zeta, is_more_concave,
                                       zeta_inverse)

LINEAR = UtilitySpec(PowerZeta(1.0), PowerMu(1.0))


def spec(zeta, mu=None):
    return UtilitySpec(zeta, mu or PowerMu(0.5))


class TestEvalU:
    def test_zero_amount(self):
        assert eval_u(LINEAR, 0.5, 0) == 0.0

    def test_normalization(self):
        assert eval_u(LINEAR, 1.0, 1) == pytest.approx(1.0)

    def test_square_times_root(self):
        assert eval_u(UtilitySpec(PowerZeta(2.0), PowerMu(0.5)), 0.5, 4) == pytest.approx(0.5)

    @pytest.mark.parametrize("theta,amount", [(-0.1, 1), (1.1, 1), (0.5, -1)])
    def test_out_of_range(self, theta, amount):
        with pytest.raises(DomainError):
            eval_u(LINEAR, theta, amount)

    def test_amount_beyond_table(self):
        s = UtilitySpec(PowerZeta(1.0), TableMu((0.0, 1.0, 1.5)))
        with pytest.raises(DomainError):
            eval_u(s, 0.5, 3)


class TestZetaInverse:
    def test_identity(self):
        assert zeta_inverse(LINEAR, 0.5) == pytest.approx(0.5)

    def test_square(self):
        assert zeta_inverse(spec(PowerZeta(2.0)), 0.25) == pytest.approx(0.5)

    def test_tabulated_cube(self):
        th = np.linspace(0.0, 1.0, 101)
        z = TabulatedZeta(tuple(th), tuple(th ** 3))
        assert abs(zeta_inverse(spec(z), 0.125) - 0.5) <= 1e-6

    def test_tabulated_cube_off_node(self):
        th = np.linspace(0.0, 1.0, 101)
        z = TabulatedZeta(tuple(th), tuple(th ** 3))
        # between nodes the interpolant, not the cube, is inverted
        v = z(0.537)
        assert z.inverse(v) == pytest.approx(0.537, abs=1e-10)
        assert abs(z.inverse(0.537 ** 3) - 0.537) < 1e-4

    @pytest.mark.parametrize("v", [-0.01, 1.01])
    def test_out_of_range(self, v):
        with pytest.raises(DomainError):
            zeta_inverse(LINEAR, v)

    @given(st.floats(0.2, 5.0), st.floats(0.0, 1.0))
    def test_power_round_trip(self, k, theta):
        z = PowerZeta(k)
        assert z.inverse(z(theta)) == pytest.approx(theta, abs=1e-9)

    # near theta = 1, (1 - theta)**m drops below double resolution
    @given(st.floats(1.0, 5.0), st.floats(0.0, 0.95))
    def test_dual_power_round_trip(self, m, theta):
        z = DualPowerZeta(m)
        assert z.inverse(z(theta)) == pytest.approx(theta, abs=1e-7)


class TestValidation:
    def test_linear_mu_rejected_beyond_one_unit(self):
        with pytest.raises(DomainError):
            UtilitySpec(PowerZeta(1.0), PowerMu(1.0)).validate(2)

    def test_linear_mu_ok_for_single_unit(self):
        UtilitySpec(PowerZeta(1.0), PowerMu(1.0)).validate(1)

    def test_non_concave_table(self):
        with pytest.raises(DomainError):
            UtilitySpec(PowerZeta(1.0), TableMu((0.0, 1.0, 2.5))).validate(2)

    def test_unnormalized_table_zeta(self):
        with pytest.raises(DomainError):
            TabulatedZeta((0.0, 0.5, 1.0), (0.0, 0.5, 2.0))

    def test_decreasing_table_zeta(self):
        with pytest.raises(DomainError):
            TabulatedZeta((0.0, 0.5, 1.0), (0.0, 0.7, 0.6, 1.0)[:3])

    def test_json_round_trip(self):
        s = UtilitySpec(DualPowerZeta(2.0), TableMu((0.0, 1.0, 1.4)))
        assert UtilitySpec.from_json(s.to_json()) == s


class TestMoreConcave:
    def test_dual_power_more_concave_than_linear(self):
        assert is_more_concave(LINEAR, spec(DualPowerZeta(2.0)), grid=100)

    def test_square_vs_linear(self):
        # -zeta''/zeta' is -1/theta for theta**2 and 0 for theta, so theta is
        # strictly more concave than theta**2
        assert is_more_concave(spec(PowerZeta(2.0)), LINEAR, grid=100)
        assert not is_more_concave(LINEAR, spec(PowerZeta(2.0)), grid=100)

    def test_equal_is_not_strict(self):
        assert not is_more_concave(LINEAR, LINEAR, grid=100)

    def test_unsmoothed_table_unsupported(self):
        th = np.linspace(0.0, 1.0, 11)
        z = TabulatedZeta(tuple(th), tuple(th))
        with pytest.raises(UnsupportedError):
            is_more_concave(LINEAR, spec(z))

    def test_smooth_table_supported(self):
        th = np.linspace(0.0, 1.0, 41)
        z = TabulatedZeta(tuple(th), tuple(th ** 2), smooth=True)
        assert is_more_concave(spec(z), LINEAR, grid=50)

    @given(st.floats(0.2, 4.0), st.floats(1.05, 3.0))
    def test_power_ordering(self, k, ratio):
        assert is_more_concave(spec(PowerZeta(k * ratio)), spec(PowerZeta(k)), grid=50)


class TestLogConcave:
    @pytest.mark.parametrize("k", [0.3, 1.0, 2.0, 7.0])
    def test_power_is_log_concave(self, k):
        assert is_log_concave_zeta(spec(PowerZeta(k)))

    def test_identity_table(self):
        th = np.linspace(0.0, 1.0, 11)
        assert is_log_concave_zeta(spec(TabulatedZeta(tuple(th), tuple(th))))

    def test_exp_square_is_in_fact_log_concave(self):
        # (log(e^{s} - 1))'' has the sign of e^{s} - 1 - 2s for s = theta**2,
        # which is negative on (0, 1]
        z = TabulatedZeta.from_function(lambda t: np.expm1(t ** 2), 401, smooth=True)
        assert is_log_concave_zeta(spec(z))

    def test_steeper_exp_square_is_not(self):
        z = TabulatedZeta.from_function(lambda t: np.expm1(4.0 * t ** 2), 401, smooth=True)
        assert not is_log_concave_zeta(spec(z))


@given(st.floats(0.0, 1.0), st.floats(0.0, 1.0), st.floats(0.5, 3.0))
@settings(max_examples=50)
def test_u_monotone_in_theta(a, b, k):
    s = UtilitySpec(PowerZeta(k), PowerMu(0.6))
    lo, hi = min(a, b), max(a, b)
    assert eval_u(s, lo, 3) <= eval_u(s, hi, 3)


@given(st.floats(0.1, 0.95))
def test_power_mu_strictly_concave_table(gamma):
    d = np.diff(PowerMu(gamma).table(6))
    assert np.all(d > 0) and np.all(np.diff(d) < 0)


def test_dual_power_closed_form_risk_aversion():
    z = DualPowerZeta(2.0)
    for th in (0.1, 0.5, 0.9):
        assert z.risk_aversion(th) == pytest.approx(1.0 / (1.0 - th))
        assert z.risk_aversion(th) == pytest.approx(-z.second_derivative(th) / z.derivative(th))


def test_scaled_mu():
    s = UtilitySpec(PowerZeta(1.0), PowerMu(0.5)).scaled(3.0, 4)
    assert s.mu_table(4)[4] == pytest.approx(6.0)
    assert math.isclose(s.zeta(1.0), 1.0)
