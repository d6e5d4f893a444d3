import math

import numpy as np
import pytest

from drekf.errors import SingularMeasurementError
from drekf.systems import (
    beacon_measurement,
    beacon_measurement_jacobian,
    ct_dynamics,
    ct_jacobian,
    ct_measurement,
    ct_measurement_jacobian,
    ct_system,
    curvature_constants,
    unicycle_dynamics,
    unicycle_jacobian,
    unicycle_input_jacobian,
    unicycle_system,
    wrap_angle,
    wrap_residual,
)
from oracles import fd_jacobian

DT = 0.2
BEACONS = ((1.0, 1.0), (14.0, 1.0), (7.5, 9.0))


class TestCtDynamics:
    def test_zero_velocity_fixed_point(self):
        x = np.array([3.0, -2.0, 0.0, 0.0, 0.4])
        out = ct_dynamics(x, DT)
        np.testing.assert_allclose(out, x, atol=1e-15)

    def test_spot_value_from_model_equations(self):
        # Direct evaluation of the turn model at the benchmark initial mean.
        out = ct_dynamics(np.array([0.0, 0.0, 2.0, 0.0, 0.3]), DT)
        phi = 0.3 * DT
        expected = np.array(
            [
                math.sin(phi) / 0.3 * 2.0,
                (1.0 - math.cos(phi)) / 0.3 * 2.0,
                math.cos(phi) * 2.0,
                math.sin(phi) * 2.0,
                0.3,
            ]
        )
        np.testing.assert_allclose(out, expected, atol=1e-14)
        np.testing.assert_allclose(
            out, [0.399760, 0.011996, 1.996401, 0.119928, 0.3], atol=5e-7
        )

    def test_small_omega_limit_is_constant_velocity(self, rng):
        # The physical gap from the omega=0 model scales like omega*dt*|v|,
        # so |v| <= 0.04 keeps the stated 1e-10 budget meaningful.
        for _ in range(50):
            x = np.array(
                [
                    rng.uniform(-5, 5),
                    rng.uniform(-5, 5),
                    rng.uniform(-0.04, 0.04),
                    rng.uniform(-0.04, 0.04),
                    0.0,
                ]
            )
            cv = x.copy()
            cv[0] += cv[2] * DT
            cv[1] += cv[3] * DT
            for omega in (1e-8, -1e-8):
                xo = x.copy()
                xo[4] = omega
                out = ct_dynamics(xo, DT)
                out[4] = 0.0
                assert np.max(np.abs(out - cv)) <= 1e-10

    def test_branch_switch_continuity(self):
        # Straddle the Taylor/exact threshold; outputs must agree closely.
        from drekf.systems import CT_SMALL_PHI

        omega_at = CT_SMALL_PHI / DT
        x = np.array([1.0, -2.0, 1.5, -0.5, 0.0])
        lo = x.copy()
        lo[4] = omega_at * (1.0 - 1e-12)
        hi = x.copy()
        hi[4] = omega_at * (1.0 + 1e-12)
        assert np.max(np.abs(ct_dynamics(lo, DT) - ct_dynamics(hi, DT))) <= 1e-12
        assert np.max(np.abs(ct_jacobian(lo, DT) - ct_jacobian(hi, DT))) <= 1e-12

    def test_jacobian_matches_finite_differences(self, rng):
        worst = 0.0
        for _ in range(1000):
            x = np.array(
                [
                    rng.uniform(-10, 10),
                    rng.uniform(-10, 10),
                    rng.uniform(-3, 3),
                    rng.uniform(-3, 3),
                    rng.uniform(-1, 1),
                ]
            )
            jac = ct_jacobian(x, DT)
            ref = fd_jacobian(lambda z: ct_dynamics(z, DT), x)
            worst = max(worst, np.max(np.abs(jac - ref)) / max(1.0, np.max(np.abs(ref))))
        assert worst <= 1e-5


class TestCtMeasurement:
    def test_axis_points(self):
        np.testing.assert_allclose(
            ct_measurement(np.array([1.0, 0.0, 0, 0, 0])), [1.0, 0.0]
        )
        np.testing.assert_allclose(
            ct_measurement(np.array([0.0, 2.0, 0, 0, 0])), [2.0, math.pi / 2]
        )

    def test_range_floor_raises(self):
        with pytest.raises(SingularMeasurementError):
            ct_measurement(np.array([0.0, 0.0, 1.0, 0.0, 0.0]))
        with pytest.raises(SingularMeasurementError):
            ct_measurement_jacobian(np.array([1e-9, 0.0, 0, 0, 0]))

    def test_jacobian_matches_finite_differences(self, rng):
        for _ in range(300):
            x = np.array(
                [rng.uniform(-10, 10), rng.uniform(-10, 10), 0.0, 0.0, 0.0]
            )
            if math.hypot(x[0], x[1]) < 0.3:
                continue
            jac = ct_measurement_jacobian(x)
            ref = fd_jacobian(lambda z: ct_measurement(z), x)
            assert np.max(np.abs(jac - ref)) <= 1e-6

    def test_system_guarded_evaluation_at_origin(self):
        system = ct_system(dt=DT)
        y = system.h(np.array([0.0, 0.0, 2.0, 0.0, 0.3]))
        np.testing.assert_array_equal(y, [0.0, 0.0])
        np.testing.assert_array_equal(
            system.jac_h(np.array([0.0, 0.0, 2.0, 0.0, 0.3])), np.zeros((2, 5))
        )


class TestUnicycle:
    def test_zero_input_fixed_point(self):
        x = np.array([1.0, 2.0, 0.7])
        np.testing.assert_allclose(
            unicycle_dynamics(x, np.zeros(2), DT), x, atol=1e-15
        )

    def test_axis_aligned_motion(self):
        out = unicycle_dynamics(np.zeros(3), np.array([1.0, 0.0]), DT)
        np.testing.assert_allclose(out, [0.2, 0.0, 0.0], atol=1e-15)

    def test_spot_value(self):
        out = unicycle_dynamics(
            np.array([0.0, 0.0, math.pi / 2]), np.array([1.0, 0.5]), DT
        )
        np.testing.assert_allclose(out, [0.0, 0.2, math.pi / 2 + 0.1], atol=1e-12)

    def test_heading_stays_wrapped(self, rng):
        x = np.array([0.0, 0.0, 3.0])
        for _ in range(200):
            u = np.array([rng.uniform(0, 1.5), rng.uniform(-2, 2)])
            x = unicycle_dynamics(x, u, DT)
            assert -math.pi < x[2] <= math.pi

    def test_jacobians_match_fd(self, rng):
        for _ in range(1000):
            x = np.array(
                [rng.uniform(-5, 15), rng.uniform(-5, 10), rng.uniform(-3, 3)]
            )
            u = np.array([rng.uniform(0, 1.5), rng.uniform(-2, 2)])
            if abs(abs(x[2]) - math.pi) < 0.05 or abs(abs(x[2] + u[1] * DT)) > math.pi - 0.05:
                continue  # keep away from the wrap cut for differencing
            jac = unicycle_jacobian(x, u, DT)
            ref = fd_jacobian(lambda z: unicycle_dynamics(z, u, DT), x)
            assert np.max(np.abs(jac - ref)) <= 1e-5
            jac_u = unicycle_input_jacobian(x, u, DT)
            ref_u = fd_jacobian(lambda uu: unicycle_dynamics(x, uu, DT), u)
            assert np.max(np.abs(jac_u - ref_u)) <= 1e-5


class TestBeaconMeasurement:
    def test_unit_distances(self):
        beacons = ((1.0, 0.0), (0.0, 1.0), (-1.0, 0.0))
        y = beacon_measurement(np.array([0.0, 0.0, 0.4]), beacons)
        np.testing.assert_allclose(y, [1.0, 1.0, 1.0, 0.4])

    def test_crowd_scene_beacons(self):
        y = beacon_measurement(np.array([7.5, 1.0, 0.0]), BEACONS)
        np.testing.assert_allclose(y[:3], [6.5, 6.5, 8.0])

    def test_coincident_beacon_raises(self):
        with pytest.raises(SingularMeasurementError):
            beacon_measurement(np.array([1.0, 1.0, 0.0]), BEACONS)

    def test_jacobian_matches_fd(self, rng):
        for _ in range(300):
            x = np.array(
                [rng.uniform(-5, 15), rng.uniform(-5, 10), rng.uniform(-3, 3)]
            )
            if any(math.hypot(x[0] - b[0], x[1] - b[1]) < 0.3 for b in BEACONS):
                continue
            jac = beacon_measurement_jacobian(x, BEACONS)
            ref = fd_jacobian(lambda z: beacon_measurement(z, BEACONS), x)
            assert np.max(np.abs(jac - ref)) <= 1e-6


class TestWrapping:
    def test_wrap_angle_range(self, rng):
        for a in rng.uniform(-20, 20, size=500):
            w = wrap_angle(a)
            assert -math.pi < w <= math.pi
            assert abs(math.sin(w) - math.sin(a)) < 1e-12
            assert abs(math.cos(w) - math.cos(a)) < 1e-12

    def test_pi_maps_to_pi(self):
        assert wrap_angle(math.pi) == math.pi
        assert wrap_angle(-math.pi) == math.pi

    def test_residual_wrapping(self):
        resid = np.array([0.3, 2 * math.pi - 0.1])
        wrapped = wrap_residual(resid, (1,))
        assert wrapped[0] == 0.3
        assert wrapped[1] == pytest.approx(-0.1, abs=1e-12)


class TestCurvatureConstants:
    def test_ct_constants(self):
        c = curvature_constants("ct")
        assert (c.l_f, c.l_h) == (0.3, 0.2)
        assert c.alpha_f == pytest.approx(math.sqrt(3.0))
        assert c.alpha_h == pytest.approx(math.sqrt(3.0))

    def test_safe_nav_constants(self):
        c = curvature_constants("safe_nav")
        assert (c.l_f, c.l_h) == (0.3, 0.5)

    def test_unknown_id(self):
        with pytest.raises(ValueError):
            curvature_constants("segway")


class TestSystemRegion:
    def test_operating_region_flag(self):
        region = (np.array([-1, -1, -1.0]), np.array([1, 1, 1.0]))
        system = unicycle_system(dt=DT, operating_region=region)
        assert system.in_region(np.array([0.0, 0.0, 0.0]))
        assert not system.in_region(np.array([2.0, 0.0, 0.0]))
