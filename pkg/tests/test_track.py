"""Tests for track geometry and Frenet kinematics."""

import numpy as np
import pytest

from driftsim.track import (FrenetState, ProjectionError, Track,
                            TrackDomainError, circle_track, clothoid_track,
                            frenet_rates, from_waypoints, hairpin_track,
                            load_track_csv, save_track_csv, straight_track)
from driftsim.vehicle import BodyState


@pytest.fixture(scope="module")
def circle():
    return circle_track(radius=20.0)


@pytest.fixture(scope="module")
def hairpin():
    return hairpin_track()


class TestCurvature:
    def test_circle_constant_curvature(self, circle):
        s = np.linspace(0, circle.length, 57)
        assert np.allclose(circle.curvature_at(s), 0.05, atol=1e-12)

    def test_straight_zero_curvature(self):
        st = straight_track(100.0)
        assert np.allclose(st.curvature_at(np.linspace(0, 100, 23)), 0.0)

    def test_clothoid_matches_analytic(self):
        A, L = 40.0, 80.0
        cl = clothoid_track(A=A, length=L)
        s = np.linspace(1.0, L - 1.0, 40)
        assert np.allclose(cl.curvature_at(s), s / A**2, atol=1e-6)

    def test_open_track_rejects_out_of_domain(self):
        st = straight_track(100.0)
        with pytest.raises(TrackDomainError):
            st.curvature_at(101.0)


class TestProjection:
    def test_on_centerline(self, hairpin):
        s0 = 87.3
        x, y = hairpin.position_at(s0)
        phi = hairpin.heading_at(s0)
        fs = hairpin.project_pose(x, y, phi, s_hint=85.0)
        assert fs.s == pytest.approx(s0, abs=1e-9)
        assert fs.e == pytest.approx(0.0, abs=1e-9)
        assert fs.theta == pytest.approx(0.0, abs=1e-9)

    def test_left_offset_sign_on_straight(self):
        st = straight_track(100.0)  # runs along +x
        fs = st.project_pose(50.0, 0.5, 0.0)
        assert fs.e == pytest.approx(0.5, abs=1e-9)
        fs = st.project_pose(50.0, -0.5, 0.0)
        assert fs.e == pytest.approx(-0.5, abs=1e-9)

    def test_matches_dense_sampling_oracle(self, circle):
        rng = np.random.default_rng(19)
        s_dense = np.linspace(0.0, circle.length, 200001)
        pts = circle.position_at(s_dense)
        for _ in range(25):
            p = rng.uniform(-25, 25, size=2)
            if np.hypot(*p) < 5.0:  # stay off the circle center
                continue
            fs = circle.project(p[0], p[1])
            i = np.argmin(np.sum((pts - p) ** 2, axis=1))
            d_newton = np.linalg.norm(circle.position_at(fs.s) - p)
            d_dense = np.linalg.norm(pts[i] - p)
            assert d_newton <= d_dense + 1e-4

    def test_rejects_far_pose(self, hairpin):
        with pytest.raises(ProjectionError):
            hairpin.project_pose(0.0, 500.0, 0.0)

    def test_roundtrip_recovers_frenet(self, hairpin):
        rng = np.random.default_rng(4)
        for _ in range(40):
            fs0 = FrenetState(s=rng.uniform(0, hairpin.length),
                              e=rng.uniform(-2, 2), theta=rng.uniform(-0.6, 0.6))
            x, y, phi = hairpin.frenet_to_global(fs0)
            fs1 = hairpin.project_pose(x, y, phi, s_hint=fs0.s - 1.0)
            ds = min(abs(fs1.s - fs0.s), hairpin.length - abs(fs1.s - fs0.s))
            assert ds < 1e-6
            assert abs(fs1.e - fs0.e) < 1e-6
            assert abs(fs1.theta - fs0.theta) < 1e-6


class TestFrenetRates:
    def test_aligned_on_centerline(self, circle):
        fs = FrenetState(s=10.0, e=0.0, theta=0.0)
        sd, ed, td = frenet_rates(fs, BodyState(V=8.0, beta=0.0, r=0.0), circle)
        assert sd == pytest.approx(8.0)
        assert ed == pytest.approx(0.0)

    def test_straight_track_theta_rate_is_r(self):
        st = straight_track(100.0)
        fs = FrenetState(s=50.0, e=1.0, theta=0.2)
        sd, ed, td = frenet_rates(fs, BodyState(V=5.0, beta=0.1, r=0.7), st)
        assert td == pytest.approx(0.7)

    def test_steady_cornering_zero_theta_rate(self, circle):
        # independent circle-geometry oracle: traveling the centerline of a
        # circle with matching yaw rate r = kappa * V keeps theta fixed
        V, beta = 9.0, -0.15
        kappa = 0.05
        fs = FrenetState(s=30.0, e=0.0, theta=-beta)  # velocity tangent to path
        r = kappa * V
        sd, ed, td = frenet_rates(fs, BodyState(V=V, beta=beta, r=r), circle)
        assert sd == pytest.approx(V, rel=1e-12)
        assert ed == pytest.approx(0.0, abs=1e-12)
        assert td == pytest.approx(0.0, abs=1e-12)

    def test_progress_positive_inside_cone(self, hairpin):
        rng = np.random.default_rng(23)
        for _ in range(100):
            s = rng.uniform(0, hairpin.length)
            kappa = float(hairpin.curvature_at(s))
            e = rng.uniform(-2, 2)
            if abs(e * kappa) >= 0.95:
                continue
            theta = rng.uniform(-0.7, 0.7)
            beta = rng.uniform(-0.7, 0.7)
            if abs(theta + beta) >= np.pi / 2 - 0.05:
                continue
            sd, _, _ = frenet_rates(FrenetState(s=s, e=e, theta=theta),
                                    BodyState(V=6.0, beta=beta, r=0.0), hairpin)
            assert sd > 0

    def test_theta_rate_definition_consistency(self, hairpin):
        # theta_dot = phi_dot - phi_ref_dot with phi_ref_dot = kappa * s_dot
        fs = FrenetState(s=250.0, e=0.5, theta=0.2)
        body = BodyState(V=7.0, beta=-0.3, r=1.1)
        sd, _, td = frenet_rates(fs, body, hairpin)
        kappa = float(hairpin.curvature_at(fs.s))
        assert td == pytest.approx(body.r - kappa * sd, rel=1e-12)

    def test_denominator_error(self, circle):
        fs = FrenetState(s=0.0, e=25.0, theta=0.0)  # e*kappa = 1.25
        with pytest.raises(ValueError):
            frenet_rates(fs, BodyState(V=5.0, beta=0.0, r=0.0), circle)


class TestConstruction:
    def test_closed_track_continuity(self, hairpin):
        p0 = hairpin.position_at(0.0)
        p1 = hairpin.position_at(hairpin.length - 1e-10)
        assert np.allclose(p0, p1, atol=1e-6)

    def test_from_waypoints_smooth_circle(self):
        th = np.linspace(0, 2 * np.pi, 100, endpoint=False)
        wp = np.column_stack([30 * np.cos(th), 30 * np.sin(th)])
        t = from_waypoints(wp, closed=True, ds=0.1)
        mid = np.linspace(0, t.length, 500)
        assert np.allclose(t.curvature_at(mid), 1 / 30, atol=2e-4)

    def test_csv_roundtrip(self, tmp_path, hairpin):
        path = tmp_path / "track.csv"
        save_track_csv(hairpin, path)
        t2 = load_track_csv(path, ds=0.5)
        assert t2.length == pytest.approx(hairpin.length, rel=1e-3)
        assert t2.half_width == pytest.approx(hairpin.half_width)

    def test_csv_requires_header(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("0,0\n1,0\n2,0\n3,1\n")
        with pytest.raises(ValueError):
            load_track_csv(path)

    def test_rejects_too_few_points(self):
        with pytest.raises(ValueError):
            from_waypoints(np.array([[0, 0], [1, 0]]), closed=False)
