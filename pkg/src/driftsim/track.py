"""Track representation and Frenet-frame (curvilinear) kinematics.

A Track is an arc-length-parameterized centerline: cubic splines x(s),
y(s) resampled at uniform ds from input waypoints, with curvature
stored at the knots and interpolated piecewise-linearly. The Frenet
state (s, e, theta) is progress along the centerline, signed lateral
offset (positive to the LEFT of the travel direction), and heading
deviation.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np
from scipy.integrate import cumulative_simpson
from scipy.interpolate import CubicSpline

from .plant import wrap_angle
from .vehicle import BodyState


class ProjectionError(RuntimeError):
    """Raised when nearest-point projection fails to find a local minimum."""


class TrackDomainError(ValueError):
    """Raised when querying an open track outside its arc-length domain."""


@dataclass
class FrenetState:
    s: float      # progress along centerline [m]
    e: float      # signed lateral offset, positive left [m]
    theta: float  # heading deviation [rad], in (-pi, pi]


class Track:
    """Immutable arc-length-parameterized centerline.

    Construct via `from_waypoints` / `load_track_csv` or the synthetic
    factories below; all queries are read-only.
    """

    def __init__(self, s, x, y, psi, kappa, closed: bool, half_width: float):
        self.s = np.asarray(s, dtype=float)          # uniform knots, [0, L) closed / [0, L] open
        self.x = np.asarray(x, dtype=float)
        self.y = np.asarray(y, dtype=float)
        self.psi = np.asarray(psi, dtype=float)      # unwrapped heading at knots
        self.kappa = np.asarray(kappa, dtype=float)
        self.closed = bool(closed)
        self.half_width = float(half_width)
        if self.closed:
            self.length = float(self.s[-1] + (self.s[1] - self.s[0]))
        else:
            self.length = float(self.s[-1])
        self._build_splines()
        self._validate()

    def _build_splines(self):
        if self.closed:
            s_ext = np.append(self.s, self.length)
            x_ext = np.append(self.x, self.x[0])
            y_ext = np.append(self.y, self.y[0])
            self._sx = CubicSpline(s_ext, x_ext, bc_type="periodic")
            self._sy = CubicSpline(s_ext, y_ext, bc_type="periodic")
        else:
            self._sx = CubicSpline(self.s, self.x, bc_type="natural")
            self._sy = CubicSpline(self.s, self.y, bc_type="natural")

    def _validate(self):
        if not np.all(np.diff(self.s) > 0):
            raise ValueError("arc-length knots must be strictly increasing")
        if not np.all(np.isfinite(self.kappa)):
            raise ValueError("curvature must be finite")
        if self.closed:
            p0 = self.position_at(0.0)
            p1 = self.position_at(self.length - 1e-9)
            if np.hypot(*(p1 - p0)) > 1e-6:
                raise ValueError("closed track endpoints do not meet")
            h0 = self.heading_at(1e-9)
            h1 = self.heading_at(self.length - 1e-9)
            if abs(wrap_angle(h1 - h0)) > 1e-5:
                raise ValueError("closed track heading is discontinuous")

    # -- queries ----------------------------------------------------------

    def wrap_s(self, s):
        if self.closed:
            return np.mod(s, self.length)
        s_arr = np.asarray(s, dtype=float)
        if np.any(s_arr < -1e-9) or np.any(s_arr > self.length + 1e-9):
            raise TrackDomainError(f"s outside [0, {self.length:.3f}] on open track")
        return np.clip(s_arr, 0.0, self.length)

    def position_at(self, s):
        s = self.wrap_s(s)
        return np.stack([self._sx(s), self._sy(s)], axis=-1)

    def tangent_at(self, s):
        s = self.wrap_s(s)
        tx, ty = self._sx(s, 1), self._sy(s, 1)
        n = np.hypot(tx, ty)
        return np.stack([tx / n, ty / n], axis=-1)

    def heading_at(self, s):
        t = self.tangent_at(s)
        return np.arctan2(t[..., 1], t[..., 0])

    def curvature_at(self, s):
        """Piecewise-linear interpolation of the curvature knots."""
        s = self.wrap_s(s)
        if self.closed:
            s_ext = np.append(self.s, self.length)
            k_ext = np.append(self.kappa, self.kappa[0])
            return np.interp(s, s_ext, k_ext)
        return np.interp(s, self.s, self.kappa)

    # -- frenet conversions ------------------------------------------------

    def frenet_to_global(self, fs: FrenetState):
        """Global (x, y, phi) of a Frenet state."""
        p = self.position_at(fs.s)
        t = self.tangent_at(fs.s)
        n = np.array([-t[1], t[0]])  # left normal
        xy = p + fs.e * n
        phi = wrap_angle(self.heading_at(fs.s) + fs.theta)
        return float(xy[0]), float(xy[1]), float(phi)

    def project(self, x: float, y: float, s_hint: float | None = None,
                window: float = 10.0) -> FrenetState:
        """Nearest-point projection of a global pose position.

        With `s_hint` the search is local (Newton seeded at the hint,
        grid fallback over +-window); otherwise a global knot scan
        seeds the refinement.
        """
        p = np.array([x, y])
        if s_hint is None:
            d2 = (self.x - x) ** 2 + (self.y - y) ** 2
            s0 = self.s[int(np.argmin(d2))]
        else:
            s0 = float(self.wrap_s(s_hint))

        s_star = self._refine_projection(p, s0)
        if s_star is None:
            # grid fallback around the seed
            offs = np.linspace(-window, window, 81)
            cand = self.wrap_s(s0 + offs) if self.closed else np.clip(s0 + offs, 0.0, self.length)
            pts = self.position_at(cand)
            s1 = float(cand[np.argmin(np.sum((pts - p) ** 2, axis=-1))])
            s_star = self._refine_projection(p, s1)
            if s_star is None:
                raise ProjectionError(f"no projection minimum near s={s0:.2f}")

        c = self.position_at(s_star)
        t = self.tangent_at(s_star)
        e = float(-(p[0] - c[0]) * t[1] + (p[1] - c[1]) * t[0])
        return FrenetState(s=float(s_star), e=e, theta=0.0)

    def project_pose(self, x: float, y: float, phi: float,
                     s_hint: float | None = None) -> FrenetState:
        """Projection including heading deviation; rejects distant poses."""
        fs = self.project(x, y, s_hint=s_hint)
        if abs(fs.e) > 4.0 * self.half_width:
            raise ProjectionError(
                f"pose {abs(fs.e):.2f} m off centerline (> 4*half_width)")
        fs.theta = float(wrap_angle(phi - self.heading_at(fs.s)))
        return fs

    def _refine_projection(self, p, s0, max_iter: int = 30):
        """Newton on g(s) = (p - c(s)) . c'(s) = 0."""
        s = s0
        for _ in range(max_iter):
            c = self.position_at(s)
            d = p - c
            t = np.array([self._sx(self.wrap_s(s), 1), self._sy(self.wrap_s(s), 1)])
            tt = np.array([self._sx(self.wrap_s(s), 2), self._sy(self.wrap_s(s), 2)])
            g = d @ t
            gp = -(t @ t) + d @ tt
            if gp >= 0:  # not a distance minimum locally
                return None
            step = -g / gp
            step = np.clip(step, -5.0, 5.0)
            s_new = s + step
            if not self.closed:
                s_new = np.clip(s_new, 0.0, self.length)
            if abs(step) < 1e-12:
                s = s_new
                break
            s = s_new
        return float(self.wrap_s(s))


def frenet_rates(fs: FrenetState, body: BodyState, track: Track):
    """Curvilinear kinematics (s_dot, e_dot, theta_dot).

    s_dot = V cos(theta+beta) / (1 - e*kappa)
    e_dot = V sin(theta+beta)
    theta_dot = r - kappa * s_dot
    """
    kappa = float(track.curvature_at(fs.s))
    denom = 1.0 - fs.e * kappa
    if denom <= 0:
        raise ValueError(f"1 - e*kappa = {denom:.4f} <= 0; off the valid tube")
    ang = fs.theta + body.beta
    s_dot = body.V * np.cos(ang) / denom
    e_dot = body.V * np.sin(ang)
    theta_dot = body.r - kappa * s_dot
    return float(s_dot), float(e_dot), float(theta_dot)


# -- construction -----------------------------------------------------------

def from_waypoints(xy, closed: bool, ds: float = 0.1,
                   half_width: float = 4.0) -> Track:
    """Build a Track from (n, 2) waypoints.

    Fits chord-parameterized cubic splines, measures arc length by
    Simpson quadrature on a dense grid, and resamples at uniform ds.
    """
    xy = np.asarray(xy, dtype=float)
    if xy.ndim != 2 or xy.shape[1] != 2 or xy.shape[0] < 4:
        raise ValueError("need at least 4 (x, y) waypoints")
    if closed and np.hypot(*(xy[-1] - xy[0])) < 1e-9:
        xy = xy[:-1]

    if closed:
        pts = np.vstack([xy, xy[0]])
    else:
        pts = xy
    chord = np.hypot(*np.diff(pts, axis=0).T)
    if np.any(chord <= 0):
        raise ValueError("duplicate consecutive waypoints")
    t = np.concatenate([[0.0], np.cumsum(chord)])
    bc = "periodic" if closed else "natural"
    cx = CubicSpline(t, pts[:, 0], bc_type=bc)
    cy = CubicSpline(t, pts[:, 1], bc_type=bc)

    # dense arc length
    n_dense = 25 * (len(pts) - 1) + 1
    td = np.linspace(t[0], t[-1], n_dense)
    speed = np.hypot(cx(td, 1), cy(td, 1))
    s_dense = np.concatenate([[0.0], cumulative_simpson(speed, x=td)])
    length = float(s_dense[-1])

    if closed:
        n_knots = max(int(round(length / ds)), 8)
        s_k = np.arange(n_knots) * (length / n_knots)
    else:
        n_knots = max(int(round(length / ds)) + 1, 8)
        s_k = np.linspace(0.0, length, n_knots)
    t_k = np.interp(s_k, s_dense, td)

    xk, yk = cx(t_k), cy(t_k)
    dx, dy = cx(t_k, 1), cy(t_k, 1)
    ddx, ddy = cx(t_k, 2), cy(t_k, 2)
    sp = np.hypot(dx, dy)
    kappa = (dx * ddy - dy * ddx) / sp**3
    psi = np.unwrap(np.arctan2(dy, dx))
    return Track(s_k, xk, yk, psi, kappa, closed=closed, half_width=half_width)


def load_track_csv(path, ds: float = 0.1, closed: bool = True,
                   half_width: float | None = None) -> Track:
    """Load waypoints from CSV with header columns x_m, y_m[, half_width_m]."""
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        if reader.fieldnames is None or "x_m" not in reader.fieldnames \
                or "y_m" not in reader.fieldnames:
            raise ValueError("track CSV needs header with x_m, y_m columns")
        xs, ys, hw = [], [], []
        for row in reader:
            xs.append(float(row["x_m"]))
            ys.append(float(row["y_m"]))
            if "half_width_m" in row and row["half_width_m"] not in (None, ""):
                hw.append(float(row["half_width_m"]))
    if half_width is None:
        half_width = min(hw) if hw else 4.0
    return from_waypoints(np.column_stack([xs, ys]), closed=closed, ds=ds,
                          half_width=half_width)


def save_track_csv(track: Track, path):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["x_m", "y_m", "half_width_m"])
        for xi, yi in zip(track.x, track.y):
            w.writerow([f"{xi:.6f}", f"{yi:.6f}", f"{track.half_width:.3f}"])


# -- synthetic tracks --------------------------------------------------------
#
# Synthetic tracks are built from exact piecewise geometry (straights and
# arcs evaluated analytically at the knots) rather than refit through
# from_waypoints, so the stored curvature has no spline ringing at
# straight/arc junctions.

def _from_pieces(pieces, closed: bool, ds: float, half_width: float) -> Track:
    """Assemble a Track from (length, eval(a) -> (x, y, psi_rel, kappa)) pieces.

    `psi_rel` is heading change since the piece start; piece headings
    are chained so psi is continuous and unwrapped by construction.
    """
    lengths = np.array([p[0] for p in pieces])
    total = float(lengths.sum())
    starts = np.concatenate([[0.0], np.cumsum(lengths)])
    if closed:
        n = max(int(round(total / ds)), 8)
        s_k = np.arange(n) * (total / n)
    else:
        n = max(int(round(total / ds)) + 1, 8)
        s_k = np.linspace(0.0, total, n)

    x = np.empty(n)
    y = np.empty(n)
    psi = np.empty(n)
    kap = np.empty(n)
    idx = np.clip(np.searchsorted(starts, s_k, side="right") - 1, 0, len(pieces) - 1)
    for i, (_, ev) in enumerate(pieces):
        m = idx == i
        if not np.any(m):
            continue
        xi, yi, pi_, ki = ev(s_k[m] - starts[i])
        x[m], y[m], psi[m], kap[m] = xi, yi, pi_, ki
    return Track(s_k, x, y, psi, kap, closed=closed, half_width=half_width)


def _straight_piece(p0, psi0, length):
    c, s = np.cos(psi0), np.sin(psi0)

    def ev(a):
        a = np.asarray(a, dtype=float)
        return (p0[0] + a * c, p0[1] + a * s,
                np.full_like(a, psi0), np.zeros_like(a))
    return (float(length), ev)


def _arc_piece(center, radius, th0, arc_len):
    """CCW arc starting at polar angle th0 on the circle."""
    def ev(a):
        a = np.asarray(a, dtype=float)
        th = th0 + a / radius
        return (center[0] + radius * np.cos(th), center[1] + radius * np.sin(th),
                th + 0.5 * np.pi, np.full_like(a, 1.0 / radius))
    return (float(arc_len), ev)


def straight_track(length: float = 200.0, ds: float = 0.1,
                   half_width: float = 4.0) -> Track:
    return _from_pieces([_straight_piece((0.0, 0.0), 0.0, length)],
                        closed=False, ds=ds, half_width=half_width)


def circle_track(radius: float = 20.0, ds: float = 0.1,
                 half_width: float = 4.0) -> Track:
    return _from_pieces([_arc_piece((0.0, 0.0), radius, 0.0,
                                    2.0 * np.pi * radius)],
                        closed=True, ds=ds, half_width=half_width)


def clothoid_track(A: float = 40.0, length: float = 80.0, ds: float = 0.1,
                   half_width: float = 4.0) -> Track:
    """Open spiral with curvature kappa(s) = s / A^2 (analytic test track)."""
    from scipy.special import fresnel

    scale = A * np.sqrt(np.pi)

    def ev(a):
        a = np.asarray(a, dtype=float)
        ss, cc = fresnel(a / scale)
        return (scale * cc, scale * ss, a**2 / (2.0 * A**2), a / A**2)

    return _from_pieces([(float(length), ev)], closed=False, ds=ds,
                        half_width=half_width)


def hairpin_track(r_tight: float = 7.0, r_gentle: float = 25.0,
                  center_dist: float = 80.0, ds: float = 0.1,
                  half_width: float = 4.0) -> Track:
    """Closed circuit with one tight end and one gentle end.

    Two circles joined by their external tangents; traversal is
    counterclockwise, so the tight end is a left-hand hairpin. The
    tight radius is chosen to demand large sideslip from a full-size
    car at speed.
    """
    if center_dist <= abs(r_gentle - r_tight):
        raise ValueError("circle centers too close for external tangents")
    c1 = np.array([0.0, 0.0])          # tight end
    c2 = np.array([center_dist, 0.0])  # gentle end
    nx = (r_tight - r_gentle) / center_dist
    ny = np.sqrt(1.0 - nx * nx)
    th_up = np.arctan2(ny, nx)

    t1u = c1 + r_tight * np.array([np.cos(th_up), np.sin(th_up)])
    t1l = c1 + r_tight * np.array([np.cos(th_up), -np.sin(th_up)])
    t2l = c2 + r_gentle * np.array([np.cos(th_up), -np.sin(th_up)])

    straight_len = float(np.hypot(*(t2l - t1l)))
    psi_bottom = float(np.arctan2(t2l[1] - t1l[1], t2l[0] - t1l[0]))

    pieces = [
        _straight_piece(t1l, psi_bottom, straight_len),
        _arc_piece(c2, r_gentle, -th_up, 2.0 * th_up * r_gentle),
        _straight_piece(c2 + r_gentle * np.array([np.cos(th_up), np.sin(th_up)]),
                        psi_bottom + 2.0 * th_up, straight_len),
        _arc_piece(c1, r_tight, th_up,
                   (2.0 * np.pi - 2.0 * th_up) * r_tight),
    ]
    return _from_pieces(pieces, closed=True, ds=ds, half_width=half_width)
