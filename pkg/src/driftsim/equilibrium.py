"""Drift-equilibrium solving: fix (V, r), solve (beta, delta, F_xr) for
zero body rates, optionally with the GP residual mean folded into the
model.

The 3-equation system generically has several roots (normal cornering
vs. drift). The drift branch is identified by sideslip opposing the yaw
rate; among converged opposing roots the one with the largest |beta| is
returned (ties: smallest |F_xr|).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .gpr import ResidualGP
from .vehicle import TireParams, V_MIN, VehicleParams, body_rates

BETA_STARTS = (0.1, -0.1, 0.3, -0.3, 0.6, -0.6, 0.9, -0.9)


class EquilibriumNotFoundError(RuntimeError):
    """No Newton start converged: the (V, r) pair is likely infeasible."""


@dataclass
class EquilibriumPoint:
    """Drift reference: fixed (V, r) plus the solved state/inputs."""

    V_ep: float          # fixed speed [m/s]
    r_b: float           # fixed yaw rate [rad/s]
    beta_eq: float       # solved sideslip [rad]
    delta_eq: float      # solved steering [rad]
    Fxr_eq: float        # solved rear force [N]
    residual_norm: float

    def state(self) -> np.ndarray:
        return np.array([self.V_ep, self.beta_eq, self.r_b])

    def input(self) -> np.ndarray:
        return np.array([self.delta_eq, self.Fxr_eq])

    def feature(self) -> np.ndarray:
        """GP feature vector [V, beta, r, delta, Fxr] at the equilibrium."""
        return np.array([self.V_ep, self.beta_eq, self.r_b,
                         self.delta_eq, self.Fxr_eq])


def _residual(q, V, r, params, tires, model: ResidualGP | None):
    x = np.array([V, q[0], r])
    u = np.array([q[1], q[2]])
    res = body_rates(x, u, params, tires)
    if model is not None:
        res = res + model.predict_mean(np.array([V, q[0], r, q[1], q[2]]))
    return res


def _newton(q0, V, r, params, tires, model, tol=1e-11, max_iter=50):
    """Damped Newton with a central-difference Jacobian (h = 1e-6 scaled)."""
    q = np.asarray(q0, dtype=float).copy()
    res = _residual(q, V, r, params, tires, model)
    norm = np.linalg.norm(res)
    for _ in range(max_iter):
        if norm < tol:
            return q, norm
        J = np.empty((3, 3))
        for i in range(3):
            h = 1e-6 * max(1.0, abs(q[i]))
            qp, qm = q.copy(), q.copy()
            qp[i] += h
            qm[i] -= h
            try:
                J[:, i] = (_residual(qp, V, r, params, tires, model)
                           - _residual(qm, V, r, params, tires, model)) / (2 * h)
            except Exception:
                return None
        try:
            dq = np.linalg.solve(J, -res)
        except np.linalg.LinAlgError:
            return None
        alpha = 1.0
        for _ in range(12):
            q_try = q + alpha * dq
            try:
                res_try = _residual(q_try, V, r, params, tires, model)
            except Exception:
                alpha *= 0.5
                continue
            norm_try = np.linalg.norm(res_try)
            if norm_try < (1.0 - 1e-4 * alpha) * norm:
                q, res, norm = q_try, res_try, norm_try
                break
            alpha *= 0.5
        else:
            return None  # line search stalled
    return (q, norm) if norm < tol else None


def _physics_start(V, r, beta0, params: VehicleParams, tires: TireParams,
                   post_peak: bool = False):
    """Initial (delta, F_xr) from the steady-state force balance at beta0.

    Given beta0, the rear slip (hence rear force) is determined; the
    yaw-moment balance then fixes the needed front force, which is
    inverted through the Pacejka curve on its pre-peak branch, or the
    post-peak branch (deep drift, counter-steer side) when requested.
    """
    alpha_r = np.arctan((V * np.sin(beta0) - params.b * r) / (V * np.cos(beta0)))
    F_yr = -params.mu * params.F_zr * np.sin(tires.C * np.arctan(tires.B * alpha_r))
    delta = 0.0
    alpha_f = 0.0
    for _ in range(4):
        F_yf_need = params.b * F_yr / (params.a * np.cos(delta))
        xi = np.clip(-F_yf_need / (params.mu * params.F_zf), -0.999, 0.999)
        th = np.arcsin(xi)
        if post_peak:
            th = np.sign(th) * (np.pi - abs(th))
        if abs(th / tires.C) >= 0.5 * np.pi:
            raise ValueError("front force unreachable on this branch")
        alpha_f = np.tan(th / tires.C) / tires.B
        delta = np.arctan((V * np.sin(beta0) + params.a * r)
                          / (V * np.cos(beta0))) - alpha_f
    F_yf = -params.mu * params.F_zf * np.sin(tires.C * np.arctan(tires.B * alpha_f))
    F_xr = (F_yf * np.sin(delta - beta0) - F_yr * np.sin(beta0)) / np.cos(beta0)
    return float(delta), float(F_xr)


def solve_equilibrium(V: float, r: float, params: VehicleParams,
                      tires: TireParams, model: ResidualGP | None = None,
                      guess: tuple[float, float, float] | None = None,
                      input_bounds: tuple[float, float, float] | None = None,
                      require_drift: bool = False) -> EquilibriumPoint:
    """Solve the drift equilibrium at fixed (V, r).

    Without a guess, Newton is multi-started over a sideslip grid with
    physics-based input initialization on both branches of the front
    tire curve. `input_bounds` is (delta_max, F_min, F_max); roots
    outside are discarded. Among converged roots with sideslip opposing
    the yaw rate, the largest-|beta| one wins (ties: smallest |F_xr|).
    If no opposing root exists the largest-|beta| remaining root is
    returned, unless `require_drift` is set, in which case the solve
    fails: with these decoupled tires the drift branch only exists near
    the lateral friction limit.
    """
    if V < V_MIN:
        raise ValueError(f"V={V} below model validity ({V_MIN})")
    if not np.isfinite(r):
        raise ValueError("r must be finite")

    starts = []
    if guess is not None:
        starts.append(np.asarray(guess, dtype=float))
    else:
        for b0 in BETA_STARTS:
            for post_peak in (False, True):
                try:
                    d0, f0 = _physics_start(V, r, b0, params, tires, post_peak)
                except Exception:
                    continue
                starts.append(np.array([b0, d0, f0]))
            starts.append(np.array([b0, -0.1 * np.sign(r) if r else 0.0, 0.0]))

    if input_bounds is not None:
        d_max, f_min, f_max = input_bounds
    else:
        # physical sanity envelope: the unbounded model admits spurious
        # roots with perpendicular steering or multi-g thrust
        d_max = 1.0
        f_max = 1.5 * params.mu * params.m * params.g
        f_min = -f_max

    roots: list[tuple[np.ndarray, float]] = []
    for q0 in starts:
        out = _newton(q0, V, r, params, tires, model,
                      tol=1e-11 if model is None else 1e-9)
        if out is None:
            continue
        q, norm = out
        if abs(q[0]) > 1.2:  # beyond any physical drift sideslip
            continue
        if abs(q[1]) > d_max or not f_min <= q[2] <= f_max:
            continue
        if not any(np.linalg.norm(q - q2) < 1e-6 * max(1, np.linalg.norm(q))
                   for q2, _ in roots):
            roots.append((q, norm))

    if not roots:
        raise EquilibriumNotFoundError(
            f"no equilibrium at V={V:.2f}, r={r:.2f} "
            f"(lateral accel {V * abs(r):.1f} m/s^2 may exceed the mu limit)")

    # |beta| quantized so distinct roots sharing the same sideslip fall
    # through to the smallest-|F_xr| tie-break deterministically
    def rank(t):
        return (round(abs(t[0][0]) / 1e-6), -abs(t[0][2]))

    if r == 0.0:
        q, norm = min(roots, key=lambda t: (round(abs(t[0][0]) / 1e-6),
                                            abs(t[0][1]), abs(t[0][2])))
    else:
        opposing = [t for t in roots if t[0][0] * r < 0]
        if require_drift and not opposing:
            raise EquilibriumNotFoundError(
                f"no drift-branch equilibrium at V={V:.2f}, r={r:.2f} "
                f"(lateral accel {V * abs(r) / (params.mu * params.g):.2f} "
                f"of the mu limit)")
        pool = opposing if opposing else roots
        q, norm = max(pool, key=rank)
    return EquilibriumPoint(V_ep=float(V), r_b=float(r), beta_eq=float(q[0]),
                            delta_eq=float(q[1]), Fxr_eq=float(q[2]),
                            residual_norm=float(norm))


def equilibrium_sweep(V_list, r_b: float, params: VehicleParams,
                      tires: TireParams, model: ResidualGP | None = None,
                      input_bounds=None) -> list[EquilibriumPoint | None]:
    """Continuation sweep over speeds at fixed yaw rate.

    Each solve seeds the next; failed entries are returned as None in
    place (never silently dropped).
    """
    if len(V_list) == 0:
        raise ValueError("V_list must be nonempty")
    out: list[EquilibriumPoint | None] = []
    prev: EquilibriumPoint | None = None
    for V in V_list:
        try:
            if prev is not None:
                try:
                    pt = solve_equilibrium(
                        V, r_b, params, tires, model,
                        guess=(prev.beta_eq, prev.delta_eq, prev.Fxr_eq),
                        input_bounds=input_bounds)
                except EquilibriumNotFoundError:
                    pt = solve_equilibrium(V, r_b, params, tires, model,
                                           input_bounds=input_bounds)
            else:
                pt = solve_equilibrium(V, r_b, params, tires, model,
                                       input_bounds=input_bounds)
            out.append(pt)
            prev = pt
        except (EquilibriumNotFoundError, ValueError):
            out.append(None)
    return out


def sweep_to_csv(points: list[EquilibriumPoint | None], path):
    """Export a sweep for plotting beta/delta vs V; failed rows left empty."""
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["V_ep", "r_b", "beta_eq", "delta_eq", "Fxr_eq",
                    "residual_norm", "converged"])
        for pt in points:
            if pt is None:
                w.writerow(["", "", "", "", "", "", "0"])
            else:
                w.writerow([f"{pt.V_ep:.6f}", f"{pt.r_b:.6f}",
                            f"{pt.beta_eq:.9f}", f"{pt.delta_eq:.9f}",
                            f"{pt.Fxr_eq:.6f}", f"{pt.residual_norm:.3e}", "1"])
