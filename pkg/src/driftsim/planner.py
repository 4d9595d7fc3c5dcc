"""Minimum-time trajectory planning over the curvilinear vehicle model.

Trapezoidal collocation in arc length s with state [V, beta, r, e, theta]
and input [delta, F_xr]; the objective is total travel time, the integral
of (1 - e*kappa) / (V cos(theta + beta)) over s. The NLP is solved by an
SQP with convex QP subproblems (objective Hessian projected PSD, damped),
exact constraint linearization via complex-step differentiation, and an
l1-merit line search.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import sparse

from .qp import QpError, solve_qp
from .track import Track, from_waypoints
from .vehicle import TireParams, VehicleParams, body_rates

MODE_NORMAL = 0
MODE_DRIFT = 1

NX = 5  # [V, beta, r, e, theta]
NU = 2  # [delta, F_xr]
NZ = NX + NU


class PlannerInfeasibleError(RuntimeError):
    """The transcription is structurally infeasible (bad bounds/track)."""


class PlannerConvergenceError(RuntimeError):
    """SQP did not reach tolerance; best iterate attached."""

    def __init__(self, msg, best=None):
        super().__init__(msg)
        self.best = best


@dataclass
class PlannerBounds:
    """Box bounds of the transcription (lateral offset from track width)."""

    V_min: float = 1.0
    V_max: float = 15.0
    beta_max: float = 0.75    # [rad]
    r_max: float = 2.5        # [rad/s]
    theta_max: float = 0.6    # [rad]
    e_margin: float = 1.0     # subtracted from track half-width [m]
    delta_max: float = 0.45   # [rad]
    F_min: float = -12000.0   # [N]
    F_max: float = 12000.0    # [N]

    def x_bounds(self, half_width: float):
        e_max = max(half_width - self.e_margin, 0.2)
        x_min = np.array([self.V_min, -self.beta_max, -self.r_max,
                          -e_max, -self.theta_max])
        x_max = np.array([self.V_max, self.beta_max, self.r_max,
                          e_max, self.theta_max])
        if np.any(x_min >= x_max):
            raise PlannerInfeasibleError("empty state box")
        return x_min, x_max

    def u_bounds(self):
        if self.F_min >= self.F_max or self.delta_max <= 0:
            raise PlannerInfeasibleError("empty input box")
        return (np.array([-self.delta_max, self.F_min]),
                np.array([self.delta_max, self.F_max]))


@dataclass
class ReferenceTrajectory:
    """Planned minimum-time trajectory plus controller-mode tags."""

    s: np.ndarray        # centerline arc length at knots [m]
    X: np.ndarray        # (K, 5) [V, beta, r, e, theta]
    U: np.ndarray        # (K, 2) [delta, F_xr]
    t: np.ndarray        # time at knots [s]
    mode: np.ndarray     # (K,) MODE_NORMAL / MODE_DRIFT
    xy: np.ndarray       # (K, 2) global planned-path points
    lap_time: float
    closed: bool
    _path: Track | None = field(default=None, repr=False, compare=False)
    _s_on_path: np.ndarray | None = field(default=None, repr=False, compare=False)

    @property
    def V(self):
        return self.X[:, 0]

    @property
    def beta(self):
        return self.X[:, 1]

    @property
    def r(self):
        return self.X[:, 2]

    def path_track(self) -> Track:
        """The planned path as a Track (for projection and pure pursuit)."""
        if self._path is None:
            self._path = from_waypoints(self.xy, closed=self.closed, ds=0.25,
                                        half_width=10.0)
            s_on = np.empty(len(self.s))
            hint = 0.0
            for i, (x, y) in enumerate(self.xy):
                fs = self._path.project(x, y, s_hint=hint if i else None)
                s_on[i] = fs.s
                hint = fs.s + 0.5
            # monotone unwrap for closed paths
            if self.closed:
                for i in range(1, len(s_on)):
                    while s_on[i] < s_on[i - 1] - 0.5 * self._path.length:
                        s_on[i] += self._path.length
            self._s_on_path = s_on
        return self._path

    def knot_at_path_s(self, s_path: float) -> int:
        """Index of the knot governing path position s_path."""
        self.path_track()
        sp = self._s_on_path
        if self.closed:
            L = self._path.length
            s_path = (s_path - sp[0]) % L + sp[0]
        i = int(np.searchsorted(sp, s_path, side="right") - 1)
        return int(np.clip(i, 0, len(sp) - 1))

    def mode_at_path_s(self, s_path: float) -> int:
        return int(self.mode[self.knot_at_path_s(s_path)])

    def drift_spans(self):
        """(start_knot, end_knot) pairs of contiguous drift segments
        (end exclusive; may wrap on closed tracks)."""
        return _runs(self.mode == MODE_DRIFT, self.closed)

    # -- persistence ---------------------------------------------------------

    def to_csv(self, path):
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["s_m", "x_m", "y_m", "V_mps", "beta_rad", "r_radps",
                        "e_m", "theta_rad", "delta_rad", "Fxr_N", "t_s", "mode"])
            for k in range(len(self.s)):
                w.writerow([f"{self.s[k]:.6f}", f"{self.xy[k, 0]:.6f}",
                            f"{self.xy[k, 1]:.6f}"]
                           + [f"{v:.9f}" for v in self.X[k]]
                           + [f"{v:.9f}" for v in self.U[k]]
                           + [f"{self.t[k]:.9f}",
                              "Drift" if self.mode[k] == MODE_DRIFT else "Normal"])
        with open(str(path) + ".meta.json", "w") as f:
            json.dump({"lap_time": self.lap_time, "closed": self.closed},
                      f, sort_keys=True)

    @classmethod
    def from_csv(cls, path) -> "ReferenceTrajectory":
        rows = []
        with open(path, newline="") as f:
            reader = csv.DictReader(f)
            for row in reader:
                rows.append(row)
        if not rows:
            raise ValueError("empty trajectory CSV")
        s = np.array([float(r["s_m"]) for r in rows])
        xy = np.array([[float(r["x_m"]), float(r["y_m"])] for r in rows])
        X = np.array([[float(r[k]) for k in
                       ("V_mps", "beta_rad", "r_radps", "e_m", "theta_rad")]
                      for r in rows])
        U = np.array([[float(r["delta_rad"]), float(r["Fxr_N"])] for r in rows])
        t = np.array([float(r["t_s"]) for r in rows])
        mode = np.array([MODE_DRIFT if r["mode"] == "Drift" else MODE_NORMAL
                         for r in rows])
        with open(str(path) + ".meta.json") as f:
            meta = json.load(f)
        return cls(s=s, X=X, U=U, t=t, mode=mode, xy=xy,
                   lap_time=float(meta["lap_time"]), closed=bool(meta["closed"]))


# -- transcription -----------------------------------------------------------

def _dynamics_s(X, U, kappa, params, tires):
    """d/ds of [V, beta, r, e, theta]; complex-step safe, batched over knots."""
    rates = body_rates(X[:, :3], U, params, tires)
    e, th, beta, V, r = X[:, 3], X[:, 4], X[:, 1], X[:, 0], X[:, 2]
    ang = th + beta
    sdot = V * np.cos(ang) / (1.0 - e * kappa)
    out = np.empty_like(X)
    out[:, 0:3] = rates / sdot[:, None]
    out[:, 3] = V * np.sin(ang) / sdot
    out[:, 4] = r / sdot - kappa
    return out


def _dyn_jacobians(X, U, kappa, params, tires):
    """Per-knot Jacobian of _dynamics_s wrt [x, u] via complex step."""
    K = X.shape[0]
    J = np.empty((K, NX, NZ))
    h = 1e-20
    for j in range(NX):
        Xc = X.astype(complex)
        Xc[:, j] += 1j * h
        J[:, :, j] = _dynamics_s(Xc, U.astype(complex), kappa, params, tires).imag / h
    for j in range(NU):
        Uc = U.astype(complex)
        Uc[:, j] += 1j * h
        J[:, :, NX + j] = _dynamics_s(X.astype(complex), Uc, kappa, params, tires).imag / h
    return J


def _time_integrand(X, kappa):
    V, beta, e, th = X[:, 0], X[:, 1], X[:, 3], X[:, 4]
    return (1.0 - e * kappa) / (V * np.cos(th + beta))


def _objective_terms(X, kappa, wq):
    """Value, gradient blocks (K, 5), PSD-projected Hessian blocks (K, 5, 5)."""
    V, beta, e, th = X[:, 0], X[:, 1], X[:, 3], X[:, 4]
    psi = th + beta
    cpsi = np.cos(psi)
    tpsi = np.tan(psi)
    g = (1.0 - e * kappa) / (V * cpsi)
    val = float(np.sum(wq * g))

    dV = -g / V
    de = -kappa / (V * cpsi)
    dpsi = g * tpsi
    grad = np.zeros((len(V), NX))
    grad[:, 0] = wq * dV
    grad[:, 1] = wq * dpsi
    grad[:, 3] = wq * de
    grad[:, 4] = wq * dpsi

    # second derivatives in (V, psi, e); beta and theta share psi columns
    hVV = 2.0 * g / V**2
    hVp = -g * tpsi / V
    hVe = kappa / (V**2 * cpsi)
    hpp = g * (1.0 + 2.0 * tpsi**2)
    hpe = -kappa * tpsi / (V * cpsi)
    H = np.zeros((len(V), NX, NX))
    H[:, 0, 0] = hVV
    for (i, j, v) in ((0, 1, hVp), (0, 4, hVp), (0, 3, hVe),
                      (1, 3, hpe), (3, 4, hpe), (1, 4, hpp)):
        H[:, i, j] = v
        H[:, j, i] = v
    H[:, 1, 1] = hpp
    H[:, 4, 4] = hpp
    H *= wq[:, None, None]

    # PSD projection per knot block (indices 0,1,3,4 are active)
    idx = np.array([0, 1, 3, 4])
    Hsub = H[:, idx[:, None], idx[None, :]]
    lam, Q = np.linalg.eigh(Hsub)
    lam = np.maximum(lam, 0.0)
    Hsub = Q @ (lam[:, :, None] * np.swapaxes(Q, 1, 2))
    H[:, idx[:, None], idx[None, :]] = Hsub
    return val, grad, H


def _interval_pairs(K, closed):
    a = np.arange(K - 1 + (1 if closed else 0))
    b = (a + 1) % K
    return a, b


def _defects(X, U, kappa, ds, params, tires, closed):
    F = _dynamics_s(X, U, kappa, params, tires)
    a, b = _interval_pairs(X.shape[0], closed)
    return (X[b] - X[a] - 0.5 * ds * (F[a] + F[b])), F


def _constraint_jacobian(X, U, kappa, ds, params, tires, closed, f_scale=1.0):
    K = X.shape[0]
    JF = _dyn_jacobians(X, U, kappa, params, tires)  # (K, 5, 7)
    JF[:, :, NX + 1] *= f_scale  # chain rule for the scaled force variable
    a, b = _interval_pairs(K, closed)
    n_c = len(a)
    rows, cols, vals = [], [], []
    eyeX = np.zeros((NX, NZ))
    eyeX[:, :NX] = np.eye(NX)
    for i in range(n_c):
        ka, kb = a[i], b[i]
        Ba = -eyeX - 0.5 * ds * JF[ka]
        Bb = eyeX - 0.5 * ds * JF[kb]
        for blk, kk in ((Ba, ka), (Bb, kb)):
            r_idx, c_idx = np.nonzero(blk)
            rows.append(5 * i + r_idx)
            cols.append(NZ * kk + c_idx)
            vals.append(blk[r_idx, c_idx])
    rows = np.concatenate(rows)
    cols = np.concatenate(cols)
    vals = np.concatenate(vals)
    return sparse.coo_matrix((vals, (rows, cols)),
                             shape=(NX * n_c, NZ * K)).tocsc()


def _initial_guess(track, s_knots, kappa, params, bounds: PlannerBounds,
                   x_min, x_max, u_min, u_max, closed):
    """Centerline at 60% of the friction-limited speed, smoothed by
    forward/backward passes under the drive/brake acceleration limits."""
    k_abs = np.maximum(np.abs(kappa), 1e-4)
    v_lim = np.sqrt(params.mu * params.g / k_abs)
    V = 0.6 * np.minimum(v_lim, bounds.V_max)
    V = np.clip(V, x_min[0], x_max[0])
    ds = s_knots[1] - s_knots[0]
    a_acc = 0.5 * u_max[1] / params.m
    a_dec = 0.5 * abs(u_min[1]) / params.m
    K = len(s_knots)
    for _ in range(2 if closed else 1):
        for k in range(1, K):
            V[k] = min(V[k], np.sqrt(V[k - 1] ** 2 + 2 * a_acc * ds))
        if closed:
            V[0] = min(V[0], np.sqrt(V[-1] ** 2 + 2 * a_acc * ds))
        for k in range(K - 2, -1, -1):
            V[k] = min(V[k], np.sqrt(V[k + 1] ** 2 + 2 * a_dec * ds))
        if closed:
            V[-1] = min(V[-1], np.sqrt(V[0] ** 2 + 2 * a_dec * ds))
    X = np.zeros((K, NX))
    X[:, 0] = V
    X[:, 2] = V * kappa
    U = np.zeros((K, NU))
    U[:, 0] = np.clip(np.arctan(params.wheelbase * kappa), u_min[0], u_max[0])
    dV = np.gradient(V, s_knots, edge_order=1)
    U[:, 1] = np.clip(params.m * V * dV, u_min[1], u_max[1])
    X = np.clip(X, x_min, x_max)
    return X, U


def plan_min_time(track: Track, params: VehicleParams, tires: TireParams,
                  bounds: PlannerBounds, n_knots: int = 200,
                  max_iter: int = 200, tol_feas: float = 1e-9,
                  tol_kkt: float = 1e-7, verbose: bool = False,
                  ) -> ReferenceTrajectory:
    """Plan the minimum-time trajectory on a track.

    Returns a locally optimal trajectory with dynamics defects below
    tol_feas and a KKT residual below tol_kkt (raises
    PlannerConvergenceError with the best iterate attached otherwise).
    """
    if n_knots < 50:
        raise ValueError("n_knots >= 50 required")
    closed = track.closed
    K = n_knots if closed else n_knots + 1
    if closed:
        ds = track.length / K
        s_knots = np.arange(K) * ds
    else:
        s_knots = np.linspace(0.0, track.length, K)
        ds = s_knots[1] - s_knots[0]
    kappa = np.asarray(track.curvature_at(s_knots), dtype=float)

    x_min, x_max = bounds.x_bounds(track.half_width)
    u_min, u_max = bounds.u_bounds()
    if np.max(np.abs(kappa)) * x_max[3] >= 0.95:
        raise PlannerInfeasibleError("track too narrow/tight: e*kappa -> 1")

    # force variable scaled to specific force so all columns are O(1)
    f_scale = params.m
    lb = np.concatenate([np.tile(np.concatenate([x_min, [u_min[0], u_min[1] / f_scale]]), K)])
    ub = np.concatenate([np.tile(np.concatenate([x_max, [u_max[0], u_max[1] / f_scale]]), K)])

    X, U = _initial_guess(track, s_knots, kappa, params, bounds,
                          x_min, x_max, u_min, u_max, closed)

    def pack(X, U):
        w = np.empty(K * NZ)
        w.reshape(K, NZ)[:, :NX] = X
        w.reshape(K, NZ)[:, NX] = U[:, 0]
        w.reshape(K, NZ)[:, NX + 1] = U[:, 1] / f_scale
        return w

    def unpack(w):
        Wk = w.reshape(K, NZ)
        X = Wk[:, :NX].copy()
        U = np.column_stack([Wk[:, NX], Wk[:, NX + 1] * f_scale])
        return X, U

    wq = np.full(K, ds)
    if not closed:
        wq[0] = wq[-1] = 0.5 * ds

    w = pack(X, U)
    w = np.clip(w, lb, ub)
    nu_merit = 10.0
    sigma = 1e-3
    best = None
    kkt = np.inf
    feas_hist: list[float] = []

    def eval_all(w):
        X, U = unpack(w)
        c, _ = _defects(X, U, kappa, ds, params, tires, closed)
        val, gblk, Hblk = _objective_terms(X, kappa, wq)
        return X, U, c.ravel(), val, gblk, Hblk

    for it in range(max_iter):
        X, U = unpack(w)
        c, _ = _defects(X, U, kappa, ds, params, tires, closed)
        c = c.ravel()
        val, gblk, Hblk = _objective_terms(X, kappa, wq)
        A_s = _constraint_jacobian(X, U, kappa, ds, params, tires, closed,
                                   f_scale=f_scale)
        grad = np.zeros(K * NZ)
        grad.reshape(K, NZ)[:, :NX] = gblk
        Hblocks = [np.zeros((NZ, NZ)) for _ in range(K)]
        for k in range(K):
            Hblocks[k][:NX, :NX] = Hblk[k]
        H = sparse.block_diag(Hblocks, format="csc")
        H = H + sigma * sparse.eye(K * NZ, format="csc")

        feas = np.max(np.abs(c)) if c.size else 0.0
        # elastic (l1-slack) subproblem: the exact linearized model of the
        # merit function, feasible even when the hard QP is not
        n_w = K * NZ
        m_c = c.size
        P_aug = sparse.block_diag(
            [H, sparse.csc_matrix((2 * m_c, 2 * m_c))], format="csc")
        q_aug = np.concatenate([grad, np.full(2 * m_c, nu_merit)])
        A_aug = sparse.hstack(
            [A_s, -sparse.eye(m_c, format="csc"), sparse.eye(m_c, format="csc")],
            format="csc")
        lb_aug = np.concatenate([lb - w, np.zeros(2 * m_c)])
        ub_aug = np.concatenate([ub - w, np.full(2 * m_c, np.inf)])
        try:
            qp = solve_qp(P_aug, q_aug, A_aug, -c, lb_aug, ub_aug)
        except QpError:
            sigma *= 10.0
            if sigma > 1e8:
                raise PlannerConvergenceError(
                    f"QP subproblems failing (feas={feas:.1e})", best=best)
            continue
        d = qp.x[:n_w]
        slack = float(np.max(qp.x[n_w:])) if m_c else 0.0
        lam = qp.y_eq
        if slack > 1e-8 and np.max(np.abs(d)) < 1e-6:
            # converged onto an infeasible stationary point of the merit:
            # raise the penalty and push on
            nu_merit = min(nu_merit * 10.0, 1e6)
        kkt = float(np.max(np.abs(grad + A_s.T @ lam + qp.z_bounds[:n_w])))
        if verbose:
            print(f"  it={it:3d} T={val:9.4f} feas={feas:.2e} kkt={kkt:.2e} "
                  f"|d|={np.max(np.abs(d)):.2e} sigma={sigma:.1e}")
        if feas < tol_feas and kkt < tol_kkt:
            best = (w, val, feas, kkt)
            break
        best = (w, val, feas, kkt)

        nu_merit = max(nu_merit, 2.0 * np.max(np.abs(lam)) if lam.size else 0.0)
        phi0 = val + nu_merit * np.sum(np.abs(c))
        ddir = float(grad @ d) - nu_merit * np.sum(np.abs(c))

        def merit_of(w_try):
            _, _, c_try, val_try, _, _ = eval_all(w_try)
            return val_try + nu_merit * np.sum(np.abs(c_try))

        ok = False
        alpha = 1.0
        w_try = np.clip(w + d, lb, ub)
        try:
            phi_try = merit_of(w_try)
            ok = phi_try <= phi0 + 1e-4 * min(ddir, 0.0) and np.isfinite(phi_try)
        except Exception:
            ok = False
        if not ok:
            # second-order correction against constraint curvature (Maratos):
            # minimum-norm step restoring the defects at the trial point
            try:
                Xt, Ut = unpack(w_try)
                c_full, _ = _defects(Xt, Ut, kappa, ds, params, tires, closed)
                soc = solve_qp(sparse.eye(K * NZ, format="csc"),
                               np.zeros(K * NZ), A_s, -c_full.ravel(),
                               lb - w - d, ub - w - d)
                w_soc = np.clip(w + d + soc.x, lb, ub)
                phi_soc = merit_of(w_soc)
                if phi_soc <= phi0 + 1e-4 * min(ddir, 0.0) and np.isfinite(phi_soc):
                    w_try, ok = w_soc, True
            except Exception:
                pass
        if not ok:
            alpha = 0.5
            for _ in range(15):
                w_try = np.clip(w + alpha * d, lb, ub)
                try:
                    phi_try = merit_of(w_try)
                except Exception:
                    alpha *= 0.5
                    continue
                if phi_try <= phi0 + 1e-4 * alpha * min(ddir, 0.0) \
                        and np.isfinite(phi_try):
                    ok = True
                    break
                alpha *= 0.5
        if not ok:
            sigma *= 10.0
            if sigma > 1e8:
                raise PlannerConvergenceError(
                    f"line search stalled (feas={feas:.1e}, kkt={kkt:.1e})",
                    best=best)
            continue
        w = w_try
        if alpha == 1.0:
            sigma = max(sigma / 3.0, 1e-8)
        elif alpha < 0.25:
            sigma = min(sigma * 2.0, 1e8)
        # watchdog: escalate damping when feasibility stalls above tolerance
        feas_hist.append(feas)
        if len(feas_hist) > 12:
            feas_hist.pop(0)
            if feas > tol_feas and feas > 0.5 * feas_hist[0]:
                sigma = min(sigma * 10.0, 1e8)
                feas_hist.clear()
    else:
        X, U = unpack(w)
        c, _ = _defects(X, U, kappa, ds, params, tires, closed)
        if np.max(np.abs(c)) > tol_feas or kkt > tol_kkt:
            raise PlannerConvergenceError(
                f"no convergence in {max_iter} iterations "
                f"(feas={np.max(np.abs(c)):.1e}, kkt={kkt:.1e})", best=best)

    X, U = unpack(w)
    g = _time_integrand(X, kappa)
    a, b = _interval_pairs(K, closed)
    seg = 0.5 * ds * (g[a] + g[b])
    t = np.concatenate([[0.0], np.cumsum(seg)])
    lap_time = float(t[-1])
    t = t[:K]

    tang = track.tangent_at(s_knots)
    normal = np.column_stack([-tang[:, 1], tang[:, 0]])
    xy = track.position_at(s_knots) + X[:, 3:4] * normal

    return ReferenceTrajectory(s=s_knots, X=X, U=U, t=t,
                               mode=np.full(K, MODE_NORMAL, dtype=int),
                               xy=xy, lap_time=lap_time, closed=closed)


# -- drift tagging -----------------------------------------------------------

def _runs(mask, closed):
    """(start, length) of True runs; circular runs merged across the seam."""
    mask = np.asarray(mask, dtype=bool)
    n = len(mask)
    if n == 0 or not mask.any():
        return []
    if mask.all():
        return [(0, n)]
    idx = np.flatnonzero(np.diff(np.concatenate([[False], mask, [False]]).astype(int)))
    starts, ends = idx[0::2], idx[1::2]
    runs = [(int(s), int(e - s)) for s, e in zip(starts, ends)]
    if closed and mask[0] and mask[-1] and len(runs) > 1:
        first, last = runs[0], runs[-1]
        runs = runs[1:-1] + [(last[0], last[1] + first[1])]
    return runs


def _apply_runs(n, runs):
    mask = np.zeros(n, dtype=bool)
    for s, ln in runs:
        idx = (np.arange(s, s + ln)) % n
        mask[idx] = True
    return mask


def tag_drift_segments(traj: ReferenceTrajectory, beta_thresh: float = 0.15,
                       persist_len: float = 1.0) -> ReferenceTrajectory:
    """Tag knots as Drift where sideslip is large and opposes the yaw rate.

    Chatter suppression: drift runs shorter than persist_len are
    dropped, then normal gaps shorter than persist_len between drift
    runs are filled (run-length opening followed by closing).
    """
    beta, r = traj.X[:, 1], traj.X[:, 2]
    raw = (np.abs(beta) > beta_thresh) & (beta * r < 0)
    n = len(raw)
    ds = np.median(np.diff(traj.s))
    min_knots = max(int(np.ceil(persist_len / ds)), 1)

    runs = [(s, ln) for s, ln in _runs(raw, traj.closed) if ln >= min_knots]
    drift = _apply_runs(n, runs)
    gap_runs = [(s, ln) for s, ln in _runs(~drift, traj.closed) if ln < min_knots]
    if drift.any():
        drift = drift | _apply_runs(n, gap_runs)
    mode = np.where(drift, MODE_DRIFT, MODE_NORMAL)
    return replace(traj, mode=mode, _path=traj._path,
                   _s_on_path=traj._s_on_path)
