"""Thin wrapper over the Clarabel interior-point solver for the convex QP
subproblems used by the planner SQP, the MPC, and the velocity-set program.

Problem form:  min 1/2 x'Px + q'x  s.t.  A_eq x = b_eq,  lb <= x <= ub.
"""

from __future__ import annotations

from dataclasses import dataclass

import clarabel
import numpy as np
from scipy import sparse


class QpError(RuntimeError):
    """QP solve did not reach an optimal status."""


@dataclass
class QpResult:
    x: np.ndarray
    y_eq: np.ndarray       # equality multipliers (same sign as returned dual)
    z_bounds: np.ndarray   # combined bound multiplier (upper minus lower)
    obj: float
    status: str


_SETTINGS = None


def _settings():
    global _SETTINGS
    if _SETTINGS is None:
        s = clarabel.DefaultSettings()
        s.verbose = False
        _SETTINGS = s
    return _SETTINGS


def solve_qp(P, q, A_eq=None, b_eq=None, lb=None, ub=None) -> QpResult:
    """Solve the box/equality QP; raises QpError unless solved (or nearly)."""
    q = np.asarray(q, dtype=float)
    n = q.shape[0]
    P = sparse.csc_matrix(sparse.triu(P))

    blocks = []
    rhs = []
    cones = []
    n_eq = 0
    if A_eq is not None and A_eq.shape[0] > 0:
        A_eq = sparse.csc_matrix(A_eq)
        n_eq = A_eq.shape[0]
        blocks.append(A_eq)
        rhs.append(np.asarray(b_eq, dtype=float))
        cones.append(clarabel.ZeroConeT(n_eq))

    eye = sparse.eye(n, format="csc")
    iu = il = None
    if ub is not None:
        ub = np.asarray(ub, dtype=float)
        iu = np.where(np.isfinite(ub))[0]
        if iu.size:
            blocks.append(eye[iu])
            rhs.append(ub[iu])
            cones.append(clarabel.NonnegativeConeT(iu.size))
    if lb is not None:
        lb = np.asarray(lb, dtype=float)
        il = np.where(np.isfinite(lb))[0]
        if il.size:
            blocks.append(-eye[il])
            rhs.append(-lb[il])
            cones.append(clarabel.NonnegativeConeT(il.size))

    if blocks:
        A = sparse.vstack(blocks, format="csc")
        b = np.concatenate(rhs)
    else:
        A = sparse.csc_matrix((0, n))
        b = np.zeros(0)

    solver = clarabel.DefaultSolver(P, q, A, b, cones, _settings())
    sol = solver.solve()
    status = str(sol.status)
    if status not in ("Solved", "AlmostSolved"):
        raise QpError(f"QP status {status}")

    x = np.asarray(sol.x)
    z = np.asarray(sol.z)
    y_eq = z[:n_eq]
    zb = np.zeros(n)
    off = n_eq
    if iu is not None and iu.size:
        zb[iu] += z[off:off + iu.size]
        off += iu.size
    if il is not None and il.size:
        zb[il] -= z[off:off + il.size]
    return QpResult(x=x, y_eq=y_eq, z_bounds=zb, obj=float(sol.obj_val),
                    status=status)
