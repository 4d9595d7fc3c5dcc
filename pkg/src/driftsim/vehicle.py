"""Single-track vehicle dynamics with simplified Pacejka tires.

The body state is (V, beta, r): speed of the center of mass, sideslip
angle, and yaw rate. Inputs are front steering angle and rear
longitudinal force; the model is rear-drive only. All angles in rad,
forces in N, speeds in m/s.

Functions accept floats or numpy arrays (batched over the leading
axes) and are complex-step safe, which the NLP layers rely on for
machine-accurate Jacobians.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# Slip angles divide by V*cos(beta); below this speed the model is rejected
# rather than regularized (drifting never approaches standstill).
V_MIN = 0.05  # [m/s]


class SingularStateError(ValueError):
    """Raised when a body state is below the model's validity speed."""


@dataclass(frozen=True)
class VehicleParams:
    """Chassis parameters of the single-track model."""

    m: float    # mass [kg]
    I_z: float  # yaw inertia [kg m^2]
    a: float    # CG to front axle [m]
    b: float    # CG to rear axle [m]
    mu: float   # tire-ground friction coefficient [-]
    g: float = 9.81  # gravitational acceleration [m/s^2]

    def __post_init__(self):
        if self.m <= 0 or self.I_z <= 0 or self.a <= 0 or self.b <= 0:
            raise ValueError("m, I_z, a, b must be positive")
        if not 0.0 < self.mu <= 1.5:
            raise ValueError(f"mu={self.mu} outside (0, 1.5]")

    @property
    def wheelbase(self) -> float:
        return self.a + self.b

    @property
    def F_zf(self) -> float:
        """Static front axle load [N]."""
        return self.m * self.g * self.b / (self.a + self.b)

    @property
    def F_zr(self) -> float:
        """Static rear axle load [N]."""
        return self.m * self.g * self.a / (self.a + self.b)


@dataclass(frozen=True)
class TireParams:
    """Simplified Pacejka lateral model: F_y = -mu*F_z*sin(C*atan(B*alpha))."""

    B: float  # stiffness factor [-]
    C: float  # shape factor [-]

    def __post_init__(self):
        if self.B <= 0 or self.C <= 0:
            raise ValueError("B and C must be positive")


@dataclass
class BodyState:
    """Dynamic body state of the single-track model."""

    V: float     # speed of center of mass [m/s]
    beta: float  # sideslip angle [rad]
    r: float     # yaw rate [rad/s]

    def as_array(self) -> np.ndarray:
        return np.array([self.V, self.beta, self.r], dtype=float)

    @classmethod
    def from_array(cls, x) -> "BodyState":
        return cls(float(x[0]), float(x[1]), float(x[2]))


@dataclass
class ControlInput:
    """Front steering angle and rear longitudinal force."""

    delta: float  # [rad]
    F_xr: float   # [N]

    def as_array(self) -> np.ndarray:
        return np.array([self.delta, self.F_xr], dtype=float)

    @classmethod
    def from_array(cls, u) -> "ControlInput":
        return cls(float(u[0]), float(u[1]))


def _check_speed(V) -> None:
    if np.any(np.real(V) < V_MIN):
        raise SingularStateError(f"V < V_MIN={V_MIN} m/s; slip angles undefined")


def slip_angles(V, beta, r, delta, params: VehicleParams):
    """Front and rear tire slip angles.

    alpha_f = atan((V sin(beta) + a r) / (V cos(beta))) - delta
    alpha_r = atan((V sin(beta) - b r) / (V cos(beta)))
    """
    _check_speed(V)
    vx = V * np.cos(beta)
    vy = V * np.sin(beta)
    alpha_f = np.arctan((vy + params.a * r) / vx) - delta
    alpha_r = np.arctan((vy - params.b * r) / vx)
    return alpha_f, alpha_r


def tire_lateral_force(alpha, F_z, tire: TireParams, mu: float):
    """Lateral tire force from the simplified Pacejka model.

    Magnitude never exceeds mu*F_z; the force opposes the slip angle.
    """
    if np.any(np.real(F_z) <= 0):
        raise ValueError("F_z must be positive")
    return -mu * F_z * np.sin(tire.C * np.arctan(tire.B * alpha))


def body_rates(x, u, params: VehicleParams, tires: TireParams,
               F_zf=None, F_zr=None, mu_f=None, mu_r=None,
               tires_f: TireParams | None = None,
               tires_r: TireParams | None = None):
    """Body-state rates (V_dot, beta_dot, r_dot) of the single-track model.

    `x` has (..., 3) layout [V, beta, r] and `u` (..., 2) layout
    [delta, F_xr]. Axle loads default to the static split; the keyword
    overrides let the mismatch plant perturb loads, friction, and tire
    curves per axle without duplicating the force balance.
    """
    x = np.asarray(x)
    u = np.asarray(u)
    V, beta, r = x[..., 0], x[..., 1], x[..., 2]
    delta, F_xr = u[..., 0], u[..., 1]

    alpha_f, alpha_r = slip_angles(V, beta, r, delta, params)
    if F_zf is None:
        F_zf = params.F_zf
    if F_zr is None:
        F_zr = params.F_zr
    mu_f = params.mu if mu_f is None else mu_f
    mu_r = params.mu if mu_r is None else mu_r
    tires_f = tires if tires_f is None else tires_f
    tires_r = tires if tires_r is None else tires_r

    F_yf = tire_lateral_force(alpha_f, F_zf, tires_f, mu_f)
    F_yr = tire_lateral_force(alpha_r, F_zr, tires_r, mu_r)

    V_dot = (-F_yf * np.sin(delta - beta) + F_yr * np.sin(beta)
             + F_xr * np.cos(beta)) / params.m
    beta_dot = (F_yf * np.cos(delta - beta) + F_yr * np.cos(beta)
                - F_xr * np.sin(beta)) / (params.m * V) - r
    r_dot = (params.a * F_yf * np.cos(delta) - params.b * F_yr) / params.I_z
    return np.stack([V_dot, beta_dot, r_dot], axis=-1)


def nominal_derivatives(state: BodyState, inp: ControlInput,
                        params: VehicleParams, tires: TireParams) -> np.ndarray:
    """Rates of the nominal model at a single state/input pair."""
    return body_rates(state.as_array(), inp.as_array(), params, tires)


def integrate_rk4(deriv, x, u, dt: float):
    """One classical Runge-Kutta-4 step of x' = deriv(x, u), u held constant."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    x = np.asarray(x, dtype=float)
    k1 = deriv(x, u)
    k2 = deriv(x + 0.5 * dt * k1, u)
    k3 = deriv(x + 0.5 * dt * k2, u)
    k4 = deriv(x + dt * k3, u)
    return x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
