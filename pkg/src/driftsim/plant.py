"""Mismatch plant: the closed-loop stand-in for a high-fidelity simulator.

Structurally the same single-track dynamics as the nominal model, but
with perturbed tire curves, first-order actuator lags, optional
longitudinal load transfer, and seeded process noise. The gap between
this plant and the nominal model is exactly what the residual GP has
to learn.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .vehicle import (BodyState, ControlInput, TireParams, VehicleParams,
                      body_rates)


def _pair(v) -> tuple[float, float]:
    """Normalize a scalar or (front, rear) pair to a pair."""
    if np.isscalar(v):
        return (float(v), float(v))
    f, r = v
    return (float(f), float(r))


@dataclass
class PlantConfig:
    """Mismatch knobs. Scales are (front, rear) pairs; scalars apply to both."""

    tire_scale_B: tuple[float, float] = (1.0, 1.0)
    tire_scale_C: tuple[float, float] = (1.0, 1.0)
    tire_scale_mu: tuple[float, float] = (1.0, 1.0)
    steer_lag_tau: float = 0.0   # first-order steering actuator lag [s]
    force_lag_tau: float = 0.0   # first-order drive-force lag [s]
    process_noise_std: tuple[float, float, float] = (0.0, 0.0, 0.0)  # on (V., beta., r.)
    load_transfer_enabled: bool = False
    h_cg: float = 0.45           # CG height for load transfer [m]

    def __post_init__(self):
        self.tire_scale_B = _pair(self.tire_scale_B)
        self.tire_scale_C = _pair(self.tire_scale_C)
        self.tire_scale_mu = _pair(self.tire_scale_mu)
        if any(s <= 0 for s in self.tire_scale_B + self.tire_scale_C + self.tire_scale_mu):
            raise ValueError("tire scales must be positive")
        if self.steer_lag_tau < 0 or self.force_lag_tau < 0:
            raise ValueError("actuator lags must be nonnegative")
        if any(s < 0 for s in self.process_noise_std):
            raise ValueError("noise std must be nonnegative")

    @classmethod
    def exact(cls) -> "PlantConfig":
        """Plant identical to the nominal model (mismatch disabled)."""
        return cls()

    @classmethod
    def default_mismatch(cls) -> "PlantConfig":
        """Default preset: stiffer/greasier tires plus steering lag.

        Strong enough that the uncorrected controller visibly
        under-tracks, mild enough that drifting stays stabilizable.
        """
        return cls(tire_scale_B=1.15, tire_scale_mu=0.85, steer_lag_tau=0.04)


@dataclass
class PlantState:
    """Body state plus global pose and lagged actuator values."""

    body: BodyState
    x: float = 0.0    # [m]
    y: float = 0.0    # [m]
    phi: float = 0.0  # heading [rad], kept in (-pi, pi]
    delta_act: float = 0.0
    F_act: float = 0.0

    def as_array(self) -> np.ndarray:
        return np.array([self.body.V, self.body.beta, self.body.r,
                         self.x, self.y, self.phi,
                         self.delta_act, self.F_act], dtype=float)

    @classmethod
    def from_array(cls, z) -> "PlantState":
        return cls(body=BodyState(float(z[0]), float(z[1]), float(z[2])),
                   x=float(z[3]), y=float(z[4]), phi=float(z[5]),
                   delta_act=float(z[6]), F_act=float(z[7]))


def wrap_angle(a):
    """Wrap angle(s) to (-pi, pi]."""
    w = (-a + np.pi) % (2.0 * np.pi)
    return np.pi - w


def perturbed_body_rates(x, u, params: VehicleParams, tires: TireParams,
                         cfg: PlantConfig):
    """Body rates with the plant's perturbed tires and optional load transfer."""
    sBf, sBr = cfg.tire_scale_B
    sCf, sCr = cfg.tire_scale_C
    sMf, sMr = cfg.tire_scale_mu
    tires_f = TireParams(tires.B * sBf, tires.C * sCf)
    tires_r = TireParams(tires.B * sBr, tires.C * sCr)
    F_zf, F_zr = params.F_zf, params.F_zr
    if cfg.load_transfer_enabled:
        # Quasi-static longitudinal transfer driven by the drive force.
        dF = np.asarray(u)[..., 1] * cfg.h_cg / params.wheelbase
        F_zf = np.maximum(params.F_zf - dF, 0.05 * params.F_zf)
        F_zr = np.maximum(params.F_zr + dF, 0.05 * params.F_zr)
    return body_rates(x, u, params, tires,
                      F_zf=F_zf, F_zr=F_zr,
                      mu_f=params.mu * sMf, mu_r=params.mu * sMr,
                      tires_f=tires_f, tires_r=tires_r)


def plant_step(plant: PlantState, inp: ControlInput, dt: float,
               params: VehicleParams, tires: TireParams, cfg: PlantConfig,
               rng: np.random.Generator | None = None) -> PlantState:
    """Advance the plant one RK4 step under a held command.

    Actuator lags are integrated jointly with the body; with zero lag
    the actuator is pinned to the command so the body block reproduces
    an RK4 step of the bare dynamics bit for bit. Process noise is one
    rate offset per step (piecewise-constant disturbance), drawn from
    `rng` so runs are reproducible.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    z = plant.as_array()
    if cfg.steer_lag_tau == 0.0:
        z[6] = inp.delta
    if cfg.force_lag_tau == 0.0:
        z[7] = inp.F_xr

    noise = np.zeros(3)
    if rng is not None and any(s > 0 for s in cfg.process_noise_std):
        noise = rng.normal(0.0, cfg.process_noise_std)

    def deriv(zc, _u):
        body = zc[..., 0:3]
        phi = zc[..., 5]
        beta = zc[..., 1]
        V = zc[..., 0]
        u_act = zc[..., 6:8]
        rates = perturbed_body_rates(body, u_act, params, tires, cfg) + noise
        pose_rates = np.stack([V * np.cos(phi + beta),
                               V * np.sin(phi + beta),
                               body[..., 2]], axis=-1)
        d_delta = ((inp.delta - zc[..., 6]) / cfg.steer_lag_tau
                   if cfg.steer_lag_tau > 0 else 0.0 * zc[..., 6])
        d_F = ((inp.F_xr - zc[..., 7]) / cfg.force_lag_tau
               if cfg.force_lag_tau > 0 else 0.0 * zc[..., 7])
        return np.concatenate([rates, pose_rates,
                               np.stack([d_delta, d_F], axis=-1)], axis=-1)

    k1 = deriv(z, None)
    k2 = deriv(z + 0.5 * dt * k1, None)
    k3 = deriv(z + 0.5 * dt * k2, None)
    k4 = deriv(z + dt * k3, None)
    z_next = z + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    z_next[5] = wrap_angle(z_next[5])
    return PlantState.from_array(z_next)
