"""Exact Gaussian process regression for the 3-output dynamics residual.

The residual d = x_dot_measured - f_nominal(x, u) over features
z = [V, beta, r, delta, F_xr] is modeled by three independent GPs
(one per output) with a squared-exponential ARD kernel evaluated on
normalized features. Fits are exact (Cholesky); at the dataset budget
used here (m <= 300) a full refit is cheap, so there are no low-rank
update paths.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_factor, cho_solve
from scipy.optimize import minimize

from .vehicle import (BodyState, ControlInput, TireParams, VehicleParams,
                      nominal_derivatives)

FEATURE_NAMES = ("V", "beta", "r", "delta", "Fxr")
OUTPUT_NAMES = ("dV", "dbeta", "dr")
N_FEATURES = 5
N_OUTPUTS = 3

VAR_FLOOR = 1e-12  # predictive variance clamp


class NotFittedError(RuntimeError):
    """Predict called on a model without a cached factorization."""


class FactorizationError(RuntimeError):
    """Gram matrix not positive definite (duplicate rows / zero noise)."""


@dataclass
class ResidualSample:
    """One feature/residual pair collected from the plant."""

    z: np.ndarray  # (5,) [V, beta, r, delta, Fxr]
    d: np.ndarray  # (3,) residual of (V_dot, beta_dot, r_dot)

    def __post_init__(self):
        self.z = np.asarray(self.z, dtype=float).reshape(N_FEATURES)
        self.d = np.asarray(self.d, dtype=float).reshape(N_OUTPUTS)
        if not (np.all(np.isfinite(self.z)) and np.all(np.isfinite(self.d))):
            raise ValueError("non-finite residual sample")


@dataclass
class FeatureScaler:
    """Per-feature affine normalization shared by the GP and the explorer."""

    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=float).reshape(N_FEATURES)
        self.std = np.asarray(self.std, dtype=float).reshape(N_FEATURES)

    @classmethod
    def fit(cls, Z) -> "FeatureScaler":
        Z = np.atleast_2d(np.asarray(Z, dtype=float))
        std = Z.std(axis=0)
        std = np.where(std < 1e-9, 1.0, std)  # constant feature: leave raw
        return cls(mean=Z.mean(axis=0), std=std)

    def transform(self, Z):
        return (np.asarray(Z, dtype=float) - self.mean) / self.std


@dataclass
class GpHyperparams:
    """Kernel hyperparameters of one output GP (scaled-feature units)."""

    signal_std: float
    length_scales: np.ndarray  # (5,)
    noise_std: float

    def __post_init__(self):
        self.length_scales = np.asarray(self.length_scales, dtype=float).reshape(N_FEATURES)
        if self.signal_std <= 0 or self.noise_std <= 0 or np.any(self.length_scales <= 0):
            raise ValueError("hyperparameters must be positive")

    def to_dict(self) -> dict:
        return {"signal_std": self.signal_std,
                "length_scales": self.length_scales.tolist(),
                "noise_std": self.noise_std}

    @classmethod
    def from_dict(cls, d) -> "GpHyperparams":
        return cls(signal_std=float(d["signal_std"]),
                   length_scales=np.asarray(d["length_scales"], dtype=float),
                   noise_std=float(d["noise_std"]))


def default_hyperparams(dataset: "GprDataset") -> list[GpHyperparams]:
    """Heuristic hypers: unit length-scales (features are normalized),
    signal at the output std. Also the optimizer-failure fallback."""
    out = []
    for a in range(N_OUTPUTS):
        s = float(np.std(dataset.D[:, a])) if len(dataset) else 1.0
        s = max(s, 1e-6)
        out.append(GpHyperparams(signal_std=s,
                                 length_scales=np.ones(N_FEATURES),
                                 noise_std=max(0.1 * s, 1e-6)))
    return out


class GprDataset:
    """Residual training set with dedup radius and a hard size budget.

    The feature scaler is frozen on the first append so that scaled
    distances (dedup, explorer metrics, kernel) keep their meaning as
    the set grows.
    """

    def __init__(self, dedup_radius: float = 0.05, m_max: int = 300,
                 scaler: FeatureScaler | None = None):
        self.Z = np.empty((0, N_FEATURES))
        self.D = np.empty((0, N_OUTPUTS))
        self.dedup_radius = float(dedup_radius)
        self.m_max = int(m_max)
        self.scaler = scaler

    def __len__(self) -> int:
        return self.Z.shape[0]

    def scaled_Z(self) -> np.ndarray:
        if self.scaler is None:
            raise RuntimeError("dataset has no scaler yet (no data appended)")
        return self.scaler.transform(self.Z)

    def append(self, samples) -> int:
        """Append samples with dedup; evict nearest-duplicates over budget.

        Returns the number of rows actually added.
        """
        if isinstance(samples, ResidualSample):
            samples = [samples]
        samples = list(samples)
        if not samples:
            return 0
        Z_new = np.array([s.z for s in samples], dtype=float)
        D_new = np.array([s.d for s in samples], dtype=float)
        if self.scaler is None:
            self.scaler = FeatureScaler.fit(Z_new)

        added = 0
        for z, d in zip(Z_new, D_new):
            zs = self.scaler.transform(z)
            if len(self):
                dist = np.linalg.norm(self.scaled_Z() - zs, axis=1)
                if dist.min() < self.dedup_radius:
                    continue
            self.Z = np.vstack([self.Z, z])
            self.D = np.vstack([self.D, d])
            added += 1
        self._enforce_budget()
        return added

    def _enforce_budget(self):
        """Greedy eviction: drop the later row of the closest pair."""
        while len(self) > self.m_max:
            Zs = self.scaled_Z()
            d2 = np.sum((Zs[:, None, :] - Zs[None, :, :]) ** 2, axis=-1)
            np.fill_diagonal(d2, np.inf)
            i, j = np.unravel_index(np.argmin(d2), d2.shape)
            drop = max(i, j)
            self.Z = np.delete(self.Z, drop, axis=0)
            self.D = np.delete(self.D, drop, axis=0)

    # -- persistence --------------------------------------------------------

    def save_csv(self, path):
        header = ",".join(FEATURE_NAMES + OUTPUT_NAMES)
        np.savetxt(path, np.hstack([self.Z, self.D]), delimiter=",",
                   header=header, comments="", fmt="%.12g")
        meta = {"dedup_radius": self.dedup_radius, "m_max": self.m_max}
        if self.scaler is not None:
            meta["scaler"] = {"mean": self.scaler.mean.tolist(),
                              "std": self.scaler.std.tolist()}
        with open(str(path) + ".meta.json", "w") as f:
            json.dump(meta, f, indent=1, sort_keys=True)

    @classmethod
    def load_csv(cls, path) -> "GprDataset":
        raw = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
        try:
            with open(str(path) + ".meta.json") as f:
                meta = json.load(f)
        except FileNotFoundError:
            meta = {}
        ds = cls(dedup_radius=meta.get("dedup_radius", 0.05),
                 m_max=meta.get("m_max", 300))
        if "scaler" in meta:
            ds.scaler = FeatureScaler(mean=np.array(meta["scaler"]["mean"]),
                                      std=np.array(meta["scaler"]["std"]))
        if raw.size:
            ds.Z = raw[:, :N_FEATURES].copy()
            ds.D = raw[:, N_FEATURES:].copy()
            if ds.scaler is None:
                ds.scaler = FeatureScaler.fit(ds.Z)
        return ds


def _sq_dists(A, B, ls):
    """Pairwise squared ARD distances between scaled rows."""
    Ai = A / ls
    Bi = B / ls
    return np.sum(Ai**2, axis=1)[:, None] + np.sum(Bi**2, axis=1)[None, :] \
        - 2.0 * Ai @ Bi.T


def _kernel(A, B, hp: GpHyperparams):
    d2 = np.maximum(_sq_dists(A, B, hp.length_scales), 0.0)
    return hp.signal_std**2 * np.exp(-0.5 * d2)


class ResidualGP:
    """Three independent exact GPs over the shared dataset."""

    def __init__(self, dataset: GprDataset, hypers: list[GpHyperparams]):
        if len(dataset) < 1:
            raise ValueError("need at least one training sample")
        if len(hypers) != N_OUTPUTS:
            raise ValueError(f"need {N_OUTPUTS} hyperparameter sets")
        self.dataset = dataset
        self.hypers = list(hypers)
        self._Zs = None
        self._chol = None
        self._alpha = None
        self._fit()

    def _fit(self):
        Zs = self.dataset.scaled_Z()
        chols, alphas = [], []
        for a, hp in enumerate(self.hypers):
            K = _kernel(Zs, Zs, hp)
            K[np.diag_indices_from(K)] += hp.noise_std**2
            try:
                c = cho_factor(K, lower=True)
            except np.linalg.LinAlgError as err:
                raise FactorizationError(
                    f"output {OUTPUT_NAMES[a]}: Gram matrix not PD "
                    f"(noise_std={hp.noise_std:g})") from err
            chols.append(c)
            alphas.append(cho_solve(c, self.dataset.D[:, a]))
        self._Zs = Zs
        self._chol = chols
        self._alpha = alphas

    @property
    def m(self) -> int:
        return self._Zs.shape[0]

    def predict(self, Z):
        """Posterior mean and variance at query features.

        Accepts (5,) or (k, 5); returns arrays of shape (3,)/(k, 3).
        Variances are clamped at a small nonnegative floor.
        """
        if self._chol is None:
            raise NotFittedError("model has no factorization")
        Z = np.asarray(Z, dtype=float)
        single = Z.ndim == 1
        Zq = self.dataset.scaler.transform(np.atleast_2d(Z))
        k = Zq.shape[0]
        mu = np.empty((k, N_OUTPUTS))
        var = np.empty((k, N_OUTPUTS))
        for a, hp in enumerate(self.hypers):
            Kq = _kernel(Zq, self._Zs, hp)           # (k, m)
            mu[:, a] = Kq @ self._alpha[a]
            v = cho_solve(self._chol[a], Kq.T)       # (m, k)
            var[:, a] = np.maximum(hp.signal_std**2 - np.sum(Kq.T * v, axis=0),
                                   VAR_FLOOR)
        if single:
            return mu[0], var[0]
        return mu, var

    def predict_mean(self, z) -> np.ndarray:
        """Mean-only fast path for the solvers (no variance back-solve)."""
        zq = self.dataset.scaler.transform(np.asarray(z, dtype=float))
        out = np.empty(N_OUTPUTS)
        for a, hp in enumerate(self.hypers):
            d2 = np.sum(((self._Zs - zq) / hp.length_scales) ** 2, axis=1)
            out[a] = (hp.signal_std**2 * np.exp(-0.5 * d2)) @ self._alpha[a]
        return out


def fit(dataset: GprDataset, hypers: list[GpHyperparams] | None = None) -> ResidualGP:
    """Fit the residual GP, caching the factorization for O(m) mean queries."""
    if hypers is None:
        hypers = default_hyperparams(dataset)
    return ResidualGP(dataset, hypers)


def append_and_refit(model: ResidualGP | None, dataset: GprDataset,
                     samples) -> tuple[ResidualGP, GprDataset]:
    """Append samples (dedup + budget) and refit with the current hypers."""
    dataset.append(samples)
    hypers = model.hypers if model is not None else default_hyperparams(dataset)
    return ResidualGP(dataset, hypers), dataset


# -- residual targets --------------------------------------------------------

def residual_target(logged_rates, state: BodyState, inp: ControlInput,
                    params: VehicleParams, tires: TireParams) -> ResidualSample:
    """Turn a measured rate vector into a residual training sample:
    d = x_dot_measured - f_nominal(x, u)."""
    rates = np.asarray(logged_rates, dtype=float).reshape(N_OUTPUTS)
    if not np.all(np.isfinite(rates)):
        raise ValueError("non-finite measured rates")
    d = rates - nominal_derivatives(state, inp, params, tires)
    z = np.array([state.V, state.beta, state.r, inp.delta, inp.F_xr])
    return ResidualSample(z=z, d=d)


def measured_rates(states, dt: float) -> np.ndarray:
    """Central-difference rates from body states logged at period dt,
    with a 5-sample median prefilter against noise spikes.

    `states` is (T, 3); the result is (T, 3) with NaN at the ends where
    the central difference or the filter window is incomplete.
    """
    X = np.asarray(states, dtype=float)
    T = X.shape[0]
    rates = np.full_like(X, np.nan)
    if T >= 3:
        rates[1:-1] = (X[2:] - X[:-2]) / (2.0 * dt)
    if T >= 7:
        filt = np.full_like(rates, np.nan)
        for k in range(3, T - 3):
            filt[k] = np.median(rates[k - 2:k + 3], axis=0)
        rates = filt
    return rates


# -- hyperparameter optimization ---------------------------------------------

_LOG_BOUNDS = [(np.log(1e-6), np.log(1e5))] \
    + [(np.log(1e-2), np.log(1e3))] * N_FEATURES \
    + [(np.log(1e-8), np.log(1e4))]


def _nlml_and_grad(log_theta, Zs, d):
    """Negative log marginal likelihood and gradient in log-parameters.

    log_theta = [log signal_std, log l_1..l_5, log noise_std].
    """
    s = np.exp(log_theta[0])
    ls = np.exp(log_theta[1:1 + N_FEATURES])
    sn = np.exp(log_theta[1 + N_FEATURES])
    m = Zs.shape[0]

    diff = Zs[:, None, :] - Zs[None, :, :]          # (m, m, 5)
    d2 = np.sum((diff / ls) ** 2, axis=-1)
    Ke = s**2 * np.exp(-0.5 * d2)
    K = Ke + sn**2 * np.eye(m)
    try:
        c = cho_factor(K, lower=True)
    except np.linalg.LinAlgError:
        return 1e12, np.zeros_like(log_theta)
    alpha = cho_solve(c, d)
    logdet = 2.0 * np.sum(np.log(np.diag(c[0])))
    nlml = 0.5 * d @ alpha + 0.5 * logdet + 0.5 * m * np.log(2.0 * np.pi)

    Kinv = cho_solve(c, np.eye(m))
    A = np.outer(alpha, alpha) - Kinv
    grad = np.empty_like(log_theta)
    grad[0] = -0.5 * np.sum(A * (2.0 * Ke))
    for i in range(N_FEATURES):
        dK = Ke * (diff[:, :, i] ** 2 / ls[i] ** 2)
        grad[1 + i] = -0.5 * np.sum(A * dK)
    grad[1 + N_FEATURES] = -0.5 * np.trace(A) * 2.0 * sn**2
    return float(nlml), grad


def optimize_hyperparameters(dataset: GprDataset, n_restarts: int = 3,
                             seed: int = 0) -> list[GpHyperparams]:
    """Per-output marginal-likelihood maximization, multi-start L-BFGS.

    Falls back to the heuristic hypers for an output whose restarts all
    fail.
    """
    if len(dataset) < 10:
        raise ValueError("need at least 10 samples to optimize hyperparameters")
    rng = np.random.default_rng(seed)
    Zs = dataset.scaled_Z()
    heur = default_hyperparams(dataset)
    out = []
    for a in range(N_OUTPUTS):
        d = dataset.D[:, a]
        base = np.concatenate([[np.log(heur[a].signal_std)],
                               np.zeros(N_FEATURES),
                               [np.log(heur[a].noise_std)]])
        best = None
        for k in range(n_restarts):
            x0 = base if k == 0 else base + rng.normal(0.0, 0.7, size=base.shape)
            x0 = np.clip(x0, [b[0] for b in _LOG_BOUNDS], [b[1] for b in _LOG_BOUNDS])
            try:
                res = minimize(_nlml_and_grad, x0, args=(Zs, d), jac=True,
                               method="L-BFGS-B", bounds=_LOG_BOUNDS,
                               options={"maxiter": 200})
            except Exception:
                continue
            if np.all(np.isfinite(res.x)) and (best is None or res.fun < best.fun):
                best = res
        if best is None:
            out.append(heur[a])
            continue
        th = np.exp(best.x)
        out.append(GpHyperparams(signal_std=th[0],
                                 length_scales=th[1:1 + N_FEATURES],
                                 noise_std=th[1 + N_FEATURES]))
    return out


def save_hyperparams(hypers: list[GpHyperparams], path):
    with open(path, "w") as f:
        json.dump([h.to_dict() for h in hypers], f, indent=1, sort_keys=True)


def load_hyperparams(path) -> list[GpHyperparams]:
    with open(path) as f:
        return [GpHyperparams.from_dict(d) for d in json.load(f)]
