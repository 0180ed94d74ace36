"""Joint regression model for a dependently censored log survival time.

The log survival time T and log censoring time C each depend linearly on
covariates, a confounded regressor z and a control function V that absorbs
the endogenous part of z; the error pair is bivariate Gaussian with free
correlation.  Only the follow-up time ``y = min(T, C)`` and the event
indicator ``delta = 1(T <= C)`` are observed.  This module holds the domain
containers, the control-function variants, and the observed-data
log-likelihood built from the two sub-densities of ``(y, delta)``.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .numerics import _log_norm_pdf, binorm_cdf, log_norm_cdf, norm_cdf, norm_pdf

__all__ = [
    "FirstStageFamily",
    "Observation",
    "ObservationSet",
    "ThetaParams",
    "control_function",
    "control_values",
    "residuals",
    "log_subdensity",
    "log_likelihood",
    "conditional_cdf_Y",
    "loglik_terms",
]

_LOG_SQRT_2PI = 0.5 * math.log(2.0 * math.pi)


class FirstStageFamily(str, enum.Enum):
    """Model linking the confounded regressor z to the instruments.

    ``LINEAR`` treats z as continuous with ``z = w'gamma + nu``; ``PROBIT``
    and ``LOGIT`` treat z as binary, ``z = 1(w'gamma - nu > 0)`` with nu
    standard normal or standard logistic.  The family fixes both the
    first-stage objective and the control-function formula.
    """

    LINEAR = "linear"
    PROBIT = "probit"
    LOGIT = "logit"

    @classmethod
    def parse(cls, value) -> "FirstStageFamily":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).lower())
        except ValueError:
            raise ValueError(
                f"unknown first-stage family {value!r}; expected one of "
                f"{[f.value for f in cls]}") from None


@dataclass(frozen=True, eq=False)
class Observation:
    """One record: follow-up time (log scale), event indicator, covariates,
    instrument and confounded regressor."""

    y: float
    delta: int
    x_tilde: np.ndarray
    w_tilde: float
    z: float

    def __post_init__(self):
        object.__setattr__(self, "y", float(self.y))
        object.__setattr__(self, "delta", int(self.delta))
        object.__setattr__(self, "x_tilde",
                           np.atleast_1d(np.asarray(self.x_tilde, dtype=float)))
        object.__setattr__(self, "w_tilde", float(self.w_tilde))
        object.__setattr__(self, "z", float(self.z))
        if self.delta not in (0, 1):
            raise ValueError(f"delta must be 0 or 1, got {self.delta}")
        vals = np.concatenate([[self.y, self.w_tilde, self.z], self.x_tilde])
        if not np.all(np.isfinite(vals)):
            raise ValueError("observation contains non-finite values")


class ObservationSet:
    """A sample of observations with cached design matrices.

    Construct from parallel arrays (the cheap path used by the simulator and
    the CSV reader) or from a sequence of :class:`Observation` records.
    """

    def __init__(self, y, delta, x_tilde, w_tilde, z):
        self.y = np.asarray(y, dtype=float)
        self.delta = np.asarray(delta, dtype=int)
        x_tilde = np.asarray(x_tilde, dtype=float)
        if x_tilde.ndim == 1:
            x_tilde = x_tilde[:, None]
        self.x_tilde = x_tilde
        self.w_tilde = np.asarray(w_tilde, dtype=float)
        self.z = np.asarray(z, dtype=float)
        n = self.y.shape[0]
        if n < 1:
            raise ValueError("need at least one observation")
        for name, arr in (("delta", self.delta), ("w_tilde", self.w_tilde),
                          ("z", self.z)):
            if arr.shape != (n,):
                raise ValueError(f"{name} must have shape ({n},), got {arr.shape}")
        if self.x_tilde.shape[0] != n:
            raise ValueError("x_tilde row count does not match y")
        if not np.isin(self.delta, (0, 1)).all():
            raise ValueError("delta values must all be 0 or 1")
        stacked = np.concatenate(
            [self.y, self.w_tilde, self.z, self.x_tilde.ravel()])
        if not np.all(np.isfinite(stacked)):
            raise ValueError("observations contain non-finite values")
        # Design matrices: x = (1, x_tilde), w = (1, x_tilde, w_tilde).
        ones = np.ones((n, 1))
        self.x_design = np.hstack([ones, self.x_tilde])
        self.w_design = np.hstack([self.x_design, self.w_tilde[:, None]])

    @classmethod
    def from_observations(cls, observations: Sequence[Observation]) -> "ObservationSet":
        obs = list(observations)
        if not obs:
            raise ValueError("need at least one observation")
        m = obs[0].x_tilde.size
        if any(o.x_tilde.size != m for o in obs):
            raise ValueError("covariate dimension differs across observations")
        return cls(
            y=[o.y for o in obs],
            delta=[o.delta for o in obs],
            x_tilde=np.vstack([o.x_tilde for o in obs]),
            w_tilde=[o.w_tilde for o in obs],
            z=[o.z for o in obs],
        )

    @property
    def n(self) -> int:
        return self.y.shape[0]

    @property
    def m(self) -> int:
        return self.x_tilde.shape[1]

    @property
    def observations(self) -> tuple:
        return tuple(
            Observation(y=self.y[i], delta=self.delta[i],
                        x_tilde=self.x_tilde[i], w_tilde=self.w_tilde[i],
                        z=self.z[i])
            for i in range(self.n))

    def __len__(self) -> int:
        return self.n

    def has_both_outcomes(self) -> bool:
        """Whether both events and censorings occur (empirical analogue of the
        positivity assumption needed before the joint likelihood is fit)."""
        return bool(self.delta.min() == 0 and self.delta.max() == 1)


@dataclass(eq=False)
class ThetaParams:
    """Second-stage parameter vector.

    ``beta_T`` / ``beta_C`` include the intercept first and have length m+1;
    ``sigma_T, sigma_C > 0`` and ``|rho| < 1`` define the Gaussian error pair.
    """

    beta_T: np.ndarray
    alpha_T: float
    lambda_T: float
    beta_C: np.ndarray
    alpha_C: float
    lambda_C: float
    sigma_T: float
    sigma_C: float
    rho: float

    def __post_init__(self):
        self.beta_T = np.atleast_1d(np.asarray(self.beta_T, dtype=float))
        self.beta_C = np.atleast_1d(np.asarray(self.beta_C, dtype=float))
        for name in ("alpha_T", "lambda_T", "alpha_C", "lambda_C",
                     "sigma_T", "sigma_C", "rho"):
            setattr(self, name, float(getattr(self, name)))
        if self.beta_T.shape != self.beta_C.shape:
            raise ValueError("beta_T and beta_C must have the same length")
        vals = np.concatenate([self.beta_T, self.beta_C,
                               [self.alpha_T, self.lambda_T, self.alpha_C,
                                self.lambda_C, self.sigma_T, self.sigma_C,
                                self.rho]])
        if not np.all(np.isfinite(vals)):
            raise ValueError("theta contains non-finite values")
        if not (self.sigma_T > 0 and self.sigma_C > 0):
            raise ValueError("sigma_T and sigma_C must be positive")
        if not abs(self.rho) < 1:
            raise ValueError("rho must lie strictly inside (-1, 1)")

    @property
    def m(self) -> int:
        return self.beta_T.size - 1

    def to_vector(self) -> np.ndarray:
        """Pack as (beta_T, alpha_T, lambda_T, beta_C, alpha_C, lambda_C,
        sigma_T, sigma_C, rho)."""
        return np.concatenate([
            self.beta_T, [self.alpha_T, self.lambda_T],
            self.beta_C, [self.alpha_C, self.lambda_C,
                          self.sigma_T, self.sigma_C, self.rho]])

    @classmethod
    def from_vector(cls, vec, m: int) -> "ThetaParams":
        vec = np.asarray(vec, dtype=float)
        if vec.size != 2 * m + 9:
            raise ValueError(f"expected length {2 * m + 9}, got {vec.size}")
        k = m + 1
        return cls(beta_T=vec[:k], alpha_T=vec[k], lambda_T=vec[k + 1],
                   beta_C=vec[k + 2:2 * k + 2], alpha_C=vec[2 * k + 2],
                   lambda_C=vec[2 * k + 3], sigma_T=vec[2 * k + 4],
                   sigma_C=vec[2 * k + 5], rho=vec[2 * k + 6])

    @staticmethod
    def labels(m: int) -> list:
        """Display labels in packing order."""
        out = [f"β_{{T,{j}}}" for j in range(m + 1)] + ["α_T", "λ_T"]
        out += [f"β_{{C,{j}}}" for j in range(m + 1)] + ["α_C", "λ_C"]
        out += ["σ_T", "σ_C", "ρ"]
        return out


# ---------------------------------------------------------------------------
# Control functions
# ---------------------------------------------------------------------------

def _normal_tail_mean(a):
    """E[nu | nu > a] for standard normal nu, via log-space Mills ratio."""
    a = np.asarray(a, dtype=float)
    return np.exp(_log_norm_pdf(a) - log_norm_cdf(-a))


def _logistic_tail_mean(a):
    """E[nu | nu > a] for standard logistic nu.

    Equal to softplus(a) + exp(a) * softplus(-a); for large a that product is
    replaced by its series 1 - exp(-a)/2 + exp(-2a)/3 to avoid overflow.
    """
    a = np.asarray(a, dtype=float)
    sp_pos = np.logaddexp(0.0, a)
    sp_neg = np.logaddexp(0.0, -a)
    small = a <= 30.0
    safe_a = np.where(small, a, 0.0)
    direct = sp_pos + np.exp(safe_a) * sp_neg
    ea = np.exp(np.minimum(-a, 0.0))
    asym = sp_pos + 1.0 - 0.5 * ea + ea * ea / 3.0
    return np.where(small, direct, asym)


def _check_binary(z: np.ndarray, family: FirstStageFamily):
    if not np.all((z == 0.0) | (z == 1.0)):
        raise ValueError(
            f"{family.value} control function requires z in {{0, 1}}; "
            "got other values")


def control_values(family, gamma, w_design, z) -> np.ndarray:
    """Vectorized control function over a sample.

    ``w_design`` has rows (1, x_tilde, w_tilde); ``gamma`` has length m+2.
    Linear: residual z - w'gamma.  Probit/logit: the conditional mean of the
    latent error given the observed side of the threshold, evaluated in
    log space so large indices do not overflow.
    """
    family = FirstStageFamily.parse(family)
    gamma = np.asarray(gamma, dtype=float)
    w_design = np.asarray(w_design, dtype=float)
    z = np.asarray(z, dtype=float)
    if gamma.size != w_design.shape[1]:
        raise ValueError(
            f"gamma has length {gamma.size} but the design has "
            f"{w_design.shape[1]} columns (expected m+2 ordering (1, x, w))")
    index = w_design @ gamma
    if family is FirstStageFamily.LINEAR:
        return z - index
    _check_binary(z, family)
    if family is FirstStageFamily.PROBIT:
        tail = _normal_tail_mean
    else:
        tail = _logistic_tail_mean
    # z=1 observed nu < index, z=0 observed nu > index;
    # E[nu | nu < a] = -E[nu | nu > -a] by symmetry of both error laws.
    return np.where(z == 1.0, -tail(-index), tail(index))


def control_function(family, gamma, obs: Observation) -> float:
    """Control-function value for a single observation."""
    w_row = np.concatenate([[1.0], obs.x_tilde, [obs.w_tilde]])[None, :]
    return float(control_values(family, gamma, w_row, np.array([obs.z]))[0])


# ---------------------------------------------------------------------------
# Likelihood
# ---------------------------------------------------------------------------

def loglik_terms(y, delta, x_design, z, v, beta_T, alpha_T, lambda_T,
                 beta_C, alpha_C, lambda_C, sigma_T, sigma_C, rho) -> np.ndarray:
    """Per-observation log sub-density of (y, delta), vectorized.

    For an event the contribution is
    ``log{ sigma_T^-1 * [1 - Phi((b_C - rho (sigma_C/sigma_T) b_T) /
    (sigma_C sqrt(1-rho^2)))] * phi(b_T/sigma_T) }`` and symmetrically with
    T and C swapped for a censoring.  The survivor factor is evaluated as
    ``log_norm_cdf`` of the negated argument so tails never underflow.
    """
    b_t = y - x_design @ beta_T - alpha_T * z - lambda_T * v
    b_c = y - x_design @ beta_C - alpha_C * z - lambda_C * v
    s = math.sqrt(1.0 - rho * rho)
    zt = b_t / sigma_T
    zc = b_c / sigma_C
    lp_event = (-math.log(sigma_T) - _LOG_SQRT_2PI - 0.5 * zt * zt
                + log_norm_cdf(-(zc - rho * zt) / s))
    lp_cens = (-math.log(sigma_C) - _LOG_SQRT_2PI - 0.5 * zc * zc
               + log_norm_cdf(-(zt - rho * zc) / s))
    return np.where(delta == 1, lp_event, lp_cens)


def _obs_inputs(obs: Observation):
    x_row = np.concatenate([[1.0], obs.x_tilde])[None, :]
    return (np.array([obs.y]), np.array([obs.delta]), x_row,
            np.array([obs.z]))


def residuals(theta: ThetaParams, gamma, family, obs: Observation):
    """Location residuals (b_T, b_C) of one observation, control function
    included."""
    v = control_function(family, gamma, obs)
    x = np.concatenate([[1.0], obs.x_tilde])
    b_t = obs.y - x @ theta.beta_T - theta.alpha_T * obs.z - theta.lambda_T * v
    b_c = obs.y - x @ theta.beta_C - theta.alpha_C * obs.z - theta.lambda_C * v
    return float(b_t), float(b_c)


def log_subdensity(theta: ThetaParams, gamma, family, obs: Observation) -> float:
    """Log sub-density of (y, delta) for one observation."""
    y, delta, x_row, z = _obs_inputs(obs)
    v = control_values(family, gamma,
                       np.concatenate([x_row[0], [obs.w_tilde]])[None, :], z)
    out = loglik_terms(y, delta, x_row, z, v,
                       theta.beta_T, theta.alpha_T, theta.lambda_T,
                       theta.beta_C, theta.alpha_C, theta.lambda_C,
                       theta.sigma_T, theta.sigma_C, theta.rho)
    return float(out[0])


def log_likelihood(theta: ThetaParams, gamma, family,
                   data: ObservationSet) -> float:
    """Mean per-observation log sub-density over the sample.

    The 1/n normalization keeps optimizer tolerances independent of the
    sample size.

    Raises
    ------
    ValueError
        If any observation produces a non-finite term (the message names the
        first offending index).
    """
    v = control_values(family, gamma, data.w_design, data.z)
    terms = loglik_terms(data.y, data.delta, data.x_design, data.z, v,
                         theta.beta_T, theta.alpha_T, theta.lambda_T,
                         theta.beta_C, theta.alpha_C, theta.lambda_C,
                         theta.sigma_T, theta.sigma_C, theta.rho)
    bad = ~np.isfinite(terms)
    if bad.any():
        idx = int(np.argmax(bad))
        raise ValueError(f"non-finite log sub-density at observation {idx}")
    return float(np.mean(terms))


def conditional_cdf_Y(theta: ThetaParams, gamma, family, obs: Observation,
                      y: float) -> float:
    """Conditional distribution function of the follow-up time at ``y``:
    ``Phi(b_T/sigma_T) + Phi(b_C/sigma_C) - Phi2(b_T/sigma_T, b_C/sigma_C; rho)``
    with residuals evaluated at ``y``.  Diagnostic use only."""
    v = control_function(family, gamma, obs)
    x = np.concatenate([[1.0], obs.x_tilde])
    b_t = y - x @ theta.beta_T - theta.alpha_T * obs.z - theta.lambda_T * v
    b_c = y - x @ theta.beta_C - theta.alpha_C * obs.z - theta.lambda_C * v
    zt = float(b_t) / theta.sigma_T
    zc = float(b_c) / theta.sigma_C
    val = norm_cdf(zt) + norm_cdf(zc) - binorm_cdf(zt, zc, theta.rho)
    return min(1.0, max(0.0, float(val)))
