"""Two-step estimation with first-stage-corrected standard errors.

The first stage recovers the reduced-form coefficients gamma that define the
control function; the second stage maximizes the joint Gaussian likelihood of
(y, delta) holding gamma fixed.  Because the second stage runs on a generated
regressor, the asymptotic covariance of theta-hat is assembled as a stacked
GMM sandwich whose meat augments each score with a first-stage propagation
term.  Three benchmark estimators share the machinery: ``naive`` (no control
function), ``independent`` (correlation pinned at zero) and ``oracle``
(control values supplied, no first stage).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np
from scipy.special import expit, ndtri

from .model import (
    FirstStageFamily,
    ObservationSet,
    ThetaParams,
    control_values,
    loglik_terms,
)
from .numerics import (
    DiffConfig,
    OptimConfig,
    SingularMatrixError,
    invert,
    log_norm_cdf,
    minimize,
    norm_cdf,
    richardson_gradient,
    richardson_hessian,
    richardson_jacobian,
    solve,
)

__all__ = [
    "EstimationError",
    "FirstStageFit",
    "FitResult",
    "fit_first_stage",
    "fit_two_step",
    "fit_naive",
    "fit_independent",
    "fit_oracle",
    "sandwich_covariance",
    "confidence_intervals",
    "VARIANTS",
]

VARIANTS = ("two_step", "naive", "independent", "oracle")

#: Sup-norm bound the mean first-stage moment gradient must satisfy at the
#: reported gamma-hat (first-order condition of the extremum step).
_FIRST_ORDER_TOL = 1e-6


class EstimationError(RuntimeError):
    """Estimation could not proceed (bad design, separation, boundary fit)."""


def normalize_variant(value: str) -> str:
    name = str(value).strip().lower().replace("-", "_")
    if name == "twostep":
        name = "two_step"
    if name not in VARIANTS:
        raise ValueError(f"unknown estimator variant {value!r}; "
                         f"expected one of {list(VARIANTS)}")
    return name


# ---------------------------------------------------------------------------
# Parameter layout per estimator variant
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class _Layout:
    """Packing order of the free parameters for one estimator variant:
    beta_T, alpha_T, (lambda_T), beta_C, alpha_C, (lambda_C), sigma_T,
    sigma_C, (rho)."""

    m: int
    has_lambda: bool
    has_rho: bool

    @classmethod
    def for_variant(cls, m: int, variant: str) -> "_Layout":
        variant = normalize_variant(variant)
        return cls(m=m, has_lambda=variant != "naive",
                   has_rho=variant != "independent")

    @property
    def size(self) -> int:
        return 2 * (self.m + 1) + 2 + (2 if self.has_lambda else 0) \
            + 2 + (1 if self.has_rho else 0)

    @property
    def sigma_indices(self):
        base = self.size - (3 if self.has_rho else 2)
        return (base, base + 1)

    @property
    def rho_index(self):
        return self.size - 1 if self.has_rho else None

    def pack(self, theta: ThetaParams) -> np.ndarray:
        parts = [theta.beta_T, [theta.alpha_T]]
        if self.has_lambda:
            parts.append([theta.lambda_T])
        parts += [theta.beta_C, [theta.alpha_C]]
        if self.has_lambda:
            parts.append([theta.lambda_C])
        parts.append([theta.sigma_T, theta.sigma_C])
        if self.has_rho:
            parts.append([theta.rho])
        return np.concatenate([np.atleast_1d(p) for p in parts]).astype(float)

    def split(self, vec: np.ndarray):
        k = self.m + 1
        pos = 0
        beta_t = vec[pos:pos + k]
        pos += k
        alpha_t = vec[pos]
        pos += 1
        lam_t = 0.0
        if self.has_lambda:
            lam_t = vec[pos]
            pos += 1
        beta_c = vec[pos:pos + k]
        pos += k
        alpha_c = vec[pos]
        pos += 1
        lam_c = 0.0
        if self.has_lambda:
            lam_c = vec[pos]
            pos += 1
        sigma_t = vec[pos]
        sigma_c = vec[pos + 1]
        rho = vec[pos + 2] if self.has_rho else 0.0
        return beta_t, alpha_t, lam_t, beta_c, alpha_c, lam_c, sigma_t, sigma_c, rho

    def unpack(self, vec: np.ndarray) -> ThetaParams:
        b_t, a_t, l_t, b_c, a_c, l_c, s_t, s_c, rho = self.split(np.asarray(vec, float))
        return ThetaParams(beta_T=b_t, alpha_T=a_t, lambda_T=l_t,
                           beta_C=b_c, alpha_C=a_c, lambda_C=l_c,
                           sigma_T=s_t, sigma_C=s_c, rho=rho)

    def to_unconstrained(self, vec: np.ndarray) -> np.ndarray:
        u = np.asarray(vec, dtype=float).copy()
        i, j = self.sigma_indices
        u[i] = math.log(u[i])
        u[j] = math.log(u[j])
        if self.has_rho:
            u[self.rho_index] = math.atanh(u[self.rho_index])
        return u

    def to_natural(self, u: np.ndarray) -> np.ndarray:
        vec = np.asarray(u, dtype=float).copy()
        i, j = self.sigma_indices
        vec[i] = math.exp(vec[i])
        vec[j] = math.exp(vec[j])
        if self.has_rho:
            vec[self.rho_index] = math.tanh(vec[self.rho_index])
        return vec

    def labels(self) -> list:
        """Display labels (pretty form) for the free parameters."""
        full = ThetaParams.labels(self.m)
        return [full[i] for i in self._full_indices()]

    def names(self) -> list:
        """ASCII identifiers for the free parameters."""
        k = self.m + 1
        full = [f"beta_T_{j}" for j in range(k)] + ["alpha_T", "lambda_T"]
        full += [f"beta_C_{j}" for j in range(k)] + ["alpha_C", "lambda_C"]
        full += ["sigma_T", "sigma_C", "rho"]
        return [full[i] for i in self._full_indices()]

    def _full_indices(self) -> list:
        k = self.m + 1
        idx = list(range(k + 1))                     # beta_T, alpha_T
        if self.has_lambda:
            idx.append(k + 1)                        # lambda_T
        idx += list(range(k + 2, 2 * k + 3))         # beta_C, alpha_C
        if self.has_lambda:
            idx.append(2 * k + 3)                    # lambda_C
        idx += [2 * k + 4, 2 * k + 5]                # sigmas
        if self.has_rho:
            idx.append(2 * k + 6)                    # rho
        return idx


# ---------------------------------------------------------------------------
# Result containers
# ---------------------------------------------------------------------------

@dataclass(eq=False)
class FirstStageFit:
    """First-stage solution: gamma-hat, per-observation moment gradients
    h_m(w_i, z_i, gamma-hat) and their mean Jacobian M-hat."""

    family: FirstStageFamily
    gamma_hat: np.ndarray
    moment_gradients: np.ndarray
    M_hat: np.ndarray


@dataclass(eq=False)
class FitResult:
    """Second-stage point estimates with sandwich inference.

    ``covariance`` is the asymptotic covariance of sqrt(n)(theta-hat - theta),
    so standard errors are ``sqrt(diag(covariance) / n)``.  For the corrected
    variants ``covariance_nocorr`` additionally stores the same sandwich with
    the first-stage propagation term dropped (diagnostic only).  ``loglik`` is
    the mean per-observation log-likelihood at the optimum.
    """

    variant: str
    theta_hat: ThetaParams
    loglik: float
    converged: bool
    iterations: int
    n: int
    level: float
    gamma_stage: Optional[FirstStageFit] = None
    covariance: Optional[np.ndarray] = None
    covariance_nocorr: Optional[np.ndarray] = None
    std_errors: Optional[np.ndarray] = None
    ci_lower: Optional[np.ndarray] = None
    ci_upper: Optional[np.ndarray] = None
    p_values: Optional[np.ndarray] = None

    @property
    def layout(self) -> _Layout:
        return _Layout.for_variant(self.theta_hat.m, self.variant)

    @property
    def estimates(self) -> np.ndarray:
        """Free parameter vector in packing order."""
        return self.layout.pack(self.theta_hat)

    @property
    def param_labels(self) -> list:
        return self.layout.labels()

    @property
    def param_names(self) -> list:
        return self.layout.names()


# ---------------------------------------------------------------------------
# First stage
# ---------------------------------------------------------------------------

def _first_stage_scores(family: FirstStageFamily, gamma, w_design, z) -> np.ndarray:
    """Per-observation gradient of the first-stage objective m(w, z, gamma)."""
    gamma = np.asarray(gamma, dtype=float)
    index = w_design @ gamma
    if family is FirstStageFamily.LINEAR:
        weight = 2.0 * (z - index)
    elif family is FirstStageFamily.PROBIT:
        log_pdf = -0.5 * index * index - 0.5 * math.log(2.0 * math.pi)
        mills_pos = np.exp(log_pdf - log_norm_cdf(index))
        mills_neg = np.exp(log_pdf - log_norm_cdf(-index))
        weight = z * mills_pos - (1.0 - z) * mills_neg
    else:
        weight = z - expit(index)
    return weight[:, None] * w_design


def fit_first_stage(family, data: ObservationSet,
                    optim_cfg: OptimConfig | None = None,
                    diff_cfg: DiffConfig | None = None) -> FirstStageFit:
    """Estimate the reduced-form coefficients gamma.

    Linear family: closed-form least squares of z on (1, x, w).  Probit/logit:
    maximum likelihood via quasi-Newton minimization of the (convex) negative
    log-likelihood, finished with Newton steps on the analytic score so the
    first-order condition holds to ~1e-11.

    Raises
    ------
    EstimationError
        For a rank-deficient design, a non-binary or degenerate z under
        probit/logit, or an estimate diverging as under perfect separation.
    """
    family = FirstStageFamily.parse(family)
    diff_cfg = diff_cfg or DiffConfig()
    w_design = data.w_design
    z = data.z
    q = w_design.shape[1]
    if np.linalg.matrix_rank(w_design) < q:
        raise EstimationError(
            "first-stage design is rank deficient: the covariance of "
            "(x_tilde, w_tilde) must be full rank")

    if family is FirstStageFamily.LINEAR:
        gamma, *_ = np.linalg.lstsq(w_design, z, rcond=None)
    else:
        if not np.all((z == 0.0) | (z == 1.0)):
            raise EstimationError(
                f"{family.value} first stage requires a binary z column")
        if z.min() == z.max():
            raise EstimationError(
                f"{family.value} first stage requires both z=0 and z=1 records")

        if family is FirstStageFamily.PROBIT:
            def neg(g):
                a = w_design @ g
                return -float(np.mean(z * log_norm_cdf(a)
                                      + (1.0 - z) * log_norm_cdf(-a)))
        else:
            def neg(g):
                a = w_design @ g
                return -float(np.mean(z * a - np.logaddexp(0.0, a)))

        res = minimize(neg, np.zeros(q),
                       optim_cfg or OptimConfig(method="quasi-newton"),
                       diff_cfg)
        gamma = res.x

        def score_mean(g):
            return _first_stage_scores(family, g, w_design, z).mean(axis=0)

        for _ in range(25):
            g_val = score_mean(gamma)
            if float(np.max(np.abs(g_val))) <= 1e-11:
                break
            try:
                jac = richardson_jacobian(score_mean, gamma, diff_cfg)
                gamma = gamma - solve(jac, g_val, role="first-stage M")
            except SingularMatrixError:
                break  # flat likelihood; the separation check below decides
        index = w_design @ gamma
        separated = bool(np.all(np.where(z == 1.0, index > 0.0, index < 0.0)))
        if separated or float(np.linalg.norm(gamma)) > 1e3:
            # A finite MLE always misclassifies at least one record; a
            # perfectly classifying index means the optimum is at infinity.
            raise EstimationError(
                f"{family.value} first stage has no finite optimum "
                "(perfect separation)")

    scores = _first_stage_scores(family, gamma, w_design, z)
    mean_score = scores.mean(axis=0)
    if float(np.max(np.abs(mean_score))) > _FIRST_ORDER_TOL:
        raise EstimationError(
            "first-stage first-order condition violated: mean moment "
            f"gradient sup-norm {np.max(np.abs(mean_score)):.2e} > "
            f"{_FIRST_ORDER_TOL:g}")
    m_hat = richardson_jacobian(
        lambda g: _first_stage_scores(family, g, w_design, z).mean(axis=0),
        gamma, diff_cfg)
    invert(m_hat, role="first-stage M")  # enforce invertibility up front
    return FirstStageFit(family=family, gamma_hat=np.asarray(gamma, float),
                         moment_gradients=scores, M_hat=m_hat)


# ---------------------------------------------------------------------------
# Second stage
# ---------------------------------------------------------------------------

def _starting_theta(data: ObservationSet, v: np.ndarray,
                    layout: _Layout) -> ThetaParams:
    """Least-squares starting values: regress y on (1, x, z[, v]), share the
    coefficients and residual scale between the two risks, start rho at 0."""
    cols = [data.x_design, data.z[:, None]]
    if layout.has_lambda:
        cols.append(v[:, None])
    design = np.hstack(cols)
    coef, *_ = np.linalg.lstsq(design, data.y, rcond=None)
    resid = data.y - design @ coef
    dof = max(data.n - design.shape[1], 1)
    sigma0 = max(float(np.sqrt(resid @ resid / dof)), 1e-3)
    k = data.m + 1
    lam0 = float(coef[k + 1]) if layout.has_lambda else 0.0
    return ThetaParams(
        beta_T=coef[:k].copy(), alpha_T=float(coef[k]), lambda_T=lam0,
        beta_C=coef[:k].copy(), alpha_C=float(coef[k]), lambda_C=lam0,
        sigma_T=sigma0, sigma_C=sigma0, rho=0.0)


def _terms_from_vec(vec: np.ndarray, layout: _Layout, data: ObservationSet,
                    v: np.ndarray) -> np.ndarray:
    b_t, a_t, l_t, b_c, a_c, l_c, s_t, s_c, rho = layout.split(vec)
    return loglik_terms(data.y, data.delta, data.x_design, data.z, v,
                        b_t, a_t, l_t, b_c, a_c, l_c, s_t, s_c, rho)


def _boundary_safe_steps(vec: np.ndarray, layout: _Layout,
                         fraction: float) -> np.ndarray:
    """Per-coordinate differentiation steps capped so probes never leave the
    natural parameter space (sigma > 0, |rho| < 1)."""
    steps = fraction * np.maximum(1.0, np.abs(vec))
    for idx in layout.sigma_indices:
        steps[idx] = min(steps[idx], 0.4 * vec[idx])
    if layout.has_rho:
        idx = layout.rho_index
        steps[idx] = min(steps[idx], 0.4 * (1.0 - abs(vec[idx])))
    return steps


def _sandwich_from_parts(vec_hat: np.ndarray, layout: _Layout,
                         data: ObservationSet, v_hat: np.ndarray,
                         family: FirstStageFamily | None,
                         first_stage: FirstStageFit | None,
                         diff_cfg: DiffConfig, with_correction: bool):
    """Assemble the sandwich covariance at the natural-scale solution.

    Returns ``(corrected_or_plain, plain)`` where the second entry is the
    no-correction diagnostic (identical object when no correction applies).
    """
    if layout.has_rho:
        rho_hat = vec_hat[layout.rho_index]
        if abs(math.atanh(rho_hat)) >= 18.0:
            raise EstimationError(
                f"rho-hat={rho_hat!r} is at the boundary of (-1, 1); the "
                "sandwich covariance is not defined there")
    n = data.n
    steps1 = _boundary_safe_steps(vec_hat, layout,
                                  diff_cfg.initial_step_fraction)
    steps2 = _boundary_safe_steps(vec_hat, layout,
                                  diff_cfg.initial_step_fraction ** 0.25)

    scores = richardson_jacobian(
        lambda t: _terms_from_vec(t, layout, data, v_hat), vec_hat, diff_cfg,
        steps=steps1)
    hess = richardson_hessian(
        lambda t: float(np.mean(_terms_from_vec(t, layout, data, v_hat))),
        vec_hat, diff_cfg, steps=steps2)
    h_inv = invert(hess, role="Hessian")

    meat_plain = scores.T @ scores / n
    cov_plain = h_inv @ meat_plain @ h_inv.T
    cov_plain = 0.5 * (cov_plain + cov_plain.T)
    if not (with_correction and first_stage is not None):
        return cov_plain, cov_plain

    m_inv = invert(first_stage.M_hat, role="first-stage M")
    psi = -first_stage.moment_gradients @ m_inv.T

    def theta_grad(gamma):
        v_loc = control_values(family, gamma, data.w_design, data.z)
        return richardson_gradient(
            lambda t: float(np.mean(_terms_from_vec(t, layout, data, v_loc))),
            vec_hat, diff_cfg, steps=steps1)

    h_gamma = richardson_jacobian(theta_grad, first_stage.gamma_hat, diff_cfg)
    adjusted = scores + psi @ h_gamma.T
    meat = adjusted.T @ adjusted / n
    cov = h_inv @ meat @ h_inv.T
    return 0.5 * (cov + cov.T), cov_plain


def sandwich_covariance(theta: ThetaParams, data: ObservationSet, *,
                        variant: str = "two_step",
                        family=None,
                        first_stage: FirstStageFit | None = None,
                        v: np.ndarray | None = None,
                        diff_cfg: DiffConfig | None = None,
                        first_stage_correction: bool = True) -> np.ndarray:
    """Asymptotic covariance of sqrt(n)(theta-hat - theta) at ``theta``.

    Scores, the Hessian and the cross-Jacobian with respect to gamma are all
    taken numerically (Richardson extrapolation) on the natural parameter
    scale.  With ``first_stage`` present and ``first_stage_correction`` true,
    each score is augmented with the propagated first-stage influence
    ``H_gamma Psi_i`` before the outer product is formed.
    """
    variant = normalize_variant(variant)
    diff_cfg = diff_cfg or DiffConfig()
    layout = _Layout.for_variant(theta.m, variant)
    if v is None:
        if layout.has_lambda and first_stage is not None:
            fam = FirstStageFamily.parse(family) if family is not None \
                else first_stage.family
            v = control_values(fam, first_stage.gamma_hat,
                               data.w_design, data.z)
        else:
            v = np.zeros(data.n)
    fam = FirstStageFamily.parse(family) if family is not None else (
        first_stage.family if first_stage is not None else None)
    cov, _ = _sandwich_from_parts(
        layout.pack(theta), layout, data, np.asarray(v, float), fam,
        first_stage, diff_cfg,
        with_correction=first_stage_correction and variant in ("two_step",
                                                               "independent"))
    return cov


def _fit_variant(data: ObservationSet, variant: str, *,
                 family: FirstStageFamily | None = None,
                 first_stage: FirstStageFit | None = None,
                 v_fixed: np.ndarray | None = None,
                 optim_cfg: OptimConfig | None = None,
                 diff_cfg: DiffConfig | None = None,
                 level: float = 0.95,
                 theta0: ThetaParams | None = None,
                 compute_covariance: bool = True) -> FitResult:
    variant = normalize_variant(variant)
    if not data.has_both_outcomes():
        raise EstimationError(
            "sample must contain at least one event (delta=1) and one "
            "censoring (delta=0) before the joint likelihood can be fit")
    optim_cfg = optim_cfg or OptimConfig()
    diff_cfg = diff_cfg or DiffConfig()
    layout = _Layout.for_variant(data.m, variant)

    if v_fixed is not None:
        v = np.asarray(v_fixed, dtype=float)
        if v.shape != (data.n,):
            raise ValueError(f"control values must have shape ({data.n},)")
    elif layout.has_lambda and first_stage is not None:
        v = control_values(first_stage.family, first_stage.gamma_hat,
                           data.w_design, data.z)
    else:
        v = np.zeros(data.n)

    if theta0 is None:
        theta0 = _starting_theta(data, v, layout)
    u0 = layout.to_unconstrained(layout.pack(theta0))

    def neg(u):
        return -float(np.mean(_terms_from_vec(layout.to_natural(u),
                                              layout, data, v)))

    res = minimize(neg, u0, optim_cfg, diff_cfg)
    vec_hat = layout.to_natural(res.x)
    theta_hat = layout.unpack(vec_hat)

    fit = FitResult(variant=variant, theta_hat=theta_hat, loglik=-res.value,
                    converged=res.converged, iterations=res.iterations,
                    n=data.n, level=level, gamma_stage=first_stage)
    if not (res.converged and compute_covariance):
        return fit
    with_corr = variant in ("two_step", "independent")
    cov, cov_plain = _sandwich_from_parts(
        vec_hat, layout, data, v,
        first_stage.family if first_stage is not None else family,
        first_stage, diff_cfg, with_correction=with_corr)
    fit.covariance = cov
    fit.covariance_nocorr = cov_plain if with_corr else None
    return confidence_intervals(fit, level)


def fit_two_step(family, data: ObservationSet, *,
                 optim_cfg: OptimConfig | None = None,
                 diff_cfg: DiffConfig | None = None,
                 level: float = 0.95,
                 theta0: ThetaParams | None = None,
                 first_stage: FirstStageFit | None = None,
                 compute_covariance: bool = True) -> FitResult:
    """Two-step estimator: fit gamma, build the control values, then maximize
    the joint Gaussian likelihood over the full theta (sigma on log scale,
    rho on the Fisher-z scale during optimization)."""
    family = FirstStageFamily.parse(family)
    fs = first_stage or fit_first_stage(family, data, optim_cfg, diff_cfg)
    return _fit_variant(data, "two_step", family=family, first_stage=fs,
                        optim_cfg=optim_cfg, diff_cfg=diff_cfg, level=level,
                        theta0=theta0, compute_covariance=compute_covariance)


def fit_naive(data: ObservationSet, *,
              optim_cfg: OptimConfig | None = None,
              diff_cfg: DiffConfig | None = None,
              level: float = 0.95,
              theta0: ThetaParams | None = None,
              compute_covariance: bool = True) -> FitResult:
    """Benchmark that ignores confounding: no control function, lambda pinned
    at zero, plain (uncorrected) sandwich covariance."""
    return _fit_variant(data, "naive", optim_cfg=optim_cfg,
                        diff_cfg=diff_cfg, level=level, theta0=theta0,
                        compute_covariance=compute_covariance)


def fit_independent(family, data: ObservationSet, *,
                    optim_cfg: OptimConfig | None = None,
                    diff_cfg: DiffConfig | None = None,
                    level: float = 0.95,
                    theta0: ThetaParams | None = None,
                    first_stage: FirstStageFit | None = None,
                    compute_covariance: bool = True) -> FitResult:
    """Benchmark that assumes the two risks are independent: rho frozen at
    zero.  The control function is still estimated, so the sandwich keeps the
    first-stage correction."""
    family = FirstStageFamily.parse(family)
    fs = first_stage or fit_first_stage(family, data, optim_cfg, diff_cfg)
    return _fit_variant(data, "independent", family=family, first_stage=fs,
                        optim_cfg=optim_cfg, diff_cfg=diff_cfg, level=level,
                        theta0=theta0, compute_covariance=compute_covariance)


def fit_oracle(data: ObservationSet, v, *,
               optim_cfg: OptimConfig | None = None,
               diff_cfg: DiffConfig | None = None,
               level: float = 0.95,
               theta0: ThetaParams | None = None,
               compute_covariance: bool = True) -> FitResult:
    """Benchmark that treats the control values as observed: the supplied
    ``v`` column enters the likelihood directly and the covariance is the
    plain sandwich with no first-stage term."""
    return _fit_variant(data, "oracle", v_fixed=v, optim_cfg=optim_cfg,
                        diff_cfg=diff_cfg, level=level, theta0=theta0,
                        compute_covariance=compute_covariance)


# ---------------------------------------------------------------------------
# Confidence intervals
# ---------------------------------------------------------------------------

def confidence_intervals(fit: FitResult, level: float) -> FitResult:
    """Wald intervals and p-values from the sandwich covariance.

    Coefficients use the natural scale.  The scale parameters use a log
    transform and rho a Fisher-z transform, with delta-method standard errors
    on the transformed scale, so the back-transformed bounds always respect
    sigma > 0 and |rho| < 1.  P-values are two-sided Wald tests on the same
    scale the interval is built on.
    """
    if not 0.0 < level < 1.0:
        raise ValueError(f"confidence level must lie in (0, 1), got {level}")
    if fit.covariance is None:
        raise ValueError("fit carries no covariance; cannot build intervals")
    layout = fit.layout
    est = fit.estimates
    se = np.sqrt(np.diag(fit.covariance) / fit.n)
    zq = float(ndtri(0.5 + level / 2.0))

    lower = np.empty_like(est)
    upper = np.empty_like(est)
    pvals = np.empty_like(est)
    sig_i, sig_j = layout.sigma_indices
    tiny = np.nextafter(0.0, 1.0)
    rho_max = np.nextafter(1.0, 0.0)
    for j in range(est.size):
        if j in (sig_i, sig_j):
            center = math.log(est[j])
            se_t = se[j] / est[j]
            fwd = lambda t: max(math.exp(t), tiny)
        elif layout.rho_index is not None and j == layout.rho_index:
            center = math.atanh(est[j])
            se_t = se[j] / (1.0 - est[j] ** 2)
            fwd = lambda t: min(max(math.tanh(t), -rho_max), rho_max)
        else:
            center = est[j]
            se_t = se[j]
            fwd = float
        lower[j] = fwd(center - zq * se_t)
        upper[j] = fwd(center + zq * se_t)
        if se_t > 0:
            pvals[j] = 2.0 * norm_cdf(-abs(center) / se_t)
        else:
            pvals[j] = 1.0 if center == 0.0 else 0.0
    return replace(fit, level=level, std_errors=se, ci_lower=lower,
                   ci_upper=upper, p_values=pvals)
