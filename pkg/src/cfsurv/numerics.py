"""Self-contained numerical kernel.

Provides the univariate and bivariate normal functions, Richardson-extrapolated
finite differences, small dense linear algebra and unconstrained minimization
that the estimation layer is built on.  Everything here is a pure function of
its inputs and safe to call from multiple threads.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy import optimize
from scipy.special import log_ndtr, ndtr

__all__ = [
    "DiffConfig",
    "OptimConfig",
    "MinimizeResult",
    "NonFiniteObjectiveError",
    "SingularMatrixError",
    "norm_pdf",
    "norm_cdf",
    "log_norm_cdf",
    "binorm_cdf",
    "richardson_gradient",
    "richardson_jacobian",
    "richardson_hessian",
    "minimize",
    "invert",
    "solve",
]

_LOG_SQRT_2PI = 0.5 * math.log(2.0 * math.pi)

#: Condition-number cutoff beyond which matrix inversion is refused.  Past this
#: point sandwich standard errors are numerically meaningless.
CONDITION_LIMIT = 1e12


class NonFiniteObjectiveError(RuntimeError):
    """An objective or derivative probe returned NaN/inf.

    Carries the offending point so callers can report where evaluation broke.
    """

    def __init__(self, point, value):
        self.point = np.atleast_1d(np.asarray(point, dtype=float))
        self.value = value
        super().__init__(
            f"non-finite objective value {value!r} at point {self.point.tolist()}"
        )


class SingularMatrixError(RuntimeError):
    """A matrix required by the estimator is singular or too ill-conditioned."""

    def __init__(self, role: str, detail: str):
        self.role = role
        super().__init__(f"{role}: {detail}")


@dataclass(frozen=True)
class DiffConfig:
    """Settings for Richardson-extrapolated numerical differentiation.

    ``initial_step_fraction`` is the relative size of the first central
    difference step (per coordinate the step is ``fraction * max(1, |x_j|)``);
    each further step shrinks by ``reduction_factor`` and the resulting
    sequence of ``richardson_iterations`` estimates is extrapolated to zero
    step size.  Second-derivative probes (Hessians) use the square root of
    ``initial_step_fraction`` instead, since second differences lose roughly
    twice as many digits to cancellation.
    """

    initial_step_fraction: float = 1e-4
    reduction_factor: float = 2.0
    richardson_iterations: int = 4

    def __post_init__(self):
        if not self.initial_step_fraction > 0:
            raise ValueError("initial_step_fraction must be positive")
        if not self.reduction_factor > 1:
            raise ValueError("reduction_factor must be > 1")
        if self.richardson_iterations < 1:
            raise ValueError("richardson_iterations must be >= 1")


@dataclass(frozen=True)
class OptimConfig:
    """Settings for unconstrained minimization."""

    rel_tolerance: float = 1e-8
    max_iterations: int = 10000
    method: str = "quasi-newton"  # or "derivative-free"

    def __post_init__(self):
        if not self.rel_tolerance > 0:
            raise ValueError("rel_tolerance must be positive")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")
        if self.method not in ("quasi-newton", "derivative-free"):
            raise ValueError(f"unknown method {self.method!r}")


@dataclass(frozen=True)
class MinimizeResult:
    x: np.ndarray
    value: float
    converged: bool
    iterations: int


# ---------------------------------------------------------------------------
# Normal distribution functions
# ---------------------------------------------------------------------------

def norm_pdf(x):
    """Standard normal density, ``(2*pi)**-0.5 * exp(-x**2 / 2)``."""
    x = np.asarray(x, dtype=float)
    out = np.exp(-0.5 * x * x - _LOG_SQRT_2PI)
    return float(out) if out.ndim == 0 else out


def norm_cdf(x):
    """Standard normal distribution function."""
    out = ndtr(np.asarray(x, dtype=float))
    return float(out) if np.ndim(out) == 0 else out


def log_norm_cdf(x):
    """``log(norm_cdf(x))``, finite and accurate far into the lower tail.

    Uses the complementary/asymptotic evaluation so that e.g. ``x = -40``
    yields about ``-804.6`` instead of ``-inf``.
    """
    out = log_ndtr(np.asarray(x, dtype=float))
    return float(out) if np.ndim(out) == 0 else out


def _log_norm_pdf(x):
    x = np.asarray(x, dtype=float)
    return -0.5 * x * x - _LOG_SQRT_2PI


# Gauss-Legendre abscissae/weights (half rules) used by the bivariate normal
# quadrature of Drezner & Wesolowsky as refined by Genz.
_GL_X6 = np.array([0.9324695142031522, 0.6612093864662647, 0.2386191860831970])
_GL_W6 = np.array([0.1713244923791705, 0.3607615730481384, 0.4679139345726904])
_GL_X12 = np.array(
    [0.9815606342467191, 0.9041172563704750, 0.7699026741943050,
     0.5873179542866171, 0.3678314989981802, 0.1252334085114692])
_GL_W12 = np.array(
    [0.04717533638651177, 0.1069393259953183, 0.1600783285433464,
     0.2031674267230659, 0.2334925365383547, 0.2491470458134029])
_GL_X20 = np.array(
    [0.9931285991850949, 0.9639719272779138, 0.9122344282513259,
     0.8391169718222188, 0.7463319064601508, 0.6360536807265150,
     0.5108670019508271, 0.3737060887154196, 0.2277858511416451,
     0.07652652113349733])
_GL_W20 = np.array(
    [0.01761400713915212, 0.04060142980038694, 0.06267204833410906,
     0.08327674157670475, 0.1019301198172404, 0.1181945319615184,
     0.1316886384491766, 0.1420961093183821, 0.1491729864726037,
     0.1527533871307259])


def _bvn_upper(h: float, k: float, r: float) -> float:
    """P(X > h, Y > k) for a standard bivariate normal with correlation r."""
    if abs(r) < 0.3:
        xg, wg = _GL_X6, _GL_W6
    elif abs(r) < 0.75:
        xg, wg = _GL_X12, _GL_W12
    else:
        xg, wg = _GL_X20, _GL_W20
    x = np.concatenate([1.0 - xg, 1.0 + xg])
    w = np.concatenate([wg, wg])
    tp = 2.0 * math.pi
    hk = h * k
    bvn = 0.0
    if abs(r) < 0.925:
        if r != 0.0:
            hs = 0.5 * (h * h + k * k)
            asr = math.asin(r) / 2.0
            sn = np.sin(asr * x)
            bvn = float(np.sum(w * np.exp((sn * hk - hs) / (1.0 - sn * sn))))
            bvn *= asr / tp
        bvn += float(ndtr(-h) * ndtr(-k))
    else:
        if r < 0.0:
            k = -k
            hk = -hk
        as_ = (1.0 - r) * (1.0 + r)
        a = math.sqrt(as_)
        bs = (h - k) ** 2
        c = (4.0 - hk) / 8.0
        d = (12.0 - hk) / 16.0
        asr = -0.5 * (bs / as_ + hk)
        if asr > -100.0:
            bvn = a * math.exp(asr) * (
                1.0 - c * (bs - as_) * (1.0 - d * bs / 5.0) / 3.0
                + c * d * as_ * as_ / 5.0)
        if -hk < 100.0:
            b = math.sqrt(bs)
            bvn -= math.exp(-0.5 * hk) * math.sqrt(tp) * float(ndtr(-b / a)) \
                * b * (1.0 - c * bs * (1.0 - d * bs / 5.0) / 3.0)
        a /= 2.0
        xs = (a * x) ** 2
        rs = np.sqrt(1.0 - xs)
        asr1 = -0.5 * (bs / xs + hk)
        mask = asr1 > -100.0
        ep = np.exp(-hk * (1.0 - rs) / (2.0 * (1.0 + rs))) / rs
        sp = 1.0 + c * xs * (1.0 + d * xs)
        term = np.where(mask, np.exp(np.where(mask, asr1, 0.0)) * (ep - sp), 0.0)
        bvn += a * float(np.sum(w * term))
        bvn = -bvn / tp
        if r > 0.0:
            bvn += float(ndtr(-max(h, k)))
        else:
            bvn = -bvn
            if k > h:
                if h < 0.0:
                    bvn += float(ndtr(k) - ndtr(h))
                else:
                    bvn += float(ndtr(-h) - ndtr(-k))
    return min(1.0, max(0.0, bvn))


def binorm_cdf(x: float, y: float, rho: float) -> float:
    """Rectangle probability P(X <= x, Y <= y) of a standard bivariate normal.

    Uses the Drezner-Wesolowsky/Genz Gauss-Legendre scheme, accurate to well
    below 1e-10 in absolute terms.  Infinite arguments reduce to the
    corresponding marginal.

    Raises
    ------
    ValueError
        If ``abs(rho) >= 1``.
    """
    if not abs(rho) < 1.0:
        raise ValueError(f"binorm_cdf requires |rho| < 1, got rho={rho}")
    x = float(x)
    y = float(y)
    if math.isnan(x) or math.isnan(y):
        raise ValueError("binorm_cdf arguments must not be NaN")
    if x == -math.inf or y == -math.inf:
        return 0.0
    if x == math.inf and y == math.inf:
        return 1.0
    if x == math.inf:
        return float(ndtr(y))
    if y == math.inf:
        return float(ndtr(x))
    return _bvn_upper(-x, -y, float(rho))


# ---------------------------------------------------------------------------
# Richardson-extrapolated differentiation
# ---------------------------------------------------------------------------

def _require_finite(value, point):
    arr = np.asarray(value, dtype=float)
    if not np.all(np.isfinite(arr)):
        raise NonFiniteObjectiveError(point, value)
    return arr


def _extrapolate(rows: Sequence[np.ndarray], v: float):
    """Collapse central-difference estimates at steps h, h/v, h/v^2, ... to
    the zero-step limit.  Each sweep removes the next even power of h."""
    vals = [np.asarray(r, dtype=float) for r in rows]
    fac = v * v
    while len(vals) > 1:
        vals = [(fac * vals[i + 1] - vals[i]) / (fac - 1.0)
                for i in range(len(vals) - 1)]
        fac *= v * v
    return vals[0]


def _initial_steps(x: np.ndarray, fraction: float, steps) -> np.ndarray:
    if steps is not None:
        steps = np.asarray(steps, dtype=float)
        if steps.shape != x.shape or not np.all(steps > 0):
            raise ValueError("steps must be positive and match x in length")
        return steps
    return fraction * np.maximum(1.0, np.abs(x))


def richardson_gradient(f: Callable, x, cfg: DiffConfig | None = None,
                        steps=None) -> np.ndarray:
    """Gradient of a scalar function by Richardson-extrapolated central
    differences.

    The step for coordinate j starts at
    ``cfg.initial_step_fraction * max(1, |x_j|)`` and shrinks by
    ``cfg.reduction_factor``; ``cfg.richardson_iterations`` estimates enter the
    extrapolation table.  Exact to roundoff for polynomials up to degree
    2*iterations - 1.  ``steps`` overrides the per-coordinate initial step
    (used by callers whose parameter space has nearby boundaries).

    Raises
    ------
    NonFiniteObjectiveError
        If ``f`` returns a non-finite value at any probe point.
    """
    cfg = cfg or DiffConfig()
    x = np.asarray(x, dtype=float)
    h0 = _initial_steps(x, cfg.initial_step_fraction, steps)
    grad = np.empty(x.size)
    for j in range(x.size):
        h = h0[j]
        diffs = []
        for _ in range(cfg.richardson_iterations):
            xp = x.copy()
            xp[j] += h
            xm = x.copy()
            xm[j] -= h
            fp = _require_finite(f(xp), xp)
            fm = _require_finite(f(xm), xm)
            diffs.append((fp - fm) / (2.0 * h))
            h /= cfg.reduction_factor
        grad[j] = _extrapolate(diffs, cfg.reduction_factor)
    return grad


def richardson_jacobian(f: Callable, x, cfg: DiffConfig | None = None,
                        steps=None) -> np.ndarray:
    """Jacobian of a vector-valued function, column by column, with the same
    step schedule as :func:`richardson_gradient`.  Output shape is
    ``(len(f(x)), len(x))``."""
    cfg = cfg or DiffConfig()
    x = np.asarray(x, dtype=float)
    h0 = _initial_steps(x, cfg.initial_step_fraction, steps)
    cols = []
    for j in range(x.size):
        h = h0[j]
        diffs = []
        for _ in range(cfg.richardson_iterations):
            xp = x.copy()
            xp[j] += h
            xm = x.copy()
            xm[j] -= h
            fp = _require_finite(f(xp), xp)
            fm = _require_finite(f(xm), xm)
            diffs.append((fp - fm) / (2.0 * h))
            h /= cfg.reduction_factor
        cols.append(np.atleast_1d(_extrapolate(diffs, cfg.reduction_factor)))
    return np.column_stack(cols)


def richardson_hessian(f: Callable, x, cfg: DiffConfig | None = None,
                       steps=None) -> np.ndarray:
    """Hessian of a scalar function by Richardson-extrapolated second central
    differences, returned symmetrized as ``(H + H.T) / 2``.

    Second differences lose twice as many digits to cancellation, so probes
    default to a relative step of ``cfg.initial_step_fraction ** 0.25`` (0.1
    under the default config).  This also keeps the roundoff floor low enough
    that an exactly singular Hessian is measured as such instead of hiding
    below the inversion condition limit.
    """
    cfg = cfg or DiffConfig()
    x = np.asarray(x, dtype=float)
    p = x.size
    h0 = _initial_steps(x, cfg.initial_step_fraction ** 0.25, steps)
    f0 = float(_require_finite(f(x), x))
    hess = np.empty((p, p))
    for j in range(p):
        h = h0[j]
        diffs = []
        for _ in range(cfg.richardson_iterations):
            xp = x.copy()
            xp[j] += h
            xm = x.copy()
            xm[j] -= h
            fp = float(_require_finite(f(xp), xp))
            fm = float(_require_finite(f(xm), xm))
            diffs.append((fp - 2.0 * f0 + fm) / (h * h))
            h /= cfg.reduction_factor
        hess[j, j] = _extrapolate(diffs, cfg.reduction_factor)
    for i in range(p):
        for j in range(i + 1, p):
            hi = h0[i]
            hj = h0[j]
            diffs = []
            for _ in range(cfg.richardson_iterations):
                xpp = x.copy()
                xpp[[i, j]] += [hi, hj]
                xpm = x.copy()
                xpm[[i, j]] += [hi, -hj]
                xmp = x.copy()
                xmp[[i, j]] += [-hi, hj]
                xmm = x.copy()
                xmm[[i, j]] += [-hi, -hj]
                vals = [float(_require_finite(f(pt), pt))
                        for pt in (xpp, xpm, xmp, xmm)]
                diffs.append((vals[0] - vals[1] - vals[2] + vals[3])
                             / (4.0 * hi * hj))
                hi /= cfg.reduction_factor
                hj /= cfg.reduction_factor
            hess[i, j] = hess[j, i] = _extrapolate(diffs, cfg.reduction_factor)
    return 0.5 * (hess + hess.T)


# ---------------------------------------------------------------------------
# Minimization
# ---------------------------------------------------------------------------

def minimize(f: Callable, x0, cfg: OptimConfig | None = None,
             diff_cfg: DiffConfig | None = None) -> MinimizeResult:
    """Unconstrained minimization of a smooth scalar function.

    ``method="quasi-newton"`` runs BFGS, ``"derivative-free"`` runs adaptive
    Nelder-Mead.  Convergence is declared from the spec contract, not the
    backend's own status: the Richardson gradient at the returned point must
    satisfy ``sup|g| <= 1e-5 * max(1, |value|)``.  If the first pass misses
    that bar, a polish pass (BFGS with Richardson gradients, or a tighter
    Nelder-Mead restart) is attempted within the iteration budget.  The
    returned point is the best objective value seen, so accepted iterates are
    non-increasing by construction.

    Raises
    ------
    NonFiniteObjectiveError
        If the objective evaluates to NaN/inf anywhere it is probed.
    """
    cfg = cfg or OptimConfig()
    diff_cfg = diff_cfg or DiffConfig()
    x0 = np.atleast_1d(np.asarray(x0, dtype=float))
    best = {"x": x0.copy(), "fun": math.inf}

    def fw(u):
        u = np.asarray(u, dtype=float)
        val = float(f(u))
        if not math.isfinite(val):
            raise NonFiniteObjectiveError(u, val)
        if val < best["fun"]:
            best["fun"] = val
            best["x"] = u.copy()
        return val

    fw(x0)
    scale = max(1.0, abs(best["fun"]))
    grad_tol = 1e-5

    def grad_ok():
        g = richardson_gradient(f, best["x"], diff_cfg)
        return float(np.max(np.abs(g))) <= grad_tol * max(1.0, abs(best["fun"]))

    total_nit = 0
    converged = False
    for attempt in range(3):
        remaining = cfg.max_iterations - total_nit
        if remaining <= 0:
            break
        if cfg.method == "derivative-free":
            opts = {
                "maxiter": remaining,
                "maxfev": 4 * remaining,
                "adaptive": True,
                "xatol": math.sqrt(cfg.rel_tolerance) if attempt == 0
                         else max(cfg.rel_tolerance, 1e-10),
                "fatol": cfg.rel_tolerance * scale if attempt == 0
                         else max(cfg.rel_tolerance ** 1.5, 1e-15) * scale,
            }
            res = optimize.minimize(fw, best["x"], method="Nelder-Mead",
                                    options=opts)
        else:
            if attempt == 0:
                # gtol below the FD noise floor: BFGS then runs until line
                # search stalls, which lands well inside the gradient contract.
                res = optimize.minimize(
                    fw, best["x"], method="BFGS",
                    options={"maxiter": remaining, "gtol": 1e-8 * scale})
            else:
                # FD noise floor reached: polish with accurate gradients.
                jac = lambda u: richardson_gradient(f, u, diff_cfg)
                res = optimize.minimize(
                    fw, best["x"], method="BFGS", jac=jac,
                    options={"maxiter": min(remaining, 200),
                             "gtol": 1e-7 * scale})
        total_nit += int(res.nit)
        if grad_ok():
            converged = True
            break
        if total_nit >= cfg.max_iterations:
            break
    return MinimizeResult(x=best["x"], value=best["fun"],
                          converged=converged, iterations=total_nit)


# ---------------------------------------------------------------------------
# Small dense linear algebra
# ---------------------------------------------------------------------------

def _check_invertible(a: np.ndarray, role: str) -> np.ndarray:
    a = np.asarray(a, dtype=float)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise SingularMatrixError(role, f"expected a square matrix, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise SingularMatrixError(role, "matrix contains non-finite entries")
    cond = np.linalg.cond(a)
    if not np.isfinite(cond) or cond > CONDITION_LIMIT:
        raise SingularMatrixError(
            role, f"singular or ill-conditioned (cond={cond:.3e} > {CONDITION_LIMIT:.0e})")
    return a


def invert(a, role: str = "matrix") -> np.ndarray:
    """Inverse of a well-conditioned square matrix.

    ``role`` names the matrix in error messages (e.g. "Hessian",
    "first-stage M") so failures point at the estimation step that broke.
    """
    a = _check_invertible(a, role)
    return np.linalg.solve(a, np.eye(a.shape[0]))


def solve(a, b, role: str = "matrix") -> np.ndarray:
    """Solve ``a @ x = b`` with the same conditioning contract as invert."""
    a = _check_invertible(a, role)
    return np.linalg.solve(a, np.asarray(b, dtype=float))
