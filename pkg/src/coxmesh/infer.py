"""Laplace-approximation inference.

The inner problem finds the conditional mode of the latent vector by damped
Newton iterations; the Gaussian approximation at the mode gives the latent
posterior and, through

    log p(y | psi) ~ -f(x_hat) + 1/2 log det P - 1/2 log det H(x_hat),

the approximate marginal likelihood that the outer optimizer maximizes over
the hyperparameters ``psi`` (empirical Bayes).
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import scipy.optimize as so
import scipy.sparse as sp

from .data import BEHAVIORS, SPECIES, behavior_index
from .geo import CovariateGrid
from .model import (
    HyperState,
    JointLGCP,
    LatentState,
    ModelError,
    hyper_from_vector,
    hyper_names,
    hyper_to_vector,
)
from .sparse import CholFactor, NotPositiveDefiniteError, factorize, sample_gmrf, solve

logger = logging.getLogger(__name__)

Z975 = 1.959963984540054


class InferenceError(RuntimeError):
    def __init__(self, component, message, trace=None):
        self.component = component
        self.trace = list(trace or [])
        super().__init__(f"[{component}] {message}")


# ---------------------------------------------------------------------------
# generic Laplace machinery
# ---------------------------------------------------------------------------


@dataclass
class NewtonResult:
    x: np.ndarray
    factor: CholFactor
    value: float
    grad_inf: float
    iterations: int
    trace: list = field(default_factory=list)


def newton_mode(fun: Callable, x0, tol: float = 1e-6, max_iter: int = 50, max_halvings: int = 30) -> NewtonResult:
    """Minimize a convex objective with Newton steps and step halving.

    ``fun(x, hessian)`` returns ``(value, gradient, hessian_or_None)``.
    The returned factor is of the Hessian at the final point.
    """
    x = np.array(x0, dtype=float)
    trace = []
    value, grad, H = fun(x, True)
    for it in range(max_iter + 1):
        ginf = float(np.max(np.abs(grad))) if grad.size else 0.0
        trace.append((it, value, ginf))
        try:
            F = factorize(H)
        except NotPositiveDefiniteError as exc:
            raise InferenceError("inner", f"Hessian not positive definite at pivot {exc.pivot}", trace) from None
        if ginf < tol:
            return NewtonResult(x, F, value, ginf, it, trace)
        if it == max_iter:
            break
        step = -F.solve(grad)
        slope = float(grad @ step)
        t = 1.0
        for _ in range(max_halvings + 1):
            xn = x + t * step
            try:
                vn, gn, _ = fun(xn, False)
            except (ModelError, FloatingPointError):
                vn, gn = np.inf, None
            if np.isfinite(vn):
                if vn <= value + 1e-4 * t * slope:
                    break
                # objective flat to rounding; accept if the gradient shrinks
                if abs(vn - value) <= 1e-12 * max(1.0, abs(value)) and np.max(np.abs(gn)) < ginf:
                    break
            t *= 0.5
        else:
            raise InferenceError("inner", "line search failed after step halving", trace)
        x = xn
        value, grad, H = fun(x, True)
    raise InferenceError("inner", f"Newton did not converge in {max_iter} iterations", trace)


@dataclass
class LaplaceProblem:
    """A latent Gaussian problem in negative-log-joint form.

    ``fun`` must include likelihood normalizing constants and ``0.5 x'Px``
    for a prior precision ``P`` with log-determinant ``prior_logdet``.
    """

    fun: Callable
    dim: int
    prior_logdet: float
    constant: float = 0.0


def laplace_log_marginal(problem: LaplaceProblem, x0=None, tol=1e-6, max_iter=50):
    """Return ``(log_marginal, NewtonResult)``."""
    x0 = np.zeros(problem.dim) if x0 is None else x0
    res = newton_mode(problem.fun, x0, tol=tol, max_iter=max_iter)
    lm = -res.value + 0.5 * problem.prior_logdet - 0.5 * res.factor.logdet + problem.constant
    return float(lm), res


# ---------------------------------------------------------------------------
# model-level operations
# ---------------------------------------------------------------------------


def model_problem(model: JointLGCP, hyper: HyperState) -> LaplaceProblem:
    prior = model.prior_precision(hyper)

    def fun(x, hessian=True):
        return model.objective(x, hyper, hessian=hessian, prior=prior)

    return LaplaceProblem(fun, model.layout.dim, prior[1])


def inner_mode(model: JointLGCP, hyper: HyperState, init=None, tol: float = 1e-6, max_iter: int = 50):
    """Conditional posterior mode of the latent vector and the factor of its precision."""
    prob = model_problem(model, hyper)
    res = newton_mode(prob.fun, np.zeros(prob.dim) if init is None else init, tol=tol, max_iter=max_iter)
    return LatentState(model.layout, res.x), res.factor


def log_marginal(model: JointLGCP, hyper: HyperState, init=None, tol: float = 1e-6):
    """Laplace approximation of ``log p(y | hyper)``; returns ``(value, NewtonResult)``."""
    return laplace_log_marginal(model_problem(model, hyper), init, tol=tol)


@dataclass
class FitOptions:
    optimizer: str = "nelder-mead"
    max_iter: int = 500
    xatol: float = 1e-4
    gtol: float = 1e-3
    inner_tol: float = 1e-6
    free: tuple | None = None
    initial_step: float = 0.3
    hyper_ci: bool = True
    ci_step: float = 1e-2
    bounds: dict | None = None

    @classmethod
    def from_dict(cls, d: dict) -> "FitOptions":
        from dataclasses import fields as _fields

        from .model import ConfigError

        known = {f.name for f in _fields(cls)}
        for k in d:
            if k not in known:
                raise ConfigError(f"inference.{k}")
        return cls(**d)


def default_bounds(model: JointLGCP) -> dict:
    mesh = model.data.mesh
    e = mesh.edges()
    lengths = np.linalg.norm(mesh.vertices[e[:, 0]] - mesh.vertices[e[:, 1]], axis=1)
    x0, y0, x1, y1 = model.data.domain.bounds
    diam = float(np.hypot(x1 - x0, y1 - y0))
    lo_h, hi_h = np.log(0.1 * float(np.median(lengths))), np.log(5.0 * diam)
    return {
        "theta1": (lo_h, hi_h),
        "theta2": (lo_h, hi_h),
        "theta3": (-4.0, 4.0),
        "theta4": (np.log(0.01), np.log(50.0)),
        "log_tau": (-6.0, 14.0),
        "log_size": (np.log(1e-2), np.log(1e5)),
        "rho": (-20.0, 20.0),
    }


def _bound_for(name, bounds):
    if name in bounds:
        return bounds[name]
    for prefix in ("log_tau", "log_size", "rho"):
        if name.startswith(prefix):
            return bounds[prefix]
    return (-np.inf, np.inf)


@dataclass(eq=False)
class ModelFit:
    """Result of empirical-Bayes Laplace inference."""

    model: JointLGCP
    hyper: HyperState
    mode: np.ndarray
    factor: CholFactor
    log_marginal: float
    converged: bool
    free_names: list
    trace: list = field(default_factory=list)
    hyper_cov: np.ndarray | None = None
    n_evals: int = 0
    inner_iterations: int = 0
    options: FitOptions = field(default_factory=FitOptions)
    _marginal_sd: np.ndarray | None = field(default=None, repr=False)
    _global_cov: np.ndarray | None = field(default=None, repr=False)

    @property
    def layout(self):
        return self.model.layout

    @property
    def latent(self) -> LatentState:
        return LatentState(self.model.layout, self.mode)

    @property
    def marginal_sd(self) -> np.ndarray:
        if self._marginal_sd is None:
            from .sparse import selected_inverse_diag

            self._marginal_sd = np.sqrt(selected_inverse_diag(self.factor))
        return self._marginal_sd

    @property
    def standardizers(self) -> dict:
        return self.model.data.standardizers

    def sample_latent(self, n: int, seed=None) -> np.ndarray:
        """Draws from the Gaussian approximation, shape ``(n, dim)``."""
        return sample_gmrf(self.factor, seed, size=n, mean=self.mode)

    def global_columns(self) -> np.ndarray:
        """Covariance columns of the non-field latent coordinates (``dim x p``)."""
        if self._global_cov is None:
            G = self.layout.global_indices
            E = np.zeros((self.layout.dim, G.size))
            E[G, np.arange(G.size)] = 1.0
            self._global_cov = solve(self.factor, E) if G.size else E
        return self._global_cov

    def predictor_moments(self, X) -> tuple[np.ndarray, np.ndarray]:
        """Posterior mean and variance of ``X @ latent`` for sparse design rows."""
        X = sp.csr_matrix(X)
        mean = X @ self.mode
        nf = self.layout.n_field
        G = self.layout.global_indices
        Xf = X[:, :nf]
        XG = X[:, nf:].toarray() if G.size else np.zeros((X.shape[0], 0))
        var = np.zeros(X.shape[0])
        if nf:
            S = self.factor.selected_inverse()[:nf, :nf]
            var += np.asarray((Xf @ S).multiply(Xf).sum(axis=1)).ravel()
        if G.size:
            Z = self.global_columns()
            cross = np.asarray(Xf @ Z[:nf]) if nf else 0.0
            var += 2.0 * np.einsum("ij,ij->i", cross, XG) if nf else 0.0
            var += np.einsum("ij,jk,ik->i", XG, Z[G], XG)
        return mean, np.maximum(var, 0.0)


class _Objective:
    """Negative log posterior of the hyperparameters with warm-started inner solves."""

    def __init__(self, model, base: HyperState, names, bounds, inner_tol):
        self.model = model
        self.base = base
        self.names = list(names)
        self.bounds = [_bound_for(n, bounds) for n in self.names]
        self.inner_tol = inner_tol
        self.x_last = np.zeros(model.layout.dim)
        self.n_evals = 0
        self.inner_iterations = 0
        self.best = (np.inf, None, None)

    def __call__(self, v):
        v = np.asarray(v, dtype=float)
        self.n_evals += 1
        excess = sum(max(lo - a, 0.0) + max(a - hi, 0.0) for a, (lo, hi) in zip(v, self.bounds))
        if excess > 0:
            return 1e10 * (1.0 + excess)
        hyper = hyper_from_vector(v, self.names, self.base)
        try:
            lm, res = log_marginal(self.model, hyper, init=self.x_last, tol=self.inner_tol)
        except (InferenceError, ModelError, NotPositiveDefiniteError, ValueError) as exc:
            logger.debug("hyper evaluation failed at %s: %s", v, exc)
            return 1e10
        self.inner_iterations += res.iterations
        self.x_last = res.x
        val = -(lm + self.model.log_hyperprior(hyper))
        if val < self.best[0]:
            self.best = (val, v.copy(), res)
        return val


def optimize_hyper(model: JointLGCP, init: HyperState | None = None, opts: FitOptions | None = None) -> ModelFit:
    """Maximize the Laplace marginal likelihood (times hyperpriors) over the hyperparameters."""
    opts = opts or FitOptions()
    init = (init or HyperState()).copy()
    names = hyper_names(model.spec)
    if opts.free is not None:
        unknown = set(opts.free) - set(names)
        if unknown:
            raise ValueError(f"unknown free hyperparameters {sorted(unknown)}")
        names = [n for n in names if n in opts.free]
    bounds = dict(default_bounds(model))
    bounds.update(opts.bounds or {})
    obj = _Objective(model, init, names, bounds, opts.inner_tol)
    v0 = hyper_to_vector(init, names)
    t0 = time.perf_counter()
    trace = []
    converged = True
    if names:
        f0 = obj(v0)
        if f0 >= 1e10:
            raise InferenceError("outer", "initial hyperparameters are infeasible")
        if opts.optimizer == "nelder-mead":
            simplex = np.vstack([v0] + [v0 + opts.initial_step * e for e in np.eye(len(v0))])

            def cb(xk):
                trace.append(float(obj.best[0]))

            res = so.minimize(
                obj, v0, method="Nelder-Mead", callback=cb,
                options=dict(initial_simplex=simplex, xatol=opts.xatol, fatol=np.inf,
                             maxiter=opts.max_iter, maxfev=20 * opts.max_iter, adaptive=len(v0) > 4),
            )
            converged = bool(res.success)
        elif opts.optimizer == "bfgs":
            res = so.minimize(
                obj, v0, method="BFGS", jac="3-point", callback=lambda xk: trace.append(float(obj.best[0])),
                options=dict(gtol=opts.gtol, maxiter=opts.max_iter),
            )
            converged = bool(res.success) or float(np.max(np.abs(res.jac))) < opts.gtol
        else:
            raise ValueError(f"unknown optimizer {opts.optimizer!r}")
        v_hat = obj.best[1]
    else:
        obj(v0)
        v_hat = v0
    hyper = hyper_from_vector(v_hat, names, init)
    lm, res = log_marginal(model, hyper, init=obj.best[2].x if obj.best[2] is not None else None, tol=opts.inner_tol)
    logger.info(
        "hyper optimisation: %d evaluations, %.1fs, log marginal %.4f, converged=%s",
        obj.n_evals, time.perf_counter() - t0, lm, converged,
    )
    fit = ModelFit(
        model, hyper, res.x, res.factor, lm, converged, names, trace,
        n_evals=obj.n_evals, inner_iterations=obj.inner_iterations, options=opts,
    )
    if opts.hyper_ci and names:
        fit.hyper_cov = hyper_covariance(fit, step=opts.ci_step)
    return fit


def fit_at(model: JointLGCP, hyper: HyperState, inner_tol: float = 1e-6, init=None) -> ModelFit:
    """Fit with hyperparameters held fixed (no outer optimisation)."""
    lm, res = log_marginal(model, hyper, init=init, tol=inner_tol)
    return ModelFit(model, hyper.copy(), res.x, res.factor, lm, True, [], inner_iterations=res.iterations)


def fit_from_mode(model: JointLGCP, hyper: HyperState, mode, free_names=(), hyper_cov=None,
                  converged: bool = True, options: FitOptions | None = None) -> ModelFit:
    """Rebuild a fit from a stored mode without re-running Newton iterations."""
    prob = model_problem(model, hyper)
    mode = np.asarray(mode, dtype=float)
    if mode.shape != (prob.dim,):
        raise InferenceError("restore", f"stored mode has length {mode.size}, model needs {prob.dim}")
    value, _, H = prob.fun(mode, True)
    F = factorize(H)
    lm = -value + 0.5 * prob.prior_logdet - 0.5 * F.logdet
    return ModelFit(model, hyper.copy(), mode, F, float(lm), converged, list(free_names),
                    hyper_cov=None if hyper_cov is None else np.asarray(hyper_cov, float),
                    options=options or FitOptions())


def hyper_covariance(fit: ModelFit, step: float = 1e-2) -> np.ndarray | None:
    """Inverse of the central-difference Hessian of the hyper objective at the optimum."""
    names = fit.free_names
    model = fit.model
    v0 = hyper_to_vector(fit.hyper, names)
    x0 = fit.mode

    def f(v):
        h = hyper_from_vector(v, names, fit.hyper)
        lm, _ = log_marginal(model, h, init=x0, tol=fit.options.inner_tol)
        return -(lm + model.log_hyperprior(h))

    k = len(v0)
    f0 = f(v0)
    H = np.zeros((k, k))
    try:
        fp = np.array([f(v0 + step * e) for e in np.eye(k)])
        fm = np.array([f(v0 - step * e) for e in np.eye(k)])
        for i in range(k):
            H[i, i] = (fp[i] - 2 * f0 + fm[i]) / step**2
            for j in range(i + 1, k):
                ei, ej = np.eye(k)[i] * step, np.eye(k)[j] * step
                fpp, fmm = f(v0 + ei + ej), f(v0 - ei - ej)
                H[i, j] = H[j, i] = (fpp - fp[i] - fp[j] + 2 * f0 - fm[i] - fm[j] + fmm) / (2 * step**2)
    except (InferenceError, ModelError, NotPositiveDefiniteError) as exc:
        logger.warning("hyper Hessian failed: %s", exc)
        return None
    w, V = np.linalg.eigh(0.5 * (H + H.T))
    if np.any(w <= 0):
        logger.warning("hyper Hessian not positive definite; clipping %d eigenvalue(s)", int(np.sum(w <= 0)))
        w = np.where(w > 0, w, np.inf)
    return (V / w) @ V.T


# ---------------------------------------------------------------------------
# reporting
# ---------------------------------------------------------------------------


_HYPER_DISPLAY = {
    "theta1": ("h_x", np.exp),
    "theta2": ("h_y", np.exp),
    "theta3": ("h_xy", np.tanh),
    "theta4": ("sigma", np.exp),
}


def _display(name):
    if name in _HYPER_DISPLAY:
        return _HYPER_DISPLAY[name]
    if name.startswith("log_tau_month_"):
        return f"Month effect precision ({name[14:].capitalize()})", np.exp
    if name.startswith("log_tau_year_"):
        return f"Year effect precision ({name[13:].capitalize()})", np.exp
    if name.startswith("log_size_"):
        return f"Size ({name[9:].capitalize()})", np.exp
    if name == "rho":
        return "Copy field scaling", lambda v: v
    if name.startswith("rho_"):
        return f"Copy field scaling ({name[4:].capitalize()})", lambda v: v
    return name, lambda v: v


def summaries(fit: ModelFit) -> list[dict]:
    """Posterior mean and 95% interval for fixed effects and hyperparameters.

    Latent rows use Gaussian marginals at the mode; hyperparameter rows use
    the delta method on the optimizer scale, mapped through the monotone
    transform to the reported scale.
    """
    rows = []
    lay = fit.layout
    sd = fit.marginal_sd
    for i, (name, kind) in enumerate(zip(lay.names, lay.kind)):
        j = lay.n_field + i
        m, s = float(fit.mode[j]), float(sd[j])
        rows.append(dict(name=name, kind=kind, mean=m, sd=s, q025=m - Z975 * s, q975=m + Z975 * s))
    names = hyper_names(fit.model.spec)
    free = list(fit.free_names)
    v = hyper_to_vector(fit.hyper, names)
    for k, name in enumerate(names):
        label, fn = _display(name)
        s = np.nan
        if fit.hyper_cov is not None and name in free:
            j = free.index(name)
            s = float(np.sqrt(max(fit.hyper_cov[j, j], 0.0)))
        lo, hi = (fn(v[k] - Z975 * s), fn(v[k] + Z975 * s)) if np.isfinite(s) else (np.nan, np.nan)
        rows.append(dict(name=label, kind="hyper", mean=float(fn(v[k])), sd=s, q025=float(lo), q975=float(hi)))
    return rows


def report_csv(rows) -> str:
    lines = ["name,mean,q025,q975"]
    for r in rows:
        lines.append(f"{r['name']},{r['mean']:.3f},{r['q025']:.3f},{r['q975']:.3f}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# prediction
# ---------------------------------------------------------------------------


@dataclass(eq=False)
class PredictionRaster:
    """Per-cell posterior mean and sd of a positive quantity on a grid."""

    grid: CovariateGrid
    mean: np.ndarray
    sd: np.ndarray
    species: int
    month: int | None
    year: int | None
    quantity: str = "intensity"

    def cell_centres(self):
        xs, ys = self.grid.node_coords()
        X, Y = np.meshgrid(xs, ys)
        return X.ravel(), Y.ravel()


def predict_intensity(fit: ModelFit, grid: CovariateGrid, species, month, year, n_draws: int = 200, seed=0,
                      mask=None) -> PredictionRaster:
    """Posterior mean and sd of the expected count per grid cell.

    Grid nodes are cell centres with area ``dx * dy``. Cells outside the
    domain (or ``mask == False``) are NaN. The mean is ``exp(m + v/2)``
    times the cell area; the sd comes from ``n_draws`` latent draws.
    """
    g = species if isinstance(species, (int, np.integer)) else SPECIES.index(str(species).lower())
    model = fit.model
    spec = model.spec
    if g not in spec.species_codes:
        raise ValueError(f"species {SPECIES[g]} is not in the model")
    if (int(month), int(year)) not in [(m, t) for m in spec.months for t in spec.years]:
        raise ModelError("predict", f"no covariate stratum for month {month}, year {year}")
    xs, ys = grid.node_coords()
    X, Y = np.meshgrid(xs, ys)
    x, y = X.ravel(), Y.ravel()
    inside = model.data.domain.contains(x, y)
    if mask is not None:
        inside &= np.asarray(mask, bool).ravel()
    area = grid.dx * grid.dy
    rows = model.intensity_rows(g, x[inside], y[inside], int(month), int(year))
    m, v = fit.predictor_moments(rows)
    mean = np.full(x.size, np.nan)
    sd = np.full(x.size, np.nan)
    mean[inside] = np.exp(m + 0.5 * v) * area
    if n_draws > 0:
        draws = fit.sample_latent(n_draws, seed)
        lam = np.exp(rows @ draws.T) * area
        sd[inside] = lam.std(axis=1, ddof=1)
    shape = (grid.ny, grid.nx)
    return PredictionRaster(grid, mean.reshape(shape), sd.reshape(shape), g, int(month), int(year))


def predict_group_size(fit: ModelFit, x, y, species, behavior, month=None, year=None):
    """Posterior mean group size ``exp(m + v/2)`` and its lognormal sd.

    ``month`` and ``year`` are needed only when SST is a mark covariate.
    """
    model = fit.model
    if not model.spec.include_marks:
        raise ValueError("model has no mark component")
    g = species if isinstance(species, (int, np.integer)) else SPECIES.index(str(species).lower())
    beh = np.atleast_1d(behavior)
    codes = []
    for b in beh:
        if isinstance(b, (int, np.integer)):
            if not 0 <= b < len(BEHAVIORS):
                raise KeyError(f"unknown behavior level {b}")
            codes.append(int(b))
        else:
            codes.append(behavior_index(b))
    rows = model.mark_rows(g, x, y, np.array(codes), fit.hyper, month=month, year=year)
    m, v = fit.predictor_moments(rows)
    mean = np.exp(m + 0.5 * v)
    sd = mean * np.sqrt(np.expm1(v))
    return mean, sd


def raster_csv(r: PredictionRaster) -> str:
    x, y = r.cell_centres()
    lines = ["x,y,mean,sd"]
    for xi, yi, mi, si in zip(x, y, r.mean.ravel(), r.sd.ravel()):
        lines.append(f"{float(xi)!r},{float(yi)!r},{float(mi)!r},{float(si)!r}")
    return "\n".join(lines) + "\n"


def read_raster_csv(text: str, grid: CovariateGrid, species, month, year) -> PredictionRaster:
    rows = [ln.split(",") for ln in text.strip().splitlines()[1:]]
    arr = np.array([[float(v) for v in r] for r in rows]).reshape(grid.ny, grid.nx, 4)
    return PredictionRaster(grid, arr[..., 2], arr[..., 3], species, month, year)
