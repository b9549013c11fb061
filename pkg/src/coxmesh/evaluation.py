"""Predictive scores and second-order diagnostics.

Scores are computed from latent draws of a posterior object exposing
``sample(n, seed) -> (n, p)`` and ``loglik(draws) -> (n, n_obs)``.
:class:`FitPosterior` adapts a :class:`~coxmesh.infer.ModelFit`; any other
object with the same two methods (e.g. a conjugate toy) works too.

For the point-process part the observation units are Poisson counts in the
dual-mesh quadrature cells of each species and stratum; each group-size
record is one mark unit.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.spatial import cKDTree
from scipy.special import gammaln, logsumexp

from .data import SPECIES, MarkedPointPattern
from .geo import DomainPolygon, distance_to_coast
from .model import JointLGCP, nb_logpmf, prepare_data
from .sim import derive_seed, rng_for, simulate_pattern, _domain_triangles

logger = logging.getLogger(__name__)

UNITS = ("combined", "location", "marks")
_DRAW_BATCH = 50


@dataclass
class ScoreReport:
    """Pointwise predictive summary; ``waic = -2 (lppd - p_waic)``."""

    n: int
    mean_log_score: float
    waic: float
    lppd: float
    p_waic: float
    waic_per_obs: float
    n_draws: int = 0
    units: str = "combined"
    nonfinite: list = field(default_factory=list)
    components: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in ("n", "mean_log_score", "waic", "lppd", "p_waic", "waic_per_obs", "n_draws", "units")}
        d["nonfinite"] = list(self.nonfinite)
        d["components"] = {k: v.to_dict() for k, v in self.components.items()}
        return d


def report_from_sums(lppd_i: np.ndarray, pwaic_i: np.ndarray, n_draws: int, units: str = "combined") -> ScoreReport:
    n = int(lppd_i.size)
    bad = np.flatnonzero(~np.isfinite(lppd_i))
    if bad.size:
        logger.warning("%d observation(s) with zero predictive density", bad.size)
    lppd = float(np.sum(lppd_i))
    p = float(np.sum(pwaic_i))
    waic_ = -2.0 * (lppd - p)
    return ScoreReport(
        n=n, mean_log_score=lppd / n if n else float("nan"), waic=waic_, lppd=lppd, p_waic=p,
        waic_per_obs=waic_ / n if n else float("nan"), n_draws=n_draws, units=units, nonfinite=bad.tolist(),
    )


def waic_from_loglik(ll, units: str = "combined") -> ScoreReport:
    """Scores from a ``(n_draws, n_obs)`` log-likelihood matrix."""
    ll = np.asarray(ll, dtype=float)
    s = ll.shape[0]
    lppd_i = logsumexp(ll, axis=0) - np.log(s)
    p_i = ll.var(axis=0, ddof=1) if s > 1 else np.zeros(ll.shape[1])
    return report_from_sums(lppd_i, p_i, s, units)


class _Accumulator:
    """Streaming log-mean-exp and variance over batches of draws."""

    def __init__(self, n_obs):
        self.count = 0
        self.lse = np.full(n_obs, -np.inf)
        self.mean = np.zeros(n_obs)
        self.m2 = np.zeros(n_obs)

    def add(self, ll):
        b = ll.shape[0]
        with np.errstate(invalid="ignore"):
            self.lse = np.logaddexp(self.lse, logsumexp(ll, axis=0))
            bm = ll.mean(axis=0)
            bm2 = ((ll - bm) ** 2).sum(axis=0)
            tot = self.count + b
            delta = bm - self.mean
            self.mean = self.mean + delta * b / tot
            self.m2 = self.m2 + bm2 + delta**2 * self.count * b / tot
        self.count = tot

    def report(self, units) -> ScoreReport:
        lppd_i = self.lse - np.log(self.count)
        p_i = self.m2 / (self.count - 1) if self.count > 1 else np.zeros_like(self.m2)
        p_i = np.where(np.isfinite(p_i), p_i, 0.0)
        return report_from_sums(lppd_i, np.maximum(p_i, 0.0), self.count, units)


# ---------------------------------------------------------------------------
# posterior adapters
# ---------------------------------------------------------------------------


def cell_counts(model: JointLGCP, pattern: MarkedPointPattern | None = None) -> np.ndarray:
    """Observed counts per quadrature row (species x stratum x active vertex).

    A point belongs to the cell of its nearest active vertex, which is its
    dual (Voronoi) cell for points inside the domain.
    """
    pat = model.data.pattern if pattern is None else pattern
    meta = model.quad_meta
    counts = np.zeros(meta.shape[0])
    keys = meta[:, :3]
    # rows of one (species, month, year) block are contiguous
    starts = np.flatnonzero(np.r_[True, np.any(keys[1:] != keys[:-1], axis=1)])
    ends = np.r_[starts[1:], meta.shape[0]]
    verts = model.data.mesh.vertices
    for a, b in zip(starts, ends):
        g, m, t = keys[a]
        sel = (pat.species == g) & (pat.month == m) & (pat.year == t)
        if not np.any(sel):
            continue
        tree = cKDTree(verts[meta[a:b, 3]])
        _, idx = tree.query(np.stack([pat.x[sel], pat.y[sel]], 1))
        counts[a:b] = np.bincount(idx, minlength=b - a)
    return counts


class FitPosterior:
    """Gaussian latent posterior of a fit, scored on (possibly new) data.

    Parameters
    ----------
    fit : ModelFit
    pattern : MarkedPointPattern, optional
        Data to score; defaults to the fitted data. New data reuse the fit's
        mesh, quadrature weights and covariate standardization.
    units : {"combined", "location", "marks"}
    """

    def __init__(self, fit, pattern: MarkedPointPattern | None = None, units: str = "combined"):
        if units not in UNITS:
            raise ValueError(f"units must be one of {UNITS}")
        self.fit = fit
        base = fit.model
        if pattern is None:
            self.model = base
        else:
            d = base.data
            data = prepare_data(pattern, d.mesh, d.domain, d.covariates, d.spec, weights=d.weights,
                                effort=d.effort, standardizers=d.standardizers)
            self.model = JointLGCP(data)
        spec = self.model.spec
        if units == "marks" and not spec.include_marks:
            raise ValueError("model has no mark component")
        self.units = units
        self.use_loc = units in ("combined", "location")
        self.use_marks = units in ("combined", "marks") and spec.include_marks and len(self.model.y_mark) > 0
        m = self.model
        if self.use_loc:
            self.counts = cell_counts(m)
            self._count_const = -gammaln(self.counts + 1.0)
            self._logw = np.log(m.w_quad)
        if self.use_marks:
            self.Xm = m.mark_design(fit.hyper)
            self.k = m.mark_size(fit.hyper)
        self.n_location = int(m.X_quad.shape[0]) if self.use_loc else 0
        self.n_marks = int(len(m.y_mark)) if self.use_marks else 0

    @property
    def n_obs(self) -> int:
        return self.n_location + self.n_marks

    def sample(self, n, seed):
        return self.fit.sample_latent(n, seed)

    def loglik(self, draws) -> np.ndarray:
        draws = np.atleast_2d(draws)
        parts = []
        if self.use_loc:
            eta = (self.model.X_quad @ draws.T).T + self._logw
            with np.errstate(over="ignore"):
                parts.append(self.counts * eta - np.exp(eta) + self._count_const)
        if self.use_marks:
            eta = (self.Xm @ draws.T).T
            with np.errstate(over="ignore"):
                parts.append(nb_logpmf(self.model.y_mark, np.exp(eta), self.k))
        return np.concatenate(parts, axis=1)


def _as_posterior(obj, data, units):
    if hasattr(obj, "sample") and hasattr(obj, "loglik"):
        return obj
    return FitPosterior(obj, data, units)


def _score(post, n_draws: int, seed) -> tuple:
    acc = None
    n_batches = -(-n_draws // _DRAW_BATCH)
    for b in range(n_batches):
        size = min(_DRAW_BATCH, n_draws - b * _DRAW_BATCH)
        draws = post.sample(size, derive_seed(seed, "score", b))
        ll = post.loglik(draws)
        if acc is None:
            acc = _Accumulator(ll.shape[1])
        acc.add(ll)
    return acc


def _split_report(post, acc: _Accumulator) -> ScoreReport:
    units = getattr(post, "units", "combined")
    rep = acc.report(units)
    if isinstance(post, FitPosterior) and post.use_loc and post.use_marks:
        nl = post.n_location
        for name, sl in (("location", slice(0, nl)), ("marks", slice(nl, None))):
            sub = _Accumulator(0)
            sub.count, sub.lse, sub.mean, sub.m2 = acc.count, acc.lse[sl], acc.mean[sl], acc.m2[sl]
            rep.components[name] = sub.report(name)
    return rep


def waic(fit, data: MarkedPointPattern | None = None, n_draws: int = 500, seed=0, units: str = "combined") -> ScoreReport:
    """WAIC with ``lppd`` and ``p_waic`` estimated from latent draws."""
    if n_draws < 500:
        raise ValueError("waic needs n_draws >= 500")
    post = _as_posterior(fit, data, units)
    rep = _split_report(post, _score(post, n_draws, seed))
    assert rep.waic == -2.0 * (rep.lppd - rep.p_waic)
    return rep


def mean_log_score(fit, data: MarkedPointPattern | None = None, n_draws: int = 100, seed=0,
                   units: str = "combined") -> float:
    """Average log posterior predictive density over the observation units."""
    if n_draws < 100:
        raise ValueError("mean_log_score needs n_draws >= 100")
    post = _as_posterior(fit, data, units)
    return _score(post, n_draws, seed).report(units).mean_log_score


# ---------------------------------------------------------------------------
# inhomogeneous K-function
# ---------------------------------------------------------------------------

CORRECTIONS = ("border", "translation", "none")


def _translation_weights(domain: DomainPolygon, dx, dy) -> np.ndarray:
    """``|W ∩ (W + d)| / |W|`` for each offset."""
    import shapely

    geom = domain.geom
    x0, y0, x1, y1 = geom.bounds
    if not domain.holes and abs(geom.area - (x1 - x0) * (y1 - y0)) <= 1e-12 * geom.area:
        w, h = x1 - x0, y1 - y0
        return np.maximum(w - np.abs(dx), 0.0) * np.maximum(h - np.abs(dy), 0.0) / (w * h)
    if not domain.holes:
        ring = np.asarray(geom.exterior.coords)
        shifted = shapely.polygons(ring[None, :, :] + np.stack([dx, dy], 1)[:, None, :])
        inter = shapely.area(shapely.intersection(geom, shifted))
    else:
        from shapely.affinity import translate

        inter = np.array([geom.intersection(translate(geom, a, b)).area for a, b in zip(dx, dy)])
    return inter / geom.area


def k_inhom(x, y, lam, domain: DomainPolygon, radii, correction: str = "border") -> np.ndarray:
    """Inhomogeneous K-function estimate at ``radii``.

    ``none``: ``|A|^-1 sum_{i != j} 1(d_ij <= r) / (lam_i lam_j)``.
    ``translation``: each pair weighted by ``|A| / |W ∩ (W + s_i - s_j)|``.
    ``border``: only points at least ``r`` from the boundary act as centres,
    normalized by the area of the domain eroded by ``r``.
    """
    if correction not in CORRECTIONS:
        raise ValueError(f"correction must be one of {CORRECTIONS}")
    x = np.asarray(x, float)
    y = np.asarray(y, float)
    lam = np.broadcast_to(np.asarray(lam, float), x.shape)
    r = np.asarray(radii, float)
    if x.size < 2:
        raise ValueError("K-function needs at least 2 points")
    if np.any(~(lam > 0)):
        raise ValueError("intensity must be positive at all points")
    if np.any(np.diff(r) <= 0) or np.any(r < 0):
        raise ValueError("radii must be non-negative and increasing")
    area = domain.area
    pts = np.stack([x, y], 1)
    pairs = cKDTree(pts).query_pairs(float(r[-1]), output_type="ndarray")
    i, j = pairs[:, 0], pairs[:, 1]
    d = np.hypot(x[i] - x[j], y[i] - y[j])
    inv = 1.0 / (lam[i] * lam[j])
    order = np.argsort(d, kind="stable")
    d = d[order]
    i, j, inv = i[order], j[order], inv[order]
    if correction == "none":
        cum = np.r_[0.0, np.cumsum(2.0 * inv)]
        return cum[np.searchsorted(d, r, side="right")] / area
    if correction == "translation":
        w = _translation_weights(domain, x[i] - x[j], y[i] - y[j])
        cum = np.r_[0.0, np.cumsum(2.0 * inv / w)]
        return cum[np.searchsorted(d, r, side="right")] / area
    b = distance_to_coast(x, y, domain)
    out = np.zeros(r.size)
    for k, rk in enumerate(r):
        n_pair = np.searchsorted(d, rk, side="right")
        ii, jj, vv = i[:n_pair], j[:n_pair], inv[:n_pair]
        # ordered pairs (centre, neighbour); centre must be eligible
        s = vv[b[ii] >= rk].sum() + vv[b[jj] >= rk].sum()
        eroded = domain.geom.buffer(-rk).area if rk > 0 else area
        out[k] = s / eroded if eroded > 0 else np.nan
    return out


def normalized_k(khat, radii) -> np.ndarray:
    """``K / (pi r^2) - 1``; zero for an (inhomogeneous) Poisson process."""
    r = np.asarray(radii, float)
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(r > 0, np.asarray(khat) / (np.pi * r**2) - 1.0, np.nan)


@dataclass
class KFunctionResult:
    radii: np.ndarray
    khat: np.ndarray
    normalized: np.ndarray
    lo: np.ndarray
    hi: np.ndarray
    n_sim: int
    sims: np.ndarray
    correction: str = "border"

    def inside_fraction(self) -> float:
        ok = np.isfinite(self.normalized)
        inside = (self.normalized >= self.lo) & (self.normalized <= self.hi)
        return float(np.mean(inside[ok]))

    def to_csv(self) -> str:
        lines = ["r,khat,norm,lo,hi"]
        for row in zip(self.radii, self.khat, self.normalized, self.lo, self.hi):
            lines.append(",".join(repr(float(v)) for v in row))
        return "\n".join(lines) + "\n"

    @classmethod
    def from_csv(cls, text: str, n_sim: int = 0) -> "KFunctionResult":
        arr = np.array([[float(v) for v in ln.split(",")] for ln in text.strip().splitlines()[1:]])
        return cls(arr[:, 0], arr[:, 1], arr[:, 2], arr[:, 3], arr[:, 4], n_sim, np.zeros((0, arr.shape[0])))


def fitted_intensity(fit, species, x, y, month, year) -> np.ndarray:
    """Plug-in intensity ``exp(eta)`` at the posterior mode."""
    rows = fit.model.intensity_rows(species, x, y, month, year)
    return np.exp(rows @ fit.mode)


def vertex_log_intensity(fit, species, month, year, latent=None, triangles=None):
    """Log intensity at the vertices of domain triangles for one stratum.

    Vertices outside every domain triangle get ``-inf``. Returns
    ``(eta, triangles)``.
    """
    model = fit.model
    d = model.data
    mesh = d.mesh
    tris = _domain_triangles(mesh, d.domain) if triangles is None else triangles
    used = np.unique(mesh.triangles[tris])
    E = sp.csr_matrix((np.ones(used.size), (np.arange(used.size), used)), shape=(used.size, mesh.n))
    z = d.standardize_at(mesh.vertices[used, 0], mesh.vertices[used, 1], month, year)
    rows = model._row_block(species, E, month, year, z)
    vec = fit.mode if latent is None else latent
    eta = np.full(mesh.n, -np.inf)
    eta[used] = rows @ vec
    eff = d.effort.get((int(month), int(year)))
    if eff is not None:
        with np.errstate(divide="ignore"):
            eta[used] += np.log(eff[used])
    return eta, tris


def k_envelope(fit, species, month, year, radii, n_sim: int = 99, seed=0, correction: str = "border",
               pattern: MarkedPointPattern | None = None, max_retries: int = 5) -> KFunctionResult:
    """Observed normalized K-function with a pointwise 95% simulation envelope.

    Each replicate draws the latent vector from the Gaussian approximation
    (at the plug-in hyperparameters), simulates a pattern by thinning and
    evaluates K with the fitted plug-in intensity. Replicates with fewer
    than two points are redrawn up to ``max_retries`` times.
    """
    g = species if isinstance(species, (int, np.integer)) else SPECIES.index(str(species).lower())
    pat = fit.model.data.pattern if pattern is None else pattern
    obs = pat.select(species=g, month=month, year=year)
    dom = fit.model.data.domain
    r = np.asarray(radii, float)
    lam_obs = fitted_intensity(fit, g, obs.x, obs.y, month, year)
    khat = k_inhom(obs.x, obs.y, lam_obs, dom, r, correction)
    _, tris = vertex_log_intensity(fit, g, month, year)
    sims = np.empty((n_sim, r.size))
    for s in range(n_sim):
        for attempt in range(max_retries + 1):
            latent = fit.sample_latent(1, derive_seed(seed, "envelope", s, attempt))[0]
            eta, _ = vertex_log_intensity(fit, g, month, year, latent=latent, triangles=tris)
            x, y = simulate_pattern(fit.model.data.mesh, eta, dom, rng_for(seed, "envelope-points", s, attempt),
                                    triangles=tris)
            if x.size >= 2:
                break
        else:
            raise RuntimeError(f"envelope replicate {s} produced fewer than 2 points after {max_retries} retries")
        lam = fitted_intensity(fit, g, x, y, month, year)
        sims[s] = normalized_k(k_inhom(x, y, lam, dom, r, correction), r)
    lo, hi = np.nanpercentile(sims, [2.5, 97.5], axis=0)
    return KFunctionResult(r, khat, normalized_k(khat, r), lo, hi, n_sim, sims, correction)
