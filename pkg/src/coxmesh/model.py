"""Joint two-species marked log-Gaussian Cox process.

The latent vector stacks the species fields (or one shared field), the
intensity fixed effects, month and year random effects and the mark
coefficients. Given the hyperparameters the negative log posterior is a
convex function of the latent vector; its gradient and Hessian are exact.

The point-process likelihood uses the dual-mesh quadrature rule

    -sum_i log lambda(s_i) + sum_strata sum_k w_k lambda(v_k)

and group sizes follow a negative binomial with mean ``mu`` and size ``k``
(``Var = mu + mu^2 / k``).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, fields, replace
from typing import Callable

import numpy as np
import scipy.sparse as sp
from scipy.special import betaln, gammaln

from .data import BEHAVIORS, MONTHS, SPECIES, MarkedPointPattern
from .geo import CovariateGrid, DomainPolygon, Standardizer, bilinear, distance_to_coast, standardize
from .mesh import Mesh, dual_weights, projector
from .sparse import factorize
from .spde import PrecisionAssembler, SpdeParams, params_to_theta, theta_to_params

logger = logging.getLogger(__name__)

COVARIATES = ("dcoast", "sst")


class ConfigError(ValueError):
    """Invalid configuration; ``key`` names the offending entry."""

    def __init__(self, key, message=None):
        self.key = key
        super().__init__(message or f"invalid configuration key: {key}")


class ModelError(ArithmeticError):
    """Numerical failure; ``component`` tags the part of the model involved."""

    def __init__(self, component, message, index=None):
        self.component = component
        self.index = index
        super().__init__(f"[{component}] {message}")


# ---------------------------------------------------------------------------
# specification and hyperparameters
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ModelSpec:
    """Which effects the joint model contains.

    ``baseline`` switches to the inhomogeneous Poisson baseline: no latent
    fields and no month/year effects. ``fixed_prior_sd=None`` gives flat
    priors on fixed effects.
    """

    covariates: tuple = COVARIATES
    months: tuple = MONTHS
    years: tuple = (2010,)
    species: tuple = SPECIES
    include_marks: bool = True
    baseline: bool = False
    share_single_field: bool = False
    random_effects: bool = True
    tie_rho: bool = False
    mark_covariates: tuple = ("dcoast",)
    fixed_prior_sd: float | None = 10.0
    precision_prior: tuple = (1.0, 5e-5)

    def __post_init__(self):
        for name in ("covariates", "months", "years", "species", "mark_covariates", "precision_prior"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        if not self.years:
            raise ConfigError("years", "model needs at least one year")
        if not self.months:
            raise ConfigError("months", "model needs at least one month")
        if not self.species or any(s not in SPECIES for s in self.species):
            raise ConfigError("species", f"species must be a non-empty subset of {SPECIES}")
        for c in (*self.covariates, *self.mark_covariates):
            if c not in COVARIATES:
                raise ConfigError("covariates", f"unknown covariate {c!r}")
        if any(m not in MONTHS for m in self.months):
            raise ConfigError("months", f"months must lie in {MONTHS}")

    @property
    def has_fields(self) -> bool:
        return not self.baseline

    @property
    def has_random(self) -> bool:
        return self.random_effects and not self.baseline

    @property
    def species_codes(self) -> tuple:
        return tuple(SPECIES.index(s) for s in self.species)

    @classmethod
    def baseline_ipp(cls, **kw) -> "ModelSpec":
        kw.setdefault("include_marks", False)
        return cls(baseline=True, random_effects=False, **kw)

    def to_dict(self) -> dict:
        return {f.name: (list(v) if isinstance(v := getattr(self, f.name), tuple) else v) for f in fields(self)}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        known = {f.name for f in fields(cls)}
        aliases = {"marks": "include_marks"}
        kw = {}
        for k, v in d.items():
            k2 = aliases.get(k, k)
            if k2 not in known:
                raise ConfigError(f"model.{k}")
            kw[k2] = v
        return cls(**kw)


@dataclass
class HyperState:
    """Hyperparameters on the optimizer scale.

    ``theta`` is ``(log h_x, log h_y, atanh h_xy, log sigma)``; the other
    arrays are per species in :data:`SPECIES` order.
    """

    theta: np.ndarray = field(default_factory=lambda: np.zeros(4))
    log_tau_month: np.ndarray = field(default_factory=lambda: np.full(2, np.log(10.0)))
    log_tau_year: np.ndarray = field(default_factory=lambda: np.full(2, np.log(4.0)))
    log_size: np.ndarray = field(default_factory=lambda: np.zeros(2))
    rho: np.ndarray = field(default_factory=lambda: np.zeros(2))

    def __post_init__(self):
        for f in fields(self):
            v = np.array(getattr(self, f.name), dtype=float)
            setattr(self, f.name, v)
        if self.theta.shape != (4,):
            raise ValueError("theta must have 4 entries")

    @property
    def spde(self) -> SpdeParams:
        return theta_to_params(self.theta)

    @property
    def size(self) -> np.ndarray:
        return np.exp(self.log_size)

    @classmethod
    def from_params(cls, spde: SpdeParams | None = None, size=None, rho=None, tau_month=None, tau_year=None):
        h = cls()
        if spde is not None:
            h.theta = params_to_theta(spde)
        if size is not None:
            h.log_size = np.log(np.broadcast_to(np.asarray(size, float), (2,))).copy()
        if rho is not None:
            h.rho = np.broadcast_to(np.asarray(rho, float), (2,)).copy()
        if tau_month is not None:
            h.log_tau_month = np.log(np.broadcast_to(np.asarray(tau_month, float), (2,))).copy()
        if tau_year is not None:
            h.log_tau_year = np.log(np.broadcast_to(np.asarray(tau_year, float), (2,))).copy()
        return h

    def copy(self) -> "HyperState":
        return HyperState(**{f.name: getattr(self, f.name).copy() for f in fields(self)})

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name).tolist() for f in fields(self)}

    @classmethod
    def from_dict(cls, d) -> "HyperState":
        return cls(**{k: np.asarray(v, float) for k, v in d.items()})


def hyper_names(spec: ModelSpec) -> list[str]:
    """Names of the hyperparameters that enter ``spec``'s model."""
    names = []
    if spec.has_fields:
        names += ["theta1", "theta2", "theta3", "theta4"]
    codes = spec.species_codes
    if spec.has_random:
        names += [f"log_tau_month_{SPECIES[g]}" for g in codes]
        names += [f"log_tau_year_{SPECIES[g]}" for g in codes]
    if spec.include_marks:
        names += [f"log_size_{SPECIES[g]}" for g in codes]
        if spec.has_fields:
            names += ["rho"] if spec.tie_rho else [f"rho_{SPECIES[g]}" for g in codes]
    return names


def _hyper_slot(name):
    if name.startswith("theta"):
        return "theta", int(name[5:]) - 1
    if name == "rho":
        return "rho", None
    head, sp_name = name.rsplit("_", 1)
    return head, SPECIES.index(sp_name)


def hyper_to_vector(h: HyperState, names) -> np.ndarray:
    out = []
    for n in names:
        attr, i = _hyper_slot(n)
        v = getattr(h, attr)
        out.append(v[0] if i is None else v[i])
    return np.array(out, dtype=float)


def hyper_from_vector(vec, names, base: HyperState) -> HyperState:
    h = base.copy()
    for n, v in zip(names, np.asarray(vec, float)):
        attr, i = _hyper_slot(n)
        arr = getattr(h, attr)
        if i is None:
            arr[:] = v
        else:
            arr[i] = v
    return h


# ---------------------------------------------------------------------------
# covariates
# ---------------------------------------------------------------------------


class CovariateSource:
    """Raw covariate values: distance to coast and stratum-specific SST.

    ``sst`` is a mapping ``(month, year) -> CovariateGrid`` or a callable
    ``f(x, y, month, year)``.
    """

    def __init__(self, coast: DomainPolygon, sst=None):
        self.coast = coast
        self.sst_source = sst

    def dcoast(self, x, y) -> np.ndarray:
        return distance_to_coast(x, y, self.coast)

    def sst(self, x, y, month, year) -> np.ndarray:
        src = self.sst_source
        if src is None:
            raise ModelError("covariates", "no SST source configured")
        if callable(src):
            return np.asarray(src(np.asarray(x, float), np.asarray(y, float), month, year), dtype=float)
        key = (int(month), int(year))
        if key not in src:
            raise ModelError("covariates", f"no SST grid for month {month}, year {year}")
        vals, flags = bilinear(src[key], x, y, return_flags=True)
        if np.any(flags):
            logger.info("SST nearest-neighbour fallback at %d location(s) for %s", int(flags.sum()), key)
        return vals


# ---------------------------------------------------------------------------
# latent layout
# ---------------------------------------------------------------------------


class LatentLayout:
    """Index map of the stacked latent vector."""

    def __init__(self, spec: ModelSpec, n_vertices: int):
        self.spec = spec
        self.n_vertices = n_vertices
        pos = 0
        self.field_slices: dict[int, slice] = {}
        if spec.has_fields:
            if spec.share_single_field:
                s = slice(0, n_vertices)
                for g in spec.species_codes:
                    self.field_slices[g] = s
                pos = n_vertices
            else:
                for g in spec.species_codes:
                    self.field_slices[g] = slice(pos, pos + n_vertices)
                    pos += n_vertices
        self.n_field = pos
        self.names: list[str] = []
        self.index: dict[tuple, int] = {}
        self.kind: list[str] = []

        def add(key, name, kind):
            nonlocal pos
            self.index[key] = pos
            self.names.append(name)
            self.kind.append(kind)
            pos += 1

        for g in spec.species_codes:
            sname = SPECIES[g].capitalize()
            add(("intercept", g), f"{sname}: intercept", "fixed")
            for c in spec.covariates:
                add(("cov", g, c), f"{sname}: {c}", "fixed")
        if spec.has_random:
            for g in spec.species_codes:
                for m in spec.months:
                    add(("month", g, m), f"{SPECIES[g].capitalize()}: month {m}", "month")
            for g in spec.species_codes:
                for t in spec.years:
                    add(("year", g, t), f"{SPECIES[g].capitalize()}: year {t}", "year")
        if spec.include_marks:
            for g in spec.species_codes:
                sname = SPECIES[g].capitalize()
                for c in spec.mark_covariates:
                    add(("mark_cov", g, c), f"{sname} mark: {c}", "fixed")
                for b, bname in enumerate(BEHAVIORS):
                    add(("xi", g, b), f"{sname} mark: {bname}", "fixed")
        self.dim = pos

    @property
    def global_indices(self) -> np.ndarray:
        return np.arange(self.n_field, self.dim)

    def __getitem__(self, key) -> int:
        return self.index[key]


@dataclass
class LatentState:
    """Latent vector with named access."""

    layout: LatentLayout
    vector: np.ndarray

    def field(self, species: int) -> np.ndarray:
        return self.vector[self.layout.field_slices[species]]

    def coef(self, *key) -> float:
        return float(self.vector[self.layout[key]])

    def named(self) -> dict:
        return {n: float(self.vector[self.layout.n_field + i]) for i, n in enumerate(self.layout.names)}

    @classmethod
    def zeros(cls, layout: LatentLayout) -> "LatentState":
        return cls(layout, np.zeros(layout.dim))


# ---------------------------------------------------------------------------
# data preparation
# ---------------------------------------------------------------------------


@dataclass(eq=False)
class ModelData:
    """Everything the likelihood needs, precomputed on the mesh."""

    spec: ModelSpec
    mesh: Mesh
    domain: DomainPolygon
    pattern: MarkedPointPattern
    weights: np.ndarray
    A: sp.csr_matrix
    standardizers: dict
    z_points: dict
    z_nodes_dcoast: np.ndarray
    z_nodes_sst: dict
    effort: dict
    covariates: CovariateSource

    @property
    def strata(self) -> list[tuple[int, int]]:
        return [(m, t) for t in self.spec.years for m in self.spec.months]

    def stratum_weights(self, month, year) -> np.ndarray:
        e = self.effort.get((month, year), 1.0)
        return self.weights * e

    def standardize_at(self, x, y, month=None, year=None) -> dict:
        """Standardized covariates at arbitrary locations."""
        out = {}
        if "dcoast" in self.standardizers:
            out["dcoast"] = self.standardizers["dcoast"].apply(self.covariates.dcoast(x, y))
        if "sst" in self.standardizers and month is not None:
            out["sst"] = self.standardizers["sst"].apply(self.covariates.sst(x, y, month, year))
        return out


def prepare_data(
    pattern: MarkedPointPattern,
    mesh: Mesh,
    domain: DomainPolygon,
    covariates: CovariateSource,
    spec: ModelSpec,
    weights=None,
    effort=None,
    standardizers=None,
) -> ModelData:
    """Filter the pattern to the model's strata and precompute covariates.

    Covariates are standardized with one mean/sd per covariate computed over
    the quadrature nodes (all strata for SST) unless ``standardizers`` is
    given.
    """
    keep = (
        np.isin(pattern.species, spec.species_codes)
        & np.isin(pattern.month, spec.months)
        & np.isin(pattern.year, spec.years)
    )
    if not np.all(keep):
        logger.info("dropping %d record(s) outside the model strata", int((~keep).sum()))
    pat = pattern.subset(keep)
    if weights is None:
        weights = dual_weights(mesh, domain)
    weights = np.asarray(weights, dtype=float)
    active = np.flatnonzero(weights > 0)
    A = projector(mesh, pat.x, pat.y) if len(pat) else sp.csr_matrix((0, mesh.n))
    used = set(spec.covariates) | (set(spec.mark_covariates) if spec.include_marks else set())
    std = dict(standardizers or {})
    vx, vy = mesh.vertices[active, 0], mesh.vertices[active, 1]
    raw_nodes_d = covariates.dcoast(vx, vy) if "dcoast" in used else None
    raw_nodes_T = {}
    if "sst" in used:
        for m in spec.months:
            for t in spec.years:
                raw_nodes_T[(m, t)] = covariates.sst(vx, vy, m, t)
    if "dcoast" in used and "dcoast" not in std:
        _, mu, sd = standardize(raw_nodes_d)
        std["dcoast"] = Standardizer(mu, sd)
    if "sst" in used and "sst" not in std:
        _, mu, sd = standardize(np.concatenate(list(raw_nodes_T.values())))
        std["sst"] = Standardizer(mu, sd)
    z_pts = {}
    if len(pat) and "dcoast" in used:
        z_pts["dcoast"] = std["dcoast"].apply(covariates.dcoast(pat.x, pat.y))
    if len(pat) and "sst" in used:
        z = np.empty(len(pat))
        for m in spec.months:
            for t in spec.years:
                sel = (pat.month == m) & (pat.year == t)
                if np.any(sel):
                    z[sel] = std["sst"].apply(covariates.sst(pat.x[sel], pat.y[sel], m, t))
        z_pts["sst"] = z
    z_nd = np.zeros(mesh.n)
    if raw_nodes_d is not None:
        z_nd[active] = std["dcoast"].apply(raw_nodes_d)
    z_nT = {}
    for key, raw in raw_nodes_T.items():
        z = np.zeros(mesh.n)
        z[active] = std["sst"].apply(raw)
        z_nT[key] = z
    eff = {}
    for key, val in (effort or {}).items():
        eff[tuple(int(k) for k in key)] = np.broadcast_to(np.asarray(val, float), (mesh.n,)).copy()
    return ModelData(spec, mesh, domain, pat, weights, A.tocsr(), std, z_pts, z_nd, z_nT, eff, covariates)


# ---------------------------------------------------------------------------
# likelihood pieces
# ---------------------------------------------------------------------------


def nb_logpmf(y, mu, k):
    """Negative binomial log pmf, mean ``mu`` and size ``k``."""
    y = np.asarray(y, dtype=float)
    mu = np.asarray(mu, dtype=float)
    k = np.asarray(k, dtype=float)
    if np.any(k <= 0):
        raise ModelError("marks", "negative binomial size must be positive")
    # extreme trial points overflow; the caller rejects non-finite values
    with np.errstate(divide="ignore", over="ignore", invalid="ignore"):
        # log Gamma(y+k) - log Gamma(k) - log Gamma(y+1), stable for large k
        ypos = np.maximum(y, 1.0)
        comb = np.where(y > 0, -betaln(ypos, k) - np.log(ypos), 0.0)
        log_kmu = np.log(k + mu)
        return comb - k * np.log1p(mu / k) + y * (np.log(mu) - log_kmu)


def _nb_eta_derivs(y, eta, k):
    with np.errstate(over="ignore", invalid="ignore"):
        mu = np.exp(eta)
        r = mu / (k + mu)
        g = (k + y) * r - y
        h = (k + y) * r * k / (k + mu)
    return g, h


class JointLGCP:
    """Objective, gradient and Hessian of the negative log posterior."""

    def __init__(self, data: ModelData):
        self.data = data
        self.spec = data.spec
        self.layout = LatentLayout(self.spec, data.mesh.n)
        self.assembler = PrecisionAssembler(data.mesh) if self.spec.has_fields else None
        self._build_designs()
        self._prior_cache: dict = {}

    # -- designs -----------------------------------------------------------
    def _row_block(self, species, vertex_rows, month, year, z):
        """Sparse design rows for the intensity predictor.

        ``vertex_rows`` is a sparse matrix (rows x vertices) mapping to the field.
        """
        lay, spec = self.layout, self.spec
        nrow = vertex_rows.shape[0]
        blocks_r, blocks_c, blocks_v = [], [], []
        if spec.has_fields:
            coo = vertex_rows.tocoo()
            blocks_r.append(coo.row)
            blocks_c.append(coo.col + lay.field_slices[species].start)
            blocks_v.append(coo.data)
        r = np.arange(nrow)
        blocks_r.append(r)
        blocks_c.append(np.full(nrow, lay["intercept", species]))
        blocks_v.append(np.ones(nrow))
        for c in spec.covariates:
            blocks_r.append(r)
            blocks_c.append(np.full(nrow, lay["cov", species, c]))
            blocks_v.append(np.broadcast_to(z[c], (nrow,)))
        if spec.has_random:
            blocks_r.append(r)
            blocks_c.append(np.array([lay["month", species, m] for m in np.broadcast_to(month, (nrow,))], dtype=np.int64))
            blocks_v.append(np.ones(nrow))
            blocks_r.append(r)
            blocks_c.append(np.array([lay["year", species, t] for t in np.broadcast_to(year, (nrow,))], dtype=np.int64))
            blocks_v.append(np.ones(nrow))
        return sp.csr_matrix(
            (np.concatenate(blocks_v), (np.concatenate(blocks_r), np.concatenate(blocks_c))),
            shape=(nrow, lay.dim),
        )

    def _build_designs(self):
        d, spec, lay = self.data, self.spec, self.layout
        pat = d.pattern
        n = d.mesh.n
        # observed points
        pts = []
        for g in spec.species_codes:
            sel = np.flatnonzero(pat.species == g)
            if sel.size == 0:
                continue
            z = {c: d.z_points[c][sel] for c in spec.covariates}
            pts.append((sel, self._row_block(g, d.A[sel], pat.month[sel], pat.year[sel], z)))
        if pts:
            order = np.concatenate([s for s, _ in pts])
            X = sp.vstack([b for _, b in pts]).tocsr()
            inv = np.empty_like(order)
            inv[order] = np.arange(order.size)
            self.X_pts = X[inv].tocsr()
        else:
            self.X_pts = sp.csr_matrix((0, lay.dim))
        self.pts_colsum = np.asarray(self.X_pts.sum(axis=0)).ravel()
        # quadrature nodes
        rows, wts, meta = [], [], []
        for g in spec.species_codes:
            for (m, t) in d.strata:
                w = d.stratum_weights(m, t)
                act = np.flatnonzero(w > 0)
                E = sp.csr_matrix((np.ones(act.size), (np.arange(act.size), act)), shape=(act.size, n))
                z = {}
                if "dcoast" in spec.covariates:
                    z["dcoast"] = d.z_nodes_dcoast[act]
                if "sst" in spec.covariates:
                    z["sst"] = d.z_nodes_sst[(m, t)][act]
                rows.append(self._row_block(g, E, m, t, z))
                wts.append(w[act])
                meta.append(np.stack([np.full(act.size, g), np.full(act.size, m), np.full(act.size, t), act], 1))
        self.X_quad = sp.vstack(rows).tocsr()
        self.w_quad = np.concatenate(wts)
        self.quad_meta = np.concatenate(meta).astype(np.int64)
        # marks
        self.y_mark = pat.group_size.astype(float)
        self.mark_species = pat.species.copy()
        if spec.include_marks and len(pat):
            r = np.arange(len(pat))
            rr, cc, vv = [], [], []
            for c in spec.mark_covariates:
                rr.append(r)
                cc.append(np.array([lay["mark_cov", g, c] for g in pat.species]))
                vv.append(d.z_points[c])
            rr.append(r)
            cc.append(np.array([lay["xi", g, b] for g, b in zip(pat.species, pat.behavior)]))
            vv.append(np.ones(len(pat)))
            self.X_mark_fixed = sp.csr_matrix(
                (np.concatenate(vv), (np.concatenate(rr), np.concatenate(cc))), shape=(len(pat), lay.dim)
            )
            if spec.has_fields:
                coo = d.A.tocoo()
                cols = coo.col + np.array([lay.field_slices[g].start for g in pat.species])[coo.row]
                self.F_mark = sp.csr_matrix((coo.data, (coo.row, cols)), shape=(len(pat), lay.dim))
            else:
                self.F_mark = sp.csr_matrix((len(pat), lay.dim))
        else:
            self.X_mark_fixed = sp.csr_matrix((len(pat), lay.dim))
            self.F_mark = sp.csr_matrix((len(pat), lay.dim))

    def mark_design(self, hyper: HyperState) -> sp.csr_matrix:
        if not self.spec.include_marks:
            return self.X_mark_fixed
        rho = hyper.rho[0] if self.spec.tie_rho else None
        per_pt = np.full(len(self.mark_species), rho) if rho is not None else hyper.rho[self.mark_species]
        return (self.X_mark_fixed + sp.diags(per_pt) @ self.F_mark).tocsr()

    def mark_size(self, hyper: HyperState) -> np.ndarray:
        return hyper.size[self.mark_species]

    # -- prior -------------------------------------------------------------
    def field_precision(self, hyper: HyperState):
        key = tuple(np.round(hyper.theta, 15))
        hit = self._prior_cache.get(key)
        if hit is None:
            Q = self.assembler.precision(hyper.spde)
            hit = (Q, factorize(Q).logdet)
            self._prior_cache.clear()
            self._prior_cache[key] = hit
        return hit

    def prior_precision(self, hyper: HyperState):
        """Block-diagonal prior precision and its log-determinant.

        Flat fixed-effect priors contribute zero rows and are left out of
        the log-determinant.
        """
        spec, lay = self.spec, self.layout
        blocks = []
        logdet = 0.0
        if spec.has_fields:
            Q, ldQ = self.field_precision(hyper)
            nf = 1 if spec.share_single_field else len(spec.species_codes)
            blocks += [Q] * nf
            logdet += nf * ldQ
        diag = np.zeros(lay.dim - lay.n_field)
        fixed_prec = 0.0 if spec.fixed_prior_sd is None else 1.0 / spec.fixed_prior_sd**2
        for i, kind in enumerate(lay.kind):
            if kind == "fixed":
                diag[i] = fixed_prec
        if spec.has_random:
            for g in spec.species_codes:
                tm, ty = np.exp(hyper.log_tau_month[g]), np.exp(hyper.log_tau_year[g])
                for m in spec.months:
                    diag[lay["month", g, m] - lay.n_field] = tm
                for t in spec.years:
                    diag[lay["year", g, t] - lay.n_field] = ty
        pos = diag > 0
        logdet += float(np.sum(np.log(diag[pos])))
        blocks.append(sp.diags(diag))
        P = sp.block_diag(blocks, format="csc")
        return P, logdet

    def log_hyperprior(self, hyper: HyperState) -> float:
        """Gamma(shape, rate) on each random-effect precision, on the log scale."""
        if not self.spec.has_random:
            return 0.0
        a, b = self.spec.precision_prior
        out = 0.0
        for g in self.spec.species_codes:
            for lt in (hyper.log_tau_month[g], hyper.log_tau_year[g]):
                tau = np.exp(lt)
                out += a * np.log(b) - gammaln(a) + a * lt - b * tau
        return float(out)

    # -- likelihood --------------------------------------------------------
    def lgcp_nll(self, x) -> float:
        eta_p = self.X_pts @ x
        eta_q = self.X_quad @ x
        lam = self.w_quad * np.exp(eta_q)
        if not np.all(np.isfinite(lam)):
            bad = int(np.flatnonzero(~np.isfinite(lam))[0])
            raise ModelError("lgcp", "non-finite intensity at quadrature node", self.quad_meta[bad].tolist())
        return float(-eta_p.sum() + lam.sum())

    def nb_mark_nll(self, x, hyper: HyperState) -> float:
        if not self.spec.include_marks or len(self.y_mark) == 0:
            return 0.0
        eta = self.mark_design(hyper) @ x
        return float(-np.sum(nb_logpmf(self.y_mark, np.exp(eta), self.mark_size(hyper))))

    def objective(self, x, hyper: HyperState, hessian: bool = True, prior=None):
        """Negative log posterior (up to hyper-dependent constants), gradient, Hessian."""
        x = np.asarray(x, dtype=float)
        P, _ = prior if prior is not None else self.prior_precision(hyper)
        eta_p_sum = self.pts_colsum
        eta_q = self.X_quad @ x
        lam = self.w_quad * np.exp(eta_q)
        if not np.all(np.isfinite(lam)):
            bad = int(np.flatnonzero(~np.isfinite(lam))[0])
            raise ModelError("lgcp", "non-finite intensity at quadrature node", self.quad_meta[bad].tolist())
        value = -float(eta_p_sum @ x) + float(lam.sum())
        grad = -eta_p_sum + self.X_quad.T @ lam
        H = (self.X_quad.T @ sp.diags(lam) @ self.X_quad) if hessian else None
        if self.spec.include_marks and len(self.y_mark):
            Xm = self.mark_design(hyper)
            k = self.mark_size(hyper)
            eta_m = Xm @ x
            value -= float(np.sum(nb_logpmf(self.y_mark, np.exp(eta_m), k)))
            gm, hm = _nb_eta_derivs(self.y_mark, eta_m, k)
            grad = grad + Xm.T @ gm
            if hessian:
                H = H + Xm.T @ sp.diags(hm) @ Xm
        Px = P @ x
        value += 0.5 * float(x @ Px)
        grad = grad + Px
        if not np.isfinite(value):
            raise ModelError("objective", "non-finite negative log posterior")
        if hessian:
            H = (H + P).tocsc()
        return value, np.asarray(grad), H

    # -- predictors --------------------------------------------------------
    def intensity_rows(self, species, x, y, month, year, z=None) -> sp.csr_matrix:
        """Design rows of the log intensity at arbitrary locations."""
        d = self.data
        x = np.atleast_1d(np.asarray(x, float))
        y = np.atleast_1d(np.asarray(y, float))
        A = projector(d.mesh, x, y) if self.spec.has_fields else sp.csr_matrix((x.size, d.mesh.n))
        if z is None:
            z = d.standardize_at(x, y, month, year)
        return self._row_block(species, A, month, year, z)

    def mark_rows(self, species, x, y, behavior, hyper: HyperState, z=None, month=None, year=None) -> sp.csr_matrix:
        d, lay = self.data, self.layout
        x = np.atleast_1d(np.asarray(x, float))
        y = np.atleast_1d(np.asarray(y, float))
        nrow = x.size
        behavior = np.broadcast_to(np.asarray(behavior), (nrow,))
        if z is None:
            z = d.standardize_at(x, y, month, year)
        missing = [c for c in self.spec.mark_covariates if c not in z]
        if missing:
            raise ModelError("marks", f"mark covariate(s) {missing} need a month and year")
        r = np.arange(nrow)
        rr, cc, vv = [], [], []
        for c in self.spec.mark_covariates:
            rr.append(r)
            cc.append(np.full(nrow, lay["mark_cov", species, c]))
            vv.append(np.broadcast_to(z[c], (nrow,)))
        rr.append(r)
        cc.append(np.array([lay["xi", species, int(b)] for b in behavior]))
        vv.append(np.ones(nrow))
        if self.spec.has_fields:
            rho = hyper.rho[0] if self.spec.tie_rho else hyper.rho[species]
            coo = projector(d.mesh, x, y).tocoo()
            rr.append(coo.row)
            cc.append(coo.col + lay.field_slices[species].start)
            vv.append(rho * coo.data)
        return sp.csr_matrix(
            (np.concatenate(vv), (np.concatenate(rr), np.concatenate(cc))), shape=(nrow, lay.dim)
        )


# ---------------------------------------------------------------------------
# functional surface
# ---------------------------------------------------------------------------


def log_intensity(model: JointLGCP, state, species, x, y, month, year, z=None) -> np.ndarray:
    """Linear predictor ``log lambda_g(s)`` at the given locations."""
    vec = state.vector if isinstance(state, LatentState) else np.asarray(state, float)
    return model.intensity_rows(species, x, y, month, year, z) @ vec


def lgcp_nll(model: JointLGCP, state) -> float:
    vec = state.vector if isinstance(state, LatentState) else np.asarray(state, float)
    return model.lgcp_nll(vec)


def nb_mark_nll(model: JointLGCP, state, hyper: HyperState) -> float:
    vec = state.vector if isinstance(state, LatentState) else np.asarray(state, float)
    return model.nb_mark_nll(vec, hyper)


def neg_log_posterior(model: JointLGCP, state, hyper: HyperState):
    """Value, gradient and sparse Hessian of the negative log posterior."""
    vec = state.vector if isinstance(state, LatentState) else np.asarray(state, float)
    return model.objective(vec, hyper)
