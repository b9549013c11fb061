"""Forward simulation of the marked two-species LGCP.

Seed discipline: every random stream is a ``numpy.random.Generator`` seeded
with :func:`derive_seed` (a splitmix64 chain over the master seed and the
stream's tags), so a stream depends only on its own tags and the master
seed, never on the order in which streams are drawn.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field

import numpy as np
import shapely

from .data import BEHAVIORS, MONTHS, SPECIES, MarkedPointPattern
from .geo import DomainPolygon
from .mesh import Mesh, build_mesh, dual_weights, projector
from .model import CovariateSource, ModelSpec, prepare_data
from .sparse import factorize, sample_gmrf
from .spde import SpdeParams, assemble_precision

_MASK64 = (1 << 64) - 1


def splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


def derive_seed(master: int, *tags) -> int:
    """64-bit stream seed: ``h <- splitmix64(h ^ splitmix64(tag))`` over the tags.

    String tags enter through CRC-32 of their UTF-8 bytes.
    """
    h = splitmix64(int(master) & _MASK64)
    for t in tags:
        k = zlib.crc32(str(t).encode()) if isinstance(t, str) else int(t) & _MASK64
        h = splitmix64(h ^ splitmix64(k))
    return h


def rng_for(master: int, *tags) -> np.random.Generator:
    return np.random.default_rng(derive_seed(master, *tags))


# ---------------------------------------------------------------------------
# building blocks
# ---------------------------------------------------------------------------


def simulate_field(mesh: Mesh, params: SpdeParams, seed, size=None) -> np.ndarray:
    """GMRF draw(s) at the mesh vertices."""
    F = factorize(assemble_precision(mesh, params))
    return sample_gmrf(F, seed, size=size)


def _domain_triangles(mesh: Mesh, domain: DomainPolygon) -> np.ndarray:
    polys = shapely.polygons(mesh.vertices[mesh.triangles])
    shapely.prepare(domain.geom)
    return np.flatnonzero(shapely.intersects(domain.geom, polys))


def simulate_pattern(mesh: Mesh, log_lambda, domain: DomainPolygon, seed, triangles=None):
    """Inhomogeneous Poisson points by thinning.

    ``log_lambda`` holds the log intensity at the vertices; inside each
    triangle it is interpolated linearly. Proposals come from a homogeneous
    process at the triangle's largest vertex intensity, so the acceptance
    probability never exceeds one. Points outside ``domain`` are dropped.
    """
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    eta = np.asarray(log_lambda, dtype=float)
    if not np.all(np.isfinite(eta) | (eta == -np.inf)):
        raise ValueError("log intensity must be finite or -inf")
    tris = _domain_triangles(mesh, domain) if triangles is None else triangles
    if tris.size == 0:
        return np.zeros(0), np.zeros(0)
    t = mesh.triangles[tris]
    ev = eta[t]
    bound = ev.max(axis=1)
    area = mesh.triangle_areas()[tris]
    with np.errstate(over="raise"):
        mean = np.where(np.isfinite(bound), area * np.exp(np.where(np.isfinite(bound), bound, 0.0)), 0.0)
    counts = rng.poisson(mean)
    total = int(counts.sum())
    if total == 0:
        return np.zeros(0), np.zeros(0)
    owner = np.repeat(np.arange(tris.size), counts)
    r1 = np.sqrt(rng.random(total))
    r2 = rng.random(total)
    bc = np.stack([1 - r1, r1 * (1 - r2), r1 * r2], axis=1)
    p = mesh.vertices[t[owner]]
    xy = np.einsum("ik,ikd->id", bc, p)
    with np.errstate(invalid="ignore"):
        eta_s = np.einsum("ik,ik->i", bc, np.where(np.isfinite(ev[owner]), ev[owner], -1e300))
    accept_p = np.exp(eta_s - bound[owner])
    assert np.all(accept_p <= 1.0 + 1e-12), "thinning bound violated"
    keep = rng.random(total) < accept_p
    xy = xy[keep]
    inside = domain.contains(xy[:, 0], xy[:, 1])
    xy = xy[inside]
    return xy[:, 0], xy[:, 1]


def simulate_marks(log_mu, k, seed) -> np.ndarray:
    """Negative binomial draws with mean ``exp(log_mu)`` and size ``k``."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    mu = np.exp(np.asarray(log_mu, dtype=float))
    k = np.broadcast_to(np.asarray(k, dtype=float), mu.shape)
    return rng.negative_binomial(k, k / (k + mu)).astype(np.int64)


# ---------------------------------------------------------------------------
# full dataset
# ---------------------------------------------------------------------------


def default_sst(x, y, month, year):
    """Smooth synthetic SST field in Kelvin with a seasonal offset."""
    x = np.asarray(x, float)
    y = np.asarray(y, float)
    return 271.5 + 0.9 * (month - 7) + 0.05 * (year % 10) + 0.8 * np.sin(0.7 * x + 0.3 * y) + 0.15 * y


@dataclass
class SimConfig:
    """Generative model settings.

    Per-species arrays are indexed in :data:`SPECIES` order. Month and year
    effects are drawn from their Gaussian priors unless given explicitly as
    ``{(species, month): value}`` / ``{(species, year): value}``.
    """

    domain: DomainPolygon
    spde: SpdeParams
    intercept: tuple = (3.0, 3.0)
    coef: dict = field(default_factory=dict)
    months: tuple = (7,)
    years: tuple = (2010,)
    species: tuple = SPECIES
    tau_month: tuple | None = None
    tau_year: tuple | None = None
    month_effects: dict | None = None
    year_effects: dict | None = None
    include_marks: bool = True
    mark_coef: dict = field(default_factory=dict)
    xi: tuple = ((0.662, 4.239, 2.322, 0.778, 1.136, 1.304), (0.825, 1.732, 1.360, 0.880, 0.883, 0.867))
    size: tuple = (1.727, 16.293)
    rho: tuple = (0.0, 0.0)
    behavior_probs: tuple = (0.2, 0.05, 0.1, 0.05, 0.1, 0.5)
    share_single_field: bool = False
    sst: object = default_sst
    inner_res: float | None = None
    outer_extension: float | None = None
    outer_res: float | None = None
    seed: int = 0

    def model_spec(self, **overrides) -> ModelSpec:
        random = self.tau_month is not None or self.month_effects is not None
        kw = dict(
            covariates=tuple(c for c in ("dcoast", "sst") if c in self.coef),
            months=tuple(self.months),
            years=tuple(self.years),
            species=tuple(self.species),
            include_marks=self.include_marks,
            share_single_field=self.share_single_field,
            random_effects=random,
            mark_covariates=tuple(c for c in ("dcoast",) if c in self.mark_coef),
        )
        kw.update(overrides)
        return ModelSpec(**kw)

    def covariates(self) -> CovariateSource:
        return CovariateSource(self.domain, self.sst)

    def build_mesh(self) -> Mesh:
        h = min(self.spde.h_x, self.spde.h_y)
        rng = max(self.spde.practical_ranges())
        inner = self.inner_res or h / 2
        ext = 2.0 * rng if self.outer_extension is None else self.outer_extension
        return build_mesh(self.domain, inner, ext, self.outer_res or max(4 * inner, rng / 3))


@dataclass
class SimTruth:
    fields: dict
    month_effects: dict
    year_effects: dict
    expected_counts: dict
    log_lambda: dict
    standardizers: dict
    weights: np.ndarray

    def to_dict(self, config: SimConfig) -> dict:
        return {
            "seed": config.seed,
            "spde": dict(h_x=config.spde.h_x, h_y=config.spde.h_y, h_xy=config.spde.h_xy, sigma=config.spde.sigma),
            "intercept": list(config.intercept),
            "coef": {k: list(v) for k, v in config.coef.items()},
            "mark_coef": {k: list(v) for k, v in config.mark_coef.items()},
            "xi": [list(r) for r in config.xi],
            "size": list(config.size),
            "rho": list(config.rho),
            "month_effects": {f"{SPECIES[g]}:{m}": v for (g, m), v in self.month_effects.items()},
            "year_effects": {f"{SPECIES[g]}:{t}": v for (g, t), v in self.year_effects.items()},
            "expected_counts": {f"{SPECIES[g]}:{m}:{t}": v for (g, m, t), v in self.expected_counts.items()},
            "standardizers": {k: dict(mean=s.mean, sd=s.sd) for k, s in self.standardizers.items()},
        }


def simulate_dataset(config: SimConfig, mesh: Mesh | None = None, weights=None):
    """Simulate a full marked two-species dataset.

    Returns ``(pattern, truth, mesh)``. Each species, stratum and component
    draws from its own seed stream.
    """
    mesh = config.build_mesh() if mesh is None else mesh
    dom = config.domain
    if weights is None:
        weights = dual_weights(mesh, dom)
    spec = config.model_spec(random_effects=False)
    cov = config.covariates()
    prep = prepare_data(MarkedPointPattern.empty(), mesh, dom, cov, spec, weights=weights)
    std = prep.standardizers
    tris = _domain_triangles(mesh, dom)
    used_v = np.unique(mesh.triangles[tris])
    vx, vy = mesh.vertices[used_v, 0], mesh.vertices[used_v, 1]
    codes = [SPECIES.index(s) for s in config.species]

    fields_, month_fx, year_fx = {}, {}, {}
    for g in codes:
        tag = ("field", "shared") if config.share_single_field else ("field", g)
        fields_[g] = simulate_field(mesh, config.spde, rng_for(config.seed, *tag))
        rng = rng_for(config.seed, "effects", g)
        for m in config.months:
            if config.month_effects is not None:
                month_fx[(g, m)] = float(config.month_effects.get((g, m), 0.0))
            elif config.tau_month is not None:
                month_fx[(g, m)] = float(rng.normal(0, 1 / np.sqrt(config.tau_month[g])))
            else:
                month_fx[(g, m)] = 0.0
        for t in config.years:
            if config.year_effects is not None:
                year_fx[(g, t)] = float(config.year_effects.get((g, t), 0.0))
            elif config.tau_year is not None:
                year_fx[(g, t)] = float(rng.normal(0, 1 / np.sqrt(config.tau_year[g])))
            else:
                year_fx[(g, t)] = 0.0

    z_d = std["dcoast"].apply(cov.dcoast(vx, vy)) if "dcoast" in std else None
    parts, expected, loglam = [], {}, {}
    for g in codes:
        for t in config.years:
            for m in config.months:
                eta = np.full(mesh.n, -np.inf)
                e = config.intercept[g] + month_fx[(g, m)] + year_fx[(g, t)] + fields_[g][used_v]
                if "dcoast" in config.coef:
                    e = e + config.coef["dcoast"][g] * z_d
                if "sst" in config.coef:
                    e = e + config.coef["sst"][g] * std["sst"].apply(cov.sst(vx, vy, m, t))
                eta[used_v] = e
                loglam[(g, m, t)] = eta
                expected[(g, m, t)] = float(np.sum(weights[used_v] * np.exp(e)))
                x, y = simulate_pattern(mesh, eta, dom, rng_for(config.seed, "pattern", g, m, t), triangles=tris)
                n = x.size
                rng_b = rng_for(config.seed, "behavior", g, m, t)
                beh = rng_b.choice(len(BEHAVIORS), size=n, p=np.asarray(config.behavior_probs) / np.sum(config.behavior_probs))
                if config.include_marks and n:
                    w_pts = projector(mesh, x, y) @ fields_[g]
                    log_mu = config.rho[g] * w_pts + np.asarray(config.xi[g])[beh]
                    if "dcoast" in config.mark_coef:
                        log_mu = log_mu + config.mark_coef["dcoast"][g] * std["dcoast"].apply(cov.dcoast(x, y))
                    sizes = simulate_marks(log_mu, config.size[g], rng_for(config.seed, "marks", g, m, t))
                else:
                    sizes = np.ones(n, dtype=np.int64)
                parts.append(MarkedPointPattern(x, y, np.full(n, g), np.full(n, m), np.full(n, t), beh, sizes))
    pattern = MarkedPointPattern.concatenate(parts)
    truth = SimTruth(fields_, month_fx, year_fx, expected, loglam, std, weights)
    return pattern, truth, mesh
