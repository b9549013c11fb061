"""``coxmesh`` command-line front end.

Subcommands: ``mesh``, ``simulate``, ``fit``, ``predict``, ``evaluate`` and
``kfunc``. Exit codes: 0 success, 1 configuration error, 2 data error,
3 numerical failure. Every command writes its outputs atomically and a
``run.json`` provenance record next to them.
"""

from __future__ import annotations

import argparse
import logging
import os
import platform
import sys
import time
from pathlib import Path

logger = logging.getLogger("coxmesh")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERICAL = 0, 1, 2, 3
DEFAULT_CENTER = (-150.0, 71.0)
THREAD_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS", "NUMBA_NUM_THREADS")


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------


def _common(p):
    p.add_argument("--config", help="TOML or JSON run configuration")
    p.add_argument("--out-dir", help="directory for outputs (default: alongside --out, else cwd)")
    p.add_argument("--seed", type=int, help="master seed (overrides the config)")
    p.add_argument("--threads", type=int, help="worker cap (default: $COXMESH_THREADS)")
    p.add_argument("--verbose", "-v", action="count", default=0)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="coxmesh", description="Marked LGCP fitting on SPDE meshes")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("mesh", help="build a constrained triangular mesh for a domain")
    _common(p)
    p.add_argument("--domain", help="GeoJSON polygon")
    p.add_argument("--inner-res", type=float)
    p.add_argument("--outer-extension", type=float)
    p.add_argument("--outer-res", type=float)
    p.add_argument("--min-angle", type=float)
    p.add_argument("--out", default="mesh", help="output stem (writes .mesh.json and .mesh.bin)")

    p = sub.add_parser("simulate", help="simulate a marked two-species dataset")
    _common(p)
    p.add_argument("--out", default="data.csv")
    p.add_argument("--truth", default="truth.json")

    p = sub.add_parser("fit", help="fit the joint marked LGCP")
    _common(p)
    p.add_argument("--out", default=None, help="fit report (default: OUT_DIR/fit.json)")

    p = sub.add_parser("predict", help="intensity raster for one species and stratum")
    _common(p)
    p.add_argument("--fit", required=True)
    p.add_argument("--species")
    p.add_argument("--month", type=int)
    p.add_argument("--year", type=int)
    p.add_argument("--dx", type=float)
    p.add_argument("--dy", type=float)
    p.add_argument("--n-draws", type=int)
    p.add_argument("--out", default="raster.csv")

    p = sub.add_parser("evaluate", help="WAIC and mean log score")
    _common(p)
    p.add_argument("--fit", required=True)
    p.add_argument("--data", help="sightings CSV to score (default: the fitted data)")
    p.add_argument("--n-draws", type=int)
    p.add_argument("--units", choices=("combined", "location", "marks"))
    p.add_argument("--out", default="scores.json")

    p = sub.add_parser("kfunc", help="inhomogeneous K-function with simulation envelope")
    _common(p)
    p.add_argument("--fit", required=True)
    p.add_argument("--species")
    p.add_argument("--month", type=int)
    p.add_argument("--year", type=int)
    p.add_argument("--n-sim", type=int)
    p.add_argument("--r-max", type=float)
    p.add_argument("--n-radii", type=int)
    p.add_argument("--correction", choices=("border", "translation", "none"))
    p.add_argument("--out", default="k.csv")
    return ap


def _apply_threads(n):
    if n is None:
        env = os.environ.get("COXMESH_THREADS")
        n = int(env) if env else None
    if n is not None:
        if n < 1:
            raise ValueError("--threads must be at least 1")
        for var in THREAD_VARS:
            os.environ[var] = str(n)
    return n


# ---------------------------------------------------------------------------
# pipeline helpers
# ---------------------------------------------------------------------------


def load_domain(cfg):
    from .geo import read_domain

    path = cfg.path("domain")
    center = cfg.raw.get("center")
    domain, file_center = read_domain(path, center)
    center = center or file_center or DEFAULT_CENTER
    return domain, tuple(float(c) for c in center)


def covariate_source(cfg, domain):
    from .geo import read_grid
    from .model import CovariateSource
    from .sim import default_sst

    sst = cfg.section("covariates").get("sst")
    grids = cfg.sst_grid_paths()
    if sst == "synthetic":
        return CovariateSource(domain, default_sst)
    if sst not in (None, "grids"):
        from .model import ConfigError

        raise ConfigError("covariates.sst", "covariates.sst must be 'synthetic' or 'grids'")
    if grids:
        table = {}
        for p in grids:
            g = read_grid(p)
            if g.month is None or g.year is None:
                from .geo import GeoError

                raise GeoError(f"{p}: SST grid needs month and year")
            table[(int(g.month), int(g.year))] = g
        return CovariateSource(domain, table)
    return CovariateSource(domain, None)


def load_mesh(cfg, domain):
    from .mesh import build_mesh, dual_weights, read_mesh

    mpath = cfg.path("mesh", required=False)
    if mpath is not None:
        mesh, weights = read_mesh(mpath)
        return mesh, (weights if weights is not None else dual_weights(mesh, domain))
    ms = cfg.section("mesh")
    x0, y0, x1, y1 = domain.bounds
    inner = float(ms.get("inner_res", max(x1 - x0, y1 - y0) / 30))
    mesh = build_mesh(
        domain, inner, float(ms.get("outer_extension", 0.0)),
        ms.get("outer_res"), min_angle=float(ms.get("min_angle", 20.0)),
    )
    return mesh, dual_weights(mesh, domain)


def snap_pattern(pattern, domain):
    """Snap sightings just outside the domain onto it; drop those further out."""
    from dataclasses import replace

    from .geo import snap_to_domain

    x, y, keep, snapped = snap_to_domain(pattern.x, pattern.y, domain)
    if snapped.any():
        logger.info("snapped %d sighting(s) onto the domain boundary", int(snapped.sum()))
    if not keep.all():
        logger.warning("dropping %d sighting(s) outside the domain", int((~keep).sum()))
    kept = pattern.subset(keep)
    return replace(kept, x=x, y=y) if snapped.any() else kept


def build_model(cfg):
    """Read inputs named by ``cfg`` and assemble the joint model."""
    from .data import read_sightings
    from .model import JointLGCP, ModelSpec, prepare_data

    cfg.check_paths(("data", "domain", "mesh"))
    domain, center = load_domain(cfg)
    spec = ModelSpec.from_dict(cfg.section("model"))
    pattern = snap_pattern(read_sightings(cfg.path("data"), center, months=spec.months), domain)
    mesh, weights = load_mesh(cfg, domain)
    cov = covariate_source(cfg, domain)
    data = prepare_data(pattern, mesh, domain, cov, spec, weights=weights)
    return JointLGCP(data), center


def initial_hyper(init: dict, domain):
    import numpy as np

    from .model import ConfigError, HyperState
    from .spde import SpdeParams

    known = {"h_x", "h_y", "h_xy", "sigma", "size", "rho", "tau_month", "tau_year"}
    for k in init:
        if k not in known:
            raise ConfigError(f"inference.init.{k}")
    x0, y0, x1, y1 = domain.bounds
    h0 = float(np.hypot(x1 - x0, y1 - y0)) / 10
    spde = SpdeParams(float(init.get("h_x", h0)), float(init.get("h_y", h0)),
                      float(init.get("h_xy", 0.0)), float(init.get("sigma", 1.0)))
    return HyperState.from_params(spde, size=init.get("size", 1.0), rho=init.get("rho", 0.0),
                                  tau_month=init.get("tau_month", 10.0), tau_year=init.get("tau_year", 4.0))


def fit_document(fit, cfg, center) -> dict:
    """JSON-ready fit report plus the state needed to reload the fit."""
    import numpy as np

    from .infer import summaries
    from .sparse import quad_form

    rows = summaries(fit)
    model = fit.model
    P, ldP = model.prior_precision(fit.hyper)
    value, _, _ = model.objective(fit.mode, fit.hyper, hessian=False)
    nll = value - 0.5 * quad_form(P, fit.mode)
    sp = fit.hyper.spde
    hyper = {
        "h_x": sp.h_x, "h_y": sp.h_y, "h_xy": sp.h_xy, "sigma": sp.sigma,
        "size": {s: float(fit.hyper.size[g]) for g, s in enumerate(("beluga", "bowhead"))},
        "rho": fit.hyper.rho.tolist(),
        "tau_month": np.exp(fit.hyper.log_tau_month).tolist(),
        "tau_year": np.exp(fit.hyper.log_tau_year).tolist(),
        "summary": [r for r in rows if r["kind"] == "hyper"],
    }
    clean = lambda r: {k: (None if isinstance(v, float) and not np.isfinite(v) else v) for k, v in r.items()}
    return {
        "converged": bool(fit.converged),
        "hyper": {k: (v if k != "summary" else [clean(r) for r in v]) for k, v in hyper.items()},
        "fixed_effects": [clean({k: r[k] for k in ("name", "mean", "sd", "q025", "q975")}) for r in rows if r["kind"] == "fixed"],
        "random_effects": [clean({k: r[k] for k in ("name", "mean", "sd", "q025", "q975")}) for r in rows if r["kind"] in ("month", "year")],
        "diagnostics": {
            "nll": float(nll),
            "logdet": float(fit.factor.logdet),
            "prior_logdet": float(ldP),
            "log_marginal": float(fit.log_marginal),
            "iters": int(fit.n_evals),
            "inner_iters": int(fit.inner_iterations),
            "n_points": int(len(model.data.pattern)),
            "n_vertices": int(model.data.mesh.n),
            "latent_dim": int(model.layout.dim),
        },
        "state": {
            "center": list(center),
            "hyper_state": fit.hyper.to_dict(),
            "free": list(fit.free_names),
            "hyper_cov": None if fit.hyper_cov is None else fit.hyper_cov.tolist(),
            "mode": fit.mode.tolist(),
        },
        "config": cfg.resolved(),
    }


def load_fit(path):
    """Rebuild a fit from a ``fit.json`` written by ``coxmesh fit``."""
    from . import config as cfgmod
    from .infer import fit_from_mode
    from .io import read_json
    from .model import ConfigError, HyperState

    path = Path(path)
    if not path.exists():
        raise ConfigError("--fit", f"fit file not found: {path}")
    doc = read_json(path)
    cfg = cfgmod.from_dict(doc["config"], base_dir=path.parent)
    model, center = build_model(cfg)
    st = doc["state"]
    fit = fit_from_mode(model, HyperState.from_dict(st["hyper_state"]), st["mode"], st["free"],
                        st["hyper_cov"], converged=doc["converged"])
    return fit, cfg, tuple(st["center"])


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def _config(args):
    from . import config as cfgmod

    if args.config:
        return cfgmod.load_config(args.config)
    return cfgmod.from_dict({}, ".")


def _out_dir(args, out=None) -> Path:
    if args.out_dir:
        return Path(args.out_dir)
    if out is not None and Path(out).parent != Path(""):
        return Path(out).parent
    return Path(".")


def _out_path(args, name) -> Path:
    p = Path(name)
    if args.out_dir and not p.is_absolute():
        return Path(args.out_dir) / p
    return p


def _seed(args, cfg) -> int:
    return int(args.seed) if args.seed is not None else cfg.seed


def cmd_mesh(args):
    from . import config as cfgmod
    from .geo import read_domain
    from .mesh import build_mesh, dual_weights, write_mesh

    cfg = _config(args)
    ms = cfg.section("mesh")
    dom_path = Path(args.domain) if args.domain else cfg.path("domain")
    if not dom_path.exists():
        raise cfgmod.ConfigError("--domain", f"domain file not found: {dom_path}")
    domain, _ = read_domain(dom_path, cfg.raw.get("center"))
    inner = args.inner_res if args.inner_res is not None else ms.get("inner_res")
    if inner is None:
        raise cfgmod.ConfigError("mesh.inner_res", "mesh needs --inner-res or mesh.inner_res")
    ext = args.outer_extension if args.outer_extension is not None else ms.get("outer_extension", 0.0)
    outer = args.outer_res if args.outer_res is not None else ms.get("outer_res")
    angle = args.min_angle if args.min_angle is not None else ms.get("min_angle", 20.0)
    mesh = build_mesh(domain, float(inner), float(ext), outer, min_angle=float(angle))
    weights = dual_weights(mesh, domain)
    out = _out_path(args, args.out)
    files = write_mesh(mesh, out, weights)
    logger.info("mesh: %d vertices, %d triangles", mesh.n, mesh.m)
    return cfg, [str(f) for f in files], {"n_vertices": mesh.n, "n_triangles": mesh.m}


def simulation_config(cfg, domain, seed):
    from .model import ConfigError
    from .sim import SimConfig
    from .spde import SpdeParams

    s = cfg.section("simulate")
    if "spde" not in s:
        raise ConfigError("simulate.spde", "simulate.spde is required")
    spde_keys = {"h_x", "h_y", "h_xy", "sigma"}
    for k in s["spde"]:
        if k not in spde_keys:
            raise ConfigError(f"simulate.spde.{k}")
    kw = dict(s)
    kw["spde"] = SpdeParams(**{k: float(v) for k, v in s["spde"].items()})
    for k in ("intercept", "months", "years", "species", "tau_month", "tau_year", "size", "rho", "behavior_probs"):
        if k in kw and kw[k] is not None:
            kw[k] = tuple(kw[k])
    if "xi" in kw:
        kw["xi"] = tuple(tuple(r) for r in kw["xi"])
    for k in ("coef", "mark_coef"):
        if k in kw:
            kw[k] = {c: tuple(v) for c, v in kw[k].items()}
    sst = cfg.section("covariates").get("sst", "synthetic")
    if sst != "synthetic":
        src = covariate_source(cfg, domain)
        kw["sst"] = src.sst_source
    return SimConfig(domain=domain, seed=seed, **kw)


def cmd_simulate(args):
    from .data import write_sightings
    from .io import write_json
    from .sim import simulate_dataset

    cfg = _config(args)
    cfg.check_paths(("domain",))
    domain, center = load_domain(cfg)
    seed = _seed(args, cfg)
    sc = simulation_config(cfg, domain, seed)
    mesh = None
    if cfg.path("mesh", required=False) is not None:
        mesh, _ = load_mesh(cfg, domain)
    pattern, truth, mesh = simulate_dataset(sc, mesh=mesh)
    out = _out_path(args, args.out)
    tpath = _out_path(args, args.truth)
    write_sightings(pattern, out, center)
    doc = truth.to_dict(sc)
    doc.update(center=list(center), n_points=len(pattern), n_vertices=mesh.n)
    write_json(tpath, doc)
    logger.info("simulated %d sightings", len(pattern))
    return cfg, [str(out), str(tpath)], {"n_points": len(pattern)}


def cmd_fit(args):
    from .infer import FitOptions, optimize_hyper, report_csv, summaries
    from .io import atomic_write, write_json

    cfg = _config(args)
    model, center = build_model(cfg)
    inf = cfg.section("inference")
    init = initial_hyper(inf.pop("init", {}), model.data.domain)
    opts = FitOptions.from_dict(inf)
    logger.info("fitting: %d points, %d vertices, latent dimension %d",
                len(model.data.pattern), model.data.mesh.n, model.layout.dim)
    fit = optimize_hyper(model, init, opts)
    out_dir = _out_dir(args, args.out)
    out = Path(args.out) if args.out else out_dir / "fit.json"
    write_json(out, fit_document(fit, cfg, center))
    rep = out.with_name(out.stem + "_summary.csv")
    atomic_write(rep, report_csv(summaries(fit)))
    return cfg, [str(out), str(rep)], {"converged": fit.converged, "log_marginal": fit.log_marginal}


def _species_arg(value, fit):
    from .data import SPECIES

    if value is None:
        return fit.model.spec.species_codes[0]
    return SPECIES.index(str(value).lower())


def _stratum(args, fit, section):
    spec = fit.model.spec
    month = args.month if args.month is not None else section.get("month", spec.months[0])
    year = args.year if args.year is not None else section.get("year", spec.years[0])
    return int(month), int(year)


def cmd_predict(args):
    import json

    import numpy as np

    from .data import SPECIES
    from .geo import CovariateGrid
    from .infer import predict_intensity, raster_csv
    from .io import atomic_write

    fit, cfg, center = load_fit(args.fit)
    sec = cfg.section("predict")
    g = _species_arg(args.species or sec.get("species"), fit)
    month, year = _stratum(args, fit, sec)
    dx = float(args.dx or sec.get("dx", 5.0))
    dy = float(args.dy or sec.get("dy", dx))
    n_draws = int(args.n_draws if args.n_draws is not None else sec.get("n_draws", 200))
    x0, y0, x1, y1 = fit.model.data.domain.bounds
    nx, ny = max(int(np.ceil((x1 - x0) / dx)), 1), max(int(np.ceil((y1 - y0) / dy)), 1)
    grid = CovariateGrid(x0 + dx / 2, y0 + dy / 2, dx, dy, np.zeros((ny, nx)), month=month, year=year)
    seed = _seed(args, cfg)
    r = predict_intensity(fit, grid, g, month, year, n_draws=n_draws, seed=seed)
    out = _out_path(args, args.out)
    atomic_write(out, raster_csv(r))
    side = out.with_suffix(".grid.json")
    meta = grid.geometry()
    meta.update(month=month, year=year, species=SPECIES[g], quantity="expected sightings per cell")
    atomic_write(side, json.dumps(meta, indent=2, sort_keys=True) + "\n")
    files = [str(out), str(side)]
    if cfg.section("outputs").get("plots", True):
        from .plotting import plot_raster

        svg = out.with_suffix(".svg")
        plot_raster(r, svg, f"{SPECIES[g]} {month}/{year}", domain=fit.model.data.domain)
        files.append(str(svg))
    return cfg, files, {"cells": int(np.isfinite(r.mean).sum())}


def cmd_evaluate(args):
    from .data import read_sightings
    from .evaluation import mean_log_score, waic
    from .io import write_json
    from .model import ConfigError

    fit, cfg, center = load_fit(args.fit)
    sec = cfg.section("evaluate")
    pattern = None
    if args.data:
        if not Path(args.data).exists():
            raise ConfigError("--data", f"data file not found: {args.data}")
        pattern = read_sightings(args.data, center, months=fit.model.spec.months)
    n_draws = int(args.n_draws if args.n_draws is not None else sec.get("n_draws", 500))
    units = args.units or sec.get("units", "combined")
    seed = _seed(args, cfg)
    rep = waic(fit, pattern, n_draws=n_draws, seed=seed, units=units)
    mls = mean_log_score(fit, pattern, n_draws=max(100, n_draws // 5), seed=seed, units=units)
    doc = {"waic": rep.to_dict(), "mean_log_score": mls, "seed": seed, "units": units}
    out = _out_path(args, args.out)
    write_json(out, doc)
    return cfg, [str(out)], {"waic": rep.waic}


def cmd_kfunc(args):
    import numpy as np

    from .data import SPECIES
    from .evaluation import k_envelope
    from .io import atomic_write

    fit, cfg, _ = load_fit(args.fit)
    sec = cfg.section("kfunc")
    g = _species_arg(args.species or sec.get("species"), fit)
    month, year = _stratum(args, fit, sec)
    x0, y0, x1, y1 = fit.model.data.domain.bounds
    r_max = float(args.r_max or sec.get("r_max", 0.25 * min(x1 - x0, y1 - y0)))
    n_r = int(args.n_radii or sec.get("n_radii", 25))
    radii = r_max * np.arange(1, n_r + 1) / n_r
    n_sim = int(args.n_sim or sec.get("n_sim", 99))
    corr = args.correction or sec.get("correction", "border")
    res = k_envelope(fit, g, month, year, radii, n_sim=n_sim, seed=_seed(args, cfg), correction=corr)
    out = _out_path(args, args.out)
    atomic_write(out, res.to_csv())
    files = [str(out)]
    if cfg.section("outputs").get("plots", True):
        from .plotting import plot_kfunction

        svg = out.with_suffix(".svg")
        plot_kfunction(res, svg, f"{SPECIES[g]} {month}/{year}")
        files.append(str(svg))
    return cfg, files, {"inside_fraction": res.inside_fraction()}


COMMANDS = {
    "mesh": cmd_mesh, "simulate": cmd_simulate, "fit": cmd_fit,
    "predict": cmd_predict, "evaluate": cmd_evaluate, "kfunc": cmd_kfunc,
}


def _versions():
    import numpy
    import scipy
    import shapely

    from . import __version__

    return {"python": platform.python_version(), "numpy": numpy.__version__, "scipy": scipy.__version__,
            "shapely": shapely.__version__, "coxmesh": __version__}


def _write_run(args, argv, cfg, files, summary, wall, started, out_dir):
    from .io import write_json

    rec = {
        "command": args.command,
        "argv": list(argv),
        "config": str(cfg.source) if cfg is not None and cfg.source else None,
        "config_sha256": cfg.digest if cfg is not None else None,
        "seed": _seed(args, cfg) if cfg is not None else args.seed,
        "outputs": files,
        "summary": summary,
        "versions": _versions(),
        "started": started,
        "wall_time_s": wall,
    }
    write_json(Path(out_dir) / "run.json", rec)


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        _apply_threads(args.threads)
    except ValueError as exc:
        print(f"coxmesh: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    from .data import DataError
    from .geo import GeoError
    from .infer import InferenceError
    from .mesh import MeshError
    from .model import ConfigError, ModelError
    from .sparse import NotPositiveDefiniteError

    started = time.strftime("%Y-%m-%dT%H:%M:%S%z")
    t0 = time.perf_counter()
    try:
        cfg, files, summary = COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"coxmesh: config error [{exc.key}]: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (MeshError, ModelError, InferenceError, NotPositiveDefiniteError) as exc:
        comp = getattr(exc, "component", type(exc).__name__)
        print(f"coxmesh: numerical failure [{comp}]: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (DataError, GeoError) as exc:
        print(f"coxmesh: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except FileNotFoundError as exc:
        print(f"coxmesh: config error: file not found: {exc.filename}", file=sys.stderr)
        return EXIT_CONFIG
    out_dir = _out_dir(args, files[0] if files else None)
    _write_run(args, argv, cfg, files, summary, time.perf_counter() - t0, started, out_dir)
    for f in files:
        print(f)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
