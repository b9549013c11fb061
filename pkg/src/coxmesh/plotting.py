"""Static SVG renderings of prediction rasters and K-function envelopes."""

from __future__ import annotations

import io

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .io import atomic_write  # noqa: E402

# fixed ids and no timestamp so reruns give identical files
matplotlib.rcParams["svg.hashsalt"] = "coxmesh"


def _save(fig, path):
    buf = io.StringIO()
    fig.savefig(buf, format="svg", metadata={"Date": None}, bbox_inches="tight")
    plt.close(fig)
    return atomic_write(path, buf.getvalue())


def plot_raster(raster, path, title: str | None = None, domain=None, field: str = "mean"):
    """Heat map of a :class:`~coxmesh.infer.PredictionRaster` with the domain outline."""
    g = raster.grid
    values = getattr(raster, field)
    extent = (g.x0 - g.dx / 2, g.x0 + (g.nx - 0.5) * g.dx, g.y0 - g.dy / 2, g.y0 + (g.ny - 0.5) * g.dy)
    fig, ax = plt.subplots(figsize=(6, 5))
    im = ax.imshow(np.ma.masked_invalid(values), origin="lower", extent=extent, cmap="viridis", interpolation="nearest")
    fig.colorbar(im, ax=ax, label=f"{field} per cell")
    if domain is not None:
        xs, ys = np.asarray(domain.outer).T
        ax.plot(xs, ys, color="k", lw=0.8)
        for h in domain.holes:
            hx, hy = np.asarray(h).T
            ax.plot(hx, hy, color="k", lw=0.8)
    ax.set_xlabel("x (km)")
    ax.set_ylabel("y (km)")
    ax.set_aspect("equal")
    if title:
        ax.set_title(title)
    return _save(fig, path)


def plot_kfunction(result, path, title: str | None = None):
    """Normalized K-function with its simulation envelope band."""
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.fill_between(result.radii, result.lo, result.hi, color="0.8", label="95% envelope")
    ax.plot(result.radii, result.normalized, color="k", lw=1.2, label="observed")
    ax.axhline(0.0, color="0.4", lw=0.6, ls="--")
    ax.set_xlabel("r (km)")
    ax.set_ylabel(r"$K(r)/(\pi r^2) - 1$")
    ax.legend(frameon=False)
    if title:
        ax.set_title(title)
    return _save(fig, path)
