"""Marked point patterns and the sightings CSV format."""

from __future__ import annotations

import csv
import io as _io
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .geo import GeoError, inverse_project, project
from .io import atomic_write

SPECIES = ("beluga", "bowhead")
BEHAVIORS = ("dive", "feed", "mill", "other", "rest", "swim")
MONTHS = (7, 8, 9, 10)
MONTH_NAMES = {7: "Jul", 8: "Aug", 9: "Sep", 10: "Oct"}
CSV_COLUMNS = ("lon", "lat", "year", "month", "species", "behavior", "group_size")


class DataError(ValueError):
    """Bad input records; ``rows`` holds 1-based data row numbers."""

    def __init__(self, message, rows=()):
        self.rows = [int(r) for r in rows]
        if self.rows:
            shown = ", ".join(map(str, self.rows[:20]))
            message = f"{message} (rows {shown}{', ...' if len(self.rows) > 20 else ''})"
        super().__init__(message)


def species_index(name) -> int:
    key = str(name).strip().lower()
    if key not in SPECIES:
        raise KeyError(name)
    return SPECIES.index(key)


def behavior_index(name) -> int:
    key = str(name).strip().lower()
    if key not in BEHAVIORS:
        raise KeyError(name)
    return BEHAVIORS.index(key)


@dataclass(frozen=True, eq=False)
class MarkedPointPattern:
    """Sightings in planar km with categorical attributes and group-size marks.

    ``species`` and ``behavior`` are integer codes into :data:`SPECIES` and
    :data:`BEHAVIORS`.
    """

    x: np.ndarray
    y: np.ndarray
    species: np.ndarray
    month: np.ndarray
    year: np.ndarray
    behavior: np.ndarray
    group_size: np.ndarray

    def __post_init__(self):
        n = len(np.atleast_1d(self.x))
        cast = dict(x=float, y=float, species=np.int64, month=np.int64, year=np.int64, behavior=np.int64, group_size=np.int64)
        for name, dt in cast.items():
            v = np.atleast_1d(np.asarray(getattr(self, name), dtype=dt)).copy()
            if v.shape != (n,):
                raise ValueError(f"field {name} has shape {v.shape}, expected ({n},)")
            v.setflags(write=False)
            object.__setattr__(self, name, v)
        if np.any(self.group_size < 0):
            raise DataError("negative group size", np.flatnonzero(self.group_size < 0) + 1)

    def __len__(self) -> int:
        return len(self.x)

    @classmethod
    def empty(cls) -> "MarkedPointPattern":
        z = np.zeros(0)
        return cls(z, z, z, z, z, z, z)

    def subset(self, mask) -> "MarkedPointPattern":
        return MarkedPointPattern(
            self.x[mask], self.y[mask], self.species[mask], self.month[mask],
            self.year[mask], self.behavior[mask], self.group_size[mask],
        )

    def select(self, species=None, month=None, year=None) -> "MarkedPointPattern":
        mask = np.ones(len(self), bool)
        if species is not None:
            mask &= self.species == (species if isinstance(species, (int, np.integer)) else species_index(species))
        if month is not None:
            mask &= self.month == int(month)
        if year is not None:
            mask &= self.year == int(year)
        return self.subset(mask)

    @staticmethod
    def concatenate(parts) -> "MarkedPointPattern":
        parts = list(parts)
        if not parts:
            return MarkedPointPattern.empty()
        return MarkedPointPattern(*(np.concatenate([getattr(p, f) for p in parts]) for f in
                                    ("x", "y", "species", "month", "year", "behavior", "group_size")))

    @property
    def xy(self) -> np.ndarray:
        return np.stack([self.x, self.y], axis=1)


def read_sightings(path, center, months=MONTHS):
    """Parse a sightings CSV and project it about ``center``.

    Returns the pattern; invalid records raise :class:`DataError` naming all
    offending 1-based data rows.
    """
    path = Path(path)
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise DataError(f"{path}: empty file")
        header = [h.strip().lower() for h in reader.fieldnames]
        missing = [c for c in CSV_COLUMNS if c not in header]
        if missing:
            raise DataError(f"{path}: missing columns {missing}")
        reader.fieldnames = header
        rows = list(reader)
    bad = []
    lon, lat, yr, mo, sp_, bh, gs = ([] for _ in range(7))
    for i, r in enumerate(rows, start=1):
        try:
            lo, la = float(r["lon"]), float(r["lat"])
            y_, m_ = int(r["year"]), int(r["month"])
            s_, b_ = species_index(r["species"]), behavior_index(r["behavior"])
            g_ = float(r["group_size"])
            if g_ != int(g_) or g_ < 0 or m_ not in months or not (-180 <= lo <= 180 and -89.9 <= la <= 89.9):
                raise ValueError
        except (ValueError, KeyError, TypeError):
            bad.append(i)
            continue
        lon.append(lo), lat.append(la), yr.append(y_), mo.append(m_), sp_.append(s_), bh.append(b_), gs.append(int(g_))
    if bad:
        raise DataError(f"{path}: invalid records", bad)
    x, y = project(np.array(lon), np.array(lat), center) if lon else (np.zeros(0), np.zeros(0))
    return MarkedPointPattern(x, y, sp_, mo, yr, bh, gs)


def sightings_csv(pattern: MarkedPointPattern, center) -> str:
    lon, lat = inverse_project(pattern.x, pattern.y, center)
    buf = _io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for i in range(len(pattern)):
        w.writerow([
            repr(float(lon[i])), repr(float(lat[i])), int(pattern.year[i]), int(pattern.month[i]),
            SPECIES[pattern.species[i]], BEHAVIORS[pattern.behavior[i]], int(pattern.group_size[i]),
        ])
    return buf.getvalue()


def write_sightings(pattern: MarkedPointPattern, path, center) -> Path:
    return atomic_write(path, sightings_csv(pattern, center))


__all__ = [
    "SPECIES", "BEHAVIORS", "MONTHS", "DataError", "GeoError", "MarkedPointPattern",
    "read_sightings", "write_sightings", "sightings_csv", "species_index", "behavior_index",
]
