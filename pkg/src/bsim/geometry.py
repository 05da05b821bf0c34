"""Planar points, polygons and Monte-Carlo area fractions."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np


class GeometryError(ValueError):
    pass


@dataclass(frozen=True)
class Point2:
    x: float
    y: float

    def __post_init__(self):
        if not (math.isfinite(self.x) and math.isfinite(self.y)):
            raise GeometryError(f"non-finite point ({self.x}, {self.y})")

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y], dtype=float)


@dataclass(frozen=True)
class Polygon:
    """Simple polygon given as a single ring; the closing edge is implied."""

    vertices: tuple[Point2, ...]

    def __init__(self, vertices: Iterable[Point2 | Sequence[float]]):
        pts = tuple(v if isinstance(v, Point2) else Point2(float(v[0]), float(v[1])) for v in vertices)
        if len(pts) < 3:
            raise GeometryError("polygon needs at least 3 vertices")
        for a, b in zip(pts, pts[1:] + pts[:1]):
            if a == b:
                raise GeometryError(f"consecutive duplicate vertex {a}")
        object.__setattr__(self, "vertices", pts)

    @property
    def coords(self) -> np.ndarray:
        return np.array([[p.x, p.y] for p in self.vertices], dtype=float)

    def signed_area(self) -> float:
        xy = self.coords
        x, y = xy[:, 0], xy[:, 1]
        return 0.5 * float(np.sum(x * np.roll(y, -1) - np.roll(x, -1) * y))

    def check(self) -> None:
        if abs(self.signed_area()) <= 1e-15:
            raise GeometryError("degenerate polygon (zero area)")

    @classmethod
    def rectangle(cls, x0: float, y0: float, x1: float, y1: float) -> "Polygon":
        return cls([(x0, y0), (x1, y0), (x1, y1), (x0, y1)])

    @classmethod
    def from_json(cls, path: str | Path) -> "Polygon":
        with open(path) as fh:
            data = json.load(fh)
        return cls(data)

    def to_json(self, path: str | Path) -> None:
        with open(path, "w") as fh:
            json.dump([[p.x, p.y] for p in self.vertices], fh)


def euclidean_distance(a: Point2, b: Point2) -> float:
    return math.hypot(a.x - b.x, a.y - b.y)


def pairwise_sq_distances(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Squared distances between rows of ``a`` (n, 2) and rows of ``b`` (m, 2)."""
    diff = a[:, None, :] - b[None, :, :]
    return np.einsum("nmk,nmk->nm", diff, diff)


def contains_points(poly: Polygon, pts: np.ndarray) -> np.ndarray:
    """Vectorized even-odd test; points lying on an edge count as inside."""
    poly.check()
    pts = np.atleast_2d(np.asarray(pts, dtype=float))
    px, py = pts[:, 0], pts[:, 1]
    xy = poly.coords
    x0, y0 = xy[:, 0], xy[:, 1]
    x1, y1 = np.roll(x0, -1), np.roll(y0, -1)

    inside = np.zeros(len(pts), dtype=bool)
    on_edge = np.zeros(len(pts), dtype=bool)
    for ax, ay, bx, by in zip(x0, y0, x1, y1):
        cross = (bx - ax) * (py - ay) - (by - ay) * (px - ax)
        scale = max(abs(bx - ax), abs(by - ay), 1.0)
        within = (
            (np.minimum(ax, bx) - 1e-12 <= px) & (px <= np.maximum(ax, bx) + 1e-12)
            & (np.minimum(ay, by) - 1e-12 <= py) & (py <= np.maximum(ay, by) + 1e-12)
        )
        on_edge |= within & (np.abs(cross) <= 1e-12 * scale * scale)
        straddles = (ay > py) != (by > py)
        with np.errstate(divide="ignore", invalid="ignore"):
            x_cross = ax + (py - ay) * (bx - ax) / (by - ay)
        inside ^= straddles & (px < x_cross)
    return inside | on_edge


def contains(poly: Polygon, p: Point2) -> bool:
    return bool(contains_points(poly, p.as_array()[None, :])[0])


def area_fraction(
    center: Point2,
    eta: float,
    region: Polygon,
    n_samples: int = 100_000,
    seed: int = 0,
) -> float:
    """Share of an isotropic Gaussian (std ``eta``) around ``center`` that lands inside ``region``."""
    if eta <= 0:
        raise GeometryError("eta must be positive")
    if n_samples < 1:
        raise GeometryError("n_samples must be >= 1")
    region.check()
    rng = np.random.default_rng(seed)
    draws = center.as_array() + eta * rng.standard_normal((n_samples, 2))
    return float(np.mean(contains_points(region, draws)))
