"""Toroidal k-means over periodic angle space (period 360 degrees per axis).

Distances use the per-dimension shortest angular difference; center updates
use the circular mean. Seeding is k-means++ adapted to the toroidal metric.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from mdsonify.trajio import FeatureSeries, ObservedChain, wrap_degrees

PERIOD = 360.0


class InfeasibleError(ValueError):
    """Fewer distinct frames than requested clusters."""


@dataclass(frozen=True)
class StateCenters:
    """k cluster centers on the torus, angles in degrees."""

    centers: np.ndarray  # (k, dim)
    converged: bool = True

    def __post_init__(self):
        centers = np.asarray(self.centers, dtype=float)
        if centers.ndim != 2 or centers.shape[0] < 2:
            raise ValueError("need k >= 2 centers")
        if np.any(centers < -180.0) or np.any(centers >= 180.0):
            raise ValueError("centers must be wrapped into [-180, 180)")
        for i in range(centers.shape[0]):
            dup = np.all(centers[i + 1:] == centers[i], axis=1)
            if np.any(dup):
                j = i + 1 + int(np.argmax(dup))
                raise ValueError(f"centers {i} and {j} are identical")
        object.__setattr__(self, "centers", centers)

    @property
    def k(self) -> int:
        return self.centers.shape[0]

    @property
    def dim(self) -> int:
        return self.centers.shape[1]


def angular_diff(a, b):
    """Signed shortest angular difference a - b in degrees, in [-180, 180)."""
    return wrap_degrees(np.asarray(a, dtype=float) - np.asarray(b, dtype=float))


def toroidal_dist2(points, centers):
    """Squared toroidal Euclidean distances, shape (n_points, n_centers)."""
    points = np.asarray(points, dtype=float)
    centers = np.asarray(centers, dtype=float)
    diff = angular_diff(points[:, None, :], centers[None, :, :])
    return np.einsum("ijk,ijk->ij", diff, diff)


def circular_mean(points, axis=0):
    """Per-dimension circular mean of angles in degrees."""
    rad = np.deg2rad(np.asarray(points, dtype=float))
    s = np.sin(rad).mean(axis=axis)
    c = np.cos(rad).mean(axis=axis)
    return wrap_degrees(np.rad2deg(np.arctan2(s, c)))


def _seed_centers(frames: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """k-means++ seeding with toroidal distances."""
    n = frames.shape[0]
    centers = np.empty((k, frames.shape[1]))
    centers[0] = frames[rng.integers(n)]
    d2 = toroidal_dist2(frames, centers[:1])[:, 0]
    for i in range(1, k):
        total = d2.sum()
        if total <= 0.0:
            # remaining mass degenerate: pick any frame distinct from chosen centers
            probs = np.full(n, 1.0 / n)
        else:
            probs = d2 / total
        centers[i] = frames[rng.choice(n, p=probs)]
        d2 = np.minimum(d2, toroidal_dist2(frames, centers[i:i + 1])[:, 0])
    return centers


def fit_centers(features: FeatureSeries, k: int, seed: int = 0,
                max_iter: int = 100) -> StateCenters:
    """Fit k toroidal k-means centers to the feature frames.

    Deterministic for a fixed seed. Returns best-so-far with
    ``converged=False`` if assignments still move after max_iter.
    """
    if k < 2:
        raise ValueError(f"k must be >= 2, got {k}")
    if max_iter < 1:
        raise ValueError("max_iter must be >= 1")
    frames = features.frames
    n_distinct = np.unique(frames, axis=0).shape[0]
    if n_distinct < k:
        raise InfeasibleError(
            f"only {n_distinct} distinct frames for k={k} clusters"
        )
    rng = np.random.default_rng(seed)
    centers = _seed_centers(frames, k, rng)
    labels = np.argmin(toroidal_dist2(frames, centers), axis=1)
    converged = False
    for _ in range(max_iter):
        for j in range(k):
            members = frames[labels == j]
            if members.shape[0] == 0:
                # re-seed empty cluster at the farthest point
                d2 = np.min(toroidal_dist2(frames, centers), axis=1)
                centers[j] = frames[int(np.argmax(d2))]
            else:
                centers[j] = circular_mean(members)
        new_labels = np.argmin(toroidal_dist2(frames, centers), axis=1)
        if np.array_equal(new_labels, labels):
            converged = True
            break
        labels = new_labels
    # exact duplicates can only arise from degenerate data; nudge apart
    centers = _dedupe(centers, frames)
    return StateCenters(centers=wrap_degrees(centers), converged=converged)


def _dedupe(centers: np.ndarray, frames: np.ndarray) -> np.ndarray:
    seen = set()
    free = [tuple(f) for f in np.unique(frames, axis=0)]
    for i, c in enumerate(centers):
        key = tuple(c)
        while key in seen:
            key = free.pop()
            centers[i] = np.array(key)
        seen.add(key)
    return centers


def assign(features: FeatureSeries, centers: StateCenters) -> ObservedChain:
    """Assign each frame to its nearest center (ties -> lowest index)."""
    if features.dim != centers.dim:
        raise ValueError(
            f"feature dim {features.dim} != center dim {centers.dim}"
        )
    labels = np.argmin(toroidal_dist2(features.frames, centers.centers), axis=1)
    return ObservedChain(states=labels, n_states=centers.k, dt=features.dt)


def save_centers(centers: StateCenters, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"k={centers.k} dim={centers.dim}\n")
        for row in centers.centers:
            fh.write(",".join(repr(float(v)) for v in row) + "\n")


def load_centers(path) -> StateCenters:
    from mdsonify.trajio import ParseError, _read_text_sections

    header, body = _read_text_sections(Path(path))
    if "k" not in header or "dim" not in header:
        raise ParseError(f"{path}: missing k/dim header")
    k, dim = int(header["k"]), int(header["dim"])
    rows = []
    for lineno, line in body:
        fields = line.split(",")
        if len(fields) != dim:
            raise ParseError(f"line {lineno}: expected {dim} fields")
        rows.append([float(f) for f in fields])
    if len(rows) != k:
        raise ParseError(f"{path}: expected {k} centers, found {len(rows)}")
    return StateCenters(centers=wrap_degrees(rows))
