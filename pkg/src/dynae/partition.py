"""Latent-space discretization and well-tempered resampling."""

import json
import math
from dataclasses import dataclass, field

import numpy as np


def regular_space_cluster(points, d_min):
    """Streaming regular-space clustering.

    Points are visited in order; a point becomes a new center when it is at
    least ``d_min`` away from every existing center.
    """
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    if points.shape[0] == 0:
        raise ValueError("cannot cluster an empty point set")
    if not d_min > 0:
        raise ValueError("d_min must be positive")
    d2 = d_min * d_min
    buf = np.empty((16, points.shape[1]))
    buf[0] = points[0]
    k = 1
    for p in points[1:]:
        diff = buf[:k] - p
        if np.min(np.einsum("ij,ij->i", diff, diff)) >= d2:
            if k == len(buf):
                buf = np.concatenate([buf, np.empty_like(buf)])
            buf[k] = p
            k += 1
    centers = buf[:k].copy()
    return centers


def assign_voronoi(points, centers, chunk=8192):
    """Index of the nearest center for every point (ties -> lowest index)."""
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    centers = np.atleast_2d(np.asarray(centers, dtype=np.float64))
    if centers.shape[0] == 0:
        raise ValueError("no centers")
    out = np.empty(points.shape[0], dtype=np.int64)
    for s in range(0, points.shape[0], chunk):
        p = points[s:s + chunk]
        d2 = ((p[:, None, :] - centers[None, :, :]) ** 2).sum(-1)
        out[s:s + chunk] = np.argmin(d2, axis=1)
    return out


def welltempered_counts(raw_counts, gamma, N=None):
    """Per-bin sample counts proportional to ``raw ** (1/gamma)``, summing to N.

    ``gamma=math.inf`` gives equal counts over the non-empty bins. Rounding
    is by largest remainder, ties going to the lower bin index.
    """
    raw = np.asarray(raw_counts, dtype=np.int64)
    if gamma < 1:
        raise ValueError("gamma must be >= 1")
    if np.any(raw < 0):
        raise ValueError("counts must be non-negative")
    N = int(raw.sum()) if N is None else int(N)
    if gamma == 1 and N == raw.sum():
        return raw.copy()
    occupied = raw > 0
    if not occupied.any():
        return np.zeros_like(raw)
    if math.isinf(gamma):
        weights = occupied.astype(np.float64)
    else:
        weights = np.where(occupied, raw.astype(np.float64) ** (1.0 / gamma), 0.0)
    quota = N * weights / weights.sum()
    base = np.floor(quota + 1e-9).astype(np.int64)
    base = np.minimum(base, np.ceil(quota).astype(np.int64))
    left = N - int(base.sum())
    if left > 0:
        frac = quota - base
        # stable sort on -frac keeps lower indices first among equal remainders
        order = np.argsort(-np.round(frac, 12), kind="stable")
        base[order[:left]] += 1
    return base


def resample_dataset(labels, counts, rng):
    """Draw ``counts[k]`` sample indices from bin ``k``.

    Without replacement while the bin is large enough, with replacement
    otherwise. Returns one index array per bin.
    """
    labels = np.asarray(labels)
    counts = np.asarray(counts, dtype=np.int64)
    members = [np.flatnonzero(labels == k) for k in range(len(counts))]
    out = []
    for k, (idx, n) in enumerate(zip(members, counts)):
        if n > 0 and idx.size == 0:
            raise ValueError(f"bin {k} is empty but {n} samples were requested")
        if n <= idx.size:
            out.append(np.sort(rng.choice(idx, n, replace=False)) if n else idx[:0])
        else:
            out.append(np.sort(rng.choice(idx, n, replace=True)))
    return out


@dataclass
class BinPartition:
    centers: np.ndarray
    d_min: float
    assignment: np.ndarray
    raw_counts: np.ndarray
    resampled_counts: np.ndarray = None
    gamma: float = 1.0
    members: list = field(default=None, repr=False)

    @property
    def K(self):
        return len(self.centers)

    @classmethod
    def build(cls, points, d_min, gamma=2.0, rng=None):
        centers = regular_space_cluster(points, d_min)
        assignment = assign_voronoi(points, centers)
        raw = np.bincount(assignment, minlength=len(centers))
        counts = welltempered_counts(raw, gamma, len(assignment))
        part = cls(centers, d_min, assignment, raw, counts, gamma)
        if rng is not None:
            part.members = resample_dataset(assignment, counts, rng)
        return part

    def to_dict(self):
        return {
            "d_min": self.d_min,
            "gamma": self.gamma if math.isfinite(self.gamma) else "inf",
            "K": self.K,
            "centers": np.asarray(self.centers).tolist(),
            "raw_counts": np.asarray(self.raw_counts).tolist(),
            "resampled_counts": (None if self.resampled_counts is None
                                 else np.asarray(self.resampled_counts).tolist()),
        }

    def dump(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=1)


def choose_d_min(points, target=(20, 100), max_iter=40):
    """Bisect (in log scale) for a d_min whose clustering gives K in ``target``."""
    sub = np.atleast_2d(np.asarray(points, dtype=np.float64))
    lo_k, hi_k = target
    span = float(np.max(np.ptp(sub, axis=0))) or 1.0
    lo, hi = span * 1e-4, span
    mid = math.sqrt(lo * hi)
    for _ in range(max_iter):
        mid = math.sqrt(lo * hi)
        k = len(regular_space_cluster(sub, mid))
        if k > hi_k:
            lo = mid
        elif k < lo_k:
            hi = mid
        else:
            return mid
    return mid
