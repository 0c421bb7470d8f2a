"""Quantitative checks of a learned representation against known factors."""

import csv
from dataclasses import asdict, dataclass

import numpy as np
from scipy import stats

from .errors import ShapeError


@dataclass
class RecoveryReport:
    affine_r2: float
    affine_r2_per_dim: list
    procrustes_error: float
    procrustes_scale: float
    correlation: list
    rank_deficient: bool

    def to_dict(self):
        return asdict(self)


def _as_frames(a, name):
    a = np.asarray(a, dtype=np.float64)
    if a.ndim == 1:
        a = a[:, None]
    if a.ndim != 2:
        raise ShapeError(f"{name} must be (frames, dims)")
    return a


def affine_recovery(z, truth):
    """How well the true factors are explained by the learned coordinates.

    * affine R^2: least-squares fit ``truth ~ A z + b``, R^2 per true
      dimension, averaged.
    * Procrustes error: residual of the best similarity transform
      (rotation/reflection, uniform scale, translation) from z onto truth,
      relative to the centered sum of squares of truth. Zero only when z is
      an exact similarity image of truth.
    """
    z = _as_frames(z, "z")
    truth = _as_frames(truth, "truth")
    if z.shape[0] != truth.shape[0]:
        raise ShapeError("z and truth differ in frame count")
    if z.shape[1] != truth.shape[1]:
        raise ShapeError("z and truth differ in dimension")
    zc = z - z.mean(axis=0)
    tc = truth - truth.mean(axis=0)
    rank_deficient = bool(np.linalg.matrix_rank(zc) < z.shape[1])

    design = np.column_stack([zc, np.ones(len(zc))])
    coef, *_ = np.linalg.lstsq(design, tc, rcond=None)
    resid = tc - design @ coef
    sst = np.sum(tc * tc, axis=0)
    r2 = np.where(sst > 0, 1.0 - np.sum(resid * resid, axis=0) / np.where(sst > 0, sst, 1.0), 0.0)
    r2 = np.clip(r2, 0.0, 1.0)

    u, s, vt = np.linalg.svd(zc.T @ tc)
    rot = u @ vt
    zz = float(np.sum(zc * zc))
    scale = float(s.sum() / zz) if zz > 0 else 0.0
    fit = scale * zc @ rot
    total = float(np.sum(tc * tc))
    err = float(np.sum((tc - fit) ** 2) / total) if total > 0 else 0.0

    with np.errstate(invalid="ignore", divide="ignore"):
        corr = np.corrcoef(zc.T, tc.T)[: z.shape[1], z.shape[1]:]
    corr = np.nan_to_num(corr)
    return RecoveryReport(float(r2.mean()), r2.tolist(), max(err, 0.0), scale,
                          corr.tolist(), rank_deficient)


def distribution_shape(z):
    """Per-dimension shape statistics after standardization.

    ``kurtosis`` is the plain fourth standardized moment (uniform 1.8,
    Gaussian 3.0). ``spread_ratio`` is the observed range divided by the
    range of a uniform with the same variance (2 * sqrt(3)); it grows past 1
    for heavy or Gaussian tails. ``ks_uniform``/``ks_gaussian`` are
    Kolmogorov-Smirnov statistics against the moment-matched uniform and
    Gaussian.
    """
    z = _as_frames(z, "z")
    if z.shape[0] < 100:
        raise ValueError("need at least 100 frames")
    out = []
    for col in z.T:
        sd = col.std()
        if not sd > 1e-12 * max(1.0, abs(col.mean())):
            out.append({"degenerate": True, "kurtosis": None, "spread_ratio": None,
                        "ks_uniform": None, "ks_gaussian": None})
            continue
        s = (col - col.mean()) / sd
        r3 = np.sqrt(3.0)
        out.append({
            "degenerate": False,
            "kurtosis": float(np.mean(s ** 4)),
            "spread_ratio": float(np.ptp(s) / (2.0 * r3)),
            "ks_uniform": float(stats.kstest(s, stats.uniform(-r3, 2 * r3).cdf).statistic),
            "ks_gaussian": float(stats.kstest(s, stats.norm.cdf).statistic),
        })
    return out


def field_grid(lo, hi, n):
    """Regular grid over a box; returns points of shape (prod(n), d)."""
    lo, hi = np.atleast_1d(lo).astype(float), np.atleast_1d(hi).astype(float)
    if lo.shape != hi.shape:
        raise ShapeError("lo and hi differ in dimension")
    n = np.broadcast_to(np.atleast_1d(n).astype(int), lo.shape)
    axes = [np.linspace(a, b, k) for a, b, k in zip(lo, hi, n)]
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.column_stack([m.ravel() for m in mesh])


def export_fields(prior, lo, hi, n, path=None):
    """Evaluate force and diffusion of a prior on a grid.

    Returns rows (z_1..z_d, f_1..f_d, M_11..M_dd) and writes them as CSV
    when ``path`` is given.
    """
    pts = field_grid(lo, hi, n)
    f = prior.force(pts)
    M = prior.diffusion(pts)
    d = pts.shape[1]
    header = ([f"z{i + 1}" for i in range(d)] + [f"f{i + 1}" for i in range(d)]
              + [f"M{i + 1}{i + 1}" for i in range(d)])
    rows = np.column_stack([pts, f, M])
    if path is not None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            w.writerows(rows.tolist())
    return header, rows


def free_energy_histogram(z, bins=30, floor_count=0.5, range_=None):
    """Free energy ``F = -log p`` (kT = 1) from a histogram of z, shifted so
    its minimum is 0.

    p is the fraction of samples per bin. Empty bins get the probability of
    ``floor_count`` samples, which caps F at ``log(N / floor_count)`` above
    the fullest bin's level. Returns ``(F, edges)``.
    """
    z = _as_frames(z, "z")
    n = z.shape[0]
    nb = np.broadcast_to(np.atleast_1d(bins), (z.shape[1],))
    if n < int(np.prod(nb)) and n < int(nb.max()):
        raise ValueError("fewer frames than bins")
    counts, edges = np.histogramdd(z, bins=[int(b) for b in nb], range=range_)
    p = np.maximum(counts, floor_count) / n
    F = -np.log(p)
    return F - F.min(), edges


def write_histogram_csv(F, edges, path):
    """Long-format CSV: bin centers then F."""
    centers = [0.5 * (e[:-1] + e[1:]) for e in edges]
    mesh = np.meshgrid(*centers, indexing="ij")
    d = len(edges)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"z{i + 1}" for i in range(d)] + ["F"])
        for row in zip(*(m.ravel() for m in mesh), F.ravel()):
            w.writerow(list(row))
