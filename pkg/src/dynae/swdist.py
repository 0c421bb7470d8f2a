"""Sliced-Wasserstein distances between empirical samples.

Each random direction projects both samples onto a line, where the optimal
coupling pairs the sorted values. The squared distances of the pairs are
averaged over samples and directions.
"""

import logging

import numpy as np

from .errors import ShapeError

log = logging.getLogger(__name__)


def sample_directions(d, L, rng):
    """``L`` unit vectors drawn uniformly from the (d-1)-sphere, shape (L, d)."""
    if d < 1:
        raise ValueError("latent dimension must be >= 1")
    if L < 1:
        raise ValueError("need at least one projection")
    while True:
        v = rng.normal((L, d))
        norms = np.linalg.norm(v, axis=1, keepdims=True)
        if np.all(norms > 0):
            return v / norms


def _check(a, b, dirs):
    a = np.atleast_2d(np.asarray(a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(b, dtype=np.float64))
    dirs = np.atleast_2d(np.asarray(dirs, dtype=np.float64))
    if a.shape[0] != b.shape[0]:
        raise ShapeError(
            f"sorted coupling needs equal sample counts, got {a.shape[0]} and {b.shape[0]}")
    if a.shape[0] == 0:
        raise ShapeError("empty sample")
    if a.shape[1] != b.shape[1] or a.shape[1] != dirs.shape[1]:
        raise ShapeError("samples and directions differ in dimension")
    return a, b, dirs


def sliced_w2(a, b, dirs):
    """Mean squared sorted-coupling distance over all projections."""
    return sliced_w2_and_grad(a, b, dirs)[0]


def sliced_w2_and_grad(a, b, dirs):
    """sliced_w2 and its gradient w.r.t. ``a``.

    The sort permutation is held fixed; ties are broken by stable index order.
    """
    a, b, dirs = _check(a, b, dirs)
    n, L = a.shape[0], dirs.shape[0]
    pa = a @ dirs.T
    pb = b @ dirs.T
    ia = np.argsort(pa, axis=0, kind="stable")
    ib = np.argsort(pb, axis=0, kind="stable")
    diff = np.take_along_axis(pa, ia, 0) - np.take_along_axis(pb, ib, 0)
    value = float(np.mean(diff * diff))
    g_proj = np.empty_like(pa)
    np.put_along_axis(g_proj, ia, 2.0 * diff / (n * L), 0)
    return value, g_proj @ dirs


def binned_sw_regularizer(encoded, prior_samples, dirs):
    """Average of sliced_w2 over bins; bins with no samples are skipped."""
    return binned_sw_regularizer_and_grad(encoded, prior_samples, dirs)[0]


def binned_sw_regularizer_and_grad(encoded, prior_samples, dirs):
    """Returns ``(value, grads, n_skipped)``; ``grads[k]`` is the gradient
    w.r.t. ``encoded[k]`` (None for skipped bins)."""
    if len(encoded) != len(prior_samples):
        raise ShapeError("encoded and prior samples have different bin counts")
    terms, grads, skipped = [], [], 0
    for enc, pri in zip(encoded, prior_samples):
        if len(enc) != len(pri):
            raise ShapeError("per-bin sample counts differ between encoded and prior")
        if len(enc) == 0:
            skipped += 1
            grads.append(None)
            continue
        v, g = sliced_w2_and_grad(enc, pri, dirs)
        terms.append(v)
        grads.append(g)
    if skipped:
        log.warning("skipped %d empty bin(s) in sliced-Wasserstein regularizer", skipped)
    if not terms:
        return 0.0, grads, skipped
    K = len(terms)
    grads = [None if g is None else g / K for g in grads]
    return float(sum(terms) / K), grads, skipped
