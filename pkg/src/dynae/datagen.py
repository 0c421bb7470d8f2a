"""Synthetic datasets with known latent factors.

* ``three-well``: 2-D overdamped Langevin dynamics in a three-well free
  energy, observed through an invertible nonlinear warp.
* ``sprite2`` / ``sprite3``: a square sprite on a small grayscale canvas
  whose position (and optionally size) performs a reflected Gaussian random
  walk.
"""

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .langevin import Trajectory, simulate
from .ndmath import Rng

WELL_CENTERS = np.array([[-1.0, 0.0], [1.0, 0.0], [0.0, 1.5]])
WELL_WIDTH = 0.35
CONFINEMENT = 0.1

WARP_CUBIC = 0.4
WARP_SHEAR = 0.5

SPRITE_FACTORS = ("scale", "x_pos", "y_pos")
RECIPES = ("three-well", "sprite2", "sprite3")


@dataclass
class GroundTruthDataset:
    observations: Trajectory
    factors: Trajectory
    descriptor: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.observations.n_frames != self.factors.n_frames:
            raise ValueError("observations and factors differ in frame count")

    def save(self, out_dir):
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        self.observations.save(out / "observations.traj")
        self.factors.save(out / "factors.traj")
        (out / "dataset.json").write_text(json.dumps(self.descriptor, indent=2) + "\n")

    @classmethod
    def load(cls, data_dir, factors=True):
        d = Path(data_dir)
        obs = Trajectory.load(d / "observations.traj")
        fac = Trajectory.load(d / "factors.traj") if factors else obs
        desc = json.loads((d / "dataset.json").read_text())
        return cls(obs, fac, desc)


# --- three-well ------------------------------------------------------------

def _well_terms(z, centers, width):
    z = np.asarray(z, dtype=np.float64)
    diff = z[..., None, :] - centers  # (..., 3, 2)
    e = -np.sum(diff * diff, axis=-1) / (2.0 * width * width)
    emax = np.max(e, axis=-1, keepdims=True)
    w = np.exp(e - emax)
    s = np.sum(w, axis=-1, keepdims=True)
    return diff, w / s, np.log(s[..., 0]) + emax[..., 0]


def three_well_potential(z, confinement=CONFINEMENT, centers=WELL_CENTERS,
                         width=WELL_WIDTH):
    """F(z) = -log sum_c exp(-|z - mu_c|^2 / (2 sigma^2)) + a (x^4 + y^4)."""
    z = np.asarray(z, dtype=np.float64)
    _, _, lse = _well_terms(z, centers, width)
    return -lse + confinement * np.sum(z ** 4, axis=-1)


def three_well_force(z, confinement=CONFINEMENT, centers=WELL_CENTERS,
                     width=WELL_WIDTH):
    """Analytic force -grad F of three_well_potential()."""
    z = np.asarray(z, dtype=np.float64)
    diff, p, _ = _well_terms(z, centers, width)
    grad = np.sum(p[..., None] * diff, axis=-2) / (width * width)
    return -(grad + 4.0 * confinement * z ** 3)


def warp(z):
    """(x, y) -> (x + 0.4 x^3, y + 0.5 sin 2x); smooth and invertible."""
    z = np.asarray(z, dtype=np.float64)
    x, y = z[..., 0], z[..., 1]
    return np.stack([x + WARP_CUBIC * x ** 3, y + WARP_SHEAR * np.sin(2.0 * x)], axis=-1)


def _solve_cubic(xw):
    # real root of a x^3 + x - xw = 0 (monotone, so exactly one)
    a = WARP_CUBIC
    p, q = 1.0 / a, -xw / a
    disc = np.sqrt(q * q / 4.0 + p ** 3 / 27.0)
    x = np.cbrt(-q / 2.0 + disc) + np.cbrt(-q / 2.0 - disc)
    for _ in range(3):
        x = x - (a * x ** 3 + x - xw) / (3.0 * a * x * x + 1.0)
    return x


def unwarp(zw):
    zw = np.asarray(zw, dtype=np.float64)
    x = _solve_cubic(zw[..., 0])
    return np.stack([x, zw[..., 1] - WARP_SHEAR * np.sin(2.0 * x)], axis=-1)


def warp_jacobian_det(z):
    z = np.asarray(z, dtype=np.float64)
    return 1.0 + 3.0 * WARP_CUBIC * z[..., 0] ** 2


def gen_three_well(n_frames, dt_sim=0.01, stride=2, seed=0, initial=(-1.0, 0.0)):
    if n_frames < 2:
        raise ValueError("n_frames must be >= 2")
    rng = Rng(seed)
    truth = simulate(np.asarray(initial), three_well_force, dt_sim, stride, n_frames,
                     rng, box=(-10.0, 10.0))
    obs = Trajectory(warp(truth.data), lag=truth.lag)
    desc = {"recipe": "three-well", "n_frames": n_frames, "dt_sim": dt_sim,
            "stride": stride, "seed": seed, "well_centers": WELL_CENTERS.tolist(),
            "well_width": WELL_WIDTH, "confinement": CONFINEMENT,
            "warp": {"cubic": WARP_CUBIC, "shear": WARP_SHEAR},
            "factor_names": ["x", "y"]}
    return GroundTruthDataset(obs, truth, desc)


# --- sprites ---------------------------------------------------------------

def reflect_unit(x):
    """Fold the real line onto [0, 1] (reflection at both ends)."""
    y = np.mod(x, 2.0)
    return np.where(y > 1.0, 2.0 - y, y)


def reflected_walk(n_steps, n_factors, step_sigma, rng, start=None):
    """Gaussian random walk on [0, 1]^k with reflecting boundaries.

    Folding the free walk is pathwise a reflected walk driven by the same
    increments up to sign flips, so it has the same law.
    """
    if step_sigma <= 0:
        raise ValueError("step_sigma must be positive")
    start = rng.uniform(size=n_factors) if start is None else np.asarray(start, float)
    steps = rng.normal((n_steps, n_factors)) * step_sigma
    steps[0] = 0.0
    return reflect_unit(start + np.cumsum(steps, axis=0))


def _coverage_1d(center, side, size):
    # fraction of pixel [i, i+1) covered by [center - side/2, center + side/2]
    edges = np.arange(size, dtype=np.float64)
    lo = (center - side / 2.0)[:, None]
    hi = (center + side / 2.0)[:, None]
    return np.clip(np.minimum(edges + 1.0, hi) - np.maximum(edges, lo), 0.0, 1.0)


def sprite_geometry(image_size):
    """Smallest and largest sprite side in pixels for a canvas size."""
    return 0.2 * image_size, 0.375 * image_size


def render_sprites(scale, x_pos, y_pos, image_size=16):
    """Anti-aliased filled squares, one image per row of the factor arrays.

    Returns shape ``(n, image_size * image_size)`` with values in [0, 1];
    rows of the image run along y.
    """
    scale, x_pos, y_pos = (np.atleast_1d(np.asarray(a, dtype=np.float64))
                           for a in (scale, x_pos, y_pos))
    s_min, s_max = sprite_geometry(image_size)
    side = s_min + scale * (s_max - s_min)
    margin = s_max / 2.0
    span = image_size - 2.0 * margin
    cx = margin + x_pos * span
    cy = margin + y_pos * span
    wx = _coverage_1d(cx, side, image_size)
    wy = _coverage_1d(cy, side, image_size)
    img = wy[:, :, None] * wx[:, None, :]
    return img.reshape(len(side), -1)


def gen_sprite_walk(factors=("x_pos", "y_pos"), n_frames=50000, step_sigma=0.05,
                    image_size=16, seed=0):
    factors = tuple(factors)
    if not factors or any(f not in SPRITE_FACTORS for f in factors):
        raise ValueError(f"factors must be a non-empty subset of {SPRITE_FACTORS}")
    if image_size < 16:
        raise ValueError("image_size must be >= 16")
    rng = Rng(seed)
    walk = reflected_walk(n_frames, len(factors), step_sigma, rng)
    values = {name: np.full(n_frames, 0.5) for name in SPRITE_FACTORS}
    for i, name in enumerate(factors):
        values[name] = walk[:, i]
    images = render_sprites(values["scale"], values["x_pos"], values["y_pos"], image_size)
    desc = {"recipe": f"sprite{len(factors)}", "n_frames": n_frames,
            "step_sigma": step_sigma, "image_size": image_size, "seed": seed,
            "factor_names": list(factors)}
    return GroundTruthDataset(Trajectory(images), Trajectory(walk), desc)


def generate(recipe, n_frames, seed=0, **kw):
    """Dispatch on recipe name."""
    if recipe == "three-well":
        return gen_three_well(n_frames, seed=seed, **kw)
    if recipe == "sprite2":
        return gen_sprite_walk(("x_pos", "y_pos"), n_frames, seed=seed, **kw)
    if recipe == "sprite3":
        return gen_sprite_walk(("scale", "x_pos", "y_pos"), n_frames, seed=seed, **kw)
    raise ValueError(f"unknown recipe {recipe!r}; valid recipes: {', '.join(RECIPES)}")
