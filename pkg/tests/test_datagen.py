import json

import numpy as np
import pytest

from dynae.datagen import (RECIPES, WELL_CENTERS, GroundTruthDataset, gen_sprite_walk,
                           gen_three_well, generate, reflect_unit, reflected_walk,
                           render_sprites, three_well_force, three_well_potential, unwarp,
                           warp, warp_jacobian_det)
from dynae.ndmath import Rng


@pytest.fixture(scope="module")
def three_well_50k():
    return gen_three_well(50_000, seed=0)


def test_force_small_at_well_centers_without_confinement():
    f = three_well_force(WELL_CENTERS, confinement=0.0)
    assert np.all(np.linalg.norm(f, axis=1) < 0.15)


def test_force_mirror_symmetry():
    z = Rng(0).normal((50, 2))
    zm = z * np.array([-1.0, 1.0])
    f, fm = three_well_force(z), three_well_force(zm)
    assert np.allclose(fm[:, 0], -f[:, 0], atol=1e-12)
    assert np.allclose(fm[:, 1], f[:, 1], atol=1e-12)


def test_force_is_negative_potential_gradient():
    z = Rng(1).uniform(-2, 2, (40, 2))
    h = 1e-5
    fd = np.stack([-(three_well_potential(z + h * e) - three_well_potential(z - h * e)) / (2 * h)
                   for e in np.eye(2)], axis=1)
    assert np.allclose(three_well_force(z), fd, atol=1e-6)


def test_warp_fixes_origin_and_inverts():
    assert np.allclose(warp(np.zeros(2)), 0.0)
    z = Rng(2).uniform(-3, 3, (10_000, 2))
    assert np.max(np.abs(unwarp(warp(z)) - z)) < 1e-10


def test_warp_jacobian_positive():
    z = Rng(3).uniform(-3, 3, (200, 2))
    h = 1e-6
    J = np.stack([(warp(z + h * e) - warp(z - h * e)) / (2 * h) for e in np.eye(2)], axis=2)
    det = np.linalg.det(J)
    assert np.all(det > 0)
    assert np.allclose(det, warp_jacobian_det(z), rtol=1e-6)


def test_three_well_occupancy(three_well_50k):
    truth = three_well_50k.factors.data
    nearest = np.argmin(((truth[:, None] - WELL_CENTERS[None]) ** 2).sum(-1), axis=1)
    frac = np.bincount(nearest, minlength=3) / len(truth)
    assert np.all(frac > 0.05), frac


def test_three_well_observations_are_warped_factors(three_well_50k):
    assert np.array_equal(three_well_50k.observations.data, warp(three_well_50k.factors.data))


def test_warp_makes_apparent_diffusion_position_dependent(three_well_50k):
    x = three_well_50k.observations.data[:, 0]
    dx = np.diff(x)
    edges = np.quantile(x[:-1], np.linspace(0, 1, 11))
    which = np.clip(np.searchsorted(edges, x[:-1], side="right") - 1, 0, 9)
    v = np.array([dx[which == k].var() for k in range(10)])
    assert v.max() / v.min() >= 2.0


def test_three_well_seeded():
    a, b = gen_three_well(300, seed=5), gen_three_well(300, seed=5)
    assert np.array_equal(a.observations.data, b.observations.data)
    assert not np.array_equal(a.factors.data, gen_three_well(300, seed=6).factors.data)


def test_sprite_centroid_at_grid_center():
    img = render_sprites(0.5, 0.5, 0.5, 16).reshape(16, 16)
    ys, xs = np.mgrid[0:16, 0:16] + 0.5
    cy, cx = (img * ys).sum() / img.sum(), (img * xs).sum() / img.sum()
    assert abs(cx - 8) <= 0.5 and abs(cy - 8) <= 0.5


def test_sprite_mass_and_range():
    img = render_sprites([0.0, 1.0], [0.0, 1.0], [1.0, 0.3], 16)
    assert img.min() >= 0 and img.max() <= 1
    assert np.allclose(img.sum(axis=1), [(0.2 * 16) ** 2, (0.375 * 16) ** 2])


def test_reflect_unit():
    assert np.allclose(reflect_unit(np.array([-0.25, 0.3, 1.25, 2.5])), [0.25, 0.3, 0.75, 0.5])


def test_reflected_walk_bounded_and_uniform():
    w = reflected_walk(10**6, 2, 0.05, Rng(0))
    assert w.min() >= 0 and w.max() <= 1
    for col in w.T:
        frac = np.histogram(col, bins=10, range=(0, 1))[0] / len(col)
        assert np.all(np.abs(frac - 0.1) < 0.01)


def test_sprite_walk_rerender_is_deterministic():
    ds = gen_sprite_walk(n_frames=200, seed=4)
    x, y = ds.factors.data.T
    again = render_sprites(np.full(200, 0.5), x, y, 16)
    assert np.array_equal(again, ds.observations.data)
    assert np.array_equal(gen_sprite_walk(n_frames=200, seed=4).observations.data,
                          ds.observations.data)


def test_sprite_validation():
    with pytest.raises(ValueError):
        gen_sprite_walk(("rotation",), 10)
    with pytest.raises(ValueError):
        gen_sprite_walk(n_frames=10, image_size=8)
    with pytest.raises(ValueError):
        reflected_walk(5, 1, 0.0, Rng(0))


def test_generate_dispatch_and_unknown():
    assert generate("sprite3", 20, seed=1).factors.dims == 3
    with pytest.raises(ValueError, match="three-well"):
        generate("swirl", 10)
    assert set(RECIPES) == {"three-well", "sprite2", "sprite3"}


def test_dataset_round_trip(tmp_path):
    ds = generate("three-well", 100, seed=2)
    ds.save(tmp_path)
    back = GroundTruthDataset.load(tmp_path)
    assert np.array_equal(back.observations.data, ds.observations.data)
    assert json.loads((tmp_path / "dataset.json").read_text())["recipe"] == "three-well"
