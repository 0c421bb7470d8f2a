import math

import numpy as np
import pytest

from dynae.errors import NonFiniteError, ShapeError, SimulationEscape
from dynae.langevin import (PriorModel, Trajectory, em_step, fit_prior, prior_log_density,
                            prior_loss, prior_loss_and_grad, sample_prior_displacement,
                            simulate)
from dynae.ndmath import FeedForwardNet, Rng, relative_error


def constant_prior(d, M=1.0, f=0.0, floor=1e-6):
    """Prior with constant force f and constant diffusion M (so dM/dz = 0)."""
    fnet = FeedForwardNet([d, 3, d], "tanh", seed=0)
    mnet = FeedForwardNet([d, 3, d], "tanh", seed=1)
    for p in fnet.params() + mnet.params():
        p[...] = 0.0
    fnet.biases[-1][...] = f
    mnet.biases[-1][...] = math.log(math.expm1(M - floor))
    return PriorModel(d, force_net=fnet, diffusion_net=mnet, floor=floor)


# --- simulation ------------------------------------------------------------

def test_em_step_pure_noise():
    eps = np.array([0.3, -1.2])
    dz = em_step(np.zeros(2), lambda z: 0 * z, dt=1.0, noise=eps)
    assert np.allclose(dz, math.sqrt(2) * eps)


def test_em_step_deterministic_and_linear_in_dt():
    dz = em_step(np.array([1.0]), lambda z: -z, dt=0.01)
    assert np.allclose(dz, -0.01)
    assert np.allclose(em_step(np.array([1.0]), lambda z: -z, dt=0.02), 2 * dz)


def test_em_step_uses_diffusion_and_gradient():
    dz = em_step(np.array([0.5]), lambda z: np.ones_like(z), diff=lambda z: 2 + 0 * z,
                 diff_grad=lambda z: 0.25 + 0 * z, dt=0.1, noise=np.array([1.0]))
    assert np.allclose(dz, (2 * 1 + 0.25) * 0.1 + math.sqrt(2 * 2 * 0.1))


def test_em_step_rejects_bad_dt():
    with pytest.raises(ValueError):
        em_step(np.zeros(1), lambda z: z, dt=0.0)


def test_ou_stationary_variance():
    # f = -z, M = 1 has unit stationary variance; EM at dt adds a factor 1/(1 - dt/2)
    rng = Rng(0)
    z = rng.normal((100, 1))
    acc = []
    for _ in range(10_000):
        z = z + em_step(z, lambda x: -x, dt=0.01, noise=rng.normal(z.shape))
        acc.append(z[:, 0].copy())
    assert abs(np.var(np.concatenate(acc)) - 1.0) < 0.05


def test_simulate_without_noise_or_force_is_constant():
    tr = simulate([0.3, -0.1], lambda z: 0 * z, 0.01, 5, 20, Rng(0), noise_scale=0.0)
    assert np.all(tr.data == np.array([0.3, -0.1]))
    assert tr.lag == pytest.approx(0.05)


def test_simulate_seeded():
    a = simulate([0.0], lambda z: -z, 0.01, 3, 50, Rng(4))
    b = simulate([0.0], lambda z: -z, 0.01, 3, 50, Rng(4))
    assert np.array_equal(a.data, b.data)


def test_simulate_escape_reports_frame():
    with pytest.raises(SimulationEscape) as info:
        simulate([0.0], lambda z: np.ones_like(z), 1.0, 1, 100, Rng(0), noise_scale=0.0,
                 box=(-10, 10))
    assert info.value.frame == 11


def test_trajectory_round_trip(tmp_path):
    tr = Trajectory(Rng(1).normal((7, 3)), lag=0.02)
    tr.save(tmp_path / "t.traj")
    back = Trajectory.load(tmp_path / "t.traj")
    assert np.array_equal(back.data, tr.data) and back.lag == 0.02
    a, b = back.pairs()
    assert np.array_equal(a[1:], b[:-1])


def test_trajectory_rejects_garbage(tmp_path):
    (tmp_path / "x").write_bytes(b"hello\n1234")
    with pytest.raises(ValueError):
        Trajectory.load(tmp_path / "x")


# --- prior density ---------------------------------------------------------

def test_log_density_unit_prior_at_zero():
    assert abs(prior_log_density(constant_prior(2), np.zeros(2), np.zeros(2))) < 1e-12


def test_log_density_log_m_term():
    p = constant_prior(1, M=math.e)
    assert prior_log_density(p, np.zeros(1), np.zeros(1)) == pytest.approx(-0.5, abs=1e-9)


def test_log_density_quadratic_term():
    p = constant_prior(1)
    assert prior_log_density(p, np.zeros(1), np.array([2.0])) == pytest.approx(-1.0, abs=1e-9)


def test_prior_loss_single_sample_and_bin_average():
    p = constant_prior(1)
    assert abs(prior_loss(p, [(np.zeros((1, 1)), np.zeros((1, 1)))])) < 1e-12
    groups = [(np.zeros((1, 1)), np.array([[2.0]])),
              (np.zeros((1, 1)), np.array([[math.sqrt(12.0)]]))]
    assert prior_loss(p, groups) == pytest.approx(2.0, abs=1e-9)


def test_prior_loss_weights_bins_equally():
    p = constant_prior(1)
    big = (np.zeros((9, 1)), np.full((9, 1), 2.0))
    small = (np.zeros((1, 1)), np.zeros((1, 1)))
    assert prior_loss(p, [big, small]) == pytest.approx(0.5, abs=1e-9)


def test_prior_loss_empty_bin_rejected():
    with pytest.raises(ValueError):
        prior_loss(constant_prior(1), [(np.zeros((0, 1)), np.zeros((0, 1)))])


def test_shape_mismatch_rejected():
    with pytest.raises(ShapeError):
        prior_log_density(constant_prior(2), np.zeros((3, 2)), np.zeros((3, 1)))


def test_nonfinite_density_carries_payload():
    p = constant_prior(1)
    with pytest.raises(NonFiniteError) as info:
        prior_log_density(p, np.zeros((2, 1)), np.array([[0.0], [np.inf]]))
    assert info.value.payload["dz"] == [math.inf]


def test_divergence_matches_finite_differences():
    p = PriorModel(2, (8, 8), rng=Rng(3))
    z = Rng(4).normal((6, 2))
    _, dM = p.diffusion_and_divergence(z)
    h = 1e-6
    for i in range(2):
        e = np.zeros(2)
        e[i] = h
        fd = (p.diffusion(z + e)[:, i] - p.diffusion(z - e)[:, i]) / (2 * h)
        assert np.allclose(dM[:, i], fd, atol=1e-8)


@pytest.mark.parametrize("seed", range(5))
def test_prior_gradient_matches_finite_differences(seed):
    rng = Rng(seed)
    p = PriorModel(2, (5, 5), rng=rng)
    groups = [(rng.normal((3, 2)), rng.normal((3, 2))), (rng.normal((2, 2)), rng.normal((2, 2)))]
    _, grads = prior_loss_and_grad(p, groups)
    h = 1e-6
    for q, g in zip(p.params(), grads):
        flat = q.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + h
            lp = prior_loss(p, groups)
            flat[j] = orig - h
            lm = prior_loss(p, groups)
            flat[j] = orig
            assert relative_error(g.reshape(-1)[j], (lp - lm) / (2 * h)) < 1e-4


def test_density_peaks_at_predicted_mean():
    p = PriorModel(1, (6,), rng=Rng(2))
    z = np.array([[0.4]])
    M, dM = p.diffusion_and_divergence(z)
    mean = float((M * p.force(z) + dM)[0, 0])
    grid = np.linspace(mean - 3, mean + 3, 6001)[:, None]
    ld = p.log_density(np.repeat(z, len(grid), axis=0), grid)
    assert abs(grid[np.argmax(ld), 0] - mean) <= 1e-3


def test_fit_prior_zero_displacement_gives_zero_mean_drift():
    z = np.linspace(-1, 1, 200)[:, None]
    prior, losses = fit_prior(z, np.zeros_like(z), hidden=(8, 8), steps=300,
                              batch_size=200, learning_rate=1e-2)
    # with every displacement zero, M shrinks and only M f + dM/dz is pinned down
    M, dM = prior.diffusion_and_divergence(z)
    assert losses[-1] < losses[0]
    assert np.max(np.abs(M * prior.force(z) + dM)) < 0.05


# --- prior sampling --------------------------------------------------------

def test_sample_prior_zero_force_moments():
    draws = sample_prior_displacement(constant_prior(1), np.zeros((100_000, 1)), Rng(0))
    assert abs(draws.mean()) < 0.01 and abs(draws.var() - 1.0) < 0.02


def test_sample_prior_noise_free_is_force():
    p = PriorModel(2, (4,), rng=Rng(1))
    z = Rng(2).normal((5, 2))
    assert np.array_equal(sample_prior_displacement(p, z, None, noise=np.zeros((5, 2))),
                          p.force(z))


def test_sample_prior_seeded():
    p = constant_prior(2, f=0.3)
    z = np.zeros((10, 2))
    assert np.array_equal(sample_prior_displacement(p, z, Rng(5)),
                          sample_prior_displacement(p, z, Rng(5)))
