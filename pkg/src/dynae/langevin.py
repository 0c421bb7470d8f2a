"""Overdamped Langevin machinery.

Displacements over one lag follow

    dz_i = [M_ii f_i + dM_ii/dz_i] dt + sqrt(2 M_ii dt) * eps_i

with a diagonal, position-dependent diffusion M and force f. The learned
prior models f and M with two networks and is fitted by maximizing the
(unnormalized) Gaussian transition log-density at unit lag.
"""

import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import NonFiniteError, ShapeError, SimulationEscape
from .ndmath import FeedForwardNet, Rng

DIFFUSION_FLOOR = 1e-6


# --- trajectories ----------------------------------------------------------

_HEADER = re.compile(
    r"dynae-traj v1, dims=(\d+), frames=(\d+), lag=([-+0-9.eE]+|inf|nan)")


@dataclass
class Trajectory:
    """Time-ordered frames, shape ``(frames, dims)``, at a fixed lag."""

    data: np.ndarray
    lag: float = 1.0

    def __post_init__(self):
        self.data = np.ascontiguousarray(self.data, dtype=np.float64)
        if self.data.ndim == 1:
            self.data = self.data[:, None]
        if self.data.ndim != 2:
            raise ShapeError("trajectory data must be 2-D (frames, dims)")

    @property
    def n_frames(self):
        return self.data.shape[0]

    @property
    def dims(self):
        return self.data.shape[1]

    def pairs(self):
        """Consecutive-frame pairs ``(X_t, X_{t+1})``."""
        return self.data[:-1], self.data[1:]

    def save(self, path):
        path = Path(path)
        header = f"dynae-traj v1, dims={self.dims}, frames={self.n_frames}, lag={self.lag!r}\n"
        with open(path, "wb") as fh:
            fh.write(header.encode("ascii"))
            fh.write(self.data.astype("<f8").tobytes())

    @classmethod
    def load(cls, path):
        with open(path, "rb") as fh:
            line = fh.readline().decode("ascii").strip()
            m = _HEADER.fullmatch(line)
            if not m:
                raise ValueError(f"{path}: not a dynae trajectory file")
            dims, frames, lag = int(m[1]), int(m[2]), float(m[3])
            raw = fh.read()
        data = np.frombuffer(raw, dtype="<f8")
        if data.size != dims * frames:
            raise ValueError(f"{path}: expected {dims * frames} values, found {data.size}")
        return cls(data.reshape(frames, dims).copy(), lag)

    def to_csv(self, path, names=None):
        names = names or [f"x{i + 1}" for i in range(self.dims)]
        np.savetxt(path, self.data, delimiter=",", header=",".join(names),
                   comments="", fmt="%.10g")


# --- simulation ------------------------------------------------------------

def em_step(z, force, diff=None, diff_grad=None, dt=1.0, noise=None):
    """Euler-Maruyama displacement for diagonal-diffusion overdamped Langevin.

    ``force``, ``diff`` and ``diff_grad`` are callables of z (diff_grad gives
    dM_ii/dz_i). ``diff=None`` means M = 1 and ``diff_grad=None`` means zero.
    Works on a single point ``(d,)`` or a batch ``(n, d)``.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    z = np.asarray(z, dtype=np.float64)
    f = np.asarray(force(z), dtype=np.float64)
    if diff is None:
        drift = f
        scale = np.sqrt(2.0 * dt)
    else:
        m = np.asarray(diff(z), dtype=np.float64)
        if np.any(m <= 0):
            raise ValueError("diffusion must be strictly positive")
        drift = m * f
        scale = np.sqrt(2.0 * m * dt)
    if diff_grad is not None:
        drift = drift + diff_grad(z)
    dz = drift * dt
    if noise is not None:
        dz = dz + scale * noise
    return dz


def simulate(initial, force, dt_sim, stride, n_frames, rng, diff=None,
             diff_grad=None, noise_scale=1.0, box=None):
    """Integrate with em_step and record every ``stride`` sub-steps.

    The recorded lag is ``stride * dt_sim``. ``box=(low, high)`` aborts with
    SimulationEscape when a recorded frame leaves it.
    """
    if stride < 1:
        raise ValueError("stride must be >= 1")
    if n_frames < 2:
        raise ValueError("n_frames must be >= 2")
    z = np.array(initial, dtype=np.float64).reshape(-1)
    d = z.size
    out = np.empty((n_frames, d))
    out[0] = z
    if box is not None:
        low, high = (np.broadcast_to(np.asarray(b, dtype=np.float64), (d,)) for b in box)
    for t in range(1, n_frames):
        noise = rng.normal((stride, d)) * noise_scale
        for k in range(stride):
            z = z + em_step(z, force, diff, diff_grad, dt_sim, noise[k])
        if box is not None and (np.any(z < low) or np.any(z > high) or
                                not np.all(np.isfinite(z))):
            raise SimulationEscape(t)
        out[t] = z
    return Trajectory(out, lag=stride * dt_sim)


# --- learned prior ---------------------------------------------------------

def softplus(u):
    return np.logaddexp(0.0, u)


def sigmoid(u):
    return 0.5 * (1.0 + np.tanh(0.5 * u))


class PriorModel:
    """Force field f(z) and diagonal diffusion M(z), one tanh network each."""

    def __init__(self, d, hidden=(32, 32, 32), rng=None, force_net=None,
                 diffusion_net=None, floor=DIFFUSION_FLOOR):
        rng = rng if rng is not None else Rng(0)
        dims = [d, *hidden, d]
        self.force_net = force_net or FeedForwardNet(dims, "tanh", rng=rng.spawn())
        self.diffusion_net = diffusion_net or FeedForwardNet(dims, "tanh", rng=rng.spawn())
        if self.force_net.in_dim != d or self.diffusion_net.out_dim != d:
            raise ShapeError("prior networks must map R^d -> R^d")
        self.d = d
        self.floor = floor

    def params(self):
        return self.force_net.params() + self.diffusion_net.params()

    def copy(self):
        return PriorModel(self.d, force_net=self.force_net.copy(),
                          diffusion_net=self.diffusion_net.copy(), floor=self.floor)

    def force(self, z):
        return self.force_net.forward(z)

    def diffusion(self, z):
        return softplus(self.diffusion_net.forward(z)) + self.floor

    def diffusion_and_divergence(self, z):
        """M_ii(z) and dM_ii/dz_i(z), the latter by forward-mode differentiation."""
        z = np.atleast_2d(np.asarray(z, dtype=np.float64))
        n, d = z.shape
        dM = np.empty((n, d))
        u = None
        for i in range(d):
            e = np.zeros(d)
            e[i] = 1.0
            u, du, _ = self.diffusion_net.forward_tangent(z, e)
            dM[:, i] = sigmoid(u[:, i]) * du[:, i]
        return softplus(u) + self.floor, dM

    def _terms(self, z, dz):
        z = np.atleast_2d(np.asarray(z, dtype=np.float64))
        dz = np.atleast_2d(np.asarray(dz, dtype=np.float64))
        if z.shape != dz.shape or z.shape[1] != self.d:
            raise ShapeError(f"z {z.shape} and dz {dz.shape} must both be (n, {self.d})")
        f, f_cache = self.force_net.forward_cache(z)
        tangents = []
        u = None
        for i in range(self.d):
            e = np.zeros(self.d)
            e[i] = 1.0
            u, du, cache = self.diffusion_net.forward_tangent(z, e)
            tangents.append((du, cache))
        M = softplus(u) + self.floor
        D = np.stack([sigmoid(u[:, i]) * tangents[i][0][:, i] for i in range(self.d)], axis=1)
        r = dz - M * f - D
        return z, f, f_cache, u, tangents, M, D, r

    def log_density(self, z, dz):
        """Per-sample transition log-density with additive constants dropped:

            -1/2 sum_i [ log M_ii + (dz_i - M_ii f_i - dM_ii/dz_i)^2 / (2 M_ii) ]
        """
        _, _, _, _, _, M, _, r = self._terms(z, dz)
        return -0.5 * np.sum(np.log(M) + r * r / (2.0 * M), axis=1)

    def weighted_nll_and_grad(self, z, dz, weights):
        """``-sum_n w_n log r(dz_n | z_n)`` and its gradient w.r.t. params()."""
        z, f, f_cache, u, tangents, M, D, r = self._terms(z, dz)
        dz = np.atleast_2d(dz)
        w = np.asarray(weights, dtype=np.float64)[:, None]
        logp = -0.5 * np.sum(np.log(M) + r * r / (2.0 * M), axis=1)
        loss = -float(np.sum(w[:, 0] * logp))
        # partials of the per-sample negative log-density
        g_r = w * r / (2.0 * M)
        g_M = w * 0.5 * (1.0 / M - r * r / (2.0 * M * M)) - g_r * f
        g_f = -g_r * M
        g_D = -g_r
        sig = sigmoid(u)
        force_grads, _ = self.force_net.backward(f_cache, g_f)
        g_u = g_M * sig
        diff_grads = None
        for i, (du, cache) in enumerate(tangents):
            g_out = np.zeros_like(u)
            g_dout = np.zeros_like(u)
            # D_i = sigmoid(u_i) * du_i
            g_out[:, i] = g_D[:, i] * sig[:, i] * (1.0 - sig[:, i]) * du[:, i]
            if i == 0:
                g_out += g_u
            g_dout[:, i] = g_D[:, i] * sig[:, i]
            gi = self.diffusion_net.backward_tangent(cache, g_out, g_dout)
            diff_grads = gi if diff_grads is None else [a + b for a, b in zip(diff_grads, gi)]
        if not np.isfinite(loss):
            bad = int(np.flatnonzero(~np.isfinite(logp))[0])
            raise NonFiniteError("non-finite prior log-density",
                                 payload={"z": z[bad].tolist(), "dz": dz[bad].tolist()})
        return loss, force_grads + diff_grads


def prior_log_density(prior, z, dz):
    """Transition log-density of one sample (or a batch)."""
    out = prior.log_density(z, dz)
    if not np.all(np.isfinite(out)):
        bad = int(np.flatnonzero(~np.isfinite(out))[0])
        raise NonFiniteError("non-finite prior log-density",
                             payload={"z": np.atleast_2d(z)[bad].tolist(),
                                      "dz": np.atleast_2d(dz)[bad].tolist()})
    return float(out[0]) if np.ndim(z) == 1 else out


def _bin_weights(groups):
    if not groups:
        raise ValueError("prior loss needs at least one bin")
    sizes = [len(g[0]) for g in groups]
    if min(sizes) == 0:
        raise ValueError("every bin passed to the prior loss must be non-empty")
    K = len(groups)
    z = np.concatenate([np.atleast_2d(g[0]) for g in groups])
    dz = np.concatenate([np.atleast_2d(g[1]) for g in groups])
    w = np.concatenate([np.full(n, 1.0 / (K * n)) for n in sizes])
    return z, dz, w


def prior_loss(prior, groups):
    """Average over bins of the mean negative log-density in each bin.

    ``groups`` is a list of ``(z_t, dz)`` array pairs, one per bin.
    """
    return prior_loss_and_grad(prior, groups)[0]


def prior_loss_and_grad(prior, groups):
    z, dz, w = _bin_weights(groups)
    return prior.weighted_nll_and_grad(z, dz, w)


def sample_prior_displacement(prior, z, rng, noise=None):
    """Displacement under unit, constant diffusion: ``f(z) + eps``."""
    f = prior.force(z)
    if noise is None:
        noise = rng.normal(np.shape(f))
    return f + noise


def fit_prior(z, dz, hidden=(32, 32, 32), steps=2000, batch_size=1024,
              learning_rate=1e-3, seed=0, prior=None):
    """Fit a prior to fixed transitions ``(z_t, dz)`` with minibatch Adam.

    Returns ``(prior, losses)`` with one loss per step.
    """
    from .ndmath import AdamState, adam_step

    z = np.atleast_2d(np.asarray(z, dtype=np.float64))
    dz = np.atleast_2d(np.asarray(dz, dtype=np.float64))
    if z.shape != dz.shape:
        raise ShapeError("z and dz must have the same shape")
    rng = Rng(seed)
    prior = prior or PriorModel(z.shape[1], hidden, rng=rng.spawn())
    opt = AdamState.for_params(prior.params(), learning_rate)
    B = min(batch_size, len(z))
    losses = []
    for _ in range(steps):
        idx = rng.integers(0, len(z), B)
        loss, grads = prior_loss_and_grad(prior, [(z[idx], dz[idx])])
        adam_step(prior.params(), grads, opt)
        losses.append(loss)
    return prior, losses
