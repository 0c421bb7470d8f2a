"""Dense numeric core: feed-forward networks with hand-written reverse-mode
gradients, the Adam optimizer, a seeded random stream and checkpoint I/O.

Everything runs in float64. Networks operate on batches: an input of shape
``(n, d_in)`` yields an output of shape ``(n, d_out)``; a single vector of
shape ``(d_in,)`` is accepted and returned unbatched.
"""

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import NonFiniteError, ShapeError

ACTIVATIONS = ("relu", "tanh", "identity")


class Rng:
    """Seeded random stream (PCG64) with uniform and standard-normal draws."""

    def __init__(self, seed=0):
        seed = int(seed)
        if not 0 <= seed < 2**64:
            raise ValueError("seed must be a 64-bit unsigned integer")
        self.seed = seed
        self.generator = np.random.Generator(np.random.PCG64(seed))

    def uniform(self, low=0.0, high=1.0, size=None):
        return self.generator.uniform(low, high, size)

    def normal(self, size=None):
        return self.generator.standard_normal(size)

    def integers(self, low, high=None, size=None):
        return self.generator.integers(low, high, size)

    def choice(self, a, size=None, replace=True):
        return self.generator.choice(a, size=size, replace=replace)

    def permutation(self, n):
        return self.generator.permutation(n)

    def spawn(self):
        """Independent child stream, derived deterministically from this one."""
        return Rng(int(self.generator.integers(0, 2**63)))


def _act(name, h):
    if name == "relu":
        return np.maximum(h, 0.0)
    if name == "tanh":
        return np.tanh(h)
    return h


def _act_slope(name, h, a):
    if name == "relu":
        return (h > 0).astype(h.dtype)
    if name == "tanh":
        return 1.0 - a * a
    return np.ones_like(h)


class FeedForwardNet:
    """Fully connected network: affine layers with ``activation`` between
    them and an identity map after the last layer.

    Weights are stored as ``(d_in, d_out)`` so a batch is propagated as
    ``x @ W + b``.
    """

    def __init__(self, layer_dims, activation="relu", rng=None, seed=0):
        layer_dims = [int(n) for n in layer_dims]
        if len(layer_dims) < 2 or min(layer_dims) < 1:
            raise ValueError(f"invalid layer dims {layer_dims}")
        if activation not in ("relu", "tanh"):
            raise ValueError(f"unknown activation {activation!r}")
        self.layer_dims = layer_dims
        self.activation = activation
        self.seed = seed if rng is None else rng.seed
        if rng is None:
            rng = Rng(seed)
        self.weights = []
        self.biases = []
        for d_in, d_out in zip(layer_dims[:-1], layer_dims[1:]):
            limit = math.sqrt(6.0 / (d_in + d_out))
            self.weights.append(rng.uniform(-limit, limit, (d_in, d_out)))
            self.biases.append(np.zeros(d_out))

    @property
    def n_layers(self):
        return len(self.weights)

    @property
    def in_dim(self):
        return self.layer_dims[0]

    @property
    def out_dim(self):
        return self.layer_dims[-1]

    def params(self):
        """Parameter arrays in checkpoint order: W0, b0, W1, b1, ..."""
        out = []
        for W, b in zip(self.weights, self.biases):
            out += [W, b]
        return out

    def parameter_count(self):
        return sum(p.size for p in self.params())

    def zeros_like_params(self):
        return [np.zeros_like(p) for p in self.params()]

    def copy(self):
        net = object.__new__(FeedForwardNet)
        net.layer_dims = list(self.layer_dims)
        net.activation = self.activation
        net.seed = self.seed
        net.weights = [W.copy() for W in self.weights]
        net.biases = [b.copy() for b in self.biases]
        return net

    def load_params(self, flat):
        """Overwrite parameters from a flat vector in checkpoint order."""
        flat = np.asarray(flat, dtype=np.float64)
        if flat.size != self.parameter_count():
            raise ShapeError(
                f"expected {self.parameter_count()} parameters, got {flat.size}")
        pos = 0
        for p in self.params():
            p[...] = flat[pos:pos + p.size].reshape(p.shape)
            pos += p.size

    def flat_params(self):
        return np.concatenate([p.ravel() for p in self.params()])

    def _layer_act(self, l):
        return "identity" if l == self.n_layers - 1 else self.activation

    def _check_input(self, x):
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 1
        if single:
            x = x[None, :]
        if x.ndim != 2 or x.shape[1] != self.in_dim:
            raise ShapeError(
                f"input has shape {x.shape}, network expects last dim {self.in_dim}")
        return x, single

    def forward(self, x):
        out, _ = self.forward_cache(x)
        return out

    __call__ = forward

    def forward_cache(self, x):
        """Forward pass that also returns what backward() needs."""
        x, single = self._check_input(x)
        inputs, pre = [], []
        a = x
        for l, (W, b) in enumerate(zip(self.weights, self.biases)):
            inputs.append(a)
            h = a @ W + b
            pre.append(h)
            a = _act(self._layer_act(l), h)
        cache = (inputs, pre, a, single)
        return (a[0] if single else a), cache

    def backward(self, cache, upstream):
        """Reverse pass: gradients of ``sum(upstream * output)``.

        Returns ``(param_grads, input_grad)`` with param_grads in the order of
        params(). Gradients are summed over the batch.
        """
        inputs, pre, out, single = cache
        g = np.asarray(upstream, dtype=np.float64)
        if single:
            g = g[None, :]
        if g.shape != out.shape:
            raise ShapeError(f"upstream shape {g.shape} != output shape {out.shape}")
        grads = [None] * (2 * self.n_layers)
        a = out
        for l in reversed(range(self.n_layers)):
            name = self._layer_act(l)
            if name != "identity":
                g = g * _act_slope(name, pre[l], a)
            grads[2 * l] = inputs[l].T @ g
            grads[2 * l + 1] = g.sum(axis=0)
            g = g @ self.weights[l].T
            a = inputs[l]
        return grads, (g[0] if single else g)

    def forward_tangent(self, x, v):
        """Forward pass carrying a directional derivative.

        Returns ``(out, d_out, cache)`` where ``d_out`` is the Jacobian of the
        output applied to the input direction ``v`` (same shape as ``x``).
        """
        x, single = self._check_input(x)
        v = np.broadcast_to(np.asarray(v, dtype=np.float64), x.shape)
        a, da = x, v
        layers = []
        for l, (W, b) in enumerate(zip(self.weights, self.biases)):
            h = a @ W + b
            dh = da @ W
            name = self._layer_act(l)
            a_new = _act(name, h)
            s = _act_slope(name, h, a_new)
            layers.append((a, da, h, dh, a_new, s))
            a, da = a_new, s * dh
        cache = (layers, single)
        if single:
            return a[0], da[0], cache
        return a, da, cache

    def backward_tangent(self, cache, g_out, g_dout):
        """Reverse pass through forward_tangent().

        Gradients of ``sum(g_out * out) + sum(g_dout * d_out)`` w.r.t. the
        parameters, summed over the batch. Returns param grads only.
        """
        layers, single = cache
        g = np.asarray(g_out, dtype=np.float64)
        gd = np.asarray(g_dout, dtype=np.float64)
        if single:
            g, gd = g[None, :], gd[None, :]
        grads = [None] * (2 * self.n_layers)
        for l in reversed(range(self.n_layers)):
            a_prev, da_prev, h, dh, a, s = layers[l]
            name = self._layer_act(l)
            # da = s * dh, a = act(h)
            g_dh = s * gd
            if name == "tanh":
                g = g + gd * dh * (-2.0 * a)
            if name != "identity":
                g = g * s
            W = self.weights[l]
            grads[2 * l] = a_prev.T @ g + da_prev.T @ g_dh
            grads[2 * l + 1] = g.sum(axis=0)
            g = g @ W.T
            gd = g_dh @ W.T
        return grads

    def relu_pattern(self, x):
        """Sign pattern of the hidden pre-activations, used to detect kinks."""
        _, (inputs, pre, _, _) = self.forward_cache(x)
        return [h > 0 for h in pre[:-1]]


def mlp_forward(net, x):
    return net.forward(x)


def mlp_backward(net, x, upstream):
    _, cache = net.forward_cache(x)
    return net.backward(cache, upstream)


@dataclass
class GradCheckReport:
    passed: bool
    max_rel_error: float
    n_checked: int
    nondifferentiable: list = field(default_factory=list)
    worst: tuple = None


def relative_error(a, b, floor=1e-6):
    return abs(a - b) / max(abs(a), abs(b), floor)


def finite_diff_check(net, x, loss_fn, h=1e-5, tol=1e-4):
    """Compare reverse-mode parameter gradients of ``loss_fn(net(x))`` with
    central differences, one parameter coordinate at a time.

    ``loss_fn(out)`` returns ``(loss, d_loss/d_out)``. Coordinates whose
    perturbation flips a ReLU on or off are reported in ``nondifferentiable``
    and excluded from the pass/fail decision.
    """
    if h <= 0 or tol <= 0:
        raise ValueError("h and tol must be positive")
    out, cache = net.forward_cache(x)
    loss, g_out = loss_fn(out)
    if not np.isfinite(loss):
        return GradCheckReport(False, math.inf, 0, worst=("loss", loss))
    grads, _ = net.backward(cache, g_out)
    check_kinks = net.activation == "relu"
    base_pattern = net.relu_pattern(x) if check_kinks else None

    max_err, worst, n, kinks = 0.0, None, 0, []
    for pi, (p, g) in enumerate(zip(net.params(), grads)):
        flat_p, flat_g = p.reshape(-1), g.reshape(-1)
        for j in range(flat_p.size):
            orig = flat_p[j]
            flat_p[j] = orig + h
            lp = loss_fn(net.forward(x))[0]
            pat_p = net.relu_pattern(x) if check_kinks else None
            flat_p[j] = orig - h
            lm = loss_fn(net.forward(x))[0]
            pat_m = net.relu_pattern(x) if check_kinks else None
            flat_p[j] = orig
            if check_kinks and not all(
                    np.array_equal(a, b) and np.array_equal(a, c)
                    for a, b, c in zip(base_pattern, pat_p, pat_m)):
                kinks.append((pi, j))
                continue
            if not (np.isfinite(lp) and np.isfinite(lm)):
                return GradCheckReport(False, math.inf, n, kinks, ("nonfinite", pi, j))
            fd = (lp - lm) / (2 * h)
            err = relative_error(float(flat_g[j]), fd)
            n += 1
            if err > max_err:
                max_err, worst = err, (pi, j, float(flat_g[j]), fd)
    return GradCheckReport(max_err < tol, max_err, n, kinks, worst)


@dataclass
class AdamState:
    m: list
    v: list
    step: int = 0
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    @classmethod
    def for_params(cls, params, learning_rate=1e-3, **kw):
        return cls([np.zeros_like(p) for p in params],
                   [np.zeros_like(p) for p in params],
                   learning_rate=learning_rate, **kw)


def adam_step(params, grads, state):
    """One bias-corrected Adam update, applied to ``params`` in place.

    Raises NonFiniteError (and leaves everything untouched) if any gradient
    is NaN or infinite.
    """
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ShapeError("params, grads and optimizer state differ in length")
    for p, g in zip(params, grads):
        if p.shape != g.shape:
            raise ShapeError(f"gradient shape {g.shape} != parameter shape {p.shape}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteError("non-finite gradient rejected by Adam")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= state.learning_rate * (m / c1) / (np.sqrt(v / c2) + state.epsilon)
    return params, state


# --- checkpoints -----------------------------------------------------------

def save_net(net, path, extra=None):
    """Write ``<path>.json`` (manifest) and ``<path>.bin`` (float32 LE params)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    manifest = {
        "format": "dynae-net v1",
        "layer_dims": net.layer_dims,
        "activations": [net._layer_act(l) for l in range(net.n_layers)],
        "seed": net.seed,
        "dtype": "float32-le",
        "order": "per layer: weights (d_in x d_out, row-major) then biases",
        "parameter_count": net.parameter_count(),
    }
    if extra:
        manifest.update(extra)
    path.with_suffix(".json").write_text(json.dumps(manifest, indent=2) + "\n")
    path.with_suffix(".bin").write_bytes(net.flat_params().astype("<f4").tobytes())


def load_net(path):
    """Inverse of save_net(). Returns ``(net, manifest)``."""
    path = Path(path)
    manifest = json.loads(path.with_suffix(".json").read_text())
    acts = manifest["activations"]
    hidden = acts[0] if len(acts) > 1 else "relu"
    net = FeedForwardNet(manifest["layer_dims"], hidden, seed=manifest.get("seed", 0))
    flat = np.frombuffer(path.with_suffix(".bin").read_bytes(), dtype="<f4")
    net.load_params(flat.astype(np.float64))
    return net, manifest
