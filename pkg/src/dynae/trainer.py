"""Training loops: the dynamics-constrained autoencoder and a beta-VAE baseline.

The autoencoder alternates two Adam optimizers on every minibatch: one step
on encoder/decoder (reconstruction + beta * binned sliced-Wasserstein match
of encoded displacements to prior displacements), then one step on the
prior networks (negative transition log-likelihood of the encoded
displacements).
"""

import copy
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .errors import ConfigError, NonFiniteError, ShapeError
from .langevin import PriorModel, prior_loss_and_grad, sample_prior_displacement
from .ndmath import AdamState, FeedForwardNet, Rng, adam_step, load_net, save_net
from .partition import BinPartition, choose_d_min
from .swdist import binned_sw_regularizer, binned_sw_regularizer_and_grad, sample_directions

log = logging.getLogger(__name__)

PRIOR_DRIFTS = ("mean", "force")


@dataclass
class TrainConfig:
    d: int = 2
    beta: float = 5.0
    gamma: float = 2.0
    L: int = 50
    d_min: float = None
    batch_size: int = 512
    epochs: int = 30
    learning_rate: float = 1e-3
    seed: int = 0
    encoder_hidden: tuple = (64, 64)
    prior_hidden: tuple = (32, 32, 32)
    warmup_epochs: int = 5
    ramp_epochs: int = 5
    prior_drift: str = "mean"

    def __post_init__(self):
        self.encoder_hidden = tuple(int(h) for h in self.encoder_hidden)
        self.prior_hidden = tuple(int(h) for h in self.prior_hidden)
        checks = [
            (self.d >= 1, "d must be >= 1"),
            (self.beta >= 0, "beta must be >= 0"),
            (self.gamma >= 1, "gamma must be >= 1"),
            (self.L >= 1, "L must be >= 1"),
            (self.d_min is None or self.d_min > 0, "d_min must be positive"),
            (self.batch_size >= 2, "batch_size must be >= 2"),
            (self.epochs >= 1, "epochs must be >= 1"),
            (self.learning_rate > 0, "learning_rate must be positive"),
            (self.prior_drift in PRIOR_DRIFTS, f"prior_drift must be one of {PRIOR_DRIFTS}"),
            (self.warmup_epochs >= 0 and self.ramp_epochs >= 0, "warm-up must be >= 0"),
            (all(h >= 1 for h in self.encoder_hidden + self.prior_hidden),
             "layer widths must be positive"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ConfigError(msg)

    @classmethod
    def from_dict(cls, data):
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown training keys: {', '.join(sorted(unknown))}")
        return cls(**data)

    def to_dict(self):
        out = asdict(self)
        out["encoder_hidden"] = list(self.encoder_hidden)
        out["prior_hidden"] = list(self.prior_hidden)
        return out

    def beta_at(self, epoch):
        """beta is zero during warm-up, then ramps linearly to its full value."""
        if epoch < self.warmup_epochs:
            return 0.0
        if self.ramp_epochs == 0:
            return self.beta
        return self.beta * min(1.0, (epoch - self.warmup_epochs + 1) / self.ramp_epochs)


@dataclass
class ModelBundle:
    encoder: FeedForwardNet
    decoder: FeedForwardNet
    prior: PriorModel = None
    opt_ae: AdamState = None
    opt_prior: AdamState = None
    kind: str = "dynae"
    config: TrainConfig = field(default_factory=TrainConfig)

    @classmethod
    def create(cls, data_dim, config, kind="dynae", rng=None):
        rng = rng if rng is not None else Rng(config.seed)
        d = config.d
        enc_out = 2 * d if kind == "betavae" else d
        enc = FeedForwardNet([data_dim, *config.encoder_hidden, enc_out], "relu", rng=rng.spawn())
        dec = FeedForwardNet([d, *reversed(config.encoder_hidden), data_dim], "relu",
                             rng=rng.spawn())
        prior = None
        if kind == "dynae":
            prior = PriorModel(d, config.prior_hidden, rng=rng.spawn())
        bundle = cls(enc, dec, prior, kind=kind, config=config)
        bundle.opt_ae = AdamState.for_params(bundle.ae_params(), config.learning_rate)
        if prior is not None:
            bundle.opt_prior = AdamState.for_params(prior.params(), config.learning_rate)
        return bundle

    def ae_params(self):
        return self.encoder.params() + self.decoder.params()

    def encode(self, X):
        z = self.encoder.forward(X)
        if self.kind == "betavae":
            return z[..., : self.config.d]
        return z

    def snapshot(self):
        return copy.deepcopy(self)

    def save(self, out_dir, extra=None):
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        save_net(self.encoder, out / "encoder")
        save_net(self.decoder, out / "decoder")
        if self.prior is not None:
            save_net(self.prior.force_net, out / "force")
            save_net(self.prior.diffusion_net, out / "diffusion",
                     extra={"output_transform": "softplus", "floor": self.prior.floor})
        meta = {"kind": self.kind, "config": self.config.to_dict()}
        if extra:
            meta.update(extra)
        (out / "model.json").write_text(json.dumps(meta, indent=2) + "\n")

    @classmethod
    def load(cls, ckpt_dir):
        ckpt = Path(ckpt_dir)
        meta = json.loads((ckpt / "model.json").read_text())
        cfg = TrainConfig.from_dict(meta["config"])
        enc, _ = load_net(ckpt / "encoder")
        dec, _ = load_net(ckpt / "decoder")
        prior = None
        if meta["kind"] == "dynae":
            fnet, _ = load_net(ckpt / "force")
            mnet, mman = load_net(ckpt / "diffusion")
            prior = PriorModel(cfg.d, force_net=fnet, diffusion_net=mnet,
                               floor=mman.get("floor", 1e-6))
        return cls(enc, dec, prior, kind=meta["kind"], config=cfg)


class TrainingAborted(RuntimeError):
    """Training hit a non-finite loss; carries the last good model state."""

    def __init__(self, message, last_good, metrics):
        super().__init__(message)
        self.last_good = last_good
        self.metrics = metrics


# --- losses ----------------------------------------------------------------

def _stack_groups(groups, D):
    if not groups or any(len(g[0]) == 0 for g in groups):
        raise ValueError("every bin must hold at least one pair")
    for Xt, Xt1 in groups:
        if np.shape(Xt) != np.shape(Xt1) or np.shape(Xt)[-1] != D:
            raise ShapeError(f"pairs must both have shape (n, {D})")
    K = len(groups)
    sizes = [len(g[0]) for g in groups]
    Xt = np.concatenate([g[0] for g in groups])
    Xt1 = np.concatenate([g[1] for g in groups])
    w = np.concatenate([np.full(n, 1.0 / (K * n)) for n in sizes])
    return np.concatenate([Xt, Xt1]), w, sizes


def draw_prior_samples(bundle, z_t, rng):
    """One prior displacement per latent point, with unit constant diffusion.

    ``prior_drift="force"`` uses ``f(z) + eps``. The default ``"mean"`` uses
    the fitted mean displacement ``M f + dM/dz`` as drift instead, so the
    samples share the first moment of the fitted transition density even
    where the fitted M is not 1.
    """
    if bundle.config.prior_drift == "force":
        return sample_prior_displacement(bundle.prior, z_t, rng)
    M, dM = bundle.prior.diffusion_and_divergence(z_t)
    return M * bundle.prior.force(z_t) + dM + rng.normal(np.shape(z_t))


def rec_loss(bundle, groups):
    """Bin-averaged mean of ||psi(phi(X_t)) - X_t||^2 + ||psi(phi(X_t+1)) - X_t+1||^2."""
    X, w, _ = _stack_groups(groups, bundle.encoder.in_dim)
    r = bundle.decoder.forward(bundle.encode(X)) - X
    return float(np.sum(np.concatenate([w, w]) * np.sum(r * r, axis=1)))


def rep_loss(bundle, groups, dirs, beta, prior_samples=None, rng=None):
    return rep_loss_and_grad(bundle, groups, dirs, beta, prior_samples, rng)[0]


def rep_loss_and_grad(bundle, groups, dirs, beta, prior_samples=None, rng=None):
    """Representation loss and its gradient w.r.t. ``bundle.ae_params()``.

    ``prior_samples`` (one displacement per pair, per bin) are drawn from the
    prior when not given; they are constants for the gradient, so the prior
    networks receive no gradient from this loss.

    Returns ``(loss, grads, parts)`` with parts = {rec, reg, z_t, dz}.
    """
    enc, dec = bundle.encoder, bundle.decoder
    X, w, sizes = _stack_groups(groups, enc.in_dim)
    n = len(w)
    z, enc_cache = enc.forward_cache(X)
    recon, dec_cache = dec.forward_cache(z)
    r = recon - X
    w2 = np.concatenate([w, w])[:, None]
    rec = float(np.sum(w2 * r * r))
    dec_grads, g_z = dec.backward(dec_cache, 2.0 * w2 * r)

    z_t, z_t1 = z[:n], z[n:]
    dz = z_t1 - z_t
    bounds = np.cumsum([0] + sizes)
    enc_bins = [dz[a:b] for a, b in zip(bounds[:-1], bounds[1:])]
    if prior_samples is None:
        full = draw_prior_samples(bundle, z_t, rng)
        prior_samples = [full[a:b] for a, b in zip(bounds[:-1], bounds[1:])]
    reg = 0.0
    if beta > 0:
        reg, g_bins, _ = binned_sw_regularizer_and_grad(enc_bins, prior_samples, dirs)
        g_dz = beta * np.concatenate(g_bins)
        g_z = g_z.copy()
        g_z[n:] += g_dz
        g_z[:n] -= g_dz
    else:
        reg = binned_sw_regularizer(enc_bins, prior_samples, dirs)
    enc_grads, _ = enc.backward(enc_cache, g_z)
    loss = rec + beta * reg
    return loss, enc_grads + dec_grads, {"rec": rec, "reg": reg, "z_t": z_t, "dz": dz}


def prior_step(bundle, groups):
    """One Adam step on the prior networks. ``groups`` holds ``(z_t, dz)`` per bin."""
    loss, grads = prior_loss_and_grad(bundle.prior, groups)
    if not math.isfinite(loss):
        raise NonFiniteError("non-finite prior loss")
    adam_step(bundle.prior.params(), grads, bundle.opt_prior)
    return loss


def _epoch_bins(bundle, Xt, config, epoch, rng, state):
    """Per-bin pools of pair indices for this epoch (one bin until epoch 2)."""
    if epoch <= 1:
        return [np.arange(len(Xt))], None
    z = bundle.encode(Xt)
    d_min = config.d_min or state.get("d_min")
    if d_min is None:
        # the latent scale settles only once beta is at full strength
        d_min = choose_d_min(z)
        if epoch >= config.warmup_epochs + config.ramp_epochs - 1:
            state["d_min"] = d_min
    part = BinPartition.build(z, d_min, config.gamma, rng)
    pools = [m for m in part.members if len(m) > 0]
    return pools, part


def run_training(observations, config, on_epoch=None):
    """Fit a dynamics-constrained autoencoder to a trajectory.

    ``observations`` is a Trajectory or an array of shape (frames, D).
    Returns ``(bundle, metrics)`` where metrics holds one dict per epoch
    with keys epoch, rec, reg, prior, K, beta, wall_ms.
    """
    X = getattr(observations, "data", observations)
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] < 2:
        raise ValueError("need a (frames, D) trajectory with at least 2 frames")
    Xt, Xt1 = X[:-1], X[1:]
    N = len(Xt)
    rng = Rng(config.seed)
    bundle = ModelBundle.create(X.shape[1], config, "dynae", rng)
    B = min(config.batch_size, N)
    state = {}
    metrics = []
    last_good = bundle.snapshot()
    for epoch in range(config.epochs):
        t0 = time.perf_counter()
        beta = config.beta_at(epoch)
        pools, part = _epoch_bins(bundle, Xt, config, epoch, rng, state)
        sums = np.zeros(3)
        n_batches = max(1, N // B)
        try:
            for _ in range(n_batches):
                pool = pools[int(rng.integers(len(pools)))]
                idx = pool if len(pool) <= B else rng.choice(pool, B, replace=False)
                dirs = sample_directions(config.d, config.L, rng)
                groups = [(Xt[idx], Xt1[idx])]
                loss, grads, parts = rep_loss_and_grad(bundle, groups, dirs, beta, rng=rng)
                if not math.isfinite(loss):
                    raise NonFiniteError("non-finite representation loss")
                adam_step(bundle.ae_params(), grads, bundle.opt_ae)
                ploss = prior_step(bundle, [(parts["z_t"], parts["dz"])])
                sums += (parts["rec"], parts["reg"], ploss)
        except NonFiniteError as exc:
            raise TrainingAborted(f"epoch {epoch}: {exc}", last_good, metrics) from exc
        rec, reg, prior = sums / n_batches
        rec_d = {"epoch": epoch, "rec": rec, "reg": reg, "prior": prior,
                 "K": 1 if part is None else part.K, "beta": beta,
                 "wall_ms": round(1000 * (time.perf_counter() - t0), 3)}
        metrics.append(rec_d)
        log.info("epoch %d rec=%.5g reg=%.5g prior=%.5g K=%d", epoch, rec, reg, prior, rec_d["K"])
        last_good = bundle.snapshot()
        if on_epoch is not None:
            on_epoch(rec_d, bundle, part)
    bundle.config = copy.copy(config)
    if state.get("d_min") is not None:
        bundle.config.d_min = float(state["d_min"])
    return bundle, metrics


# --- beta-VAE baseline -----------------------------------------------------

def gaussian_kl(mu, logvar):
    """KL( N(mu, diag exp(logvar)) || N(0, I) ) per sample."""
    return 0.5 * np.sum(mu * mu + np.exp(logvar) - 1.0 - logvar, axis=-1)


def betavae_loss_and_grad(bundle, X, eps, beta):
    """Mean over the batch of ||psi(z) - X||^2 + beta * KL with
    ``z = mu + exp(logvar / 2) * eps``. Returns ``(loss, grads, parts)``."""
    d = bundle.config.d
    X = np.atleast_2d(X)
    n = len(X)
    h, enc_cache = bundle.encoder.forward_cache(X)
    mu, logvar = h[:, :d], h[:, d:]
    std = np.exp(0.5 * logvar)
    z = mu + std * eps
    recon, dec_cache = bundle.decoder.forward_cache(z)
    r = recon - X
    rec = float(np.sum(r * r) / n)
    kl = float(np.mean(gaussian_kl(mu, logvar)))
    dec_grads, g_z = bundle.decoder.backward(dec_cache, 2.0 * r / n)
    g_mu = g_z + beta * mu / n
    g_lv = g_z * eps * 0.5 * std + beta * 0.5 * (np.exp(logvar) - 1.0) / n
    enc_grads, _ = bundle.encoder.backward(enc_cache, np.concatenate([g_mu, g_lv], axis=1))
    return rec + beta * kl, enc_grads + dec_grads, {"rec": rec, "kl": kl}


def betavae_train(observations, config, on_epoch=None):
    """Gaussian-encoder VAE with a standard-normal prior, weighted by beta.

    Uses the same network widths, optimizer and batch size as run_training
    but ignores the temporal order of frames.
    """
    X = np.asarray(getattr(observations, "data", observations), dtype=np.float64)
    rng = Rng(config.seed)
    bundle = ModelBundle.create(X.shape[1], config, "betavae", rng)
    N = len(X)
    B = min(config.batch_size, N)
    metrics = []
    last_good = bundle.snapshot()
    for epoch in range(config.epochs):
        t0 = time.perf_counter()
        order = rng.permutation(N)
        sums = np.zeros(2)
        n_batches = max(1, N // B)
        try:
            for i in range(n_batches):
                idx = order[i * B:(i + 1) * B]
                eps = rng.normal((len(idx), config.d))
                loss, grads, parts = betavae_loss_and_grad(bundle, X[idx], eps, config.beta)
                if not math.isfinite(loss):
                    raise NonFiniteError("non-finite beta-VAE loss")
                adam_step(bundle.ae_params(), grads, bundle.opt_ae)
                sums += (parts["rec"], parts["kl"])
        except NonFiniteError as exc:
            raise TrainingAborted(f"epoch {epoch}: {exc}", last_good, metrics) from exc
        rec, kl = sums / n_batches
        rec_d = {"epoch": epoch, "rec": rec, "kl": kl, "beta": config.beta,
                 "wall_ms": round(1000 * (time.perf_counter() - t0), 3)}
        metrics.append(rec_d)
        log.info("epoch %d rec=%.5g kl=%.5g", epoch, rec, kl)
        last_good = bundle.snapshot()
        if on_epoch is not None:
            on_epoch(rec_d, bundle, None)
    return bundle, metrics


def write_metrics(metrics, path):
    with open(path, "w") as fh:
        for rec in metrics:
            fh.write(json.dumps(rec) + "\n")
