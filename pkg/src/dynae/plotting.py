"""Figures written next to the CSV/JSON reports.

Every function takes data already computed by :mod:`dynae.evaluation`,
draws one figure and saves it to ``path``. Nothing is shown interactively.
"""

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from matplotlib.patches import Ellipse  # noqa: E402

RC = {
    "figure.dpi": 110,
    "savefig.dpi": 110,
    "font.size": 9,
    "axes.titlesize": 9,
    "axes.labelsize": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "image.cmap": "viridis",
}


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return path


def plot_free_energy(F, edges, path, title="free energy (kT)", samples=None):
    """2-D free-energy surface with optional scattered samples on top."""
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=(4, 3.4))
        if len(edges) == 2:
            im = ax.pcolormesh(edges[0], edges[1], F.T, shading="flat")
            fig.colorbar(im, ax=ax, label="F")
            ax.set_xlabel("z1")
            ax.set_ylabel("z2")
        else:
            centers = 0.5 * (edges[0][:-1] + edges[0][1:])
            ax.plot(centers, F, "k-")
            ax.set_xlabel("z1")
            ax.set_ylabel("F")
        if samples is not None and len(edges) == 2:
            ax.plot(samples[:, 0], samples[:, 1], ",", color="w", alpha=0.2)
        ax.set_title(title)
        return _save(fig, path)


def plot_fields(rows, d, path, background=None, ellipse_scale=0.3):
    """Force arrows (left) and diffusion ellipses (right) of a 2-D prior.

    ``rows`` comes from export_fields(); ``background`` is an optional
    ``(F, edges)`` free-energy histogram drawn underneath.
    """
    if d != 2:
        raise ValueError("field plots need a 2-D latent space")
    z, f, M = rows[:, :2], rows[:, 2:4], rows[:, 4:6]
    with plt.rc_context(RC):
        fig, axes = plt.subplots(1, 2, figsize=(7.5, 3.4), sharex=True, sharey=True)
        for ax in axes:
            if background is not None:
                F, edges = background
                ax.pcolormesh(edges[0], edges[1], F.T, shading="flat", alpha=0.6)
            ax.set_xlabel("z1")
            ax.set_aspect("equal", adjustable="box")
        axes[0].quiver(z[:, 0], z[:, 1], f[:, 0], f[:, 1], color="k", angles="xy")
        axes[0].set_ylabel("z2")
        axes[0].set_title("force field")
        step = np.min(np.ptp(z, axis=0)) / max(2.0, np.sqrt(len(z)))
        width = ellipse_scale * step / max(np.sqrt(M.max()), 1e-12)
        for (x, y), (m1, m2) in zip(z, M):
            axes[1].add_patch(Ellipse((x, y), width * np.sqrt(m1) * 2, width * np.sqrt(m2) * 2,
                                      fill=False, lw=0.6, color="k"))
        axes[1].set_xlim(z[:, 0].min() - step, z[:, 0].max() + step)
        axes[1].set_ylim(z[:, 1].min() - step, z[:, 1].max() + step)
        axes[1].set_title("diffusion field")
        return _save(fig, path)


def plot_latent_vs_truth(z, truth, path, names=None, max_points=5000):
    """Each learned coordinate against each true factor."""
    n = len(z)
    sel = np.linspace(0, n - 1, min(n, max_points)).astype(int)
    dz, dt = z.shape[1], truth.shape[1]
    names = names or [f"factor {j + 1}" for j in range(dt)]
    with plt.rc_context(RC):
        fig, axes = plt.subplots(dz, dt, figsize=(2.4 * dt, 2.2 * dz), squeeze=False)
        for i in range(dz):
            for j in range(dt):
                ax = axes[i, j]
                ax.plot(truth[sel, j], z[sel, i], ".", ms=1.5, alpha=0.4)
                if i == dz - 1:
                    ax.set_xlabel(names[j])
                if j == 0:
                    ax.set_ylabel(f"z{i + 1}")
        return _save(fig, path)


def plot_latent_histograms(z, path, bins=50):
    with plt.rc_context(RC):
        fig, axes = plt.subplots(1, z.shape[1], figsize=(2.6 * z.shape[1], 2.2), squeeze=False)
        for i, ax in enumerate(axes[0]):
            ax.hist(z[:, i], bins=bins, color="0.4")
            ax.set_xlabel(f"z{i + 1}")
        return _save(fig, path)


def plot_training_curves(metrics, path):
    """Per-epoch losses from a metrics log."""
    keys = [k for k in ("rec", "reg", "prior", "kl") if k in metrics[0]]
    epochs = [m["epoch"] for m in metrics]
    with plt.rc_context(RC):
        fig, axes = plt.subplots(1, len(keys), figsize=(2.6 * len(keys), 2.2), squeeze=False)
        for ax, k in zip(axes[0], keys):
            ax.plot(epochs, [m[k] for m in metrics], "k.-")
            ax.set_xlabel("epoch")
            ax.set_title(k)
        return _save(fig, path)
