"""Command-line entry point: ``dynae generate|train|evaluate|export-latent``.

Exit codes: 0 success, 2 usage or configuration error, 3 numerical failure.
"""

import argparse
import json
import logging
import os
import sys
from contextlib import nullcontext
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import datagen
from .errors import ConfigError, NonFiniteError
from .langevin import Trajectory
from .trainer import (ModelBundle, TrainConfig, TrainingAborted, betavae_train,
                      run_training, write_metrics)

log = logging.getLogger("dynae")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3
CONFIG_VERSION = 1
MODELS = ("dynae", "betavae")


@dataclass
class ExperimentConfig:
    data: str
    out: str = "runs/default"
    model: str = "dynae"
    recipe: str = None
    train: TrainConfig = field(default_factory=TrainConfig)
    version: int = CONFIG_VERSION

    @classmethod
    def from_dict(cls, raw):
        allowed = {"version", "recipe", "data", "out", "model", "train"}
        unknown = set(raw) - allowed
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")
        if raw.get("version") != CONFIG_VERSION:
            raise ConfigError(f"config version must be {CONFIG_VERSION}")
        if "data" not in raw:
            raise ConfigError("config needs a 'data' directory")
        model = raw.get("model", "dynae")
        if model not in MODELS:
            raise ConfigError(f"model must be one of {', '.join(MODELS)}")
        recipe = raw.get("recipe")
        if recipe is not None and recipe not in datagen.RECIPES:
            raise ConfigError(f"unknown recipe {recipe!r}; valid recipes: "
                              f"{', '.join(datagen.RECIPES)}")
        train = raw.get("train", {})
        if not isinstance(train, dict):
            raise ConfigError("'train' must be an object")
        try:
            train_cfg = TrainConfig.from_dict(train)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc
        return cls(str(raw["data"]), str(raw.get("out", "runs/default")), model, recipe,
                   train_cfg)

    @classmethod
    def load(cls, path):
        try:
            raw = json.loads(Path(path).read_text())
        except FileNotFoundError as exc:
            raise ConfigError(f"config file not found: {path}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
        if not isinstance(raw, dict):
            raise ConfigError("config must be a JSON object")
        return cls.from_dict(raw)

    def to_dict(self):
        return {"version": self.version, "recipe": self.recipe, "data": self.data,
                "out": self.out, "model": self.model, "train": self.train.to_dict()}


def _thread_limit(n):
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:  # pragma: no cover
        return nullcontext()
    return threadpool_limits(limits=n)


def _require_dataset(path, factors=False):
    d = Path(path)
    needed = ["observations.traj", "dataset.json"] + (["factors.traj"] if factors else [])
    missing = [n for n in needed if not (d / n).exists()]
    if missing:
        raise ConfigError(f"dataset {d} is missing {', '.join(missing)}")
    return d


# --- commands --------------------------------------------------------------

def cmd_generate(args):
    kw = {}
    if args.recipe == "three-well":
        kw = {"stride": args.stride, "dt_sim": args.dt_sim}
    elif args.recipe in ("sprite2", "sprite3"):
        kw = {"image_size": args.image_size, "step_sigma": args.step_sigma}
    try:
        ds = datagen.generate(args.recipe, args.frames, seed=args.seed, **kw)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    ds.save(args.out)
    if args.csv:
        ds.observations.to_csv(Path(args.out) / "observations.csv")
        ds.factors.to_csv(Path(args.out) / "factors.csv",
                          ds.descriptor.get("factor_names"))
    print(f"wrote {ds.observations.n_frames} frames to {args.out}")
    return EXIT_OK


def cmd_train(args):
    cfg = ExperimentConfig.load(args.config)
    if args.model:
        cfg.model = args.model
    if args.data:
        cfg.data = args.data
    out = Path(args.out or os.environ.get("DYNAE_OUT") or cfg.out)
    data_dir = _require_dataset(cfg.data)
    obs = Trajectory.load(data_dir / "observations.traj")
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2) + "\n")

    last_part = {}

    def on_epoch(rec, bundle, part):
        if part is not None:
            last_part["p"] = part

    train = run_training if cfg.model == "dynae" else betavae_train
    try:
        with _thread_limit(args.threads):
            bundle, metrics = train(obs, cfg.train, on_epoch=on_epoch)
    except TrainingAborted as exc:
        log.error("training aborted: %s", exc)
        exc.last_good.save(out / "checkpoint", extra={"aborted": str(exc)})
        write_metrics(exc.metrics, out / "metrics.jsonl")
        return EXIT_NUMERIC
    bundle.save(out / "checkpoint", extra={"data": str(data_dir)})
    write_metrics(metrics, out / "metrics.jsonl")
    if "p" in last_part:
        last_part["p"].dump(out / "partition.json")
    if args.figures:
        from .plotting import plot_training_curves
        plot_training_curves(metrics, out / "training.png")
    print(f"trained {cfg.model} for {len(metrics)} epochs; outputs in {out}")
    return EXIT_OK


def _load_checkpoint(path):
    ckpt = Path(path)
    if not (ckpt / "model.json").exists():
        raise ConfigError(f"no checkpoint at {ckpt}")
    return ModelBundle.load(ckpt)


def cmd_evaluate(args):
    from . import evaluation as ev

    bundle = _load_checkpoint(args.checkpoint)
    data_dir = _require_dataset(args.data, factors=True)
    obs = Trajectory.load(data_dir / "observations.traj")
    truth = Trajectory.load(data_dir / "factors.traj").data
    desc = json.loads((data_dir / "dataset.json").read_text())
    out = Path(args.out or os.environ.get("DYNAE_OUT") or "eval")
    out.mkdir(parents=True, exist_ok=True)

    z = bundle.encode(obs.data)
    if not np.all(np.isfinite(z)):
        raise NonFiniteError("encoder produced non-finite latent coordinates")
    report = {"model": bundle.kind, "n_frames": len(z)}
    if z.shape[1] == truth.shape[1]:
        report["recovery"] = ev.affine_recovery(z, truth).to_dict()
    else:
        report["recovery"] = None
        log.warning("latent dim %d != factor dim %d; skipping recovery",
                    z.shape[1], truth.shape[1])
    report["shape"] = ev.distribution_shape(z) if len(z) >= 100 else None
    (out / "report.json").write_text(json.dumps(report, indent=2) + "\n")

    F, edges = ev.free_energy_histogram(z, bins=args.bins)
    ev.write_histogram_csv(F, edges, out / "free_energy.csv")
    rows = None
    if bundle.prior is not None:
        lo = np.quantile(z, 0.02, axis=0)
        hi = np.quantile(z, 0.98, axis=0)
        _, rows = ev.export_fields(bundle.prior, lo, hi, args.grid, out / "fields.csv")

    if args.figures:
        from . import plotting
        plotting.plot_free_energy(F, edges, out / "free_energy.png")
        plotting.plot_latent_vs_truth(z, truth, out / "latent_vs_truth.png",
                                      desc.get("factor_names"))
        plotting.plot_latent_histograms(z, out / "latent_hist.png")
        if rows is not None and z.shape[1] == 2:
            plotting.plot_fields(rows, 2, out / "fields.png", background=(F, edges))
    r = report["recovery"]
    if r:
        print(f"affine R2 {r['affine_r2']:.4f}  procrustes {r['procrustes_error']:.4f}")
    print(f"reports in {out}")
    return EXIT_OK


def cmd_export_latent(args):
    bundle = _load_checkpoint(args.checkpoint)
    data_dir = _require_dataset(args.data)
    obs = Trajectory.load(data_dir / "observations.traj")
    z = Trajectory(bundle.encode(obs.data), lag=obs.lag)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    z.save(out)
    if args.csv:
        z.to_csv(out.with_suffix(".csv"), [f"z{i + 1}" for i in range(z.dims)])
    print(f"wrote latent trajectory {out}")
    return EXIT_OK


def build_parser():
    p = argparse.ArgumentParser(prog="dynae", description=__doc__.splitlines()[0])
    p.add_argument("--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="generate a synthetic dataset")
    g.add_argument("--recipe", required=True)
    g.add_argument("--frames", type=int, required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.add_argument("--stride", type=int, default=2)
    g.add_argument("--dt-sim", type=float, default=0.01)
    g.add_argument("--image-size", type=int, default=16)
    g.add_argument("--step-sigma", type=float, default=0.05)
    g.add_argument("--csv", action="store_true", help="also write CSV mirrors")
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="train a model from a JSON config")
    t.add_argument("--config", required=True)
    t.add_argument("--model", choices=MODELS)
    t.add_argument("--data")
    t.add_argument("--out")
    t.add_argument("--threads", type=int, default=int(os.environ.get("DYNAE_THREADS", 1)))
    t.add_argument("--figures", action=argparse.BooleanOptionalAction, default=True)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("evaluate", help="score a checkpoint against known factors")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--out")
    e.add_argument("--bins", type=int, default=30)
    e.add_argument("--grid", type=int, default=15)
    e.add_argument("--figures", action=argparse.BooleanOptionalAction, default=True)
    e.set_defaults(func=cmd_evaluate)

    x = sub.add_parser("export-latent", help="write the encoded trajectory")
    x.add_argument("--checkpoint", required=True)
    x.add_argument("--data", required=True)
    x.add_argument("--out", required=True)
    x.add_argument("--csv", action="store_true")
    x.set_defaults(func=cmd_export_latent)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"dynae: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NonFiniteError as exc:
        print(f"dynae: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
