"""Command-line entry point: ``asense <command> [flags]``.

Every command writes ``manifest.json`` next to its outputs; ``asense replay``
re-runs a command from that file.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import __version__
from .active import EpisodeConfig, EpisodeError, parse_method, run_episode
from .basis import MeasurementModel
from .data import DataError, Dataset, load_fashion_mnist, synth_dataset, write_csv
from .experiments import SVI_METHODS, compare_criteria, compare_svi, suite_from, write_info_maps, write_trajectory
from .models import CheckpointError, encode_batch, file_sha256, load_checkpoint, save_checkpoint
from .training import REPORT_COLUMNS, TrainConfig, train_partial, train_vae

log = logging.getLogger("asense")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
SYNTH_TRAIN_SEED, SYNTH_TEST_SEED, SYNTH_TEST_COUNT = 0, 1, 1000


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class Profile:
    channels: tuple
    train_images: int
    vae_epochs: int
    partial_epochs: int


PROFILES = {
    "small": Profile((8, 16), 2000, 10, 20),
    "paper": Profile((32, 64), 60000, 100, 200),
}


# ---------------------------------------------------------------------------
# data
# ---------------------------------------------------------------------------

def _data_dir(args) -> Path:
    d = args.data_dir or os.environ.get("ASENSE_DATA_DIR")
    if not d:
        raise DataError("fmnist data needs --data-dir or ASENSE_DATA_DIR")
    return Path(d)


def load_split(args, split: str, count: int | None = None) -> Dataset:
    if args.data == "synth":
        if split == "train":
            return synth_dataset(count or PROFILES[args.profile].train_images, SYNTH_TRAIN_SEED, "train")
        return synth_dataset(count or SYNTH_TEST_COUNT, SYNTH_TEST_SEED, "test")
    ds = load_fashion_mnist(_data_dir(args), split)
    return ds.subset(count) if count else ds


# ---------------------------------------------------------------------------
# manifest
# ---------------------------------------------------------------------------

def write_manifest(out: Path, args, config: dict, checkpoint: str | None, outputs: dict) -> Path:
    manifest = {
        "command": args.command,
        "args": {k: v for k, v in vars(args).items() if k != "func"},
        "config": config,
        "seed": args.seed,
        "checkpoint_sha256": file_sha256(checkpoint) if checkpoint else None,
        "version": __version__,
        "outputs": {k: str(Path(v).relative_to(out)) for k, v in outputs.items()},
    }
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True, default=_jsonable) + "\n")
    return path


def _jsonable(v):
    if isinstance(v, (np.integer, np.floating)):
        return v.item()
    if isinstance(v, (tuple, np.ndarray)):
        return list(v)
    if isinstance(v, Path):
        return str(v)
    raise TypeError(f"cannot serialise {type(v).__name__}")


def _out(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _need_file(path, what):
    if path is None or not Path(path).is_file():
        raise DataError(f"missing {what}: {path}")


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def _train_config(args, epochs_default):
    prof = PROFILES[args.profile]
    epochs = args.epochs if args.epochs is not None else epochs_default
    try:
        return TrainConfig(epochs=epochs, rng_seed=args.seed, channels=prof.channels, noise_sigma=args.noise,
                           mask_seed=getattr(args, "mask_seed", None), batch_size=args.batch_size)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def cmd_train_vae(args):
    cfg = _train_config(args, PROFILES[args.profile].vae_epochs)
    out = _out(args)
    data = load_split(args, "train", args.train_images)
    bundle, report = train_vae(cfg, data)
    ckpt, rep = out / "vae.ckpt", out / "vae_report.csv"
    save_checkpoint(bundle, ckpt)
    write_csv(report, REPORT_COLUMNS, rep)
    write_manifest(out, args, cfg.to_dict(), None, {"checkpoint": ckpt, "report": rep})
    print(f"wrote {ckpt} (sha256 {file_sha256(ckpt)})")


def cmd_train_partial(args):
    cfg = _train_config(args, PROFILES[args.profile].partial_epochs)
    _need_file(args.checkpoint, "VAE checkpoint")
    out = _out(args)
    bundle = load_checkpoint(args.checkpoint)
    data = load_split(args, "train", args.train_images)
    bundle, report = train_partial(cfg, data, bundle)
    ckpt, rep = out / "bundle.ckpt", out / "partial_report.csv"
    save_checkpoint(bundle, ckpt)
    write_csv(report, REPORT_COLUMNS, rep)
    write_manifest(out, args, cfg.to_dict(), args.checkpoint, {"checkpoint": ckpt, "report": rep})
    print(f"wrote {ckpt} (sha256 {file_sha256(ckpt)})")


def _episode_config(args, **over) -> EpisodeConfig:
    kw = dict(criterion=args.criterion, candidates=args.candidates, steps=args.steps,
              candidate_posterior=args.candidate_posterior,
              posterior_update=args.posterior_update, noise_sigma=args.noise, rng_seed=args.seed)
    kw.update(over)
    try:
        return EpisodeConfig(**kw)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def _target(args) -> np.ndarray:
    if args.image:
        _need_file(args.image, "target image")
        img = np.load(args.image) if args.image.endswith(".npy") else np.loadtxt(args.image, delimiter=",")
        if img.shape != (28, 28):
            raise DataError(f"{args.image}: target must be 28x28, got {img.shape}")
        return img.astype(np.float64)
    test = load_split(args, "test")
    if not 0 <= args.index < len(test):
        raise ConfigError(f"--index {args.index} outside test split of {len(test)} images")
    return test.images[args.index]


def cmd_run(args):
    cfg = _episode_config(args, record_info_maps=args.info_maps)
    _need_file(args.checkpoint, "checkpoint")
    out = _out(args)
    bundle = load_checkpoint(args.checkpoint)
    traj = run_episode(_target(args), bundle, cfg, MeasurementModel(noise_sigma=args.noise))
    outputs = {"trajectory": write_trajectory(traj, out / "trajectory.csv")}
    if args.info_maps:
        for p in write_info_maps(traj, out / "info_maps"):
            outputs[f"info_map:{p.stem}"] = p
    write_manifest(out, args, cfg.to_dict(), args.checkpoint, outputs)
    last = traj.records[-1]
    print(f"step {last.step}: mse {last.mse:.6g} ssim {last.ssim:.4f}")


def _sweep_setup(args):
    _need_file(args.checkpoint, "checkpoint")
    if args.seeds < 1:
        raise ConfigError("--seeds must be >= 1")
    if args.workers < 1:
        raise ConfigError("--workers must be >= 1")
    seeds = [args.seed + s for s in range(args.seeds)]
    return seeds


def cmd_compare_svi(args):
    cfg = _episode_config(args)
    methods = tuple(m.strip() for m in args.methods.split(","))
    for m in methods:
        try:
            parse_method(m)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
    seeds = _sweep_setup(args)
    out = _out(args)
    bundle = load_checkpoint(args.checkpoint)
    suite = suite_from(load_split(args, "test"))
    rows, schema = compare_svi(suite.images, bundle, cfg, seeds, methods, args.workers)
    path = out / "compare_svi.csv"
    write_csv(rows, schema, path)
    write_manifest(out, args, {**cfg.to_dict(), "methods": methods, "seeds": seeds}, args.checkpoint,
                   {"sweep": path})
    print(f"wrote {path}")


def cmd_compare_criteria(args):
    cfg = _episode_config(args)
    try:
        counts = tuple(int(c) for c in args.candidate_counts.split(","))
    except ValueError as exc:
        raise ConfigError(f"--candidate-counts: {exc}") from exc
    if any(c < 1 for c in counts):
        raise ConfigError("candidate counts must be >= 1")
    criteria = tuple(c.strip().lower() for c in args.criteria.split(","))
    for c in criteria:
        _episode_config(args, criterion=c)
    seeds = _sweep_setup(args)
    out = _out(args)
    bundle = load_checkpoint(args.checkpoint)
    suite = suite_from(load_split(args, "test"))
    rows, schema = compare_criteria(suite.images, bundle, cfg, seeds, criteria, counts, args.workers)
    path = out / "compare_criteria.csv"
    write_csv(rows, schema, path)
    write_manifest(out, args, {**cfg.to_dict(), "criteria": criteria, "candidate_counts": counts,
                               "seeds": seeds}, args.checkpoint, {"sweep": path})
    print(f"wrote {path}")


def cmd_export_latents(args):
    _need_file(args.checkpoint, "checkpoint")
    out = _out(args)
    bundle = load_checkpoint(args.checkpoint)
    test = load_split(args, "test", args.count)
    mu, _ = encode_batch(bundle, test.images)
    schema = ["label"] + [f"mu_{d}" for d in range(mu.shape[1])]
    path = out / "latents.csv"
    write_csv([[int(l), *m] for l, m in zip(test.labels, mu)], schema, path)
    write_manifest(out, args, {"count": len(test)}, args.checkpoint, {"latents": path})
    print(f"wrote {path}")


def cmd_replay(args):
    _need_file(args.manifest, "manifest")
    try:
        manifest = json.loads(Path(args.manifest).read_text())
        saved = manifest["args"]
    except (ValueError, KeyError) as exc:
        raise DataError(f"{args.manifest}: not a run manifest ({exc})") from exc
    if saved.get("command") == "replay":
        raise ConfigError("cannot replay a replay manifest")
    want = manifest.get("checkpoint_sha256")
    if want:
        _need_file(saved.get("checkpoint"), "checkpoint")
        have = file_sha256(saved["checkpoint"])
        if have != want:
            raise DataError(f"checkpoint {saved['checkpoint']} has sha256 {have}, manifest expects {want}")
    saved["out"] = args.out or saved["out"]
    replayed = argparse.Namespace(**saved, func=COMMANDS[saved["command"]])
    return replayed.func(replayed)


COMMANDS = {
    "train-vae": cmd_train_vae,
    "train-partial": cmd_train_partial,
    "run": cmd_run,
    "compare-svi": cmd_compare_svi,
    "compare-criteria": cmd_compare_criteria,
    "export-latents": cmd_export_latents,
    "replay": cmd_replay,
}


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def _common(p, data=True):
    if data:
        p.add_argument("--data", choices=("synth", "fmnist"), default="synth")
        p.add_argument("--data-dir", default=None, help="IDX directory (falls back to $ASENSE_DATA_DIR)")
        p.add_argument("--profile", choices=tuple(PROFILES), default="small")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output directory")


def _episode_flags(p, criterion=True):
    if criterion:
        p.add_argument("--criterion", default="qp", help="qp, mi or ho")
    p.add_argument("--candidates", type=int, default=100)
    p.add_argument("--steps", type=int, default=50)
    p.add_argument("--noise", type=float, default=0.05)
    p.add_argument("--candidate-posterior", default="pvae", help="pvae or svi:N")
    p.add_argument("--posterior-update", default="svi:100", help="pvae or svi:N, used for the next prior")
    p.add_argument("--checkpoint", required=True)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="asense", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=f"asense {__version__}")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    for name, help_ in (("train-vae", "train encoder and decoder"), ("train-partial", "train the partial encoder")):
        p = sub.add_parser(name, help=help_)
        _common(p)
        p.add_argument("--epochs", type=int, default=None, help="override the profile's epoch count")
        p.add_argument("--train-images", type=int, default=None, help="override the profile's training set size")
        p.add_argument("--batch-size", type=int, default=128)
        p.add_argument("--noise", type=float, default=0.05, help="measurement noise used in simulated training")
        if name == "train-partial":
            p.add_argument("--checkpoint", required=True, help="VAE checkpoint from train-vae")
            p.add_argument("--mask-seed", type=int, default=None)

    p = sub.add_parser("run", help="one active-measurement episode")
    _common(p)
    _episode_flags(p)
    p.add_argument("--index", type=int, default=0, help="test split image index")
    p.add_argument("--image", default=None, help="28x28 target as .npy or comma-separated text")
    p.add_argument("--info-maps", action="store_true", help="also write 7x7 information maps per step")

    p = sub.add_parser("compare-svi", help="posterior-update sweep over the 10-image suite")
    _common(p)
    _episode_flags(p)
    p.add_argument("--methods", default=",".join(SVI_METHODS))
    p.add_argument("--seeds", type=int, default=3)
    p.add_argument("--workers", type=int, default=1)

    p = sub.add_parser("compare-criteria", help="criterion x candidate-count sweep over the 10-image suite")
    _common(p)
    _episode_flags(p)
    p.add_argument("--criteria", default="qp,mi,ho")
    p.add_argument("--candidate-counts", default="1,10,100")
    p.add_argument("--seeds", type=int, default=3)
    p.add_argument("--workers", type=int, default=1)

    p = sub.add_parser("export-latents", help="latent means of test images as CSV")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--count", type=int, default=None)

    p = sub.add_parser("replay", help="re-run a command from its manifest.json")
    p.add_argument("manifest")
    p.add_argument("--out", default=None, help="write to this directory instead of the original")
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        COMMANDS[args.command](args)
    except (ConfigError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, CheckpointError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (FloatingPointError, EpisodeError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
