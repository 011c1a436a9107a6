"""``stormseg`` command line: data generation, feature engineering, training,
evaluation, prediction and threshold curves.

Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from dataclasses import asdict, dataclass, field, fields, replace
from importlib import resources
from pathlib import Path
from typing import Optional

log = logging.getLogger("stormseg")

PRESET_NAMES = ("baseline", "lr_decay", "feature_engineering", "cross_entropy",
                "weighted_cross_entropy", "focal_tversky", "weighted_jaccard")

# BG purple, TC green, AR yellow
PALETTE = ((68, 1, 84), (53, 183, 121), (253, 231, 37))


class CliError(Exception):
    """Runtime failure reported as a one-line message with exit code 1."""


# ----------------------------------------------------------------------------
# experiment configuration
# ----------------------------------------------------------------------------

@dataclass
class ExperimentConfig:
    name: str = "experiment"
    model: object = "tiny"
    train: dict = field(default_factory=dict)
    dataset: str = "data/synthetic"
    features: bool = False
    augment: bool = False
    out: str = "runs/experiment"

    @classmethod
    def from_dict(cls, d: dict, source: str = "<config>") -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise CliError(f"{source}: unknown config keys {unknown}")
        return cls(**d)

    def channels(self) -> tuple[str, ...]:
        from .climate_data.sample import BASELINE_CHANNELS, ENGINEERED_CHANNELS

        if "channels" in self.train:
            return tuple(self.train["channels"])
        return BASELINE_CHANNELS + (ENGINEERED_CHANNELS if self.features else ())

    def train_config(self):
        from .training import TrainConfig

        d = dict(self.train)
        d["channels"] = self.channels()
        d.setdefault("augment_roll", self.augment)
        try:
            return TrainConfig(**d)
        except TypeError as exc:
            raise CliError(f"bad train section: {exc}") from None

    def model_config(self):
        from .model import resolve_config

        try:
            cfg = resolve_config(self.model, input_channels=len(self.channels()))
            cfg.validate()
        except (KeyError, TypeError, ValueError) as exc:
            raise CliError(f"bad model section: {exc}") from None
        return cfg


def preset_path(name: str) -> Path:
    return Path(str(resources.files("stormseg") / "presets" / f"{name}.json"))


def read_json(path) -> dict:
    path = Path(path)
    if not path.is_file():
        if not path.suffix and str(path) in PRESET_NAMES:
            path = preset_path(str(path))
        else:
            raise CliError(f"config file not found: {path}")
    try:
        return json.loads(path.read_text("utf-8"))
    except json.JSONDecodeError as exc:
        raise CliError(f"corrupt config file {path}: {exc}") from None


def write_json(path: Path, obj) -> None:
    from .climate_data.tensorfile import atomic_write_bytes

    atomic_write_bytes(path, (json.dumps(obj, indent=1, sort_keys=True) + "\n").encode("utf-8"))


def write_text(path: Path, text: str) -> None:
    from .climate_data.tensorfile import atomic_write_bytes

    atomic_write_bytes(path, text.encode("utf-8"))


def open_dataset(path):
    from .climate_data.dataset import Dataset

    if path is None:
        raise CliError("--dataset is required")
    try:
        return Dataset(path)
    except FileNotFoundError as exc:
        raise CliError(str(exc)) from None


def require_out(args) -> Path:
    if args.out is None:
        raise CliError("--out is required")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


# ----------------------------------------------------------------------------
# commands
# ----------------------------------------------------------------------------

def cmd_gen_synthetic(args) -> int:
    from .climate_data.dataset import write_dataset
    from .climate_data.synthetic import SyntheticConfig, gen_synthetic_dataset

    d = read_json(args.config) if args.config else {}
    if args.seed is not None:
        d["seed"] = args.seed
    for key in ("tc_per_sample", "ar_per_sample", "tc_radius", "ar_half_width", "ar_length"):
        if key in d:
            d[key] = tuple(d[key])
    try:
        cfg = SyntheticConfig(**d)
    except TypeError as exc:
        raise CliError(f"bad synthetic config: {exc}") from None
    out = require_out(args)
    samples, splits = gen_synthetic_dataset(cfg)
    write_dataset(out, samples, splits)
    write_json(out / "synthetic_config.json", asdict(cfg))
    print(f"wrote {len(samples)} samples to {out}")
    return 0


def cmd_features(args) -> int:
    from .climate_data.dataset import write_dataset
    from .features import engineer_features

    ds = open_dataset(args.dataset)
    out = require_out(args)
    if out.resolve() == ds.root.resolve():
        raise CliError(f"--out must differ from the input dataset {ds.root}")
    recs = ds.records()
    samples = [engineer_features(ds.load_sample(r)) for r in recs]
    write_dataset(out, samples, [r.split for r in recs])
    print(f"wrote {len(samples)} samples with engineered channels to {out}")
    return 0


def cmd_stats(args) -> int:
    from .climate_data.dataset import class_frequencies, compute_class_weights

    ds = open_dataset(args.dataset)
    splits = [args.split] if args.split else [s for s, n in ds.manifest.split_counts().items() if n]
    report = {}
    for split in splits:
        recs = ds.records(split)
        if not recs:
            raise CliError(f"split {split!r} of {ds.root} is empty")
        labels = (ds.load_sample(r, []).labels for r in recs)
        freqs = class_frequencies(labels)
        weights = compute_class_weights(freqs, "inverse", "mean_one", smoothing=1e-6)
        report[split] = {"samples": len(recs), "pixels": int(freqs.total),
                         "counts": [int(c) for c in freqs.counts],
                         "frequencies": [float(f) for f in freqs.fractions],
                         "inverse_weights": [float(w) for w in weights.w]}
        fr = ", ".join(f"{f:.6f}" for f in freqs.fractions)
        print(f"{split}: samples={len(recs)} frequencies=({fr})")
    if args.out:
        write_json(require_out(args) / "stats.json", report)
    return 0


def _load_experiment(args) -> ExperimentConfig:
    if args.config is None:
        raise CliError("--config is required")
    exp = ExperimentConfig.from_dict(read_json(args.config), str(args.config))
    if args.dataset is not None:
        exp.dataset = args.dataset
    if args.out is not None:
        exp.out = args.out
    if args.seed is not None:
        exp.train = {**exp.train, "seed": args.seed}
    return exp


def cmd_train(args) -> int:
    from .checkpoint import save_checkpoint
    from .metrics import report_csv
    from .training import TrainData, train

    exp = _load_experiment(args)
    mcfg, tcfg = exp.model_config(), exp.train_config()
    ds = open_dataset(exp.dataset)
    data = TrainData.from_dataset(ds, tcfg.channels)
    out = Path(exp.out)
    out.mkdir(parents=True, exist_ok=True)
    resolved = {"name": exp.name, "model": replace(mcfg, seed=tcfg.seed).to_dict(),
                "train": tcfg.to_dict(), "dataset": str(exp.dataset),
                "features": exp.features, "augment": exp.augment, "out": str(out)}
    write_json(out / "config.json", resolved)
    t0 = time.perf_counter()
    params, history, spec = train(mcfg, data, tcfg, progress=args.verbose)
    write_text(out / "history.csv", history.to_csv())
    meta = {"channels": list(tcfg.channels), "normalization": data.stats, "loss": spec.to_dict(),
            "experiment": exp.name, "epochs_run": len(history), "best_epoch": history.best_epoch}
    save_checkpoint(out / "checkpoint", params, replace(mcfg, seed=tcfg.seed), meta)
    last = history.epochs[-1]
    if last.val_report is not None:
        write_text(out / "metrics_val.csv", report_csv({"val": last.val_report}))
    summary = {"epochs_run": len(history), "stopped_early": history.stopped_early,
               "final_train_loss": last.train_loss, "final_val_loss": last.val_loss}
    if not args.deterministic:
        summary["elapsed_seconds"] = time.perf_counter() - t0
    write_json(out / "summary.json", summary)
    print(f"trained {exp.name}: {len(history)} epochs, final train loss {last.train_loss:.6f}; "
          f"outputs in {out}")
    return 0


def _checkpoint_and_data(args, split: str):
    from .checkpoint import load_checkpoint
    from .climate_data.dataset import split_arrays

    if args.checkpoint is None:
        raise CliError("--checkpoint is required")
    try:
        params, cfg, meta = load_checkpoint(args.checkpoint)
    except FileNotFoundError as exc:
        raise CliError(str(exc)) from None
    ds = open_dataset(args.dataset)
    channels = meta.get("channels")
    if not channels:
        raise CliError(f"checkpoint {args.checkpoint} records no input channels")
    h, w = ds.manifest.geometry.shape
    if h % cfg.stride or w % cfg.stride:
        raise CliError(f"grid {h}x{w} of {ds.root} is incompatible with model stride {cfg.stride}")
    x, y, samples = split_arrays(ds, split, channels, meta.get("normalization"))
    return params, cfg, x, y, samples


def cmd_eval(args) -> int:
    from .metrics import report_csv
    from .training import evaluate

    split = args.split or "test"
    params, cfg, x, y, _ = _checkpoint_and_data(args, split)
    if len(x) == 0:
        raise CliError(f"split {split!r} is empty")
    report, _ = evaluate(params, cfg, x, y)
    text = report_csv({split: report})
    if args.out:
        write_text(require_out(args) / f"metrics_{split}.csv", text)
    sys.stdout.write(text)
    return 0


def write_ppm(path: Path, labels) -> None:
    import numpy as np

    from .climate_data.tensorfile import atomic_write_bytes

    rgb = np.asarray(PALETTE, np.uint8)[np.asarray(labels)]
    h, w = labels.shape
    atomic_write_bytes(path, f"P6\n{w} {h}\n255\n".encode("ascii") + rgb.tobytes())


def cmd_predict(args) -> int:
    from .climate_data.tensorfile import write_tensor_file
    from .model import forward, predict_labels

    if args.sample is None:
        raise CliError("--sample is required")
    ds = open_dataset(args.dataset)
    try:
        split = args.split or ds.record(args.sample).split
    except KeyError:
        raise CliError(f"no sample {args.sample!r} in {ds.root}") from None
    params, cfg, x, _, samples = _checkpoint_and_data(args, split)
    ids = [s.sample_id for s in samples]
    if args.sample not in ids:
        raise CliError(f"no sample {args.sample!r} in split {split} of {ds.root}")
    i = ids.index(args.sample)
    labels = predict_labels(forward(x[i:i + 1], params, cfg, "eval"))[0]
    out = require_out(args)
    write_tensor_file(labels, out / f"{args.sample}.labels.cgt")
    if args.ppm:
        write_ppm(out / f"{args.sample}.ppm", labels)
    print(f"wrote prediction for {args.sample} to {out}")
    return 0


def cmd_curves(args) -> int:
    from .metrics import curves_csv, default_thresholds, pr_roc_curves
    from .training import predict_probs

    split = args.split or "test"
    params, cfg, x, y, _ = _checkpoint_and_data(args, split)
    if len(x) == 0:
        raise CliError(f"split {split!r} is empty")
    if args.threshold_count < 2:
        raise CliError("--threshold-count must be at least 2")
    probs = predict_probs(params, cfg, x)
    thr = default_thresholds(args.threshold_count)
    series = []
    for c in (1, 2):
        series.extend(pr_roc_curves(list(probs), list(y), c, thr))
    out = require_out(args)
    write_text(out / f"curves_{split}.csv", curves_csv(series))
    print(f"wrote curves for split {split} to {out}")
    return 0


COMMANDS = {
    "gen-synthetic": (cmd_gen_synthetic, "generate a synthetic dataset directory",
                      ("config", "out", "seed")),
    "features": (cmd_features, "append engineered wind-speed and vorticity channels",
                 ("dataset", "out")),
    "stats": (cmd_stats, "print class frequencies per split", ("dataset", "split", "out")),
    "train": (cmd_train, "train an experiment config",
              ("config", "dataset", "out", "seed", "deterministic", "verbose")),
    "eval": (cmd_eval, "evaluate a checkpoint on a split",
             ("checkpoint", "dataset", "split", "out")),
    "predict": (cmd_predict, "write the predicted label grid of one sample",
                ("checkpoint", "dataset", "sample", "split", "out", "ppm")),
    "curves": (cmd_curves, "precision-recall and ROC curves for TC and AR",
               ("checkpoint", "dataset", "split", "out", "threshold_count")),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="stormseg", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_text, opts) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text)
        if "config" in opts:
            p.add_argument("--config", help="JSON config path or shipped preset name")
        if "dataset" in opts:
            p.add_argument("--dataset", help="dataset directory")
        if "checkpoint" in opts:
            p.add_argument("--checkpoint", help="checkpoint directory")
        if "sample" in opts:
            p.add_argument("--sample", help="sample id")
        if "out" in opts:
            p.add_argument("--out", help="output directory")
        if "seed" in opts:
            p.add_argument("--seed", type=int)
        if "deterministic" in opts:
            p.add_argument("--deterministic", action="store_true",
                           help="single-threaded numerics, no timing fields in outputs")
        if "split" in opts:
            p.add_argument("--split", choices=("train", "val", "test"))
        if "threshold_count" in opts:
            p.add_argument("--threshold-count", type=int, default=101)
        if "ppm" in opts:
            p.add_argument("--ppm", action="store_true", help="also write a PPM colour image")
        if "verbose" in opts:
            p.add_argument("--verbose", action="store_true", help="log every epoch")
    return parser


def _single_thread():
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS", "NUMBA_NUM_THREADS"):
        os.environ[var] = "1"


def main(argv: Optional[list[str]] = None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    args = build_parser().parse_args(argv)   # exits 2 on usage errors
    if getattr(args, "deterministic", False) and "numpy" not in sys.modules:
        _single_thread()
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(message)s")
    from .climate_data.tensorfile import TensorFileError
    from .tensor import DimensionError

    try:
        return COMMANDS[args.command][0](args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
    except (TensorFileError, DimensionError) as exc:
        print(f"error: {exc}", file=sys.stderr)
    except (ValueError, KeyError, FileNotFoundError, RuntimeError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"error: {msg}", file=sys.stderr)
    return 1


if __name__ == "__main__":
    sys.exit(main())
