"""Command-line entry point: ``cfsl gen-data | train | eval | analyze``.

Every config key can be given as ``--key value`` and overrides the file
passed with ``--config``. Exit codes: 0 ok, 2 config error, 3 data error,
4 runtime error.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import logging
import sys
from pathlib import Path

import numpy as np

from .config import DEFAULTS, ConfigError, RunConfig
from .data import DataError, export_folder, generate_synthetic, load_folder, read_pnm

EXIT_CONFIG, EXIT_DATA, EXIT_RUNTIME = 2, 3, 4
ANALYSES = ("influence", "ablate-f", "ablate-w", "bins", "heatmap", "overlap")
ABLATION_FLAGS = {"no_split": "alpha1", "no_er": "alpha2", "no_rot": "rotation_weight",
                  "no_sparse": "sparseness_weight"}

log = logging.getLogger("cfsl")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        sys.exit(EXIT_CONFIG)


def _add_config_flags(p, skip=()):
    g = p.add_argument_group("config overrides")
    for key in sorted(DEFAULTS):
        if key in skip:
            continue
        names = [f"--{key}"]
        if "_" in key:
            names.append(f"--{key.replace('_', '-')}")
        g.add_argument(*names, dest=f"cfg_{key}", default=None, metavar="V")


def build_parser():
    ap = _Parser(prog="cfsl", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", help="generate the synthetic dataset folder")
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    _add_config_flags(p)

    p = sub.add_parser("train", help="train on known classes")
    p.add_argument("--config")
    p.add_argument("--data", required=True)
    p.add_argument("--run-dir", required=True)
    for flag in ABLATION_FLAGS:
        p.add_argument(f"--{flag.replace('_', '-')}", dest=flag, action="store_true")
    _add_config_flags(p)

    p = sub.add_parser("eval", help="episodic K-way N-shot evaluation on novel classes")
    p.add_argument("--config")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", dest="cfg_eval_seed", default=None, metavar="V",
                   help="episode seed (same as --eval_seed)")
    _add_config_flags(p, skip=("seed",))

    p = sub.add_parser("analyze", help="channel-level diagnostics")
    p.add_argument("--config")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--which", required=True, choices=ANALYSES)
    p.add_argument("--out", required=True)
    p.add_argument("--image", help="P2/P3 image for heatmap (default: novel image_index)")
    _add_config_flags(p)
    return ap


def resolve_config(args) -> RunConfig:
    cfg = RunConfig.from_file(args.config) if getattr(args, "config", None) else RunConfig()
    for key in DEFAULTS:
        v = getattr(args, f"cfg_{key}", None)
        if v is not None:
            cfg.set(key, v)
    for flag, key in ABLATION_FLAGS.items():
        if getattr(args, flag, False):
            cfg.set(key, 0.0)
    return cfg


def _sha256(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _load_model(path):
    from .model import load_checkpoint

    try:
        return load_checkpoint(path)
    except FileNotFoundError:
        raise DataError(f"{path}: checkpoint not found") from None


def _write_kv(path, items):
    with open(path, "w") as fh:
        for k, v in items.items():
            fh.write(f"{k}={v!r}\n" if isinstance(v, float) else f"{k}={v}\n")


def cmd_gen_data(args, cfg):
    spec = cfg.synth_spec()
    try:
        spec.validate()
    except DataError as exc:
        raise ConfigError(str(exc)) from None
    splits = generate_synthetic(spec)
    out = Path(args.out)
    export_folder(splits, out)
    cfg.dump(out / "config.txt")
    print(f"wrote {sum(len(d) for d in splits)} images to {out}")


def cmd_train(args, cfg):
    from .trainer import train

    tcfg = cfg.train_config()
    data = load_folder(args.data)
    run = Path(args.run_dir)
    run.mkdir(parents=True, exist_ok=True)
    cfg.dump(run / "config.txt")
    res = train(data.known_train, tcfg, run_dir=run)
    final = res.checkpoints[-1]
    _write_kv(run / "run.txt", {"final_checkpoint": final.name, "sha256": _sha256(final),
                                "epochs": tcfg.epochs})
    print(f"final checkpoint {final}")


def cmd_eval(args, cfg):
    from .episodic import evaluate

    model = _load_model(args.checkpoint)
    data = load_folder(args.data)
    rep = evaluate(data.novel, model, cfg["K"], cfg["N"], cfg["Q"], cfg["n_episodes"],
                   cfg["eval_seed"])
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "eval.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["episode", "accuracy"])
        for i, a in enumerate(rep.per_episode_accuracies):
            w.writerow([i, repr(float(a))])
        w.writerow(["mean", repr(rep.mean_accuracy)])
    _write_kv(out / "summary.txt", {**rep.summary(), "seed": cfg["eval_seed"],
                                    "checkpoint_sha256": _sha256(args.checkpoint)})
    cfg.dump(out / "config.txt")
    print(f"{cfg['K']}-way {cfg['N']}-shot: {100 * rep.mean_accuracy:.2f} +- {100 * rep.ci95:.2f}")


def cmd_analyze(args, cfg):
    from . import analysis as A
    from .model import extract_features

    model = _load_model(args.checkpoint)
    data = load_folder(args.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    which = args.which
    d = model.feature_dim

    if which == "influence":
        feats = extract_features(model, data.novel.images)
        prof = A.influence_profile(feats, data.novel.labels, cfg["n_samples"], cfg["eval_seed"])
        with open(out / "influence.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["channel", "mean_influence"])
            for j, v in enumerate(prof):
                w.writerow([j, repr(float(v))])
    elif which == "ablate-f":
        ks = [k for k in cfg["ablation_ks"] if k <= d]
        curve = A.topk_feature_ablation(model, data.novel, ks, cfg["K"], cfg["N"], cfg["Q"],
                                        cfg["n_episodes"], cfg["eval_seed"])
        A.write_curve_csv(out / "ablate_f.csv", curve)
    elif which == "ablate-w":
        ks = [k for k in cfg["ablation_ks"] if k <= d]
        known = data.known_heldout if len(data.known_heldout) else data.known_train
        A.write_curve_csv(out / "ablate_w.csv", A.topk_weight_ablation(model, known, ks))
    elif which == "bins":
        imgs = np.concatenate([data.known_train.images, data.known_heldout.images])
        labels = np.concatenate([data.known_train.labels, data.known_heldout.labels])
        imgs, labels = A.select_samples(imgs, labels, cfg["n_samples"], cfg["eval_seed"])
        A.write_bins_csv(out / "bins.csv", A.weight_activation_bins(model, imgs, labels, cfg["n_bins"]))
    elif which == "heatmap":
        if args.image:
            x = read_pnm(args.image)
            stem = Path(args.image).stem
        else:
            if len(data.novel) == 0:
                raise DataError("novel split is empty")
            x = data.novel.images[cfg["image_index"]]
            stem = f"novel_{cfg['image_index']:04d}"
        ch = cfg["channel"]
        grid = A.heatmap(model, x, None if ch < 0 else ch)
        suffix = "" if ch < 0 else f"_ch{ch:03d}"
        A.write_heatmap(out / f"heatmap_{stem}{suffix}", grid, x.shape[:2])
    elif which == "overlap":
        if len(data.novel) == 0:
            raise DataError("novel split is empty")
        f = extract_features(model, data.novel.images[cfg["image_index"]][None])[0]
        W = model.effective_W().data
        with open(out / "overlap.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["known_class", "channels"])
            for i in range(model.n_classes):
                chans = A.primitive_overlap(W, f, i, cfg["k_f"], cfg["k_w"])
                w.writerow([i, " ".join(str(c) for c in chans)])
    _write_kv(out / f"analysis_{which}.txt", {"which": which,
                                               "checkpoint_sha256": _sha256(args.checkpoint)})
    print(f"{which}: wrote outputs to {out}")


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "eval": cmd_eval, "analyze": cmd_analyze}


def main(argv=None):
    from .model import CheckpointError

    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(message)s")
    try:
        cfg = resolve_config(args)
        COMMANDS[args.command](args, cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, CheckpointError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except Exception as exc:  # noqa: BLE001 - top-level boundary
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return 0


if __name__ == "__main__":
    sys.exit(main())
