"""Command line entry point: ``bsl <subcommand> ...``.

Exit status is 0 on success, 2 on configuration/usage errors and 1 on
runtime failures.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .datasets import (ArrayDataset, Manifest, load_image, make_real_pool, parse_degradation,
                       synth_forgery)
from .evaluation import ablation_grid, restoration_histogram, robustness_sweep, write_reports
from .models import ConfigurationError
from .shuffle import ShuffleConfig, image_stream, shuffle_image
from .training import (RunConfig, Trainer, apply_overrides, config_from_dict, config_to_dict,
                       read_checkpoint_config, run_id)

log = logging.getLogger("bsl")

DEFAULT_DEGRADATIONS = ["resize:160", "resize:112", "resize:80", "resize:56",
                      "blur:3", "blur:5", "blur:7", "blur:9"]


def _merge(base, update, path=""):
    for k, v in update.items():
        if k not in base:
            raise ConfigurationError(f"unknown config key {path + k!r}")
        if isinstance(base[k], dict) and isinstance(v, dict):
            _merge(base[k], v, f"{path}{k}.")
        else:
            base[k] = v
    return base


def load_config(path=None, overrides=()):
    d = config_to_dict(RunConfig())
    if path:
        with open(path) as fh:
            _merge(d, json.load(fh))
    return config_from_dict(apply_overrides(d, overrides))


def _run_root():
    return Path(os.environ.get("BSL_RUN_DIR", "runs"))


def _dataset(manifest_path, split, side):
    m = Manifest.read_csv(manifest_path).validate()
    ds = ArrayDataset.from_manifest(m, split, side)
    return ds if len(ds) else None


def _resolve_checkpoint(name, run_dir):
    if name in ("best", "last"):
        base = Path(run_dir) if run_dir else _run_root()
        path = base / f"{name}.ckpt"
        if name == "best" and not path.exists():
            path = base / "last.ckpt"
        return path
    return Path(name)


def _load_trained(args):
    ckpt = _resolve_checkpoint(args.checkpoint, args.run_dir)
    if not ckpt.exists():
        raise ConfigurationError(f"checkpoint not found: {ckpt}")
    cfg = read_checkpoint_config(ckpt)
    data = _dataset(args.data, args.split, cfg.input_side)
    if data is None:
        raise ConfigurationError(f"split {args.split!r} of {args.data} is empty")
    trainer = Trainer(cfg, data)
    trainer.load_state(ckpt)
    return trainer, data, ckpt.parent


def cmd_synth_data(args):
    if args.real_dir:
        pool = sorted(p for p in Path(args.real_dir).iterdir()
                      if p.suffix.lower() in (".png", ".jpg", ".jpeg"))
        pool = np.stack([load_image(p, args.side) for p in pool])
    else:
        pool = make_real_pool(args.pool_size, args.side, seed=args.seed)
    count = len(pool) if args.count is None else args.count
    m = synth_forgery(pool, count, seed=args.seed + 1, out_dir=args.out,
                      split_fracs=tuple(args.splits))
    print(f"wrote {len(m)} images and manifest to {Path(args.out) / 'manifest.csv'}")


def cmd_train(args):
    if args.resume:
        # a resumed run keeps its checkpointed config; only --set applies
        base = config_to_dict(read_checkpoint_config(args.resume))
        cfg = config_from_dict(apply_overrides(base, args.set))
    else:
        cfg = load_config(args.config, args.set)
    run_dir = Path(args.run_dir) if args.run_dir else None
    train = _dataset(args.data, "train", cfg.input_side)
    if train is None:
        raise ConfigurationError("training split is empty")
    val = _dataset(args.data, "val", cfg.input_side) or _dataset(args.data, "test", cfg.input_side)
    if args.resume:
        trainer = Trainer(cfg, train, val, run_dir or Path(args.resume).parent)
        trainer.load_state(args.resume)
    else:
        trainer = Trainer(cfg, train, val, run_dir or _run_root() / run_id(cfg))
    trainer.train()
    last = trainer.history[-1]
    print(json.dumps({"run_dir": str(trainer.run_dir), **last}))


def _emit(reports, out_stem, plot):
    write_reports(reports, out_stem)
    for r in reports:
        print(json.dumps(r.row()))
    if plot:
        _plot_sweep(reports, Path(out_stem).with_suffix(".png"))


def cmd_eval(args):
    trainer, data, root = _load_trained(args)
    reports = robustness_sweep(trainer.model, data, [parse_degradation(d) for d in args.degrade])
    if args.degrade:
        reports = reports[1:]
    out = Path(args.out) if args.out else root / "eval_report"
    _emit(reports, out, args.plot)
    if args.restoration:
        cfg = trainer.config.shuffle
        hist = restoration_histogram(trainer.model, data.images, cfg, seed=trainer.config.seed)
        with open(out.with_name(out.name + "_restoration.json"), "w") as fh:
            json.dump(hist.to_dict(), fh, indent=2)
        print(json.dumps({"restoration": hist.to_dict()}))
        if args.plot:
            _plot_histogram(hist, out.with_name(out.name + "_restoration.png"))


def cmd_sweep(args):
    trainer, data, root = _load_trained(args)
    degs = args.degrade or DEFAULT_DEGRADATIONS
    reports = robustness_sweep(trainer.model, data, [parse_degradation(d) for d in degs])
    _emit(reports, Path(args.out) if args.out else root / "sweep", args.plot)


def cmd_ablate(args):
    cfg = load_config(args.config, args.set)
    train = _dataset(args.data, "train", cfg.input_side)
    test = _dataset(args.data, "test", cfg.input_side)
    if train is None or test is None:
        raise ConfigurationError("ablation needs non-empty train and test splits")
    run_dir = Path(args.run_dir) if args.run_dir else _run_root() / "ablation"
    table = ablation_grid(cfg, train, test, [parse_degradation(d) for d in args.degrade], run_dir)
    for row in table:
        print(json.dumps(row))


def cmd_inspect_shuffle(args):
    from PIL import Image

    img = load_image(args.image, args.side) if args.side else _load_native(args.image)
    cfg = ShuffleConfig(args.s_intra, args.s_inter, tuple(args.q_range), args.p_inter)
    inter_only = shuffle_image(img, ShuffleConfig(args.s_intra, args.s_inter, (0, 0), args.p_inter),
                               image_stream(args.seed, 0))
    out = shuffle_image(img, cfg, image_stream(args.seed, 0))
    od = Path(args.out)
    od.mkdir(parents=True, exist_ok=True)

    def u8(a):
        return np.rint(a * 255).astype(np.uint8)

    Image.fromarray(u8(out.image)).save(od / "shuffled.png")
    gap = np.ones((img.shape[0], 4, 3), np.float32)
    Image.fromarray(u8(np.concatenate([img, gap, inter_only.image, gap, out.image], 1))).save(
        od / "panel.png")
    with open(od / "targets.json", "w") as fh:
        json.dump({"P": out.mark.tolist(), "beta": out.coords.beta.tolist(),
                   "M": np.round(out.coords.M.astype(float), 6).tolist(),
                   "inter_applied": out.inter_applied}, fh, indent=1)
    print(f"wrote shuffled.png, panel.png, targets.json to {od}")


def _load_native(path):
    from PIL import Image
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0


def _pyplot(path):
    try:
        import matplotlib
        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
    except ImportError:
        log.warning("matplotlib not installed; skipping %s", path)
        return None
    return plt


def _plot_histogram(hist, path):
    plt = _pyplot(path)
    if plt is None:
        return
    fig, ax = plt.subplots(figsize=(4, 3))
    ax.bar(range(len(hist.counts)), hist.fractions)
    ax.set_xlabel("Chebyshev distance")
    ax.set_ylabel("fraction of tiles")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def _plot_sweep(reports, path):
    plt = _pyplot(path)
    if plt is None:
        return
    fig, ax = plt.subplots(figsize=(5, 3))
    ax.plot([r.tag for r in reports], [r.auc for r in reports], "o-", label="AUC")
    ax.plot([r.tag for r in reports], [r.acc for r in reports], "s--", label="ACC")
    ax.set_ylim(0, 1.02)
    ax.legend()
    fig.autofmt_xdate()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(2, f"{self.prog}: error: {message}\n")


def build_parser():
    p = _Parser(prog="bsl", description="Block shuffling learning for forgery detection.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth-data", help="generate a synthetic spliced-forgery dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--real-dir", help="folder of real images (default: procedural faces)")
    s.add_argument("--pool-size", type=int, default=1250)
    s.add_argument("--count", type=int, help="number of fakes (default: pool size)")
    s.add_argument("--side", type=int, default=64)
    s.add_argument("--splits", type=float, nargs=3, default=(0.8, 0.0, 0.2),
                   metavar=("TRAIN", "VAL", "TEST"))
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_synth_data)

    def common_config(sp):
        sp.add_argument("--config", help="JSON run config")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="dotted-path override, e.g. weights.alpha=0")
        sp.add_argument("--data", required=True, help="manifest CSV")
        sp.add_argument("--run-dir")

    t = sub.add_parser("train", help="train a model")
    common_config(t)
    t.add_argument("--resume", help="checkpoint to continue from (its config is reused)")
    t.set_defaults(func=cmd_train)

    for name, fn, hlp in (("eval", cmd_eval, "evaluate a checkpoint"),
                          ("sweep", cmd_sweep, "robustness sweep of a checkpoint")):
        e = sub.add_parser(name, help=hlp)
        e.add_argument("--checkpoint", required=True, help="path, or 'best'/'last' in --run-dir")
        e.add_argument("--data", required=True)
        e.add_argument("--split", default="test")
        e.add_argument("--run-dir")
        e.add_argument("--degrade", action="append", default=[], metavar="KIND:PARAM")
        e.add_argument("--out", help="report path stem")
        e.add_argument("--plot", action="store_true")
        if name == "eval":
            e.add_argument("--restoration", action="store_true",
                           help="also write the restoration-distance histogram")
        e.set_defaults(func=fn)

    a = sub.add_parser("ablate", help="run the five module-toggle configurations")
    common_config(a)
    a.add_argument("--degrade", action="append", default=[], metavar="KIND:PARAM")
    a.set_defaults(func=cmd_ablate)

    i = sub.add_parser("inspect-shuffle", help="dump a shuffled image and its targets")
    i.add_argument("image")
    i.add_argument("--seed", type=int, default=0)
    i.add_argument("--out", default="inspect")
    i.add_argument("--side", type=int, help="resize to this square side first")
    i.add_argument("--s-intra", type=int, default=16)
    i.add_argument("--s-inter", type=int, default=32)
    i.add_argument("--q-range", type=float, nargs=2, default=(0.4, 0.6))
    i.add_argument("--p-inter", type=float, default=1.0)
    i.set_defaults(func=cmd_inspect_shuffle)
    return p


def run(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except (ConfigurationError, ValueError, FileNotFoundError) as exc:
        print(f"bsl: configuration error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001
        log.debug("failure", exc_info=True)
        print(f"bsl: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
