"""advmix command-line front end.

    advmix <cmd> --config <path> [--out <dir>] [--seed <n>]
    advmix reproduce <preset> [--out <dir>] [--seed <n>] [--scale full|smoke]

Exit codes: 0 success, 2 config error, 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import logging
import sys

from . import config as C
from . import experiments as X
from .attacks import AttackError
from .data import DataFormatError
from .inversion import InversionError
from .training import TrainingError

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4

log = logging.getLogger("advmix")


def _ctx(args) -> X.Context:
    return X.make_context(C.load(args.config), args.out, args.seed)


def cmd_build_data(args):
    ctx = _ctx(args)
    tr, te = X.build_data(ctx)
    print(f"wrote {len(tr.labels)} training and {len(te.labels)} test examples under {ctx.out / 'data'}")


def cmd_train_decoder(args):
    ctx = _ctx(args)
    dec = X.train_decoder(ctx)
    if ctx.cfg["decoder"]["kind"] == "learned":
        print(f"decoder: recon RMSE {dec.recon_rmse:.4f} (max per image {dec.recon_tol:.4f}), "
              f"{len(dec.color_table)} colors in table -> {ctx.out / 'decoder.advmixd'}")
    else:
        print(f"{ctx.cfg['decoder']['kind']} decoder is fixed; nothing to train")


def cmd_encode(args):
    ctx = _ctx(args)
    z_par, _ = X.encode(ctx)
    extra = "".join(f", {k} {v:.4f}" for k, v in sorted(ctx.cache["encode_summary"].items()))
    print(f"encoded {len(z_par)} images{extra} -> {ctx.out / 'latents_train.advmixl'}")


def cmd_train(args):
    ctx = _ctx(args)
    regime = args.regime or ctx.cfg["regime"]["regime"]
    _, tlog = X.train_model(ctx, regime)
    acc = tlog.values("clean_accuracy")
    print(f"{regime}: final train accuracy {acc[-1]:.4f} -> {ctx.out / f'model_{regime}.advmixc'}")


def cmd_eval(args):
    ctx = _ctx(args)
    regime = args.regime or ctx.cfg["regime"]["regime"]
    rep = X.evaluate_model(ctx, regime)
    for metric, value in rep.rows():
        if not metric.startswith(("clean_accuracy_class", "env_risk_")) or metric in ("env_risk_max",):
            print(f"{metric:>28s}  {value:.4f}")
    print(f"report -> {ctx.out / f'report_{regime}.csv'}")


def cmd_reproduce(args):
    path = X.reproduce(args.preset, args.out or f"out/{args.preset}", args.seed or 0, args.scale)
    print(f"comparison -> {path}")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="advmix", description="Adversarial latent mixing experiments")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="cmd", required=True)
    for name, fn, helptext in (
        ("build-data", cmd_build_data, "ingest IDX, colorize, cache"),
        ("train-decoder", cmd_train_decoder, "fit the learned decoder"),
        ("encode", cmd_encode, "invert the training set into content latents"),
        ("train", cmd_train, "train one regime, write checkpoint and log"),
        ("eval", cmd_eval, "write the evaluation report and adversarial image grid"),
    ):
        sp = sub.add_parser(name, help=helptext)
        sp.add_argument("--config", required=True)
        sp.add_argument("--out", default=None)
        sp.add_argument("--seed", type=int, default=None)
        if name in ("train", "eval"):
            sp.add_argument("--regime", choices=X.REGIME_ORDER, default=None,
                            help="override regime.regime from the config")
        sp.set_defaults(fn=fn)
    sp = sub.add_parser("reproduce", help="run a preset end to end")
    sp.add_argument("preset", choices=X.PRESETS)
    sp.add_argument("--out", default=None)
    sp.add_argument("--seed", type=int, default=None)
    sp.add_argument("--scale", choices=("full", "smoke"), default="full")
    sp.set_defaults(fn=cmd_reproduce)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.seed is not None and args.seed < 0:
        print("config error: --seed must be non-negative", file=sys.stderr)
        return EXIT_CONFIG
    try:
        args.fn(args)
    except C.ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (X.DataError, DataFormatError, FileNotFoundError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except (AttackError, TrainingError, InversionError, FloatingPointError) as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
