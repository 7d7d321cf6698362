"""Command line entry point: ``echodiff phantom|train|translate|evaluate``.

Exit codes: 0 ok, 1 usage or config error, 2 data error, 3 numeric abort.
"""

from __future__ import annotations

import argparse
import logging
import re
import shutil
import sys
from pathlib import Path
from typing import Optional, Sequence

from .config import ConfigError, RunConfig, load_config
from .data import STYLES, generate_phantoms, load_dataset, resize_dataset, write_dataset
from .metrics import evaluate_translation
from .models import load_checkpoint
from .training import CHECKPOINT_NAME, train
from .translate import translate_dataset

log = logging.getLogger("echodiff")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
FAILED_MARKER = "FAILED"
CONFIG_ECHO = "config.txt"
REPORT_CSV = "report.csv"
REPORT_JSON = "report.json"

_DEFAULTS = RunConfig()


class UsageError(Exception):
    pass


def _config_epilog() -> str:
    lines = ["config keys (file 'key = value' or --set key=value) and defaults:"]
    lines += [f"  {k} = {v}" for k, v in _DEFAULTS.as_dict().items()]
    return "\n".join(lines)


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, default=None,
                   help="flat key = value config file; missing keys take the defaults below "
                        "(default: %(default)s)")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="override one config key; repeatable (default: none)")


def _add_out_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--out", type=Path, required=True, help="output directory (required)")
    p.add_argument("--force", action="store_true",
                   help="write into a non-empty output directory (default: %(default)s)")


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.RawDescriptionHelpFormatter
    parser = argparse.ArgumentParser(prog="echodiff", description=__doc__, formatter_class=fmt)
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("phantom", help="write a synthetic phantom dataset", formatter_class=fmt)
    _add_out_flags(p)
    p.add_argument("--n", type=int, default=100, help="number of samples (default: %(default)s)")
    p.add_argument("--style", default="a",
                   help=f"phantom style, one of {', '.join(sorted(STYLES))} (default: %(default)s)")
    p.add_argument("--seed", type=int, default=_DEFAULTS.seed, help="seed (default: %(default)s)")
    p.add_argument("--side", type=int, default=_DEFAULTS.side,
                   help="image side in pixels (default: %(default)s)")

    p = sub.add_parser("train", help="train generator and discriminator", formatter_class=fmt,
                       epilog=_config_epilog())
    _add_config_flags(p)
    p.add_argument("--data", type=Path, required=True, help="dataset directory (required)")
    _add_out_flags(p)

    p = sub.add_parser("translate", help="re-synthesize a dataset with a trained checkpoint",
                       formatter_class=fmt, epilog=_config_epilog())
    p.add_argument("--checkpoint", type=Path, required=True,
                   help="checkpoint file or training output directory (required)")
    p.add_argument("--data", type=Path, required=True, help="source dataset directory (required)")
    _add_out_flags(p)
    p.add_argument("--seed", type=int, default=_DEFAULTS.seed,
                   help="sampling seed (default: %(default)s)")
    _add_config_flags(p)
    p.add_argument("--allow-mismatch", action="store_true",
                   help="accept a checkpoint whose config fingerprint differs from --config "
                        "(default: %(default)s)")

    p = sub.add_parser("evaluate", help="pixel metrics and Frechet distance report",
                       formatter_class=fmt, epilog=_config_epilog())
    p.add_argument("--generated", type=Path, required=True,
                   help="generated dataset directory (required)")
    p.add_argument("--reference", type=Path, required=True,
                   help="target-domain reference dataset directory (required)")
    p.add_argument("--ground-truth", type=Path, default=None,
                   help="paired ground-truth dataset for MSE/PSNR/SSIM rows (default: %(default)s)")
    p.add_argument("--source", type=Path, default=None,
                   help="pre-translation dataset for the before/after FID pair "
                        "(default: %(default)s)")
    _add_out_flags(p)
    _add_config_flags(p)
    return parser


def _prepare_out(out: Path, force: bool) -> None:
    if out.exists() and not out.is_dir():
        raise UsageError(f"output path {out} exists and is not a directory")
    if out.is_dir() and any(out.iterdir()):
        if not force:
            raise UsageError(f"output directory {out} is not empty (use --force to overwrite)")
        for name in ("images", "masks"):
            shutil.rmtree(out / name, ignore_errors=True)
        (out / FAILED_MARKER).unlink(missing_ok=True)
    out.mkdir(parents=True, exist_ok=True)


def _echo_config(cfg: RunConfig, out: Path) -> None:
    text = cfg.dump()
    (out / CONFIG_ECHO).write_text(text)
    print(f"# resolved config (fingerprint {cfg.fingerprint()})")
    print(text, end="")


def cmd_phantom(args) -> None:
    if args.style not in STYLES:
        raise UsageError(f"unknown style {args.style!r}; valid styles: {', '.join(sorted(STYLES))}")
    if args.n < 1:
        raise UsageError(f"--n must be >= 1, got {args.n}")
    if args.side < 16:
        raise UsageError(f"--side must be >= 16, got {args.side}")
    _prepare_out(args.out, args.force)
    ds = generate_phantoms(args.n, args.side, args.style, args.seed)
    print(write_dataset(ds, args.out))


def cmd_train(args) -> None:
    cfg = load_config(args.config, args.overrides)
    ds = load_dataset(args.data)
    _prepare_out(args.out, args.force)
    _echo_config(cfg, args.out)
    if ds.samples[0].image.shape != (cfg.side, cfg.side):
        ds = resize_dataset(ds, cfg.side)
    ckpt = train(ds, cfg, args.out, on_record=lambda line: log.info("%s", line))
    print(args.out / CHECKPOINT_NAME)
    if ckpt.extra.get("val_g_rec"):
        print(f"final val_g_rec={ckpt.extra['val_g_rec'][-1]!r}")


def _checkpoint_path(p: Path) -> Path:
    return p / CHECKPOINT_NAME if p.is_dir() else p


def cmd_translate(args) -> None:
    session = None
    if args.config is not None or args.overrides:
        session = load_config(args.config, args.overrides).fingerprint()
    ckpt = load_checkpoint(_checkpoint_path(args.checkpoint), session_fingerprint=session,
                           allow_mismatch=args.allow_mismatch)
    ds = load_dataset(args.data)
    _prepare_out(args.out, args.force)
    _echo_config(ckpt.cfg, args.out)
    out_ds, calls = translate_dataset(ckpt, ds, seed=args.seed)
    log.info("generator calls per sample: %s", sorted(set(calls)))
    print(write_dataset(out_ds, args.out))


_FP_RE = re.compile(r"fingerprint=([0-9a-f]+)")


def cmd_evaluate(args) -> None:
    cfg = load_config(args.config, args.overrides)
    generated = load_dataset(args.generated)
    reference = load_dataset(args.reference)
    gt = load_dataset(args.ground_truth) if args.ground_truth else None
    source = load_dataset(args.source) if args.source else None
    _prepare_out(args.out, args.force)
    meta = {"config_fingerprint": cfg.fingerprint()}
    found = _FP_RE.search(generated.provenance or "")
    if found:
        meta["checkpoint_fingerprint"] = found.group(1)
    report = evaluate_translation(generated, reference, gt, source,
                                  extractor=cfg.feature_extractor, metadata=meta)
    (args.out / REPORT_CSV).write_text(report.to_csv())
    (args.out / REPORT_JSON).write_text(report.to_json())
    for label, value in report.fid.items():
        print(f"fid {label} {value!r}")
    agg = report.aggregate()
    for key in ("mse", "psnr_db", "ssim"):
        if agg[key] is not None:
            print(f"{key} {agg[key][0]!r} +- {agg[key][1]!r}")
    print(args.out / REPORT_CSV)


COMMANDS = {"phantom": cmd_phantom, "train": cmd_train,
            "translate": cmd_translate, "evaluate": cmd_evaluate}


def _exit_code(exc: BaseException) -> int:
    if isinstance(exc, (UsageError, ConfigError)):
        return EXIT_USAGE
    if isinstance(exc, FloatingPointError):
        return EXIT_NUMERIC
    # data, checkpoint, metric and I/O failures; anything unexpected lands here too
    return EXIT_DATA


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse uses 2 for bad usage; keep 2 for data errors
        return EXIT_OK if not exc.code else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(message)s", stream=sys.stderr)
    try:
        COMMANDS[args.command](args)
    except Exception as exc:  # every failure maps to an exit code and a marker
        code = _exit_code(exc)
        print(f"echodiff {args.command}: error: {exc}", file=sys.stderr)
        out = getattr(args, "out", None)
        if out is not None and out.is_dir() and not isinstance(exc, UsageError):
            (out / FAILED_MARKER).write_text(f"{type(exc).__name__}: {exc}\n")
        return code
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
