#!/usr/bin/env python3
"""
Command-line entry point for the Poisson free-energy toolkit.

Subcommands: preprocess, synth, train, eval, sweep, report, check.

Exit codes: 0 success, 1 usage or configuration error, 2 data/IO error,
3 numerical failure (non-finite loss, failed checks), 4 empty report.
"""

import argparse
import json
import logging
import os
import sys
from dataclasses import replace
from typing import Any, Dict, List, Optional

import numpy as np

import config
import model as vae
from checks import run_all_checks
from data import (
    PatchBatch,
    extract_patches,
    load_patches,
    load_pgm_directory,
    save_patches,
    split_validation,
    synth_patches,
)
from logger_config import setup_logger
from metrics import evaluate
from preprocessing import PreprocConfig, preprocess_frozen, preprocess_pipeline
from sweep import SweepConfig, default_valid_path, report, run_grid
from trainer import NonFiniteLossError, TrainConfig, train
from visualization import plot_dictionary, plot_training_curve

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERICAL = 3
EXIT_EMPTY_REPORT = 4

# Stream of default_rng([seed, INIT_STREAM]) used to initialize a model
INIT_STREAM = 0


class UsageError(Exception):
    """Bad command line or configuration."""


class CliParser(argparse.ArgumentParser):
    """ArgumentParser that raises instead of exiting, so exit codes stay ours."""

    def error(self, message):
        raise UsageError(message)


def build_parser() -> CliParser:
    common = CliParser(add_help=False)
    common.add_argument("--model", choices=config.MODEL_FAMILIES, default=None, help="Model family")
    common.add_argument("--k", type=int, default=None, help="Number of latents")
    common.add_argument("--beta", type=float, default=None, help="KL weight")
    common.add_argument("--epochs", type=int, default=None, help="Cosine-annealed epochs (warmup is added)")
    common.add_argument("--lr", type=float, default=None, help="Peak learning rate")
    common.add_argument("--batch", type=int, default=None, help="Minibatch size")
    common.add_argument("--seed", type=int, default=None, help="Random seed")
    common.add_argument("--data", default=None, help="Patch file (or PGM directory for preprocess)")
    common.add_argument("--out", default=None, help="Output file or directory")
    common.add_argument("--side", type=int, default=None, help="Patch side length")
    common.add_argument("--n-patches", dest="n_patches", type=int, default=None, help="Number of patches")
    common.add_argument("--alpha", type=float, default=None, help="Spectral exponent of synthetic patches")
    common.add_argument("--field-scale", dest="field_scale", type=int, default=None,
                        help="Synthetic field side as a multiple of the patch side")
    common.add_argument("--valid-fraction", dest="valid_fraction", type=float, default=None,
                        help="Fraction held out as validation (0 disables the split)")
    common.add_argument("--raw", action="store_true", default=None, help="Skip preprocessing")
    common.add_argument("--checkpoint", default=None, help="Checkpoint to evaluate")
    common.add_argument("--n-samples", dest="n_samples", type=int, default=None,
                        help="Posterior draws per validation patch")
    common.add_argument("--workers", type=int, default=None, help="Sweep worker processes (0 = auto)")
    common.add_argument("--results", default=None, help="Results CSV for report")
    common.add_argument("--render", action="store_true", default=None, help="Render report plots to PNG")
    common.add_argument("--quick", action="store_true", default=None, help="Reduced-size check suites")
    common.add_argument("--preset", choices=sorted(config.PRESETS), default=None, help="Configuration preset")
    common.add_argument("--config", default=None, help="INI configuration file")
    common.add_argument("--verbose", action="store_true", default=None, help="Per-epoch progress lines")
    common.add_argument("--print-config", dest="print_config", action="store_true",
                        help="Print the resolved configuration and exit")

    parser = CliParser(description="Poisson and rectified-Gaussian VAEs with closed-form free energy")
    subparsers = parser.add_subparsers(dest="command", metavar="command")
    subparsers.required = True
    helps = {
        "preprocess": "Extract and preprocess patches from PGM images or a raw patch file",
        "synth": "Generate synthetic 1/f^alpha patches",
        "train": "Train one model",
        "eval": "Evaluate a checkpoint on validation patches",
        "sweep": "Train and evaluate a (family, K, beta, seed) grid",
        "report": "Summary tables and plot script from sweep results",
        "check": "Run the oracle and property suites",
    }
    for name, text in helps.items():
        subparsers.add_parser(name, parents=[common], help=text, description=text)
    return parser


def _flags(args: argparse.Namespace) -> Dict[str, Any]:
    return {name: getattr(args, name, None) for name in config.FLAG_KEYS}


def _preproc_config(resolved: Dict[str, Dict]) -> PreprocConfig:
    data = resolved["data"]
    return PreprocConfig(
        f0=data["f0"], n_exp=data["n_exp"], lcn_kernel=data["lcn_kernel"], lcn_sigma=data["lcn_sigma"]
    )


def _require(value: str, flag: str) -> str:
    if not value:
        raise UsageError(f"{flag} is required")
    return value


def _save_processed(raw: PatchBatch, out_path: str, resolved: Dict[str, Dict], logger) -> List[str]:
    """Preprocess (unless raw) and write the training file plus an optional validation file."""
    data = resolved["data"]
    parent = os.path.dirname(os.path.abspath(out_path))
    os.makedirs(parent, exist_ok=True)

    fraction = data["valid_fraction"]
    if fraction > 0:
        train_raw, valid_raw = split_validation(raw, fraction, resolved["train"]["seed"])
    else:
        train_raw, valid_raw = raw, None

    if data["raw"]:
        train_out, valid_out = train_raw, valid_raw
    else:
        cfg = _preproc_config(resolved)
        train_out, stats = preprocess_pipeline(train_raw, cfg)
        valid_out = preprocess_frozen(valid_raw, stats, cfg) if valid_raw is not None else None

    save_patches(train_out, out_path)
    written = [out_path]
    if valid_out is not None:
        valid_path = default_valid_path(out_path)
        save_patches(valid_out, valid_path)
        written.append(valid_path)
    for path in written:
        logger.info(f"Patches saved to {path}")
    return written


def cmd_preprocess(args, resolved, logger) -> int:
    source = _require(resolved["data"]["path"], "--data")
    out_path = _require(args.out, "--out")
    data = resolved["data"]
    if os.path.isdir(source):
        images = load_pgm_directory(source)
        raw = extract_patches(images, data["side"], data["n_patches"], resolved["train"]["seed"])
    else:
        raw = load_patches(source)
    logger.info(f"Preprocessing {len(raw)} patches of side {raw.side}")
    _save_processed(raw, out_path, resolved, logger)
    return EXIT_OK


def cmd_synth(args, resolved, logger) -> int:
    out_path = _require(args.out, "--out")
    data = resolved["data"]
    raw = synth_patches(
        data["n_patches"], side=data["side"], alpha=data["alpha"],
        seed=resolved["train"]["seed"], field_scale=data["field_scale"],
    )
    logger.info(f"Generated {len(raw)} synthetic patches (alpha={data['alpha']})")
    _save_processed(raw, out_path, resolved, logger)
    return EXIT_OK


def cmd_train(args, resolved, logger) -> int:
    data_path = _require(resolved["data"]["path"], "--data")
    out_dir = resolved["output"]["out"]
    verbose = resolved["output"]["verbose"]
    patches = load_patches(data_path)
    train_cfg = TrainConfig.from_resolved(resolved)

    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "config.ini"), "w") as f:
        f.write(config.format_config(resolved))

    rng = np.random.default_rng([train_cfg.seed, INIT_STREAM])
    params = vae.init_model(resolved["model"]["family"], resolved["model"]["k"], patches.n_pixels, rng)
    params, log = train(params, patches, train_cfg, out_dir=out_dir, verbose=verbose)

    epochs = [r.epoch for r in log.records]
    plot_training_curve(epochs, log.totals, [r.kl for r in log.records], os.path.join(out_dir, "train_curve.png"))
    plot_dictionary(params.dictionary, patches.side, os.path.join(out_dir, "dictionary.png"))

    last = log.records[-1]
    print(f"final total={last.total:.6g} recon_mean={last.recon_mean:.6g} "
          f"recon_var={last.recon_var:.6g} kl={last.kl:.6g}")
    logger.info(f"Training outputs saved to {out_dir}")
    return EXIT_OK


def cmd_eval(args, resolved, logger) -> int:
    checkpoint = _require(resolved["eval"]["checkpoint"], "--checkpoint")
    data_path = _require(resolved["data"]["path"], "--data")
    params = vae.load_checkpoint(checkpoint)
    validation = load_patches(data_path)
    beta = args.beta if args.beta is not None else float("nan")
    record = evaluate(
        params,
        validation,
        seed=resolved["train"]["seed"],
        n_samples_per_datum=resolved["eval"]["n_samples_per_datum"],
        beta=beta,
    )
    print(json.dumps(record.to_dict()))
    return EXIT_OK


def cmd_sweep(args, resolved, logger) -> int:
    _require(resolved["data"]["path"], "--data")
    sweep_cfg = SweepConfig.from_resolved(resolved)
    # Explicit single-value flags restrict the grid
    if args.model is not None:
        sweep_cfg = replace(sweep_cfg, families=(args.model,))
    if args.k is not None:
        sweep_cfg = replace(sweep_cfg, k_grid=(args.k,))
    if args.beta is not None:
        sweep_cfg = replace(sweep_cfg, beta_grid=(args.beta,))
    path = run_grid(sweep_cfg, verbose=resolved["output"]["verbose"])
    print(path)
    return EXIT_OK


def cmd_report(args, resolved, logger) -> int:
    results = resolved["output"]["results"] or os.path.join(resolved["output"]["out"], "results.csv")
    if not os.path.exists(results):
        raise FileNotFoundError(f"results file not found: {results}")
    artifacts = report(
        results,
        out_dir=os.path.dirname(os.path.abspath(results)) if not args.out else args.out,
        family=args.model,
        render=resolved["output"]["render"],
    )
    for name, path in artifacts.paths.items():
        print(f"{name}: {path}")
    for verdict in artifacts.verdicts:
        print(verdict.line())
    if artifacts.n_rows == 0:
        logger.warning("Report is empty: no successful rows")
        return EXIT_EMPTY_REPORT
    return EXIT_OK


def cmd_check(args, resolved, logger) -> int:
    results = run_all_checks(quick=resolved["check"]["quick"])
    for result in results:
        print(result.line())
    return EXIT_OK if all(r.passed for r in results) else EXIT_NUMERICAL


COMMANDS = {
    "preprocess": cmd_preprocess,
    "synth": cmd_synth,
    "train": cmd_train,
    "eval": cmd_eval,
    "sweep": cmd_sweep,
    "report": cmd_report,
    "check": cmd_check,
}


def parse_and_dispatch(argv: Optional[List[str]] = None) -> int:
    """
    Parse ``argv``, resolve the configuration and run one subcommand.

    Returns
    -------
    int
        Process exit code
    """
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        resolved = config.resolve_config(args.preset, args.config, _flags(args))
    except (UsageError, ValueError) as e:
        print(f"usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DATA

    if args.print_config:
        print(config.format_config(resolved), end="")
        return EXIT_OK

    logger = setup_logger(level=logging.DEBUG if resolved["output"]["verbose"] else None)
    logger.info(f"Running '{args.command}'")

    try:
        return COMMANDS[args.command](args, resolved, logger)
    except NonFiniteLossError as e:
        logger.error(f"Numerical failure: {e}")
        return EXIT_NUMERICAL
    except UsageError as e:
        logger.error(f"Usage error: {e}")
        return EXIT_USAGE
    except OSError as e:
        logger.error(f"Data/IO error: {e}")
        return EXIT_DATA
    except ValueError as e:
        logger.error(f"Invalid configuration or data: {e}")
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(parse_and_dispatch())
