"""Command-line entry point: ``sdmcran <subcommand> [--config ...] [--out ...]``.

Failures print a one-line JSON object ``{"error": ..., "message": ..., ...}``
on stdout and exit with a nonzero status.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .errors import ConfigError, SdmError, SeriesError
from .experiments import (ExperimentConfig, desk_config, emit_figure_data, fit_cell, format_figure_csv,
                          format_rate_table, parse_rate_table, rate_cell, run_pipeline, simulate_set)
from .kernels import compute_X, save_coefficients

EXIT_CONFIG = 2
EXIT_RUNTIME = 1


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="JSON experiment configuration")
    common.add_argument("--seed", type=int, help="root seed (overrides the config)")
    common.add_argument("--workers", type=int, default=1, help="worker processes")
    common.add_argument("--desk-scale", action="store_true", help="use the reduced desk-scale system")
    common.add_argument("--out", type=Path, default=Path("out"), help="output directory")
    p = argparse.ArgumentParser(prog="sdmcran", description="SDM fiber simulation and CRAN achievable rates")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("coeffs", parents=[common], help="compute and cache the NLI coefficients")
    sub.add_parser("simulate", parents=[common], help="simulate and cache training and test sequences")
    sub.add_parser("fit", parents=[common], help="fit the receiver models (JSON reports)")
    sub.add_parser("rate", parents=[common], help="achievable rates (rates.csv); fits first if needed")
    sub.add_parser("sweep", parents=[common], help="full pipeline over all powers")
    fig = sub.add_parser("figure", parents=[common], help="plot-ready CSV from rates.csv")
    fig.add_argument("--rates", type=Path, help="rate table (default: <out>/rates.csv)")
    return p


def load_config(args) -> ExperimentConfig:
    overrides = {}
    if args.config is not None:
        try:
            text = args.config.read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read configuration: {exc}", field="config") from exc
        data = json.loads(text) if text.strip() else {}
        if not isinstance(data, dict):
            raise ConfigError("configuration must be a JSON object")
        overrides.update(data)
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.desk_scale or overrides.pop("desk_scale", False):
        return desk_config(**overrides)
    return ExperimentConfig.from_dict(overrides)


def _emit_error(exc: BaseException) -> int:
    info = {"error": type(exc).__name__, "message": str(exc)}
    if isinstance(exc, ConfigError) and exc.field:
        info["field"] = exc.field
    if isinstance(exc, SeriesError):
        info["missing"] = exc.missing
    print(json.dumps(info))
    return EXIT_CONFIG if isinstance(exc, (ConfigError, json.JSONDecodeError)) else EXIT_RUNTIME


def run(argv=None) -> int:
    args = _parser().parse_args(argv)
    try:
        if args.workers < 1:
            raise ConfigError("workers must be >= 1", field="workers")
        cfg = load_config(args)
        out = args.out
        out.mkdir(parents=True, exist_ok=True)
        cmd = args.command
        if cmd == "coeffs":
            X = compute_X(cfg.link(), cfg.wdm(1))
            path = out / f"coeffs_{X.spec_hash}.sdmx"
            save_coefficients(path, X)
            print(json.dumps({"coefficients": str(path), "K": X.K}))
        elif cmd == "simulate":
            n = 0
            for Q in cfg.subcarriers:
                for p in cfg.powers_dbm:
                    for role in ("train", "test"):
                        n += len(simulate_set(cfg, p, Q, role, out / "cache", args.workers))
            print(json.dumps({"sequences": n, "cache": str(out / "cache")}))
        elif cmd == "fit":
            for Q in cfg.subcarriers:
                for p in cfg.powers_dbm:
                    fit_cell(cfg, p, Q, out, args.workers)
            print(json.dumps({"fits": str(out / "fits")}))
        elif cmd == "rate":
            rows = []
            for Q in cfg.subcarriers:
                for p in cfg.powers_dbm:
                    rows.extend(rate_cell(cfg, p, Q, fit_cell(cfg, p, Q, out, args.workers), out, args.workers))
            (out / "rates.csv").write_text(format_rate_table(rows))
            print(json.dumps({"rates": str(out / "rates.csv"), "rows": len(rows)}))
        elif cmd == "sweep":
            res = run_pipeline(cfg, out, args.workers)
            print(json.dumps({"rates": str(out / "rates.csv"), "rows": len(res["rates"])}))
        elif cmd == "figure":
            src = args.rates or out / "rates.csv"
            try:
                rows = parse_rate_table(src.read_text())
            except OSError as exc:
                raise SeriesError([f"rate table {src} unreadable: {exc.strerror}"]) from exc
            fig = emit_figure_data(rows, cfg)
            (out / "figure.csv").write_text(format_figure_csv(fig))
            print(json.dumps({"figure": str(out / "figure.csv"), "rows": len(fig)}))
        return 0
    except (SdmError, ValueError, OSError, json.JSONDecodeError) as exc:
        return _emit_error(exc)


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
