"""Command line: ``nsstab verify | run CONFIG | sweep CONFIG``.

Exit codes: 0 success, 1 failed check or aborted experiment, 2 configuration
error (including a refused overwrite of existing results).
"""
from __future__ import annotations

import argparse
import math
import os
import sys
from dataclasses import dataclass, fields
from pathlib import Path

import tomli

from .baseflows import BaseFlowSpec, PerturbationSpec
from .experiments import (
    ExperimentConfig,
    run_experiment,
    threshold_sweep,
    write_report,
    write_sweep,
)
from .fields import BoxSpec
from .solver import SolverConfig, set_viscosity_sign
from .verification import run_battery

EXIT_OK, EXIT_FAILURE, EXIT_CONFIG = 0, 1, 2

_SECTIONS = {
    "box": {"lengths", "resolution"},
    "solver": {f.name for f in fields(SolverConfig)},
    "base": {f.name for f in fields(BaseFlowSpec)},
    "perturbation": {f.name for f in fields(PerturbationSpec)},
    "experiment": {"horizon", "sweep", "snapshot_times"},
    "output": {"dir", "threads", "quiet"},
}
_REQUIRED = {"box": {"resolution"}, "solver": {"nu", "t_end"}}


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class CliConfig:
    """Parsed config file: the experiment plus output settings."""

    experiment: ExperimentConfig
    out_dir: Path
    threads: int
    quiet: bool


def _triple(value, key: str, section: str):
    if isinstance(value, (int, float)) and not isinstance(value, bool):
        return (value,) * 3
    if isinstance(value, list) and len(value) == 3:
        return tuple(value)
    raise ConfigError(f"[{section}] {key} must be a number or a list of three numbers, got {value!r}")


def _build(section: str, factory, values: dict):
    try:
        return factory(**values)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{section}] {exc}") from None


def parse_config(data: dict, source: str = "<config>") -> CliConfig:
    unknown_sections = set(data) - set(_SECTIONS)
    if unknown_sections:
        raise ConfigError(f"{source}: unknown section [{sorted(unknown_sections)[0]}]; allowed: {sorted(_SECTIONS)}")
    for section, allowed in _SECTIONS.items():
        table = data.get(section, {})
        if not isinstance(table, dict):
            raise ConfigError(f"{source}: [{section}] must be a table")
        unknown = set(table) - allowed
        if unknown:
            raise ConfigError(f"[{section}] unknown key {sorted(unknown)[0]!r}; allowed: {sorted(allowed)}")
        missing = _REQUIRED.get(section, set()) - set(table)
        if missing:
            raise ConfigError(f"[{section}] missing required key {sorted(missing)[0]!r}")

    box_t = data["box"]
    lengths = _triple(box_t.get("lengths", 2 * math.pi), "lengths", "box")
    resolution = _triple(box_t["resolution"], "resolution", "box")
    if not all(isinstance(n, int) and not isinstance(n, bool) for n in resolution):
        raise ConfigError(f"[box] resolution must be integers, got {resolution!r}")
    box = _build("box", BoxSpec, {"lengths": tuple(float(x) for x in lengths), "resolution": resolution})
    solver = _build("solver", SolverConfig, data["solver"])
    base = _build("base", BaseFlowSpec, data.get("base", {}))
    perturbation = _build("perturbation", PerturbationSpec, data.get("perturbation", {}))
    exp = dict(data.get("experiment", {}))
    for key in ("sweep", "snapshot_times"):
        if key in exp:
            if not isinstance(exp[key], list):
                raise ConfigError(f"[experiment] {key} must be a list of numbers")
            exp[key] = tuple(exp[key])
    experiment = _build(
        "experiment",
        lambda **kw: ExperimentConfig(box=box, solver=solver, base=base, perturbation=perturbation, **kw),
        exp,
    )

    out = data.get("output", {})
    threads = out.get("threads", os.cpu_count() or 1)
    if not (isinstance(threads, int) and threads >= 1):
        raise ConfigError(f"[output] threads must be a positive integer, got {threads!r}")
    quiet = out.get("quiet", False)
    if not isinstance(quiet, bool):
        raise ConfigError(f"[output] quiet must be true or false, got {quiet!r}")
    return CliConfig(experiment, Path(out.get("dir", "runs")), threads, quiet)


def load_config(path) -> CliConfig:
    path = Path(path)
    try:
        with open(path, "rb") as fh:
            data = tomli.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except tomli.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: invalid TOML: {exc}") from None
    return parse_config(data, str(path))


# ---------------------------------------------------------------------------
# commands


def _say(quiet: bool, msg: str) -> None:
    if not quiet:
        print(msg)


def cmd_verify(quiet: bool = False, fault: str | None = None) -> int:
    if fault == "negate-viscosity":
        set_viscosity_sign(-1.0)
    try:
        results = run_battery(
            lambda r: _say(quiet, f"{'PASS' if r.passed else 'FAIL'}  {r.name:<30} {r.detail}")
        )
    finally:
        set_viscosity_sign(1.0)
    failed = [r for r in results if not r.passed]
    _say(quiet, f"{len(results) - len(failed)}/{len(results)} checks passed")
    for r in failed:
        print(f"failed check: {r.name} ({r.detail})", file=sys.stderr)
    return EXIT_FAILURE if failed else EXIT_OK


def _verdict_line(report) -> str:
    v = report.verdict
    status = "aborted" if report.aborted else "ok"
    if v is None:
        return f"run {report.config_hash}: status={status} (no samples)"
    C = "n/a" if v.gronwall_C is None else f"{v.gronwall_C:.4g}"
    return (
        f"run {report.config_hash}: status={status} stable={v.stable} "
        f"A0={v.measured_A0:.4g} condition={v.condition_value:.4g} K/K0={C}"
    )


def cmd_run(config_path, out: str | None = None, force: bool = False, quiet: bool | None = None) -> int:
    cfg = load_config(config_path)
    quiet = cfg.quiet if quiet is None else quiet
    out_dir = Path(out) if out else cfg.out_dir
    summary_path = out_dir / f"run-{cfg.experiment.config_hash()}.json"
    if summary_path.exists() and not force:
        raise FileExistsError(f"refusing to overwrite {summary_path} (use --force)")
    report = run_experiment(cfg.experiment)
    paths = write_report(report, out_dir, force=True)
    _say(quiet, _verdict_line(report))
    _say(quiet, f"summary: {paths['summary']}")
    if report.aborted:
        print(f"experiment aborted: {report.abort_message}", file=sys.stderr)
        return EXIT_FAILURE
    return EXIT_OK


def cmd_sweep(
    config_path, out: str | None = None, threads: int | None = None, force: bool = False, quiet: bool | None = None
) -> int:
    cfg = load_config(config_path)
    if not cfg.experiment.sweep:
        raise ConfigError("[experiment] sweep list is required for the sweep command")
    quiet = cfg.quiet if quiet is None else quiet
    out_dir = Path(out) if out else cfg.out_dir
    target = out_dir / f"sweep-{cfg.experiment.config_hash()}.json"
    if target.exists() and not force:
        raise FileExistsError(f"refusing to overwrite {target} (use --force)")
    result = threshold_sweep(cfg.experiment, threads=threads or cfg.threads)
    path = write_sweep(result, out_dir, force=True)
    for eps, report in zip(result.epsilons, result.reports):
        _say(quiet, f"epsilon={eps:g}  " + _verdict_line(report))
    _say(
        quiet,
        f"bracket: largest stable={result.largest_stable} smallest unstable={result.smallest_unstable}"
        + (f" violations={result.monotonicity_violations}" if result.monotonicity_violations else ""),
    )
    _say(quiet, f"summary: {path}")
    aborted = [e for e, r in zip(result.epsilons, result.reports) if r.aborted]
    if aborted:
        print(f"sweep members aborted at epsilon {aborted}", file=sys.stderr)
        return EXIT_FAILURE
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--out", help="output directory (overrides [output] dir)")
    common.add_argument("--threads", type=int, help="parallel sweep members (overrides [output] threads)")
    common.add_argument("--force", action="store_true", help="overwrite results with the same config hash")
    common.add_argument("--quiet", action="store_true", default=None, help="print nothing on success")

    parser = argparse.ArgumentParser(prog="nsstab", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    verify = sub.add_parser("verify", parents=[common], help="run the built-in verification battery")
    verify.add_argument("--inject-fault", choices=["negate-viscosity"], help=argparse.SUPPRESS)
    run_p = sub.add_parser("run", parents=[common], help="run one perturbation experiment")
    run_p.add_argument("config")
    sweep = sub.add_parser("sweep", parents=[common], help="run a threshold sweep over epsilon")
    sweep.add_argument("config")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.threads is not None and args.threads < 1:
        print("error: --threads must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    try:
        if args.command == "verify":
            return cmd_verify(quiet=bool(args.quiet), fault=args.inject_fault)
        if args.command == "run":
            return cmd_run(args.config, args.out, args.force, args.quiet)
        return cmd_sweep(args.config, args.out, args.threads, args.force, args.quiet)
    except (ConfigError, FileExistsError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


def main_entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    main_entry()
