"""Command-line entry points: estimate, simulate, reproduce.

Every run is reproducible from its manifest: the manifest records the exact
command, a SHA-256 of the config it consumed, the seed, and the package
version. All output files are written to a temporary name in the target
directory and renamed into place, so a crashed run never leaves a partial
file behind.

Exit codes: 0 success, 2 schema/config problems, 3 identifiability, 4
convergence, 5 degenerate data, 1 anything unexpected.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import math
import os
import sys
from datetime import datetime, timezone
from importlib import resources
from pathlib import Path

try:
    import tomllib
except ImportError:  # Python 3.10
    import tomli as tomllib

from . import __version__
from .bridge import BridgeSpec, bridge_to_json, fit_bridge_moment
from .data_model import VariableRoles, load_csv, validate
from .errors import ConfigError, NcveError
from .estimators import (
    BetaModelSpec,
    estimate_ve_conditional,
    estimate_ve_logistic,
    estimate_ve_nc,
)
from .simulation import (
    PAPER_POPULATION,
    PAPER_REPLICATIONS,
    ScenarioConfig,
    default_params,
    run_monte_carlo,
)

SCHEMA_VERSION = "1"

REPRODUCE_TAGS = {
    "fig2a": "binary-desk.toml",
    "fig2b": "continuous-desk.toml",
    "nonrare": "binary-nonrare-desk.toml",
}


def _utc_now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def _atomic_write_text(path: Path, text: str) -> None:
    tmp = path.with_name(f".{path.name}.tmp{os.getpid()}")
    tmp.write_text(text)
    os.replace(tmp, path)


def _sha256(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def _write_manifest(out_dir: Path, stem: str, argv: list[str], config_bytes: bytes,
                    seed: int | None, outputs: list[str], started: str) -> Path:
    manifest = {
        "schema_version": SCHEMA_VERSION,
        "command": argv,
        "config_sha256": _sha256(config_bytes),
        "seed": seed,
        "version": __version__,
        "started_utc": started,
        "finished_utc": _utc_now(),
        "outputs": outputs,
    }
    path = out_dir / f"{stem}-manifest.json"
    _atomic_write_text(path, json.dumps(manifest, indent=2) + "\n")
    return path


def _read_config_bytes(name_or_path: str) -> bytes:
    """Filesystem first; fall back to the configs shipped inside the package."""
    p = Path(name_or_path)
    if p.exists():
        return p.read_bytes()
    packaged = resources.files("ncve").joinpath("configs", name_or_path)
    if packaged.is_file():
        return packaged.read_bytes()
    raise ConfigError(f"config file not found: {name_or_path} (checked the filesystem "
                      "and the configs shipped with the package)")


def _parse_toml(data: bytes, origin: str) -> dict:
    try:
        return tomllib.loads(data.decode("utf-8"))
    except (tomllib.TOMLDecodeError, UnicodeDecodeError) as exc:
        raise ConfigError(f"could not parse {origin}: {exc}") from exc


def _roles_from_config(cfg: dict, origin: str) -> VariableRoles:
    roles = cfg.get("roles")
    if not isinstance(roles, dict):
        raise ConfigError(f"{origin} must contain a [roles] table")
    try:
        return VariableRoles(
            treatment=roles["treatment"],
            outcome=roles["outcome"],
            nce=tuple(roles["nce"]),
            nco=tuple(roles["nco"]),
            covariates=tuple(roles.get("covariates", ())),
            categorical=tuple(roles.get("categorical", ())),
        )
    except KeyError as exc:
        raise ConfigError(f"{origin} [roles] is missing required key {exc}") from exc


def _scenario_from_config(cfg: dict, origin: str, args) -> ScenarioConfig:
    sc = cfg.get("scenario")
    if not isinstance(sc, dict):
        raise ConfigError(f"{origin} must contain a [scenario] table")
    setting = sc.get("setting")
    if not isinstance(setting, str):
        raise ConfigError(f"{origin} [scenario] needs a string 'setting'")
    known = {"setting", "name", "beta0_grid", "risk_ratio_grid", "n_population",
             "replications", "seed", "threads", "estimators", "alpha",
             "keep_replications"}
    bad = set(sc) - known
    if bad:
        raise ConfigError(f"{origin} [scenario] has unknown key(s): {sorted(bad)}")
    dgp = default_params(setting)
    overrides = cfg.get("dgp", {})
    if overrides:
        known = {f.name for f in dataclasses.fields(dgp)}
        bad = set(overrides) - known
        if bad:
            raise ConfigError(f"{origin} [dgp] has unknown key(s): {sorted(bad)}")
        dgp = dataclasses.replace(dgp, **overrides)

    if "beta0_grid" in sc:
        grid = tuple(float(b) for b in sc["beta0_grid"])
    elif "risk_ratio_grid" in sc:
        grid = tuple(math.log(float(r)) for r in sc["risk_ratio_grid"])
    else:
        grid = ScenarioConfig.__dataclass_fields__["beta0_grid"].default

    kwargs = {
        "name": sc.get("name", setting),
        "dgp": dgp,
        "beta0_grid": grid,
    }
    for key in ("n_population", "replications", "seed", "threads"):
        if key in sc:
            kwargs[key] = int(sc[key])
    if "estimators" in sc:
        kwargs["estimators"] = tuple(sc["estimators"])
    if "alpha" in sc:
        kwargs["alpha_level"] = float(sc["alpha"])
    if "keep_replications" in sc:
        kwargs["keep_replications"] = bool(sc["keep_replications"])

    # command-line flags win over file values
    if getattr(args, "seed", None) is not None:
        kwargs["seed"] = args.seed
    if getattr(args, "threads", None) is not None:
        kwargs["threads"] = args.threads
    if getattr(args, "replications", None) is not None:
        kwargs["replications"] = args.replications
    if getattr(args, "n_population", None) is not None:
        kwargs["n_population"] = args.n_population
    if getattr(args, "paper_scale", False):
        kwargs["n_population"] = PAPER_POPULATION
        kwargs["replications"] = PAPER_REPLICATIONS
    return ScenarioConfig(**kwargs)


def _report_table(report, n: int) -> str:
    lines = [
        f"estimator      {report.estimator}",
        f"records        {n}",
        f"scale          {report.scale}",
        f"beta_hat       {report.beta_hat:.6f}",
        f"ve_hat         {report.ve_hat:.6f}",
        f"se(beta_hat)   {math.sqrt(report.var_beta):.6f}",
        f"{100 * (1 - report.alpha_level):.0f}% CI for VE ({report.ci[0]:.6f}, {report.ci[1]:.6f})",
    ]
    if report.note:
        lines.append(f"note           {report.note}")
    for w in report.diagnostics.get("warnings", ()):
        lines.append(f"warning        {w}")
    return "\n".join(lines)


def _cmd_estimate(args, argv: list[str]) -> int:
    started = _utc_now()
    data_path = Path(args.data)
    config_bytes = _read_config_bytes(args.config)
    cfg = _parse_toml(config_bytes, args.config)
    roles = _roles_from_config(cfg, args.config)
    sample = load_csv(data_path, roles)

    for finding in validate(sample):
        if finding.severity == "warning":
            print(f"warning: {finding.code}: {finding.message}", file=sys.stderr)

    est_cfg = cfg.get("estimate", {})
    estimator = args.estimator or est_cfg.get("estimator", "nc")
    alpha = args.alpha if args.alpha is not None else float(est_cfg.get("alpha", 0.05))

    bridge_cfg = cfg.get("bridge", {})
    form = args.bridge or bridge_cfg.get("form", "auto")
    if form == "auto":
        z0 = sample.z[:, 0]
        binary_z = sample.z.shape[1] == 1 and set(float(v) for v in z0) <= {0.0, 1.0}
        form = "saturated" if binary_z and sample.x.shape[1] == 0 else "logistic-gaussian"
    if form == "saturated":
        spec = BridgeSpec.saturated()
    elif form == "logistic-gaussian":
        spec = BridgeSpec.logistic_gaussian(sample.x.shape[1])
    else:
        raise ConfigError(f"unknown bridge form {form!r}; expected 'auto', "
                          "'saturated', or 'logistic-gaussian'")

    if estimator == "logistic":
        report = estimate_ve_logistic(sample, alpha_level=alpha)
        bridge_fit = None
    else:
        bridge_fit = fit_bridge_moment(sample, spec)
        if estimator == "nc":
            report = estimate_ve_nc(sample, bridge_fit, alpha_level=alpha)
        elif estimator == "nc-conditional":
            model = est_cfg.get("beta_model", "intercept")
            if model == "intercept":
                beta_model = BetaModelSpec.intercept_only()
            elif model == "linear":
                beta_model = BetaModelSpec.linear()
            else:
                raise ConfigError(f"unknown beta_model {model!r}; expected "
                                  "'intercept' or 'linear'")
            report = estimate_ve_conditional(sample, bridge_fit, beta_model=beta_model,
                                             alpha_level=alpha)
        else:
            raise ConfigError(f"unknown estimator {estimator!r}; expected 'nc', "
                              "'nc-conditional', or 'logistic'")

    out_path = Path(args.out) if args.out else Path(f"{data_path.stem}-report.json")
    out_path.parent.mkdir(parents=True, exist_ok=True)
    body = {"schema_version": SCHEMA_VERSION, "data": str(data_path), "n": sample.n}
    body.update(report.to_dict())
    if bridge_fit is not None and args.bridge_out:
        bridge_path = Path(args.bridge_out)
        _atomic_write_text(bridge_path, json.dumps(bridge_to_json(bridge_fit), indent=2) + "\n")
        print(f"wrote {bridge_path}", file=sys.stderr)
    _atomic_write_text(out_path, json.dumps(body, indent=2) + "\n")
    _write_manifest(out_path.parent, out_path.stem, argv, config_bytes, None,
                    [out_path.name], started)
    print(_report_table(report, sample.n))
    print(f"wrote {out_path}", file=sys.stderr)
    return 0


def _write_summary(summary, out_dir: Path, argv: list[str], config_bytes: bytes,
                   started: str) -> tuple[Path, Path]:
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path = out_dir / f"{summary.name}-summary.csv"
    json_path = out_dir / f"{summary.name}-summary.json"
    _atomic_write_text(csv_path, summary.to_csv_text())
    payload = {"schema_version": SCHEMA_VERSION}
    payload.update(summary.to_json_dict())
    if summary.detail:
        payload["detail"] = summary.detail
    _atomic_write_text(json_path, json.dumps(payload, indent=2) + "\n")
    _write_manifest(out_dir, summary.name, argv, config_bytes, summary.seed,
                    [csv_path.name, json_path.name], started)
    return csv_path, json_path


def _cmd_simulate(args, argv: list[str]) -> int:
    started = _utc_now()
    config_bytes = _read_config_bytes(args.config)
    cfg = _parse_toml(config_bytes, args.config)
    scenario = _scenario_from_config(cfg, args.config, args)
    summary = run_monte_carlo(scenario)
    csv_path, _ = _write_summary(summary, Path(args.out_dir), argv, config_bytes, started)
    _print_summary_tables(summary, scenario)
    print(f"\nwrote {csv_path}", file=sys.stderr)
    return 0


def _pivot(summary, field: str) -> str:
    ests = list(summary.estimators)
    width = max(len(e) for e in ests) + 2
    header = "beta0_true".ljust(12) + "".join(e.rjust(max(width, 12)) for e in ests)
    lines = [header]
    for beta0 in summary.beta0_grid:
        cells = []
        for e in ests:
            row = summary.row(e, beta0)
            cells.append(f"{getattr(row, field):.4f}".rjust(max(width, 12)))
        lines.append(f"{beta0:.4f}".ljust(12) + "".join(cells))
    return "\n".join(lines)


def _print_summary_tables(summary, scenario) -> None:
    print(f"# {summary.name}: N={scenario.n_population:,}, R={scenario.replications}, "
          f"seed={scenario.seed}")
    print("\nMean bias of beta_hat:")
    print(_pivot(summary, "mean_bias"))
    print(f"\nCoverage of the {100 * (1 - scenario.alpha_level):.0f}% interval:")
    print(_pivot(summary, "coverage"))


def _cmd_reproduce(args, argv: list[str]) -> int:
    started = _utc_now()
    config_name = REPRODUCE_TAGS.get(args.tag)
    if config_name is None:
        raise ConfigError(f"unknown reproduction tag {args.tag!r}; expected one of "
                          f"{sorted(REPRODUCE_TAGS)}")
    config_bytes = _read_config_bytes(config_name)
    cfg = _parse_toml(config_bytes, config_name)
    scenario = _scenario_from_config(cfg, config_name, args)
    summary = run_monte_carlo(scenario)
    csv_path, _ = _write_summary(summary, Path(args.out_dir), argv, config_bytes, started)
    _print_summary_tables(summary, scenario)
    print(f"\nwrote {csv_path}", file=sys.stderr)
    return 0


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ncve",
        description="Vaccine effectiveness from test-negative samples with "
                    "double negative controls.",
    )
    parser.add_argument("--version", action="version", version=f"ncve {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    est = sub.add_parser("estimate", help="estimate VE from a CSV of records")
    est.add_argument("--data", required=True, help="CSV file with one record per row")
    est.add_argument("--config", required=True,
                     help="TOML file mapping columns to roles (see README)")
    est.add_argument("--estimator", choices=["nc", "nc-conditional", "logistic"],
                     help="override the config's estimator (default nc)")
    est.add_argument("--bridge", choices=["auto", "saturated", "logistic-gaussian"],
                     help="override the bridge form")
    est.add_argument("--alpha", type=float, help="interval level (default 0.05)")
    est.add_argument("--out", help="report JSON path (default <data>-report.json)")
    est.add_argument("--bridge-out", help="also write the fitted bridge as JSON")

    sim = sub.add_parser("simulate", help="run a Monte Carlo scenario from a config")
    sim.add_argument("--config", required=True,
                     help="scenario TOML (a path, or the name of a shipped config)")
    sim.add_argument("--out-dir", default=".", help="directory for summary files")
    sim.add_argument("--seed", type=int, help="override the config seed")
    sim.add_argument("--threads", type=int, help="worker processes (default 1)")
    sim.add_argument("--replications", type=int, help="override replication count")
    sim.add_argument("--n-population", type=int, dest="n_population",
                     help="override population size per replication")

    rep = sub.add_parser("reproduce", help="re-run a study table at desk scale")
    rep.add_argument("tag", help=f"one of {sorted(REPRODUCE_TAGS)}")
    rep.add_argument("--out-dir", default=".", help="directory for summary files")
    rep.add_argument("--paper-scale", action="store_true",
                     help="full size: N=7,000,000 and R=1,000 (hours, not minutes)")
    rep.add_argument("--seed", type=int, help="override the config seed")
    rep.add_argument("--threads", type=int, help="worker processes (default 1)")
    rep.add_argument("--replications", type=int, help="override replication count")
    rep.add_argument("--n-population", type=int, dest="n_population",
                     help="override population size per replication")
    return parser


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "estimate":
            return _cmd_estimate(args, ["ncve"] + argv)
        if args.command == "simulate":
            return _cmd_simulate(args, ["ncve"] + argv)
        return _cmd_reproduce(args, ["ncve"] + argv)
    except NcveError as exc:
        print(f"error [{type(exc).__name__}]: {exc}", file=sys.stderr)
        return exc.exit_code
    except Exception as exc:  # noqa: BLE001 - the CLI must not traceback
        print(f"unexpected error [{type(exc).__name__}]: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
