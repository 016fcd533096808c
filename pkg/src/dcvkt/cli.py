"""Command-line entry point.

Exit codes:

    0  success
    1  unexpected internal error
    2  usage error (bad flags)
    3  input/output error (missing or unreadable file)
    4  invalid data or configuration
    5  estimation did not converge (results are still written)
    6  feebate solver did not converge
    7  feebate not applicable to the fleet (e.g. every model on one side of the anchor)
    8  gradient check failed

Every command writes ``manifest.json`` next to its outputs with the inputs'
SHA-256 digests, the resolved configuration, seed and draw count.
"""

from __future__ import annotations

import argparse
import csv
import datetime as _dt
import hashlib
import json
import logging
import math
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .data import DataError, load_config, load_dataset
from .draws import make_drawset
from .estimation import EstimationConfig, EstimationResult, default_start, estimate
from .feebate import (FeebateConvergenceError, FeebateError, FeebatePolicy, default_anchor,
                      evaluate_policy, feebate_report, solve_revenue_neutral)
from .likelihood import wll
from .policy import (LONG_RUN_CAVEAT, baseline_fleet_state, long_run_elasticity,
                     segment_table, short_run_vkt_elasticity, standard_errors)

log = logging.getLogger("dcvkt")

EXIT_OK = 0
EXIT_INTERNAL = 1
EXIT_USAGE = 2
EXIT_IO = 3
EXIT_DATA = 4
EXIT_NOT_CONVERGED = 5
EXIT_FEEBATE_CONVERGENCE = 6
EXIT_FEEBATE_STRUCTURE = 7
EXIT_GRADIENT = 8

DEFAULT_R = 500
GLOBAL_DEFAULTS = {"config": None, "seed": None, "r": None, "threads": 1, "out_dir": ".",
                   "verbose": False}


class CliError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


def sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


@dataclass
class RunManifest:
    subcommand: str
    arguments: dict
    config: dict | None
    inputs: dict
    seed: int | None
    R: int | None
    outputs: list = field(default_factory=list)
    output_digests: dict = field(default_factory=dict)
    notes: list = field(default_factory=list)
    timestamp: str = field(
        default_factory=lambda: _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds"))
    version: str = __version__

    def write(self, out_dir: Path) -> Path:
        self.output_digests = {Path(p).name: sha256(Path(p)) for p in self.outputs}
        d = dict(self.__dict__)
        d["outputs"] = [Path(p).name for p in self.outputs]
        path = out_dir / "manifest.json"
        path.write_text(json.dumps(d, indent=2, sort_keys=True))
        return path


def write_csv(path: Path, rows: list[dict]) -> Path:
    keys: list[str] = []
    for r in rows:
        keys += [k for k in r if k not in keys]
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=keys, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: _fmt(r.get(k)) for k in keys})
    return path


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return v


# ---------------------------------------------------------------------------
# shared plumbing


def _existing(path) -> Path:
    p = Path(path)
    if not p.is_file():
        raise CliError(f"file not found: {p}", EXIT_IO)
    return p


def _data_paths(args):
    base = Path(args.data) if args.data else None
    veh = args.vehicles or (base / "vehicles.csv" if base else None)
    hh = args.households or (base / "households.csv" if base else None)
    cfg = args.config or (base / "market.toml" if base and (base / "market.toml").exists() else None)
    if veh is None or hh is None:
        raise CliError("need --data DIR or both --vehicles and --households", EXIT_USAGE)
    if cfg is None:
        raise CliError("need --config (or a market.toml inside --data)", EXIT_USAGE)
    return _existing(veh), _existing(hh), _existing(cfg)


def _load(args):
    veh, hh, cfg_path = _data_paths(args)
    config = load_config(cfg_path)
    ds = load_dataset(veh, hh, config, strict=not args.lenient)
    inputs = {"vehicles": {"path": str(veh), "sha256": sha256(veh)},
              "households": {"path": str(hh), "sha256": sha256(hh)},
              "config": {"path": str(cfg_path), "sha256": sha256(cfg_path)}}
    return ds, config, inputs


def _load_model(args, inputs):
    path = _existing(args.model)
    inputs["model"] = {"path": str(path), "sha256": sha256(path)}
    try:
        return EstimationResult.load(path)
    except (KeyError, ValueError, json.JSONDecodeError) as exc:
        raise CliError(f"cannot read model file {path}: {exc}", EXIT_DATA) from exc


def _simulation_draws(args, ds, model=None):
    R = args.r or (model.R if model else DEFAULT_R)
    seed = args.seed if args.seed is not None else (model.seed if model else 0)
    return make_drawset(ds.n_households, R, seed), R, seed


def _out_dir(args) -> Path:
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _arguments(args) -> dict:
    skip = {"func", "r", "seed", "out_dir", "verbose"}
    return {k: (str(v) if isinstance(v, Path) else v) for k, v in sorted(vars(args).items())
            if k not in skip}


# ---------------------------------------------------------------------------
# commands


def cmd_synth(args) -> int:
    from .synth import SyntheticSpec, default_truth, write_synthetic

    out = _out_dir(args)
    seed = args.seed if args.seed is not None else 0
    spec = SyntheticSpec(default_truth(), N=args.n, J=args.j, seed=seed)
    paths = write_synthetic(spec, out)
    RunManifest("synth", _arguments(args), spec.config.to_dict(), {}, seed, None,
                outputs=list(paths.values())).write(out)
    print(f"wrote synthetic market to {out}")
    return EXIT_OK


def cmd_estimate(args) -> int:
    ds, config, inputs = _load(args)
    out = _out_dir(args)
    seed = args.seed if args.seed is not None else 0
    R = args.r or DEFAULT_R
    cfg = EstimationConfig(R=R, seed=seed, starts=args.starts, threads=args.threads)
    res = estimate(ds, cfg)
    est_path = out / "estimation.json"
    res.save(est_path)
    rows = res.table()
    rows.append({"parameter": "loglikelihood", "estimate": res.loglik})
    rows.append({"parameter": "n_households", "estimate": float(ds.n_households)})
    rows.append({"parameter": "n_alternatives", "estimate": float(ds.n_alternatives)})
    for kind in ("income", "fuel_price"):
        rows.append({"parameter": f"short_run_vkt_elasticity_{kind}",
                     "estimate": short_run_vkt_elasticity(res.theta_hat, ds, kind)})
    table = write_csv(out / "coefficients.csv", rows)
    notes = [] if res.converged else ["estimation did not converge"]
    RunManifest("estimate", _arguments(args), config.to_dict(), inputs, seed, R,
                outputs=[est_path, table], notes=notes).write(out)
    print(f"loglik {res.loglik:.6f} converged={res.converged} |g|={res.gradient_norm:.2e}")
    return EXIT_OK if res.converged else EXIT_NOT_CONVERGED


def cmd_elasticity(args) -> int:
    ds, config, inputs = _load(args)
    model = _load_model(args, inputs)
    out = _out_dir(args)
    draws, R, seed = _simulation_draws(args, ds, model)
    theta, shock, threads = model.theta_hat, args.shock, args.threads
    base = baseline_fleet_state(theta, ds, draws, threads)
    se_on = args.se_draws > 0

    def se_of(fn):
        return standard_errors(model, fn, args.se_draws, seed) if se_on else {}

    short = []
    for kind in ("income", "fuel_price"):
        row = {"kind": kind, "elasticity": short_run_vkt_elasticity(theta, ds, kind)}
        se = se_of(lambda t, k=kind: {"elasticity": short_run_vkt_elasticity(t, ds, k)})
        if se:
            row["elasticity_se"] = se["elasticity"]
        short.append(row)

    long_rows = []
    for kind in ("fuel_price", "income"):
        rep = long_run_elasticity(theta, ds, draws, kind, shock, base, threads)
        rep.se = se_of(lambda t, k=kind: _report_values(long_run_elasticity(t, ds, draws, k,
                                                                            shock, None, threads)))
        long_rows.append({"kind": kind, **rep.to_row(), "notes": rep.notes})

    outputs = [write_csv(out / "short_run.csv", short), write_csv(out / "long_run.csv", long_rows)]
    for attribute in ("price", "fuel_economy"):
        seg_rows, avg = segment_table(theta, ds, draws, attribute, shock, base, threads)
        rows = []
        for rep in seg_rows + [avg]:
            if se_on and rep.segment in ds.segments:
                rep.se = se_of(lambda t, s=rep.segment, a=attribute: _report_values(
                    segment_table_row(t, ds, draws, s, a, shock, threads)))
            rows.append(rep.to_row())
        outputs.append(write_csv(out / f"segment_{attribute}.csv", rows))
    RunManifest("elasticity", _arguments(args), config.to_dict(), inputs, seed, R,
                outputs=outputs, notes=[LONG_RUN_CAVEAT]).write(out)
    print(f"wrote {len(outputs)} tables to {out}")
    return EXIT_OK


def segment_table_row(theta, ds, draws, segment, attribute, shock, threads):
    from .policy import segment_elasticity
    return segment_elasticity(theta, ds, draws, segment, attribute, shock, None, threads)


def _report_values(rep) -> dict:
    return {"fuel_elasticity": rep.elasticity, "fuel_elasticity_no_rebound": rep.no_rebound,
            "vkt_elasticity": rep.vkt_elasticity, "share_elasticity": rep.share_elasticity}


def cmd_feebate(args) -> int:
    ds, config, inputs = _load(args)
    model = _load_model(args, inputs)
    out = _out_dir(args)
    draws, R, seed = _simulation_draws(args, ds, model)
    theta = model.theta_hat
    anchor = args.anchor if args.anchor is not None else default_anchor(ds)
    if args.rebate_rate_usd is not None:
        try:
            rebate = config.usd_to_market(args.rebate_rate_usd)
        except DataError as exc:
            raise CliError(str(exc), EXIT_DATA) from exc
    else:
        rebate = args.rebate_rate
    base = baseline_fleet_state(theta, ds, draws, args.threads)
    try:
        if args.fee_rate is not None:
            pol = FeebatePolicy(anchor, rebate, args.fee_rate, args.tolerance)
            outcome = evaluate_policy(theta, ds, draws, pol, base, args.threads)
        else:
            outcome = solve_revenue_neutral(theta, ds, draws, anchor, rebate, args.tolerance,
                                            baseline=base, threads=args.threads)
    except FeebateConvergenceError as exc:
        raise CliError(f"{exc}; diagnostics: {json.dumps(exc.diagnostics)}",
                       EXIT_FEEBATE_CONVERGENCE) from exc
    except FeebateError as exc:
        raise CliError(str(exc), EXIT_FEEBATE_STRUCTURE) from exc
    seg_rows, summary = feebate_report(outcome, ds)
    summary_path = Path(args.summary_out) if args.summary_out else out / "feebate_summary.csv"
    seg_path = Path(args.segments_out) if args.segments_out else out / "feebate_segments.csv"
    outputs = [write_csv(summary_path, [summary]), write_csv(seg_path, seg_rows)]
    RunManifest("feebate", _arguments(args), config.to_dict(), inputs, seed, R,
                outputs=outputs).write(out)
    print(f"fee rate {outcome.fee_rate:.6g} for rebate rate {rebate:.6g}; "
          f"net revenue {outcome.net_revenue:.6g}")
    return EXIT_OK


def cmd_fit_report(args) -> int:
    ds, config, inputs = _load(args)
    model = _load_model(args, inputs)
    out = _out_dir(args)
    draws, R, seed = _simulation_draws(args, ds, model)
    segments = ds.segments
    if args.segments is not None:
        wanted = [s for s in args.segments.split(",") if s]
        if not wanted:
            raise CliError("empty segment filter", EXIT_USAGE)
        unknown = sorted(set(wanted) - set(segments))
        if unknown:
            raise CliError(f"unknown segments: {', '.join(unknown)}", EXIT_DATA)
        segments = [s for s in segments if s in wanted]
    state = baseline_fleet_state(model.theta_hat, ds, draws, args.threads)
    w = ds.weight
    obs_mass = np.bincount(ds.chosen, weights=w, minlength=ds.n_alternatives)
    obs_km = np.bincount(ds.chosen, weights=w * np.exp(ds.log_km) * config.km_scale,
                         minlength=ds.n_alternatives)
    rows = []
    for seg in segments:
        sel = ds.segment == seg
        om, pm = math.fsum(obs_mass[sel]), math.fsum(state.mass[sel])
        rows.append({
            "segment": seg,
            "observed_share": om / math.fsum(obs_mass),
            "predicted_share": pm / math.fsum(state.mass),
            "observed_mean_vkt": math.fsum(obs_km[sel]) / om if om > 0 else math.nan,
            "predicted_mean_vkt": math.fsum(state.vkt_mass[sel]) / pm if pm > 0 else math.nan,
            "observed_households": int(np.sum(sel[ds.chosen])),
        })
    # chi-square of observed counts against predicted shares, reported only
    n = sum(r["observed_households"] for r in rows)
    pred = np.array([r["predicted_share"] for r in rows])
    if pred.sum() > 0 and n > 0:
        expected = n * pred / pred.sum()
        chi2 = float(np.sum((np.array([r["observed_households"] for r in rows]) - expected) ** 2
                            / np.where(expected > 0, expected, np.inf)))
    else:
        chi2 = math.nan
    path = write_csv(out / "fit_segments.csv", rows)
    RunManifest("fit-report", _arguments(args), config.to_dict(), inputs, seed, R,
                outputs=[path], notes=[f"chi-square of segment counts: {chi2:.4f} "
                                       f"on {max(len(rows) - 1, 0)} df"]).write(out)
    print(f"wrote {path}")
    return EXIT_OK


def cmd_check_gradient(args) -> int:
    ds, config, inputs = _load(args)
    out = _out_dir(args)
    seed = args.seed if args.seed is not None else 0
    R = args.r or 50
    draws = make_drawset(ds.n_households, R, seed)
    rng = np.random.default_rng(seed)
    if args.model:
        x0 = _load_model(args, inputs).theta_hat.to_free()
    else:
        x0 = default_start(ds.n_terms, ds.term_names).to_free()
    rows, worst = [], 0.0
    for k in range(args.points):
        x = x0 + (rng.normal(0, 0.3, len(x0)) if k else 0.0)
        err = gradient_error(x, ds, draws, args.threads)
        worst = max(worst, err)
        rows.append({"point": k, "max_relative_error": err})
    path = write_csv(out / "gradient_check.csv", rows)
    RunManifest("check-gradient", _arguments(args), config.to_dict(), inputs, seed, R,
                outputs=[path]).write(out)
    print(f"max relative gradient error {worst:.3e} over {args.points} points")
    return EXIT_OK if worst <= args.tolerance else EXIT_GRADIENT


def gradient_error(x, ds, draws, threads: int = 1, step: float = 1e-6) -> float:
    """Largest relative gap between the analytic gradient and central differences."""
    g = wll(x, ds, draws, threads=threads).gradient
    fd = np.empty_like(g)
    for k in range(len(x)):
        e = np.zeros_like(x)
        e[k] = step
        fd[k] = (wll(x + e, ds, draws, False, threads).value
                 - wll(x - e, ds, draws, False, threads).value) / (2 * step)
    scale = np.maximum(np.abs(fd), 1.0)
    return float(np.max(np.abs(g - fd) / scale))


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    # global flags are accepted before or after the subcommand; SUPPRESS keeps
    # the subcommand's copy from overwriting a value given before it
    common = argparse.ArgumentParser(add_help=False, argument_default=argparse.SUPPRESS)
    common.add_argument("--config", type=Path, help="market TOML")
    common.add_argument("--seed", type=int)
    common.add_argument("--r", type=int, help="simulation draws per household")
    common.add_argument("--threads", type=int, help="worker cap; results do not depend on it")
    common.add_argument("--out-dir", help="output directory (default: current)")
    common.add_argument("-v", "--verbose", action="store_true")

    data = argparse.ArgumentParser(add_help=False)
    data.add_argument("--data", type=Path, help="directory with vehicles.csv, households.csv "
                      "and optionally market.toml")
    data.add_argument("--vehicles", type=Path)
    data.add_argument("--households", type=Path)
    data.add_argument("--lenient", action="store_true",
                      help="drop invalid household rows instead of failing")

    model = argparse.ArgumentParser(add_help=False)
    model.add_argument("--model", required=True, help="estimation.json from 'estimate'")

    p = argparse.ArgumentParser(prog="dcvkt", parents=[common],
                                description="Joint car choice and usage model.")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", parents=[common], help="generate a synthetic market")
    s.add_argument("--n", type=int, default=3000)
    s.add_argument("--j", type=int, default=10)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("estimate", parents=[common, data], help="fit the model")
    s.add_argument("--starts", type=int, default=1)
    s.set_defaults(func=cmd_estimate)

    s = sub.add_parser("elasticity", parents=[common, data, model],
                       help="short-run, long-run and segment elasticities")
    s.add_argument("--shock", type=float, default=0.05)
    s.add_argument("--se-draws", type=int, default=100,
                   help="parameter draws for standard errors (0 disables)")
    s.set_defaults(func=cmd_elasticity)

    s = sub.add_parser("feebate", parents=[common, data, model],
                       help="revenue-neutral feebate simulation")
    s.add_argument("--anchor", type=float, default=None,
                   help="km/litre pivot (default: sales-weighted fleet fuel economy)")
    g = s.add_mutually_exclusive_group()
    g.add_argument("--rebate-rate", type=float, default=0.0,
                   help="market currency per km/litre")
    g.add_argument("--rebate-rate-usd", type=float, default=None,
                   help="USD per km/litre, converted with the config usd_rate")
    s.add_argument("--fee-rate", type=float, default=None,
                   help="evaluate this fee rate instead of solving for neutrality")
    s.add_argument("--tolerance", type=float, default=1e-3)
    s.add_argument("--summary-out")
    s.add_argument("--segments-out")
    s.set_defaults(func=cmd_feebate)

    s = sub.add_parser("fit-report", parents=[common, data, model],
                       help="observed vs predicted shares and km by segment")
    s.add_argument("--segments", default=None, help="comma-separated segment filter")
    s.set_defaults(func=cmd_fit_report)

    s = sub.add_parser("check-gradient", parents=[common, data],
                       help="compare analytic and finite-difference gradients")
    s.add_argument("--model", default=None)
    s.add_argument("--points", type=int, default=3)
    s.add_argument("--tolerance", type=float, default=1e-6)
    s.set_defaults(func=cmd_check_gradient)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0) and EXIT_USAGE
    for key, value in GLOBAL_DEFAULTS.items():
        if not hasattr(args, key):
            setattr(args, key, value)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except DataError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except FileNotFoundError as exc:
        print(f"error: file not found: {exc.filename}", file=sys.stderr)
        return EXIT_IO
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
