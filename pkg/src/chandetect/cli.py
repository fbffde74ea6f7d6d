"""Command-line entry point: ``chandetect <subcommand> ...``.

Exit codes: 0 success, 2 invalid input, 3 numerical-domain failure.
Outputs go to ``--out`` when given, else to ``$CHANDETECT_OUTPUT_DIR`` when
set, else to stdout.  The resolved configuration is echoed to stderr as JSON.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import math
import os
import sys
from pathlib import Path

from .calibration import (DEFAULT_TRIALS, asymptotic_critical, critical_from_null,
                          null_distribution)
from .detectors import TestKind
from .errors import ConfigError, NumericalDomainError, ValidationError
from .power import boundary_signal, map_boundary_signal, mc_second_kind
from .priors import DEFAULT_TAIL_TOL, discrete_entropy_offset, discretize_prior, parse_prior_spec
from .simharness import (gaussian_tail_asymptote, gaussian_tail_check, gaussian_tail_exact,
                         null_statistic_distribution_check, pyke_ks_by_order, run_experiment,
                         tomllib, ExperimentConfig)
from .zeta import DEFAULT_SAMPLES, DEFAULT_TERMS, ZetaSampler, cached_zeta, cdf_table, zeta_quantile

OUTPUT_ENV = "CHANDETECT_OUTPUT_DIR"

# built-in defaults, applied after the config file and explicit flags
DEFAULTS = {
    "calibrate": {"test": "map", "prior": "uniform(0,1)", "alpha": [0.05],
                  "trials": DEFAULT_TRIALS, "seed": 0, "method": "mc",
                  "tail_tol": DEFAULT_TAIL_TOL, "zeta_samples": DEFAULT_SAMPLES,
                  "zeta_terms": DEFAULT_TERMS, "zeta_seed": 0},
    "zeta": {"samples": DEFAULT_SAMPLES, "terms": DEFAULT_TERMS, "seed": 0,
             "quantiles": [0.01, 0.05, 0.5, 0.95, 0.99], "cdf_grid": None},
    "power": {"test": "bayes", "prior": "uniform(0,1)", "alpha": 0.05,
              "signal_channel": [1], "signal_scale": 1.0, "trials": 10**5,
              "calibration_trials": DEFAULT_TRIALS, "seed": 0, "tail_tol": DEFAULT_TAIL_TOL,
              "sigma": 1.0},
    "check": {"trials": None, "seed": 0},
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(2, f"{self.prog}: error: {message}\n")


def _floats(text: str) -> list[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


def _grid(text: str) -> list[float]:
    parts = text.split(":")
    if len(parts) != 3:
        raise argparse.ArgumentTypeError("grid must be START:STOP:NUM")
    try:
        start, stop, num = float(parts[0]), float(parts[1]), int(parts[2])
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad grid {text!r}")
    if num < 1:
        raise argparse.ArgumentTypeError("grid needs NUM >= 1")
    if num == 1:
        return [start]
    return [start + (stop - start) * i / (num - 1) for i in range(num)]


def _common(p):
    p.add_argument("--config", metavar="PATH", help="TOML file of option values; flags override it")
    p.add_argument("--out", metavar="PATH", help="output file (directory for `experiment`)")
    p.add_argument("--workers", type=int, metavar="W", help="worker threads; results do not depend on it")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="chandetect",
                     description="MAP and Bayes detection of a signal in one of many Gaussian channels.")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)

    p = sub.add_parser("calibrate", help="critical levels of a test")
    p.add_argument("--test", choices=["map", "bayes"])
    p.add_argument("--prior", metavar="SPEC", help="uniform(a,b) | exponential(rate) | "
                   "triangular(left,mode,right) | tabulated(path)")
    p.add_argument("--n", type=int, metavar="N")
    p.add_argument("--alpha", type=float, action="append", metavar="A", help="repeatable")
    p.add_argument("--trials", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--method", choices=["mc", "asymptotic"])
    p.add_argument("--tail-tol", type=float, dest="tail_tol")
    p.add_argument("--zeta-samples", type=int, dest="zeta_samples")
    p.add_argument("--zeta-terms", type=int, dest="zeta_terms")
    p.add_argument("--zeta-seed", type=int, dest="zeta_seed")
    _common(p)

    p = sub.add_parser("zeta", help="quantiles and CDF of the limit variable")
    p.add_argument("--samples", type=int, metavar="M")
    p.add_argument("--terms", type=int, metavar="K")
    p.add_argument("--seed", type=int)
    p.add_argument("--quantiles", type=_floats, metavar="Q,Q,...",
                   help="upper-tail levels q with P{zeta >= t_q} = q")
    p.add_argument("--cdf-grid", type=_grid, dest="cdf_grid", metavar="START:STOP:NUM",
                   help="also write x,ecdf_zeta,cdf_inv_exp rows")
    _common(p)

    p = sub.add_parser("power", help="second-kind error at boundary signals")
    p.add_argument("--test", choices=["map", "bayes"])
    p.add_argument("--prior", metavar="SPEC")
    p.add_argument("--n", type=int, metavar="N")
    p.add_argument("--alpha", type=float, metavar="A")
    p.add_argument("--sigma", type=float)
    p.add_argument("--signal-channel", type=int, action="append", dest="signal_channel",
                   metavar="J", help="1-based channel, repeatable")
    p.add_argument("--signal-scale", type=float, dest="signal_scale", metavar="C",
                   help="amplitude = C x boundary amplitude")
    p.add_argument("--trials", type=int)
    p.add_argument("--calibration-trials", type=int, dest="calibration_trials")
    p.add_argument("--seed", type=int)
    p.add_argument("--tail-tol", type=float, dest="tail_tol")
    _common(p)

    p = sub.add_parser("check", help="large-sample oracle checks")
    p.add_argument("oracle", choices=["gaussian-tail", "pyke", "null-law"])
    p.add_argument("--x", type=_floats, metavar="X,X,...", help="gaussian-tail grid")
    p.add_argument("--n", type=int, metavar="N")
    p.add_argument("--k-max", type=int, dest="k_max", metavar="K")
    p.add_argument("--prior", metavar="SPEC", help="null-law prior")
    p.add_argument("--trials", type=int)
    p.add_argument("--seed", type=int)
    _common(p)

    p = sub.add_parser("experiment", help="run a TOML experiment config")
    p.add_argument("experiment_config", metavar="CONFIG")
    p.add_argument("--out", metavar="DIR")
    p.add_argument("--workers", type=int, metavar="W")
    return parser


def _resolve(command: str, args: argparse.Namespace) -> dict:
    cfg = dict(DEFAULTS.get(command, {}))
    if getattr(args, "config", None):
        try:
            with open(args.config, "rb") as fh:
                data = tomllib.load(fh)
        except (OSError, tomllib.TOMLDecodeError) as exc:
            raise ConfigError(f"cannot read {args.config}: {exc}") from None
        known = set(vars(args)) - {"config", "command"}
        unknown = {k.replace("-", "_") for k in data} - known
        if unknown:
            raise ConfigError(f"unknown keys in {args.config}: {sorted(unknown)}")
        cfg.update({k.replace("-", "_"): v for k, v in data.items()})
    cfg.update({k: v for k, v in vars(args).items()
                if v is not None and k not in ("config", "command")})
    cfg.setdefault("workers", 1)
    return cfg


def _open_out(cfg: dict, default_name: str):
    if cfg.get("out"):
        path = Path(cfg["out"])
    elif os.environ.get(OUTPUT_ENV):
        path = Path(os.environ[OUTPUT_ENV]) / default_name
    else:
        return None
    path.parent.mkdir(parents=True, exist_ok=True)
    return path


def _emit(cfg: dict, default_name: str, header, rows) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([repr(v) if isinstance(v, float) else v for v in row])
    path = _open_out(cfg, default_name)
    if path is None:
        sys.stdout.write(buf.getvalue())
    else:
        path.write_text(buf.getvalue())


def _require(cfg, *keys):
    missing = [k for k in keys if cfg.get(k) is None]
    if missing:
        raise ValidationError(f"missing required option(s): {', '.join('--' + k for k in missing)}")


def _prior(cfg):
    return discretize_prior(parse_prior_spec(cfg["prior"]), cfg["n"], cfg["tail_tol"])


def cmd_calibrate(cfg):
    _require(cfg, "n")
    kind = TestKind.parse(cfg["test"])
    prior = _prior(cfg)
    alphas = cfg["alpha"] if isinstance(cfg["alpha"], list) else [cfg["alpha"]]
    rows = []
    if cfg["method"] == "mc":
        null = null_distribution(kind, prior, cfg["trials"], cfg["seed"], cfg["workers"])
        for a in alphas:
            r = critical_from_null(null, a, prior.n, cfg["seed"], kind)
            rows.append([a, prior.n, "mc", r.log_threshold, r.ci_halfwidth, r.trials, cfg["seed"]])
    else:
        zq = None
        for a in alphas:
            if kind is TestKind.BAYES:
                dist = cached_zeta(ZetaSampler(cfg["zeta_terms"], cfg["zeta_seed"]),
                                   cfg["zeta_samples"], cfg["workers"])
                zq = zeta_quantile(dist, a)
            r = asymptotic_critical(kind, a, prior.n, discrete_entropy_offset(prior), zq)
            rows.append([a, prior.n, "asymptotic", r.log_threshold, 0.0, 0, cfg["seed"]])
    _emit(cfg, "calibrate.csv",
          ["alpha", "n", "method", "log_threshold", "ci_halfwidth", "trials", "seed"], rows)


def cmd_zeta(cfg):
    dist = cached_zeta(ZetaSampler(cfg["terms"], cfg["seed"]), cfg["samples"], cfg["workers"])
    rows = [[float(q), zeta_quantile(dist, q)] for q in cfg["quantiles"]]
    _emit(cfg, "zeta.csv", ["q", "t_q"], rows)
    if cfg.get("cdf_grid"):
        table = cdf_table(dist, cfg["cdf_grid"])
        cdf_cfg = dict(cfg)
        if cfg.get("out"):
            p = Path(cfg["out"])
            cdf_cfg["out"] = str(p.with_name(p.stem + "_cdf" + p.suffix))
        _emit(cdf_cfg, "zeta_cdf.csv", ["x", "ecdf_zeta", "cdf_inv_exp"],
              [[float(v) for v in row] for row in table])


def cmd_power(cfg):
    _require(cfg, "n")
    kind = TestKind.parse(cfg["test"])
    prior = _prior(cfg)
    a = cfg["alpha"]
    null = null_distribution(kind, prior, cfg["calibration_trials"], cfg["seed"], cfg["workers"])
    thr = critical_from_null(null, a, prior.n, cfg["seed"], kind).log_threshold
    chans = cfg["signal_channel"]
    chans = chans if isinstance(chans, list) else [chans]
    signals = []
    for j in chans:
        base = (map_boundary_signal(prior, a, j, cfg["sigma"]) if kind is TestKind.MAP
                else boundary_signal(prior, j, cfg["sigma"]))
        signals.append(type(base)(j, cfg["signal_scale"] * base.amplitude, cfg["sigma"]))
    rep = mc_second_kind(kind, prior, signals, thr, cfg["trials"], cfg["seed"], a, cfg["workers"])
    rows = [[e.signal.channel, e.signal.amplitude, e.beta, e.ci_halfwidth, rep.alpha_achieved]
            for e in rep.beta_estimates]
    _emit(cfg, "power.csv", ["channel", "amplitude", "beta", "ci", "alpha_achieved"], rows)


def cmd_check(cfg):
    oracle = cfg["oracle"]
    if oracle == "gaussian-tail":
        xs = cfg.get("x") or [2.0, 4.0, 6.0, 8.0]
        trials = cfg["trials"] or 10**7
        rel = gaussian_tail_check(xs, trials, cfg["seed"], cfg["workers"])
        rows = [[float(x), float(r), float(gaussian_tail_exact(x)), float(gaussian_tail_asymptote(x))]
                for x, r in zip(xs, rel)]
        _emit(cfg, "check_gaussian_tail.csv", ["x", "relative_error", "exact", "asymptote"], rows)
    elif oracle == "pyke":
        n = cfg.get("n") or 10**5
        ks = pyke_ks_by_order(n, cfg.get("k_max") if cfg.get("k_max") is not None else 20,
                              cfg["trials"] or 10**4, cfg["seed"], cfg["workers"])
        _emit(cfg, "check_pyke.csv", ["k", "ks"], [[k, float(d)] for k, d in enumerate(ks)])
    else:
        n = cfg.get("n") or 10**4
        prior = None
        if cfg.get("prior"):
            prior = discretize_prior(parse_prior_spec(cfg["prior"]), n)
        d = null_statistic_distribution_check(n, cfg["trials"] or 10**4, cfg["seed"], prior,
                                              workers=cfg["workers"])
        _emit(cfg, "check_null_law.csv", ["n", "ks"], [[n, math.nan if d is None else d]])


def cmd_experiment(args):
    cfg = ExperimentConfig.load(args.experiment_config)
    if args.out:
        out = Path(args.out)
    elif os.environ.get(OUTPUT_ENV):
        out = Path(os.environ[OUTPUT_ENV]) / cfg.name
    else:
        out = Path("runs") / cfg.name
    print(json.dumps({"command": "experiment", "config": cfg.raw, "out": str(out),
                      "workers": args.workers or 1}, sort_keys=True), file=sys.stderr)
    rec = run_experiment(cfg, out, args.workers or 1)
    print(str(rec.manifest))


COMMANDS = {"calibrate": cmd_calibrate, "zeta": cmd_zeta, "power": cmd_power, "check": cmd_check}


def main(argv=None) -> int:
    parser = build_parser()
    argv = sys.argv[1:] if argv is None else list(argv)
    if not argv:
        parser.print_usage(sys.stderr)
        return 2
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        if args.command == "experiment":
            cmd_experiment(args)
            return 0
        cfg = _resolve(args.command, args)
        if cfg["workers"] < 1:
            raise ValidationError("--workers must be >= 1")
        print(json.dumps({"command": args.command, **cfg}, sort_keys=True, default=str),
              file=sys.stderr)
        COMMANDS[args.command](cfg)
    except ValidationError as exc:
        print(f"chandetect: error: {exc}", file=sys.stderr)
        return 2
    except NumericalDomainError as exc:
        print(f"chandetect: numerical error: {exc}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
