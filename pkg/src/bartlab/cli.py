"""Command-line front end.

Every subcommand writes its outputs plus a ``manifest.json`` into ``--out``
(default: ``$BARTLAB_OUT`` or the current directory). Flags may also come
from ``--config FILE``, a plain ``key = value`` file whose keys are flag
names; flags given on the command line win.

Exit codes: 0 success, 1 invalid input, 2 numerical or diagnostic failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import platform
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy

from . import __version__, svg
from .compare import (BridgeConvergenceError, prior_width_sweep, sweep_columns, write_sweep_csv)
from .data import DataError, load_csv, permute_conditions, save_csv, synth_george
from .infer import (ConvergenceError, Design, ReplicateError, SamplerConfig, fit,
                    parameter_recovery, sbc)
from .model import PriorSpec, build_model
from .simulate import (QUANTILE_LEVELS, DesignMode, SimConfig, prior_predictive_flat,
                       prior_predictive_hier, write_hier_csv, write_summary_csv)

OUT_ENV = "BARTLAB_OUT"
EXIT_OK, EXIT_INVALID, EXIT_NUMERICAL = 0, 1, 2

log = logging.getLogger("bartlab")


class UsageError(Exception):
    pass


class NumericalFailure(Exception):
    """The command ran but its numerical checks failed; ``files`` were
    still written."""

    def __init__(self, message, files):
        super().__init__(message)
        self.files = files


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


@dataclass
class RunManifest:
    command: str
    config: dict
    seed: int | None
    versions: dict = field(default_factory=lambda: {
        "bartlab": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
        "python": platform.python_version()})
    outputs: list = field(default_factory=list)
    wall_clock: float = 0.0
    status: str = "ok"

    def write(self, out: Path) -> Path:
        missing = [f for f in self.outputs if not (out / f).exists()]
        if missing:
            raise RuntimeError(f"manifest lists missing outputs: {missing}")
        path = out / "manifest.json"
        path.write_text(json.dumps(self.__dict__, indent=2, sort_keys=True, default=str) + "\n",
                        encoding="utf-8")
        return path


# -- flag parsing helpers --------------------------------------------------------


def _float_list(text: str) -> list[float]:
    try:
        return [float(x) for x in str(text).split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _positive_int(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {v}")
    return v


def _nonneg_int(text: str) -> int:
    v = int(text)
    if v < 0:
        raise argparse.ArgumentTypeError(f"must be >= 0, got {v}")
    return v


def _positive_float(text: str) -> float:
    v = float(text)
    if not v > 0:
        raise argparse.ArgumentTypeError(f"must be > 0, got {v}")
    return v


def read_config(path) -> dict:
    """Parse a ``key = value`` file; ``#`` starts a comment."""
    cfg = {}
    for n, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{n}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        cfg[key.lstrip("-").replace("-", "_")] = value
    return cfg


def _common(p: argparse.ArgumentParser, seed: int = 1) -> None:
    p.add_argument("--seed", type=int, default=seed)
    p.add_argument("--out", default=None, help=f"output directory (default ${OUT_ENV} or .)")
    p.add_argument("--workers", type=_positive_int, default=1)
    p.add_argument("--config", default=None, help="key = value file of flag defaults")


def _sampler_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--chains", type=_positive_int, default=4)
    p.add_argument("--warmup", type=_nonneg_int, default=2000)
    p.add_argument("--samples", type=_positive_int, default=2000)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="bartlab", description="Bayesian workflow for the balloon analogue risk task.")
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("prior-check", help="prior predictive pump statistics")
    p.add_argument("--model", choices=["flat", "hier"], default="flat")
    p.add_argument("--design", choices=["likelihood", "experiment", "both"], default="both")
    p.add_argument("--upper", type=_positive_float, default=10.0)
    p.add_argument("--n-sims", type=int, default=200)
    p.add_argument("--p", type=_float_list, default="0.10,0.15,0.20")
    p.add_argument("--trials", type=_positive_int, default=30)
    p.add_argument("--max-pumps", type=_positive_int, default=500)
    p.add_argument("--no-svg", action="store_true")
    _common(p, seed=20200601)

    p = sub.add_parser("fit", help="sample a posterior")
    p.add_argument("--model", choices=["flat", "hier"], required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--upper", type=_positive_float, default=10.0)
    _sampler_flags(p)
    _common(p)

    p = sub.add_parser("compare", help="Bayes factors and PSIS-LOO across prior widths")
    p.add_argument("--data", required=True)
    p.add_argument("--uppers", type=_float_list, default="10,20,50")
    p.add_argument("--method", choices=["bf", "loo", "both"], default="both")
    p.add_argument("--no-svg", action="store_true")
    _sampler_flags(p)
    _common(p)

    p = sub.add_parser("permute", help="shuffle trials between conditions")
    p.add_argument("--data", required=True)
    p.add_argument("--name", default="permuted.csv")
    _common(p)

    p = sub.add_parser("synth", help="write the seeded synthetic single-participant dataset")
    p.add_argument("--trials", type=_positive_int, default=30)
    p.add_argument("--name", default="george.csv")
    _common(p)

    p = sub.add_parser("recover", help="parameter recovery from simulated datasets")
    p.add_argument("--model", choices=["flat", "hier"], default="flat")
    p.add_argument("--truth", default=None,
                   help="comma-separated name=value pairs; defaults to built-in values")
    p.add_argument("--replicates", type=_nonneg_int, default=20)
    p.add_argument("--upper", type=_positive_float, default=10.0)
    p.add_argument("--p", type=_float_list, default="0.10,0.15,0.20")
    p.add_argument("--trials", type=_positive_int, default=30)
    _sampler_flags(p)
    _common(p)

    p = sub.add_parser("sbc", help="simulation-based calibration")
    p.add_argument("--model", choices=["flat", "hier"], default="flat")
    p.add_argument("--replicates", type=_positive_int, default=200)
    p.add_argument("--rank-draws", type=_positive_int, default=99)
    p.add_argument("--bins", type=_positive_int, default=20)
    p.add_argument("--upper", type=_positive_float, default=10.0)
    p.add_argument("--p", type=_float_list, default="0.10,0.15,0.20")
    p.add_argument("--trials", type=_positive_int, default=30)
    _sampler_flags(p)
    _common(p)
    return parser


def _config_path(argv) -> str | None:
    for i, a in enumerate(argv):
        if a == "--config" and i + 1 < len(argv):
            return argv[i + 1]
        if a.startswith("--config="):
            return a.split("=", 1)[1]
    return None


def parse_args(argv) -> argparse.Namespace:
    argv = [str(a) for a in argv]
    parser = build_parser()
    choices = parser._subparsers._group_actions[0].choices
    command = next((a for a in argv if a in choices), None)
    path = _config_path(argv)
    # config values become subcommand defaults before parsing, so a config
    # file can supply required flags
    if command and path:
        try:
            defaults = read_config(path)
        except OSError as exc:
            raise UsageError(f"cannot read config file: {exc}") from None
        sub = choices[command]
        known = {a.dest for a in sub._actions}
        unknown = set(defaults) - known
        if unknown:
            raise UsageError(f"unknown config keys: {', '.join(sorted(unknown))}")
        for action in sub._actions:
            if action.dest in defaults:
                action.required = False
                if isinstance(action, argparse._StoreTrueAction):
                    defaults[action.dest] = defaults[action.dest].lower() in ("1", "true", "yes", "on")
        sub.set_defaults(**defaults)
    return parser.parse_args(argv)


def _out_dir(args) -> Path:
    out = Path(args.out or os.environ.get(OUT_ENV) or ".")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _sampler_cfg(args) -> SamplerConfig:
    return SamplerConfig(n_chains=args.chains, warmup=args.warmup, samples=args.samples, seed=args.seed)


def _load(path) -> object:
    if not Path(path).is_file():
        raise UsageError(f"data file not found: {path}")
    return load_csv(path)


def _write_rows(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([f"{v:.17g}" if isinstance(v, float) else v for v in row])


# -- subcommands -----------------------------------------------------------------


def cmd_prior_check(args, out: Path) -> list[str]:
    if args.n_sims < 1:
        raise UsageError("--n-sims must be >= 1")
    cfg = SimConfig(n_sims=args.n_sims, trials_per_sim=args.trials, pop_probs=tuple(args.p),
                    seed=args.seed, max_pumps=args.max_pumps, workers=args.workers)
    modes = list(DesignMode) if args.design == "both" else [DesignMode(args.design)]
    prior = PriorSpec(args.upper)
    files = []
    for mode in modes:
        stem = f"prior_check_{args.model}_{mode.value}"
        if args.model == "flat":
            summaries = prior_predictive_flat(prior, cfg, mode)
            write_summary_csv(summaries, out / f"{stem}.csv")
            x = [s.p for s in summaries]
            bands = np.stack([s.quantiles for s in summaries], axis=1)
            xlabel, ylabel = "pop probability", "mean pumps per participant"
        else:
            result = prior_predictive_hier(prior, cfg, mode, n_conditions=max(len(cfg.pop_probs), 2))
            write_hier_csv(result, out / f"{stem}.csv")
            x = np.arange(1, result.mean_diff.shape[1] + 1)
            bands = result.quantiles("mean")
            xlabel, ylabel = "condition", "mean-pump difference from condition 0"
        files.append(f"{stem}.csv")
        if not args.no_svg:
            levels = ", ".join(f"{q:g}" for q in QUANTILE_LEVELS)
            svg.ribbon_plot(out / f"{stem}.svg", x, bands, title=f"{mode.value} mode, U={args.upper:g}",
                            xlabel=xlabel, ylabel=f"{ylabel} (quantiles {levels})")
            files.append(f"{stem}.svg")
    return files


def cmd_fit(args, out: Path) -> list[str]:
    dataset = _load(args.data)
    model = build_model(args.model, dataset, PriorSpec(args.upper))
    cfg = _sampler_cfg(args)
    samples = fit(model, cfg=cfg, check=False)
    samples.write_csv(out / "posterior.csv")
    diag = samples.diagnostics
    failures = diag.failures(cfg.rhat_max, cfg.ess_min) if diag else []
    report = {"model": args.model, **(diag.to_dict() if diag else {}), "failures": failures}
    (out / "diagnostics.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n",
                                          encoding="utf-8")
    files = ["posterior.csv", "diagnostics.json"]
    if failures:
        raise NumericalFailure("diagnostics failed: " + "; ".join(failures), files)
    return files


def cmd_compare(args, out: Path) -> list[str]:
    dataset = _load(args.data)
    rows = prior_width_sweep(dataset, args.uppers, _sampler_cfg(args), workers=args.workers,
                             method=args.method)
    write_sweep_csv(rows, out / "sweep.csv", args.method)
    files = ["sweep.csv"]
    if not args.no_svg:
        x = [r.upper for r in rows]
        if args.method != "loo":
            svg.line_plot(out / "sweep_bf.svg", x, {"log BF (hier vs flat)": [r.log_bf for r in rows]},
                          title="Bayes factor across prior widths", xlabel="prior upper bound U",
                          ylabel="log Bayes factor")
            files.append("sweep_bf.svg")
        if args.method != "bf":
            svg.line_plot(out / "sweep_loo.svg", x, {"elpd hier - flat": [r.elpd_diff for r in rows]},
                          errors={"elpd hier - flat": [r.se_diff for r in rows]},
                          title="LOO across prior widths", xlabel="prior upper bound U",
                          ylabel="elpd difference")
            files.append("sweep_loo.svg")
    bad = [f"U={r.upper:g} {m}: {e}" for r in rows for m, e in r.errors.items()]
    if bad:
        raise NumericalFailure("; ".join(bad), files)
    return files


def cmd_permute(args, out: Path) -> list[str]:
    dataset = _load(args.data)
    save_csv(permute_conditions(dataset, args.seed), out / args.name)
    return [args.name]


def cmd_synth(args, out: Path) -> list[str]:
    save_csv(synth_george(args.seed, trials_per_condition=args.trials), out / args.name)
    return [args.name]


DEFAULT_TRUTH = {
    "flat": {"gamma_plus": 0.5, "beta": 0.7},
    "hier": {"mu_gamma": 0.6, "sigma_gamma": 0.4, "mu_beta": 0.7, "sigma_beta": 0.2,
             "gamma_plus[0]": 0.1, "gamma_plus[1]": 0.5, "gamma_plus[2]": 1.2,
             "beta[0]": 0.7, "beta[1]": 0.7, "beta[2]": 0.7},
}


def _parse_truth(text, model: str, names) -> dict:
    if text is None:
        truth = DEFAULT_TRUTH[model]
    else:
        truth = {}
        for item in text.split(","):
            if "=" not in item:
                raise UsageError(f"--truth entries must be name=value, got {item!r}")
            k, v = item.split("=", 1)
            truth[k.strip()] = float(v)
    missing = set(names) - set(truth)
    if missing:
        raise UsageError(f"--truth is missing {', '.join(sorted(missing))}")
    return truth


def cmd_recover(args, out: Path) -> list[str]:
    design = Design(tuple(args.p), args.trials)
    names = build_model(args.model, design.empty_dataset(), PriorSpec(args.upper)).param_names
    truth = _parse_truth(args.truth, args.model, names)
    report = parameter_recovery(args.model, truth, design, args.replicates, _sampler_cfg(args),
                                PriorSpec(args.upper), workers=args.workers)
    _write_rows(out / "recovery.csv", ["parameter", "truth", "bias", "rmse", "coverage"],
                [[r["parameter"], r["truth"], r["bias"], r["rmse"], r["coverage"]] for r in report.rows()])
    return ["recovery.csv"]


def cmd_sbc(args, out: Path) -> list[str]:
    design = Design(tuple(args.p), args.trials)
    result = sbc(args.model, design, args.replicates, _sampler_cfg(args), PriorSpec(args.upper),
                 n_rank_draws=args.rank_draws, n_bins=args.bins, workers=args.workers)
    _write_rows(out / "sbc_ranks.csv", ["replicate", *result.names],
                [[i, *map(int, r)] for i, r in enumerate(result.ranks)])
    hist = result.histogram
    pvals = result.p_values
    _write_rows(out / "sbc_summary.csv", ["parameter", "chi2_p_value", "uniform", *[f"bin{b}" for b in range(result.n_bins)]],
                [[n, float(pvals[j]), bool(pvals[j] > 0.01), *map(int, hist[:, j])]
                 for j, n in enumerate(result.names)])
    log.info("sbc: %d replicates kept, %d dropped", len(result.ranks), result.n_failed)
    return ["sbc_ranks.csv", "sbc_summary.csv"]


COMMANDS = {
    "prior-check": cmd_prior_check,
    "fit": cmd_fit,
    "compare": cmd_compare,
    "permute": cmd_permute,
    "synth": cmd_synth,
    "recover": cmd_recover,
    "sbc": cmd_sbc,
}


def main(argv=None) -> int:
    try:
        args = parse_args(sys.argv[1:] if argv is None else argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_INVALID
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    start = time.perf_counter()
    config = {k: v for k, v in vars(args).items() if k not in ("verbose",)}
    manifest = RunManifest(args.command, config, getattr(args, "seed", None))
    code = EXIT_OK
    try:
        out = _out_dir(args)
        manifest.outputs = COMMANDS[args.command](args, out)
    except NumericalFailure as exc:
        print(f"bartlab {args.command}: {exc}", file=sys.stderr)
        manifest.status = "numerical failure"
        manifest.outputs = exc.files
        code = EXIT_NUMERICAL
    except (UsageError, DataError, ValueError, OSError) as exc:
        print(f"bartlab {args.command}: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (ConvergenceError, BridgeConvergenceError, ReplicateError, FloatingPointError,
            np.linalg.LinAlgError) as exc:
        print(f"bartlab {args.command}: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    manifest.wall_clock = time.perf_counter() - start
    manifest.write(out)
    return code


if __name__ == "__main__":
    sys.exit(main())
