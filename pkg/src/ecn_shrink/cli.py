"""Command-line interface: ``fit``, ``posterior``, ``simulate`` and ``diagnose``.

Exit codes: 0 success, 2 input or configuration error, 3 fit did not converge
(the fit file is still written).
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from pathlib import Path

import numpy as np

from . import gdbasis
from .cash import CashConfig, CashFit, Dataset, MixturePrior, fit_cash, fitted_noise_sd, fixed_fit
from .ecn import ConstraintGrid, EcnPenalty, fit_ecn
from .posterior import summarize
from .simlab import NoiseModel, Scenario, run_batch, summarize_batch

log = logging.getLogger("ecn_shrink")

EXIT_OK, EXIT_INPUT, EXIT_NONCONVERGED = 0, 2, 3
FORMAT_VERSION = 1
HEADERS = {("id", "x", "s"), ("id", "z")}

_CONFIG_KEYS = {"penalty", "lambda0", "grid", "max_outer_iters", "outer_tol", "sigma_grid", "seed", "output"}
_SCENARIO_KEYS = {"g1", "pi0", "p", "noise", "seed", "replicates", "level", "config"}


class InputError(ValueError):
    """Bad input file, configuration or scenario; maps to exit code 2."""


def fmt(v) -> str:
    return "%.17g" % v


# ---- input ---------------------------------------------------------------


def read_table(path):
    """Parse an InputTable; returns (ids, x, s, z_only)."""
    try:
        lines = Path(path).read_text().splitlines()
    except OSError as exc:
        raise InputError(f"cannot read {path}: {exc}") from None
    if not lines:
        raise InputError(f"{path}: empty file")
    header = tuple(lines[0].split("\t"))
    if header not in HEADERS:
        raise InputError(f"{path}:1: header must be 'id\\tx\\ts' or 'id\\tz', got {lines[0]!r}")
    ids, cols = [], [[] for _ in header[1:]]
    for n, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        fields = line.split("\t")
        if len(fields) != len(header):
            raise InputError(f"{path}:{n}: expected {len(header)} tab-separated fields, got {len(fields)}")
        ids.append(fields[0])
        for col, raw, name in zip(cols, fields[1:], header[1:]):
            try:
                v = float(raw)
            except ValueError:
                raise InputError(f"{path}:{n}: {name} = {raw!r} is not a number") from None
            if not math.isfinite(v):
                raise InputError(f"{path}:{n}: {name} must be finite")
            if name == "s" and v <= 0:
                raise InputError(f"{path}:{n}: s must be positive")
            col.append(v)
    arrays = [np.array(c, dtype=float) for c in cols]
    if header == ("id", "z"):
        return ids, arrays[0], np.ones_like(arrays[0]), True
    return ids, arrays[0], arrays[1], False


def _load_json(path, what):
    try:
        return json.loads(Path(path).read_text())
    except OSError as exc:
        raise InputError(f"cannot read {what} {path}: {exc}") from None
    except json.JSONDecodeError as exc:
        raise InputError(f"{what} {path} is not valid JSON: {exc}") from None


def _reject_unknown(d, allowed, what):
    if not isinstance(d, dict):
        raise InputError(f"{what} must be a JSON object")
    extra = set(d) - allowed
    if extra:
        raise InputError(f"unknown {what} key(s): {', '.join(sorted(extra))}")


def parse_config(d: dict | None) -> CashConfig:
    """Build a CashConfig from a RunConfig document; unknown keys are errors."""
    d = d or {}
    _reject_unknown(d, _CONFIG_KEYS, "config")
    try:
        pen_d = d.get("penalty", {})
        _reject_unknown(pen_d, {"gamma", "rho", "L"}, "penalty")
        grid_d = d.get("grid", {})
        _reject_unknown(grid_d, {"lo", "hi", "step"}, "grid")
        sg = d.get("sigma_grid")
        return CashConfig(
            pen=EcnPenalty(**pen_d),
            lambda0=float(d.get("lambda0", 10.0)),
            grid=ConstraintGrid(**grid_d),
            max_outer_iters=int(d.get("max_outer_iters", 50)),
            outer_tol=float(d.get("outer_tol", 1e-6)),
            sigma_grid=tuple(float(v) for v in sg) if sg is not None else None,
        )
    except (TypeError, ValueError) as exc:
        raise InputError(f"invalid config: {exc}") from None


def parse_scenario(d: dict):
    """(Scenario, replicates, level, CashConfig) from a scenario document."""
    _reject_unknown(d, _SCENARIO_KEYS, "scenario")
    try:
        scenario = Scenario(
            g1_name=d.get("g1", "Gaussian"),
            pi0=float(d.get("pi0", 0.9)),
            p=int(d.get("p", 2000)),
            noise=NoiseModel.from_dict(d.get("noise", {"model": "iid"})),
            seed=int(d.get("seed", 1)),
        )
        replicates = int(d.get("replicates", 50))
        level = float(d.get("level", 0.1))
    except (TypeError, ValueError) as exc:
        raise InputError(f"invalid scenario: {exc}") from None
    if replicates < 1:
        raise InputError("replicates must be at least 1")
    if not 0 < level <= 1:
        raise InputError("level must lie in (0, 1]")
    return scenario, replicates, level, parse_config(d.get("config"))


# ---- fit files -----------------------------------------------------------


def _num(v):
    v = float(v)
    return v if math.isfinite(v) else None


def fit_document(omega, sigma_grid, pi, converged, trace, n_observations: int) -> dict:
    return {
        "format_version": FORMAT_VERSION,
        "n_observations": int(n_observations),
        "omega": [_num(v) for v in omega],
        "sigma_grid": [_num(v) for v in sigma_grid],
        "pi": [_num(v) for v in pi],
        "converged": bool(converged),
        "objective_trace": [_num(v) for v in trace],
        "fitted_noise_sd": _num(fitted_noise_sd(np.asarray(omega))),
    }


def write_json(doc, path):
    Path(path).write_text(json.dumps(doc, indent=2, allow_nan=False) + "\n")


def load_fit(path, data: Dataset) -> CashFit:
    doc = _load_json(path, "fit file")
    if doc.get("format_version") != FORMAT_VERSION:
        raise InputError(f"unsupported fit format_version {doc.get('format_version')!r}")
    try:
        omega = np.array(doc["omega"], dtype=float)
        sigma_grid = np.array(doc["sigma_grid"], dtype=float)
        prior = MixturePrior(sigma_grid, np.array(doc["pi"], dtype=float))
    except (KeyError, TypeError, ValueError) as exc:
        raise InputError(f"malformed fit file {path}: {exc}") from None
    if sigma_grid.size == 0:
        raise InputError(f"{path} holds a noise-only fit; posterior summaries need a fitted prior")
    n = doc.get("n_observations")
    if n is not None and n != len(data):
        raise InputError(f"{path} was fitted on {n} observations but the input has {len(data)}")
    return fixed_fit(prior, omega, data, doc.get("objective_trace", []),
                     bool(doc.get("converged", True)))


def write_tsv(path, header, rows):
    with open(path, "w", newline="\n") as fh:
        fh.write("\t".join(header) + "\n")
        for row in rows:
            fh.write("\t".join(v if isinstance(v, str) else fmt(v) for v in row) + "\n")


# ---- commands ------------------------------------------------------------


def cmd_fit(args) -> int:
    ids, x, s, z_only = read_table(args.input)
    cfg = parse_config(_load_json(args.config, "config") if args.config else None)
    try:
        if z_only:
            fit = fit_ecn(x, cfg.pen, cfg.grid)
            doc = fit_document(fit.omega, [], [1.0], fit.converged, [fit.objective], len(x))
        else:
            fit = fit_cash(Dataset(x, s), cfg)
            doc = fit_document(fit.omega, fit.prior.sigma_grid, fit.prior.pi, fit.converged, fit.trace,
                               len(x))
    except ValueError as exc:
        raise InputError(str(exc)) from None
    write_json(doc, args.output)
    if not fit.converged:
        log.error("fit did not converge; wrote best iterate to %s", args.output)
        return EXIT_NONCONVERGED
    return EXIT_OK


def cmd_posterior(args) -> int:
    ids, x, s, _ = read_table(args.input)
    data = Dataset(x, s)
    fit = load_fit(args.fit, data)
    summary = summarize(fit, data)
    rows = (
        (i, pm, lf, q, ls, sv, "1" if q <= args.level else "0")
        for i, pm, lf, q, ls, sv in zip(ids, summary.post_mean, summary.lfdr, summary.qvalue,
                                        summary.lfsr, summary.svalue)
    )
    write_tsv(args.output, ("id", "post_mean", "lfdr", "qvalue", "lfsr", "svalue", "significant"), rows)
    return EXIT_OK


def cmd_simulate(args) -> int:
    doc = _load_json(args.config, "scenario")
    if args.seed is not None:
        doc = {**doc, "seed": args.seed}
    if args.level is not None:
        doc = {**doc, "level": args.level}
    scenario, replicates, level, cfg = parse_scenario(doc)
    out = Path(args.output)
    out.mkdir(parents=True, exist_ok=True)
    results = run_batch(scenario, replicates, level, cfg)

    rows = []
    for r in results:
        for method, o in r.methods.items():
            rows.append((str(r.replicate), method, o.fdp, o.tdp, str(o.n_discoveries),
                         str(r.n_signals), r.noise_sd, o.error))
    write_tsv(out / "replicates.tsv",
              ("replicate", "method", "fdp", "tdp", "n_discoveries", "n_signals", "noise_sd", "error"),
              rows)
    summary = summarize_batch(results, level)
    stats = ("mean_fdp", "median_fdp", "fdp_p05", "fdp_p95", "rmse_fdp", "mean_tdp")
    write_tsv(out / "summary.tsv", ("method", "n", *stats, "n_errors"),
              ((m, str(v["n"]), *(v[k] for k in stats), str(v["n_errors"])) for m, v in summary.items()))
    return EXIT_OK


def diagnose_rows(z, omega, bins: int = 100, lo: float = -10.0, hi: float = 10.0, n_points: int = 1000):
    """Long-format rows (series, x_lo, x_hi, value) for a histogram/density overlay.

    The two edge bins also count z-scores beyond the range, so counts sum to len(z).
    """
    outside = int(np.count_nonzero((z < lo) | (z > hi)))
    if outside:
        log.warning("%d z-score(s) fall outside [%g, %g]; counted in the edge bins", outside, lo, hi)
    counts, edges = np.histogram(np.clip(z, lo, hi), bins=bins, range=(lo, hi))
    rows = [("histogram", a, b, float(c)) for a, b, c in zip(edges[:-1], edges[1:], counts)]
    grid = np.linspace(lo, hi, n_points)
    phi = gdbasis.normal_pdf(grid)
    fitted = gdbasis.expansion_density(omega, grid)
    rows += [("phi", t, t, v) for t, v in zip(grid, phi)]
    rows += [("fitted", t, t, v) for t, v in zip(grid, fitted)]
    return rows


def cmd_diagnose(args) -> int:
    _, x, s, _ = read_table(args.input)
    doc = _load_json(args.fit, "fit file")
    try:
        omega = np.array(doc["omega"], dtype=float)
    except (KeyError, TypeError, ValueError) as exc:
        raise InputError(f"malformed fit file {args.fit}: {exc}") from None
    write_tsv(args.output, ("series", "x_lo", "x_hi", "value"), diagnose_rows(x / s, omega))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ecn-shrink", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fit", help="fit prior and noise density, write a JSON fit file")
    p.add_argument("--input", required=True)
    p.add_argument("--config")
    p.add_argument("--output", required=True)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("posterior", help="posterior summaries as TSV")
    p.add_argument("--input", required=True)
    p.add_argument("--fit", required=True)
    p.add_argument("--level", type=float, default=0.1)
    p.add_argument("--output", required=True)
    p.set_defaults(func=cmd_posterior)

    p = sub.add_parser("simulate", help="run a seeded simulation batch")
    p.add_argument("--config", required=True, help="scenario JSON")
    p.add_argument("--output", required=True, help="output directory")
    p.add_argument("--seed", type=int)
    p.add_argument("--level", type=float)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("diagnose", help="histogram and density curves for plotting")
    p.add_argument("--input", required=True)
    p.add_argument("--fit", required=True)
    p.add_argument("--output", required=True)
    p.set_defaults(func=cmd_diagnose)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse uses 2 for usage errors already; keep --help at 0
        return int(exc.code or 0)
    try:
        return args.func(args)
    except InputError as exc:
        log.error("%s", exc)
        return EXIT_INPUT
    except OSError as exc:
        log.error("%s", exc)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
