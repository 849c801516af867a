"""Command-line entry point: ``superad <verb> [options]``."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import os
import sys

import numpy as np

from . import harness
from .dynamics import StrangPropagator, band_amplitudes, default_t0, prepare_incoming
from .superadiabatic import NAMES, coefficient_tables
from .transition import TransitionParams, formula_transmitted, optimal_representation


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for r in rows:
            w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in r])


def _out_dir(path):
    os.makedirs(path, exist_ok=True)
    return path


def _manifest(out_dir, config, **extra):
    data = {"config_hash": config.digest() if config else None}
    data.update(extra)
    with open(os.path.join(out_dir, "manifest.json"), "w") as fh:
        json.dump(data, fh, indent=2, sort_keys=True, default=float)


def _config(args, default=None):
    if args.config:
        return harness.RunConfig.load(args.config)
    if default is None:
        raise SystemExit("--config is required for this command")
    return default


def _parse_range(text):
    """'0..5' -> [0..5]; '1,3' -> [1, 3]."""
    if ".." in text:
        a, b = text.split("..")
        return list(range(int(a), int(b) + 1))
    return [int(v) for v in text.split(",")]


def cmd_simulate(args):
    cfg = _config(args)
    out = _out_dir(args.out)
    model, spec = cfg.model, cfg.packet
    norm = harness._predicted_norm(cfg)
    t0 = cfg.t0 if cfg.t0 is not None else harness._transient_safe_t0(cfg, norm)
    t_end = cfg.t_final if cfg.t_final is not None else -t0
    grid = harness._grid_for(cfg, spec, model, t0, t_end)
    dt = cfg.dt or cfg.epsilon / 40
    steps = int(math.ceil((t_end - t0) / dt))
    dt = (t_end - t0) / steps
    rows = []

    def observe(s):
        _, minus = band_amplitudes(s, model)
        rows.append((s.time, grid.norm(minus)))

    state = prepare_incoming(spec, model, grid, t0)
    observe(state)
    prop = StrangPropagator(model, grid, dt, harness._precision_for(cfg, norm))
    final = prop.evolve(state, steps, observe, harness.HISTORY_EVERY)
    order = np.argsort(grid.k)
    up, down = grid.forward(final.up)[order], grid.forward(final.down)[order]
    _write_csv(os.path.join(out, "spectrum.csv"), ("k", "re_up", "im_up", "re_down", "im_down"),
               zip(grid.k[order], up.real, up.imag, down.real, down.imag))
    _write_csv(os.path.join(out, "history_n0.csv"), ("t", "norm_lower"), rows)
    _manifest(out, cfg, grid={"x_min": grid.x_min, "x_max": grid.x_max, "n_points": grid.n_points},
              dt=dt, solver_self_error=None, t_final=final.time)
    return 0


def cmd_formula(args):
    cfg = _config(args)
    model, spec = cfg.model, cfg.packet
    t0 = cfg.t0 if cfg.t0 is not None else default_t0(spec, model)
    grid = harness._grid_for(cfg, spec, model, t0, -t0)
    t_report = cfg.t_final if cfg.t_final is not None else 0.0
    res = formula_transmitted(spec.psi_hat, TransitionParams.from_model(model, cfg.epsilon, t_report),
                              grid=grid, indicator=cfg.indicator)
    order = np.argsort(res.k)
    v = res.psi_minus_hat[order]
    _write_csv(args.out, ("k", "re", "im", "abs"), zip(res.k[order], v.real, v.imag, np.abs(v)))
    return 0


def cmd_history(args):
    cfg = _config(args, harness.histories_config())
    out = _out_dir(args.out)
    n_range = _parse_range(args.n)
    curves = harness.run_histories(cfg, n_range)
    for c in curves:
        _write_csv(os.path.join(out, f"history_n{c.n}.csv"), ("t", "norm_lower"), zip(c.times, c.norms))
        if c.model_prediction is not None:
            _write_csv(os.path.join(out, "history_model.csv"), ("t", "norm_model"),
                       zip(c.times, c.model_prediction))
    meta = curves[0].meta
    _manifest(out, cfg, grid=meta["grid"], dt=meta["dt"], solver_self_error=None, n_range=n_range)
    return 0


def cmd_optimal_n(args):
    cfg = _config(args, harness.histories_config())
    opt = optimal_representation(cfg.p0, cfg.sigma2, cfg.model, cfg.epsilon)
    print(json.dumps({"eta_star": opt.eta_star, "k_star": opt.k_star, "n_star": opt.n_star}))
    return 0


def cmd_sweep(args):
    cfg = _config(args)
    out = _out_dir(args.out)
    rejected = []
    records = harness.run_sweep(harness.sweep_configs(cfg), threads=args.threads, rejected=rejected)
    _write_csv(os.path.join(out, "sweep.csv"), harness.ComparisonRecord.HEADER, (r.row() for r in records))
    for r in records:
        k = r.meta["k"]
        order = np.argsort(k)
        f, n = r.meta["formula"][order], r.meta["numeric"][order]
        name = f"spectrum_p{r.p0:g}_eps{r.epsilon:g}.csv"
        _write_csv(os.path.join(out, name), ("k", "re_formula", "im_formula", "re_numeric", "im_numeric"),
                   zip(k[order], f.real, f.imag, n.real, n.imag))
    _manifest(out, cfg, points=[{"epsilon": r.epsilon, "p0": r.p0, "grid": r.meta["grid"], "dt": r.meta["dt"],
                                 "solver_self_error": r.solver_self_error, "precision": r.meta["precision"],
                                 "wall_time_s": r.wall_time_s}
                                for r in records],
              rejected=[{"epsilon": c.epsilon, "p0": c.p0, "diagnostics": d} for c, d in rejected])
    return 0 if not rejected else 1


def cmd_recursion_table(args):
    cfg = harness.RunConfig.load(args.config) if args.config else harness.sweep_config()
    q = np.linspace(args.q_min, args.q_max, args.samples)
    tab = coefficient_tables(cfg.model, args.n_max)
    rows = []
    for n in range(1, args.n_max + 1):
        for m in range(n + 1):
            vals = [tab.sample(name, n, m, q) for name in NAMES]
            for i, qi in enumerate(q):
                row = [n, m, qi]
                for v in vals:
                    row += [v[i].real, v[i].imag]
                rows.append(row)
    header = ("n", "m", "q") + tuple(f"{p}({c})" for c in NAMES for p in ("re", "im"))
    _write_csv(args.out, header, rows)
    return 0


def cmd_verify(args):
    report = harness.run_verify(mutation=args.mutation)
    text = json.dumps(report, indent=2, default=float)
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text)
    else:
        print(text)
    return 0 if report["passed"] else 1


def build_parser():
    p = argparse.ArgumentParser(prog="superad", description="Superadiabatic transition experiments")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="verb", required=True)

    def add(name, fn, out_required=True, config=True):
        sp = sub.add_parser(name)
        if config:
            sp.add_argument("--config", metavar="PATH")
        sp.add_argument("--out", metavar="DIR", required=out_required)
        sp.add_argument("--threads", type=int, default=1)
        sp.set_defaults(func=fn)
        return sp

    add("simulate", cmd_simulate)
    add("formula", cmd_formula)
    add("history", cmd_history).add_argument("--n", default="0..5")
    add("optimal-n", cmd_optimal_n, out_required=False)
    add("sweep", cmd_sweep)
    rt = add("recursion-table", cmd_recursion_table)
    rt.add_argument("--n-max", type=int, default=8)
    rt.add_argument("--q-min", type=float, default=-10.0)
    rt.add_argument("--q-max", type=float, default=10.0)
    rt.add_argument("--samples", type=int, default=201)
    vf = add("verify", cmd_verify, out_required=False, config=False)
    vf.add_argument("--mutation", action="store_true", help="plant a recursion defect; suites must fail")
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
