"""Command-line entry point: cqlimit <mode> --config <path> [--out DIR] [--threads N] [--seed S].

Exit codes: 0 success, 1 configuration or I/O error, 2 a verification mode
found a violated invariant.
"""
import argparse
import csv
import itertools
import json
import os
import sys

import numpy as np

from . import __version__
from .config import MODES, ConfigError, complex_matrix, parse_config, validate
from .evolvers import GeneratorKind, InstabilityError, convergence_study, empirical_order, evolve, is_decreasing
from .generator import cnm, cnm_table, cnm_triangle, d_matrices, ho_compare, qcle_d_matrices, tradeoff_check
from .hamiltonian import ModelParams, build_model
from .phase_space import (PhaseGrid, SupportLeakError, coherent_product_state, gaussian_product_state,
                          write_marginal_csv, write_snapshot)

EXIT_OK, EXIT_IO, EXIT_VIOLATION = 0, 1, 2
OUT_ENV = "CQLIMIT_OUT"


class _Parser(argparse.ArgumentParser):
    # usage errors are configuration errors (exit 1); exit 2 is reserved for violations
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_IO, "%s: error: %s\n" % (self.prog, message))


def build_parser():
    ap = _Parser(prog="cqlimit", description="Classical-quantum limit dynamics: runs and verification suites.")
    ap.add_argument("mode", choices=MODES)
    ap.add_argument("--config", help="JSON run configuration (defaults are used when omitted)")
    ap.add_argument("--out", help="output directory (overrides %s and the config)" % OUT_ENV)
    ap.add_argument("--threads", type=int, default=1, help="worker cap for trajectory chunks")
    ap.add_argument("--seed", type=int, help="RNG seed (overrides the config)")
    ap.add_argument("--no-plots", action="store_true", help="skip matplotlib figures")
    ap.add_argument("--version", action="version", version="cqlimit " + __version__)
    return ap


def _fmt(x):
    if isinstance(x, (bool, np.bool_)):
        return str(bool(x)).lower()
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    return str(x)


def write_csv(path, rows, keys=None):
    keys = keys or list(rows[0])
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(keys)
        for r in rows:
            w.writerow([_fmt(r[k]) for k in keys])
    return path


def write_json(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True, default=_jsonable)
        fh.write("\n")
    return path


def _jsonable(x):
    if isinstance(x, np.generic):
        return x.item()
    if isinstance(x, np.ndarray):
        return x.tolist()
    raise TypeError("not JSON serializable: %r" % type(x))


class Run:
    """Output bookkeeping for one invocation."""

    def __init__(self, cfg, out_dir, plots):
        self.cfg = cfg
        self.out = out_dir
        self.plots = plots
        self.files = []
        os.makedirs(out_dir, exist_ok=True)

    def path(self, name):
        p = os.path.join(self.out, name)
        self.files.append(name)
        return p


# ---- building blocks from the config ---------------------------------------------

def _model(cfg):
    prm = cfg.model_params()
    pot = dict(cfg["potential"])
    return build_model(cfg["model"], prm, pot if cfg["model"] == "single_system" else None), prm


def _psi0(cfg, d):
    init = cfg["initial"]
    if "psi_re" not in init:
        psi = np.zeros(d, dtype=complex)
        psi[0] = 1
        return psi
    re = np.asarray(init["psi_re"], dtype=float)
    im = np.asarray(init.get("psi_im", np.zeros_like(re)), dtype=float)
    if re.size != d:
        raise ConfigError(["initial.psi_re must have length %d for model %s" % (d, cfg["model"])])
    psi = re + 1j * im
    if not np.linalg.norm(psi):
        raise ConfigError(["initial.psi_re/psi_im must not be the zero vector"])
    return psi / np.linalg.norm(psi)


def _initial_field(cfg, H, prm, grid):
    init = cfg["initial"]
    psi = _psi0(cfg, H.dim)
    if init["kind"] == "coherent":
        return coherent_product_state(grid, init["q0"], init["p0"], prm.hbar, prm.s, psi)
    var_q, var_p = _gaussian_var(init)
    return gaussian_product_state(grid, init["q0"], init["p0"], var_q, var_p, psi=psi)


def _gaussian_var(init):
    if init["kind"] != "gaussian":
        return None
    missing = [k for k in ("var_q", "var_p") if k not in init]
    if missing:
        raise ConfigError(["initial.%s is required for a gaussian initial state" % k for k in missing])
    return init["var_q"], init["var_p"]


# ---- modes --------------------------------------------------------------------

def mode_evolve(run, args):
    cfg = run.cfg
    H, prm = _model(cfg)
    grid = PhaseGrid(**cfg["grid"])
    field = _initial_field(cfg, H, prm, grid)
    kind = GeneratorKind(cfg["generator"], prm, H)
    tm = cfg["time"]
    snap_dir = None
    if tm["snapshot_every"]:
        snap_dir = os.path.join(run.out, "snapshots")
        os.makedirs(snap_dir, exist_ok=True)

    def on_snapshot(t, f):
        name = os.path.join("snapshots", "snap_t%012.6f.cqf" % t)
        write_snapshot(run.path(name), f)

    status = "ok"
    try:
        final, rows = evolve(kind, field, tm["t_final"], dt=tm["dt"], n_obs=tm["n_obs"],
                             on_snapshot=on_snapshot if snap_dir else None, snapshot_every=tm["snapshot_every"])
    except SupportLeakError as exc:
        print("invariant violated: %s" % exc, file=sys.stderr)
        write_json(run.path("summary.json"), {"status": "support_leak", "message": str(exc)})
        return EXIT_VIOLATION
    write_csv(run.path("timeseries.csv"), rows)
    write_marginal_csv(run.path("marginal.csv"), final)
    trace_dev = max(abs(r["trace"] - 1) for r in rows)
    herm = max(r["herm"] for r in rows)
    pos = min(r["min_eig"] / r["peak"] for r in rows)
    checks = {"trace_deviation": trace_dev, "trace_ok": trace_dev <= 1e-6,
              "hermiticity_defect": herm, "hermiticity_ok": herm <= 1e-9,
              "min_eig_over_peak": pos}
    ok = checks["trace_ok"] and checks["hermiticity_ok"]
    if cfg["generator"] == "main_cq":
        checks["positivity_ok"] = pos >= -1e-4
        ok = ok and checks["positivity_ok"]
    if not ok:
        status = "invariant_violated"
    write_json(run.path("summary.json"), {"status": status, "checks": checks, "final": rows[-1]})
    if run.plots:
        from .plotting import plot_marginal, plot_timeseries
        plot_timeseries(rows, run.path("timeseries.png"))
        plot_marginal(final, run.path("marginal.png"))
    print("evolve: %d rows, trace deviation %.2e, hermiticity %.2e, min eig/peak %.2e"
          % (len(rows), trace_dev, herm, pos))
    return EXIT_OK if ok else EXIT_VIOLATION


def mode_unravel(run, args):
    from .unravelling import (GeneratorLattice, run_ensemble, write_ensemble_csv, write_ensemble_json,
                              write_trajectory_csv)
    cfg = run.cfg
    H, prm = _model(cfg)
    u = cfg["unravel"]
    lr = u["lattice_range"]
    lat = GeneratorLattice(H, prm, (lr[0], lr[1]), (lr[2], lr[3]), u["lattice_n"], u["lattice_n"])
    init = cfg["initial"]
    res = run_ensemble(H, prm, u["n_traj"], cfg["time"]["t_final"], u["dt"], seed=cfg["seed"],
                       q0=init["q0"], p0=init["p0"], psi0=_psi0(cfg, H.dim),
                       init=init["kind"], init_var=_gaussian_var(init),
                       n_checkpoints=u["n_checkpoints"], lattice=lat, chunk_size=u["chunk_size"],
                       threads=args.threads, n_write=u["n_write"])
    write_ensemble_csv(run.path("ensemble.csv"), res)
    write_ensemble_json(run.path("ensemble.json"), res)
    if u["n_write"]:
        write_trajectory_csv(run.path("trajectories.csv"), res)
    worst = max(r["max_impurity"] for r in res["rows"])
    bound = u["purity_factor"] * u["dt"]
    if run.plots:
        from .plotting import plot_ensemble
        obs = [k[5:] for k in res["rows"][0] if k.startswith("mean_s")]
        plot_ensemble(res["rows"], run.path("ensemble.png"), obs)
    print("unravel: %d trajectories, max conditional impurity %.2e (bound %.2e)" % (u["n_traj"], worst, bound))
    return EXIT_OK if worst <= bound else EXIT_VIOLATION


def _positivity_matrices(cfg):
    choice = cfg["positivity"]["matrices"]
    if choice == "main":
        prm = cfg.model_params()
        return d_matrices(prm.E, prm.s)
    if choice == "qcle":
        return qcle_d_matrices()
    return complex_matrix(choice["D0"]), complex_matrix(choice["D1"]), complex_matrix(choice["D2"])


def mode_check_positivity(run, args):
    D0, D1, D2 = _positivity_matrices(run.cfg)
    rep = tradeoff_check(D0, D1, D2, tol=run.cfg["positivity"]["tol"])
    out = rep.as_dict()
    out["matrices"] = run.cfg["positivity"]["matrices"]
    write_json(run.path("positivity.json"), out)
    failed = [k for k in ("d0_psd", "d2_psd", "range_condition", "tradeoff_holds") if not out[k]]
    print("check-positivity: %s%s" % ("passed" if rep.passed else "FAILED",
                                      "" if rep.passed else " (" + ", ".join(failed) + ")"))
    if rep.passed:
        print("saturated: %s (residual %.2e)" % (str(rep.saturated).lower(), rep.saturation_residual))
    return EXIT_OK if rep.passed else EXIT_VIOLATION


def mode_trotter(run, args):
    cfg = run.cfg
    H, prm = _model(cfg)
    grid = PhaseGrid(**cfg["grid"])
    tr = cfg["trotter"]
    t = tr["t"]
    taus = [t / n for n in tr["divisions"]]
    # the initial state is built with the configured hbar; the runs themselves use hbar = E tau
    field = _initial_field(cfg, H, prm, grid)
    rows = convergence_study(H, prm, field, t, taus, tr["ordering"], tr["symbol"])
    errs = [r["error"] for r in rows]
    order = empirical_order(taus, errs)
    dec = is_decreasing(errs)
    write_csv(run.path("trotter.csv"), rows)
    write_json(run.path("trotter.json"), {"taus": taus, "errors": errs, "empirical_order": order,
                                          "decreasing": dec, "ordering": tr["ordering"]})
    if run.plots:
        from .plotting import plot_convergence
        plot_convergence(taus, errs, run.path("trotter.png"))
    print("trotter-convergence: errors %s, order %.3f" % (", ".join("%.3e" % e for e in errs), order))
    return EXIT_OK if dec and order >= 0.8 else EXIT_VIOLATION


def mode_cnm(run, args):
    n_max = run.cfg["cnm"]["N_max"]
    tri = cnm_triangle(n_max)
    rows = [{"row": r, "n": r - k, "m": k, "C_nm": c} for r, vals in enumerate(tri) for k, c in enumerate(vals)]
    write_csv(run.path("cnm_triangle.csv"), rows)
    tab = cnm_table(n_max)
    anti = all(tab[n, m] == -tab[m, n] for n in range(n_max + 1) for m in range(n_max + 1))
    pascal = all(cnm(n, m) == cnm(n - 1, m) + cnm(n, m - 1)
                 for n in range(1, n_max + 1) for m in range(1, n_max + 1))
    write_json(run.path("cnm.json"), {"N_max": n_max, "antisymmetric": anti, "pascal_rule": pascal,
                                      "rows": [[int(c) for c in r] for r in tri]})
    if run.plots:
        from .plotting import plot_cnm
        plot_cnm(tab.tolist(), run.path("cnm.png"))
    for r in tri:
        print(" ".join("%d" % c for c in r))
    return EXIT_OK if anti and pascal else EXIT_VIOLATION


def mode_ho_oracle(run, args):
    cfg = run.cfg
    ho = cfg["ho_oracle"]
    base = cfg.model_params()
    rows = []
    for E, lam, mQ in itertools.product(ho["E"], ho["lam"], ho["m_Q"]):
        prm = base.replace(E=E, lam=lam, m_Q=mQ)
        for q, p in ho["points"]:
            d = ho_compare(prm, q, p, "derived", N_max=ho["N_max"])
            pr = ho_compare(prm, q, p, "printed", N_max=ho["N_max"])
            rows.append({"E": E, "lam": lam, "m_Q": mQ, "q": q, "p": p, "theta": d["theta"],
                         "err_L": d["err_L"], "err_H": d["err_H"], "series_converged": d["converged"],
                         "err_L_printed": pr["err_L"], "err_H_printed": pr["err_H"]})
    write_csv(run.path("ho_oracle.csv"), rows)
    ok = all(r["err_L"] <= ho["tol_L"] and r["err_H"] <= ho["tol_H"] for r in rows)
    write_json(run.path("ho_oracle.json"), {
        "n_cases": len(rows), "max_err_L": max(r["err_L"] for r in rows),
        "max_err_H": max(r["err_H"] for r in rows), "tol_L": ho["tol_L"], "tol_H": ho["tol_H"], "passed": ok})
    print("ho-oracle: %d cases, max err L %.2e, max err H_eff %.2e"
          % (len(rows), max(r["err_L"] for r in rows), max(r["err_H"] for r in rows)))
    return EXIT_OK if ok else EXIT_VIOLATION


DISPATCH = {"evolve": mode_evolve, "unravel": mode_unravel, "check-positivity": mode_check_positivity,
            "trotter-convergence": mode_trotter, "cnm-table": mode_cnm, "ho-oracle": mode_ho_oracle}


def _out_dir(args, cfg):
    if args.out:
        return args.out
    if os.environ.get(OUT_ENV):
        return os.environ[OUT_ENV]
    return cfg["output"]["dir"]


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        cfg = parse_config(args.config) if args.config else validate({})
        if cfg.mode is not None and cfg.mode != args.mode:
            raise ConfigError(["mode: config says %r but %r was requested" % (cfg.mode, args.mode)])
        if args.seed is not None:
            if args.seed < 0:
                raise ConfigError(["--seed must be >= 0"])
            cfg.data["seed"] = args.seed
        if args.threads < 1:
            raise ConfigError(["--threads must be >= 1"])
        cfg.data["mode"] = args.mode
        ModelParams(**cfg["params"])
    except ConfigError as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_IO
    except (OSError, ValueError) as exc:
        print("error: %s" % exc, file=sys.stderr)
        return EXIT_IO
    try:
        run = Run(cfg, _out_dir(args, cfg), cfg["output"]["plots"] and not args.no_plots)
    except OSError as exc:
        print("I/O error: %s" % exc, file=sys.stderr)
        return EXIT_IO
    error = None
    try:
        code = DISPATCH[args.mode](run, args)
    except ConfigError as exc:
        code, error = EXIT_IO, str(exc)
    except (OSError, ValueError) as exc:
        code, error = EXIT_IO, "%s: %s" % (type(exc).__name__, exc)
    except (SupportLeakError, InstabilityError) as exc:
        code, error = EXIT_VIOLATION, "invariant violated: %s" % exc
    if error:
        print(error, file=sys.stderr)
    try:
        write_json(run.path("manifest.json"), {
            "version": __version__, "mode": args.mode, "config": cfg.data, "exit_code": code, "error": error,
            "files": sorted(set(f for f in run.files if f != "manifest.json"))})
    except OSError as exc:
        print("I/O error: %s" % exc, file=sys.stderr)
        return EXIT_IO
    return code


if __name__ == "__main__":
    sys.exit(main())
