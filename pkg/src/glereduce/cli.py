"""Command-line driver: ``glereduce {reduce,vacf,simulate,bench} --config CONFIG.json``.

The config is one JSON file::

    {
      "model": "model.json",                      # or an inline model object
      "basis": {"type": "modal", "m": 2},          # | {"type": "phi", "phi": ...}
                                                  # | {"type": "rtb", "assignment": "a.csv",
                                                  #    "positions": "p.csv", "groups": [0]}
      "orders": [0, 1, 2],
      "grid": "0:10:200",                          # t0:t1:intervals, t0 must be 0
      "out": "results",
      "sim": {"dt": 0.01, "steps": 100000, "ensemble": 64, "seed": 0, "max_lag": 200},
      "bench": {"order": 2, "dt": 0.01, "steps": [1000, 10000, 100000]},
      "tolerances": {"fdt_residual": 1e-10, "nsigma": 3.0}
    }

Relative paths are resolved against the config file's directory. Flags
override the matching config entries.
"""

import argparse
import json
import logging
import os
import sys
import traceback
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import io
from .basis import PartitionBasis, build_modal_basis, build_rtb_basis
from .correlation import empirical_autocorrelation, l2_error, l2_norm_on_grid, vacf_full, vacf_reduced
from .errors import GLEError, ValidationError
from .model import mass_scale, validate_full_model
from .projection import MOMENT_CONVENTION, compute_blocks, compute_moments, kernel_decay_rate, kernel_on_grid, t_star
from .reduction import approx_kernel_on_grid, fit
from .simulate import SimConfig, benchmark, simulate_reduced

log = logging.getLogger("glereduce")

DEFAULT_TOLERANCES = {
    "fdt_residual": 1e-10,
    "nsigma": 3.0,
    "decoupled": 1e-12,
    "t_star_factor": 0.5,
}
DEFAULT_SIM = {"dt": 0.01, "steps": 100000, "ensemble": 64, "seed": 0, "record_stride": 1,
               "max_lag": 200, "check_lags": 20, "write_members": 1}
DEFAULT_BENCH = {"order": 2, "dt": 0.01, "steps": [1000, 10000, 100000], "repeats": 3}


@dataclass
class PipelineConfig:
    model_path: str
    basis: dict
    orders: list
    grid: np.ndarray
    out: str
    sim: dict = field(default_factory=lambda: dict(DEFAULT_SIM))
    bench: dict = field(default_factory=lambda: dict(DEFAULT_BENCH))
    tolerances: dict = field(default_factory=lambda: dict(DEFAULT_TOLERANCES))
    allow_partial: bool = False
    base: str = "."
    config_hash: str = ""
    inline_model: dict = None


def parse_grid(spec):
    """``"t0:t1:intervals"`` or ``{"t0", "t1", "steps"}`` -> increasing grid from 0."""
    if isinstance(spec, dict):
        t0, t1, steps = spec.get("t0", 0.0), spec["t1"], spec["steps"]
    else:
        parts = str(spec).split(":")
        if len(parts) != 3:
            raise ValidationError(f"grid must look like t0:t1:steps, got {spec!r}")
        t0, t1, steps = parts
    try:
        t0, t1, steps = float(t0), float(t1), int(steps)
    except ValueError as exc:
        raise ValidationError(f"bad grid specification {spec!r}") from exc
    if t0 != 0.0:
        raise ValidationError("the time grid must start at 0")
    if not t1 > t0 or steps < 1:
        raise ValidationError("the time grid needs t1 > t0 and at least one step")
    return np.linspace(t0, t1, steps + 1)


def parse_orders(spec):
    if isinstance(spec, str):
        spec = [s for s in spec.replace(" ", "").split(",") if s]
    try:
        orders = sorted({int(o) for o in spec})
    except (TypeError, ValueError) as exc:
        raise ValidationError(f"orders must be integers, got {spec!r}") from exc
    if not orders:
        raise ValidationError("at least one order is required")
    if orders[0] < 0 or orders[-1] > 3:
        raise ValidationError("supported orders are 0-3")
    return orders


def load_config(args):
    path = args.config
    if not os.path.exists(path):
        raise ValidationError(f"config file {path} not found")
    with open(path) as fh:
        try:
            raw = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ValidationError(f"config {path} is not valid JSON: {exc}") from exc
    base = os.path.dirname(os.path.abspath(path))
    if "model" not in raw or "basis" not in raw:
        raise ValidationError("config needs 'model' and 'basis'")
    model = raw["model"]
    tol = dict(DEFAULT_TOLERANCES, **raw.get("tolerances", {}))
    cfg = PipelineConfig(
        model_path=os.path.join(base, model) if isinstance(model, str) else "",
        inline_model=model if isinstance(model, dict) else None,
        basis=raw["basis"],
        orders=parse_orders(args.order if args.order is not None else raw.get("orders", [0, 1, 2])),
        grid=parse_grid(args.grid if args.grid is not None else raw.get("grid", "0:10:200")),
        out=args.out if args.out is not None else os.path.join(base, raw.get("out", "out")),
        sim=dict(DEFAULT_SIM, **raw.get("sim", {})),
        bench=dict(DEFAULT_BENCH, **raw.get("bench", {})),
        tolerances=tol,
        allow_partial=bool(args.allow_partial or raw.get("allow_partial", False)),
        base=base,
        config_hash=io.file_hash(path),
    )
    if args.seed is not None:
        if args.seed < 0 or args.seed >= 2 ** 64:
            raise ValidationError("seed must be an unsigned 64-bit integer")
        cfg.sim["seed"] = int(args.seed)
    if cfg.model_path and not os.path.exists(cfg.model_path):
        raise ValidationError(f"model file {cfg.model_path} not found")
    return cfg


def _basis(cfg, model):
    spec = cfg.basis
    kind = spec.get("type")
    if kind == "modal":
        Phi = build_modal_basis(model, int(spec["m"]))
        extra = {}
    elif kind == "phi":
        Phi = io._matrix_field(spec["phi"], cfg.base, "phi")
        if Phi.ndim == 1 or Phi.shape[0] == 1:
            Phi = Phi.reshape(-1, 1)
        extra = {}
    elif kind == "rtb":
        assign_path = os.path.join(cfg.base, spec["assignment"])
        pos_path = os.path.join(cfg.base, spec["positions"])
        for p in (assign_path, pos_path):
            if not os.path.exists(p):
                raise ValidationError(f"basis file {p} not found")
        assign = io.load_block_assignment(assign_path, pos_path)
        res = build_rtb_basis(assign, select=spec.get("groups"))
        Phi = res.Phi
        extra = {"modes_per_group": res.modes_per_group, "degenerate_groups": res.degenerate_groups,
                 "assignment_hash": io.file_hash(assign_path), "positions_hash": io.file_hash(pos_path)}
    else:
        raise ValidationError(f"unknown basis type {kind!r} (expected modal, phi or rtb)")
    basis = PartitionBasis.from_phi(Phi).check()
    return basis, extra


class Pipeline:
    """Load, project and fit once; the subcommands consume the results."""

    def __init__(self, cfg):
        self.cfg = cfg
        if cfg.inline_model is not None:
            model = io.model_from_dict(cfg.inline_model, cfg.base)
            model_file_hash = ""
        else:
            model, model_file_hash = io.load_model(cfg.model_path)
        diag = validate_full_model(model)
        if not diag.ok:
            raise ValidationError("model rejected: " + "; ".join(diag.problems))
        self.model = mass_scale(model)
        self.basis, self.basis_extra = _basis(cfg, self.model)
        self.provenance = {
            "config_hash": cfg.config_hash,
            "model_file_hash": model_file_hash,
            "model_hash": io.model_hash(model),
            "basis_hash": io.array_hash(self.basis.Phi),
            "moment_convention": MOMENT_CONVENTION,
        }
        self.blocks = compute_blocks(self.model, self.basis)
        L = max(2 * max(cfg.orders) - 2, 2)
        self.moments = compute_moments(self.blocks, L)
        self.decoupled = self.blocks.is_decoupled(cfg.tolerances["decoupled"] * max(
            np.linalg.norm(self.model.A, 2), np.linalg.norm(self.model.Gamma, 2), 1e-300))
        self.t_star = t_star(self.blocks, cfg.tolerances["t_star_factor"])
        self.fits = {}
        self.failures = {}
        for order in cfg.orders:
            try:
                with warnings.catch_warnings(record=True) as caught:
                    warnings.simplefilter("always")
                    reduced = fit(self.blocks, self.moments, order)
                for w in caught:
                    log.warning("order %d: %s", order, w.message)
                self._check_fdt(reduced)
                self.fits[order] = reduced
            except GLEError as exc:
                print(f"error [{_origin(exc)}] order {order} rejected: {type(exc).__name__}: {exc}",
                      file=sys.stderr)
                self.failures[order] = exc

    def _check_fdt(self, reduced):
        from .errors import FdtInfeasible

        tol = self.cfg.tolerances["fdt_residual"]
        d = reduced.diagnostics
        worst = max(d.get("lyapunov_residual", 0.0), d.get("pinning_residual", 0.0))
        if worst > tol:
            raise FdtInfeasible(f"order-{reduced.order} FDT residual {worst:.2e} exceeds {tol:.0e}")

    def exit_code(self):
        if self.failures and not self.cfg.allow_partial:
            return self.failures[min(self.failures)].exit_code
        return 0

    def blocks_summary(self):
        b = self.blocks
        return {
            "n": self.model.n, "m": b.m, "kBT": b.kBT,
            "A_eff": b.A_eff, "Gamma11": b.G11,
            "coupling_norm_A12": float(np.linalg.norm(b.A12)),
            "coupling_norm_Gamma12": float(np.linalg.norm(b.G12)),
            "kernel_identically_zero": bool(self.decoupled),
            "kernel_decay_rate": kernel_decay_rate(b),
            "t_star": self.t_star,
            "basis": self.basis_extra,
        }

    def fit_report(self):
        out = {}
        for order in self.cfg.orders:
            if order in self.fits:
                r = self.fits[order]
                out[str(order)] = {"status": "accepted", "diagnostics": r.diagnostics}
            else:
                exc = self.failures[order]
                out[str(order)] = {"status": "rejected", "error": type(exc).__name__,
                                   "message": str(exc), "exit_code": exc.exit_code}
        return out


def _prepare_out(cfg):
    os.makedirs(cfg.out, exist_ok=True)
    return cfg.out


def cmd_reduce(cfg):
    pipe = Pipeline(cfg)
    out = _prepare_out(cfg)
    prov = pipe.provenance
    mom = pipe.moments
    io.write_json(os.path.join(out, "blocks.json"), {"blocks": pipe.blocks_summary(), "provenance": prov})
    io.write_json(os.path.join(out, "moments.json"), {
        "convention": mom.convention, "M": mom.M, "Minf": mom.Minf,
        "asymmetry": mom.asymmetry(), "provenance": prov,
    })
    for order, r in pipe.fits.items():
        io.save_reduced(os.path.join(out, f"reduced_order{order}.json"), r, prov)
    report = {
        "kernel_identically_zero": pipe.decoupled,
        "orders_equivalent": pipe.decoupled,
        "M0": mom.M[0], "Minf": mom.Minf,
        "fits": pipe.fit_report(),
        "provenance": prov,
    }
    io.write_json(os.path.join(out, "fit_report.json"), report)
    print(f"reduced n={pipe.model.n} -> m={pipe.blocks.m}; t*={pipe.t_star:.6g}")
    if pipe.decoupled:
        print("kernel is identically zero: every order reproduces the projected dynamics")
    print(f"M0 = {np.array2string(mom.M[0], precision=12)}  Minf = {np.array2string(mom.Minf, precision=12)}")
    for order in cfg.orders:
        status = "accepted" if order in pipe.fits else f"rejected ({type(pipe.failures[order]).__name__})"
        print(f"order {order}: {status}")
    return pipe.exit_code()


def cmd_vacf(cfg):
    pipe = Pipeline(cfg)
    out = _prepare_out(cfg)
    prov = pipe.provenance
    times = cfg.grid
    exact = vacf_full(pipe.model, pipe.basis, times)
    io.write_correlation(os.path.join(out, "vacf_full"), exact, prov)
    kernel = kernel_on_grid(pipe.blocks, times)
    io.write_kernel(os.path.join(out, "kernel_exact.csv"), times, kernel)
    tstar = pipe.t_star
    rows, summary = [], {}
    for order, r in sorted(pipe.fits.items()):
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            series = vacf_reduced(r, times)
        for w in caught:
            log.warning("order %d: %s", order, w.message)
        io.write_correlation(os.path.join(out, f"vacf_order{order}"), series, prov)
        err_T = l2_error(series, exact)
        err_ts = l2_error(series, exact, tstar) if np.sum(times <= tstar) >= 2 else float("nan")
        if order >= 1:
            approx = approx_kernel_on_grid(r, times)
            io.write_kernel(os.path.join(out, f"kernel_order{order}.csv"), times, approx)
            kerr = l2_norm_on_grid(times, approx - kernel, tstar) if np.sum(times <= tstar) >= 2 else float("nan")
        else:
            kerr = float("nan")
        rows.append([order, err_T, err_ts, kerr])
        summary[str(order)] = {"vacf_l2_error": err_T, "vacf_l2_error_tstar": err_ts, "kernel_l2_error_tstar": kerr,
                               "unstable_horizon": series.meta.get("unstable_horizon", False)}
    io.write_csv(os.path.join(out, "vacf_summary.csv"),
                 ["order", "vacf_l2_error", "vacf_l2_error_tstar", "kernel_l2_error_tstar"], rows)
    io.write_json(os.path.join(out, "vacf_summary.json"), {
        "T": float(times[-1]), "t_star": tstar, "errors": summary,
        "rejected": {str(k): type(v).__name__ for k, v in pipe.failures.items()}, "provenance": prov,
    })
    print(f"L2 errors vs exact VACF on [0, {times[-1]:g}] and [0, t*={tstar:.4g}]:")
    print(f"{'order':>5} {'vacf[0,T]':>12} {'vacf[0,t*]':>12} {'kernel[0,t*]':>13}")
    for order, e1, e2, e3 in rows:
        print(f"{order:>5d} {e1:12.4e} {e2:12.4e} {e3:13.4e}")
    return pipe.exit_code()


def cmd_simulate(cfg):
    pipe = Pipeline(cfg)
    out = _prepare_out(cfg)
    prov = pipe.provenance
    sc = cfg.sim
    nsigma = float(cfg.tolerances["nsigma"])
    sim = SimConfig(dt=float(sc["dt"]), steps=int(sc["steps"]), seed=int(sc["seed"]),
                    ensemble=int(sc["ensemble"]), record_stride=int(sc["record_stride"]))
    prov = dict(prov, seed=sim.seed, dt=sim.dt, steps=sim.steps, ensemble=sim.ensemble)
    report = {"provenance": prov, "orders": {}}
    zero_T = pipe.model.kBT == 0.0
    if zero_T:
        print("kBT = 0: noise-free trajectories, analytic comparison skipped")
        report["notice"] = "kBT = 0: noise vanishes and the stationary state is the origin; comparison skipped"
    for order, r in sorted(pipe.fits.items()):
        traj = simulate_reduced(r, sim)
        for k in range(min(int(sc["write_members"]), sim.ensemble)):
            io.write_trajectory(os.path.join(out, f"traj_order{order}_member{k}"), traj,
                                member=k if sim.ensemble > 1 else None, provenance=prov)
        entry = {"max_abs_state": float(np.max(np.abs(traj.velocities)))}
        if zero_T:
            entry["verdict"] = "SKIPPED"
            report["orders"][str(order)] = entry
            print(f"order {order}: SKIPPED")
            continue
        nrec = traj.velocities.shape[-2]
        max_lag = min(int(sc["max_lag"]), (nrec - 1) // 5)
        emp = empirical_autocorrelation(traj, max_lag)
        io.write_correlation(os.path.join(out, f"vacf_empirical_order{order}"), emp, prov)
        ana = vacf_reduced(r, emp.times)
        lags = np.unique(np.linspace(0, max_lag, int(sc["check_lags"])).round().astype(int))
        dev = np.abs(emp.values[lags] - ana.values[lags])
        ok = dev <= nsigma * emp.stderr[lags]
        var_ok = bool(np.all(ok[0]))
        verdict = "PASS" if bool(np.all(ok)) else "FAIL"
        entry.update(verdict=verdict, lags=lags, within=ok.mean(), var_p=np.diag(emp.values[0]),
                     var_p_stderr=np.diag(emp.stderr[0]), var_p_ok=var_ok,
                     max_z=float(np.max(dev / np.maximum(emp.stderr[lags], 1e-300))))
        report["orders"][str(order)] = entry
        print(f"order {order}: {verdict} ({ok.mean() * 100:.1f}% of checked entries within {nsigma:g} sigma; "
              f"Var(p) {'ok' if var_ok else 'off'})")
    io.write_json(os.path.join(out, "simulate_report.json"), report)
    code = pipe.exit_code()
    return code


def cmd_bench(cfg):
    pipe = Pipeline(cfg)
    out = _prepare_out(cfg)
    bc = cfg.bench
    order = int(bc["order"])
    if order not in pipe.fits:
        if order in pipe.failures:
            raise pipe.failures[order]
        pipe.fits[order] = fit(pipe.blocks, pipe.moments, order)
    r = pipe.fits[order]
    if r.order < 1:
        raise ValidationError("bench needs an order >= 1 fit")
    if r.m > 8:
        log.warning("m=%d: the direct-convolution reference is slow at this size", r.m)
    rows, exponent = benchmark(r, bc["steps"], float(bc["dt"]), repeats=int(bc["repeats"]))
    keys = ["steps", "direct_time", "extended_time", "time_ratio", "direct_ops", "extended_ops", "ops_ratio",
            "extended_time_per_step"]
    io.write_csv(os.path.join(out, "bench.csv"), keys, [[row[k] for k in keys] for row in rows])
    io.write_json(os.path.join(out, "bench.json"), {"rows": rows, "ratio_exponent": exponent, "order": order,
                                                    "m": r.m, "provenance": pipe.provenance})
    print(f"{'steps':>8} {'direct[s]':>11} {'extended[s]':>12} {'ratio':>10} {'op ratio':>10}")
    for row in rows:
        print(f"{row['steps']:>8d} {row['direct_time']:11.4e} {row['extended_time']:12.4e} "
              f"{row['time_ratio']:10.2f} {row['ops_ratio']:10.2f}")
    print(f"time-ratio growth exponent: {exponent:.3f}")
    return 0


COMMANDS = {"reduce": cmd_reduce, "vacf": cmd_vacf, "simulate": cmd_simulate, "bench": cmd_bench}


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, help="pipeline config JSON")
    common.add_argument("--order", help="comma-separated orders to fit, e.g. 0,1,2")
    common.add_argument("--out", help="output directory")
    common.add_argument("--seed", type=int, help="simulation seed (unsigned 64-bit)")
    common.add_argument("--allow-partial", action="store_true", help="exit 0 even if some fits are rejected")
    common.add_argument("--grid", help='time grid "t0:t1:steps" with t0 = 0')
    common.add_argument("-v", "--verbose", action="store_true")
    parser = argparse.ArgumentParser(prog="glereduce", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("reduce", parents=[common], help="project, compute moments and fit reduced models")
    sub.add_parser("vacf", parents=[common], help="analytic VACFs of the full and reduced models")
    sub.add_parser("simulate", parents=[common], help="simulate reduced models and compare VACFs")
    sub.add_parser("bench", parents=[common], help="direct convolution vs extended system timing")
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        cfg = load_config(args)
        return COMMANDS[args.command](cfg)
    except GLEError as exc:
        print(f"error [{_origin(exc)}] {type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.exit_code


def _origin(exc):
    """Package module where `exc` was raised."""
    here = os.path.dirname(os.path.abspath(__file__))
    origin = "cli"
    for frame in traceback.extract_tb(exc.__traceback__):
        if os.path.dirname(os.path.abspath(frame.filename)) == here:
            origin = os.path.splitext(os.path.basename(frame.filename))[0]
    return origin


if __name__ == "__main__":
    sys.exit(main())
