"""Command-line experiment runner.

    pathctrl value --config run.ini --out results/
    pathctrl dpp --config run.ini --method tree
    pathctrl sweep --config sweep.ini --threads 4

Every subcommand writes CSV tables, ``report.json`` and the echoed config
into the output directory.  CSVs hold no timing and are bitwise
reproducible for a fixed config and seed, whatever the thread count.

Exit codes: 0 success, 2 invalid input, 3 contract violation.  Errors are
printed to stderr as one JSON object.
"""
from __future__ import annotations

import argparse
import csv
import json
import platform
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path as FsPath

import numpy as np

from . import __version__, bsde2, gexp, tree, value
from .config import ConfigError, ExperimentConfig, dump_config, read_config
from .models import RegistryError
from .pathspace import PathError, fmt
from .payoffs import PayoffError
from .sde import SDEError, simulate_ensemble

COMMANDS = ("simulate", "value", "dpp", "gexp", "bsde", "sweep", "report")


def _cell(x):
    if isinstance(x, (bool, np.bool_)):
        return str(bool(x)).lower()
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        return fmt(x)
    return str(x)


@dataclass
class Table:
    header: list
    rows: list = field(default_factory=list)

    def add(self, *row):
        self.rows.append([_cell(x) for x in row])

    def write(self, path: FsPath):
        with open(path, "w", encoding="utf-8", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(self.header)
            w.writerows(self.rows)


@dataclass
class RunReport:
    command: str
    config: ExperimentConfig
    tables: dict = field(default_factory=dict)
    summary: dict = field(default_factory=dict)
    violations: list = field(default_factory=list)
    timing: dict = field(default_factory=dict)

    def write(self, out: FsPath):
        out.mkdir(parents=True, exist_ok=True)
        for name, t in self.tables.items():
            t.write(out / f"{name}.csv")
        (out / "config_echo.ini").write_text(dump_config(self.config), encoding="utf-8")
        meta = {
            "command": self.command,
            "seed": self.config.seed,
            "config": self.config.to_flat(),
            "summary": self.summary,
            "violations": self.violations,
            "timing_s": self.timing,
            "versions": {"pathctrl": __version__, "numpy": np.__version__,
                         "python": platform.python_version()},
            "tables": sorted(f"{n}.csv" for n in self.tables),
        }
        (out / "report.json").write_text(json.dumps(meta, indent=2, default=float), encoding="utf-8")


# ---------------------------------------------------------------------------
# pipelines

def _tree_model(cfg: ExperimentConfig, family=None) -> tree.TreeModel:
    return tree.TreeModel(cfg.grid, cfg.coefficients(), cfg.payoff_fn(), family, cfg.node_cap)


def _fixed_control(cfg: ExperimentConfig, family, allow_optimal_tree=None):
    if cfg.control == "optimal":
        if allow_optimal_tree is not None:
            model, closed = allow_optimal_tree
            return bsde2.optimal_feedback(model, closed)
        return family[0]
    for c in family:
        if c.id == cfg.control:
            return c
    raise ConfigError(f"control {cfg.control!r} is not in the family; ids: {family.ids}")


def _methods(cfg):
    return ["tree", "mc"] if cfg.method == "both" else [cfg.method]


def do_simulate(cfg: ExperimentConfig, rep: RunReport):
    fam = cfg.control_family()
    ctrl = _fixed_control(cfg, fam)
    ens = simulate_ensemble(cfg.coefficients(), ctrl, 0, cfg.history(), cfg.M, cfg.seed,
                            cfg.noise, threads=cfg.threads, store_noise=False)
    vals = ens.full().values
    t = Table(["path_id", "step", "t"] + [f"x_{i}" for i in range(cfg.dim)])
    nodes = cfg.grid.nodes
    for i in range(vals.shape[0]):
        for k in range(vals.shape[1]):
            t.add(i, k, nodes[k], *vals[i, k])
    rep.tables["ensemble"] = t
    xi = cfg.payoff_fn()(vals)
    rep.summary.update(control_id=ctrl.id, payoff_mean=float(xi.mean()),
                       payoff_stderr=float(xi.std(ddof=1) / np.sqrt(xi.size)))


def do_value(cfg: ExperimentConfig, rep: RunReport):
    rep.summary["payoff_nodes_only"] = cfg.payoff_fn().nodes_only
    t = Table(["method", "mode", "control_id", "value", "stderr", "n_samples", "revalue", "revalue_stderr"])
    for method in _methods(cfg):
        if method == "tree":
            model = _tree_model(cfg)
            est, res = value.value_tree(model, 0, cfg.history())
            t.add("tree", "closed-loop", est.argmax_id, est.value, est.stderr, est.n_samples, "", "")
            nt = Table(["prefix_hash", "step", "value", "argmax_u"])
            for row in res.rows():
                nt.add(*row)
            rep.tables["node_table"] = nt
            fam_est, _ = value.value_tree(_tree_model(cfg, cfg.control_family()), 0, cfg.history())
            t.add("tree", "family", fam_est.argmax_id, fam_est.value, 0.0, fam_est.n_samples, "", "")
            rep.summary["tree_value"] = est.value
        else:
            est = value.value_mc(cfg.coefficients(), cfg.payoff_fn(), 0, cfg.history(),
                                 cfg.control_family(), cfg.M, cfg.seed, cfg.noise, threads=cfg.threads)
            t.add("mc", "family", est.argmax_id, est.value, est.stderr, est.n_samples,
                  est.revalue, est.revalue_stderr)
            rep.summary["mc_value"] = est.value
            rep.summary["mc_stderr"] = est.stderr
    rep.tables["value_report"] = t


def do_dpp(cfg: ExperimentConfig, rep: RunReport):
    splits = list(range(1, cfg.N)) if cfg.split == "all" else [int(cfg.split)]
    stop = cfg.stopping_rule()
    t = Table(["method", "split", "direct", "composed", "residual", "worst_node", "stderr", "tolerance", "pass"])
    for method in _methods(cfg):
        cases = [dict(split=j) for j in splits] + ([dict(stop=stop)] if stop is not None else [])
        for case in cases:
            if method == "tree":
                r = value.dpp_residual_tree(_tree_model(cfg), 0, cfg.history(), **case)
                tol = cfg.tol_tree
                ok = r.residual <= tol and r.worst_node <= tol
            else:
                r = value.dpp_residual_mc(cfg.coefficients(), cfg.payoff_fn(), 0, cfg.history(),
                                          cfg.control_family(), cfg.M, cfg.M_inner, cfg.seed,
                                          noise=cfg.noise, threads=cfg.threads, **case)
                tol = cfg.tol_se * r.stderr
                ok = r.residual <= tol
            t.add(method, r.split, r.direct, r.composed, r.residual, r.worst_node, r.stderr, tol, ok)
            if not ok:
                rep.violations.append(f"dpp {method} {r.split}: residual {r.residual:.3g} > {tol:.3g}")
    rep.tables["dpp_report"] = t


def _gspec(cfg: ExperimentConfig, payoff=None) -> gexp.GSpec:
    U = cfg.coefficients().controls.points[:, 0]
    lo = float(cfg.gexp_params.get("sigma_low", U.min()))
    hi = float(cfg.gexp_params.get("sigma_high", U.max()))
    return gexp.GSpec(np.full(cfg.dim, lo), np.full(cfg.dim, hi), cfg.grid,
                      cfg.payoff_fn() if payoff is None else payoff)


def do_gexp(cfg: ExperimentConfig, rep: RunReport):
    t = Table(["method", "side", "value", "stderr", "n_samples", "argmax_id"])
    spec = _gspec(cfg)
    count = int(cfg.gexp_params.get("count", 2))
    gtol = float(cfg.gexp_params.get("tol", 1e-9))
    for method in _methods(cfg):
        kw = dict(method=method, M=cfg.M, seed=cfg.seed, count=count, tol=gtol,
                  noise=cfg.noise, threads=cfg.threads, node_cap=cfg.node_cap)
        up = gexp.g_value(spec, 0, cfg.history(), **kw)
        neg = gexp.g_value(_gspec(cfg, -spec.payoff), 0, cfg.history(), **kw)
        t.add(method, "upper", up.value, up.stderr, up.n_samples, up.argmax_id)
        t.add(method, "lower", 0.0 - neg.value, neg.stderr, neg.n_samples, neg.argmax_id)
        rep.summary[f"{method}_upper"] = up.value
        rep.summary[f"{method}_lower"] = 0.0 - neg.value
    rep.tables["gexp_report"] = t


def do_bsde(cfg: ExperimentConfig, rep: RunReport):
    fam = cfg.control_family()
    pay = cfg.payoff_fn()
    # uniqueness of the decomposition is only guaranteed for bounded payoffs
    rep.summary.update(payoff_bounded=pay.bound is not None, payoff_nodes_only=pay.nodes_only)
    for method in _methods(cfg):
        if method == "tree":
            model = _tree_model(cfg)
            closed = tree.closed_loop(model, 0, cfg.history())
            ctrl = _fixed_control(cfg, fam, (model, closed))
            vp = value.value_process_tree(model, ctrl, 0, cfg.history())
            dec = bsde2.decompose_K(model, vp)
            mins = {}
            worst = 0.0
            for k in range(cfg.N):
                m = bsde2.minimality_residual(model, ctrl, k, fam, closed, tol=cfg.tol_K)
                worst = max(worst, m.residual)
                mins.update({(k, h): r for h, r in zip(m.node_hashes, m.infimum)})
            t = Table(["step", "node", "Y", "Z", "dK", "K", "minimality_residual"])
            for row in dec.rows(mins):
                t.add(*row)
            rep.tables["bsde_report"] = t
            rep.summary.update(control_id=ctrl.id, min_dK=dec.min_dK, max_identity=dec.max_identity,
                               minimality_residual=worst, terminal_error=dec.terminal_error,
                               degenerate_Z=dec.degenerate)
            if dec.min_dK < -cfg.tol_K:
                rep.violations.append(f"bsde: dK = {dec.min_dK:.3g} < -{cfg.tol_K:g}")
            if dec.max_identity > cfg.tol_tree:
                rep.violations.append(f"bsde: identity residual {dec.max_identity:.3g}")
        else:
            coeff = cfg.coefficients()
            if not coeff.diffusion_invertible:
                raise ConfigError(f"bsde needs an invertible diffusion; model {coeff.name} is not")
            ctrl = _fixed_control(cfg, fam)
            vp = value.value_process_mc(coeff, cfg.payoff_fn(), ctrl, fam, 0, cfg.history(),
                                        cfg.M, cfg.M_inner, cfg.seed, noise=cfg.noise,
                                        threads=cfg.threads)
            dec = bsde2.decompose_mc(coeff, ctrl, vp, cfg.buckets)
            t = Table(["step", "bucket", "bucket_low", "bucket_high", "count", "Z_0", "dK_mean", "dK_stderr"])
            for s in dec.steps:
                for j in range(dec.n_buckets):
                    t.add(s.k, j, s.bucket_edges[j], s.bucket_edges[j + 1], s.counts[j],
                          s.Z[j, 0], s.dK_mean[j], s.dK_se[j])
            rep.tables["bsde_mc_report"] = t
            rep.summary.update(mc_control_id=ctrl.id, mc_min_dK_z=dec.min_z(), mc_scheme=dec.scheme)
            if dec.min_z() < -cfg.tol_se:
                rep.violations.append(f"bsde mc: dK z-score {dec.min_z():.3g} < -{cfg.tol_se:g}")


def do_sweep(cfg: ExperimentConfig, rep: RunReport):
    axis = cfg.sweep_params.get("axis")
    values = cfg.sweep_params.get("values")
    if axis is None or values is None:
        raise ConfigError("sweep needs sweep.axis and sweep.values")
    t = Table(["axis", "axis_value", "method", "mode", "control_id", "value", "stderr", "n_samples"])
    base = cfg.to_flat()
    base.pop("sweep.axis"), base.pop("sweep.values")
    for v in values:
        sub = ExperimentConfig.from_flat({**base, axis: v})
        inner = RunReport("value", sub)
        do_value(sub, inner)
        for row in inner.tables["value_report"].rows:
            t.rows.append([axis, _cell(v)] + row[:6])
    rep.tables["sweep"] = t


def do_report(cfg: ExperimentConfig, rep: RunReport):
    for step in (do_value, do_dpp, do_bsde):
        step(cfg, rep)


PIPELINES = {"simulate": do_simulate, "value": do_value, "dpp": do_dpp, "gexp": do_gexp,
             "bsde": do_bsde, "sweep": do_sweep, "report": do_report}


def run(cfg: ExperimentConfig, command: str) -> RunReport:
    rep = RunReport(command, cfg)
    t0 = time.perf_counter()
    PIPELINES[command](cfg, rep)
    rep.timing["total"] = time.perf_counter() - t0
    return rep


# ---------------------------------------------------------------------------
# entry point

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="pathctrl", description="Controlled path-dependent SDE experiments.")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--config", help="INI ([run] section) or flat JSON config file")
        s.add_argument("--seed", type=int)
        s.add_argument("--out", help="output directory")
        s.add_argument("--method", choices=["tree", "mc", "both"])
        s.add_argument("--threads", type=int)
        s.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override one config key (repeatable)")
    return p


def _error(kind: str, message: str, code: int) -> int:
    print(json.dumps({"error": kind, "message": message}), file=sys.stderr)
    return code


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = read_config(args.config) if args.config else ExperimentConfig()
        extra = {}
        for item in args.set:
            key, eq, text = item.partition("=")
            if not eq:
                raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
            try:
                extra[key.strip()] = json.loads(text)
            except json.JSONDecodeError:
                extra[key.strip()] = text.strip()
        cfg = cfg.with_overrides(seed=args.seed, out=args.out, method=args.method,
                                 threads=args.threads, **extra)
        rep = run(cfg, args.command)
    except (ConfigError, RegistryError, PayoffError, PathError, gexp.GSpecError) as e:
        return _error(type(e).__name__, str(e), 2)
    except (tree.TreeCapError, value.BudgetError, SDEError, bsde2.BSDEError) as e:
        return _error(type(e).__name__, str(e), 3)
    out = FsPath(cfg.out)
    rep.write(out)
    print(json.dumps({"command": args.command, "out": str(out), "summary": rep.summary,
                      "violations": rep.violations}, default=float))
    if rep.violations:
        return _error("ContractViolation", "; ".join(rep.violations), 3)
    return 0


if __name__ == "__main__":
    sys.exit(main())
