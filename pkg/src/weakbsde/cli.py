"""Command line entry point: ``weakbsde <subcommand> --config PATH``.

Exit codes: 0 success, 2 invalid configuration or assumption violations,
3 failed self-test checks.
"""
from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .config import ConfigError, RunConfig, build_spec, load_config, serialize_config
from .dual import dual_value, foc_residuals
from .gexpect import BinomialLattice, gexp_linear, gexp_lsmc, gexp_tree
from .oracle import (TreeInstance, np_quantile_price, np_quantile_quadrature, random_tree,
                     stability_probe, tree_primal_bruteforce, tree_primal_exact)
from .primal import PolicyFamily, check_dpp, profile_value, value_curve
from .problem import Driver, LossMap, ProblemSpec, validate_spec
from .simulate import generate_paths
from .transforms import convex_envelope, envelope_loss

log = logging.getLogger("weakbsde")

SUBCOMMANDS = ("curve", "dual", "gap", "dpp", "envelope", "selftest")


def _fmt(x, precision: int) -> str:
    if isinstance(x, (bool, np.bool_)):
        return "true" if x else "false"
    if isinstance(x, str):
        return x
    if x is None:
        return "nan"
    return f"{float(x):.{precision}g}"


def write_csv(path: Path, header: list, rows: list, cfg: RunConfig, subcommand: str, seed: int):
    prec = cfg["output.precision"]
    with open(path, "w", newline="") as fh:
        fh.write(f"# weakbsde {__version__} {subcommand}\n")
        fh.write(f"# seed = {seed}\n")
        for line in serialize_config(cfg).splitlines():
            if line:
                fh.write(f"# {line}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt(x, prec) for x in r])


def _ensemble(spec, cfg, threads):
    return generate_paths(spec, cfg["simulation.n_paths"], cfg["simulation.n_steps"],
                          cfg["simulation.seed"], threads)


def _family(cfg):
    return PolicyFamily(cfg["solver.family"])


def _tree_instance(spec: ProblemSpec, cfg: RunConfig, m: float) -> TreeInstance:
    if spec.d != 1 or not spec.driver.is_linear or spec.claim.kind != "constant":
        raise ConfigError("the tree backend needs d = 1, a linear driver and a constant claim")
    lattice = BinomialLattice(cfg["solver.tree_depth"], spec.T, recombining=False)
    return TreeInstance.from_lattice(lattice, spec.driver.a_y, float(spec.driver.a_z[0]),
                                     envelope_loss(spec.loss), m)


def run_curve(spec, cfg, threads):
    header = ["m", "Y0", "stderr", "method", "convexity_defect", "monotonicity_defect"]
    if cfg["solver.backend"] == "tree":
        vals = []
        for m in cfg["task.m_grid"]:
            y, _ = tree_primal_exact(_tree_instance(spec, cfg, m))
            g0 = spec.driver.g0
            if g0:
                raise ConfigError("the tree backend needs g0 = 0")
            vals.append((m, y))
        from .primal import convexity_defect, monotonicity_defect
        ms, ys = np.array([v[0] for v in vals]), np.array([v[1] for v in vals])
        cd, md = convexity_defect(ms, ys), monotonicity_defect(ys)
        return header, [[m, y, 0.0, "tree", cd, md] for m, y in vals]
    ens = _ensemble(spec, cfg, threads)
    curve = value_curve(spec, cfg["task.m_grid"], ens, cfg["solver.method"], _family(cfg), cfg["solver.budget"])
    cd, md = curve.convexity_defect, curve.monotonicity_defect
    return header, [[e.m, e.Y0, e.stderr, e.method, cd, md] for e in curve.entries]


def _primal_at(spec, m, ens, cfg):
    if spec.driver.is_linear:
        return profile_value(spec, m, ens)
    from .primal import primal_value
    return primal_value(spec, m, ens, _family(cfg), cfg["solver.budget"])


def run_dual(spec, cfg, threads, with_primal: bool):
    header = ["m", "l_star", "dual_value", "primal_value", "gap_abs", "gap_rel", "res_driver", "res_terminal"]
    ens = _ensemble(spec, cfg, threads)
    rows = []
    for m in cfg["task.m_grid"]:
        primal = _primal_at(spec, m, ens, cfg) if with_primal else None
        d = dual_value(spec, m, ens, (cfg["solver.l_lo"], cfg["solver.l_hi"]),
                       primal=None if primal is None else primal.Y0)
        if primal is None:
            rows.append([m, d.l_star, d.dual_value, None, None, None, None, None])
            continue
        gap = primal.Y0 - d.dual_value
        rel = abs(gap) / max(abs(primal.Y0), 1e-12)
        rd = rt = None
        if hasattr(primal, "M_T"):
            rd, rt = foc_residuals(spec, primal, d, ens)
        rows.append([m, d.l_star, d.dual_value, primal.Y0, gap, rel, rd, rt])
    return header, rows


def run_dpp(spec, cfg, threads):
    header = ["m", "t_mid", "lhs", "rhs", "gap", "gap_rel", "submartingale_ok", "min_fixed_policy"]
    ens = _ensemble(spec, cfg, threads)
    rows = []
    for t_mid in cfg["task.t_mid"]:
        for m in cfg["task.m_grid"]:
            r = check_dpp(spec, m, t_mid, ens, cfg["task.dpp_resolution"], family=_family(cfg),
                          budget=cfg["solver.budget"], policy_seed=cfg["simulation.seed"])
            low = min(v for v, _ in r.submartingale) if r.submartingale else None
            rows.append([m, t_mid, r.lhs, r.rhs, r.gap, r.gap_rel, r.submartingale_ok, low])
    return header, rows


def run_envelope(spec, cfg, threads):
    env = convex_envelope(spec.loss)
    contact = set(env.contact_set.tolist())
    rows = [[m, v, h, i in contact] for i, (m, v, h) in
            enumerate(zip(env.knots_m, env.knots_v, env.hat_phi_grid))]
    return ["m", "phi", "hat_phi", "contact"], rows


def selftest_checks(cfg: RunConfig, threads) -> list:
    """Oracle cross-checks; each row is ``(check, value, reference, tolerance, passed)``."""
    seed = cfg["simulation.seed"]
    out = []

    def add(name, value, ref, tol, passed=None):
        ok = abs(value - ref) <= tol if passed is None else passed
        out.append([name, value, ref, tol, bool(ok)])
        log.info("%-28s %s", name, "pass" if ok else "FAIL")

    add("quantile_quadrature", np_quantile_quadrature(0.3, 1.0, 0.5), np_quantile_price(0.3, 1.0, 0.5), 1e-9)

    rng = np.random.default_rng(seed)
    for j in range(5):
        tree = random_tree(rng, depth=1 + j % 3)
        exact, _ = tree_primal_exact(tree)
        brute, _ = tree_primal_bruteforce(tree)
        lower, _ = tree_primal_exact(TreeInstance(tree.depth, tree.up_prob, tree.weights, tree.loss,
                                                  max(tree.m - 1 / 50, 0.0)))
        x, v = tree.loss.knots
        lip = float(np.max(np.diff(v) / np.diff(x)))
        slack = lip * tree.pricing.sum() / 100
        add(f"tree_grid_{j}", brute, exact, exact - lower + slack,
            lower - 1e-12 <= brute <= exact + slack + 1e-12)

    two = gexp_tree(BinomialLattice(2, 1.0), np.ones(3), Driver.linear(-0.1, [0.0])).Y0
    add("tree_two_step_discount", two, (1 / 1.05) ** 2, 1e-12)

    lat = BinomialLattice(6, 1.0, recombining=False)
    drv = Driver.linear(-0.1, [0.25])
    tree = TreeInstance.from_lattice(lat, -0.1, 0.25, LossMap.linear(), 0.4)
    exact, M = tree_primal_exact(tree)
    add("tree_deflator_vs_recursion", gexp_tree(lat, M, drv).Y0, exact, 1e-12)

    bsqh = ProblemSpec(LossMap.indicator(), Driver.linear(0.0, [-0.3]))
    rep = stability_probe(bsqh.replace(driver=Driver.linear(-0.05, [-0.3])), [1e-1, 1e-2, 1e-3],
                          lattice=BinomialLattice(12))
    add("stability_tree", max(abs(r.err_shift - r.linear_expected) for r in rep.rows), 0.0, 1e-10,
        rep.within_envelope and rep.monotone and bool(rep.linear_exact))

    ens = generate_paths(bsqh, cfg["simulation.n_paths"], cfg["simulation.n_steps"], seed, threads)
    p = profile_value(bsqh, 0.5, ens)
    ref = np_quantile_price(0.3, 1.0, 0.5)
    add("bsqh_profile_m0.5", p.Y0, ref, max(3 * p.stderr, 0.01 * ref))
    d = dual_value(bsqh, 0.5, ens, primal=p.Y0)
    add("bsqh_duality_gap", d.dual_value, p.Y0, 0.015 * p.Y0)
    rd, rt = foc_residuals(bsqh, p, d, ens)
    add("bsqh_foc_terminal", rt, 0.0, 1e-10)
    add("bsqh_foc_driver", rd, 0.0, 0.0)

    small = generate_paths(bsqh, min(cfg["simulation.n_paths"], 20_000), min(cfg["simulation.n_steps"], 32),
                           seed, threads)
    xi = 1.0 / (1.0 + np.exp(-2.0 * small.W_T[:, 0]))
    lin = gexp_linear(small, xi, bsqh.driver)
    ls = gexp_lsmc(small, xi, bsqh.driver)
    add("lsmc_vs_linear", ls.Y0, lin.Y0, 3 * np.hypot(ls.stderr, lin.stderr) + 0.5 * small.dt)
    add("zero_driver_mean", gexp_lsmc(small, xi, Driver.zero(), n_batches=1).Y0, float(xi.mean()), 1e-12)
    return out


def run_selftest(spec, cfg, threads):
    return ["check", "value", "reference", "tolerance", "passed"], selftest_checks(cfg, threads)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="weakbsde", description=__doc__.splitlines()[0])
    ap.add_argument("subcommand", choices=SUBCOMMANDS)
    ap.add_argument("--config", required=True, help="config file or preset name (bsqh, tree, power)")
    ap.add_argument("--seed", type=int, help="override simulation.seed")
    ap.add_argument("--out", help="override output.path")
    ap.add_argument("--threads", type=int, help="worker threads (default: $WEAKBSDE_THREADS or 1)")
    ap.add_argument("--quiet", action="store_true", help="only report errors")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg = cfg.with_overrides(**{"simulation.seed": args.seed})
        if args.out:
            cfg = cfg.with_overrides(**{"output.path": args.out})
        if args.threads is not None and args.threads < 1:
            raise ConfigError("--threads must be >= 1")
        spec = build_spec(cfg)
    except (ConfigError, ValueError) as exc:
        log.error("%s", exc)
        return 2
    report = validate_spec(spec)
    if not report.ok:
        for v in report:
            log.error("assumption violated: %s", v)
        return 2
    sub = args.subcommand
    if cfg["solver.backend"] == "tree" and sub not in ("curve", "envelope", "selftest"):
        log.error("subcommand %s needs solver.backend = mc", sub)
        return 2
    try:
        if sub == "curve":
            header, rows = run_curve(spec, cfg, args.threads)
        elif sub in ("dual", "gap"):
            header, rows = run_dual(spec, cfg, args.threads, with_primal=(sub == "gap"))
        elif sub == "dpp":
            header, rows = run_dpp(spec, cfg, args.threads)
        elif sub == "envelope":
            header, rows = run_envelope(spec, cfg, args.threads)
        else:
            header, rows = run_selftest(spec, cfg, args.threads)
    except ConfigError as exc:
        log.error("%s", exc)
        return 2
    out = Path(cfg["output.path"] or f"{sub}.csv")
    write_csv(out, header, rows, cfg, sub, cfg["simulation.seed"])
    log.info("wrote %s (%d rows)", out, len(rows))
    if sub == "selftest" and not all(r[-1] for r in rows):
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
