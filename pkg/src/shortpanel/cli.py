"""Command-line interface: ``shortpanel <command> [options]``.

Every command writes a JSON document (schema ``shortpanel-fa/1``) to
``--out`` or to standard output.
"""

from __future__ import annotations

import argparse
import math
import sys

import numpy as np

from . import aumpi_checker as ac
from . import lr_inference as lri
from . import montecarlo as mc
from .fa_estimator import constrained_estimate_spherical, estimate
from .panel_io import load_observed_factors, load_panel, save_results
from .rank_tests import build_observed_factors, rank_test, spanning_scan
from .variance_structure import parametric_mxomega, veps_standard_errors


def _floats(text: str) -> list[float]:
    return [float(x) for x in text.replace(",", " ").split()]


def _ints(text: str) -> list[int]:
    return [int(x) for x in text.split(",") if x.strip()]


def _range(text: str) -> list[int]:
    if ":" in text:
        lo, hi = text.split(":")
        return list(range(int(lo), int(hi) + 1))
    return _ints(text)


def _panel_args(p, k=True):
    p.add_argument("--panel", required=True, help="panel CSV: period,unit1,unit2,...")
    p.add_argument("--blocks", help="block CSV: unit,block")
    if k:
        p.add_argument("--k", type=int, required=True, help="number of latent factors")


def _pvalue_args(p):
    p.add_argument("--omega", choices=("nonparametric", "parametric"), default="nonparametric")
    p.add_argument("--pvalue-method", choices=("simulate", "imhof"), default="simulate")
    p.add_argument("--draws", type=int, default=200_000)
    p.add_argument("--seed", type=int, default=0)


def _fit(args, panel):
    if getattr(args, "spherical", False):
        return constrained_estimate_spherical(panel, args.k)
    return estimate(panel, args.k)


# ---------------------------------------------------------------- commands


def cmd_estimate(args):
    panel = load_panel(args.panel, args.blocks)
    est = _fit(args, panel)
    return save_results(args.out, est, command="estimate", panel=args.panel)


def cmd_test_k(args):
    panel = load_panel(args.panel, args.blocks)
    res = lri.test_k(panel, args.k, args.omega, draws=args.draws, seed=args.seed,
                     pvalue_method=args.pvalue_method, spherical=args.spherical)
    return save_results(args.out, tests=[res], command="test-k")


def cmd_select_k(args):
    panel = load_panel(args.panel, args.blocks)
    alpha = args.alpha_n if args.alpha_n is not None else 10.0 / (args.n_max or panel.n)
    sel = lri.select_k(panel, alpha, args.kmax, args.omega, draws=args.draws, seed=args.seed,
                       pvalue_method=args.pvalue_method)
    return save_results(args.out, tests=sel.trail, command="select-k", k_hat=sel.k_hat,
                        alpha_n=sel.alpha_n, k_max=sel.k_max)


def cmd_decompose(args):
    panel = load_panel(args.panel, args.blocks)
    est = estimate(panel, args.k)
    dec = lri.decompose(est, single_factor=not args.no_single)
    return save_results(args.out, est, command="decompose", decomposition=dec)


def cmd_se(args):
    panel = load_panel(args.panel, args.blocks)
    est = estimate(panel, args.k)
    omega = lri.omega_zstar_nonparametric(est, panel)
    se = veps_standard_errors(est, omega_hat=omega, omega_source=args.omega)
    _, params = parametric_mxomega(est, omega)
    return save_results(args.out, est, command="se", V_eps_hat=est.V_eps_hat, se=se,
                        omega_source=args.omega, arch_params=params)


def _observed(args):
    panel = load_panel(args.panel, args.blocks)
    ofd = load_observed_factors(args.factors, args.riskfree, panel)
    return build_observed_factors(panel, ofd, k=args.k)


def cmd_rank_test(args):
    ofm = _observed(args)
    res = rank_test(ofm, args.r, draws=args.draws, seed=args.seed, pvalue_method=args.pvalue_method)
    return save_results(args.out, tests=[res], command="rank-test", F_O_hat=ofm.F_O_hat)


def cmd_spanning_scan(args):
    ofm = _observed(args)
    scan = spanning_scan(ofm, args.k, args.alpha_n, args.statistic, draws=args.draws, seed=args.seed,
                         pvalue_method=args.pvalue_method)
    return save_results(args.out, tests=scan.trail, command="spanning-scan", r_hat=scan.r_hat,
                        spanning=scan.spanning, impossible=scan.impossible, alpha_n=scan.alpha_n,
                        statistic=scan.statistic)


def cmd_mlr_check(args):
    if (args.nu is None) == (args.weights is None):
        raise ValueError("give exactly one of --nu and --weights")
    lam = _floats(args.lam)
    if args.weights is not None:
        prob = ac.MlrProblem.from_weights(_floats(args.weights), lam, M=args.max_m)
    else:
        prob = ac.MlrProblem(_floats(args.nu), lam, M=args.max_m)
    if args.df is not None and args.df != prob.df:
        raise ValueError(f"--df {args.df} does not match {prob.df} entries")
    rep = ac.check(prob)
    return save_results(args.out, command="mlr-check", nu=prob.nu, lam=prob.lam, M=prob.M,
                        kappa=rep.kappa, first_violation=rep.first_violation,
                        sufficient_condition_holds=rep.sufficient_condition_holds,
                        monotone=rep.monotone, first_decrease=rep.first_decrease)


def cmd_mlr_scan(args):
    rows = []
    for d in _range(args.df_range):
        res = ac.violation_scan(d, args.nu_bar, args.lambda_lo, args.lambda_hi, args.max_m,
                                args.draws, args.seed, lambda_draw=args.lambda_draw)
        lo, hi = res.ci()
        rows.append({"df": d, "violations": res.violations, "per_mille": res.per_mille,
                     "ci95_per_mille": [lo, hi]})
    return save_results(args.out, command="mlr-scan", nu_bar=args.nu_bar, lambda_lo=args.lambda_lo,
                        lambda_hi=args.lambda_hi, M=args.max_m, draws=args.draws, seed=args.seed,
                        lambda_draw=args.lambda_draw, table=rows)


def cmd_simulate(args):
    kappas = None
    if args.kappa_list:
        kappas = [math.inf if x.strip() in ("inf", "infinity") else float(x)
                  for x in args.kappa_list.split(",")]
    grid = mc.preset_grid(args.preset, args.paths, args.reps, args.seed,
                          _ints(args.n_list) if args.n_list else None,
                          _ints(args.t_list) if args.t_list else None, kappas)
    res = mc.run_table(grid, selection=not args.no_selection, workers=args.workers,
                       pvalue_method=args.pvalue_method, draws=args.draws)
    return save_results(args.out, command="simulate", preset=args.preset,
                        cells=[r.summary() for r in res])


# ------------------------------------------------------------------ parser


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="shortpanel", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("estimate", help="factor analysis fit")
    _panel_args(p)
    p.add_argument("--spherical", action="store_true", help="PCA fit with V = s^2 I")
    p.set_defaults(func=cmd_estimate)

    p = sub.add_parser("test-k", help="LR test of k factors")
    _panel_args(p)
    _pvalue_args(p)
    p.add_argument("--spherical", action="store_true")
    p.set_defaults(func=cmd_test_k)

    p = sub.add_parser("select-k", help="sequential selection of the number of factors")
    _panel_args(p, k=False)
    _pvalue_args(p)
    p.add_argument("--alpha-n", type=float, help="test level (default 10 / n-max)")
    p.add_argument("--n-max", type=int, help="cross-section size used in the default level")
    p.add_argument("--kmax", type=int)
    p.set_defaults(func=cmd_select_k)

    p = sub.add_parser("decompose", help="total, systematic and idiosyncratic variance")
    _panel_args(p)
    p.add_argument("--no-single", action="store_true", help="skip the one-factor R^2")
    p.set_defaults(func=cmd_decompose)

    p = sub.add_parser("se", help="standard errors of the idiosyncratic variances")
    _panel_args(p)
    p.add_argument("--omega", choices=("parametric", "nonparametric"), default="parametric")
    p.set_defaults(func=cmd_se)

    for name, func, help_ in (("rank-test", cmd_rank_test, "rank test of the observed factor matrix"),
                              ("spanning-scan", cmd_spanning_scan, "do observed factors span the latent ones")):
        p = sub.add_parser(name, help=help_)
        _panel_args(p)
        p.add_argument("--factors", required=True, help="CSV: unit,period,z1,...")
        p.add_argument("--riskfree", required=True, help="CSV: period,rf")
        p.add_argument("--pvalue-method", choices=("simulate", "imhof"), default="simulate")
        p.add_argument("--draws", type=int, default=200_000)
        p.add_argument("--seed", type=int, default=0)
        if name == "rank-test":
            p.add_argument("--r", type=int, required=True)
        else:
            p.add_argument("--alpha-n", type=float)
            p.add_argument("--statistic", choices=("kp", "rs"), default="kp")
        p.set_defaults(func=func)

    p = sub.add_parser("mlr-check", help="MLR checks for one weighted chi-square alternative")
    p.add_argument("--df", type=int)
    p.add_argument("--nu", help="normalized weights, first entry 0")
    p.add_argument("--weights", help="raw weights mu_j (alternative to --nu)")
    p.add_argument("--lambda", dest="lam", required=True)
    p.add_argument("--max-m", type=int, default=16)
    p.set_defaults(func=cmd_mlr_check)

    p = sub.add_parser("mlr-scan", help="violation frequencies over random alternatives")
    p.add_argument("--df-range", default="2:12")
    p.add_argument("--nu-bar", type=float, required=True)
    p.add_argument("--lambda-lo", type=float, required=True)
    p.add_argument("--lambda-hi", type=float, default=7.0)
    p.add_argument("--lambda-draw", choices=("squared", "linear"), default="squared")
    p.add_argument("--max-m", type=int, default=16)
    p.add_argument("--draws", type=int, default=100_000)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_mlr_scan)

    p = sub.add_parser("simulate", help="size, power and selection tables")
    p.add_argument("--preset", choices=sorted(mc.PRESETS), default="appendix-c")
    p.add_argument("--n-list")
    p.add_argument("--t-list")
    p.add_argument("--kappa-list", help="e.g. inf,0,0.5")
    p.add_argument("--paths", type=int, default=20)
    p.add_argument("--reps", type=int, default=500)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--pvalue-method", choices=("simulate", "imhof"), default="imhof")
    p.add_argument("--draws", type=int, default=5000)
    p.add_argument("--no-selection", action="store_true")
    p.set_defaults(func=cmd_simulate)

    for p in sub.choices.values():
        p.add_argument("--out", default="-", help="output JSON path ('-' for stdout)")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        args.func(args)
    except (ValueError, OSError, np.linalg.LinAlgError) as exc:
        print(f"shortpanel {args.command}: error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
