"""Command line entry point.

Subcommands::

    gen-data   simulate a labeled dataset (CSV)
    train-pp   train a predictor, write the model file and its fitting report
    train-eta  train the step-size network for a predictor
    pipeline   sense, estimate, optimize and evaluate one interval
    reproduce  regenerate a results table or figure data (CSV)
    selftest   fast internal consistency checks
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from .. import det_equiv as de
from ..errors import InvalidArgument, NumericalFailure
from ..nn import eta_net, save_net
from ..optimizer import run_pipeline, train_eta_net
from ..predictor import VARIANTS, Dataset, PredictorModel, make_predictor, train_predictor
from .config import RunConfig, load_config
from .experiments import (CASES, ExperimentSpec, Table, Workbench, evaluate_draw, run_experiment,
                          sensed_draw, write_outputs)

TABLES = {"v": "fitting", "vi": "tau_estimation", "vii": "optimize_tables", "viii": "optimize_tables"}
FIGURES = {"5": "fitting", "6": "eta_convergence", "7": "imperfect_ratio_sweep", "8": "online_learning"}


def _cases(text):
    if text is None:
        return CASES
    cases = tuple(int(c) for c in str(text).split(","))
    if any(c not in CASES for c in cases):
        raise InvalidArgument(f"cases must be among {CASES}")
    return cases


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat key = value configuration file")
    common.add_argument("--seed", type=int)
    common.add_argument("--samples", type=int, help="dataset size per case")
    common.add_argument("--frames", type=int, help="frames per sensing interval")
    common.add_argument("--draws", type=int, help="scenario draws per table cell")
    common.add_argument("--case", help="case id, or a comma separated list")
    common.add_argument("--variant", choices=VARIANTS, default="dual_wb")
    common.add_argument("--out", default="results", help="output directory")
    common.add_argument("--models", help="directory with trained model files")

    p = argparse.ArgumentParser(prog="mimotwin", description=__doc__,
                                formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = p.add_subparsers(dest="command", required=True)
    g = sub.add_parser("gen-data", parents=[common])
    g.add_argument("--clean", action="store_true", help="no interference, true-MSE labels")
    t = sub.add_parser("train-pp", parents=[common])
    t.add_argument("--data", help="dataset CSV (generated when omitted)")
    sub.add_parser("train-eta", parents=[common])
    sub.add_parser("pipeline", parents=[common])
    r = sub.add_parser("reproduce", parents=[common])
    grp = r.add_mutually_exclusive_group(required=True)
    grp.add_argument("--table", choices=sorted(TABLES))
    grp.add_argument("--figure", choices=sorted(FIGURES))
    sub.add_parser("selftest", parents=[common])
    return p


def resolve_config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    changes = {k: getattr(args, k) for k in ("seed", "samples", "frames", "draws")
               if getattr(args, k, None) is not None}
    return cfg.replace(**changes)


def _single_case(args) -> int:
    cases = _cases(args.case)
    if len(cases) != 1:
        raise InvalidArgument("this command needs a single --case")
    return cases[0]


def cmd_gen_data(args, cfg):
    case = _single_case(args)
    bench = Workbench(cfg)
    regime = "clean" if args.clean else "impaired"
    data = bench.dataset(case, regime)
    os.makedirs(args.out, exist_ok=True)
    path = os.path.join(args.out, f"dataset_case{case}_{regime}.csv")
    data.to_csv(path)
    write_manifest(path, cfg, "gen-data", {"case": case, "regime": regime})
    return [path]


def write_manifest(path, cfg, command, extra):
    import json

    from .. import __version__

    stem = os.path.splitext(path)[0]
    with open(f"{stem}.json", "w") as fh:
        json.dump({"command": command, "seed": cfg.seed, "version": __version__,
                   "config": cfg.as_dict(), **extra}, fh, indent=2, sort_keys=True)


def cmd_train_pp(args, cfg):
    case = _single_case(args)
    if args.variant == "model_driven":
        raise InvalidArgument("model_driven has nothing to train")
    bench = Workbench(cfg)
    data = Dataset.from_csv(args.data) if args.data else bench.dataset(case)
    if data.case_id != case:
        raise InvalidArgument(f"{args.data} holds case {data.case_id}, not {case}")
    model = make_predictor(args.variant, case, bench.rng("init", case, args.variant))
    rep = train_predictor(model, data, bench.rng("train", case, "impaired"), config=cfg.training())
    os.makedirs(args.out, exist_ok=True)
    path = os.path.join(args.out, f"case{case}_{args.variant}.mtnn")
    model.save(path)
    table = Table(f"fitting_report_case{case}_{args.variant}",
                  ["split", "gamma", "mse", "total", "n"],
                  [["train", *rep.train, rep.train.sum(), rep.n_train],
                   ["val", *rep.val, rep.val.sum(), len(data) - rep.n_train - rep.n_test],
                   ["test", *rep.test, rep.test.sum(), rep.n_test]])
    return [path, *write_outputs(args.out, [table], cfg, "train-pp", {"epochs": rep.trace.epochs})]


def cmd_train_eta(args, cfg):
    case = _single_case(args)
    bench = Workbench(cfg, args.models)
    model = bench.predictor(case, args.variant)
    net, trace = train_eta_net(model, bench.eta_pool(case), bench.rng("eta", case, args.variant),
                               L=cfg.L, v_range=(cfg.v_lo, cfg.v_hi), epochs=cfg.eta_epochs,
                               lr=cfg.eta_lr)
    os.makedirs(args.out, exist_ok=True)
    path = os.path.join(args.out, f"case{case}_{args.variant}.eta.mtnn")
    save_net(net, path)
    table = Table(f"eta_training_case{case}_{args.variant}", ["epoch", "loss"],
                  [[i, l] for i, l in enumerate(trace.losses)])
    return [path, *write_outputs(args.out, [table], cfg, "train-eta")]


def cmd_pipeline(args, cfg):
    case = _single_case(args)
    bench = Workbench(cfg, args.models)
    sd = sensed_draw(case, cfg, bench.rng("pipeline", case))
    model = bench.predictor(case, args.variant)
    st = run_pipeline(model, sd.scn, sd.y_meas, net=bench.eta(case, args.variant), alpha0=cfg.alpha0,
                      v0=cfg.v0, L=cfg.L, tau_grid=cfg.tau_grid(), alpha_grid=cfg.alpha_grid())
    from ..link_sim import frame_moments

    mom = frame_moments(sd.scn.link(), st.alpha_star, bench.rng("pipeline", case, "eval"), cfg.frames)
    mse = mom.mse(st.u_star)
    table = Table(f"pipeline_case{case}_{args.variant}",
                  ["user", "tau", "tau_hat", "alpha_star", "v_star", "u_star", "gamma", "mse"],
                  [[k, sd.scn.tau[k], st.tau_hat[k], st.alpha_star, st.v_star[k], st.u_star[k],
                    mom.gamma[k], mse[k]] for k in range(sd.scn.cfg.K)])
    return write_outputs(args.out, [table], cfg, "pipeline", {"sum_rate": mom.sum_rate})


def cmd_reproduce(args, cfg):
    scenario = TABLES[args.table] if args.table else FIGURES[args.figure]
    spec = ExperimentSpec(scenario, _cases(args.case), cfg, args.out, args.models)
    bench = Workbench(cfg, args.models)
    tables = run_experiment(spec, bench)
    if args.figure == "5":
        tables = [t for t in tables if t.name == "fitting_clean"]
    elif args.table == "v":
        tables = [t for t in tables if t.name == "fitting_impaired"]
    elif args.table == "vii":
        tables = [t for t in tables if t.name == "sum_rate"]
    elif args.table == "viii":
        tables = [t for t in tables if t.name == "detection_mse"]
    label = f"table {args.table}" if args.table else f"figure {args.figure}"
    return write_outputs(args.out, tables, cfg, f"reproduce {label}", {"timings": bench.timings})


def selftest() -> list[tuple[str, bool]]:
    """Cheap consistency checks that need no training."""
    rng = np.random.default_rng(0)
    results = []
    # case reductions
    M, K, P, tau, alpha, v = 8, 4, 10.0, 0.2, 0.1, 1.0
    prof = de.build_profile(3, np.stack([np.eye(M)] * K), alpha, np.full(K, P / K))
    g3, m3 = de.gamma_mse_case3(M, K, P, P / K, tau, v, alpha, P, 1.0, prof.e[0])
    g4, m4 = de.gamma_mse_case4(M, K, P, tau, v, alpha, P)
    results.append(("case 3 reduces to case 4", bool(np.isclose(g3, g4, rtol=1e-9) and np.isclose(m3, m4, rtol=1e-9))))
    e_fp, _ = de.solve_e_fixed_point(np.stack([np.eye(M)] * K), alpha)
    results.append(("closed-form e matches fixed point",
                    bool(np.isclose(e_fp[0], de.e_closed_form(M / K, alpha), rtol=1e-10))))
    net = eta_net(rng)
    out = net.forward(rng.normal(0, 100, (50, 2)))
    results.append(("eta network has 33 parameters", net.n_params == 33))
    results.append(("eta output within [1e-3, 1e-1]", bool(np.all((out >= 1e-3) & (out <= 1e-1)))))
    sa, C = de.case4_coefficients(M, K, tau, alpha, P)
    vs = de.v_star(sa, C)
    results.append(("closed-form v* is stationary",
                    bool(abs(de.model_mse_grad_v(4, [[M, K, P, 1.0, alpha, tau, vs]])[0][0]) < 1e-9)))
    return results


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = resolve_config(args)
        if args.command == "selftest":
            res = selftest()
            for name, ok in res:
                print(f"{'PASS' if ok else 'FAIL'}  {name}")
            return 0 if all(ok for _, ok in res) else 1
        handler = {"gen-data": cmd_gen_data, "train-pp": cmd_train_pp, "train-eta": cmd_train_eta,
                   "pipeline": cmd_pipeline, "reproduce": cmd_reproduce}[args.command]
        for path in handler(args, cfg):
            print(path)
        return 0
    except (InvalidArgument, NumericalFailure) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
