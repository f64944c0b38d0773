"""Experiment scenarios and result tables.

Every random quantity is drawn from :func:`stream`, which derives an
independent generator from the master seed and a tuple of labels, so a
cell's numbers do not depend on which other cells were run or in which
order.
"""

from __future__ import annotations

import csv
import json
import os
import time
import zlib
from dataclasses import dataclass, field

import numpy as np

from .. import __version__
from .. import det_equiv as de
from ..errors import InvalidArgument, NumericalFailure
from ..link_sim import moments_on_channels, sense_indicators
from ..nn import DenseNet, load_net
from ..optimizer import (grid_search, run_pipeline, train_eta_net, unfolded_pgd, vanilla_pgd)
from ..predictor import (VARIANTS, Dataset, PredictorModel, Scenario, ScenarioRanges,
                         build_inputs, draw_scenario, generate_dataset, make_predictor, predict,
                         split_indices, train_predictor)
from .config import RunConfig

CASES = (1, 2, 3, 4)
FIXED_ALPHAS = (0.0, 0.01, 0.1, 1.0)
SCENARIOS = ("fitting", "tau_estimation", "optimize_tables", "eta_convergence",
             "imperfect_ratio_sweep", "online_learning")


def _label(k) -> int:
    if isinstance(k, (int, np.integer)):
        return int(k) & 0xFFFFFFFF
    return zlib.crc32(str(k).encode())


def stream(seed: int, *labels) -> np.random.Generator:
    """Generator for the cell identified by ``labels`` under ``seed``."""
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(_label(k) for k in labels))
    return np.random.Generator(np.random.PCG64(ss))


def mean_se(x):
    x = np.asarray(x, dtype=float)
    n = x.size
    se = float(np.std(x, ddof=1) / np.sqrt(n)) if n > 1 else float("nan")
    return float(np.mean(x)), se, n


def compare(a, b, better: str = "lower") -> str:
    """``pass`` when cell ``a`` beats ``b`` on the means with disjoint
    +-1 SE intervals, ``flag`` when only the means are ordered, else ``fail``.
    ``a`` and ``b`` are ``(mean, se)`` pairs."""
    (ma, sa), (mb, sb) = a[:2], b[:2]
    sa, sb = np.nan_to_num(sa), np.nan_to_num(sb)
    ok = ma < mb if better == "lower" else ma > mb
    if better == "lower_eq":
        ok, better = ma <= mb, "lower"
    elif better == "higher_eq":
        ok, better = ma >= mb, "higher"
    if not ok:
        return "fail"
    apart = ma + sa < mb - sb if better == "lower" else ma - sa > mb + sb
    return "pass" if apart else "flag"


# ---------------------------------------------------------------------------
# tables and manifests
# ---------------------------------------------------------------------------

def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


@dataclass
class Table:
    name: str
    header: list
    rows: list = field(default_factory=list)

    def column(self, name):
        i = self.header.index(name)
        return [r[i] for r in self.rows]

    def cell(self, key_col, key, col):
        i, j = self.header.index(key_col), self.header.index(col)
        for r in self.rows:
            if r[i] == key:
                return r[j]
        raise KeyError(key)

    def write(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(self.header)
            for r in self.rows:
                w.writerow([_fmt(v) for v in r])


def write_outputs(out_dir, tables, cfg: RunConfig, command: str, extra: dict | None = None):
    """Write each table as CSV with a JSON run manifest beside it."""
    os.makedirs(out_dir, exist_ok=True)
    paths = []
    for t in tables:
        path = os.path.join(out_dir, f"{t.name}.csv")
        t.write(path)
        manifest = {"command": command, "table": t.name, "seed": cfg.seed, "version": __version__,
                    "config": cfg.as_dict(), "rows": len(t.rows)}
        if extra:
            manifest.update(extra)
        with open(os.path.join(out_dir, f"{t.name}.json"), "w") as fh:
            json.dump(manifest, fh, indent=2, sort_keys=True)
        paths.append(path)
    return paths


# ---------------------------------------------------------------------------
# shared artifacts
# ---------------------------------------------------------------------------

class Workbench:
    """Lazily built datasets, predictors and step-size networks for a run.

    With ``model_dir`` set, predictors and eta networks are loaded from
    files named ``case{c}_{variant}.mtnn`` and ``case{c}_{variant}.eta.mtnn``
    instead of being trained.
    """

    def __init__(self, cfg: RunConfig, model_dir: str | None = None):
        self.cfg = cfg
        self.model_dir = model_dir
        self._data: dict = {}
        self._models: dict = {}
        self._eta: dict = {}
        self.reports: dict = {}
        self.tag_ranges: dict = {}  # scenario ranges used for tagged artifacts
        self.timings: dict = {}

    def rng(self, *labels):
        return stream(self.cfg.seed, *labels)

    # datasets ---------------------------------------------------------------
    def dataset(self, case_id: int, regime: str = "impaired", *, ratio_db: float | None = None,
                n: int | None = None, ranges: ScenarioRanges | None = None, tag=()) -> Dataset:
        cfg = self.cfg
        n = cfg.samples if n is None else n
        ratio_db = cfg.rho_ratio_db if ratio_db is None else ratio_db
        key = ("data", case_id, regime, ratio_db, n, *tag)
        if key not in self._data:
            self._data[key] = generate_dataset(
                case_id, n, self.rng("data", case_id, regime, repr(ratio_db), *tag),
                ranges=ranges or cfg.ranges(), impaired=regime == "impaired",
                rho_ratio=10 ** (ratio_db / 10), n_frames=cfg.frames)
        return self._data[key]

    # predictors -------------------------------------------------------------
    def _model_path(self, case_id, variant, suffix=".mtnn"):
        return os.path.join(self.model_dir, f"case{case_id}_{variant}{suffix}")

    def predictor(self, case_id: int, variant: str, regime: str = "impaired", *,
                  data: Dataset | None = None, tag=()) -> PredictorModel:
        key = (case_id, variant, regime, *tag)
        if key in self._models:
            return self._models[key]
        if variant == "model_driven":
            model = make_predictor(variant, case_id)
        elif self.model_dir is not None and not tag:
            path = self._model_path(case_id, variant)
            if not os.path.exists(path):
                raise InvalidArgument(f"missing trained predictor {path}; create it with "
                                      f"`train-pp --case {case_id} --variant {variant}`")
            model = PredictorModel.load(path)
        else:
            data = self.dataset(case_id, regime) if data is None else data
            model = make_predictor(variant, case_id, self.rng("init", case_id, variant, *tag))
            t0 = time.perf_counter()
            self.reports[key] = train_predictor(model, data, self.rng("train", case_id, regime, *tag),
                                                config=self.cfg.training())
            self.timings[f"train_{case_id}_{variant}_{regime}_{'_'.join(map(str, tag))}"] = \
                time.perf_counter() - t0
        self._models[key] = model
        return model

    def eta_pool(self, case_id: int, n: int | None = None, tag=()) -> np.ndarray:
        """Operating points (all slots filled) for step-size training."""
        rng = self.rng("eta_pool", case_id, *tag)
        ranges = self.tag_ranges.get(tuple(tag), self.cfg.ranges())
        return operating_points(case_id, self.cfg.eta_pool if n is None else n, rng, ranges)

    def eta(self, case_id: int, variant: str, regime: str = "impaired", tag=()) -> DenseNet:
        key = (case_id, variant, regime, *tag)
        if key in self._eta:
            return self._eta[key]
        if self.model_dir is not None and not tag:
            path = self._model_path(case_id, variant, ".eta.mtnn")
            if not os.path.exists(path):
                raise InvalidArgument(f"missing step-size network {path}; create it with "
                                      f"`train-eta --case {case_id} --variant {variant}`")
            net = load_net(path)
        else:
            model = self.predictor(case_id, variant, regime, tag=tag)
            net, _ = train_eta_net(model, self.eta_pool(case_id, tag=tag), self.rng("eta", case_id, variant, *tag),
                                   L=self.cfg.L, v_range=(self.cfg.v_lo, self.cfg.v_hi),
                                   epochs=self.cfg.eta_epochs, lr=self.cfg.eta_lr)
        self._eta[key] = net
        return net


def operating_points(case_id: int, n: int, rng: np.random.Generator,
                     ranges: ScenarioRanges) -> np.ndarray:
    """Input rows at random scenarios, ``alpha`` and ``v``."""
    rows = []
    while len(rows) < n:
        scn = draw_scenario(case_id, rng, ranges)
        alpha = ranges.sample_alpha(rng)
        v = rng.uniform(*ranges.v, size=scn.cfg.K)
        try:
            rows.extend(build_inputs(scn, alpha, scn.tau, v))
        except NumericalFailure:
            continue
    return np.array(rows[:n])


@dataclass
class SensedDraw:
    scn: Scenario
    y_meas: np.ndarray  # (K, 2)


def sensed_draw(case_id: int, cfg: RunConfig, rng: np.random.Generator, *,
                ranges: ScenarioRanges | None = None, rho_ratio: float | None = None) -> SensedDraw:
    """Scenario plus one impaired sensing interval at ``(alpha0, v0)``."""
    ranges = cfg.ranges() if ranges is None else ranges
    ratio = cfg.rho_ratio if rho_ratio is None else rho_ratio
    while True:
        scn = draw_scenario(case_id, rng, ranges, rho_ratio=ratio, n_frames=cfg.frames)
        try:
            prof = scn.profile(cfg.alpha0)
        except NumericalFailure:
            continue
        ind = sense_indicators(scn.link(), cfg.alpha0, cfg.v0, prof.psi0, rng)
        return SensedDraw(scn, np.column_stack([ind.gamma, ind.mse_meas]))


# ---------------------------------------------------------------------------
# fitting error
# ---------------------------------------------------------------------------

def run_fitting(bench: Workbench, cases=CASES, regime: str = "impaired") -> Table:
    """Test-set fitting error per case and variant (standardized units)."""
    if bench.cfg.samples < 10:
        raise InvalidArgument("fitting needs at least 10 samples")
    header = ["case"]
    for v in VARIANTS:
        header += [v, f"{v}_se"]
    header.append("n")
    table = Table(f"fitting_{regime}", header)
    for c in cases:
        data = bench.dataset(c, regime)
        tr, _, te = split_indices(len(data), bench.rng("train", c, regime))
        y_std = data.Y[tr].std(axis=0)
        y_std = np.where(y_std > 1e-12, y_std, 1.0)
        row = [c]
        for v in VARIANTS:
            model = bench.predictor(c, v, regime)
            Y = np.column_stack(predict(model, data.X[te]))
            err = np.sum(((Y - data.Y[te]) / y_std) ** 2, axis=1)
            row += list(mean_se(err)[:2])
        row.append(len(te))
        table.rows.append(row)
    return table


# ---------------------------------------------------------------------------
# CSI uncertainty estimation
# ---------------------------------------------------------------------------

def run_tau_estimation(bench: Workbench, cases=CASES) -> Table:
    from ..optimizer import estimate_tau

    cfg = bench.cfg
    header = ["case"]
    for v in VARIANTS:
        header += [v, f"{v}_se"]
    header.append("n")
    table = Table("tau_estimation", header)
    grid = cfg.tau_grid()
    for c in cases:
        models = {v: bench.predictor(c, v) for v in VARIANTS}
        errs = {v: [] for v in VARIANTS}
        for d in range(cfg.draws):
            sd = sensed_draw(c, cfg, bench.rng("tau", c, d))
            X = build_inputs(sd.scn, cfg.alpha0, np.full(sd.scn.cfg.K, 0.25), cfg.v0)
            for v, m in models.items():
                t = [estimate_tau(m, X[k], sd.y_meas[k], grid) for k in range(sd.scn.cfg.K)]
                errs[v].append(np.mean((np.array(t) - sd.scn.tau) ** 2))
        row = [c]
        for v in VARIANTS:
            row += list(mean_se(errs[v])[:2])
        row.append(cfg.draws)
        table.rows.append(row)
    return table


# ---------------------------------------------------------------------------
# SR and detection MSE tables
# ---------------------------------------------------------------------------

def scheme_names():
    return ([f"fixed_{a:g}" for a in FIXED_ALPHAS] + list(VARIANTS)
            + ["model_driven_tau025", "optimal"])


def evaluate_draw(bench: Workbench, case_id: int, sd: SensedDraw, eval_rng: np.random.Generator,
                  variants=VARIANTS, fixed_alphas=FIXED_ALPHAS, ablation: bool = True,
                  tag=()) -> dict:
    """SR and mean detection MSE per scheme on common evaluation frames."""
    cfg = bench.cfg
    scn = sd.scn
    H, H_hat, _, _ = scn.link().draw(cfg.frames, eval_rng)
    cache = {}

    def moments(alpha):
        if alpha not in cache:
            cache[alpha] = moments_on_channels(scn.cfg, H, H_hat, alpha)
        return cache[alpha]

    common = dict(alpha0=cfg.alpha0, v0=cfg.v0, L=cfg.L, tau_grid=cfg.tau_grid(),
                  alpha_grid=cfg.alpha_grid())
    decisions = {}
    for v in variants:
        model = bench.predictor(case_id, v, tag=tag)
        net = bench.eta(case_id, v, tag=tag)
        st = run_pipeline(model, scn, sd.y_meas, net=net, **common)
        decisions[v] = (st.alpha_star, st.u_star)
        if v == "dual_wb":
            for a in fixed_alphas:
                fs = run_pipeline(model, scn, sd.y_meas, net=net, fixed_alpha=max(a, cfg.alpha_lo), **common)
                decisions[f"fixed_{a:g}"] = (float(a), fs.u_star)
    if ablation and "model_driven" in variants:
        st = run_pipeline(bench.predictor(case_id, "model_driven"), scn, sd.y_meas,
                          net=bench.eta(case_id, "model_driven"), fixed_tau=0.25, **common)
        decisions["model_driven_tau025"] = (st.alpha_star, st.u_star)
    out = {}
    for name, (alpha, u) in decisions.items():
        m = moments(alpha)
        out[name] = (m.sum_rate, float(np.mean(m.mse(u))))
    # simulator oracle: refined search on the true SR plus every scheme's choice
    res = grid_search(lambda al: np.array([moments(float(a)).sum_rate for a in al]),
                      cfg.oracle_grid(), maximize=True)
    cand = set(float(a) for a in cache) | {0.0, res.best}
    best_sr = max(moments(a).sum_rate for a in cand)
    best_mse = min(float(np.mean(moments(a).mse_opt)) for a in cand)
    out["optimal"] = (best_sr, best_mse)
    return out


def run_optimize_tables(bench: Workbench, cases=CASES) -> tuple[Table, Table]:
    cfg = bench.cfg
    names = scheme_names()
    header = ["case"]
    for s in names:
        header += [s, f"{s}_se"]
    header.append("n")
    sr_t, mse_t = Table("sum_rate", list(header)), Table("detection_mse", list(header))
    for c in cases:
        acc = {s: ([], []) for s in names}
        for d in range(cfg.draws):
            sd = sensed_draw(c, cfg, bench.rng("opt", c, d, "sense"))
            res = evaluate_draw(bench, c, sd, bench.rng("opt", c, d, "eval"))
            for s in names:
                acc[s][0].append(res[s][0])
                acc[s][1].append(res[s][1])
        r1, r2 = [c], [c]
        for s in names:
            r1 += list(mean_se(acc[s][0])[:2])
            r2 += list(mean_se(acc[s][1])[:2])
        sr_t.rows.append(r1 + [cfg.draws])
        mse_t.rows.append(r2 + [cfg.draws])
    return sr_t, mse_t


# ---------------------------------------------------------------------------
# step-size convergence
# ---------------------------------------------------------------------------

def eta_convergence_traces(bench: Workbench, case_id: int = 3, n_points: int | None = None):
    """Predicted-MSE traces of fixed-small, fixed-large and learned step sizes
    on held-out operating points of the model-driven predictor."""
    cfg = bench.cfg
    n = cfg.eta_points if n_points is None else n_points
    model = bench.predictor(case_id, "model_driven")
    net = bench.eta(case_id, "model_driven")
    X = operating_points(case_id, n, bench.rng("eta_holdout", case_id), cfg.ranges())
    X[:, -1] = bench.rng("eta_holdout_v", case_id).uniform(cfg.v_lo, cfg.v_hi, size=n)
    sa, C, _ = de.coefficients_from_inputs(case_id, X)
    floor = 1.0 / (1.0 + sa**2 / C)  # closed-form minimum of the model MSE
    runs = {"fixed_small": vanilla_pgd(model, X, cfg.eta_small, cfg.L),
            "fixed_large": vanilla_pgd(model, X, cfg.eta_large, cfg.L),
            "learned": unfolded_pgd(model, X, net, cfg.L)}
    return runs, floor


def run_eta_convergence(bench: Workbench, case_id: int = 3) -> Table:
    runs, floor = eta_convergence_traces(bench, case_id)
    table = Table("eta_convergence", ["iteration", "scheme", "mse", "mse_se", "within_5pct", "n"])
    for name, r in runs.items():
        for l in range(r.mse.shape[0]):
            m, se, n = mean_se(r.mse[l])
            table.rows.append([l, name, m, se, float(np.mean(r.mse[l] <= 1.05 * floor)), n])
    return table


# ---------------------------------------------------------------------------
# imperfect SNR sweep
# ---------------------------------------------------------------------------

def sweep_ranges(cfg: RunConfig, ratio_db: float) -> ScenarioRanges:
    """Ranges whose nominal power is the practical range divided by the ratio."""
    r = cfg.ranges()
    r.P_db = (cfg.p_db_lo - ratio_db, cfg.p_db_hi - ratio_db)
    return r


def run_imperfect_ratio_sweep(bench: Workbench) -> Table:
    cfg = bench.cfg
    c = cfg.sweep_case
    names = ("dual_wb", "model_driven", "optimal")
    header = ["ratio_db"]
    for s in names:
        header += [f"{s}_sr", f"{s}_sr_se", f"{s}_mse", f"{s}_mse_se"]
    header.append("n")
    table = Table("imperfect_ratio_sweep", header)
    for r_db in cfg.ratios_db:
        tag = ("ratio", repr(float(r_db)))
        ranges = sweep_ranges(cfg, r_db)
        bench.tag_ranges[tag] = ranges
        data = bench.dataset(c, "impaired", ratio_db=r_db, ranges=ranges, tag=tag)
        bench.predictor(c, "dual_wb", data=data, tag=tag)
        acc = {s: ([], []) for s in names}
        for d in range(cfg.sweep_draws):
            sd = sensed_draw(c, cfg, bench.rng("sweep", d, "sense"), ranges=ranges,
                             rho_ratio=10 ** (r_db / 10))
            res = evaluate_draw(bench, c, sd, bench.rng("sweep", d, "eval"),
                                variants=("dual_wb", "model_driven"), fixed_alphas=(), ablation=False,
                                tag=tag)
            for s in names:
                acc[s][0].append(res[s][0])
                acc[s][1].append(res[s][1])
        row = [float(r_db)]
        for s in names:
            row += list(mean_se(acc[s][0])[:2]) + list(mean_se(acc[s][1])[:2])
        table.rows.append(row + [cfg.sweep_draws])
    return table


# ---------------------------------------------------------------------------
# online learning
# ---------------------------------------------------------------------------

def run_online_learning(bench: Workbench) -> Table:
    """Per-interval SR when predictors are re-trained on each interval's data."""
    cfg = bench.cfg
    c = cfg.online_case
    ranges = cfg.ranges()
    ranges.mk_pairs = ((4, 2),)
    bench.tag_ranges[("online",)] = ranges
    header = ["interval", "ratio_db", "size", "dual_wb", "dual_wb_se", "data_driven", "data_driven_se",
              "model_driven", "model_driven_se", "n"]
    table = Table("online_learning", header)
    offline = bench.dataset(c, "impaired", ranges=ranges, tag=("online",))
    base = {v: bench.predictor(c, v, data=offline, tag=("online",)) for v in ("dual_wb", "data_driven")}
    etas = {v: bench.eta(c, v, tag=("online",)) for v in ("dual_wb", "data_driven")}
    md_eta = bench.eta(c, "model_driven", tag=("online",))
    ratios = bench.rng("online_ratio").uniform(-20.0, 0.0, size=cfg.online_intervals)
    for size in cfg.online_sizes:
        models = {v: m.copy() for v, m in base.items()}
        for t, r_db in enumerate(ratios):
            data = generate_dataset(c, size, bench.rng("online", t, "data"), ranges=ranges,
                                    rho_ratio=10 ** (r_db / 10), n_frames=cfg.frames)
            for v, m in models.items():
                t0 = time.perf_counter()
                train_predictor(m, data, bench.rng("online", t, "train", v, size),
                                config=cfg.training(), refit_stats=False)
                bench.timings[f"online_{size}_{t}_{v}"] = time.perf_counter() - t0
            srs = {"dual_wb": [], "data_driven": [], "model_driven": []}
            common = dict(alpha0=cfg.alpha0, v0=cfg.v0, L=cfg.L, tau_grid=cfg.tau_grid(),
                          alpha_grid=cfg.alpha_grid())
            for d in range(cfg.online_draws):
                sd = sensed_draw(c, cfg, bench.rng("online", t, d, "sense"), ranges=ranges,
                                 rho_ratio=10 ** (r_db / 10))
                H, H_hat, _, _ = sd.scn.link().draw(cfg.frames, bench.rng("online", t, d, "eval"))
                pairs = [(v, models[v], etas[v]) for v in models]
                pairs.append(("model_driven", bench.predictor(c, "model_driven", tag=("online",)), md_eta))
                for v, m, net in pairs:
                    st = run_pipeline(m, sd.scn, sd.y_meas, net=net, **common)
                    srs[v].append(moments_on_channels(sd.scn.cfg, H, H_hat, st.alpha_star).sum_rate)
            row = [t, float(r_db), size]
            for v in ("dual_wb", "data_driven", "model_driven"):
                row += list(mean_se(srs[v])[:2])
            table.rows.append(row + [cfg.online_draws])
    return table


# ---------------------------------------------------------------------------
# dispatch
# ---------------------------------------------------------------------------

@dataclass
class ExperimentSpec:
    scenario: str
    cases: tuple = CASES
    cfg: RunConfig = field(default_factory=RunConfig)
    out: str = "results"
    model_dir: str | None = None

    def __post_init__(self):
        if self.scenario not in SCENARIOS:
            raise InvalidArgument(f"unknown scenario {self.scenario!r}")


def run_experiment(spec: ExperimentSpec, bench: Workbench | None = None) -> list[Table]:
    bench = Workbench(spec.cfg, spec.model_dir) if bench is None else bench
    s = spec.scenario
    if s == "fitting":
        return [run_fitting(bench, spec.cases, "impaired"), run_fitting(bench, spec.cases, "clean")]
    if s == "tau_estimation":
        return [run_tau_estimation(bench, spec.cases)]
    if s == "optimize_tables":
        return list(run_optimize_tables(bench, spec.cases))
    if s == "eta_convergence":
        return [run_eta_convergence(bench)]
    if s == "imperfect_ratio_sweep":
        return [run_imperfect_ratio_sweep(bench)]
    return [run_online_learning(bench)]
