"""Learnable model-driven performance prediction.

A predictor maps an input vector ``X`` (see :mod:`mimotwin.det_equiv`) to
the indicator pair ``Y = (gamma, mse)``.  The model part ``h(X)`` is the
deterministic equivalent; the dual variants correct it elementwise,
``Y = w(X) * h(X) + b(X)``, with ``w`` and ``b`` emitted by one shared
network.

Variants
--------
dual_wb      4 head outputs: ``w = 1 + o[:2]``, ``b = sigma_y * o[2:]``
dual_w       2 head outputs, ``b = 0``
dual_b       2 head outputs, ``w = 1``
data_driven  2 head outputs read directly as standardized ``Y``
model_driven no network, ``Y = h(X)``

Head weights start at zero so every dual variant initially reproduces the
model part exactly.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from . import det_equiv as de
from .channel import SystemConfig, case_correlations, correlation_stack
from .errors import InvalidArgument, NumericalFailure
from .link_sim import LinkModel, sense_indicators
from .nn import DenseNet, TrainingTrace, load_net, pp_net, save_net, train_mbgd

VARIANTS = ("dual_wb", "dual_w", "dual_b", "data_driven", "model_driven")
LEARNABLE = VARIANTS[:4]
HEAD_WIDTH = {"dual_wb": 4, "dual_w": 2, "dual_b": 2, "data_driven": 2}
HIDDEN_LAYERS = {1: 2, 2: 1, 3: 1, 4: 2}
LABELS = ("gamma_m", "mse_m")

MK_PAIRS = {
    1: ((2, 2), (4, 2)),
    2: ((2, 2), (4, 2), (4, 4), (8, 2), (8, 4)),
}
MK_PAIRS[3] = MK_PAIRS[4] = MK_PAIRS[2]


# ---------------------------------------------------------------------------
# scenarios
# ---------------------------------------------------------------------------

@dataclass
class ScenarioRanges:
    """Sampling ranges for scenario draws and for the optimization slots."""

    tau: tuple = (0.1, 0.4)
    P_db: tuple = (6.0, 20.0)
    alpha: tuple = (1e-3, 2.0)
    v: tuple = (0.1, 3.0)
    mk_pairs: tuple | None = None

    def pairs(self, case_id: int):
        return self.mk_pairs if self.mk_pairs is not None else MK_PAIRS[case_id]

    def sample_alpha(self, rng: np.random.Generator) -> float:
        """Equal mixture of log-uniform (small values) and uniform (the
        linear search grid) draws on the ``alpha`` range."""
        u = rng.uniform(size=2)
        lo, hi = self.alpha
        if u[0] < 0.5:
            return float(np.exp(np.log(lo) + u[1] * (np.log(hi) - np.log(lo))))
        return float(lo + u[1] * (hi - lo))


@dataclass
class Scenario:
    case_id: int
    cfg: SystemConfig
    theta: np.ndarray
    tau: np.ndarray
    _profiles: dict = field(default_factory=dict, repr=False, compare=False)

    def profile(self, alpha: float) -> de.DetEquivProfile:
        """Deterministic-equivalent profile at ``alpha`` (memoized)."""
        key = float(alpha)
        if key not in self._profiles:
            self._profiles[key] = de.build_profile(self.case_id, self.theta, key, self.cfg.power_alloc)
        return self._profiles[key]

    def link(self) -> LinkModel:
        return LinkModel(self.cfg, self.theta, self.tau)

    def with_ratio(self, ratio: float) -> "Scenario":
        c = self.cfg
        cfg = SystemConfig(c.M, c.K, c.P, c.sigma2, ratio, c.frame_size, c.n_frames, c.power_alloc.copy())
        return Scenario(self.case_id, cfg, self.theta, self.tau)


def draw_scenario(case_id: int, rng: np.random.Generator, ranges: ScenarioRanges | None = None, *,
                  rho_ratio: float = 1.0, n_frames: int = 5000) -> Scenario:
    """Random antenna/user counts, power budget and allocation, correlation
    and CSI uncertainties for one sensing interval."""
    ranges = ScenarioRanges() if ranges is None else ranges
    pairs = ranges.pairs(case_id)
    M, K = pairs[rng.integers(len(pairs))]
    P = 10 ** (rng.uniform(*ranges.P_db) / 10)
    if case_id == 4:
        p = np.full(K, P / K)
    else:
        p = rng.dirichlet(np.ones(K)) * P
    theta = correlation_stack(case_correlations(case_id, K, rng), M, K)
    tau = np.full(K, rng.uniform(*ranges.tau)) if case_id == 4 else rng.uniform(*ranges.tau, size=K)
    cfg = SystemConfig(M=M, K=K, P=P, rho_ratio=rho_ratio, n_frames=n_frames, power_alloc=p)
    return Scenario(case_id, cfg, theta, tau)


def build_inputs(scn: Scenario, alpha: float, tau, v, profile=None) -> np.ndarray:
    """Stacked input rows for all users of a scenario."""
    cfg = scn.cfg
    if profile is None:
        profile = scn.profile(alpha)
    tau = np.broadcast_to(np.asarray(tau, dtype=float), (cfg.K,))
    v = np.broadcast_to(np.asarray(v, dtype=float), (cfg.K,))
    rows = [de.assemble_input(scn.case_id, cfg.M, cfg.K, cfg.P, cfg.sigma2, profile, k,
                              cfg.power_alloc[k], alpha, tau[k], v[k]).as_array()
            for k in range(cfg.K)]
    return np.stack(rows)


# ---------------------------------------------------------------------------
# datasets
# ---------------------------------------------------------------------------

@dataclass
class Dataset:
    case_id: int
    X: np.ndarray
    Y: np.ndarray

    def __len__(self):
        return self.X.shape[0]

    def subset(self, idx) -> "Dataset":
        return Dataset(self.case_id, self.X[idx], self.Y[idx])

    def header(self):
        return ["case_id", *de.FEATURES[self.case_id], *LABELS]

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(self.header())
            for x, y in zip(self.X, self.Y):
                w.writerow([self.case_id, *(repr(float(a)) for a in x), *(repr(float(a)) for a in y)])

    @classmethod
    def from_csv(cls, path) -> "Dataset":
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        if len(rows) < 2:
            raise InvalidArgument(f"{path}: no samples")
        case_id = int(rows[1][0])
        expected = ["case_id", *de.FEATURES[case_id], *LABELS]
        if rows[0] != expected:
            raise InvalidArgument(f"{path}: header does not match case {case_id}")
        data = np.array([[float(a) for a in r[1:]] for r in rows[1:]])
        return cls(case_id, data[:, :-2], data[:, -2:])


def generate_dataset(case_id: int, n_samples: int, rng: np.random.Generator, *,
                     ranges: ScenarioRanges | None = None, impaired: bool = True,
                     rho_ratio: float = 1 / 8, n_frames: int = 5000,
                     symbol_model: str = "expected") -> Dataset:
    """Labeled samples ``(X, Y_m)`` from simulated sensing intervals.

    Every interval draws a scenario, ``alpha`` and per-user ``v``, then
    contributes one row per user.  With ``impaired`` the link runs at
    ``rho_ratio`` of the nominal SNR and the MSE label is the measured
    (demodulation-based) one; otherwise the ratio is 1 and the label is the
    true MSE.
    """
    if n_samples < 1:
        raise InvalidArgument("n_samples must be positive")
    ranges = ScenarioRanges() if ranges is None else ranges
    ratio = rho_ratio if impaired else 1.0
    X, Y = [], []
    n = 0
    while n < n_samples:
        scn = draw_scenario(case_id, rng, ranges, rho_ratio=ratio, n_frames=n_frames)
        alpha = ranges.sample_alpha(rng)
        v = rng.uniform(*ranges.v, size=scn.cfg.K)
        try:
            prof = scn.profile(alpha)
        except NumericalFailure:
            continue
        ind = sense_indicators(scn.link(), alpha, v, prof.psi0, rng, symbol_model=symbol_model,
                               impaired=impaired)
        X.append(build_inputs(scn, alpha, scn.tau, v, prof))
        Y.append(np.column_stack([ind.gamma, ind.mse_meas if impaired else ind.mse_true]))
        n += scn.cfg.K
    return Dataset(case_id, np.concatenate(X)[:n_samples], np.concatenate(Y)[:n_samples])


# ---------------------------------------------------------------------------
# models
# ---------------------------------------------------------------------------

@dataclass
class PredictorModel:
    variant: str
    case_id: int
    net: DenseNet | None = None
    x_mean: np.ndarray | None = None
    x_std: np.ndarray | None = None
    y_mean: np.ndarray = field(default_factory=lambda: np.zeros(2))
    y_std: np.ndarray = field(default_factory=lambda: np.ones(2))

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise InvalidArgument(f"unknown variant {self.variant!r}")
        if self.case_id not in de.FEATURES:
            raise InvalidArgument(f"unknown case {self.case_id}")
        d = len(de.FEATURES[self.case_id])
        if self.x_mean is None:
            self.x_mean, self.x_std = np.zeros(d), np.ones(d)

    @property
    def n_features(self) -> int:
        return len(de.FEATURES[self.case_id])

    @property
    def learnable(self) -> bool:
        return self.variant != "model_driven"

    def copy(self) -> "PredictorModel":
        return PredictorModel(self.variant, self.case_id, None if self.net is None else self.net.copy(),
                              self.x_mean.copy(), self.x_std.copy(), self.y_mean.copy(), self.y_std.copy())

    def standardize(self, X):
        return (X - self.x_mean) / self.x_std

    def save(self, path) -> None:
        """Network file at ``path`` plus standardization stats in ``path.stats.csv``."""
        if self.net is None:
            raise InvalidArgument("model_driven predictors have nothing to save")
        save_net(self.net, path)
        with open(f"{path}.stats.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["variant", self.variant, "case_id", self.case_id])
            for name in ("x_mean", "x_std", "y_mean", "y_std"):
                w.writerow([name, *(repr(float(a)) for a in getattr(self, name))])

    @classmethod
    def load(cls, path) -> "PredictorModel":
        with open(f"{path}.stats.csv", newline="") as fh:
            rows = list(csv.reader(fh))
        stats = {r[0]: np.array([float(a) for a in r[1:]]) for r in rows[1:]}
        return cls(rows[0][1], int(rows[0][3]), load_net(path), **stats)


def make_predictor(variant: str, case_id: int, rng: np.random.Generator | None = None,
                   hidden: int | None = None) -> PredictorModel:
    """Untrained predictor with the case's default trunk depth."""
    model = PredictorModel(variant, case_id)
    if model.learnable:
        depth = HIDDEN_LAYERS[case_id] if hidden is None else hidden
        model.net = pp_net(model.n_features, HEAD_WIDTH[variant], depth, rng=rng,
                           zero_output=variant != "data_driven")
    return model


def _check_layout(model: PredictorModel, X) -> np.ndarray:
    if isinstance(X, de.InputVector):
        if X.case_id != model.case_id:
            raise InvalidArgument(f"input is laid out for case {X.case_id}, model for {model.case_id}")
        X = X.as_array()
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if X.shape[1] != model.n_features:
        raise InvalidArgument(f"case {model.case_id} inputs have {model.n_features} entries, got {X.shape[1]}")
    return X


def _combine(model: PredictorModel, out, h):
    """Indicators from head outputs and model part, plus the (w, b) used."""
    v = model.variant
    ones, zeros = np.ones_like(h), np.zeros_like(h)
    if v == "dual_wb":
        return 1 + out[:, :2], model.y_std * out[:, 2:]
    if v == "dual_w":
        return 1 + out, zeros
    if v == "dual_b":
        return ones, model.y_std * out
    raise AssertionError(v)


def predict(model: PredictorModel, X) -> tuple[np.ndarray, np.ndarray]:
    """Predicted ``(gamma_p, mse_p)`` for one input vector or a row stack."""
    X = _check_layout(model, X)
    h = np.column_stack(de.model_indicators(model.case_id, X))
    if model.variant == "model_driven":
        Y = h
    else:
        out = model.net.forward(model.standardize(X), "infer")
        if model.variant == "data_driven":
            Y = model.y_mean + model.y_std * out
        else:
            w, b = _combine(model, out, h)
            Y = w * h + b
    return Y[:, 0], Y[:, 1]


def predict_gradient_v(model: PredictorModel, X, *, second: bool = False):
    """Exact ``d mse_p / d v`` (and optionally the second derivative).

    The network is piecewise linear in its input at inference, so its
    second derivative vanishes almost everywhere and only the model part
    and the product rule contribute to the curvature.
    """
    X = _check_layout(model, X)
    h1, h2 = de.model_mse_grad_v(model.case_id, X)
    h2 = np.broadcast_to(h2, h1.shape)
    if model.variant == "model_driven":
        return (h1, h2) if second else h1
    n = X.shape[0]
    net = model.net
    out = net.forward(model.standardize(X), "infer")
    scale = 1.0 / model.x_std[-1]

    def dout_dv(col):
        up = np.zeros((n, net.out_width))
        up[:, col] = 1.0
        return net.backward(up)[1][:, -1] * scale

    if model.variant == "data_driven":
        g = model.y_std[1] * dout_dv(1)
        return (g, np.zeros(n)) if second else g
    h = de.model_indicators(model.case_id, X)[1]
    w, _ = _combine(model, out, np.column_stack([h, h]))
    w = w[:, 1]
    dw = dout_dv(1) if model.variant in ("dual_wb", "dual_w") else np.zeros(n)
    if model.variant == "dual_wb":
        db = model.y_std[1] * dout_dv(3)
    elif model.variant == "dual_b":
        db = model.y_std[1] * dout_dv(1)
    else:
        db = np.zeros(n)
    g = dw * h + w * h1 + db
    if second:
        return g, 2 * dw * h1 + w * h2
    return g


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

@dataclass
class FittingReport:
    variant: str
    case_id: int
    train: np.ndarray  # per-indicator mean squared standardized error
    val: np.ndarray
    test: np.ndarray
    n_train: int
    n_test: int
    trace: TrainingTrace | None = None

    @property
    def test_error(self) -> float:
        return float(self.test.sum())


@dataclass
class TrainingConfig:
    lr: float = 1e-3
    batch_size: int = 64
    epochs: int = 300
    tol: float = 1e-6
    patience: int = 20


def split_indices(n: int, rng: np.random.Generator, fractions=(0.8, 0.1, 0.1)):
    order = rng.permutation(n)
    a = int(round(fractions[0] * n))
    b = a + int(round(fractions[1] * n))
    return order[:a], order[a:b], order[b:]


def fitting_errors(model: PredictorModel, data: Dataset, y_std) -> np.ndarray:
    """Per-indicator mean squared error in units of the label spread ``y_std``."""
    if len(data) == 0:
        return np.full(2, np.nan)
    Y = np.column_stack(predict(model, data.X))
    return np.mean(((Y - data.Y) / y_std) ** 2, axis=0)


def _residual_loss(model: PredictorModel):
    ys = model.y_std

    def loss(out, y, h):
        if model.variant == "data_driven":
            Y = model.y_mean + ys * out
        else:
            w, b = _combine(model, out, h)
            Y = w * h + b
        r = (Y - y) / ys
        n = out.shape[0]
        dY = 2 * r / ys / n
        if model.variant == "data_driven":
            d = dY * ys
        elif model.variant == "dual_wb":
            d = np.concatenate([dY * h, dY * ys], axis=1)
        elif model.variant == "dual_w":
            d = dY * h
        else:
            d = dY * ys
        return float(np.sum(r**2) / n), d

    return loss


def train_predictor(model: PredictorModel, data: Dataset, rng: np.random.Generator, *,
                    config: TrainingConfig | None = None, fractions=(0.8, 0.1, 0.1),
                    refit_stats: bool = True) -> FittingReport:
    """Fit the learnable part by mini-batch gradient descent on standardized residuals.

    ``refit_stats=False`` keeps the model's current standardization (used
    when warm-starting on a new dataset).
    """
    if not model.learnable:
        raise InvalidArgument("model_driven predictors have nothing to train")
    if data.case_id != model.case_id:
        raise InvalidArgument("dataset and model are for different cases")
    if len(data) == 0:
        raise InvalidArgument("empty dataset")
    cfg = TrainingConfig() if config is None else config
    tr, va, te = split_indices(len(data), rng, fractions)
    train = data.subset(tr)
    if refit_stats:
        model.x_mean = train.X.mean(axis=0)
        sd = train.X.std(axis=0)
        model.x_std = np.where(sd > 1e-12, sd, 1.0)
        model.y_mean = train.Y.mean(axis=0)
        sd = train.Y.std(axis=0)
        model.y_std = np.where(sd > 1e-12, sd, 1.0)
        # the input BN starts from the frozen training statistics
        model.net.bn_stats[0] = [np.zeros(model.n_features), np.ones(model.n_features)]
    h = np.column_stack(de.model_indicators(model.case_id, train.X))
    trace = train_mbgd(model.net, model.standardize(train.X), train.Y, lr=cfg.lr,
                       batch_size=cfg.batch_size, epochs=cfg.epochs, rng=rng,
                       loss=_residual_loss(model), aux=h, tol=cfg.tol, patience=cfg.patience)
    ys = model.y_std
    return FittingReport(model.variant, model.case_id,
                         fitting_errors(model, train, ys), fitting_errors(model, data.subset(va), ys),
                         fitting_errors(model, data.subset(te), ys), len(tr), len(te), trace)
