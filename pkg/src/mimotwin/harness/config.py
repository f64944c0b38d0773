"""Run configuration and its flat ``key = value`` file format.

Blank lines and lines starting with ``#`` are ignored.  Keys are the field
names of :class:`RunConfig`; values are parsed according to the field type.
Tuples are comma separated.  Unknown keys are rejected.

Example::

    seed = 7
    samples = 2000
    frames = 5000
    draws = 200
    ratios_db = -20, -17, -13, -10, -7, -3, 0
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields

from ..errors import InvalidArgument
from ..optimizer import GridSearchConfig
from ..predictor import ScenarioRanges, TrainingConfig


@dataclass
class RunConfig:
    seed: int = 0
    # scenario ranges
    tau_lo: float = 0.1
    tau_hi: float = 0.4
    p_db_lo: float = 6.0
    p_db_hi: float = 20.0
    alpha_lo: float = 1e-3
    alpha_hi: float = 2.0
    v_lo: float = 0.1
    v_hi: float = 3.0
    # link simulation
    frames: int = 5000
    rho_ratio_db: float = -9.0
    # datasets and predictor training
    samples: int = 10000
    lr: float = 1e-3
    batch_size: int = 64
    epochs: int = 300
    tol: float = 1e-6
    patience: int = 20
    # search grids
    tau_div: int = 10
    tau_iter: int = 2
    alpha_div: int = 10
    alpha_iter: int = 2
    oracle_div: int = 10
    oracle_iter: int = 4
    # sensing and scaling
    alpha0: float = 0.1
    v0: float = 1.0
    L: int = 5
    eta_pool: int = 1000
    eta_epochs: int = 100
    eta_lr: float = 1e-2
    eta_small: float = 0.01
    eta_large: float = 0.3
    # experiments
    draws: int = 200
    eta_points: int = 100
    ratios_db: tuple = (-20.0, -17.0, -13.0, -10.0, -7.0, -3.0, 0.0)
    sweep_case: int = 4
    sweep_draws: int = 100
    online_case: int = 2
    online_intervals: int = 20
    online_sizes: tuple = (100, 1000, 10000)
    online_draws: int = 20

    def __post_init__(self):
        if self.samples < 1 or self.frames < 1 or self.draws < 1:
            raise InvalidArgument("samples, frames and draws must be positive")

    @property
    def rho_ratio(self) -> float:
        return 10 ** (self.rho_ratio_db / 10)

    def ranges(self) -> ScenarioRanges:
        return ScenarioRanges(tau=(self.tau_lo, self.tau_hi), P_db=(self.p_db_lo, self.p_db_hi),
                              alpha=(self.alpha_lo, self.alpha_hi), v=(self.v_lo, self.v_hi))

    def training(self) -> TrainingConfig:
        return TrainingConfig(lr=self.lr, batch_size=self.batch_size, epochs=self.epochs,
                              tol=self.tol, patience=self.patience)

    def tau_grid(self) -> GridSearchConfig:
        return GridSearchConfig(self.tau_lo, self.tau_hi, self.tau_div, self.tau_iter)

    def alpha_grid(self) -> GridSearchConfig:
        return GridSearchConfig(self.alpha_lo, self.alpha_hi, self.alpha_div, self.alpha_iter)

    def oracle_grid(self) -> GridSearchConfig:
        return GridSearchConfig(self.alpha_lo, self.alpha_hi, self.oracle_div, self.oracle_iter)

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    def as_dict(self) -> dict:
        return {f.name: list(v) if isinstance(v := getattr(self, f.name), tuple) else v
                for f in fields(self)}


def _parse_value(name: str, kind, text: str):
    kind = kind if isinstance(kind, str) else kind.__name__
    try:
        if kind == "int":
            return int(text)
        if kind == "float":
            return float(text)
        if kind == "tuple":
            items = [t.strip() for t in text.split(",") if t.strip()]
            return tuple(int(t) if t.lstrip("-").isdigit() else float(t) for t in items)
    except ValueError as exc:
        raise InvalidArgument(f"bad value for {name}: {text!r}") from exc
    return text


def parse_config(text: str, base: RunConfig | None = None) -> RunConfig:
    kinds = {f.name: f.type for f in fields(RunConfig)}
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise InvalidArgument(f"line {lineno}: expected key = value")
        key, val = (s.strip() for s in line.split("=", 1))
        if key not in kinds:
            raise InvalidArgument(f"line {lineno}: unknown key {key!r}")
        values[key] = _parse_value(key, kinds[key], val)
    return dataclasses.replace(base or RunConfig(), **values)


def load_config(path) -> RunConfig:
    with open(path) as fh:
        return parse_config(fh.read())


def dump_config(cfg: RunConfig) -> str:
    lines = []
    for k, v in cfg.as_dict().items():
        lines.append(f"{k} = {', '.join(map(str, v)) if isinstance(v, list) else v}")
    return "\n".join(lines) + "\n"
