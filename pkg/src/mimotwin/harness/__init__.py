"""Experiment driver and command line interface."""

from .config import RunConfig, load_config, parse_config
from .experiments import ExperimentSpec, Workbench, run_experiment, stream

__all__ = ["RunConfig", "load_config", "parse_config", "ExperimentSpec", "Workbench",
           "run_experiment", "stream"]
