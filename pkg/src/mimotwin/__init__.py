"""Digital twin of an imperfect RZF-precoded MU-MISO downlink.

Deterministic-equivalent performance formulas refined by a small learned
correction, plus the sensing / estimation / optimization pipeline that runs
on top of the learned predictor.
"""

from .errors import InvalidArgument, NumericalFailure

__version__ = "0.1.0"

__all__ = ["InvalidArgument", "NumericalFailure", "__version__"]
