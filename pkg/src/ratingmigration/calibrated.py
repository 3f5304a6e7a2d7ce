"""Reference calibration of the momentum model on the Aaa..C scale.

The baseline rates are stated to four decimals, so rows do not sum to zero
exactly; the diagonal is recomputed from the off-diagonal rates.
"""

from __future__ import annotations

import numpy as np

from .core import RatingScale
from .ctmc import GeneratorMatrix
from .momentum import MomentumModel, MomentumParams

_RATES = np.array([
    [0, 0.0836, 0.0031, 0, 0.0002, 0, 0, 0, 0],
    [0.0117, 0, 0.0942, 0.0025, 0.0003, 0.0001, 0, 0, 0],
    [0.0006, 0.0240, 0, 0.0666, 0.0017, 0.0007, 0.0002, 0, 0],
    [0.0002, 0.0016, 0.0387, 0, 0.0496, 0.0040, 0.0006, 0.0000, 0],
    [0.0001, 0.0006, 0.0033, 0.0636, 0, 0.1060, 0.0037, 0.0001, 0],
    [0.0000, 0.0003, 0.0012, 0.0035, 0.0503, 0, 0.1012, 0.0040, 0.0004],
    [0, 0.0002, 0.0001, 0.0013, 0.0048, 0.1028, 0, 0.0622, 0.0261],
    [0, 0, 0.0018, 0.0029, 0.0050, 0.0447, 0.1346, 0, 0.0948],
    [0, 0, 0, 0, 0, 0, 0, 0, 0],
])

ALPHA = (0.031, 0.1291)
BETA = (3.5234, 1.7095)


def reference_generator(scale: RatingScale | None = None) -> GeneratorMatrix:
    """Baseline generator of the reference calibration."""
    return GeneratorMatrix.from_offdiagonal(scale or RatingScale.moodys(), _RATES)


def reference_model(scale: RatingScale | None = None) -> MomentumModel:
    """Baseline generator plus momentum ``alpha=(0.031, 0.1291)``, ``beta=(3.5234, 1.7095)``."""
    return MomentumModel(reference_generator(scale), MomentumParams(ALPHA, BETA))
