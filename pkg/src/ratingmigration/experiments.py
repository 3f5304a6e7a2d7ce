"""Scripted experiments that are not acceptance-gated."""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass

import numpy as np

from .core import DiscretePanel
from .ctmc import GeneratorMatrix, allowed_pairs
from .em import EmConfig, em_fit
from .errors import BoundaryWarning, NumericalError
from .simulate import simulate_panel
from .wald import hessian, wald_intervals


@dataclass(frozen=True)
class InformationRow:
    horizon: int
    source: str
    target: str
    truth: float
    estimate: float
    lower: float
    upper: float


def information_study(Q: GeneratorMatrix, seed: int, n_per_rating: int = 250, years: int = 50,
                      horizons=(5, 10, 20, 30, 40, 50), level: float = 0.95) -> list[InformationRow]:
    """Estimation error and Wald intervals as the observation span grows.

    Simulates one yearly count panel of ``years`` intervals and re-estimates
    the generator on each prefix of length ``horizons[k]``. Intervals shrink
    roughly like the inverse square root of the span. Prefixes whose Fisher
    information is singular are skipped.
    """
    full = simulate_panel(Q, n_per_rating, years, seed)
    rows = []
    labels = Q.scale.labels
    for H in horizons:
        if H > years:
            break
        panel = DiscretePanel(Q.scale, full.observations[:H])
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", BoundaryWarning)
            fit = em_fit(panel, EmConfig(tol=1e-11))
        pairs = allowed_pairs(fit.generator)
        try:
            iv = wald_intervals(fit.generator, hessian(fit.generator, panel, pairs), level)
        except NumericalError:
            continue
        for i, j in pairs:
            rows.append(InformationRow(H, labels[i], labels[j], float(Q.q[i, j]),
                                       float(fit.generator.q[i, j]), float(iv.lower[i, j]),
                                       float(iv.upper[i, j])))
    return rows


def write_information_rows(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["horizon", "from", "to", "truth", "estimate", "lower", "upper"])
        for r in rows:
            w.writerow([r.horizon, r.source, r.target, repr(r.truth), repr(r.estimate),
                        repr(r.lower), repr(r.upper)])


def mean_width(rows, horizon: int) -> float:
    w = [r.upper - r.lower for r in rows if r.horizon == horizon]
    return float(np.mean(w)) if w else float("nan")
