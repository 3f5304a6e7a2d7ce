"""Generator matrices, transition probabilities and CTMC likelihoods."""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .core import DiscretePanel, EventHistory, RatingScale
from .errors import DataError, ImpossibleTransitionError
from .matexp import expm

ALLOWED_THRESHOLD = 1e-8


@dataclass(frozen=True, eq=False)
class GeneratorMatrix:
    """A stable, conservative intensity matrix with an absorbing default row."""

    scale: RatingScale
    q: np.ndarray

    def __post_init__(self):
        q = np.array(self.q, dtype=float)
        h = self.scale.h
        if q.shape != (h, h):
            raise DataError(f"generator must be {h}x{h}, got {q.shape}")
        if not np.all(np.isfinite(q)):
            raise DataError("generator has non-finite entries")
        off = q[~np.eye(h, dtype=bool)]
        if np.any(off < 0):
            raise DataError("generator has negative off-diagonal entries")
        if np.any(np.diag(q) > 0):
            raise DataError("generator has positive diagonal entries")
        tol = 1e-12 * max(1.0, float(np.abs(q).max()))
        if np.any(np.abs(q.sum(axis=1)) > tol):
            raise DataError("generator rows must sum to zero")
        if np.any(q[h - 1] != 0):
            raise DataError("default row must be identically zero (absorbing)")
        q.setflags(write=False)
        object.__setattr__(self, "q", q)

    @classmethod
    def from_offdiagonal(cls, scale: RatingScale, rates) -> "GeneratorMatrix":
        """Build from off-diagonal rates; the diagonal is set so rows sum to zero.

        Negative rates and the default row are rejected rather than repaired.
        """
        q = np.array(rates, dtype=float)
        h = scale.h
        if q.shape != (h, h):
            raise DataError(f"generator must be {h}x{h}, got {q.shape}")
        np.fill_diagonal(q, 0.0)
        q[h - 1] = 0.0
        np.fill_diagonal(q, -q.sum(axis=1))
        return cls(scale, q)

    @property
    def h(self) -> int:
        return self.scale.h

    @property
    def intensities(self) -> np.ndarray:
        """``q_i = sum_{j != i} q_ij``."""
        return -np.diag(self.q).copy()

    def offdiagonal(self) -> np.ndarray:
        q = np.array(self.q)
        np.fill_diagonal(q, 0.0)
        return q

    def __eq__(self, other):
        if not isinstance(other, GeneratorMatrix):
            return NotImplemented
        return self.scale == other.scale and np.array_equal(self.q, other.q)

    def to_dict(self) -> dict:
        return {"labels": list(self.scale.labels), "q": self.q.tolist()}

    @classmethod
    def from_dict(cls, doc: dict, scale: RatingScale | None = None) -> "GeneratorMatrix":
        labels = tuple(doc["labels"])
        if scale is None:
            scale = RatingScale(labels)
        elif tuple(scale.labels) != labels:
            raise DataError(f"generator labels {labels} do not match scale {scale.labels}")
        return cls(scale, np.array(doc["q"], dtype=float))


def load_generator(path, scale: RatingScale | None = None) -> GeneratorMatrix:
    with open(path) as fh:
        return GeneratorMatrix.from_dict(json.load(fh), scale)


def save_generator(Q: GeneratorMatrix, path) -> None:
    with open(path, "w") as fh:
        json.dump(Q.to_dict(), fh, indent=2)


@dataclass(frozen=True)
class AllowedPairs:
    """Off-diagonal coordinates treated as free parameters, row-major."""

    pairs: tuple[tuple[int, int], ...]

    def __post_init__(self):
        object.__setattr__(self, "pairs", tuple((int(i), int(j)) for i, j in self.pairs))
        if not self.pairs:
            raise DataError("no allowed pairs")
        if any(i == j for i, j in self.pairs):
            raise DataError("allowed pairs cannot be diagonal")

    def __len__(self):
        return len(self.pairs)

    def __iter__(self):
        return iter(self.pairs)

    def as_array(self) -> np.ndarray:
        """The ``N_a x 2`` index matrix."""
        return np.array(self.pairs, dtype=int).reshape(-1, 2)

    def labelled(self, scale: RatingScale) -> list[tuple[str, str]]:
        return [(scale.labels[i], scale.labels[j]) for i, j in self.pairs]

    def values(self, Q: GeneratorMatrix) -> np.ndarray:
        a = self.as_array()
        return Q.q[a[:, 0], a[:, 1]].copy()

    def with_values(self, Q: GeneratorMatrix, values) -> GeneratorMatrix:
        """Copy of ``Q`` with the allowed entries replaced and the diagonal repaired."""
        return GeneratorMatrix.from_offdiagonal(Q.scale, self.raw_matrix(Q, values))

    def raw_matrix(self, Q: GeneratorMatrix, values) -> np.ndarray:
        # unvalidated: parametric resampling may produce negative rates
        q = Q.offdiagonal()
        a = self.as_array()
        q[a[:, 0], a[:, 1]] = values
        np.fill_diagonal(q, -q.sum(axis=1))
        return q


def tpm(Q: GeneratorMatrix, t: float) -> np.ndarray:
    """Transition probability matrix ``P(t) = exp(Q t)``."""
    if t < 0:
        raise DataError("horizon must be non-negative")
    P = expm(Q.q, t)
    # exact absorbing row; expm round-off is ~1e-16 there anyway
    P[Q.h - 1] = 0.0
    P[Q.h - 1, Q.h - 1] = 1.0
    return P


def _impossible_cells(N, P, scale, dt):
    bad = np.argwhere((N > 0) & (P <= 0))
    return [(scale.labels[i], scale.labels[j]) for i, j in bad]


def panel_log_likelihood(Q: GeneratorMatrix, panel: DiscretePanel) -> float:
    """``sum_u sum_sr N_sr(u) log exp(Q dt_u)_sr``.

    Zero-count cells contribute nothing. An observed transition with zero
    probability raises :class:`ImpossibleTransitionError` listing the cells.
    """
    if panel.scale.labels != Q.scale.labels:
        raise DataError("panel and generator use different scales")
    total = 0.0
    for dt, N in panel.grouped():
        P = expm(Q.q, dt)
        mask = N > 0
        if np.any(P[mask] <= 0):
            cells = _impossible_cells(N, P, Q.scale, dt)
            raise ImpossibleTransitionError(
                f"{len(cells)} observed transition(s) impossible under the generator",
                cells, {"dt": dt})
        total += float(np.sum(N[mask] * np.log(P[mask])))
    return total


def allowed_pairs(Q: GeneratorMatrix, threshold: float = ALLOWED_THRESHOLD) -> AllowedPairs:
    """Off-diagonal, non-default-row entries with ``q_ij > threshold``."""
    if not threshold > 0:
        raise DataError("threshold must be positive")
    h = Q.h
    pairs = [(i, j) for i in range(h - 1) for j in range(h) if i != j and Q.q[i, j] > threshold]
    if not pairs:
        raise DataError(f"no generator entry exceeds the threshold {threshold}")
    return AllowedPairs(tuple(pairs))


def complete_data_statistics(history: EventHistory, first_transition_only: bool = False):
    """Jump counts ``K_ij`` and holding times ``S_i`` of a fully observed history.

    With ``first_transition_only`` each entity contributes only its holding
    time up to (and the count of) its first jump.
    """
    h = history.scale.h
    K = np.zeros((h, h))
    S = np.zeros(h)
    if not first_transition_only:
        table = history.table
        return table.jump_counts(), np.array(table.holding)
    for tr in history.tracks:
        if tr.events:
            t, r = tr.events[0]
            K[tr.start_rating, r] += 1
            S[tr.start_rating] += t - tr.start_time
        else:
            S[tr.start_rating] += tr.end_time - tr.start_time
    return K, S


def mle_continuous(history: EventHistory, first_transition_only: bool = False) -> GeneratorMatrix:
    """Maximum-likelihood generator ``q_ij = K_ij / S_i`` from continuous data."""
    if len(history) == 0:
        raise DataError("empty history")
    K, S = complete_data_statistics(history, first_transition_only)
    if K.sum() == 0:
        raise DataError("history contains no transitions")
    rates = np.divide(K, S[:, None], out=np.zeros_like(K), where=S[:, None] > 0)
    return GeneratorMatrix.from_offdiagonal(history.scale, rates)


def complete_data_log_likelihood(Q: GeneratorMatrix, history: EventHistory) -> float:
    """``sum_ij K_ij log q_ij - sum_i q_i S_i`` for a fully observed history."""
    K, S = complete_data_statistics(history)
    off = Q.offdiagonal()
    mask = K > 0
    if np.any(off[mask] <= 0):
        bad = np.argwhere(mask & (off <= 0))
        raise ImpossibleTransitionError(
            "observed jump with zero generator rate",
            [(Q.scale.labels[i], Q.scale.labels[j]) for i, j in bad])
    return float(np.sum(K[mask] * np.log(off[mask])) - np.dot(Q.intensities, S))
