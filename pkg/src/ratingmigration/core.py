"""Rating scales and the two data paradigms: discrete panels and event histories.

State indices are 0-based internally; index ``h - 1`` is the absorbing default
state. All files and JSON documents refer to states by label.
"""

from __future__ import annotations

import csv
import json
import math
from collections import defaultdict
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import DataError

CENSORED = "censored"
DEFAULTED = "defaulted"
OPEN = "open"
_TERMINAL_KINDS = (CENSORED, DEFAULTED, OPEN)

MOODYS_LABELS = ("Aaa", "Aa", "A", "Baa", "Ba", "B", "Caa", "Ca", "C")


def _frozen_array(values, dtype=float) -> np.ndarray:
    arr = np.array(values, dtype=dtype)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class RatingScale:
    """Ordered rating labels, best first, with the default state last.

    ``investment_cutoff`` is the 0-based index of the worst investment grade.
    When omitted, the first ``(h - 1) // 2`` ratings are investment grade.
    """

    labels: tuple[str, ...]
    investment_cutoff: int | None = None
    withdrawal_label: str = "WR"

    def __post_init__(self):
        labels = tuple(str(x) for x in self.labels)
        object.__setattr__(self, "labels", labels)
        h = len(labels)
        if h < 2:
            raise DataError("a rating scale needs at least two states")
        if len(set(labels)) != h:
            raise DataError(f"rating labels must be distinct: {labels}")
        if self.withdrawal_label in labels:
            raise DataError("the withdrawal label cannot also be a rating")
        cut = self.investment_cutoff
        if cut is None:
            cut = max((h - 1) // 2 - 1, 0)
        cut = int(cut)
        if not 0 <= cut < h - 1:
            raise DataError(f"investment cutoff {cut} outside [0, {h - 2}]")
        object.__setattr__(self, "investment_cutoff", cut)

    @property
    def h(self) -> int:
        return len(self.labels)

    @property
    def default(self) -> int:
        return self.h - 1

    @property
    def default_label(self) -> str:
        return self.labels[-1]

    def index(self, label: str) -> int:
        try:
            return self.labels.index(label)
        except ValueError:
            raise DataError(f"unknown rating label {label!r}") from None

    def is_investment(self, state: int) -> bool:
        return state <= self.investment_cutoff

    def channel(self, state: int) -> int:
        """Momentum channel of a downgrade leaving ``state``: 0 investment, 1 speculative."""
        return 0 if state <= self.investment_cutoff else 1

    @classmethod
    def moodys(cls) -> "RatingScale":
        """The aggregated nine-state Moody's scale, Aaa..Ca plus default C."""
        return cls(MOODYS_LABELS)

    def to_dict(self) -> dict:
        return {"labels": list(self.labels), "default": self.default_label,
                "withdrawal": self.withdrawal_label,
                "investment_cutoff": self.labels[self.investment_cutoff]}

    @classmethod
    def from_dict(cls, doc: dict) -> "RatingScale":
        labels = list(doc["labels"])
        default = doc.get("default")
        if default is not None:
            if default in labels:
                if labels[-1] != default:
                    raise DataError("the default label must be the last label")
            else:
                labels.append(default)
        cut = doc.get("investment_cutoff")
        if isinstance(cut, str):
            if cut not in labels:
                raise DataError(f"unknown investment cutoff label {cut!r}")
            cut = labels.index(cut)
        return cls(tuple(labels), cut, doc.get("withdrawal", "WR"))


def load_scale(path) -> RatingScale:
    with open(path) as fh:
        return RatingScale.from_dict(json.load(fh))


def save_scale(scale: RatingScale, path) -> None:
    with open(path, "w") as fh:
        json.dump(scale.to_dict(), fh, indent=2)


# --------------------------------------------------------------------------
# Discrete panels
# --------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class PanelObservation:
    """Transition counts over one observation interval of length ``dt`` years."""

    dt: float
    counts: np.ndarray

    def __post_init__(self):
        dt = float(self.dt)
        if not (math.isfinite(dt) and dt > 0):
            raise DataError(f"observation interval must be positive, got {self.dt}")
        counts = np.array(self.counts, dtype=float)
        if counts.ndim != 2 or counts.shape[0] != counts.shape[1]:
            raise DataError("counts must be a square matrix")
        if not np.all(np.isfinite(counts)) or np.any(counts < 0):
            raise DataError("counts must be finite and non-negative")
        counts.setflags(write=False)
        object.__setattr__(self, "dt", dt)
        object.__setattr__(self, "counts", counts)


@dataclass(frozen=True, eq=False)
class DiscretePanel:
    """A sequence of discretely observed transition-count matrices.

    The default row may only carry the ``default -> default`` count. An
    all-zero panel is representable (the likelihood is then 0), but the
    parser and the EM fitter reject it.
    """

    scale: RatingScale
    observations: tuple[PanelObservation, ...]

    def __post_init__(self):
        obs = tuple(o if isinstance(o, PanelObservation) else PanelObservation(*o)
                    for o in self.observations)
        h = self.scale.h
        for u, o in enumerate(obs):
            if o.counts.shape != (h, h):
                raise DataError(f"observation {u}: counts shape {o.counts.shape} != ({h}, {h})")
            row = o.counts[h - 1, : h - 1]
            if np.any(row != 0):
                raise DataError(f"observation {u}: transitions out of the absorbing "
                                f"default state {self.scale.default_label!r}")
        object.__setattr__(self, "observations", obs)

    @property
    def total(self) -> float:
        return float(sum(o.counts.sum() for o in self.observations))

    def grouped(self) -> list[tuple[float, np.ndarray]]:
        """Counts summed over observations sharing the same interval length.

        The likelihood depends on the panel only through these sums, so every
        kernel works on the grouped form. Output is sorted by ``dt``.
        """
        acc: dict[float, np.ndarray] = {}
        for o in self.observations:
            if o.dt in acc:
                acc[o.dt] = acc[o.dt] + o.counts
            else:
                acc[o.dt] = np.array(o.counts)
        return [(dt, acc[dt]) for dt in sorted(acc)]

    def scaled(self, factor: float) -> "DiscretePanel":
        return DiscretePanel(self.scale, tuple(PanelObservation(o.dt, o.counts * factor)
                                               for o in self.observations))

    def __eq__(self, other):
        if not isinstance(other, DiscretePanel):
            return NotImplemented
        return (self.scale == other.scale
                and len(self.observations) == len(other.observations)
                and all(a.dt == b.dt and np.array_equal(a.counts, b.counts)
                        for a, b in zip(self.observations, other.observations)))


def parse_discrete_csv(path, scale: RatingScale) -> DiscretePanel:
    """Read a panel from a ``period,dt_years,from,to,count`` CSV.

    Rows whose ``from`` or ``to`` is the withdrawal label are dropped as
    censored observations. Periods are emitted in ascending period order.
    """
    h = scale.h
    periods: dict[str, dict] = {}
    order: list[str] = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        required = {"period", "dt_years", "from", "to", "count"}
        if reader.fieldnames is None or not required <= set(reader.fieldnames):
            raise DataError(f"{path}: header must contain {sorted(required)}")
        for lineno, row in enumerate(reader, start=2):
            period = (row["period"] or "").strip()
            if not period:
                raise DataError(f"{path}:{lineno}: missing period")
            dt_text = (row["dt_years"] or "").strip()
            if not dt_text:
                raise DataError(f"{path}:{lineno}: missing dt_years")
            try:
                dt = float(dt_text)
                count = float(row["count"])
            except ValueError as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from None
            if not (math.isfinite(dt) and dt > 0):
                raise DataError(f"{path}:{lineno}: dt_years must be positive")
            if not math.isfinite(count) or count < 0:
                raise DataError(f"{path}:{lineno}: negative or non-finite count")
            if count != int(count):
                raise DataError(f"{path}:{lineno}: count must be an integer")
            frm, to = row["from"].strip(), row["to"].strip()
            if frm == scale.withdrawal_label or to == scale.withdrawal_label:
                continue
            i, j = scale.index(frm), scale.index(to)
            if i == h - 1 and j != h - 1:
                raise DataError(f"{path}:{lineno}: transition out of absorbing state {frm!r}")
            if period not in periods:
                periods[period] = {"dt": dt, "counts": np.zeros((h, h))}
                order.append(period)
            elif periods[period]["dt"] != dt:
                raise DataError(f"{path}:{lineno}: inconsistent dt_years for period {period}")
            periods[period]["counts"][i, j] += count

    def key(p):
        try:
            return (0, float(p), p)
        except ValueError:
            return (1, 0.0, p)

    panel = DiscretePanel(scale, tuple(PanelObservation(periods[p]["dt"], periods[p]["counts"])
                                       for p in sorted(order, key=key)))
    if panel.total <= 0:
        raise DataError(f"{path}: panel contains no transitions")
    return panel


def write_discrete_csv(panel: DiscretePanel, path) -> None:
    labels = panel.scale.labels
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["period", "dt_years", "from", "to", "count"])
        for u, o in enumerate(panel.observations, start=1):
            for i, j in zip(*np.nonzero(o.counts)):
                w.writerow([u, repr(o.dt), labels[i], labels[j], int(o.counts[i, j])])


# --------------------------------------------------------------------------
# Continuous event histories
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class Terminal:
    """How an entity's observation ends: censored, defaulted, or open at window end."""

    kind: str
    time: float

    def __post_init__(self):
        if self.kind not in _TERMINAL_KINDS:
            raise DataError(f"terminal kind must be one of {_TERMINAL_KINDS}")
        object.__setattr__(self, "time", float(self.time))


@dataclass(frozen=True)
class EntityTrack:
    """One entity's continuously observed rating path.

    ``events`` holds ``(time, new_rating)`` pairs, strictly increasing in time
    and each changing the rating.
    """

    entity_id: str
    start_time: float
    start_rating: int
    events: tuple[tuple[float, int], ...]
    terminal: Terminal
    h: int = field(default=0, compare=False, repr=False)

    def __post_init__(self):
        events = tuple((float(t), int(r)) for t, r in self.events)
        object.__setattr__(self, "events", events)
        object.__setattr__(self, "start_time", float(self.start_time))
        object.__setattr__(self, "start_rating", int(self.start_rating))
        eid = self.entity_id
        prev_t, prev_r = self.start_time, self.start_rating
        default = self.h - 1 if self.h else None
        if default is not None and not 0 <= prev_r < default:
            raise DataError(f"entity {eid}: initial rating must be a non-default state")
        for t, r in events:
            if not t > prev_t:
                raise DataError(f"entity {eid}: event times must be strictly increasing "
                                f"(duplicate or unsorted time {t})")
            if r == prev_r:
                raise DataError(f"entity {eid}: rating change to the same rating at {t}")
            if default is not None:
                if not 0 <= r <= default:
                    raise DataError(f"entity {eid}: state {r} outside the scale")
                if prev_r == default:
                    raise DataError(f"entity {eid}: event after default at {t}")
            prev_t, prev_r = t, r
        term = self.terminal
        if term.time < prev_t:
            raise DataError(f"entity {eid}: event after terminal time {term.time}")
        if default is not None:
            if term.kind == DEFAULTED:
                if not events or events[-1][1] != default or events[-1][0] != term.time:
                    raise DataError(f"entity {eid}: defaulted terminal must coincide with "
                                    "a final jump into default")
            elif prev_r == default:
                raise DataError(f"entity {eid}: path reaches default but terminal is {term.kind}")

    @property
    def end_time(self) -> float:
        return self.terminal.time

    @property
    def final_rating(self) -> int:
        return self.events[-1][1] if self.events else self.start_rating

    def rating_at(self, t: float) -> int:
        """Rating at time ``t`` (right-continuous: an event at ``t`` is included)."""
        r = self.start_rating
        for et, er in self.events:
            if et <= t:
                r = er
            else:
                break
        return r

    def rating_before(self, t: float) -> int:
        """Left limit ``X(t-)``: rating just before ``t``."""
        r = self.start_rating
        for et, er in self.events:
            if et < t:
                r = er
            else:
                break
        return r

    def jumps(self) -> list[tuple[float, int, int]]:
        """``(time, from, to)`` for every event."""
        out, prev = [], self.start_rating
        for t, r in self.events:
            out.append((t, prev, r))
            prev = r
        return out

    def downgrades(self, before: float | None = None) -> list[tuple[float, int]]:
        """``(time, pre-downgrade rating)`` of downgrades strictly before ``before``."""
        return [(t, a) for t, a, b in self.jumps()
                if b > a and (before is None or t < before)]

    def segments(self) -> list[tuple[float, float, int]]:
        """Holding spells ``(start, end, rating)`` up to the terminal time."""
        out, t0, r = [], self.start_time, self.start_rating
        for t, nr in self.events:
            out.append((t0, t, r))
            t0, r = t, nr
        if self.terminal.time > t0:
            out.append((t0, self.terminal.time, r))
        return out


@dataclass(frozen=True, eq=False)
class EventHistory:
    """Continuously observed rating histories of many entities."""

    scale: RatingScale
    tracks: tuple[EntityTrack, ...]

    def __post_init__(self):
        h = self.scale.h
        tracks = []
        for tr in self.tracks:
            if tr.h != h:
                tr = EntityTrack(tr.entity_id, tr.start_time, tr.start_rating, tr.events,
                                 tr.terminal, h=h)
            tracks.append(tr)
        object.__setattr__(self, "tracks", tuple(tracks))

    def __len__(self):
        return len(self.tracks)

    def __eq__(self, other):
        if not isinstance(other, EventHistory):
            return NotImplemented
        return self.scale == other.scale and self.tracks == other.tracks

    @property
    def n_transitions(self) -> int:
        return sum(len(t.events) for t in self.tracks)

    @cached_property
    def table(self) -> "JumpTable":
        return JumpTable.from_history(self)


@dataclass(frozen=True, eq=False)
class JumpTable:
    """Flat array view of an event history for vectorized likelihoods.

    Jumps are listed entity by entity in time order. ``pair_*`` arrays index
    every (downgrade jump, strictly earlier downgrade of the same entity)
    combination, the only history terms the momentum intensity needs at a
    downgrade.
    """

    h: int
    entity: np.ndarray          # per jump
    time: np.ndarray
    frm: np.ndarray
    to: np.ndarray
    down: np.ndarray            # bool
    holding: np.ndarray         # (h,) total observed time per state
    end_time: np.ndarray        # per entity
    dg_entity: np.ndarray       # per downgrade: entity, channel, time to entity end
    dg_channel: np.ndarray
    dg_remaining: np.ndarray
    dg_jump: np.ndarray         # jump index of each downgrade
    pair_jump: np.ndarray       # jump index receiving momentum
    pair_channel: np.ndarray
    pair_lag: np.ndarray

    @classmethod
    def from_history(cls, history: EventHistory) -> "JumpTable":
        scale = history.scale
        h = scale.h
        entity, time, frm, to = [], [], [], []
        holding = np.zeros(h)
        end_time = np.empty(len(history.tracks))
        dg_e, dg_c, dg_rem, dg_j = [], [], [], []
        p_j, p_c, p_l = [], [], []
        k = 0
        for e, tr in enumerate(history.tracks):
            end_time[e] = tr.end_time
            for t0, t1, r in tr.segments():
                holding[r] += t1 - t0
            past: list[tuple[float, int]] = []
            for t, a, b in tr.jumps():
                entity.append(e)
                time.append(t)
                frm.append(a)
                to.append(b)
                if b > a:
                    for tau, ch in past:
                        p_j.append(k)
                        p_c.append(ch)
                        p_l.append(t - tau)
                    ch = scale.channel(a)
                    past.append((t, ch))
                    dg_e.append(e)
                    dg_c.append(ch)
                    dg_rem.append(tr.end_time - t)
                    dg_j.append(k)
                k += 1
        ia = lambda x: _frozen_array(x, dtype=np.int64)
        fa = _frozen_array
        frm_a, to_a = ia(frm), ia(to)
        return cls(h, ia(entity), fa(time), frm_a, to_a, _frozen_array(to_a > frm_a, bool),
                   _frozen_array(holding), _frozen_array(end_time),
                   ia(dg_e), ia(dg_c), fa(dg_rem), ia(dg_j), ia(p_j), ia(p_c), fa(p_l))

    @property
    def n_jumps(self) -> int:
        return len(self.time)

    def jump_counts(self) -> np.ndarray:
        K = np.zeros((self.h, self.h))
        np.add.at(K, (self.frm, self.to), 1.0)
        return K


def parse_continuous_csv(path, scale: RatingScale, window_end: float | None = None) -> EventHistory:
    """Read an ``entity_id,time_years,rating`` CSV into an :class:`EventHistory`.

    The first row of each entity is its initial rating. A withdrawal row
    censors the entity; a default row ends it as defaulted. Entities without
    either stay open until ``window_end``, which defaults to a leading
    ``# window_end_years=<t>`` comment when present, else to the latest time
    in the file.
    """
    rows: dict[str, list[tuple[float, str, int]]] = defaultdict(list)
    order: list[str] = []
    max_time = -math.inf
    header_end = None
    with open(path, newline="") as fh:
        lines = fh.read().splitlines()
    body = []
    for line in lines:
        s = line.strip()
        if s.startswith("#"):
            if "window_end_years=" in s:
                header_end = float(s.split("window_end_years=", 1)[1])
            continue
        if s:
            body.append(line)
    reader = csv.DictReader(body)
    required = {"entity_id", "time_years", "rating"}
    if reader.fieldnames is None or not required <= set(reader.fieldnames):
        raise DataError(f"{path}: header must contain {sorted(required)}")
    for lineno, row in enumerate(reader, start=2):
        eid = (row["entity_id"] or "").strip()
        if not eid:
            raise DataError(f"{path}:{lineno}: missing entity_id")
        try:
            t = float(row["time_years"])
        except (TypeError, ValueError):
            raise DataError(f"{path}:{lineno}: bad time_years {row['time_years']!r}") from None
        if not math.isfinite(t):
            raise DataError(f"{path}:{lineno}: non-finite time")
        label = (row["rating"] or "").strip()
        if label != scale.withdrawal_label:
            scale.index(label)
        if eid not in rows:
            order.append(eid)
        rows[eid].append((t, label, lineno))
        max_time = max(max_time, t)
    if not order:
        raise DataError(f"{path}: no rows")
    if window_end is None:
        window_end = header_end if header_end is not None else max_time
    tracks = [_track_from_rows(eid, rows[eid], scale, window_end, path) for eid in order]
    return EventHistory(scale, tuple(tracks))


def _track_from_rows(eid, entries, scale: RatingScale, window_end, path) -> EntityTrack:
    entries = sorted(entries, key=lambda r: (r[0], r[2]))
    for (t1, _, l1), (t2, _, l2) in zip(entries, entries[1:]):
        if t1 == t2:
            raise DataError(f"{path}:{l2}: entity {eid} has duplicate timestamp {t2}")
    t0, first, _ = entries[0]
    if first == scale.withdrawal_label or first == scale.default_label:
        raise DataError(f"{path}: entity {eid} must start in a non-default rating")
    start = scale.index(first)
    events, terminal, prev = [], None, start
    for t, label, lineno in entries[1:]:
        if terminal is not None:
            raise DataError(f"{path}:{lineno}: entity {eid} has rows after "
                            f"{terminal.kind} at {terminal.time}")
        if label == scale.withdrawal_label:
            terminal = Terminal(CENSORED, t)
            continue
        r = scale.index(label)
        if r == prev:
            raise DataError(f"{path}:{lineno}: entity {eid} rating change to the same rating")
        events.append((t, r))
        prev = r
        if r == scale.default:
            terminal = Terminal(DEFAULTED, t)
    if terminal is None:
        last = events[-1][0] if events else t0
        if window_end < last:
            raise DataError(f"{path}: entity {eid} has events after the window end {window_end}")
        terminal = Terminal(OPEN, window_end)
    return EntityTrack(eid, t0, start, tuple(events), terminal, h=scale.h)


def write_continuous_csv(history: EventHistory, path) -> None:
    """Write ``history`` in the event CSV schema; inverse of :func:`parse_continuous_csv`.

    Open tracks must share a window end, which is recorded in a leading
    comment line so the file round-trips.
    """
    labels = history.scale.labels
    open_ends = {tr.end_time for tr in history.tracks if tr.terminal.kind == OPEN}
    if len(open_ends) > 1:
        raise DataError("open tracks with different window ends cannot be written to one CSV")
    with open(path, "w", newline="") as fh:
        if open_ends:
            fh.write(f"# window_end_years={next(iter(open_ends))!r}\n")
        w = csv.writer(fh)
        w.writerow(["entity_id", "time_years", "rating"])
        for tr in history.tracks:
            w.writerow([tr.entity_id, repr(tr.start_time), labels[tr.start_rating]])
            for t, r in tr.events:
                w.writerow([tr.entity_id, repr(t), labels[r]])
            if tr.terminal.kind == CENSORED:
                w.writerow([tr.entity_id, repr(tr.terminal.time), history.scale.withdrawal_label])


def discretize(history: EventHistory, grid_step: float, window: tuple[float, float] | None = None,
               reseed_defaults: bool = False) -> DiscretePanel:
    """Cohort-style discretization of an event history onto a regular grid.

    For each interval ``[a, b]`` the rating at ``a`` is paired with the rating
    at ``b`` (endpoint sampling; intermediate jumps are invisible). Entities
    must be observed over the whole interval; an entity censored inside an
    interval contributes nothing from then on. Defaulted entities are held at
    default for the remaining intervals unless ``reseed_defaults`` is set, in
    which case they leave the panel after their default interval.
    """
    if not grid_step > 0:
        raise DataError("grid_step must be positive")
    scale = history.scale
    h = scale.h
    if window is None:
        lo = min(tr.start_time for tr in history.tracks)
        hi = max(tr.end_time for tr in history.tracks)
        window = (lo, hi)
    t0, t1 = map(float, window)
    n_int = int(math.floor((t1 - t0) / grid_step + 1e-9))
    if n_int < 1:
        raise DataError("window shorter than one grid step")
    grid = t0 + grid_step * np.arange(n_int + 1)
    counts = np.zeros((n_int, h, h))
    for tr in history.tracks:
        defaulted_at = tr.end_time if tr.terminal.kind == DEFAULTED else None
        for u in range(n_int):
            a, b = grid[u], grid[u + 1]
            if tr.start_time > a:
                continue
            if defaulted_at is not None and defaulted_at <= a:
                if reseed_defaults:
                    break
                counts[u, h - 1, h - 1] += 1
                continue
            if defaulted_at is None and tr.end_time < b:
                break
            counts[u, tr.rating_at(a), tr.rating_at(b)] += 1
    if counts.sum() == 0:
        raise DataError("no entity is observed over any interval of the window")
    obs = tuple(PanelObservation(grid_step, counts[u]) for u in range(n_int))
    return DiscretePanel(scale, obs)
