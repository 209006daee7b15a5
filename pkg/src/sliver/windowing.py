"""Turn impression sessions into time-ordered labelled training samples.

Three paradigms:

* fixed window from the request (one hour by default): one sample at
  ``request_ts + w`` if the impression happened inside the window;
* fixed window from the impression (five minutes): one sample at
  ``impression_ts + w``;
* sliding window on a uniform grid (30 s, "Sliver"): positives at the end of
  the grid cell containing the behaviour, negatives at the end of the cell
  containing an observed exit. Cells where the user is still watching and
  nothing happened emit nothing.

Fixed windows are open intervals ``(start, start + w)``; a behaviour exactly on
the boundary counts as outside. Sliding cells are half-open
``[mu_{k-1}, mu_k)``.
"""

from __future__ import annotations

import csv
import enum
from dataclasses import dataclass
from typing import Iterator, Sequence

import numpy as np

from . import kernels
from .events import TASK_NAMES, ImpressionSession, SessionTable, as_table

HOUR_MS = 3600 * 1000
FIVE_MIN_MS = 5 * 60 * 1000
SLIVER_MS = 30 * 1000


class TaskLabel(enum.IntEnum):
    POSITIVE = 1
    NEGATIVE = 0
    ABSENT = -1

    def to_field(self) -> str:
        return {1: "+1", 0: "-1", -1: ""}[int(self)]

    @classmethod
    def from_field(cls, s: str) -> "TaskLabel":
        s = s.strip().lower()
        if s in ("+1", "1"):
            return cls.POSITIVE
        if s == "-1":
            return cls.NEGATIVE
        if s in ("", "absent"):
            return cls.ABSENT
        raise ValueError(f"bad label field {s!r}")


@dataclass(frozen=True)
class FixedFromRequest:
    window_ms: int = HOUR_MS
    name = "one-hour"

    def __post_init__(self):
        if self.window_ms <= 0:
            raise ValueError("window must be positive")


@dataclass(frozen=True)
class FixedFromImpression:
    window_ms: int = FIVE_MIN_MS
    name = "five-minute"

    def __post_init__(self):
        if self.window_ms <= 0:
            raise ValueError("window must be positive")


@dataclass(frozen=True)
class Sliding:
    window_ms: int = SLIVER_MS
    t_uni: int = 0
    name = "sliver"

    def __post_init__(self):
        if self.window_ms <= 0:
            raise ValueError("window must be positive")


WindowPolicy = FixedFromRequest | FixedFromImpression | Sliding
PARADIGMS = ("one-hour", "five-minute", "sliver")


def policy_from_name(name: str, window_ms: int | None = None, t_uni_ms: int | None = None) -> WindowPolicy:
    if name == "one-hour":
        return FixedFromRequest(window_ms or HOUR_MS)
    if name == "five-minute":
        return FixedFromImpression(window_ms or FIVE_MIN_MS)
    if name == "sliver":
        return Sliding(window_ms or SLIVER_MS, t_uni_ms or 0)
    raise ValueError(f"unknown paradigm {name!r}; expected one of {', '.join(PARADIGMS)}")


def policy_to_dict(policy: WindowPolicy) -> dict:
    d = {"paradigm": policy.name, "window_ms": int(policy.window_ms)}
    if isinstance(policy, Sliding):
        d["t_uni_ms"] = int(policy.t_uni)
    return d


def window_index(t_uni: int, w_s: int, ts: int) -> tuple[int, int]:
    """Grid cell of ``ts``: ``k = floor((ts - t_uni) / w_s) + 1`` and its end ``mu_k``."""
    if ts < t_uni:
        raise ValueError(f"ts {ts} precedes the grid origin {t_uni}")
    if w_s <= 0:
        raise ValueError("window must be positive")
    k = (ts - t_uni) // w_s + 1
    return int(k), int(t_uni + k * w_s)


@dataclass(frozen=True)
class LabeledSample:
    session: ImpressionSession
    click: TaskLabel
    follow: TaskLabel
    like: TaskLabel
    emit_ts: int
    window_id: int | None
    snapshot_ts: int

    @property
    def labels(self) -> tuple[TaskLabel, TaskLabel, TaskLabel]:
        return (self.click, self.follow, self.like)


class SampleStream(Sequence[LabeledSample]):
    """μ-ordered labelled samples over a :class:`SessionTable`."""

    def __init__(self, sessions: SessionTable, session_idx, emit_ts, window_id, labels, policy=None,
                 snapshot_ts=None):
        self.sessions = sessions
        self.session_idx = np.asarray(session_idx, dtype=np.int64)
        self.emit_ts = np.asarray(emit_ts, dtype=np.int64)
        self.window_id = np.asarray(window_id, dtype=np.int64)
        self.labels = np.asarray(labels, dtype=np.int8).reshape(-1, 3)
        self.snapshot_ts = (sessions.request_ts[self.session_idx] if snapshot_ts is None
                            else np.asarray(snapshot_ts, dtype=np.int64))
        self.policy = policy

    def __len__(self) -> int:
        return int(self.emit_ts.size)

    def __getitem__(self, i):
        if isinstance(i, slice):
            return self.take(np.arange(len(self))[i])
        i = int(i)
        k = int(self.window_id[i])
        return LabeledSample(self.sessions[int(self.session_idx[i])],
                             *(TaskLabel(int(v)) for v in self.labels[i]),
                             emit_ts=int(self.emit_ts[i]), window_id=None if k < 0 else k,
                             snapshot_ts=int(self.snapshot_ts[i]))

    def __iter__(self) -> Iterator[LabeledSample]:
        for i in range(len(self)):
            yield self[i]

    def take(self, idx) -> "SampleStream":
        return SampleStream(self.sessions, self.session_idx[idx], self.emit_ts[idx], self.window_id[idx],
                            self.labels[idx], self.policy, self.snapshot_ts[idx])

    def is_sorted(self) -> bool:
        return bool(np.all(np.diff(self.emit_ts) >= 0))


def _label_table(table: SessionTable, policy: WindowPolicy):
    n = len(table)
    if isinstance(policy, FixedFromRequest):
        start = table.request_ts
        emit = (table.impression_ts >= 0) & (table.impression_ts - table.request_ts < policy.window_ms)
    elif isinstance(policy, FixedFromImpression):
        start = table.impression_ts
        emit = table.impression_ts >= 0
    elif isinstance(policy, Sliding):
        if n and int(table.request_ts.min()) < policy.t_uni:
            raise ValueError("t_uni must not exceed the first event timestamp")
        sess, k, mu, labels = kernels.label_sliver(table.click_ts, table.follow_ts, table.like_ts,
                                                   table.exit_ts, table.censored, policy.window_ms,
                                                   policy.t_uni)
        return sess, mu, k, labels
    else:
        raise TypeError(f"not a window policy: {policy!r}")
    labels, mu = kernels.label_fixed(start, emit, table.click_ts, table.follow_ts, table.like_ts,
                                     policy.window_ms)
    sess = np.flatnonzero(emit)
    return sess, mu[sess], np.full(sess.size, -1, dtype=np.int64), labels[sess]


def produce_stream(sessions, policy: WindowPolicy) -> SampleStream:
    """Label every session under ``policy`` and merge all samples by emission time.

    Ties on μ fall back to session order (request time, then user, then live).
    """
    table = as_table(sessions)
    sess, mu, k, labels = _label_table(table, policy)
    order = np.lexsort((sess, mu))
    return SampleStream(table, sess[order], mu[order], k[order], labels[order], policy)


def _single(session: ImpressionSession, policy: WindowPolicy) -> list[LabeledSample]:
    return list(produce_stream(SessionTable.from_sessions([session]), policy))


def label_fixed_from_request(session: ImpressionSession, w_h: int = HOUR_MS) -> list[LabeledSample]:
    return _single(session, FixedFromRequest(w_h))


def label_fixed_from_impression(session: ImpressionSession, w_m: int = FIVE_MIN_MS) -> list[LabeledSample]:
    return _single(session, FixedFromImpression(w_m))


def label_sliver(session: ImpressionSession, w_s: int = SLIVER_MS, t_uni: int = 0) -> list[LabeledSample]:
    return _single(session, Sliding(w_s, t_uni))


# ---------------------------------------------------------------------------
# label-accuracy audit


@dataclass
class TaskAccuracy:
    n: int
    accuracy: float | None  # all emitted labels vs eventual truth
    recall: float | None  # eventual positives already labelled positive
    positive_precision: float | None
    negative_precision: float | None
    buckets: list[dict]


@dataclass
class LabelAccuracyReport:
    paradigm: str | None
    tasks: dict[str, TaskAccuracy]
    excluded_censored: int
    bucket_edges_ms: list[int]

    def to_dict(self) -> dict:
        return {"paradigm": self.paradigm, "excluded_censored": self.excluded_censored,
                "bucket_edges_ms": self.bucket_edges_ms,
                "tasks": {t: vars(a) for t, a in self.tasks.items()}}


def _frac(num: np.ndarray, den: np.ndarray) -> float | None:
    d = int(den.sum())
    return None if d == 0 else float((num & den).sum()) / d


DEFAULT_BUCKETS_MS = [0, 30_000, 60_000, 120_000, 300_000, 600_000, 1_800_000, HOUR_MS, 2 * HOUR_MS]


def audit_label_accuracy(stream: SampleStream, truth, buckets: Sequence[int] = DEFAULT_BUCKETS_MS
                         ) -> LabelAccuracyReport:
    """Compare emitted labels with eventual ground-truth labels.

    Samples of censored sessions (or sessions unknown to ``truth``) are
    excluded and counted. Buckets split on ``emit_ts - impression_ts``; the
    last bucket is open-ended.
    """
    table = stream.sessions
    eventual, found = truth.labels_for(table)
    s = stream.session_idx
    excluded = table.censored[s] | ~found[s]
    delay = stream.emit_ts - table.impression_ts[s]
    edges = np.asarray(list(buckets), dtype=np.int64)
    if edges.size == 0 or np.any(np.diff(edges) <= 0):
        raise ValueError("bucket edges must be strictly increasing")
    bucket = np.searchsorted(edges, delay, side="right") - 1
    tasks = {}
    for b, name in enumerate(TASK_NAMES):
        lab = stream.labels[:, b]
        m = (lab != kernels.ABSENT) & ~excluded
        pred = lab == kernels.POS
        true = eventual[s, b]
        rows = []
        for j in range(edges.size):
            mb = m & (bucket == j)
            rows.append({"lo_ms": int(edges[j]), "hi_ms": int(edges[j + 1]) if j + 1 < edges.size else None,
                         "n": int(mb.sum()), "accuracy": _frac(pred == true, mb),
                         "recall": _frac(pred, mb & true)})
        tasks[name] = TaskAccuracy(
            n=int(m.sum()), accuracy=_frac(pred == true, m), recall=_frac(pred, m & true),
            positive_precision=_frac(true, m & pred), negative_precision=_frac(~true, m & ~pred),
            buckets=rows)
    return LabelAccuracyReport(getattr(stream.policy, "name", None), tasks,
                               int(np.unique(s[excluded]).size), [int(e) for e in edges])


def accuracy_curve(sessions, truth, windows_ms: Sequence[int]) -> list[dict]:
    """Label accuracy of the fixed-from-impression paradigm as the window grows."""
    table = as_table(sessions)
    out = []
    for w in windows_ms:
        rep = audit_label_accuracy(produce_stream(table, FixedFromImpression(int(w))), truth, [0])
        out.append({"window_ms": int(w), **{f"{t}_{k}": getattr(a, k) for t, a in rep.tasks.items()
                                          for k in ("accuracy", "recall")}})
    return out


# ---------------------------------------------------------------------------
# sample file


SAMPLE_FIELDS = ("user_id", "live_id", "request_ts_ms", "emit_ts_ms", "window_id", "click", "follow", "like",
                 "snapshot_ts_ms")


def write_samples(stream: SampleStream, path: str) -> None:
    t = stream.sessions
    s = stream.session_idx
    cols = [t.user_id[s].tolist(), t.live_id[s].tolist(), t.request_ts[s].tolist(), stream.emit_ts.tolist(),
            stream.window_id.tolist()]
    labels = stream.labels.tolist()
    snap = stream.snapshot_ts.tolist()
    enc = {1: "+1", 0: "-1", -1: ""}
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SAMPLE_FIELDS)
        for i in range(len(stream)):
            k = cols[4][i]
            w.writerow([cols[0][i], cols[1][i], cols[2][i], cols[3][i], "" if k < 0 else k,
                        *(enc[v] for v in labels[i]), snap[i]])


def read_samples(path: str, sessions: SessionTable, policy=None) -> SampleStream:
    """Load a sample file and re-attach each row to its session by key."""
    pos = {k: i for i, k in enumerate(sessions.keys())}
    idx, mu, k, labels, snap = [], [], [], [], []
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        missing = set(SAMPLE_FIELDS) - set(reader.fieldnames or ())
        if missing:
            raise ValueError(f"{path}: missing column(s) {', '.join(sorted(missing))}")
        for line_no, row in enumerate(reader, start=2):
            key = (int(row["user_id"]), int(row["live_id"]), int(row["request_ts_ms"]))
            if key not in pos:
                raise ValueError(f"{path}:{line_no}: sample refers to unknown session {key}")
            idx.append(pos[key])
            mu.append(int(row["emit_ts_ms"]))
            k.append(int(row["window_id"]) if row["window_id"] else -1)
            labels.append([int(TaskLabel.from_field(row[t])) for t in TASK_NAMES])
            snap.append(int(row["snapshot_ts_ms"]))
    return SampleStream(sessions, idx, mu, k, np.asarray(labels, dtype=np.int8).reshape(-1, 3), policy, snap)
