"""Event/session data model, event-log I/O and the sessionizer.

Timestamps are integer milliseconds since the stream epoch. Identifiers and
categorical features are non-negative integers; ``-1`` marks a missing value
(and, for timestamps, an event that never happened).
"""

from __future__ import annotations

import csv
import enum
import json
import os
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Mapping, Sequence

import numpy as np

from . import kernels

HISTORY_CAP = 50
SESSION_TIMEOUT_MS = 6 * 3600 * 1000

USER_SIDE = ("gender", "age_bucket", "city")
LIVE_SIDE = ("live_type", "anchor_gender", "anchor_type")
SIDE_COLUMNS = USER_SIDE + LIVE_SIDE
REQUIRED_COLUMNS = ("kind", "user_id", "live_id", "anchor_id", "ts_ms")


class EventLogError(ValueError):
    """Malformed rows in an event log; ``lines`` holds 1-based line numbers."""

    def __init__(self, message: str, lines: Sequence[int] = ()):
        super().__init__(message)
        self.lines = list(lines)


class SchemaError(EventLogError):
    pass


class ValidationError(EventLogError):
    pass


class InvalidSessionError(ValueError):
    def __init__(self, message: str, group: tuple[int, int, int] | None = None):
        super().__init__(message)
        self.group = group


class BehaviorKind(enum.IntEnum):
    REQUEST = 0
    IMPRESSION = 1
    CLICK = 2
    FOLLOW = 3
    LIKE = 4
    EXIT = 5

    @property
    def label(self) -> str:
        return self.name.capitalize()

    @classmethod
    def parse(cls, value) -> "BehaviorKind":
        if isinstance(value, (int, np.integer)) and not isinstance(value, bool):
            return cls(int(value))
        if isinstance(value, str):
            v = value.strip()
            if v.isdigit():
                return cls(int(v))
            if v.upper() in cls.__members__:
                return cls[v.upper()]
        raise ValueError(f"bad behaviour kind {value!r}")


# Click and follow are labelled on every impression; like only after a click.
IMPRESSION_SPACE = (BehaviorKind.CLICK, BehaviorKind.FOLLOW)
POST_CLICK_SPACE = (BehaviorKind.LIKE,)
TASKS = (BehaviorKind.CLICK, BehaviorKind.FOLLOW, BehaviorKind.LIKE)
TASK_NAMES = ("click", "follow", "like")


@dataclass(frozen=True)
class UserProfile:
    user_id: int
    gender: int = -1
    age_bucket: int = -1
    city: int = -1
    click_anchor_history: tuple[int, ...] = ()

    def __post_init__(self):
        if len(self.click_anchor_history) > HISTORY_CAP:
            raise ValueError(f"click history longer than {HISTORY_CAP}")


@dataclass(frozen=True)
class LiveRoomSnapshot:
    live_id: int
    anchor_id: int
    live_type: int = -1
    anchor_gender: int = -1
    anchor_type: int = -1
    snapshot_ts: int = 0
    content_state: int = -1


@dataclass(frozen=True)
class InteractionEvent:
    kind: BehaviorKind
    user_id: int
    live_id: int
    anchor_id: int
    ts: int
    side: Mapping[str, int] = field(default_factory=dict, compare=False)


def _opt(v) -> int | None:
    v = int(v)
    return None if v < 0 else v


@dataclass(frozen=True)
class ImpressionSession:
    """One request -> impression -> exit arc for a (user, live room) pair."""

    user: UserProfile
    live: LiveRoomSnapshot
    request_ts: int
    impression_ts: int | None = None
    click_ts: int | None = None
    follow_ts: int | None = None
    like_ts: int | None = None
    exit_ts: int | None = None
    censored: bool = False

    def __post_init__(self):
        check_session_arrays(
            *(np.array([-1 if v is None else v], dtype=np.int64) for v in (
                self.request_ts, self.impression_ts, self.click_ts,
                self.follow_ts, self.like_ts, self.exit_ts)),
            censored=np.array([self.censored]),
            keys=lambda i: self.key,
        )

    @property
    def key(self) -> tuple[int, int, int]:
        return (self.user.user_id, self.live.live_id, self.request_ts)

    @property
    def behavior_ts(self) -> dict[BehaviorKind, int | None]:
        return {BehaviorKind.CLICK: self.click_ts, BehaviorKind.FOLLOW: self.follow_ts,
                BehaviorKind.LIKE: self.like_ts}


def check_session_arrays(request, impression, click, follow, like, exit_, censored, keys):
    """Reject (never repair) sessions that break the timeline invariants."""
    behaviors = np.stack([click, follow, like], axis=1)
    present = behaviors >= 0
    problems = [
        ((impression >= 0) & (impression < request), "impression before request"),
        ((impression < 0) & (present.any(axis=1) | (exit_ >= 0)),
         "behaviour or exit without impression"),
        ((like >= 0) & (click < 0), "like without click"),
        ((like >= 0) & (click >= 0) & (like < click), "like before click"),
        ((present & (behaviors < impression[:, None])).any(axis=1), "behaviour before impression"),
        ((exit_ >= 0) & (exit_ < impression), "exit before impression"),
        ((exit_ >= 0) & (present & (behaviors > exit_[:, None])).any(axis=1), "behaviour after exit"),
        (censored & (exit_ < 0), "censored session without closing time"),
    ]
    for bad, what in problems:
        if bad.any():
            i = int(np.flatnonzero(bad)[0])
            group = keys(i)
            raise InvalidSessionError(
                f"invalid session (user={group[0]}, live={group[1]}, request_ts={group[2]}): {what}",
                group)


# ---------------------------------------------------------------------------
# columnar event log


class EventLog(Sequence[InteractionEvent]):
    """Columnar, ts-ordered event log. Indexing yields :class:`InteractionEvent`."""

    def __init__(self, kind, user_id, live_id, anchor_id, ts, side: Mapping[str, np.ndarray] | None = None):
        self.kind = np.asarray(kind, dtype=np.int8)
        self.user_id = np.asarray(user_id, dtype=np.int64)
        self.live_id = np.asarray(live_id, dtype=np.int64)
        self.anchor_id = np.asarray(anchor_id, dtype=np.int64)
        self.ts = np.asarray(ts, dtype=np.int64)
        self.side = {k: np.asarray(v, dtype=np.int64) for k, v in (side or {}).items()}
        n = self.ts.size
        for a in (self.kind, self.user_id, self.live_id, self.anchor_id, *self.side.values()):
            if a.size != n:
                raise ValueError("event columns have different lengths")

    def __len__(self) -> int:
        return int(self.ts.size)

    def __getitem__(self, i):
        if isinstance(i, slice):
            return self.take(np.arange(len(self))[i])
        return InteractionEvent(
            BehaviorKind(int(self.kind[i])), int(self.user_id[i]), int(self.live_id[i]),
            int(self.anchor_id[i]), int(self.ts[i]),
            {k: int(v[i]) for k, v in self.side.items()})

    def __iter__(self) -> Iterator[InteractionEvent]:
        for i in range(len(self)):
            yield self[i]

    def take(self, idx) -> "EventLog":
        return EventLog(self.kind[idx], self.user_id[idx], self.live_id[idx], self.anchor_id[idx],
                        self.ts[idx], {k: v[idx] for k, v in self.side.items()})

    def sorted(self) -> "EventLog":
        """Stable sort by timestamp (input order breaks ties)."""
        return self.take(np.argsort(self.ts, kind="stable"))

    def is_sorted(self) -> bool:
        return bool(np.all(np.diff(self.ts) >= 0))

    @classmethod
    def from_events(cls, events: Iterable[InteractionEvent]) -> "EventLog":
        events = list(events)
        side_names = sorted({k for e in events for k in e.side})
        return cls(
            [int(e.kind) for e in events], [e.user_id for e in events], [e.live_id for e in events],
            [e.anchor_id for e in events], [e.ts for e in events],
            {k: [e.side.get(k, -1) for e in events] for k in side_names})

    def equals(self, other: "EventLog") -> bool:
        same = all(np.array_equal(getattr(self, a), getattr(other, a))
                   for a in ("kind", "user_id", "live_id", "anchor_id", "ts"))
        return same and self.side.keys() == other.side.keys() and all(
            np.array_equal(v, other.side[k]) for k, v in self.side.items())


def _parse_int(v, name):
    if isinstance(v, bool):
        raise ValueError(name)
    if isinstance(v, (int, np.integer)):
        return int(v)
    if isinstance(v, float) and v.is_integer():
        return int(v)
    if isinstance(v, str) and v.strip().lstrip("-").isdigit():
        return int(v)
    raise ValueError(name)


def _read_rows(path: str, schema: Mapping[str, str]):
    """Yield (line_no, dict) with canonical keys; raises SchemaError on missing columns."""
    ext = os.path.splitext(path)[1].lower()
    with open(path, encoding="utf-8", newline="") as fh:
        if ext in (".csv", ".tsv", ".txt"):
            reader = csv.reader(fh, delimiter="\t" if ext == ".tsv" else ",")
            header = next(reader, None)
            if header is None:
                return
            header = [h.strip() for h in header]
            missing = [c for c in REQUIRED_COLUMNS if schema.get(c, c) not in header]
            if missing:
                raise SchemaError(f"{path}: missing column(s) {', '.join(missing)}")
            pos = {c: header.index(schema.get(c, c))
                   for c in REQUIRED_COLUMNS + SIDE_COLUMNS if schema.get(c, c) in header}
            for line_no, row in enumerate(reader, start=2):
                if not row:
                    continue
                if len(row) != len(header):
                    yield line_no, None
                    continue
                yield line_no, {c: row[j] for c, j in pos.items()}
        else:
            for line_no, line in enumerate(fh, start=1):
                if not line.strip():
                    continue
                try:
                    rec = json.loads(line)
                except json.JSONDecodeError:
                    yield line_no, None
                    continue
                if not isinstance(rec, dict):
                    yield line_no, None
                    continue
                missing = [c for c in REQUIRED_COLUMNS if schema.get(c, c) not in rec]
                if missing:
                    raise SchemaError(f"{path}:{line_no}: missing field(s) {', '.join(missing)}")
                yield line_no, {c: rec[schema.get(c, c)]
                                for c in REQUIRED_COLUMNS + SIDE_COLUMNS if schema.get(c, c) in rec}


def load_event_log(path: str, schema: Mapping[str, str] | None = None,
                   profiles: str | None = None) -> EventLog:
    """Read an event log (JSON lines, or CSV/TSV with a header) into ts order.

    ``schema`` maps canonical column names (``kind, user_id, live_id,
    anchor_id, ts_ms`` and the side columns) to the names used in the file.
    ``profiles`` optionally names a JSON-lines sidecar of user/live records
    whose fields fill the side columns by ``user_id`` / ``live_id``.
    """
    schema = dict(schema or {})
    cols: dict[str, list[int]] = {c: [] for c in REQUIRED_COLUMNS}
    side: dict[str, list[int]] = {}
    bad: list[int] = []
    n = 0
    for line_no, rec in _read_rows(path, schema):
        if rec is None:
            bad.append(line_no)
            continue
        try:
            kind = int(BehaviorKind.parse(rec["kind"]))
            vals = [_parse_int(rec[c], c) for c in REQUIRED_COLUMNS[1:]]
            if vals[-1] < 0:
                raise ValueError("ts_ms")
            side_vals = {c: _parse_int(rec[c], c) if rec[c] not in ("", None) else -1
                         for c in SIDE_COLUMNS if c in rec}
        except (KeyError, ValueError):
            bad.append(line_no)
            continue
        cols["kind"].append(kind)
        for c, v in zip(REQUIRED_COLUMNS[1:], vals):
            cols[c].append(v)
        for c in side_vals.keys() - side.keys():
            side[c] = [-1] * n
        for c, vals_c in side.items():
            vals_c.append(side_vals.get(c, -1))
        n += 1
    if bad:
        shown = ", ".join(map(str, bad[:10])) + (" ..." if len(bad) > 10 else "")
        raise EventLogError(f"{path}: {len(bad)} malformed row(s) at line(s) {shown}", bad)

    log = EventLog(cols["kind"], cols["user_id"], cols["live_id"], cols["anchor_id"], cols["ts_ms"],
                   {k: side[k] for k in sorted(side)})
    _check_duplicates(log, path)
    if profiles is not None:
        log = attach_profiles(log, load_profiles(profiles))
    return log.sorted()


def _check_duplicates(log: EventLog, path: str = "<events>"):
    if len(log) < 2:
        return
    order = np.lexsort((log.ts, log.live_id, log.user_id, log.kind))
    keys = np.stack([log.kind[order], log.user_id[order], log.live_id[order], log.ts[order]], axis=1)
    dup = np.all(keys[1:] == keys[:-1], axis=1)
    if dup.any():
        rows = sorted(int(order[i + 1]) for i in np.flatnonzero(dup))
        raise ValidationError(f"{path}: duplicate (kind, user_id, live_id, ts) rows at record(s) "
                              f"{', '.join(str(r + 1) for r in rows[:10])}", [r + 1 for r in rows])


def load_profiles(path: str) -> dict[str, dict[int, dict[str, int]]]:
    users: dict[int, dict[str, int]] = {}
    lives: dict[int, dict[str, int]] = {}
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            rec = json.loads(line)
            if "user_id" in rec:
                users[int(rec["user_id"])] = {c: int(rec.get(c, -1)) for c in USER_SIDE}
            elif "live_id" in rec:
                lives[int(rec["live_id"])] = {c: int(rec.get(c, -1)) for c in LIVE_SIDE}
            else:
                raise EventLogError(f"{path}:{line_no}: profile record without user_id/live_id", [line_no])
    return {"users": users, "lives": lives}


def attach_profiles(log: EventLog, profiles) -> EventLog:
    side = dict(log.side)
    for ids, table, names in ((log.user_id, profiles["users"], USER_SIDE),
                              (log.live_id, profiles["lives"], LIVE_SIDE)):
        for c in names:
            side[c] = np.array([table.get(int(i), {}).get(c, -1) for i in ids], dtype=np.int64)
    return EventLog(log.kind, log.user_id, log.live_id, log.anchor_id, log.ts,
                    {k: side[k] for k in sorted(side)})


def write_event_log(log: EventLog, path: str) -> None:
    """Canonical JSON-lines output, one event per line, fixed key order."""
    names = [c for c in SIDE_COLUMNS if c in log.side]
    kinds = [BehaviorKind(k).label for k in range(6)]
    cols = [log.user_id.tolist(), log.live_id.tolist(), log.anchor_id.tolist(), log.ts.tolist()]
    side = [log.side[c].tolist() for c in names]
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for i, k in enumerate(log.kind.tolist()):
            parts = [f'"kind": "{kinds[k]}"', f'"user_id": {cols[0][i]}', f'"live_id": {cols[1][i]}',
                     f'"anchor_id": {cols[2][i]}', f'"ts_ms": {cols[3][i]}']
            parts += [f'"{c}": {s[i]}' for c, s in zip(names, side)]
            fh.write("{" + ", ".join(parts) + "}\n")


# ---------------------------------------------------------------------------
# sessions


_TS_FIELDS = ("request_ts", "impression_ts", "click_ts", "follow_ts", "like_ts", "exit_ts")


class SessionTable(Sequence[ImpressionSession]):
    """Columnar store of impression sessions, ordered by request time.

    Behaves as a read-only sequence of :class:`ImpressionSession`; the
    labelling kernels work on the columns directly.
    """

    def __init__(self, *, user_id, live_id, anchor_id, request_ts, impression_ts, click_ts,
                 follow_ts, like_ts, exit_ts, censored, side=None, history=None):
        self.user_id = np.asarray(user_id, dtype=np.int64)
        self.live_id = np.asarray(live_id, dtype=np.int64)
        self.anchor_id = np.asarray(anchor_id, dtype=np.int64)
        self.request_ts = np.asarray(request_ts, dtype=np.int64)
        self.impression_ts = np.asarray(impression_ts, dtype=np.int64)
        self.click_ts = np.asarray(click_ts, dtype=np.int64)
        self.follow_ts = np.asarray(follow_ts, dtype=np.int64)
        self.like_ts = np.asarray(like_ts, dtype=np.int64)
        self.exit_ts = np.asarray(exit_ts, dtype=np.int64)
        self.censored = np.asarray(censored, dtype=bool)
        n = self.request_ts.size
        side = side or {}
        self.side = {c: np.asarray(side.get(c, np.full(n, -1)), dtype=np.int64) for c in SIDE_COLUMNS}
        history = np.full((n, 0), -1, dtype=np.int64) if history is None else np.asarray(history, np.int64)
        if history.ndim != 2 or history.shape[0] != n:
            history = history.reshape(n, -1) if n else np.full((0, 0), -1, dtype=np.int64)
        self.history = history
        check_session_arrays(self.request_ts, self.impression_ts, self.click_ts, self.follow_ts,
                             self.like_ts, self.exit_ts, self.censored, self.key)

    def __len__(self) -> int:
        return int(self.request_ts.size)

    def key(self, i: int) -> tuple[int, int, int]:
        return (int(self.user_id[i]), int(self.live_id[i]), int(self.request_ts[i]))

    def keys(self) -> list[tuple[int, int, int]]:
        return list(zip(self.user_id.tolist(), self.live_id.tolist(), self.request_ts.tolist()))

    def __getitem__(self, i):
        if isinstance(i, slice):
            return self.take(np.arange(len(self))[i])
        i = int(i)
        hist = tuple(int(a) for a in self.history[i] if a >= 0)
        user = UserProfile(int(self.user_id[i]), *(int(self.side[c][i]) for c in USER_SIDE), hist)
        live = LiveRoomSnapshot(int(self.live_id[i]), int(self.anchor_id[i]),
                                *(int(self.side[c][i]) for c in LIVE_SIDE),
                                snapshot_ts=int(self.request_ts[i]))
        return ImpressionSession(user, live, int(self.request_ts[i]),
                                 *(_opt(getattr(self, f)[i]) for f in _TS_FIELDS[1:]),
                                 censored=bool(self.censored[i]))

    def __iter__(self) -> Iterator[ImpressionSession]:
        for i in range(len(self)):
            yield self[i]

    def take(self, idx) -> "SessionTable":
        return SessionTable(**{f: getattr(self, f)[idx] for f in
                               ("user_id", "live_id", "anchor_id", *_TS_FIELDS, "censored")},
                            side={c: v[idx] for c, v in self.side.items()}, history=self.history[idx])

    @property
    def behaviors(self) -> np.ndarray:
        """``(n, 3)`` click/follow/like timestamps, -1 when absent."""
        return np.stack([self.click_ts, self.follow_ts, self.like_ts], axis=1)

    @classmethod
    def from_sessions(cls, sessions: Iterable[ImpressionSession]) -> "SessionTable":
        if isinstance(sessions, SessionTable):
            return sessions
        sessions = list(sessions)
        cap = max((len(s.user.click_anchor_history) for s in sessions), default=0)
        history = np.full((len(sessions), cap), -1, dtype=np.int64)
        for i, s in enumerate(sessions):
            h = s.user.click_anchor_history
            history[i, : len(h)] = h
        ts = {f: [-1 if getattr(s, f) is None else getattr(s, f) for s in sessions] for f in _TS_FIELDS}
        side = {c: [getattr(s.user, c) for s in sessions] for c in USER_SIDE}
        side.update({c: [getattr(s.live, c) for s in sessions] for c in LIVE_SIDE})
        return cls(user_id=[s.user.user_id for s in sessions], live_id=[s.live.live_id for s in sessions],
                   anchor_id=[s.live.anchor_id for s in sessions], censored=[s.censored for s in sessions],
                   side=side, history=history, **ts)

    def to_events(self) -> EventLog:
        """Inverse of :func:`sessionize`; censored sessions get no Exit event."""
        n = len(self)
        kinds, rows, ts = [], [], []
        for kind, col in zip(BehaviorKind, _TS_FIELDS):
            arr = getattr(self, col)
            mask = arr >= 0
            if kind == BehaviorKind.EXIT:
                mask &= ~self.censored
            idx = np.flatnonzero(mask)
            kinds.append(np.full(idx.size, int(kind), dtype=np.int8))
            rows.append(idx)
            ts.append(arr[idx])
        kinds, rows, ts = np.concatenate(kinds), np.concatenate(rows), np.concatenate(ts)
        order = np.lexsort((kinds, rows, ts)) if n else np.arange(0)
        rows = rows[order]
        return EventLog(kinds[order], self.user_id[rows], self.live_id[rows], self.anchor_id[rows],
                        ts[order], {c: v[rows] for c, v in self.side.items()})


def as_table(sessions) -> SessionTable:
    return sessions if isinstance(sessions, SessionTable) else SessionTable.from_sessions(sessions)


def sessionize(events, horizon_end: int | None = None, *, session_timeout_ms: int = SESSION_TIMEOUT_MS,
               history_cap: int = HISTORY_CAP) -> SessionTable:
    """Join a ts-ordered event log into impression sessions.

    A Request event opens a new session for its (user, live) pair; every later
    event of that pair up to the next Request belongs to it. Impressed sessions
    without an Exit are closed at ``min(last event + timeout, horizon_end)`` and
    flagged censored.
    """
    if not isinstance(events, EventLog):
        events = EventLog.from_events(events)
    if not events.is_sorted():
        raise ValueError("events must be sorted by ts")
    n = len(events)
    if horizon_end is None:
        horizon_end = int(events.ts.max()) if n else 0
    if n and horizon_end < int(events.ts.max()):
        raise ValueError("horizon_end precedes the last event")

    order = np.lexsort((np.arange(n), events.ts, events.live_id, events.user_id))
    kind = events.kind[order].astype(np.int64)
    user, live, ts = events.user_id[order], events.live_id[order], events.ts[order]
    is_req = kind == BehaviorKind.REQUEST
    new_pair = np.ones(n, dtype=bool)
    new_pair[1:] = (user[1:] != user[:-1]) | (live[1:] != live[:-1])
    orphan = new_pair & ~is_req
    if orphan.any():
        i = int(np.flatnonzero(orphan)[0])
        raise InvalidSessionError(
            f"{BehaviorKind(kind[i]).label} event without a preceding request "
            f"(user={user[i]}, live={live[i]}, ts={ts[i]})", (int(user[i]), int(live[i]), int(ts[i])))

    sid = np.cumsum(is_req) - 1
    req_rows = order[is_req]
    m = int(is_req.sum())
    req_ts = ts[is_req]
    cols = {"request_ts": req_ts}
    for k, name in zip(list(BehaviorKind)[1:], _TS_FIELDS[1:]):
        mask = kind == k
        counts = np.bincount(sid[mask], minlength=m)
        if (counts > 1).any():
            j = int(np.flatnonzero(counts > 1)[0])
            grp = (int(events.user_id[req_rows[j]]), int(events.live_id[req_rows[j]]), int(req_ts[j]))
            raise InvalidSessionError(
                f"invalid session (user={grp[0]}, live={grp[1]}, request_ts={grp[2]}): "
                f"repeated {BehaviorKind(k).label} event", grp)
        col = np.full(m, -1, dtype=np.int64)
        col[sid[mask]] = ts[mask]
        cols[name] = col

    last = np.full(m, -1, dtype=np.int64)
    np.maximum.at(last, sid, ts)
    censored = (cols["impression_ts"] >= 0) & (cols["exit_ts"] < 0)
    exit_ = cols["exit_ts"].copy()
    exit_[censored] = np.minimum(last[censored] + session_timeout_ms, horizon_end)
    cols["exit_ts"] = exit_

    user_id, live_id = events.user_id[req_rows], events.live_id[req_rows]
    clicks = events.kind == BehaviorKind.CLICK
    history = kernels.gather_history(events.user_id[clicks], events.ts[clicks], events.anchor_id[clicks],
                                     user_id, req_ts, history_cap)
    sort = np.lexsort((live_id, user_id, req_ts))
    return SessionTable(
        user_id=user_id[sort], live_id=live_id[sort], anchor_id=events.anchor_id[req_rows][sort],
        censored=censored[sort], history=history[sort],
        side={c: events.side[c][req_rows][sort] for c in SIDE_COLUMNS if c in events.side},
        **{f: cols[f][sort] for f in _TS_FIELDS})
