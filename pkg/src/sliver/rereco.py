"""Serving-loop simulator: cached candidates, periodic re-ranking while unimpressed.

At the first request a candidate list is fixed and ranked on snapshots taken at
request time. With re-reco on, every ``period_ms`` until the impression the same
candidates are re-scored on fresh snapshots and the pending choice replaced.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np
from scipy import stats

from .events import LIVE_SIDE, USER_SIDE, EventLog, LiveRoomSnapshot, SessionTable, UserProfile
from .learner import MultiTaskModel, fusion_score
from .simgen import GeneratorConfig, GroundTruth, sample_impression_delay

SERVING_PERIOD_MS = 30_000


@dataclass(frozen=True)
class RerecoPolicy:
    enabled: bool = True
    period_ms: int = SERVING_PERIOD_MS

    def __post_init__(self):
        if self.period_ms <= 0:
            raise ValueError("re-reco period must be positive")

    def ticks(self, request_ts: int, impression_ts: int) -> list[int]:
        """Refresh times strictly after the request and strictly before the impression."""
        if not self.enabled:
            return []
        return list(range(request_ts + self.period_ms, impression_ts, self.period_ms))


@dataclass
class ServingEpisode:
    user: UserProfile
    segment: int
    candidates: tuple[LiveRoomSnapshot, ...]
    request_ts: int
    impression_ts: int
    # (refresh_ts, chosen live_id, snapshot_ts); the first entry is the initial request
    refresh_log: list[tuple[int, int, int]] = field(default_factory=list)

    @property
    def chosen(self) -> int | None:
        return self.refresh_log[-1][1] if self.refresh_log else None

    @property
    def snapshot_ts(self) -> int | None:
        return self.refresh_log[-1][2] if self.refresh_log else None

    @property
    def staleness_ms(self) -> int | None:
        return None if not self.refresh_log else self.impression_ts - self.snapshot_ts

    @property
    def n_refreshes(self) -> int:
        return max(len(self.refresh_log) - 1, 0)


class FeatureClock:
    """Room snapshots as of a given time, read from the generator's trajectories."""

    def __init__(self, truth: GroundTruth):
        self.truth = truth
        self.queries: list[int] | None = None  # set to a list to record query times

    def snapshots(self, rooms: Sequence[LiveRoomSnapshot], ts: int) -> list[LiveRoomSnapshot]:
        if self.queries is not None:
            self.queries.append(int(ts))
        states = self.truth.state_at([r.live_id for r in rooms], ts)
        return [replace(r, snapshot_ts=int(ts), content_state=int(s)) for r, s in zip(rooms, states)]


Scorer = Callable[[ServingEpisode, list], np.ndarray]


class ContentAwareScorer:
    """Ranks on the true per-state rates of each snapshot's content state.

    Stands in for a ranker that reads real-time room features; it only sees the
    state recorded in the snapshot, never the state at impression time.
    """

    def __init__(self, truth: GroundTruth):
        self.base_rates = np.asarray(truth.base_rates, dtype=float)

    def __call__(self, episode: ServingEpisode, snaps: list) -> np.ndarray:
        states = np.array([s.content_state for s in snaps], dtype=np.int64)
        return self.base_rates[episode.segment, states, :]


class ModelScorer:
    """Scores candidates with a trained model on the user's and rooms' static features."""

    def __init__(self, model: MultiTaskModel):
        self.model = model

    def __call__(self, episode: ServingEpisode, snaps: list) -> np.ndarray:
        n = len(snaps)
        u = episode.user
        side = {c: [getattr(u, c)] * n for c in USER_SIDE}
        side.update({c: [getattr(s, c) for s in snaps] for c in LIVE_SIDE})
        hist = np.full((n, len(u.click_anchor_history)), -1, dtype=np.int64)
        hist[:, :] = u.click_anchor_history
        ts = [s.snapshot_ts for s in snaps]
        table = SessionTable(user_id=[u.user_id] * n, live_id=[s.live_id for s in snaps],
                             anchor_id=[s.anchor_id for s in snaps], request_ts=ts, impression_ts=[-1] * n,
                             click_ts=[-1] * n, follow_ts=[-1] * n, like_ts=[-1] * n, exit_ts=[-1] * n,
                             censored=[False] * n, side=side, history=hist)
        return self.model.predict(table, np.arange(n))


def static_features(log: EventLog) -> tuple[dict[int, UserProfile], dict[int, LiveRoomSnapshot]]:
    """First-seen user profiles and room descriptors in an event log."""
    profiles, rooms = {}, {}
    _, ui = np.unique(log.user_id, return_index=True)
    for i in ui:
        profiles[int(log.user_id[i])] = UserProfile(int(log.user_id[i]),
                                                    *(int(log.side[c][i]) for c in USER_SIDE))
    _, li = np.unique(log.live_id, return_index=True)
    for i in li:
        rooms[int(log.live_id[i])] = LiveRoomSnapshot(int(log.live_id[i]), int(log.anchor_id[i]),
                                                      *(int(log.side[c][i]) for c in LIVE_SIDE))
    return profiles, rooms


def sample_episodes(config: GeneratorConfig, truth: GroundTruth, n: int, n_candidates: int = 8, seed: int = 0,
                    profiles: dict | None = None, rooms: dict | None = None) -> list[ServingEpisode]:
    """Random requests over the horizon, each with ``n_candidates`` distinct rooms.

    The delay to impression comes from the generator's impression-delay law.
    """
    rng = np.random.default_rng(seed)
    users = truth.users[rng.integers(0, truth.users.size, n)]
    segments = truth.segment_of(users) if n else np.zeros(0, np.int64)
    request = rng.integers(0, config.horizon_ms, n)
    impression = np.minimum(request + sample_impression_delay(config, rng, n), truth.log_end - 1)
    k = min(n_candidates, truth.room_ids.size)
    episodes = []
    for i in range(n):
        ids = truth.room_ids[rng.choice(truth.room_ids.size, k, replace=False)]
        user = (profiles or {}).get(int(users[i])) or UserProfile(int(users[i]))
        cands = tuple((rooms or {}).get(int(r)) or LiveRoomSnapshot(int(r), -1) for r in ids)
        episodes.append(ServingEpisode(user, int(segments[i]), cands, int(request[i]), int(impression[i])))
    return episodes


@dataclass
class ServingResult:
    episodes: list[ServingEpisode]
    policy: RerecoPolicy
    skipped: int = 0


def simulate_serving(episodes: Sequence[ServingEpisode], scorer: Scorer, policy: RerecoPolicy,
                     clock: FeatureClock, alpha=(1.0, 1.0, 1.0)) -> ServingResult:
    """Rank at the request, then (policy on) re-rank at every tick before the impression."""
    out, skipped = [], 0
    for ep in episodes:
        if not ep.candidates:
            skipped += 1
            continue
        log = []
        for t in [ep.request_ts] + policy.ticks(ep.request_ts, ep.impression_ts):
            snaps = clock.snapshots(ep.candidates, t)
            best = int(np.argmax(fusion_score(scorer(ep, snaps), alpha)))
            log.append((t, snaps[best].live_id, t))
        out.append(replace(ep, refresh_log=log))
    return ServingResult(out, policy, skipped)


STALENESS_FIELDS = ("user_id", "request_ts_ms", "impression_ts_ms", "n_refreshes", "chosen_on", "chosen_off",
                    "staleness_on_ms", "staleness_off_ms", "ctr_on", "ctr_off")


@dataclass
class StalenessReport:
    n: int
    period_ms: int
    mean_staleness_on_ms: float
    max_staleness_on_ms: int
    mean_staleness_off_ms: float
    max_staleness_off_ms: int
    mean_ctr_on: float
    mean_ctr_off: float
    mean_diff: float
    se_diff: float
    t_stat: float | None
    p_value: float | None
    changed_choices: int
    rows: list = field(default_factory=list, repr=False)

    def summary(self) -> dict:
        return {k: v for k, v in self.__dict__.items() if k != "rows"}

    def write_csv(self, path: str) -> None:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(STALENESS_FIELDS)
            for r in self.rows:
                w.writerow([repr(v) if isinstance(v, float) else v for v in r])


def staleness_report(on: ServingResult, off: ServingResult, truth: GroundTruth) -> StalenessReport:
    """Paired on/off comparison of staleness and the true click rate of the shown room."""
    if len(on.episodes) != len(off.episodes):
        raise ValueError("on and off runs must cover the same episodes")
    pairs = list(zip(on.episodes, off.episodes))
    for a, b in pairs:
        if (a.user.user_id, a.request_ts, a.impression_ts) != (b.user.user_id, b.request_ts, b.impression_ts):
            raise ValueError("on and off runs are not paired episode by episode")
    n = len(pairs)
    seg = np.array([a.segment for a, _ in pairs], dtype=np.int64)
    imp = np.array([a.impression_ts for a, _ in pairs], dtype=np.int64)
    ch_on = np.array([a.chosen for a, _ in pairs], dtype=np.int64)
    ch_off = np.array([b.chosen for _, b in pairs], dtype=np.int64)
    ctr_on = truth.rates(ch_on, imp, seg)[:, 0] if n else np.zeros(0)
    ctr_off = truth.rates(ch_off, imp, seg)[:, 0] if n else np.zeros(0)
    st_on = np.array([a.staleness_ms for a, _ in pairs], dtype=np.int64)
    st_off = np.array([b.staleness_ms for _, b in pairs], dtype=np.int64)
    diff = ctr_on - ctr_off
    t_stat = p_value = None
    if n > 1 and np.any(diff != diff[0]):
        res = stats.ttest_rel(ctr_on, ctr_off, alternative="greater")
        t_stat, p_value = float(res.statistic), float(res.pvalue)
    rows = [(a.user.user_id, a.request_ts, a.impression_ts, a.n_refreshes, int(ch_on[i]), int(ch_off[i]),
             int(st_on[i]), int(st_off[i]), float(ctr_on[i]), float(ctr_off[i])) for i, (a, _) in enumerate(pairs)]
    mean = lambda x: float(x.mean()) if x.size else 0.0  # noqa: E731
    return StalenessReport(
        n=n, period_ms=on.policy.period_ms,
        mean_staleness_on_ms=mean(st_on), max_staleness_on_ms=int(st_on.max(initial=0)),
        mean_staleness_off_ms=mean(st_off), max_staleness_off_ms=int(st_off.max(initial=0)),
        mean_ctr_on=mean(ctr_on), mean_ctr_off=mean(ctr_off), mean_diff=mean(diff),
        se_diff=float(diff.std(ddof=1) / np.sqrt(n)) if n > 1 else 0.0,
        t_stat=t_stat, p_value=p_value, changed_choices=int(np.sum(ch_on != ch_off)), rows=rows)
