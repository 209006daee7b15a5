import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sliver.events import (BehaviorKind, EventLog, EventLogError, ImpressionSession, InteractionEvent,
                           InvalidSessionError, LiveRoomSnapshot, SchemaError, SessionTable, UserProfile,
                           ValidationError, load_event_log, sessionize, write_event_log)

from .oracles import random_sessions

K = BehaviorKind


def ev(kind, ts, user=1, live=7, anchor=3):
    return InteractionEvent(kind, user, live, anchor, ts, {})


def write_jsonl(path, rows):
    path.write_text("".join(json.dumps(r) + "\n" for r in rows))
    return str(path)


def row(kind, ts, user=1, live=7, anchor=3, **side):
    return {"kind": kind, "user_id": user, "live_id": live, "anchor_id": anchor, "ts_ms": ts, **side}


# ---------------------------------------------------------------------------
# loading


def test_behavior_kinds_are_exactly_six():
    assert [k.label for k in K] == ["Request", "Impression", "Click", "Follow", "Like", "Exit"]
    assert K.parse("click") is K.CLICK and K.parse(4) is K.LIKE
    with pytest.raises(ValueError):
        K.parse("Share")


def test_empty_file_gives_empty_log(tmp_path):
    p = tmp_path / "e.jsonl"
    p.write_text("")
    assert len(load_event_log(str(p))) == 0


def test_rows_come_back_in_ts_order(tmp_path):
    p = write_jsonl(tmp_path / "e.jsonl", [row("Impression", 500), row("Request", 100)])
    log = load_event_log(p)
    assert log.ts.tolist() == [100, 500]
    assert [e.kind for e in log] == [K.REQUEST, K.IMPRESSION]


def test_sort_is_stable_for_equal_timestamps(tmp_path):
    p = write_jsonl(tmp_path / "e.jsonl", [row("Request", 5, user=2), row("Request", 5, user=1),
                                           row("Request", 5, user=3)])
    assert load_event_log(p).user_id.tolist() == [2, 1, 3]


def test_malformed_rows_report_line_numbers(tmp_path):
    p = tmp_path / "e.jsonl"
    p.write_text(json.dumps(row("Request", 1)) + "\nnot json\n" + json.dumps(row("Click", "x")) + "\n"
                 + json.dumps(row("Teleport", 4)) + "\n")
    with pytest.raises(EventLogError) as err:
        load_event_log(str(p))
    assert err.value.lines == [2, 3, 4]
    assert "2, 3, 4" in str(err.value)


def test_missing_column_is_schema_error(tmp_path):
    p = write_jsonl(tmp_path / "e.jsonl", [{"kind": "Request", "user_id": 1, "live_id": 2, "ts_ms": 3}])
    with pytest.raises(SchemaError, match="anchor_id"):
        load_event_log(p)
    c = tmp_path / "e.csv"
    c.write_text("kind,user_id,live_id,ts_ms\nRequest,1,2,3\n")
    with pytest.raises(SchemaError):
        load_event_log(str(c))


def test_duplicate_key_is_validation_error(tmp_path):
    p = write_jsonl(tmp_path / "e.jsonl", [row("Request", 1), row("Click", 9), row("Click", 9)])
    with pytest.raises(ValidationError):
        load_event_log(p)


def test_csv_with_column_mapping(tmp_path):
    c = tmp_path / "e.csv"
    c.write_text("what,uid,room,host,time,gender\nRequest,1,2,3,10,1\nImpression,1,2,3,20,1\n")
    log = load_event_log(str(c), schema={"kind": "what", "user_id": "uid", "live_id": "room",
                                         "anchor_id": "host", "ts_ms": "time"})
    assert log.ts.tolist() == [10, 20] and log.side["gender"].tolist() == [1, 1]


def test_tsv_accepted(tmp_path):
    c = tmp_path / "e.tsv"
    c.write_text("kind\tuser_id\tlive_id\tanchor_id\tts_ms\nRequest\t1\t2\t3\t10\n")
    assert len(load_event_log(str(c))) == 1


def test_like_without_click_loads_but_fails_sessionize(tmp_path):
    p = write_jsonl(tmp_path / "e.jsonl", [row("Request", 0), row("Impression", 10), row("Like", 20),
                                           row("Exit", 30)])
    log = load_event_log(p)
    with pytest.raises(InvalidSessionError) as err:
        sessionize(log)
    assert err.value.group == (1, 7, 0)


def test_profile_sidecar(tmp_path):
    p = write_jsonl(tmp_path / "e.jsonl", [row("Request", 0, user=4, live=9)])
    prof = write_jsonl(tmp_path / "p.jsonl", [{"user_id": 4, "gender": 1, "age_bucket": 2, "city": 5},
                                              {"live_id": 9, "live_type": 2}])
    log = load_event_log(p, profiles=prof)
    assert log.side["city"].tolist() == [5] and log.side["live_type"].tolist() == [2]
    assert log.side["anchor_type"].tolist() == [-1]


def test_write_load_round_trip(tmp_path, rng):
    table = random_sessions(rng, 200)
    log = table.to_events()
    path = str(tmp_path / "e.jsonl")
    write_event_log(log, path)
    assert load_event_log(path).equals(log)
    first = (tmp_path / "e.jsonl").read_bytes()
    write_event_log(load_event_log(path), path)
    assert (tmp_path / "e.jsonl").read_bytes() == first


# ---------------------------------------------------------------------------
# sessionize


def test_sessionize_direct_grouping():
    log = EventLog.from_events([ev(K.REQUEST, 0), ev(K.IMPRESSION, 120000), ev(K.CLICK, 300000),
                                ev(K.EXIT, 500000)])
    s = sessionize(log)
    assert len(s) == 1
    x = s[0]
    assert (x.request_ts, x.impression_ts, x.click_ts, x.exit_ts) == (0, 120000, 300000, 500000)
    assert x.follow_ts is None and x.like_ts is None and not x.censored


def test_sessionize_unimpressed():
    s = sessionize(EventLog.from_events([ev(K.REQUEST, 0)]))
    assert s[0].impression_ts is None and s[0].exit_ts is None and not s[0].censored


def test_follow_before_click_is_valid():
    log = EventLog.from_events([ev(K.REQUEST, 0), ev(K.IMPRESSION, 100), ev(K.FOLLOW, 150), ev(K.CLICK, 200),
                                ev(K.EXIT, 900)])
    s = sessionize(log)[0]
    assert s.follow_ts == 150 and s.click_ts == 200


def test_missing_exit_is_censored_at_horizon():
    log = EventLog.from_events([ev(K.REQUEST, 0), ev(K.IMPRESSION, 100), ev(K.CLICK, 400)])
    s = sessionize(log, horizon_end=1000)[0]
    assert s.censored and s.exit_ts == 1000
    s = sessionize(log, horizon_end=10**9, session_timeout_ms=50)[0]
    assert s.censored and s.exit_ts == 450


def test_reentry_starts_new_session():
    log = EventLog.from_events([ev(K.REQUEST, 0), ev(K.IMPRESSION, 10), ev(K.EXIT, 20),
                                ev(K.REQUEST, 30), ev(K.IMPRESSION, 40), ev(K.CLICK, 45), ev(K.EXIT, 50)])
    s = sessionize(log)
    assert [x.request_ts for x in s] == [0, 30]
    assert s[0].click_ts is None and s[1].click_ts == 45


def test_orphan_and_repeated_events_rejected():
    with pytest.raises(InvalidSessionError):
        sessionize(EventLog.from_events([ev(K.CLICK, 5)]))
    with pytest.raises(InvalidSessionError, match="repeated"):
        sessionize(EventLog.from_events([ev(K.REQUEST, 0), ev(K.IMPRESSION, 1), ev(K.CLICK, 2),
                                         ev(K.CLICK, 3)]))


def test_like_before_click_rejected_with_group():
    log = EventLog.from_events([ev(K.REQUEST, 0, user=5, live=6), ev(K.IMPRESSION, 1, user=5, live=6),
                                ev(K.LIKE, 2, user=5, live=6), ev(K.CLICK, 3, user=5, live=6)])
    with pytest.raises(InvalidSessionError) as err:
        sessionize(log)
    assert err.value.group == (5, 6, 0)


def test_unsorted_events_rejected():
    log = EventLog.from_events([ev(K.IMPRESSION, 10), ev(K.REQUEST, 0)])
    with pytest.raises(ValueError, match="sorted"):
        sessionize(log)


def test_session_invariants_rejected_not_repaired():
    u, r = UserProfile(1), LiveRoomSnapshot(2, 3)
    bad = [dict(request_ts=10, impression_ts=5),
           dict(request_ts=0, click_ts=5),
           dict(request_ts=0, impression_ts=1, like_ts=5, exit_ts=9),
           dict(request_ts=0, impression_ts=1, click_ts=6, like_ts=5, exit_ts=9),
           dict(request_ts=0, impression_ts=4, follow_ts=3, exit_ts=9),
           dict(request_ts=0, impression_ts=1, click_ts=12, exit_ts=9)]
    for kw in bad:
        with pytest.raises(InvalidSessionError):
            ImpressionSession(u, r, **kw)
    with pytest.raises(ValueError):
        UserProfile(1, click_anchor_history=tuple(range(51)))


def test_history_is_prior_clicks_capped():
    events = []
    for j in range(60):
        t = 1000 * j
        events += [ev(K.REQUEST, t, live=j, anchor=100 + j), ev(K.IMPRESSION, t + 1, live=j, anchor=100 + j),
                   ev(K.CLICK, t + 2, live=j, anchor=100 + j), ev(K.EXIT, t + 3, live=j, anchor=100 + j)]
    s = sessionize(EventLog.from_events(events))
    assert s[0].user.click_anchor_history == ()
    assert s[3].user.click_anchor_history == (100, 101, 102)
    assert s[59].user.click_anchor_history == tuple(range(109, 159))


def test_sessionize_output_sorted_by_request():
    events = [ev(K.REQUEST, 5, user=2), ev(K.REQUEST, 5, user=1), ev(K.REQUEST, 7, user=0)]
    s = sessionize(EventLog.from_events(events))
    assert s.keys() == [(1, 7, 5), (2, 7, 5), (0, 7, 7)]


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 80))
def test_round_trip_is_idempotent(seed, n):
    rng = np.random.default_rng(seed)
    table = random_sessions(rng, n)
    # distinct (user, live, request) keys per session; censored sessions close at the horizon
    horizon = int(max(table.exit_ts.max(), table.request_ts.max())) + 1
    table = SessionTable(user_id=table.user_id, live_id=table.live_id, anchor_id=table.anchor_id,
                         request_ts=table.request_ts, impression_ts=table.impression_ts, click_ts=table.click_ts,
                         follow_ts=table.follow_ts, like_ts=table.like_ts,
                         exit_ts=np.where(table.censored, horizon, table.exit_ts), censored=table.censored)
    once = sessionize(table.to_events(), horizon)
    twice = sessionize(once.to_events(), horizon)
    for col in ("user_id", "live_id", "request_ts", "impression_ts", "click_ts", "follow_ts", "like_ts",
                "exit_ts", "censored"):
        np.testing.assert_array_equal(getattr(once, col), getattr(twice, col))
    # and matches the original sessions up to ordering
    order = np.lexsort((table.live_id, table.user_id, table.request_ts))
    for col in ("request_ts", "click_ts", "follow_ts", "like_ts", "exit_ts", "censored"):
        np.testing.assert_array_equal(getattr(once, col), getattr(table, col)[order])


def test_sessionize_deterministic(rng):
    log = random_sessions(rng, 300).to_events()
    a, b = sessionize(log, 10**9), sessionize(log, 10**9)
    assert a.keys() == b.keys()
    np.testing.assert_array_equal(a.behaviors, b.behaviors)
