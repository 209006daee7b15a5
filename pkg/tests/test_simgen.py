import numpy as np
import pytest
from scipy import stats

from sliver.events import BehaviorKind, sessionize, write_event_log
from sliver.simgen import (HOUR_MS, ConfigError, GeneratorConfig, GroundTruth, default_base_rates, generate,
                           true_ctr)

FIVE_MIN = 300_000
SMALL = dict(num_users=300, num_lives=15, horizon_ms=3 * HOUR_MS, drain_ms=HOUR_MS)


@pytest.fixture(scope="module")
def default_world():
    log, truth = generate(GeneratorConfig())
    return log, truth, sessionize(log, truth.log_end)


def test_same_seed_gives_byte_identical_output(tmp_path):
    cfg = GeneratorConfig(seed=9, **SMALL)
    for run in range(2):
        log, truth = generate(cfg)
        write_event_log(log, str(tmp_path / f"e{run}.jsonl"))
        truth.save(str(tmp_path / f"t{run}.json"))
    assert (tmp_path / "e0.jsonl").read_bytes() == (tmp_path / "e1.jsonl").read_bytes()
    assert (tmp_path / "t0.json").read_bytes() == (tmp_path / "t1.json").read_bytes()
    other, _ = generate(cfg.replace(seed=10))
    assert not other.equals(generate(cfg)[0])


def test_truth_round_trips_through_json(tmp_path):
    _, truth = generate(GeneratorConfig(**SMALL))
    truth.save(str(tmp_path / "t.json"))
    back = GroundTruth.load(str(tmp_path / "t.json"))
    np.testing.assert_array_equal(back.labels, truth.labels)
    np.testing.assert_array_equal(back.state_at(truth.room_ids, 5000), truth.state_at(truth.room_ids, 5000))


def test_zero_click_rate_gives_no_clicks():
    rates = np.asarray(default_base_rates())
    rates[:, :, 0] = 0.0
    log, truth = generate(GeneratorConfig(base_rates=rates.tolist(), **SMALL))
    kinds = set(log.kind.tolist())
    assert int(BehaviorKind.CLICK) not in kinds and int(BehaviorKind.LIKE) not in kinds
    assert int(BehaviorKind.IMPRESSION) in kinds
    assert not truth.labels[:, 0].any()


@pytest.mark.parametrize("bad", [dict(num_users=0), dict(num_lives=0), dict(horizon_ms=0),
                                 dict(content_shift_period_ms=-1.0), dict(p_unimpressed=1.5),
                                 dict(base_rates=[[[0.5, 0.5, 2.0]]] * 4), dict(delay_type_offsets=[0.0])])
def test_degenerate_config_rejected(bad):
    with pytest.raises(ConfigError):
        generate(GeneratorConfig(**{**SMALL, **bad}))


def test_unknown_option_rejected():
    with pytest.raises(ConfigError):
        GeneratorConfig.from_dict({"num_users": 5, "warp": 1})


def test_generated_sessions_are_valid_and_likes_follow_clicks():
    log, truth = generate(GeneratorConfig(seed=4, **SMALL))
    s = sessionize(log, truth.log_end)  # raises on any invariant violation
    liked = s.like_ts >= 0
    assert liked.any()
    assert np.all(s.click_ts[liked] >= 0) and np.all(s.like_ts[liked] > s.click_ts[liked])


def test_eventual_labels_match_observed_behaviour(default_world):
    _, truth, s = default_world
    labels, found = truth.labels_for(s)
    assert found.all()
    done = ~s.censored
    for b, col in enumerate((s.click_ts, s.follow_ts, s.like_ts)):
        np.testing.assert_array_equal(labels[done, b], col[done] >= 0)


def test_default_calibration_within_five_minutes(default_world):
    _, _, s = default_world
    assert len(s) >= 100_000
    done = ~s.censored
    for col, target in ((s.click_ts, 0.86), (s.follow_ts, 0.80)):
        m = done & (col >= 0)
        frac = np.mean(col[m] - s.impression_ts[m] < FIVE_MIN)
        assert abs(frac - target) <= 0.03, frac


def test_true_ctr_is_piecewise_constant():
    _, truth = generate(GeneratorConfig(seed=2, **SMALL))
    off = truth.shift_offsets
    r = next(i for i in range(truth.room_ids.size) if off[i + 1] - off[i] >= 2)
    j = off[r] + 1
    shift = int(truth.shift_times[j])
    live = int(truth.room_ids[r])
    for seg in range(4):
        assert true_ctr(truth, live, shift - 1, seg) == truth.base_rates[seg, truth.states[j - 1], 0]
        assert true_ctr(truth, live, shift + 1, seg) == truth.base_rates[seg, truth.states[j], 0]
    assert truth.states[j] != truth.states[j - 1]


def test_stationary_room_has_constant_ctr():
    _, truth = generate(GeneratorConfig(content_shift_period_ms=None, **SMALL))
    ts = np.arange(0, truth.log_end, 60_000)
    for live in truth.room_ids[:5]:
        vals = true_ctr(truth, np.full(ts.size, live), ts)
        assert np.all(vals == vals[0])


def test_true_ctr_unknown_room():
    _, truth = generate(GeneratorConfig(**SMALL))
    with pytest.raises(KeyError):
        true_ctr(truth, 10_000, 0)


def test_empirical_click_rate_matches_true_ctr(default_world):
    _, truth, s = default_world
    imp = s.impression_ts
    for lo in range(1, 10, 2):
        m = (imp >= lo * HOUR_MS) & (imp < (lo + 2) * HOUR_MS)
        p = truth.rates(s.live_id[m], imp[m], truth.segment_of(s.user_id[m]))[:, 0]
        clicks = int(np.sum(s.click_ts[m] >= 0))
        sd = np.sqrt(np.sum(p * (1 - p)))
        assert abs(clicks - p.sum()) <= 3 * sd, (lo, clicks, p.sum(), sd)


def test_delay_distributions_match_configuration():
    # truncation at the end of the log is undone by conditioning each delay on its cap
    cfg = GeneratorConfig(num_users=14_000, seed=11)
    log, truth = generate(cfg)
    s = sessionize(log, truth.log_end)
    offs = np.asarray(cfg.delay_type_offsets)[s.side["live_type"]]
    cases = (("click", s.impression_ts, s.click_ts, offs), ("follow", s.impression_ts, s.follow_ts, offs),
             ("like", s.click_ts, s.like_ts, np.zeros_like(offs)))
    for name, start, ts, off in cases:
        m = ts >= 0
        d = cfg.delay_dists[name]
        cdf = lambda x: stats.norm.cdf((np.log(x) - d["mu"] - off[m]) / d["sigma"])  # noqa: E731
        u = cdf(ts[m] - start[m]) / cdf(truth.log_end - start[m])
        res = stats.kstest(u, "uniform")
        assert res.statistic < 1.95 / np.sqrt(m.sum()), (name, m.sum(), res.statistic)
    assert int(np.sum(s.click_ts >= 0)) >= 100_000


def test_impression_delay_has_mass_above_five_minutes(default_world):
    _, _, s = default_world
    m = s.impression_ts >= 0
    assert 0 < np.mean(s.impression_ts[m] - s.request_ts[m] > FIVE_MIN) < 0.5
