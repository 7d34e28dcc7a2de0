import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from _oracles import naive_score
from rtgbid.auction import AdvertiserConfig, AuctionEvent, EventBatch, OpportunityModel, default_roster
from rtgbid.errors import ConfigError, ContaminationError
from rtgbid.evaluation import (
    VARIANTS, EvalReport, aggregate, average_reports, batch_from_episode_policy, comparison_table, eval_seeds,
    evaluate_policy, penalty, read_report, score_episode, write_report,
)
from rtgbid.trajdata import ConstantPolicy

ROSTER = default_roster()[:2]


def event(bid, w, e, v):
    return AuctionEvent(bid, 0.0, w, e, v, bid * w * e, 0.01)


def random_log(rng, n):
    w = rng.random(n) < 0.6
    e = w & (rng.random(n) < 0.8)
    v = e & (rng.random(n) < 0.3)
    bids = rng.uniform(0, 10, n).round(rng.integers(0, 6))
    return [event(float(b), int(a), int(c), int(d)) for b, a, c, d in zip(bids, w, e, v)]


def test_penalty_edge_cases():
    assert penalty(3.0, 3.0) == 1.0
    assert penalty(6.0, 3.0) == 0.25
    assert penalty(1.5, 3.0) == 1.0
    assert penalty(0.0, 3.0) == 1.0
    with pytest.raises(ConfigError):
        penalty(1.0, 0.0)


@given(st.floats(0, 1e4), st.floats(0, 1e4), st.floats(0.01, 1e3))
def test_penalty_monotone(a, b, c_t):
    lo, hi = sorted((a, b))
    assert 0.0 <= penalty(hi, c_t) <= penalty(lo, c_t) <= 1.0
    if hi <= c_t:
        assert penalty(hi, c_t) == 1.0


def test_three_event_example():
    adv = AdvertiserConfig(budget=100, target_cpa=3)
    sc = score_episode([event(2, 1, 1, 1), event(3, 1, 1, 0), event(4, 1, 1, 1)], adv)
    assert sc.conversions == 2 and sc.spend == 9 and sc.c_a == 4.5
    assert sc.penalty == pytest.approx(4 / 9)
    assert sc.score == pytest.approx(0.889, abs=1e-3)
    assert sc.budget_ratio == 0.09


def test_zero_conversion_and_empty_logs():
    adv = AdvertiserConfig(budget=100, target_cpa=3)
    sc = score_episode([event(5, 1, 1, 0)], adv)
    assert sc.score == 0 and sc.conversions == 0 and sc.spend == 5
    sc = score_episode([], adv)
    assert (sc.score, sc.conversions, sc.budget_ratio, sc.c_a, sc.penalty) == (0, 0, 0, 0, 1)


@settings(max_examples=50)
@given(st.integers(0, 2**32 - 1), st.integers(0, 200))
def test_score_matches_naive_loop(seed, n):
    rng = np.random.default_rng(seed)
    log = random_log(rng, n)
    adv = AdvertiserConfig(budget=1000, target_cpa=float(rng.uniform(1, 20)))
    score, conv, spend, c_a = naive_score([(e.bid, e.won, e.exposed, e.converted) for e in log], adv.budget, adv.cpa)
    sc = score_episode(log, adv)
    assert (sc.score, sc.conversions, sc.spend, sc.c_a) == (score, conv, spend, c_a)


def test_batched_events_score_like_single_events():
    rng = np.random.default_rng(3)
    log = random_log(rng, 300)
    cols = [np.array([getattr(e, f) for e in log]) for f in
            ("bid", "opponent_price", "won", "exposed", "converted", "cost", "pcvr")]
    batches = [EventBatch(*[c[i:i + 50] for c in cols]) for i in range(0, 300, 50)]
    adv = AdvertiserConfig(budget=1000, target_cpa=5)
    assert score_episode(batches, adv) == score_episode(log, adv)


def test_aggregate_is_linear():
    rng = np.random.default_rng(0)
    adv = AdvertiserConfig(budget=1000, target_cpa=5)
    rows = []
    for i in range(40):
        sc = score_episode(random_log(rng, 100), adv)
        rows.append({"advertiser": "x", "seed": i, "score": sc.score, "conversions": sc.conversions,
                     "budget_ratio": sc.budget_ratio, "c_a": sc.c_a, "penalty": sc.penalty, "spend": sc.spend})
    rep = aggregate("ds1", rows)
    assert rep.episodes == 40
    assert abs(rep.score - sum(r["score"] for r in rows) / 40) <= 1e-9
    assert abs(rep.conversions - sum(r["conversions"] for r in rows) / 40) <= 1e-9
    for r in rows:
        assert r["score"] == r["penalty"] * r["conversions"]
        assert 0 <= r["penalty"] <= 1


def test_zero_policy_scores_zero_everywhere():
    reps = evaluate_policy(lambda: batch_from_episode_policy(ConstantPolicy(0.0)), OpportunityModel(), ROSTER,
                           n_episodes=2)
    assert set(reps) == set(VARIANTS)
    for r in reps.values():
        assert r.score == 0 and r.budget_ratio == 0 and r.episodes == 4


def test_reports_are_deterministic_and_variants_change_target():
    run = lambda: evaluate_policy(lambda: batch_from_episode_policy(ConstantPolicy(1.2)),  # noqa: E731
                                  OpportunityModel(), ROSTER, n_episodes=2, seed=5)
    a, b = run(), run()
    assert {k: v.to_dict() for k, v in a.items()} == {k: v.to_dict() for k, v in b.items()}
    # bids scale with the target CPA, so the variants see different outcomes
    assert len({r.conversions for r in a.values()}) == 3


def test_contamination_is_refused():
    used = eval_seeds(0, len(ROSTER), 2)[1][:1]
    with pytest.raises(ContaminationError):
        evaluate_policy(lambda: batch_from_episode_policy(ConstantPolicy(1.0)), OpportunityModel(), ROSTER,
                        n_episodes=2, seed=0, training_seeds=set(used))


def test_report_file_round_trip(tmp_path):
    reps = evaluate_policy(lambda: batch_from_episode_policy(ConstantPolicy(0.9)), OpportunityModel(), ROSTER,
                           n_episodes=1)
    write_report(tmp_path / "r.json", reps, {"method": "c"})
    back, meta = read_report(tmp_path / "r.json")
    assert meta == {"method": "c"}
    assert {k: v.to_dict() for k, v in back.items()} == {k: v.to_dict() for k, v in reps.items()}


def test_average_reports():
    a = {"ds1": EvalReport("ds1", 4, 2.0, 3.0, 0.5, 10.0, 1.0)}
    b = {"ds1": EvalReport("ds1", 4, 4.0, 5.0, 0.7, 12.0, 0.5)}
    m = average_reports([a, b])["ds1"]
    assert (m.episodes, m.score, m.conversions, m.penalty) == (8, 3.0, 4.0, 0.75)


def test_comparison_table_layout():
    rep = {v: EvalReport(v, 1, 1.0, 2.0, 0.5, 3.0, 1.0) for v in VARIANTS}
    table = comparison_table({m: rep for m in ("rstar", "bc", "dt_baseline", "rdt", "rhat")})
    lines = table.strip().splitlines()
    assert [ln.split("|")[1].strip() for ln in lines[2:]] == ["dt_baseline", "bc", "rdt", "rhat", "rstar"]
    for v in VARIANTS:
        assert f"{v} Score" in lines[0]
    assert all(ln.count("|") == 11 for ln in lines)
    assert "50.00%" in lines[2]
