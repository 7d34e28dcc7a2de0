import csv
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rtgbid.auction import AdvertiserConfig, OpportunityModel, SimState, compute_rtg, default_roster, episode_rng, \
    run_step
from rtgbid.errors import ContractError, DuplicationError, LoadError, SchemaError
from rtgbid.trajdata import (
    ConstantPolicy, PacingPolicy, SelectionWarning, Step, Trajectory, TrainingSet, check_nesting, export_csv,
    featurize, generate_behavior_dataset, identity_mapping, import_external, load, merge, save, select_top,
    selection_thresholds,
)
from rtgbid.trajdata.generation import NoisyPolicy

ADV = AdvertiserConfig(budget=2400, target_cpa=100, name="a")
STATE = (0.0, 1.0, 0.0, 0.0, 0.0, 0.0)


def make_traj(ret, seed, provenance="behavior:test", adv=ADV, steps=48):
    rewards = [0.0] * (steps - 1) + [float(ret)]
    rtg = compute_rtg(rewards)
    return Trajectory(tuple(Step(STATE, 1.0, rewards[t], rtg[t]) for t in range(steps)), adv, provenance, seed)


def make_set(returns, iteration=1):
    return TrainingSet(iteration, tuple(make_traj(r, i) for i, r in enumerate(returns)), rtg_scale=max(returns))


@pytest.fixture(scope="module")
def small_set():
    return generate_behavior_dataset(OpportunityModel(), default_roster(), 1, seed=0)


def test_counting_with_six_policy_palette():
    palette = [ConstantPolicy(0.0), ConstantPolicy(0.5), ConstantPolicy(1.0), ConstantPolicy(2.0),
               PacingPolicy(), NoisyPolicy(ConstantPolicy(1.0))]
    ts = generate_behavior_dataset(OpportunityModel(), default_roster(), 1, seed=1, palette=palette)
    assert len(ts) == 24 and ts.iteration == 1
    assert all(len(t.steps) == 48 for t in ts)
    zero = [t for t in ts if t.provenance == "behavior:const-0"]
    assert len(zero) == 4 and all(t.episode_return == 0 for t in zero)
    assert np.std(ts.returns) > 0


def test_record_invariants(small_set):
    for t in small_set:
        assert t.episode_return == t.steps[0].rtg
        np.testing.assert_array_equal(t.rtgs, compute_rtg(list(t.rewards)))
        s = t.states
        assert np.all(np.isfinite(s))
        assert np.all((s[:, 0] >= 0) & (s[:, 0] < 1)) and np.all((s[:, 1] >= 0) & (s[:, 1] <= 1))


def test_provenance_is_validated():
    with pytest.raises(ContractError):
        make_traj(1, 0, provenance="who knows")
    assert make_traj(1, 0, provenance="generated:iter=3").iteration == 3


def test_featurize_fresh_state():
    assert featurize(SimState.initial(ADV), ADV) == (0.0, 1.0, 0.0, 0.0, 0.0, 0.0)


def test_percentile_example():
    ref = make_set(range(1, 11))
    assert selection_thresholds(ref, 70)[ADV.bucket] == pytest.approx(7.3)
    cands = [make_traj(r, 100 + i, "generated:iter=1") for i, r in enumerate((10, 3, 8))]
    kept = select_top(cands, ref, 70)
    assert sorted(t.episode_return for t in kept) == [8, 10]


def test_select_boundary_and_empty():
    ref = make_set(range(1, 11))
    at = make_traj(7.3, 50, "generated:iter=1")
    assert select_top([at], ref, 70) == []
    assert select_top([make_traj(1, 51, "generated:iter=1")], ref, 70) == []


def test_select_unknown_bucket_falls_back_to_global():
    ref = make_set(range(1, 11))
    other = AdvertiserConfig(budget=999, target_cpa=100)
    with pytest.warns(SelectionWarning):
        kept = select_top([make_traj(9, 7, "generated:iter=1", adv=other)], ref, 70)
    assert len(kept) == 1


@settings(max_examples=30, deadline=None)
@given(st.lists(st.integers(0, 60), min_size=3, max_size=12), st.randoms(use_true_random=False))
def test_select_invariant_under_permutation(returns, rnd):
    ref = make_set([5, 10, 20, 30, 40])
    cands = [make_traj(r, 1000 + i, "generated:iter=1") for i, r in enumerate(returns)]
    shuffled = list(cands)
    rnd.shuffle(shuffled)
    assert select_top(cands, ref) == select_top(shuffled, ref)


def test_merge_examples(small_set):
    parent = TrainingSet(1, small_set.trajectories[:24], rtg_scale=small_set.rtg_scale)
    selected = [make_traj(30 + i, 5000 + i, "generated:iter=1") for i in range(8)]
    child = merge(parent, selected)
    assert len(child) == 32 and child.iteration == 2 and child.parent_digest == parent.digest
    assert check_nesting(parent, child)
    with pytest.raises(DuplicationError):
        merge(child, selected)
    empty = merge(parent, [])
    assert empty.trajectories == parent.trajectories and empty.iteration == 2


def test_merge_rejects_wrong_iteration(small_set):
    with pytest.raises(ContractError):
        merge(small_set, [make_traj(5, 77, "generated:iter=2")])


def test_save_load_round_trip(tmp_path, small_set):
    p1, p2 = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
    save(small_set, p1)
    back = load(p1)
    assert back == small_set and back.digest == small_set.digest
    save(back, p2)
    assert p1.read_bytes() == p2.read_bytes()


def test_empty_set_round_trip(tmp_path):
    ts = TrainingSet(1, (), rtg_scale=1.0)
    path = tmp_path / "e.jsonl"
    save(ts, path)
    assert len(path.read_text().splitlines()) == 1
    assert load(path) == ts


def test_truncated_file_names_the_line(tmp_path, small_set):
    path = tmp_path / "t.jsonl"
    save(small_set, path)
    lines = path.read_text().splitlines(keepends=True)
    path.write_text("".join(lines[:100]))
    with pytest.raises(LoadError, match="line 101"):
        load(path)


def test_tampered_rtg_is_rejected(tmp_path, small_set):
    path = tmp_path / "x.jsonl"
    save(small_set, path)
    lines = path.read_text().splitlines(keepends=True)
    i = next(i for i, line in enumerate(lines) if '"kind":"step"' in line)
    assert '"rtg":' in lines[i]
    lines[i] = lines[i].replace('"rtg":', '"rtg":1', 1)
    path.write_text("".join(lines))
    with pytest.raises(LoadError):
        load(path)


def test_export_import_round_trip(tmp_path, small_set):
    path = tmp_path / "d.csv"
    export_csv(small_set, path)
    back, report = import_external(path, identity_mapping(), rtg_scale=small_set.rtg_scale)
    assert report.skipped == 0
    assert back == small_set


def test_import_skips_short_episode(tmp_path, small_set):
    path = tmp_path / "d.csv"
    export_csv(small_set, path)
    rows = list(csv.reader(path.open()))
    header, body = rows[0], rows[1:]
    body = [r for r in body if not (r[0] == "0" and r[1] == "47")]
    with path.open("w", newline="") as fh:
        csv.writer(fh, lineterminator="\n").writerows([header] + body)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        back, report = import_external(path, identity_mapping())
    assert report.skipped == 1 and len(back) == len(small_set) - 1


def test_import_schema_errors(tmp_path, small_set):
    path = tmp_path / "d.csv"
    export_csv(small_set, path)
    mapping = identity_mapping()
    with pytest.raises(SchemaError, match="unknown"):
        import_external(path, {**mapping, "reward": "rewardz"})
    del mapping["action"]
    with pytest.raises(SchemaError, match="action"):
        import_external(path, mapping)


def raw_counter_csv(path, seed):
    """Simulate with a constant policy and log raw counters the way an external system might."""
    model = OpportunityModel()
    adv = default_roster()[1]
    rng = episode_rng(seed)
    state = SimState.initial(adv)
    rows, states, rewards = [], [], []
    for t in range(48):
        states.append(featurize(state, adv))
        before = state
        ev, reward, state = run_step(state, 0.9, model, adv, rng)
        step = state.recent[-1]
        rewards.append(reward)
        rows.append({"ep": "ep-1", "t": t, "bid_coef": 0.9, "conv": reward, "left": before.remaining_budget,
                     "spent": before.cum_cost, "convs": before.cum_conversions, "wins": step.wins,
                     "n": step.opportunities, "price": repr(step.price_sum)})
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    return adv, states, rewards


def test_import_raw_counters_reconstructs_features_and_rtg(tmp_path):
    path = tmp_path / "raw.csv"
    adv, states, rewards = raw_counter_csv(path, seed=8)
    mapping = {"ep": "episode_id", "t": "step", "bid_coef": "action", "conv": "reward",
               "left": "remaining_budget", "spent": "cum_cost", "convs": "cum_conversions", "wins": "step_wins",
               "n": "step_opportunities", "price": "step_price_sum"}
    ts, report = import_external(path, mapping, default_budget=adv.budget, default_target_cpa=adv.target_cpa)
    (traj,) = ts.trajectories
    np.testing.assert_array_equal(traj.states, np.array(states, dtype=np.float32))
    assert list(traj.rtgs) == compute_rtg(rewards)


def test_dataset_files_deterministic(tmp_path):
    a = generate_behavior_dataset(OpportunityModel(), default_roster()[:2], 1, seed=5)
    b = generate_behavior_dataset(OpportunityModel(), default_roster()[:2], 1, seed=5)
    save(a, tmp_path / "a.jsonl")
    save(b, tmp_path / "b.jsonl")
    assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()
