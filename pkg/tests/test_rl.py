import json
import logging
from dataclasses import replace

import numpy as np
import pytest
from scipy import stats

from oracles import central_diff, max_rel_err
from rider.diffusion import NoiseSchedule, sample_sequence
from rider.errors import BatchError, ConfigError, OracleError, UpdateError
from rider.metrics import MetricsReport
from rider.oracle import HelixOracle, make_task
from rider.optim import Adam, clip_grad_norm
from rider.policy import PolicySnapshot, PreconditionedPolicy, TeacherPolicy, grad_log_prob
from rider.rewards import RewardConfig, total_reward
from rider.rl import (BaselineState, RewardCache, RlConfig, advantage, batch_baseline, clipped_objective,
                      collect_batch, policy_update, prepare_target, surrogate, train, update_moving_baseline)

S = NoiseSchedule()
ORACLE = HelixOracle()
TOY = RlConfig(epochs=2, batch_size=6, n_steps_rl=5, updates_per_epoch=2, learning_rate=1e-3)


@pytest.fixture(scope="module")
def toy_target():
    structure, native = make_task(None, "GAUCCAGU")
    return prepare_target(structure, "toy"), native


@pytest.fixture(scope="module")
def toy_policy(toy_target):
    target, _ = toy_target
    return PreconditionedPolicy.init(target.h.shape[1], seed=3, scale=0.05)


def snapshot(policy):
    return PolicySnapshot.take(policy, 0)


def test_config_validation():
    for bad in (dict(clip_eps=0.0), dict(batch_size=1), dict(beta_baseline=1.0), dict(baseline_mode="none"),
                dict(temperature_set=()), dict(learning_rate=0.0)):
        with pytest.raises(ConfigError):
            RlConfig(**bad)


def test_batch_mixture(toy_target, toy_policy):
    target, _ = toy_target
    batch = collect_batch(snapshot(toy_policy), [target], ORACLE, TOY, RewardConfig(), seed=1)
    temps = [t.temperature for t in batch]
    assert len(batch) == 6 and temps.count(0.0) == 1 and temps[0] == 0.0
    assert all(t in TOY.temperature_set for t in temps[1:])
    for traj in batch:
        assert len(traj.steps) == TOY.n_steps_rl
        assert all(np.isfinite(s.log_prob_old) for s in traj.steps)
        assert traj.target_id == "toy" and np.isfinite(traj.reward)


def test_one_deterministic_run_per_target(toy_target, toy_policy):
    target, _ = toy_target
    other = replace(target, target_id="other")
    batch = collect_batch(snapshot(toy_policy), [target, other], ORACLE, replace(TOY, batch_size=8),
                          RewardConfig(), seed=1)
    zero = [t.target_id for t in batch if t.temperature == 0.0]
    assert sorted(zero) == ["other", "toy"]


def test_temperature_draws_cover_the_set(toy_target, toy_policy):
    target, _ = toy_target
    cfg = replace(TOY, batch_size=101, n_steps_rl=1)
    temps = [t.temperature for t in collect_batch(snapshot(toy_policy), [target], ORACLE, cfg, RewardConfig())][1:]
    counts = np.array([temps.count(t) for t in cfg.temperature_set])
    assert counts.sum() == 100
    # uniform over the five temperatures
    assert stats.chisquare(counts).pvalue > 0.001


def batch_bytes(batch):
    return [(t.temperature, t.reward, t.final_sequence.letters, [s.x_tkm1.tobytes() for s in t.steps])
            for t in batch]


def test_batch_deterministic_and_worker_independent(toy_target, toy_policy):
    target, _ = toy_target
    snap = snapshot(toy_policy)
    a = collect_batch(snap, [target], ORACLE, TOY, RewardConfig(), seed=4)
    b = collect_batch(snap, [target], ORACLE, TOY, RewardConfig(), seed=4)
    c = collect_batch(snap, [target], ORACLE, replace(TOY, workers=3), RewardConfig(), seed=4)
    assert batch_bytes(a) == batch_bytes(b) == batch_bytes(c)
    d = collect_batch(snap, [target], ORACLE, TOY, RewardConfig(), seed=5)
    assert batch_bytes(d) != batch_bytes(a)


def test_teacher_earns_perfect_reward(toy_target):
    target, native = toy_target
    cfg = RewardConfig()
    perfect = total_reward(cfg, MetricsReport(1.0, 1.0, 0.0, len(native)))
    assert perfect == 75.0
    batch = collect_batch(TeacherPolicy(native.onehot, S), [target], ORACLE, TOY, cfg)
    assert all(t.final_sequence.letters == native.letters for t in batch)
    assert [t.reward for t in batch] == pytest.approx([perfect] * len(batch), abs=1e-9)


class FlakyOracle:
    name = "flaky"

    def __init__(self, fail_first):
        self.calls = 0
        self.fail_first = fail_first

    def fold(self, seq):
        self.calls += 1
        if self.calls <= self.fail_first:
            raise OracleError("predictor crashed")
        return ORACLE.fold(seq)


def test_failed_designs_are_dropped(toy_target, toy_policy, caplog):
    target, _ = toy_target
    cache = RewardCache(enabled=False)
    with caplog.at_level(logging.WARNING, logger="rider.rl"):
        batch = collect_batch(snapshot(toy_policy), [target], FlakyOracle(2), TOY, RewardConfig(), cache=cache)
    assert len(batch) == 4
    assert sum("dropped" in r.message for r in caplog.records) == 2
    # exactly half may fail; one more is too many
    assert len(collect_batch(snapshot(toy_policy), [target], FlakyOracle(3), TOY, RewardConfig(), cache=cache)) == 3
    with pytest.raises(BatchError):
        collect_batch(snapshot(toy_policy), [target], FlakyOracle(4), TOY, RewardConfig(), cache=cache)


def test_collect_needs_targets(toy_policy):
    with pytest.raises(ConfigError):
        collect_batch(snapshot(toy_policy), [], ORACLE, TOY, RewardConfig())


# ---------------------------------------------------------------------------
# baselines, advantages, clipping


def test_batch_baseline():
    assert batch_baseline([2, 4]) == 3
    assert batch_baseline([7.5]) == 7.5
    assert batch_baseline([1.25] * 9) == 1.25
    with pytest.raises(ConfigError):
        batch_baseline([])


def test_moving_baseline_examples():
    first = update_moving_baseline(BaselineState(beta_baseline=0.9), 2.0)
    assert first.b == 2.0 and first.initialized
    assert update_moving_baseline(BaselineState(1.0, 0.9, True), 2.0).b == pytest.approx(1.1, abs=1e-15)
    assert update_moving_baseline(BaselineState(-3.0, 0.0, True), 2.5).b == 2.5


def test_moving_baseline_constant_stream_is_exact(rng):
    for mean in rng.normal(scale=50, size=20):
        state = BaselineState(beta_baseline=float(rng.uniform(0, 0.99)))
        for _ in range(100):
            state = update_moving_baseline(state, float(mean))
            assert state.b == mean


def test_moving_baseline_has_lower_variance(rng):
    # many replicate streams of 120 noisy batch means; the smoothed baseline should
    # be the steadier sequence far more often than chance
    lower = 0
    for _ in range(200):
        means = 10.0 + rng.normal(scale=3.0, size=120)
        state, bs = BaselineState(beta_baseline=0.9), []
        for m in means:
            state = update_moving_baseline(state, m)
            bs.append(state.b)
        lower += np.var(bs, ddof=1) < np.var(means, ddof=1)
    assert stats.binomtest(lower, 200, 0.5, alternative="greater").pvalue < 0.01


def test_advantage_examples():
    assert advantage(3, 1) == 2
    assert advantage(1.7, 1.7) == 0
    assert advantage(0, 1.1) == -1.1


def test_batch_mean_advantages_sum_to_zero(rng):
    for _ in range(20):
        rewards = rng.normal(scale=30, size=int(rng.integers(2, 60)))
        b = batch_baseline(rewards)
        assert abs(np.mean([advantage(r, b) for r in rewards])) < 1e-9


def test_clipped_objective_table():
    assert clipped_objective(1.0, 2.0, 0.5) == 2.0
    assert clipped_objective(2.0, 1.0, 0.5) == 1.5
    assert clipped_objective(0.2, -1.0, 0.5) == -0.5
    # unclipped inside the trust region, pessimistic outside it
    assert clipped_objective(1.3, -2.0, 0.5) == pytest.approx(-2.6)
    assert clipped_objective(0.2, 1.0, 0.5) == pytest.approx(0.2)
    assert np.allclose(clipped_objective(np.array([1.0, 2.0]), np.array([2.0, 1.0]), 0.5), [2.0, 1.5])


# ---------------------------------------------------------------------------
# surrogate and updates


def rewarded_batch(policy, target, cfg=TOY, seed=0, rewards=None):
    batch = collect_batch(snapshot(policy), [target], ORACLE, cfg, RewardConfig(), seed=seed)
    if rewards is not None:
        for t, r in zip(batch, rewards):
            t.reward = r
    return batch


def test_ratio_one_at_snapshot(toy_target, toy_policy):
    target, _ = toy_target
    batch = rewarded_batch(toy_policy, target)
    for traj in batch:
        for step in traj.steps:
            rec = {"x_tk": step.x_tk, "x_tkm1": step.x_tkm1, "t_k": step.t_k, "t_km1": step.t_km1,
                   "temperature": traj.temperature, "h": traj.h}
            _, logp = grad_log_prob(toy_policy, rec, S, traj.min_std, with_value=True)
            assert abs(np.exp(logp - step.log_prob_old) - 1) < 1e-9


def test_gradient_at_snapshot_is_vanilla_policy_gradient(toy_target, toy_policy):
    target, _ = toy_target
    batch = rewarded_batch(toy_policy, target)
    b = batch_baseline([t.reward for t in batch])
    advs = [advantage(t.reward, b) for t in batch]
    obj, grad, clip_frac = surrogate(toy_policy, batch, advs, TOY, S)
    want = np.zeros_like(grad)
    used = [(t, a) for t, a in zip(batch, advs) if t.temperature > 0]
    for traj, adv in used:
        for step in traj.steps:
            rec = {"x_tk": step.x_tk, "x_tkm1": step.x_tkm1, "t_k": step.t_k, "t_km1": step.t_km1,
                   "temperature": traj.temperature, "h": traj.h}
            want += adv * grad_log_prob(toy_policy, rec, S, traj.min_std)
    want /= len(used)
    assert max_rel_err(grad, want) < 1e-6
    assert clip_frac == 0.0
    assert obj == pytest.approx(TOY.n_steps_rl * np.mean([a for _, a in used]), rel=1e-9)


def surrogate_fd_check(policy, batch, advs, cfg, delta):
    theta = policy.flat() + delta
    moved = policy.with_flat(theta)
    _, grad, _ = surrogate(moved, batch, advs, cfg, S)
    fd = central_diff(lambda th: surrogate(policy.with_flat(th), batch, advs, cfg, S)[0], theta)
    return max_rel_err(grad, fd)


def test_surrogate_gradient_finite_differences(rng):
    # two stochastic trajectories of three steps on a 4-residue toy target
    h_dim = 3
    cfg = RlConfig(batch_size=2, n_steps_rl=3, temperature_set=(0.5, 0.9))
    worst = 0.0
    for trial in range(20):
        h = rng.normal(size=(4, h_dim))
        policy = PreconditionedPolicy.init(h_dim, seed=trial, scale=0.3)
        batch = []
        for m in range(2):
            _, traj = sample_sequence(policy, h, 3, 0.5 + 0.4 * m, np.random.default_rng([trial, m]), S)
            batch.append(traj)
        advs = list(rng.normal(size=2))
        # move away from the snapshot so the ratios differ from one
        worst = max(worst, surrogate_fd_check(policy, batch, advs, cfg, rng.normal(size=policy.n_params) * 1e-3))
    assert worst < 1e-4


def test_zero_advantage_leaves_params(toy_target, toy_policy):
    target, _ = toy_target
    batch = rewarded_batch(toy_policy, target, rewards=[5.0] * TOY.batch_size)
    new, st = policy_update(toy_policy, batch, 5.0, TOY, Adam(TOY.learning_rate), S)
    assert np.array_equal(new.flat(), toy_policy.flat())
    assert st.objective == 0.0 and st.grad_norm == 0.0


def test_non_finite_update_raises(toy_target, toy_policy):
    target, _ = toy_target
    batch = rewarded_batch(toy_policy, target, rewards=[np.nan] * TOY.batch_size)
    with pytest.raises(UpdateError):
        policy_update(toy_policy, batch, 0.0, TOY, Adam(TOY.learning_rate), S)
    with pytest.raises(ConfigError):
        policy_update(toy_policy, [], 0.0, TOY, Adam(TOY.learning_rate), S)


def test_only_deterministic_runs_give_no_gradient(toy_target, toy_policy):
    target, _ = toy_target
    batch = [t for t in rewarded_batch(toy_policy, target) if t.temperature == 0.0]
    obj, grad, clip = surrogate(toy_policy, batch, [3.0], TOY, S)
    assert obj == 0.0 and not grad.any() and clip == 0.0


def test_grad_clipping():
    g, n = clip_grad_norm(np.array([3.0, 4.0]), 1.0)
    assert n == 5.0 and np.allclose(g, [0.6, 0.8])
    g, n = clip_grad_norm(np.array([0.3, 0.4]), 1.0)
    assert np.array_equal(g, [0.3, 0.4])


def test_adam_first_step_is_lr_sized():
    opt = Adam(0.01)
    theta = opt.step(np.zeros(3), np.array([5.0, -0.2, 1e-3]), maximize=True)
    assert np.allclose(theta, [0.01, -0.01, 0.01], rtol=1e-4)


# ---------------------------------------------------------------------------
# training loop


def test_zero_epochs(toy_target, toy_policy):
    target, _ = toy_target
    pol, log = train(replace(TOY, epochs=0), [target], ORACLE, toy_policy)
    assert pol is toy_policy and log == []


def test_train_log_is_deterministic(toy_target, toy_policy, tmp_path):
    target, _ = toy_target
    texts = []
    for run in range(2):
        path = tmp_path / f"log{run}.jsonl"
        with open(path, "w") as fh:
            pol, records = train(TOY, [target], ORACLE, toy_policy, seed=7, log_file=fh)
        texts.append(path.read_text())
    assert texts[0] == texts[1]
    lines = [json.loads(x) for x in texts[0].splitlines()]
    assert [x["epoch"] for x in lines] == [0, 1]
    assert set(lines[0]) == {"epoch", "mean_reward", "baseline", "clip_frac", "mean_abs_adv", "objectives"}
    assert all(0 <= x["clip_frac"] <= 1 for x in lines)
    # moving baseline starts at the first batch mean
    assert lines[0]["baseline"] == lines[0]["mean_reward"]
    assert not np.array_equal(pol.flat(), toy_policy.flat())


def test_train_worker_count_does_not_matter(toy_target, toy_policy):
    target, _ = toy_target
    a, ra = train(TOY, [target], ORACLE, toy_policy, seed=2)
    b, rb = train(replace(TOY, workers=2), [target], ORACLE, toy_policy, seed=2)
    assert a.flat().tobytes() == b.flat().tobytes()
    assert [r.to_dict() for r in ra] == [r.to_dict() for r in rb]


@pytest.mark.parametrize("mode", ["reward", "batch", "moving"])
def test_baseline_modes(mode, toy_target, toy_policy):
    target, _ = toy_target
    _, recs = train(replace(TOY, baseline_mode=mode, epochs=3), [target], ORACLE, toy_policy, seed=1)
    for r in recs:
        if mode == "reward":
            assert r.baseline == 0.0
        elif mode == "batch":
            assert r.baseline == r.mean_reward
    if mode == "moving":
        b1 = recs[0].mean_reward + 0.1 * (recs[1].mean_reward - recs[0].mean_reward)
        assert recs[1].baseline == pytest.approx(b1, rel=1e-12)


def test_timing_only_when_asked(toy_target, toy_policy):
    target, _ = toy_target
    _, recs = train(replace(TOY, epochs=1), [target], ORACLE, toy_policy)
    assert "wall_ms" not in recs[0].to_dict() and recs[0].to_dict(timing=True)["wall_ms"] > 0
