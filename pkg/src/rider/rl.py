"""Policy-gradient fine-tuning of the diffusion sampler against a folding oracle.

One epoch: snapshot the policy, sample a batch of denoising trajectories
(one zero-temperature run per target, the rest at temperatures drawn from a
fixed set), score each design with the oracle, form advantages against a
baseline and take a few clipped-ratio ascent steps.
"""

from __future__ import annotations

import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from .diffusion import MIN_STD, DenoisingTrajectory, NoiseSchedule, sample_sequence
from .errors import BatchError, ConfigError, OracleError, UpdateError
from .featurize import StructureEncoder, build_graph, default_encoder, standardize_scalars
from .metrics import metrics_report
from .optim import Adam, clip_grad_norm
from .policy import LinearNoisePolicy, PolicySnapshot, grad_log_prob
from .rewards import RewardConfig, total_reward
from .struct_io import BackboneStructure

logger = logging.getLogger(__name__)

BASELINE_MODES = ("reward", "batch", "moving")


@dataclass(frozen=True)
class RlConfig:
    epochs: int = 80
    updates_per_epoch: int = 2
    batch_size: int = 60
    clip_eps: float = 0.5
    learning_rate: float = 5e-5
    max_grad_norm: float = 1.0
    n_steps_rl: int = 30
    beta_baseline: float = 0.9
    temperature_set: tuple = (0.1, 0.3, 0.5, 0.7, 0.9)
    baseline_mode: str = "moving"
    min_std: float = MIN_STD
    workers: int = 1

    def __post_init__(self):
        object.__setattr__(self, "temperature_set", tuple(float(t) for t in self.temperature_set))
        if self.clip_eps <= 0:
            raise ConfigError(f"clip_eps must be positive, got {self.clip_eps}")
        if self.batch_size < 2:
            raise ConfigError(f"batch_size must be >= 2, got {self.batch_size}")
        if not 0 <= self.beta_baseline < 1:
            raise ConfigError(f"beta_baseline must lie in [0, 1), got {self.beta_baseline}")
        if self.baseline_mode not in BASELINE_MODES:
            raise ConfigError(f"baseline_mode must be one of {BASELINE_MODES}")
        if self.epochs < 0 or self.updates_per_epoch < 0 or self.n_steps_rl < 1:
            raise ConfigError("epochs/updates_per_epoch must be >= 0 and n_steps_rl >= 1")
        if not self.temperature_set or any(t <= 0 for t in self.temperature_set):
            raise ConfigError("temperature_set must hold positive temperatures")
        if self.learning_rate <= 0 or self.max_grad_norm <= 0:
            raise ConfigError("learning_rate and max_grad_norm must be positive")

    def to_dict(self):
        d = asdict(self)
        d["temperature_set"] = list(self.temperature_set)
        return d


@dataclass(frozen=True)
class Target:
    """A design target with its conditioning embedding computed once."""

    target_id: str
    structure: BackboneStructure
    h: np.ndarray


def prepare_target(structure: BackboneStructure, target_id: str = "target",
                   encoder: StructureEncoder | None = None, k: int = 32, standardize: bool = True) -> Target:
    """Encode ``structure`` once; the policy sees the (optionally standardised) scalar channels."""
    encoder = encoder or default_encoder()
    h = encoder(build_graph(structure, k=k)).scalar
    if standardize:
        h = standardize_scalars(h)
    return Target(target_id, structure, h)


class RewardCache:
    """Memoises oracle + metrics + reward per (target, sequence).

    Valid because the synthetic oracle is deterministic; pass
    ``enabled=False`` for stochastic predictors.
    """

    def __init__(self, enabled: bool = True):
        self.enabled = enabled
        self._store: dict = {}

    def score(self, target: Target, seq: str, oracle, reward_cfg: RewardConfig):
        key = (target.target_id, seq)
        if self.enabled and key in self._store:
            return self._store[key]
        report = metrics_report(oracle.fold(seq), target.structure)
        value = (report, total_reward(reward_cfg, report))
        if self.enabled:
            self._store[key] = value
        return value


def trajectory_rng(seed: int, epoch: int, index: int) -> np.random.Generator:
    return np.random.default_rng([seed, epoch, index])


def collect_batch(snapshot: PolicySnapshot, targets, oracle, cfg: RlConfig, reward_cfg: RewardConfig,
                  seed: int = 0, epoch: int = 0, sched: NoiseSchedule | None = None,
                  cache: RewardCache | None = None) -> list[DenoisingTrajectory]:
    """Sample and score ``cfg.batch_size`` trajectories.

    Trajectory ``m`` conditions on target ``m % len(targets)``; the first
    trajectory of each target runs at temperature 0. Every trajectory owns
    a random stream derived from ``(seed, epoch, m)``, so the batch does not
    depend on ``cfg.workers``.
    """
    if not targets:
        raise ConfigError("collect_batch needs at least one target")
    sched = sched or NoiseSchedule()
    cache = cache if cache is not None else RewardCache()

    def one(m):
        rng = trajectory_rng(seed, epoch, m)
        target = targets[m % len(targets)]
        tau = 0.0 if m < len(targets) else float(rng.choice(cfg.temperature_set))
        seq, traj = sample_sequence(snapshot, target.h, cfg.n_steps_rl, tau, rng, sched, cfg.min_std)
        traj.target_id = target.target_id
        return traj, target, seq.letters

    if cfg.workers > 1:
        with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
            sampled = list(pool.map(one, range(cfg.batch_size)))
    else:
        sampled = [one(m) for m in range(cfg.batch_size)]

    batch = []
    for traj, target, letters in sampled:
        try:
            _, traj.reward = cache.score(target, letters, oracle, reward_cfg)
        except OracleError as exc:
            logger.warning("oracle failed on %s (%s); trajectory dropped", letters, exc)
            continue
        batch.append(traj)
    if len(batch) * 2 < cfg.batch_size:
        raise BatchError(f"oracle failed on {cfg.batch_size - len(batch)} of {cfg.batch_size} designs")
    return batch


# ---------------------------------------------------------------------------
# baselines and the clipped objective


@dataclass
class BaselineState:
    b: float = 0.0
    beta_baseline: float = 0.9
    initialized: bool = False


def batch_baseline(rewards) -> float:
    rewards = np.asarray(rewards, dtype=float)
    if rewards.size == 0:
        raise ConfigError("baseline of an empty batch")
    return float(rewards.mean())


def update_moving_baseline(state: BaselineState, batch_mean: float) -> BaselineState:
    """Exponential moving average seeded with the first batch mean."""
    if not state.initialized:
        return BaselineState(float(batch_mean), state.beta_baseline, True)
    # same as beta * b + (1 - beta) * mean, but a constant stream stays exact
    beta = state.beta_baseline
    return BaselineState(state.b + (1 - beta) * (float(batch_mean) - state.b), beta, True)


def advantage(reward: float, baseline: float) -> float:
    return reward - baseline


def clipped_objective(ratio, adv, clip_eps):
    """``min(r A, clip(r, 1 - eps, 1 + eps) A)``, elementwise."""
    return np.minimum(ratio * adv, np.clip(ratio, 1 - clip_eps, 1 + clip_eps) * adv)


def _step_record(traj, step):
    return {"x_tk": step.x_tk, "x_tkm1": step.x_tkm1, "t_k": step.t_k, "t_km1": step.t_km1,
            "temperature": traj.temperature, "h": traj.h}


def surrogate(policy: LinearNoisePolicy, batch, advantages, cfg: RlConfig,
              sched: NoiseSchedule | None = None):
    """Clipped surrogate, its gradient and the fraction of clipped terms.

    Per-step terms are summed along each trajectory and averaged over the
    trajectories that carry gradient. Zero-temperature trajectories are left
    out: their floor-width action density makes the ratios ill-conditioned.
    """
    sched = sched or NoiseSchedule()
    grad = np.zeros(policy.n_params)
    total = 0.0
    n_terms = n_clipped = n_traj = 0
    for traj, adv in zip(batch, advantages):
        if traj.temperature == 0.0:
            continue
        n_traj += 1
        for step in traj.steps:
            g, logp = grad_log_prob(policy, _step_record(traj, step), sched, traj.min_std, with_value=True)
            ratio = float(np.exp(logp - step.log_prob_old))
            clipped = float(np.clip(ratio, 1 - cfg.clip_eps, 1 + cfg.clip_eps))
            unclipped_term = ratio * adv
            clipped_term = clipped * adv
            n_terms += 1
            if unclipped_term <= clipped_term:
                total += unclipped_term
                grad += (adv * ratio) * g
            else:
                total += clipped_term
                n_clipped += 1
    if n_traj == 0:
        return 0.0, grad, 0.0
    return total / n_traj, grad / n_traj, n_clipped / n_terms


@dataclass
class UpdateStats:
    objective: float
    clip_frac: float
    grad_norm: float


def policy_update(policy: LinearNoisePolicy, batch, baseline: float, cfg: RlConfig, optimizer: Adam,
                  sched: NoiseSchedule | None = None):
    """One ascent step on the clipped surrogate. Returns ``(policy, UpdateStats)``."""
    if not batch:
        raise ConfigError("policy update on an empty batch")
    advs = [advantage(t.reward, baseline) for t in batch]
    obj, grad, clip_frac = surrogate(policy, batch, advs, cfg, sched)
    if not np.isfinite(obj) or not np.all(np.isfinite(grad)):
        bad = int(np.sum(~np.isfinite(grad)))
        raise UpdateError(f"non-finite surrogate (objective={obj}, {bad} non-finite gradient entries)")
    grad, norm = clip_grad_norm(grad, cfg.max_grad_norm)
    theta = optimizer.step(policy.flat(), grad, maximize=True)
    return policy.with_flat(theta), UpdateStats(obj, clip_frac, norm)


# ---------------------------------------------------------------------------
# training loop


@dataclass
class EpochRecord:
    epoch: int
    mean_reward: float
    baseline: float
    clip_frac: float
    mean_abs_adv: float
    objectives: list = field(default_factory=list)
    wall_ms: float | None = None

    def to_dict(self, timing: bool = False) -> dict:
        d = {
            "epoch": self.epoch,
            "mean_reward": self.mean_reward,
            "baseline": self.baseline,
            "clip_frac": self.clip_frac,
            "mean_abs_adv": self.mean_abs_adv,
            "objectives": list(self.objectives),
        }
        if timing:
            d["wall_ms"] = self.wall_ms
        return d


def train(cfg: RlConfig, targets, oracle, policy: LinearNoisePolicy, reward_cfg: RewardConfig | None = None,
          seed: int = 0, sched: NoiseSchedule | None = None, log_file=None, timing: bool = False,
          cache: RewardCache | None = None):
    """Run ``cfg.epochs`` epochs of collection and clipped updates.

    Returns ``(policy, records)``. If ``log_file`` (an open text handle) is
    given, each epoch is appended to it as one JSON line. Wall-clock time is
    only logged with ``timing=True`` so logs stay reproducible.
    """
    reward_cfg = reward_cfg or RewardConfig()
    sched = sched or NoiseSchedule()
    cache = cache if cache is not None else RewardCache()
    optimizer = Adam(cfg.learning_rate)
    state = BaselineState(beta_baseline=cfg.beta_baseline)
    records = []
    for epoch in range(cfg.epochs):
        start = time.perf_counter()
        snapshot = PolicySnapshot.take(policy, epoch)
        batch = collect_batch(snapshot, targets, oracle, cfg, reward_cfg, seed, epoch, sched, cache)
        rewards = [t.reward for t in batch]
        mean = batch_baseline(rewards)
        if cfg.baseline_mode == "reward":
            b = 0.0
        elif cfg.baseline_mode == "batch":
            b = mean
        else:
            state = update_moving_baseline(state, mean)
            b = state.b

        objectives, clip_fracs = [], []
        for _ in range(cfg.updates_per_epoch):
            policy, stats = policy_update(policy, batch, b, cfg, optimizer, sched)
            objectives.append(stats.objective)
            clip_fracs.append(stats.clip_frac)
        if not snapshot.verify():
            raise UpdateError("policy snapshot changed during the epoch")

        rec = EpochRecord(
            epoch=epoch,
            mean_reward=mean,
            baseline=b,
            clip_frac=float(np.mean(clip_fracs)) if clip_fracs else 0.0,
            mean_abs_adv=float(np.mean([abs(r - b) for r in rewards])),
            objectives=objectives,
            wall_ms=(time.perf_counter() - start) * 1e3,
        )
        records.append(rec)
        logger.info("epoch %d mean_reward %.4f baseline %.4f clip %.3f", epoch, mean, b, rec.clip_frac)
        if log_file is not None:
            log_file.write(json.dumps(rec.to_dict(timing)) + "\n")
            log_file.flush()
    return policy, records


def design(policy, targets, oracle, n_steps: int, temperature: float, seed: int = 0, n_samples: int = 1,
           reward_cfg: RewardConfig | None = None, sched: NoiseSchedule | None = None,
           min_std: float = MIN_STD):
    """Sample ``n_samples`` designs per target and score them.

    Returns a list of ``(target_id, sequence, MetricsReport, reward)``; design
    ``j`` of target ``i`` uses the random stream ``(seed, i, j)``.
    """
    reward_cfg = reward_cfg or RewardConfig()
    out = []
    for i, target in enumerate(targets):
        for j in range(n_samples):
            rng = np.random.default_rng([seed, i, j])
            seq, _ = sample_sequence(policy, target.h, n_steps, temperature, rng, sched, min_std)
            report = metrics_report(oracle.fold(seq), target.structure)
            out.append((target.target_id, seq.letters, report, total_reward(reward_cfg, report)))
    return out
