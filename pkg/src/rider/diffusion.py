"""Variance-preserving noise schedule, forward noising, the noise-prediction
loss and the temperature-controlled DDIM sampler over one-hot sequences.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, RangeError, ShapeError
from .struct_io import RnaSequence, decode_argmax, sequence_to_onehot

MIN_STD = 1e-4
LOG_2PI = float(np.log(2.0 * np.pi))


@dataclass(frozen=True)
class NoiseSchedule:
    """Linear-beta VP-SDE schedule on ``[0, t_final]``."""

    beta0: float = 0.1
    beta1: float = 20.0
    t_final: float = 1.0
    eps_time: float = 1e-3

    def __post_init__(self):
        if not 0 < self.eps_time < self.t_final:
            raise ConfigError(f"need 0 < eps_time < t_final, got {self.eps_time}, {self.t_final}")
        if not self.beta1 >= self.beta0 > 0:
            raise ConfigError(f"need beta1 >= beta0 > 0, got {self.beta0}, {self.beta1}")

    def integral(self, t):
        return self.beta0 * t + 0.5 * (self.beta1 - self.beta0) * t * t

    def time_grid(self, n_steps: int) -> np.ndarray:
        """``n_steps + 1`` uniformly spaced times from ``t_final`` down to ``eps_time``."""
        if n_steps < 1:
            raise ConfigError(f"n_steps must be >= 1, got {n_steps}")
        return np.linspace(self.t_final, self.eps_time, n_steps + 1)


def alpha_sigma(sched: NoiseSchedule, t):
    """Return ``(alpha_t, sigma_t, lambda_t)``; ``lambda_0`` is ``+inf``."""
    if np.ndim(t) == 0:
        # scalar path: called once or twice per denoising step
        t = float(t)
        if not 0 <= t <= sched.t_final:
            raise RangeError(f"t={t} outside [0, {sched.t_final}]")
        integ = sched.integral(t)
        sigma2 = -math.expm1(-integ)
        lam = -integ - math.log(sigma2) if sigma2 > 0 else math.inf
        return math.exp(-0.5 * integ), math.sqrt(sigma2), lam
    t_arr = np.asarray(t, dtype=float)
    if np.any(t_arr < 0) or np.any(t_arr > sched.t_final):
        raise RangeError(f"t={t} outside [0, {sched.t_final}]")
    integ = sched.integral(t_arr)
    alpha2 = np.exp(-integ)
    sigma2 = -np.expm1(-integ)
    alpha = np.sqrt(alpha2)
    sigma = np.sqrt(sigma2)
    with np.errstate(divide="ignore"):
        lam = np.where(sigma2 > 0, -integ - np.log(np.where(sigma2 > 0, sigma2, 1.0)), np.inf)
    return alpha, sigma, lam


@dataclass(frozen=True)
class LatentState:
    x: np.ndarray
    t: float


def forward_noise(x0, t, eps, sched: NoiseSchedule) -> LatentState:
    x0 = np.asarray(x0, dtype=float)
    eps = np.asarray(eps, dtype=float)
    if x0.shape != eps.shape:
        raise ShapeError(f"x0 {x0.shape} and noise {eps.shape} differ in shape")
    alpha, sigma, _ = alpha_sigma(sched, t)
    return LatentState(alpha * x0 + sigma * eps, float(t))


def pretrain_loss(policy, batch, rng: np.random.Generator, sched: NoiseSchedule | None = None):
    """Monte-Carlo noise-prediction loss and its parameter gradient.

    ``batch`` is a sequence of ``(x0, h_scalar)`` pairs. Each item draws its
    own ``t ~ U[eps_time, t_final]`` and standard normal noise. The loss is
    the batch mean of ``||eps - eps_hat||^2`` (summed over the N x 4 entries).
    Returns ``(loss, grad)``; ``grad`` is None for parameter-free policies.
    """
    if not batch:
        raise ConfigError("pretraining batch is empty")
    sched = sched or NoiseSchedule()
    total = 0.0
    grad = None
    for x0, h in batch:
        x0 = np.asarray(x0, dtype=float)
        t = float(rng.uniform(sched.eps_time, sched.t_final))
        eps = rng.standard_normal(x0.shape)
        xt = forward_noise(x0, t, eps, sched).x
        resid = policy.predict_noise(xt, t, h) - eps
        total += float(np.sum(resid * resid))
        if hasattr(policy, "vjp"):
            g = policy.vjp(xt, t, h, 2.0 * resid)
            grad = g if grad is None else grad + g
    n = len(batch)
    return total / n, (None if grad is None else grad / n)


@dataclass(frozen=True)
class StepGeometry:
    """Coefficients of one reverse step, independent of the noise prediction.

    The action mean is ``mean_x * x_tk + mean_eps * eps_hat`` and the
    action density is isotropic Gaussian with standard deviation ``std``.
    """

    alpha_k: float
    sigma_k: float
    alpha_km1: float
    sigma_km1: float
    std: float
    mean_x: float
    mean_eps: float


def step_geometry(t_k, t_km1, temperature, sched: NoiseSchedule, min_std: float = MIN_STD) -> StepGeometry:
    if not t_k > t_km1:
        raise RangeError(f"reverse step needs t_k > t_km1, got {t_k} -> {t_km1}")
    if temperature < 0:
        raise RangeError(f"temperature must be >= 0, got {temperature}")
    a_k, s_k, _ = alpha_sigma(sched, t_k)
    a_m, s_m, _ = alpha_sigma(sched, t_km1)
    eta = (s_m / s_k) * np.sqrt(max(1.0 - (a_k / a_m) ** 2, 0.0))
    std = max(temperature * eta, min_std)
    direction = np.sqrt(max(s_m * s_m - std * std, 0.0))
    # mean = a_m * (x - s_k * eps) / a_k + direction * eps
    return StepGeometry(a_k, s_k, a_m, s_m, float(std), a_m / a_k, direction - a_m * s_k / a_k)


def gaussian_log_prob(x, mean, std) -> float:
    """Log density of ``x`` under an isotropic Gaussian, summed over entries.

    A zero ``std`` is a point mass: ``+inf`` at the mean, ``-inf`` elsewhere.
    """
    if std == 0:
        return float("inf") if np.array_equal(np.asarray(x), np.broadcast_to(mean, np.shape(x))) else float("-inf")
    z = (np.asarray(x) - mean) / std
    return float(-0.5 * np.sum(z * z) - np.size(z) * (np.log(std) + 0.5 * LOG_2PI))


def gaussian_mean_score(residual, std):
    """d log N(x; mean, std) / d mean for ``residual = x - mean``."""
    return np.asarray(residual) / (std * std)


def ddim_step(x_tk, eps_hat, t_k, t_km1, temperature, sched: NoiseSchedule, rng: np.random.Generator,
              min_std: float = MIN_STD):
    """One stochastic DDIM update.

    Returns ``(x_tkm1, log_prob, action_mean, action_std)``. The injected
    noise scale is the DDPM posterior std multiplied by ``temperature``,
    floored at ``min_std`` so the action density stays proper at zero
    temperature.
    """
    geo = step_geometry(t_k, t_km1, temperature, sched, min_std)
    mean = geo.mean_x * np.asarray(x_tk) + geo.mean_eps * np.asarray(eps_hat)
    x_next = mean + geo.std * rng.standard_normal(mean.shape)
    return x_next, gaussian_log_prob(x_next, mean, geo.std), mean, geo.std


def predicted_x0(x_tk, eps_hat, t_k, sched: NoiseSchedule):
    a, s, _ = alpha_sigma(sched, t_k)
    return (np.asarray(x_tk) - s * np.asarray(eps_hat)) / a


@dataclass
class TrajectoryStep:
    x_tk: np.ndarray
    t_k: float
    t_km1: float
    x_tkm1: np.ndarray
    log_prob_old: float


@dataclass
class DenoisingTrajectory:
    steps: list
    final_sequence: RnaSequence
    x0_hat: np.ndarray
    temperature: float
    h: np.ndarray = field(repr=False)
    reward: float = float("nan")
    target_id: str = ""
    min_std: float = MIN_STD


def sample_sequence(policy, h, n_steps: int, temperature: float, rng: np.random.Generator,
                    sched: NoiseSchedule | None = None, min_std: float = MIN_STD,
                    n_residues: int | None = None) -> tuple[RnaSequence, DenoisingTrajectory]:
    """Run the reverse chain from ``x_T ~ N(0, I)`` and decode by argmax.

    The decoded sequence is the argmax of the clean-sample estimate made at
    the final state ``x_{t_0}`` (one extra noise prediction at ``eps_time``),
    so every recorded action can influence the design.
    """
    sched = sched or NoiseSchedule()
    n = n_residues if n_residues is not None else len(h)
    times = sched.time_grid(n_steps)
    x = rng.standard_normal((n, 4))
    steps = []
    for t_k, t_km1 in zip(times[:-1], times[1:]):
        eps_hat = policy.predict_noise(x, t_k, h)
        x_next, logp, _, _ = ddim_step(x, eps_hat, t_k, t_km1, temperature, sched, rng, min_std)
        steps.append(TrajectoryStep(x, float(t_k), float(t_km1), x_next, logp))
        x = x_next
    x0_hat = predicted_x0(x, policy.predict_noise(x, times[-1], h), times[-1], sched)
    seq = sequence_to_onehot(decode_argmax(x0_hat))
    traj = DenoisingTrajectory(steps, seq, x0_hat, float(temperature), h, min_std=min_std)
    return seq, traj


@dataclass(frozen=True)
class LossProbe:
    """A fixed set of ``(x0, h, t, eps)`` draws for noise-free loss tracking."""

    items: tuple

    @classmethod
    def draw(cls, dataset, n_probes: int, rng: np.random.Generator, sched: NoiseSchedule | None = None):
        sched = sched or NoiseSchedule()
        items = []
        for m in range(n_probes):
            x0, h = dataset[m % len(dataset)]
            x0 = np.asarray(x0, dtype=float)
            t = float(rng.uniform(sched.eps_time, sched.t_final))
            eps = rng.standard_normal(x0.shape)
            items.append((forward_noise(x0, t, eps, sched).x, t, h, eps))
        return cls(tuple(items))

    def __call__(self, policy) -> float:
        total = 0.0
        for xt, t, h, eps in self.items:
            resid = policy.predict_noise(xt, t, h) - eps
            total += float(np.sum(resid * resid))
        return total / len(self.items)


def pretrain(policy, dataset, iterations: int, rng: np.random.Generator, learning_rate: float = 1e-4,
             batch_size: int = 64, sched: NoiseSchedule | None = None, optimizer=None,
             probe: LossProbe | None = None):
    """Minimise :func:`pretrain_loss` with Adam on ``(x0, h_scalar)`` pairs.

    Minibatches are drawn from ``dataset`` with replacement. Returns the
    trained policy and a history dict: ``loss`` holds the minibatch losses
    and, when ``probe`` is given, ``probe_loss`` holds the probe loss after
    every update. ``FloatingPointError`` is raised on a non-finite loss or
    gradient.
    """
    from .optim import Adam

    if not dataset:
        raise ConfigError("pretraining dataset is empty")
    opt = optimizer or Adam(learning_rate)
    theta = policy.flat()
    history = {"loss": [], "probe_loss": []}
    for it in range(iterations):
        idx = rng.integers(len(dataset), size=batch_size)
        loss, grad = pretrain_loss(policy, [dataset[i] for i in idx], rng, sched)
        if not np.isfinite(loss) or not np.all(np.isfinite(grad)):
            raise FloatingPointError(f"non-finite pretraining loss at iteration {it}")
        theta = opt.step(theta, grad)
        policy = policy.with_flat(theta)
        history["loss"].append(loss)
        if probe is not None:
            history["probe_loss"].append(probe(policy))
    return policy, history
