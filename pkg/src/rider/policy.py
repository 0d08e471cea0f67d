"""Conditional noise-prediction policies.

Two trainable policies share one parameter layout, ``W`` of shape
``(4, 4 + t_dim + h_dim)`` and ``b`` of shape ``(4,)``, carried as a flat
vector (``W`` row-major, then ``b``) so optimisers stay generic.

``LinearNoisePolicy`` predicts the noise directly::

    eps_hat_i = W @ concat(x_t[i], time_embed(t), h[i]) + b

``PreconditionedPolicy`` predicts the clean sample and converts it::

    F_i       = W @ concat(c_in(t) x_t[i], time_embed(t), h[i]) + b
    x0_hat_i  = c_skip(t) x_t[i] + c_out(t) F_i
    eps_hat_i = (x_t[i] - alpha_t * x0_hat_i) / sigma_t

The scalings are the Gaussian-prior ones for data variance ``DATA_VAR``.
A plain linear map cannot express the ``t``-dependent mixing of ``x_t``
and the conditioning that a useful noise prediction needs; the
preconditioned form builds that mixing in. Both are affine in the
parameters, so every gradient has a closed form.
"""

from __future__ import annotations

import functools
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .diffusion import MIN_STD, NoiseSchedule, alpha_sigma, gaussian_log_prob, gaussian_mean_score, step_geometry
from .errors import ConfigError, ShapeError, StateError

TIME_EMBED_DIM = 16
DATA_VAR = 0.1875  # per-entry variance of a uniformly random one-hot base
CHECKPOINT_FORMAT = "rider-policy"
CHECKPOINT_VERSION = 1


def preconditioning(sched: NoiseSchedule, t, data_var: float = DATA_VAR):
    """``(c_skip, c_out, c_in)`` at time ``t``."""
    a, s, _ = alpha_sigma(sched, t)
    total = a * a * data_var + s * s
    return a * data_var / total, s * np.sqrt(data_var / total) / a, 1.0 / np.sqrt(total)


@functools.lru_cache(maxsize=None)
def _frequencies(n: int) -> np.ndarray:
    f = np.geomspace(1.0, 1000.0, n)
    f.flags.writeable = False
    return f


def time_embed(t, dim: int = TIME_EMBED_DIM) -> np.ndarray:
    """Interleaved sin/cos of ``t`` at ``dim // 2`` frequencies spaced geometrically in [1, 1000]."""
    ang = float(t) * _frequencies(dim // 2)
    out = np.empty(dim)
    out[0::2] = np.sin(ang)
    out[1::2] = np.cos(ang)
    return out


@dataclass
class LinearNoisePolicy:
    kind = "linear"

    w: np.ndarray
    b: np.ndarray
    h_dim: int
    t_dim: int = TIME_EMBED_DIM
    sched: NoiseSchedule = field(default_factory=NoiseSchedule)

    def __post_init__(self):
        self.w = np.asarray(self.w, dtype=float)
        self.b = np.asarray(self.b, dtype=float)
        if self.w.shape != (4, self.in_dim) or self.b.shape != (4,):
            raise ShapeError(f"expected w (4, {self.in_dim}) and b (4,), got {self.w.shape}, {self.b.shape}")

    @property
    def in_dim(self) -> int:
        return 4 + self.t_dim + self.h_dim

    @property
    def n_params(self) -> int:
        return self.w.size + self.b.size

    @classmethod
    def init(cls, h_dim: int, seed: int = 0, scale: float = 0.02, t_dim: int = TIME_EMBED_DIM,
             sched: NoiseSchedule | None = None):
        rng = np.random.default_rng(seed)
        in_dim = 4 + t_dim + h_dim
        return cls(rng.normal(scale=scale, size=(4, in_dim)), rng.normal(scale=scale, size=4), h_dim, t_dim,
                   sched or NoiseSchedule())

    @classmethod
    def zeros(cls, h_dim: int, t_dim: int = TIME_EMBED_DIM, sched: NoiseSchedule | None = None):
        return cls(np.zeros((4, 4 + t_dim + h_dim)), np.zeros(4), h_dim, t_dim, sched or NoiseSchedule())

    # flat parameter vector -------------------------------------------------

    def flat(self) -> np.ndarray:
        return np.concatenate([self.w.ravel(), self.b])

    def with_flat(self, theta) -> "LinearNoisePolicy":
        theta = np.asarray(theta, dtype=float)
        if theta.shape != (self.n_params,):
            raise ShapeError(f"expected {self.n_params} parameters, got {theta.shape}")
        return type(self)(theta[:self.w.size].reshape(self.w.shape).copy(),
                                 theta[self.w.size:].copy(), self.h_dim, self.t_dim, self.sched)

    def copy(self) -> "LinearNoisePolicy":
        return self.with_flat(self.flat())

    # forward / backward ----------------------------------------------------

    def features(self, x_t, t, h) -> np.ndarray:
        x_t = np.asarray(x_t, dtype=float)
        h = np.asarray(h, dtype=float)
        if x_t.ndim != 2 or x_t.shape[1] != 4:
            raise ShapeError(f"x_t must be (N, 4), got {x_t.shape}")
        if h.shape != (len(x_t), self.h_dim):
            raise ShapeError(f"h must be ({len(x_t)}, {self.h_dim}), got {h.shape}")
        temb = np.broadcast_to(time_embed(t, self.t_dim), (len(x_t), self.t_dim))
        return np.concatenate([self._x_scale(t) * x_t, temb, h], axis=1)

    def _x_scale(self, t) -> float:
        return 1.0

    def predict_noise(self, x_t, t, h) -> np.ndarray:
        return self.features(x_t, t, h) @ self.w.T + self.b

    def vjp(self, x_t, t, h, g) -> np.ndarray:
        """Flat gradient of ``sum(g * eps_hat)`` with respect to the parameters."""
        g = np.asarray(g, dtype=float) * self._out_scale(t)
        feats = self.features(x_t, t, h)
        return np.concatenate([(g.T @ feats).ravel(), g.sum(axis=0)])

    def _out_scale(self, t) -> float:
        return 1.0

    def digest(self) -> str:
        tag = f"{self.kind}|{self.sched!r}".encode()
        return hashlib.sha256(self.flat().tobytes() + tag).hexdigest()


@dataclass
class PreconditionedPolicy(LinearNoisePolicy):
    kind = "preconditioned"

    def _x_scale(self, t) -> float:
        return preconditioning(self.sched, t)[2]

    def _out_scale(self, t) -> float:
        # d eps_hat / d F
        a, s, _ = alpha_sigma(self.sched, t)
        return -a * preconditioning(self.sched, t)[1] / s

    def predict_x0(self, x_t, t, h) -> np.ndarray:
        c_skip, c_out, _ = preconditioning(self.sched, t)
        return c_skip * np.asarray(x_t, dtype=float) + c_out * (self.features(x_t, t, h) @ self.w.T + self.b)

    def predict_noise(self, x_t, t, h) -> np.ndarray:
        a, s, _ = alpha_sigma(self.sched, t)
        return (np.asarray(x_t, dtype=float) - a * self.predict_x0(x_t, t, h)) / s


POLICY_KINDS = {cls.kind: cls for cls in (LinearNoisePolicy, PreconditionedPolicy)}


def policy_class(kind: str):
    try:
        return POLICY_KINDS[kind]
    except KeyError:
        raise ConfigError(f"unknown policy kind {kind!r}; expected one of {sorted(POLICY_KINDS)}") from None


class TeacherPolicy:
    """Test policy that knows the clean sample and returns the exact noise.

    ``eps_hat = (x_t - alpha_t * x0) / sigma_t``, so every clean-sample
    estimate made from it equals ``x0``.
    """

    def __init__(self, x0, sched: NoiseSchedule | None = None):
        self.x0 = np.asarray(x0, dtype=float)
        self.sched = sched or NoiseSchedule()

    def predict_noise(self, x_t, t, h=None):
        a, s, _ = alpha_sigma(self.sched, t)
        return (np.asarray(x_t) - a * self.x0) / s


_STEP_FIELDS = ("x_tk", "x_tkm1", "t_k", "t_km1", "temperature", "h")


def _get(record, name):
    if isinstance(record, dict):
        value = record.get(name)
    else:
        value = getattr(record, name, None)
    if value is None:
        raise StateError(f"step record is missing {name!r}")
    return value


def step_log_prob(policy: LinearNoisePolicy, record, sched: NoiseSchedule | None = None,
                  min_std: float = MIN_STD) -> float:
    """Log density of the recorded action under ``policy``."""
    sched = sched or NoiseSchedule()
    x_tk, x_tkm1, t_k, t_km1, tau, h = (_get(record, f) for f in _STEP_FIELDS)
    geo = step_geometry(t_k, t_km1, tau, sched, min_std)
    mean = geo.mean_x * x_tk + geo.mean_eps * policy.predict_noise(x_tk, t_k, h)
    return gaussian_log_prob(x_tkm1, mean, geo.std)


def grad_log_prob(policy: LinearNoisePolicy, record, sched: NoiseSchedule | None = None,
                  min_std: float = MIN_STD, with_value: bool = False):
    """Exact flat gradient of :func:`step_log_prob` with respect to the parameters.

    The action mean is affine in ``eps_hat`` and ``eps_hat`` is affine in the
    parameters, so the chain rule closes in one vector-Jacobian product.
    """
    sched = sched or NoiseSchedule()
    x_tk, x_tkm1, t_k, t_km1, tau, h = (_get(record, f) for f in _STEP_FIELDS)
    geo = step_geometry(t_k, t_km1, tau, sched, min_std)
    mean = geo.mean_x * x_tk + geo.mean_eps * policy.predict_noise(x_tk, t_k, h)
    score = gaussian_mean_score(x_tkm1 - mean, geo.std)
    grad = policy.vjp(x_tk, t_k, h, geo.mean_eps * score)
    if with_value:
        return grad, gaussian_log_prob(x_tkm1, mean, geo.std)
    return grad


@dataclass(frozen=True)
class PolicySnapshot:
    """Read-only copy of a policy used as the sampling policy for one epoch."""

    policy: LinearNoisePolicy = field(repr=False)
    epoch: int
    digest: str

    @classmethod
    def take(cls, policy: LinearNoisePolicy, epoch: int) -> "PolicySnapshot":
        frozen = policy.copy()
        frozen.w.flags.writeable = False
        frozen.b.flags.writeable = False
        return cls(frozen, epoch, frozen.digest())

    def predict_noise(self, x_t, t, h):
        return self.policy.predict_noise(x_t, t, h)

    def verify(self) -> bool:
        return self.policy.digest() == self.digest


def checkpoint_dict(policy: LinearNoisePolicy) -> dict:
    return {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "kind": policy.kind,
        "dims": {"out": 4, "x": 4, "t_emb": policy.t_dim, "h": policy.h_dim},
        "schedule": {"beta0": policy.sched.beta0, "beta1": policy.sched.beta1,
                     "t_final": policy.sched.t_final, "eps_time": policy.sched.eps_time},
        "w": policy.w.tolist(),
        "b": policy.b.tolist(),
    }


def policy_from_dict(d: dict) -> LinearNoisePolicy:
    if d.get("format") != CHECKPOINT_FORMAT:
        raise ConfigError(f"not a policy checkpoint (format={d.get('format')!r})")
    if d.get("version") != CHECKPOINT_VERSION:
        raise ConfigError(f"unsupported checkpoint version {d.get('version')!r}")
    dims = d["dims"]
    return policy_class(d.get("kind", "linear"))(np.array(d["w"], dtype=float), np.array(d["b"], dtype=float),
                             int(dims["h"]), int(dims["t_emb"]), NoiseSchedule(**d["schedule"]))


def save_checkpoint(policy: LinearNoisePolicy, path) -> None:
    # json writes floats with repr(), which round-trips float64 exactly
    Path(path).write_text(json.dumps(checkpoint_dict(policy)) + "\n")


def load_checkpoint(path) -> LinearNoisePolicy:
    return policy_from_dict(json.loads(Path(path).read_text()))
