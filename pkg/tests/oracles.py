"""Independent reference implementations used as test oracles.

Nothing here imports the package's metric code. Superposition uses Horn's
quaternion method rather than an SVD so the two paths share no algebra.
"""

from __future__ import annotations

import itertools

import numpy as np

from rider.diffusion import alpha_sigma
from rider.policy import step_log_prob


def random_rotation(rng) -> np.ndarray:
    q, r = np.linalg.qr(rng.normal(size=(3, 3)))
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


def rotation_z(deg) -> np.ndarray:
    a = np.radians(deg)
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def horn_fit(p, q):
    """Rotation R and translation t minimising sum |p R^T + t - q|^2 (quaternion method)."""
    p = np.asarray(p, float)
    q = np.asarray(q, float)
    cp, cq = p.mean(0), q.mean(0)
    s = (p - cp).T @ (q - cq)
    sxx, sxy, sxz = s[0]
    syx, syy, syz = s[1]
    szx, szy, szz = s[2]
    k = np.array([
        [sxx + syy + szz, syz - szy, szx - sxz, sxy - syx],
        [syz - szy, sxx - syy - szz, sxy + syx, szx + sxz],
        [szx - sxz, sxy + syx, -sxx + syy - szz, syz + szy],
        [sxy - syx, szx + sxz, syz + szy, -sxx - syy + szz],
    ])
    w, v = np.linalg.eigh(k)
    q0, qx, qy, qz = v[:, -1]
    rot = np.array([
        [q0 * q0 + qx * qx - qy * qy - qz * qz, 2 * (qx * qy - q0 * qz), 2 * (qx * qz + q0 * qy)],
        [2 * (qx * qy + q0 * qz), q0 * q0 - qx * qx + qy * qy - qz * qz, 2 * (qy * qz - q0 * qx)],
        [2 * (qx * qz - q0 * qy), 2 * (qy * qz + q0 * qx), q0 * q0 - qx * qx - qy * qy + qz * qz],
    ])
    return rot, cq - rot @ cp


def fitted_distances(p, q, subset):
    rot, t = horn_fit(p[list(subset)], q[list(subset)])
    return np.linalg.norm(p @ rot.T + t - q, axis=1)


def plain_rmsd(p, q):
    return float(np.sqrt(np.mean(np.sum((np.asarray(p) - np.asarray(q)) ** 2, axis=1))))


def all_subsets(n, min_size=3):
    for size in range(min(min_size, n), n + 1):
        yield from itertools.combinations(range(n), size)


def brute_gdt(p, q, cutoffs=(1.0, 2.0, 4.0, 8.0)):
    """GDT_TS with each cutoff count maximised over fits to every subset of >= 3 residues."""
    n = len(p)
    dists = [fitted_distances(p, q, s) for s in all_subsets(n)]
    return sum(max(int(np.sum(d <= c)) for d in dists) for c in cutoffs) / (len(cutoffs) * n)


def d0_formula(n):
    return max(1.24 * (n - 15) ** (1.0 / 3.0) - 1.8, 0.5) if n > 15 else 0.5


def tm_terms(d, n):
    return float(np.sum(1.0 / (1.0 + (d / d0_formula(n)) ** 2)) / n)


def brute_tm(p, q):
    """TM-score maximised over fits to every subset of >= 3 residues."""
    n = len(q)
    return max(tm_terms(fitted_distances(p, q, s), n) for s in all_subsets(n))


def fragment_tm(p, q, lengths=(3, 5, 7), max_iter=1000):
    """TM-score from contiguous-fragment seeds refined to a fixed point."""
    n = len(q)
    scale = d0_formula(n)
    seeds = [tuple(range(a, a + L)) for L in lengths if L < n for a in range(n - L + 1)]
    seeds.append(tuple(range(n)))
    best = 0.0
    for subset in seeds:
        prev = -1.0
        for _ in range(max_iter):
            d = fitted_distances(p, q, subset)
            score = tm_terms(d, n)
            best = max(best, score)
            close = tuple(np.flatnonzero(d < scale))
            if abs(score - prev) < 1e-9 or len(close) < 3:
                break
            prev, subset = score, close
    return best


def central_diff(f, theta, h=1e-5):
    theta = np.asarray(theta, float)
    out = np.empty_like(theta)
    for i in range(theta.size):
        e = np.zeros_like(theta)
        e[i] = h
        out[i] = (f(theta + e) - f(theta - e)) / (2 * h)
    return out


def max_rel_err(a, b, floor=1e-6):
    a, b = np.asarray(a, float), np.asarray(b, float)
    scale = max(np.max(np.abs(a)), np.max(np.abs(b)), floor)
    return float(np.max(np.abs(a - b)) / scale)


# ---------------------------------------------------------------------------
# value-only objectives, written from the definitions, for finite differences


def replay_noise_draws(batch, seed, sched):
    """The (x_t, t, h, eps) items a seeded pretraining loss draws: t then eps, per item."""
    rng = np.random.default_rng(seed)
    items = []
    for x0, h in batch:
        t = float(rng.uniform(sched.eps_time, sched.t_final))
        eps = rng.standard_normal(np.shape(x0))
        a, s, _ = alpha_sigma(sched, t)
        items.append((a * np.asarray(x0, float) + s * eps, t, h, eps))
    return items


def noise_loss(policy, items):
    return float(np.mean([np.sum((policy.predict_noise(x, t, h) - eps) ** 2) for x, t, h, eps in items]))


def clipped_surrogate_value(policy, batch, advantages, clip_eps, sched):
    """Per-step clipped terms summed along each stochastic trajectory, averaged over those trajectories."""
    totals = []
    for traj, adv in zip(batch, advantages):
        if traj.temperature == 0.0:
            continue
        total = 0.0
        for step in traj.steps:
            rec = {"x_tk": step.x_tk, "x_tkm1": step.x_tkm1, "t_k": step.t_k, "t_km1": step.t_km1,
                   "temperature": traj.temperature, "h": traj.h}
            r = np.exp(step_log_prob(policy, rec, sched, traj.min_std) - step.log_prob_old)
            total += min(r * adv, np.clip(r, 1 - clip_eps, 1 + clip_eps) * adv)
        totals.append(total)
    return float(np.mean(totals)) if totals else 0.0
