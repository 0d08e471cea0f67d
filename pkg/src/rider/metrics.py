"""Rigid superposition and structural similarity scores.

All scores work on one representative point per residue (the C4' atom)
and assume a 1:1 residue pairing between the two structures. The second
argument of every score is the reference (target) structure.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .errors import ShapeError
from .struct_io import BackboneStructure

GDT_CUTOFFS = (1.0, 2.0, 4.0, 8.0)
SEED_LENGTHS = (3, 5, 7)
MAX_REFINE = 20
D0_MIN = 0.5
# chains up to this length are searched over every subset superposition
EXHAUSTIVE_MAX_N = 10


@dataclass(frozen=True)
class SuperpositionResult:
    rotation: np.ndarray
    translation: np.ndarray
    rmsd: float

    def apply(self, points):
        return np.asarray(points) @ self.rotation.T + self.translation


@dataclass(frozen=True)
class MetricsReport:
    gdt_ts: float
    tm_score: float
    rmsd: float
    n_residues: int

    def to_dict(self):
        return {
            "gdt_ts": round(float(self.gdt_ts), 6),
            "tm_score": round(float(self.tm_score), 6),
            "rmsd": round(float(self.rmsd), 6),
            "n": int(self.n_residues),
        }

    def to_json(self):
        return json.dumps(self.to_dict())

    @classmethod
    def from_dict(cls, d):
        return cls(float(d["gdt_ts"]), float(d["tm_score"]), float(d["rmsd"]), int(d.get("n", 0)))


def representative_points(s) -> np.ndarray:
    if isinstance(s, BackboneStructure):
        return s.c4p
    pts = np.asarray(s, dtype=float)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise ShapeError(f"expected (N, 3) points, got {pts.shape}")
    return pts


def _pair(a, b):
    p, q = representative_points(a), representative_points(b)
    if len(p) != len(q):
        raise ShapeError(f"residue count mismatch: {len(p)} vs {len(q)}")
    if len(p) < 1:
        raise ShapeError("empty structure")
    return p, q


def _proper_rotation(h):
    """Rotation(s) maximising tr(R H) for covariance(s) ``h`` of shape (..., 3, 3).

    Reflections are excluded by flipping the singular vector belonging to
    the smallest singular value; rank-deficient inputs still get a proper
    rotation.
    """
    u, _, vt = np.linalg.svd(h)
    v = np.swapaxes(vt, -1, -2)
    ut = np.swapaxes(u, -1, -2)
    d = np.sign(np.linalg.det(v @ ut))
    d = np.where(d == 0, 1.0, d)
    diag = np.ones(h.shape[:-2] + (3,))
    diag[..., 2] = d
    return (v * diag[..., None, :]) @ ut


def kabsch_superpose(p, q) -> SuperpositionResult:
    """Least-squares rigid motion mapping points ``p`` onto ``q``.

    Returns rotation ``R`` and translation ``t`` with ``q ~ p @ R.T + t``.
    """
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    if p.shape != q.shape:
        raise ShapeError(f"point set shapes differ: {p.shape} vs {q.shape}")
    if p.ndim != 2 or p.shape[1] != 3 or len(p) < 1:
        raise ShapeError(f"expected (M, 3) point sets with M >= 1, got {p.shape}")
    cp, cq = p.mean(axis=0), q.mean(axis=0)
    pc, qc = p - cp, q - cq
    rot = _proper_rotation(pc.T @ qc)
    trans = cq - rot @ cp
    diff = pc @ rot.T - qc
    rmsd = float(np.sqrt(np.mean(np.sum(diff * diff, axis=1))))
    return SuperpositionResult(rot, trans, rmsd)


def _batched_fit(p, q, masks):
    """Kabsch fit of ``p`` onto ``q`` restricted to each row of ``masks``.

    masks: (S, N) boolean. Returns rotations (S, 3, 3) and translations (S, 3).
    """
    w = masks.astype(float)
    n = w.sum(axis=1)
    cp = (w @ p) / n[:, None]
    cq = (w @ q) / n[:, None]
    h = np.einsum("sn,ni,nj->sij", w, p, q) - n[:, None, None] * cp[:, :, None] * cq[:, None, :]
    rot = _proper_rotation(h)
    trans = cq - np.einsum("sij,sj->si", rot, cp)
    return rot, trans


def _distances(p, q, rot, trans):
    moved = np.einsum("nj,sij->sni", p, rot) + trans[:, None, :]
    return np.linalg.norm(moved - q[None], axis=-1)


def fragment_seeds(n: int, lengths=SEED_LENGTHS) -> np.ndarray:
    """Boolean masks for every contiguous fragment of the given lengths plus the full chain."""
    seeds = []
    for length in sorted(set(lengths)):
        if length >= n:
            continue
        for start in range(n - length + 1):
            m = np.zeros(n, dtype=bool)
            m[start:start + length] = True
            seeds.append(m)
    seeds.append(np.ones(n, dtype=bool))
    return np.array(seeds)


def subset_seeds(n: int, min_size: int = 3) -> np.ndarray:
    """Boolean masks for every residue subset with at least ``min_size`` members."""
    codes = np.arange(1 << n)
    bits = ((codes[:, None] >> np.arange(n)) & 1).astype(bool)
    return bits[bits.sum(axis=1) >= min(min_size, n)]


def search_seeds(n: int, exhaustive: bool | None = None):
    """Seed masks and refinement budget for a chain of ``n`` residues."""
    if exhaustive is None:
        exhaustive = n <= EXHAUSTIVE_MAX_N
    if exhaustive:
        # every refit target is itself a subset, so refinement cannot help
        return subset_seeds(n), 0
    return fragment_seeds(n), MAX_REFINE


def rmsd(a, b, superpose: bool = True) -> float:
    p, q = _pair(a, b)
    if superpose:
        return kabsch_superpose(p, q).rmsd
    return float(np.sqrt(np.mean(np.sum((p - q) ** 2, axis=1))))


def gdt_counts(a, b, cutoffs=GDT_CUTOFFS, exhaustive=None) -> dict:
    """Largest number of residues within each cutoff over the superposition search.

    Each cutoff gets its own search: superpositions are seeded from
    contiguous fragments (or, for short chains, from every subset of three
    or more residues) and refit to the current inlier set until that set
    stops changing (at most ``MAX_REFINE`` refits). Inlier sets smaller than
    three residues are not refit.
    """
    p, q = _pair(a, b)
    n = len(p)
    seeds, n_refine = search_seeds(n, exhaustive)
    counts = {}
    for d in cutoffs:
        masks = seeds.copy()
        active = np.ones(len(masks), dtype=bool)
        best = 0
        for _ in range(n_refine + 1):
            rot, trans = _batched_fit(p, q, masks[active])
            inl = _distances(p, q, rot, trans) <= d
            best = max(best, int(inl.sum(axis=1).max()))
            if best == n:
                break
            refit = inl.sum(axis=1) >= 3
            new = np.where(refit[:, None], inl, masks[active])
            changed = np.any(new != masks[active], axis=1)
            idx = np.flatnonzero(active)
            masks[idx] = new
            active[idx[~changed]] = False
            if not active.any():
                break
        counts[d] = best
    return counts


def gdt_ts(a, b, exhaustive=None) -> float:
    p, q = _pair(a, b)
    n = len(p)
    if n < 3:
        raise ShapeError(f"GDT_TS needs at least 3 residues, got {n}")
    counts = gdt_counts(p, q, exhaustive=exhaustive)
    return sum(counts.values()) / (len(GDT_CUTOFFS) * n)


def d0(n_ref: int) -> float:
    """TM-score distance scale for a reference of ``n_ref`` residues, floored at 0.5 A."""
    if n_ref < 1:
        raise ShapeError(f"reference length must be >= 1, got {n_ref}")
    raw = 1.24 * np.cbrt(n_ref - 15.0) - 1.8
    return float(max(raw, D0_MIN))


def tm_score(a, b, exhaustive=None) -> float:
    """TM-score of ``a`` against reference ``b`` (normalised by ``len(b)``).

    Seeded superpositions (see :func:`gdt_counts`) are refined by refitting
    on residues closer than d0 until the score moves by less than 1e-9.
    """
    p, q = _pair(a, b)
    n = len(q)
    scale = d0(n)
    masks, n_refine = search_seeds(n, exhaustive)
    active = np.ones(len(masks), dtype=bool)
    prev = np.full(len(masks), -np.inf)
    best = 0.0
    for _ in range(n_refine + 1):
        rot, trans = _batched_fit(p, q, masks[active])
        dist = _distances(p, q, rot, trans)
        score = np.sum(1.0 / (1.0 + (dist / scale) ** 2), axis=1) / n
        best = max(best, float(score.max()))
        idx = np.flatnonzero(active)
        close = dist < scale
        refit = close.sum(axis=1) >= 3
        done = (np.abs(score - prev[idx]) < 1e-9) | ~refit
        prev[idx] = score
        masks[idx[refit]] = close[refit]
        active[idx[done]] = False
        if not active.any():
            break
    return min(best, 1.0)


def metrics_report(a, b) -> MetricsReport:
    p, q = _pair(a, b)
    return MetricsReport(gdt_ts(p, q), tm_score(p, q), rmsd(p, q), len(q))
