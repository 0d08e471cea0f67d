"""Geometric k-NN graph features and a fixed equivariant structure encoder.

Node coordinates are the centroids of (P, C4', N1/N9). Vector features are
stored as ``(..., channels, 3)`` arrays of row vectors, so a global rotation
``X -> X @ R`` of the input acts on them as ``V -> V @ R``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .errors import ConfigError, GraphError
from .struct_io import BackboneStructure

N_RBF = 32
RBF_DMAX = 30.0
POSENC_DIM = 32
NODE_SCALAR_DIM = 15
NODE_VECTOR_DIM = 4
EDGE_SCALAR_DIM = N_RBF + POSENC_DIM + 1
EDGE_VECTOR_DIM = 1
# published input widths; the extra channels are zero padding
TABLE_EDGE_SCALAR_DIM = 131
TABLE_EDGE_VECTOR_DIM = 3
COORD_JITTER = 0.1


def rbf_encode(d, n_centers: int = N_RBF, d_max: float = RBF_DMAX) -> np.ndarray:
    """Gaussian radial basis expansion of distance(s) ``d``; adds a trailing axis."""
    mu = np.linspace(0.0, d_max, n_centers)
    sigma = d_max / (n_centers - 1)
    d = np.asarray(d, dtype=float)[..., None]
    return np.exp(-(((d - mu) / sigma) ** 2))


def posenc(offset, dim: int = POSENC_DIM) -> np.ndarray:
    """Interleaved (sin, cos) encoding of signed integer offset(s)."""
    if dim % 2:
        raise ConfigError(f"positional encoding dimension must be even, got {dim}")
    freqs = 1.0 / 10000.0 ** (2.0 * np.arange(dim // 2) / dim)
    angles = np.asarray(offset, dtype=float)[..., None] * freqs
    out = np.empty(angles.shape[:-1] + (dim,))
    out[..., 0::2] = np.sin(angles)
    out[..., 1::2] = np.cos(angles)
    return out


def _unit(v, eps=1e-12):
    n = np.linalg.norm(v, axis=-1, keepdims=True)
    return np.where(n > eps, v / np.maximum(n, eps), 0.0), n[..., 0]


def _cos_angle(a, b, c):
    """Cosine of the angle at ``b`` in triangle (a, b, c)."""
    u, _ = _unit(a - b)
    w, _ = _unit(c - b)
    return np.sum(u * w, axis=-1)


def _dihedrals(x):
    """sin/cos of the dihedral over (x[i-1], x[i], x[i+1], x[i+2]) for each i; zeros where undefined."""
    n = len(x)
    out = np.zeros((n, 2))
    if n < 4:
        return out
    b0 = x[1:-2] - x[:-3]
    b1 = x[2:-1] - x[1:-2]
    b2 = x[3:] - x[2:-1]
    n1 = np.cross(b0, b1)
    n2 = np.cross(b1, b2)
    b1u, _ = _unit(b1)
    m1 = np.cross(n1, b1u)
    xx = np.sum(n1 * n2, axis=-1)
    yy = np.sum(m1 * n2, axis=-1)
    r = np.hypot(xx, yy)
    ok = r > 1e-12
    sin = np.where(ok, yy / np.where(ok, r, 1.0), 0.0)
    cos = np.where(ok, xx / np.where(ok, r, 1.0), 0.0)
    out[1:-2, 0] = sin
    out[1:-2, 1] = cos
    return out


def node_features(atoms: np.ndarray):
    """Scalar (N, 15) and vector (N, 4, 3) node features from (N, 3, 3) atoms.

    Scalars: three intra-residue distances, three intra-residue angle
    cosines, distances to the previous and next centroid, sin/cos of the two
    centroid-trace dihedrals centred on the residue, and the raw lengths of
    the forward, C4'->P and C4'->N vectors. Vectors: unit forward, unit
    backward, unit C4'->P, unit C4'->N. Chain termini get zeros.
    """
    p, c4, nn = atoms[:, 0], atoms[:, 1], atoms[:, 2]
    x = atoms.mean(axis=1)
    n = len(x)

    fwd_raw = np.zeros_like(x)
    bwd_raw = np.zeros_like(x)
    fwd_raw[:-1] = x[1:] - x[:-1]
    bwd_raw[1:] = x[:-1] - x[1:]
    fwd, fwd_len = _unit(fwd_raw)
    bwd, bwd_len = _unit(bwd_raw)
    to_p, to_p_len = _unit(p - c4)
    to_n, to_n_len = _unit(nn - c4)

    dih = _dihedrals(x)
    dih_prev = np.zeros_like(dih)
    dih_prev[1:] = dih[:-1]

    scalar = np.column_stack([
        np.linalg.norm(p - c4, axis=-1),
        np.linalg.norm(c4 - nn, axis=-1),
        np.linalg.norm(p - nn, axis=-1),
        _cos_angle(p, c4, nn),
        _cos_angle(c4, p, nn),
        _cos_angle(p, nn, c4),
        bwd_len,
        fwd_len,
        dih_prev,
        dih,
        fwd_len,
        to_p_len,
        to_n_len,
    ])
    assert scalar.shape == (n, NODE_SCALAR_DIM)
    vector = np.stack([fwd, bwd, to_p, to_n], axis=1)
    return scalar, vector


@dataclass(frozen=True)
class GeometricGraph:
    """k-NN graph with every node carrying the same number of neighbours.

    Edge arrays are laid out per destination node: ``edge_scalar[i, m]``
    describes the edge from ``neighbors[i, m]`` into ``i``.
    """

    coords: np.ndarray
    neighbors: np.ndarray
    node_scalar: np.ndarray
    node_vector: np.ndarray
    edge_scalar: np.ndarray
    edge_vector: np.ndarray
    k: int = 32

    @property
    def n_nodes(self) -> int:
        return len(self.coords)

    def permuted(self, perm) -> "GeometricGraph":
        """Relabel nodes so that new node ``a`` is old node ``perm[a]``."""
        perm = np.asarray(perm)
        inv = np.empty_like(perm)
        inv[perm] = np.arange(len(perm))
        return GeometricGraph(
            coords=self.coords[perm],
            neighbors=inv[self.neighbors[perm]],
            node_scalar=self.node_scalar[perm],
            node_vector=self.node_vector[perm],
            edge_scalar=self.edge_scalar[perm],
            edge_vector=self.edge_vector[perm],
            k=self.k,
        )

    def to_dict(self) -> dict:
        return {
            "n_nodes": self.n_nodes,
            "k": self.k,
            "coords": self.coords.tolist(),
            "neighbors": self.neighbors.tolist(),
            "node_scalar": self.node_scalar.tolist(),
            "node_vector": self.node_vector.tolist(),
            "edge_scalar": self.edge_scalar.tolist(),
            "edge_vector": self.edge_vector.tolist(),
        }


def knn(coords: np.ndarray, k: int) -> np.ndarray:
    """Indices of the ``min(k, N-1)`` nearest other nodes, ties broken by index."""
    n = len(coords)
    kk = min(k, n - 1)
    dist = np.linalg.norm(coords[:, None] - coords[None], axis=-1)
    idx = np.arange(n)
    out = np.empty((n, kk), dtype=int)
    for i in range(n):
        order = np.lexsort((idx, dist[i]))
        order = order[order != i]
        out[i] = order[:kk]
    return out


def build_graph(
    s: BackboneStructure,
    k: int = 32,
    training: bool = False,
    rng: np.random.Generator | None = None,
    pad_to_table: bool = False,
) -> GeometricGraph:
    """Featurise a backbone as a k-NN graph over residue centroids.

    With ``training=True`` the atom coordinates are jittered by Gaussian
    noise (sd 0.1 A) first. ``pad_to_table`` zero-pads edge features to the
    published (131, 3) input widths.
    """
    if len(s) < 2:
        raise GraphError(f"graph needs at least 2 residues, got {len(s)}")
    if k < 1:
        raise GraphError(f"k must be positive, got {k}")
    atoms = s.atoms
    if training:
        if rng is None:
            raise GraphError("training-mode jitter needs an explicit rng")
        atoms = atoms + rng.normal(scale=COORD_JITTER, size=atoms.shape)

    node_s, node_v = node_features(atoms)
    x = atoms.mean(axis=1)
    nbrs = knn(x, k)
    disp = x[nbrs] - x[:, None, :]
    unit, dist = _unit(disp)
    offsets = nbrs - np.arange(len(x))[:, None]
    edge_s = np.concatenate([rbf_encode(dist), posenc(offsets), dist[..., None]], axis=-1)
    edge_v = unit[:, :, None, :]
    if pad_to_table:
        edge_s = np.concatenate(
            [edge_s, np.zeros(edge_s.shape[:2] + (TABLE_EDGE_SCALAR_DIM - EDGE_SCALAR_DIM,))], axis=-1)
        edge_v = np.concatenate(
            [edge_v, np.zeros(edge_v.shape[:2] + (TABLE_EDGE_VECTOR_DIM - EDGE_VECTOR_DIM, 3))], axis=2)
    return GeometricGraph(x, nbrs, node_s, node_v, edge_s, edge_v, k=k)


# ---------------------------------------------------------------------------
# encoder


def _silu(x):
    return x / (1.0 + np.exp(-x))


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


@dataclass(frozen=True)
class GVP:
    """Geometric vector perceptron: (s, V) -> (s', V') with scalar-gated vectors."""

    wh: np.ndarray  # (h, v_in)
    wmu: np.ndarray  # (v_out, h)
    ws: np.ndarray  # (s_out, s_in + h)
    bs: np.ndarray
    wg: np.ndarray  # (v_out, s_out)
    bg: np.ndarray
    activate: bool = True

    @classmethod
    def init(cls, rng, s_in, v_in, s_out, v_out, activate=True):
        h = max(v_in, v_out)

        def w(rows, cols):
            return rng.normal(scale=1.0 / np.sqrt(cols), size=(rows, cols))

        return cls(w(h, v_in), w(v_out, h), w(s_out, s_in + h), np.zeros(s_out),
                   w(v_out, s_out), np.zeros(v_out), activate)

    def __call__(self, s, v):
        vh = np.einsum("hv,...vc->...hc", self.wh, v)
        vn = np.sqrt(np.sum(vh * vh, axis=-1) + 1e-8)
        s_out = np.concatenate([s, vn], axis=-1) @ self.ws.T + self.bs
        v_out = np.einsum("oh,...hc->...oc", self.wmu, vh)
        if self.activate:
            s_out = _silu(s_out)
        gate = _sigmoid(s_out @ self.wg.T + self.bg)
        return s_out, v_out * gate[..., None]


def _layer_norm(s, v, eps=1e-6):
    s = (s - s.mean(axis=-1, keepdims=True)) / np.sqrt(s.var(axis=-1, keepdims=True) + eps)
    vnorm2 = np.mean(np.sum(v * v, axis=-1), axis=-1, keepdims=True)
    v = v / np.sqrt(vnorm2 + eps)[..., None]
    return s, v


@dataclass(frozen=True)
class EncoderLayer:
    message: GVP
    update: GVP

    def __call__(self, s, v, nbrs, es, ev):
        k = nbrs.shape[1]
        s_in = np.concatenate([s[nbrs], es, np.repeat(s[:, None], k, axis=1)], axis=-1)
        v_in = np.concatenate([v[nbrs], ev, np.repeat(v[:, None], k, axis=1)], axis=2)
        ms, mv = self.message(s_in, v_in)
        s, v = _layer_norm(s + ms.mean(axis=1), v + mv.mean(axis=1))
        us, uv = self.update(s, v)
        return _layer_norm(s + us, v + uv)


@dataclass(frozen=True)
class StructureEncoder:
    """Fixed-weight equivariant encoder producing per-node conditioning embeddings."""

    node_embed: GVP
    edge_embed: GVP
    layers: tuple = field(default_factory=tuple)

    @classmethod
    def create(cls, seed=0, layers=5, node_in=(NODE_SCALAR_DIM, NODE_VECTOR_DIM),
               edge_in=(EDGE_SCALAR_DIM, EDGE_VECTOR_DIM), node_hidden=(256, 24),
               edge_hidden=(128, 4)):
        rng = np.random.default_rng(seed)
        ns, nv = node_hidden
        es, ev = edge_hidden
        node_embed = GVP.init(rng, *node_in, ns, nv, activate=False)
        edge_embed = GVP.init(rng, *edge_in, es, ev, activate=False)
        stack = tuple(
            EncoderLayer(GVP.init(rng, 2 * ns + es, 2 * nv + ev, ns, nv), GVP.init(rng, ns, nv, ns, nv))
            for _ in range(layers)
        )
        return cls(node_embed, edge_embed, stack)

    @property
    def scalar_dim(self) -> int:
        return self.node_embed.ws.shape[0]

    def __call__(self, g: GeometricGraph) -> "ConditioningEmbedding":
        es_in, ev_in = g.edge_scalar, g.edge_vector
        want_s = self.edge_embed.ws.shape[1] - self.edge_embed.wh.shape[0]
        want_v = self.edge_embed.wh.shape[1]
        # padded graphs carry zeros beyond the used channels
        es_in, ev_in = es_in[..., :want_s], ev_in[:, :, :want_v]
        s, v = _layer_norm(*self.node_embed(g.node_scalar, g.node_vector))
        es, ev = self.edge_embed(es_in, ev_in)
        for layer in self.layers:
            s, v = layer(s, v, g.neighbors, es, ev)
        return ConditioningEmbedding(s, v)


@dataclass(frozen=True)
class ConditioningEmbedding:
    scalar: np.ndarray
    vector: np.ndarray


def standardize_scalars(scalar: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    """Centre and scale each scalar channel across the residues of one structure.

    The fixed encoder leaves a large component shared by every residue; it
    carries no per-residue information and, left in, lets a small change to
    many weights move every output at once. Rotation invariance is kept and
    permuting residues permutes the result.
    """
    scalar = np.asarray(scalar, dtype=float)
    return (scalar - scalar.mean(axis=0)) / (scalar.std(axis=0) + eps)


@lru_cache(maxsize=8)
def default_encoder(seed: int = 0, layers: int = 5) -> StructureEncoder:
    return StructureEncoder.create(seed=seed, layers=layers)


def encode_structure(g: GeometricGraph, layers: int = 5, encoder: StructureEncoder | None = None,
                     seed: int = 0) -> ConditioningEmbedding:
    if encoder is None:
        encoder = default_encoder(seed, layers)
    return encoder(g)
