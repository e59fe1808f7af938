"""The routing agent: a GCN vertex encoder plus a softmax expansion policy.

Vertex embeddings come from three graph-convolution blocks followed by a
two-layer feed-forward head. Each block is::

    H_out = LayerNorm(FC(ELU(A_hat @ H_in @ W_conv)) + H_in)

with ``A_hat = D^-1/2 (A + I) D^-1/2`` built from the symmetrised adjacency.
Blocks keep the input width so the residual is a plain sum; the head maps to
the embedding width ``d_embed``. Gradients are computed by hand in float64.
"""

from __future__ import annotations

import hashlib
import os
import struct
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np
import scipy.sparse as sp

from .proxgraph import ProximityGraph
from .search import StaleEmbeddingError

AGENT_MAGIC = b"MIPSAGT1"
EMBED_MAGIC = b"MIPSEMB1"
LN_EPS = 1e-9
NUM_BLOCKS = 3


class AgentError(ValueError):
    pass


def elu(x: np.ndarray) -> np.ndarray:
    return np.where(x > 0, x, np.expm1(np.minimum(x, 0.0)))


def _elu_grad(x: np.ndarray) -> np.ndarray:
    return np.where(x > 0, 1.0, np.exp(np.minimum(x, 0.0)))


def normalized_adjacency(graph: ProximityGraph) -> sp.csr_matrix:
    """``D^-1/2 (A + I) D^-1/2`` over the symmetrised, binarised edge set."""
    n = graph.n
    rows = np.repeat(np.arange(n), graph.out_degrees())
    A = sp.csr_matrix((np.ones(rows.size), (rows, graph.targets)), shape=(n, n))
    A = ((A + A.T) > 0).astype(np.float64)
    A.setdiag(0)
    A.eliminate_zeros()
    A = A + sp.identity(n, format="csr")
    inv_sqrt = 1.0 / np.sqrt(np.asarray(A.sum(axis=1)).ravel())
    D = sp.diags(inv_sqrt)
    return sp.csr_matrix(D @ A @ D)


def graph_conv_layer(H: np.ndarray, adj_norm, W: np.ndarray) -> np.ndarray:
    if H.shape[0] != adj_norm.shape[0]:
        raise AgentError("feature rows do not match graph size")
    return elu(adj_norm @ (H @ W))


def layer_norm(R: np.ndarray, gain: np.ndarray, bias: np.ndarray):
    mu = R.mean(axis=1, keepdims=True)
    centred = R - mu
    inv_std = 1.0 / np.sqrt((centred ** 2).mean(axis=1, keepdims=True) + LN_EPS)
    xhat = centred * inv_std
    return xhat * gain + bias, xhat, inv_std


@dataclass
class AgentParams:
    """All trainable tensors, keyed by name, plus the softmax temperature.

    ``query.W`` is present only for a linear query transform.
    """

    weights: Dict[str, np.ndarray]
    tau: float = 1.0
    d: int = 0
    d_embed: int = 0

    def __post_init__(self) -> None:
        if not self.tau > 0:
            raise AgentError("temperature must be positive")
        if self.query_linear:
            if self.weights["query.W"].shape != (self.d_embed, self.d):
                raise AgentError("query transform shape mismatch")
        elif self.d != self.d_embed:
            raise AgentError("identity query transform requires d_embed == d")

    @property
    def query_linear(self) -> bool:
        return "query.W" in self.weights

    def copy(self) -> "AgentParams":
        return AgentParams({k: v.copy() for k, v in self.weights.items()}, self.tau, self.d, self.d_embed)

    def digest(self) -> str:
        h = hashlib.blake2b(digest_size=8)
        h.update(struct.pack("<dII", self.tau, self.d, self.d_embed))
        for name in sorted(self.weights):
            h.update(name.encode())
            h.update(np.ascontiguousarray(self.weights[name], dtype="<f8").tobytes())
        return h.hexdigest()


def init_params(
    d: int,
    rng: np.random.Generator,
    d_embed: Optional[int] = None,
    tau: float = 1.0,
    query_linear: bool = False,
) -> AgentParams:
    """Uniform(+-1/sqrt(fan_in)) weights and biases; unit gain, zero shift."""
    d_embed = d if d_embed is None else d_embed
    query_linear = query_linear or d_embed != d

    def uni(fan_in, shape):
        bound = 1.0 / np.sqrt(fan_in)
        return rng.uniform(-bound, bound, size=shape)

    w: Dict[str, np.ndarray] = {}
    for b in range(NUM_BLOCKS):
        w[f"block{b}.conv.W"] = uni(d, (d, d))
        w[f"block{b}.fc.W"] = uni(d, (d, d))
        w[f"block{b}.fc.b"] = uni(d, (d,))
        w[f"block{b}.ln.g"] = np.ones(d)
        w[f"block{b}.ln.b"] = np.zeros(d)
    w["ffn.fc1.W"] = uni(d, (d, d_embed))
    w["ffn.fc1.b"] = uni(d, (d_embed,))
    w["ffn.fc2.W"] = uni(d_embed, (d_embed, d_embed))
    w["ffn.fc2.b"] = uni(d_embed, (d_embed,))
    if query_linear:
        w["query.W"] = uni(d, (d_embed, d))
    return AgentParams(w, tau, d, d_embed)


@dataclass
class EmbeddingTable:
    values: np.ndarray
    graph_checksum: int
    params_digest: str = ""

    def check(self, graph: ProximityGraph, params: Optional[AgentParams] = None) -> None:
        if self.values.shape[0] != graph.n or self.graph_checksum != graph.checksum:
            raise StaleEmbeddingError("embedding table was computed for a different graph")
        if params is not None and self.params_digest != params.digest():
            raise StaleEmbeddingError("embedding table is stale for these parameters")


@dataclass
class _Cache:
    H_in: List[np.ndarray] = field(default_factory=list)
    P: List[np.ndarray] = field(default_factory=list)
    U: List[np.ndarray] = field(default_factory=list)
    G: List[np.ndarray] = field(default_factory=list)
    xhat: List[np.ndarray] = field(default_factory=list)
    inv_std: List[np.ndarray] = field(default_factory=list)
    H_last: Optional[np.ndarray] = None
    U1: Optional[np.ndarray] = None
    A1: Optional[np.ndarray] = None


class GcnEncoder:
    """Forward and backward passes of the vertex encoder on one graph."""

    def __init__(self, graph: ProximityGraph, X: np.ndarray) -> None:
        self.graph = graph
        self.X = np.asarray(X, dtype=np.float64)
        if self.X.shape[0] != graph.n:
            raise AgentError("vertex matrix rows must match graph size")
        self.adj = normalized_adjacency(graph)
        self._cache: Optional[_Cache] = None

    def forward(self, params: AgentParams, keep: bool = False) -> np.ndarray:
        w = params.weights
        if self.X.shape[1] != params.d:
            raise AgentError(f"vertex dimension {self.X.shape[1]} != agent input {params.d}")
        c = _Cache() if keep else None
        H = self.X
        for b in range(NUM_BLOCKS):
            P = self.adj @ H
            U = P @ w[f"block{b}.conv.W"]
            G = elu(U)
            R = G @ w[f"block{b}.fc.W"] + w[f"block{b}.fc.b"] + H
            H_next, xhat, inv_std = layer_norm(R, w[f"block{b}.ln.g"], w[f"block{b}.ln.b"])
            if c is not None:
                c.H_in.append(H)
                c.P.append(P)
                c.U.append(U)
                c.G.append(G)
                c.xhat.append(xhat)
                c.inv_std.append(inv_std)
            H = H_next
        U1 = H @ w["ffn.fc1.W"] + w["ffn.fc1.b"]
        A1 = elu(U1)
        E = A1 @ w["ffn.fc2.W"] + w["ffn.fc2.b"]
        if c is not None:
            c.H_last, c.U1, c.A1 = H, U1, A1
            self._cache = c
        return E

    def backward(self, params: AgentParams, dE: np.ndarray) -> Dict[str, np.ndarray]:
        """Gradients of a scalar objective w.r.t. every encoder tensor, given ``dE``."""
        c = self._cache
        if c is None:
            raise AgentError("forward(keep=True) must run before backward")
        w = params.weights
        g: Dict[str, np.ndarray] = {}
        g["ffn.fc2.W"] = c.A1.T @ dE
        g["ffn.fc2.b"] = dE.sum(axis=0)
        dU1 = (dE @ w["ffn.fc2.W"].T) * _elu_grad(c.U1)
        g["ffn.fc1.W"] = c.H_last.T @ dU1
        g["ffn.fc1.b"] = dU1.sum(axis=0)
        dH = dU1 @ w["ffn.fc1.W"].T
        for b in reversed(range(NUM_BLOCKS)):
            xhat, inv_std = c.xhat[b], c.inv_std[b]
            g[f"block{b}.ln.g"] = (dH * xhat).sum(axis=0)
            g[f"block{b}.ln.b"] = dH.sum(axis=0)
            dx = dH * w[f"block{b}.ln.g"]
            dR = inv_std * (dx - dx.mean(axis=1, keepdims=True)
                            - xhat * (dx * xhat).mean(axis=1, keepdims=True))
            g[f"block{b}.fc.W"] = c.G[b].T @ dR
            g[f"block{b}.fc.b"] = dR.sum(axis=0)
            dU = (dR @ w[f"block{b}.fc.W"].T) * _elu_grad(c.U[b])
            g[f"block{b}.conv.W"] = c.P[b].T @ dU
            # A_hat is symmetric
            dH = dR + self.adj @ (dU @ w[f"block{b}.conv.W"].T)
        return g


def gcn_forward(X: np.ndarray, graph: ProximityGraph, params: AgentParams) -> np.ndarray:
    return GcnEncoder(graph, X).forward(params)


def precompute_embeddings(X: np.ndarray, graph: ProximityGraph, params: AgentParams,
                          encoder: Optional[GcnEncoder] = None) -> EmbeddingTable:
    enc = encoder or GcnEncoder(graph, X)
    return EmbeddingTable(enc.forward(params), graph.checksum, params.digest())


def embed_query(q: np.ndarray, params: AgentParams) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    if q.shape != (params.d,):
        raise AgentError("query dimension mismatch")
    return params.weights["query.W"] @ q if params.query_linear else q


def policy_probs(candidates, eq: np.ndarray, table, tau: float) -> np.ndarray:
    """Softmax over ``<E_v(c), E_q(q)> / tau`` for the candidate vertices."""
    cands = np.asarray(candidates, dtype=np.int64)
    if cands.size == 0:
        raise AgentError("empty candidate set")
    values = table.values if isinstance(table, EmbeddingTable) else table
    return softmax((values[cands] @ eq) / tau)


def softmax(logits: np.ndarray) -> np.ndarray:
    z = np.exp(logits - logits.max())
    return z / z.sum()


def sample_action(probs: np.ndarray, rng: np.random.Generator) -> int:
    probs = np.asarray(probs, dtype=np.float64)
    if probs.size == 0 or abs(probs.sum() - 1.0) > 1e-6 or np.any(probs < 0):
        raise AgentError("probabilities must be non-negative and sum to 1")
    if probs.size == 1:
        return 0
    idx = int(np.searchsorted(np.cumsum(probs), rng.random() * probs.sum(), side="right"))
    return min(idx, probs.size - 1)


class Agent:
    """Bundles parameters with the encoder of one graph for scoring and sampling."""

    def __init__(self, params: AgentParams, graph: ProximityGraph, X: np.ndarray) -> None:
        self.params = params
        self.encoder = GcnEncoder(graph, X)
        self.table = precompute_embeddings(X, graph, params, self.encoder)

    def refresh(self, params: Optional[AgentParams] = None) -> None:
        if params is not None:
            self.params = params
        self.table = precompute_embeddings(self.encoder.X, self.encoder.graph, self.params, self.encoder)

    def policy(self, q: np.ndarray):
        eq = embed_query(q, self.params)
        values, tau = self.table.values, self.params.tau

        def probs(cands: np.ndarray) -> np.ndarray:
            return softmax((values[cands] @ eq) / tau)
        return probs

    def scorer(self, q: np.ndarray):
        from .search import Scorer

        self.table.check(self.encoder.graph, self.params)
        return Scorer(embed_query(q, self.params), self.table.values, "agent")


# --- checkpoints ----------------------------------------------------------------------

_AGENT_HEADER = struct.Struct("<8sIIdIII")


def save_agent(params: AgentParams, path: os.PathLike | str) -> None:
    names = sorted(params.weights)
    with open(path, "wb") as fh:
        fh.write(_AGENT_HEADER.pack(AGENT_MAGIC, params.d, params.d_embed, params.tau,
                                    NUM_BLOCKS, int(params.query_linear), len(names)))
        for name in names:
            arr = np.ascontiguousarray(params.weights[name], dtype="<f4")
            raw = name.encode()
            fh.write(struct.pack("<I", len(raw)) + raw)
            fh.write(struct.pack(f"<I{arr.ndim}Q", arr.ndim, *arr.shape))
            fh.write(arr.tobytes())


def load_agent(path: os.PathLike | str) -> AgentParams:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < _AGENT_HEADER.size:
        raise AgentError("truncated agent checkpoint")
    magic, d, d_embed, tau, blocks, _linear, count = _AGENT_HEADER.unpack_from(blob)
    if magic != AGENT_MAGIC:
        raise AgentError("bad magic in agent checkpoint")
    if blocks != NUM_BLOCKS:
        raise AgentError(f"checkpoint has {blocks} blocks, expected {NUM_BLOCKS}")
    pos = _AGENT_HEADER.size
    weights = {}
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            name = blob[pos:pos + nlen].decode()
            pos += nlen
            (ndim,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            shape = struct.unpack_from(f"<{ndim}Q", blob, pos)
            pos += 8 * ndim
            size = int(np.prod(shape)) if ndim else 1
            if pos + 4 * size > len(blob):
                raise AgentError("truncated tensor data")
            weights[name] = np.frombuffer(blob, "<f4", size, pos).astype(np.float64).reshape(shape)
            pos += 4 * size
    except struct.error as exc:
        raise AgentError("truncated agent checkpoint") from exc
    if pos != len(blob):
        raise AgentError("trailing bytes in agent checkpoint")
    return AgentParams(weights, tau, d, d_embed)


_EMBED_HEADER = struct.Struct("<8sQQI")


def save_embeddings(table: EmbeddingTable, path: os.PathLike | str) -> None:
    n, de = table.values.shape
    with open(path, "wb") as fh:
        fh.write(_EMBED_HEADER.pack(EMBED_MAGIC, table.graph_checksum, n, de))
        fh.write(np.ascontiguousarray(table.values, dtype="<f4").tobytes())


def load_embeddings(path: os.PathLike | str) -> EmbeddingTable:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < _EMBED_HEADER.size:
        raise AgentError("truncated embedding file")
    magic, checksum, n, de = _EMBED_HEADER.unpack_from(blob)
    if magic != EMBED_MAGIC:
        raise AgentError("bad magic in embedding file")
    body = blob[_EMBED_HEADER.size:]
    if len(body) != n * de * 4:
        raise AgentError("embedding payload size mismatch")
    return EmbeddingTable(np.frombuffer(body, "<f4").astype(np.float64).reshape(n, de), checksum)


def policy_log_prob_grad(
    encoder: GcnEncoder,
    params: AgentParams,
    items: List[Tuple[np.ndarray, np.ndarray, int, float]],
) -> Tuple[float, Dict[str, np.ndarray]]:
    """Objective ``sum_i w_i * log pi(a_i | C_i, q_i)`` and its gradient.

    ``items`` holds ``(query, candidate ids, chosen position, weight)``
    tuples. The encoder is run forward once and back-propagated once.
    """
    E = encoder.forward(params, keep=True)
    tau = params.tau
    dE = np.zeros_like(E)
    dWq = np.zeros((params.d_embed, params.d)) if params.query_linear else None
    total = 0.0
    for q, cands, choice, weight in items:
        eq = embed_query(q, params)
        rows = E[cands]
        logits = rows @ eq / tau
        shifted = logits - logits.max()
        log_z = np.log(np.exp(shifted).sum())
        total += weight * (shifted[choice] - log_z)
        if weight == 0.0:
            continue
        dlogit = -np.exp(shifted - log_z)
        dlogit[choice] += 1.0
        dlogit *= weight / tau
        np.add.at(dE, cands, np.outer(dlogit, eq))
        if dWq is not None:
            dWq += np.outer(rows.T @ dlogit, q)
    grads = encoder.backward(params, dE)
    if dWq is not None:
        grads["query.W"] = dWq
    return total, grads
