"""Token embedding + pooling into node features, and relevance back to tokens."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import numkernel as nk
from .errors import ConfigError, DimensionError, InputError

POOLINGS = ("mean", "max", "mlp")
MODES = ("conserving", "paper-literal")
DEFAULT_EMBED_DIM = 32


def init_embedding(vocab_size: int, embed_dim: int = DEFAULT_EMBED_DIM, rng=None) -> np.ndarray:
    rng = np.random.default_rng(rng)
    bound = 0.5 / np.sqrt(embed_dim)
    return rng.uniform(-bound, bound, size=(vocab_size, embed_dim))


def check_pooling(pooling: str) -> str:
    if pooling not in POOLINGS:
        raise ConfigError(f"unknown pooling {pooling!r}; expected one of {POOLINGS}")
    return pooling


@dataclass
class NodeTokens:
    """What one node's pooling saw: surviving positions and their vectors."""

    positions: np.ndarray  # original token positions that were pooled
    token_ids: np.ndarray
    vectors: np.ndarray  # |kept| x embed_dim rows of the table
    pooled_inputs: np.ndarray  # what the pool combined (vectors, or MLP outputs)
    mlp_tape: list = field(default_factory=list)
    winners: np.ndarray | None = None  # max pooling: winning row per dim


@dataclass
class EmbeddedEvent:
    features: np.ndarray  # |V| x D node matrix X
    nodes: list[NodeTokens]
    pooling: str
    num_positions: list[int]  # |T_v| before any drop

    @property
    def token_vectors(self) -> list[np.ndarray]:
        return [n.vectors for n in self.nodes]


def embed_event(
    tokens: Sequence[Sequence[int]],
    table: np.ndarray,
    pooling: str = "mean",
    mlp: tuple[np.ndarray, np.ndarray | None] | None = None,
    drop=frozenset(),
) -> EmbeddedEvent:
    """Pool each node's token vectors into one feature row.

    ``drop`` is a set of (node, position) pairs removed before pooling; a
    node left with no tokens gets the zero vector.
    """
    check_pooling(pooling)
    if pooling == "mlp" and mlp is None:
        raise ConfigError("mlp pooling needs (weights, bias)")
    vocab_size, dim = table.shape
    out_dim = mlp[0].shape[1] if pooling == "mlp" else dim
    features = np.zeros((len(tokens), out_dim))
    nodes = []
    for v, toks in enumerate(tokens):
        ids = np.asarray(toks, dtype=np.int64)
        if ids.size and (ids.min() < 0 or ids.max() >= vocab_size):
            raise InputError(f"node {v}: token index outside vocabulary of size {vocab_size}")
        keep = np.array([(v, t) not in drop for t in range(len(ids))], dtype=bool)
        positions = np.flatnonzero(keep)
        ids = ids[keep]
        vectors = table[ids]
        node = NodeTokens(positions, ids, vectors, vectors)
        if len(ids):
            if pooling == "mlp":
                w, b = mlp
                hidden = nk.linear_forward(vectors, w, b, tape=node.mlp_tape)
                node.pooled_inputs = nk.relu_forward(hidden, tape=node.mlp_tape)
            if pooling == "max":
                node.winners = np.argmax(vectors, axis=0)  # first max = lowest position
                features[v] = vectors[node.winners, np.arange(dim)]
            else:
                features[v] = node.pooled_inputs.mean(axis=0)
        nodes.append(node)
    return EmbeddedEvent(features, nodes, pooling, [len(t) for t in tokens])


def lrp_pool_backward(
    node_relevance: np.ndarray,
    node: NodeTokens,
    pooling: str,
    eps: float = nk.DEFAULT_EPS,
    mode: str = "conserving",
) -> np.ndarray:
    """Relevance of one node's feature dims pushed to its token vectors.

    Returns a |kept tokens| x embed_dim array.  ``paper-literal`` uses the
    published mean/max formulas verbatim; they do not conserve relevance.
    """
    if mode not in MODES:
        raise ConfigError(f"unknown LRP mode {mode!r}; expected one of {MODES}")
    check_pooling(pooling)
    r = np.asarray(node_relevance, dtype=np.float64).reshape(-1)
    n = len(node.positions)
    if n == 0:
        return np.zeros((0, node.vectors.shape[1]))
    inputs = node.pooled_inputs
    if r.shape[0] != inputs.shape[1]:
        raise DimensionError(f"node relevance has {r.shape[0]} dims, pool output has {inputs.shape[1]}")

    if pooling == "max":
        out = np.zeros_like(inputs)
        cols = np.arange(inputs.shape[1])
        if mode == "conserving":
            out[node.winners, cols] = r
        else:
            out[node.winners, cols] = inputs[node.winners, cols] * r
        return out

    pooled = inputs.mean(axis=0)
    share = inputs / stab_for(pooled, eps)
    if mode == "conserving":
        share = share / n
    token_rel = share * r
    if pooling == "mlp":
        token_rel = nk.lrp_backward(node.mlp_tape, token_rel, eps)
    return token_rel


def stab_for(x, eps):
    return nk.stabilize(x, nk.check_eps(eps))


def lrp_text(
    embedded: EmbeddedEvent,
    node_relevance: np.ndarray,
    eps: float = nk.DEFAULT_EPS,
    mode: str = "conserving",
) -> list[np.ndarray]:
    """Token attribution z per node, indexed by original token position."""
    if node_relevance.shape != embedded.features.shape:
        raise DimensionError(
            f"relevance shape {node_relevance.shape} != features {embedded.features.shape}"
        )
    out = []
    for v, node in enumerate(embedded.nodes):
        per_dim = lrp_pool_backward(node_relevance[v], node, embedded.pooling, eps, mode)
        z = np.zeros(embedded.num_positions[v])
        z[node.positions] = token_attribution(per_dim)
        out.append(z)
    return out


def token_attribution(per_token_per_dim: np.ndarray) -> np.ndarray:
    """Sum relevance over embedding dims: one score per token."""
    return np.asarray(per_token_per_dim, dtype=np.float64).sum(axis=1)


def embed_backward(embedded: EmbeddedEvent, grad_features: np.ndarray):
    """Backprop dL/dX into (table rows, row grads) plus MLP parameter grads."""
    ids, rows = [], []
    mlp_grads = {}
    for v, node in enumerate(embedded.nodes):
        n = len(node.positions)
        if n == 0:
            continue
        g = grad_features[v]
        if embedded.pooling == "max":
            gt = np.zeros_like(node.vectors)
            gt[node.winners, np.arange(gt.shape[1])] = g
        else:
            gt = np.repeat(g[None, :] / n, n, axis=0)
            if embedded.pooling == "mlp":
                res = nk.grad_backward(node.mlp_tape, gt)
                gt = res.input_grad
                for key, val in res.param_grads[0].items():
                    mlp_grads[key] = mlp_grads.get(key, 0.0) + val
        ids.append(node.token_ids)
        rows.append(gt)
    if ids:
        return np.concatenate(ids), np.concatenate(rows), mlp_grads
    return np.zeros(0, dtype=np.int64), np.zeros((0, grad_features.shape[1])), mlp_grads
