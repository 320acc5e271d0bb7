"""Relational GNN over edit subgraphs.

Node and relation vectors are read from the host model's residual stream;
the encoder then runs ``n`` synchronous rounds of

    z_v <- relu( sum_{(v, r, u)} W1 (z_u + z_r) + W2 z_v )

and returns the root's vector. Relation vectors stay fixed across rounds.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import lm
from .autodiff import Tensor
from .world import KnowledgeGraph, Subgraph


@dataclass
class NodeInitTable:
    entities: dict[int, np.ndarray]
    relations: dict[int, np.ndarray]
    layer: int


def _hidden_batch(model: lm.Checkpoint, texts: list[str], layer: int) -> list[np.ndarray]:
    tok = model.tokenizer
    seqs = []
    for text in texts:
        if not text.strip():
            raise ValueError("empty surface form")
        seqs.append(tok.encode(text, bos=True))
    out: list[np.ndarray] = [None] * len(seqs)  # type: ignore[list-item]
    for width in sorted({len(s) for s in seqs}):
        idx = [i for i, s in enumerate(seqs) if len(s) == width]
        ids = np.array([seqs[i] for i in idx])
        run = lm._Runner(model.config, model.weights)
        x = run.blocks(run.embed(ids), 0, layer + 1).data
        for j, i in enumerate(idx):
            out[i] = np.array(x[j, -1])
    return out


def init_node_reprs(model: lm.Checkpoint, g: KnowledgeGraph, sub: Subgraph, k: int) -> NodeInitTable:
    """Last-token hidden state at block ``k`` of each surface form, fed alone after BOS."""
    if not 0 <= k < model.config.n_layers:
        raise IndexError(f"layer {k} out of range")
    nodes = sub.nodes
    rels = sub.relations()
    vecs = _hidden_batch(model, [g.entities[v] for v in nodes] + [g.relations[r].name for r in rels], k)
    return NodeInitTable(dict(zip(nodes, vecs[: len(nodes)])), dict(zip(rels, vecs[len(nodes):])), k)


@dataclass
class RgnnParams:
    w1: list[np.ndarray]
    w2: list[np.ndarray]

    @classmethod
    def identity(cls, d: int, layers: int, dtype=np.float32, gain: float = 1.0) -> "RgnnParams":
        """W2 = gain * I, W1 = 0: the untrained encoder passes gain^layers * relu(z_s) through."""
        return cls([np.zeros((d, d), dtype) for _ in range(layers)],
                   [(gain * np.eye(d)).astype(dtype) for _ in range(layers)])

    @property
    def layers(self) -> int:
        return len(self.w1)

    def as_dict(self) -> dict[str, np.ndarray]:
        out = {}
        for i, (a, b) in enumerate(zip(self.w1, self.w2)):
            out[f"w1.{i}"] = a
            out[f"w2.{i}"] = b
        return out

    @classmethod
    def from_dict(cls, d: dict[str, np.ndarray]) -> "RgnnParams":
        n = len(d) // 2
        return cls([d[f"w1.{i}"] for i in range(n)], [d[f"w2.{i}"] for i in range(n)])

    def digest(self) -> str:
        h = hashlib.sha256()
        for k, v in sorted(self.as_dict().items()):
            h.update(k.encode())
            h.update(np.ascontiguousarray(v, dtype="<f4").tobytes())
        return h.hexdigest()


class _Graph:
    """Index arrays for a subgraph with edges in canonical order."""

    def __init__(self, sub: Subgraph, init: NodeInitTable):
        self.nodes = sub.nodes
        missing = [v for v in self.nodes if v not in init.entities]
        if missing:
            raise KeyError(f"nodes missing from the init table: {missing}")
        self.pos = {v: i for i, v in enumerate(self.nodes)}
        edges = sorted({(h, r, t) for h, r, t, _ in sub.edges})
        for _, r, _ in edges:
            if r not in init.relations:
                raise KeyError(f"relation {r} missing from the init table")
        self.heads = np.array([self.pos[h] for h, _, _ in edges], dtype=np.int64)
        self.tails = np.array([self.pos[t] for _, _, t in edges], dtype=np.int64)
        self.z0 = np.stack([init.entities[v] for v in self.nodes])
        self.zr = (np.stack([init.relations[r] for _, r, _ in edges]) if edges
                   else np.zeros((0, self.z0.shape[1]), self.z0.dtype))
        # scatter-add of edge messages onto heads as a constant matrix
        self.incidence = np.zeros((len(self.nodes), len(edges)), dtype=self.z0.dtype)
        self.incidence[self.heads, np.arange(len(edges))] = 1.0
        self.root = self.pos[sub.root]


def _as_tensors(params: RgnnParams | dict):
    if isinstance(params, RgnnParams):
        return [ad.as_tensor(w) if not isinstance(w, Tensor) else w for w in params.w1], \
               [ad.as_tensor(w) if not isinstance(w, Tensor) else w for w in params.w2]
    return params


def _propagate(graph: _Graph, w1s, w2s, use_relations: bool):
    z = Tensor._wrap(graph.z0)
    for w1, w2 in zip(w1s, w2s):
        self_term = ad.matmul(z, ad.transpose(w2))
        if len(graph.heads):
            msg = ad.getitem(z, graph.tails)
            if use_relations:
                msg = ad.add(msg, graph.zr)
            msg = ad.matmul(msg, ad.transpose(w1))
            self_term = ad.add(self_term, ad.matmul(graph.incidence, msg))
        z = ad.relu(self_term)
    return ad.getitem(z, graph.root)


def encode(sub: Subgraph, init: NodeInitTable, params) -> Tensor:
    """Root vector after ``params.layers`` rounds of relational message passing.

    ``params`` is an :class:`RgnnParams` or a pair ``(w1_list, w2_list)`` of
    (possibly tracked) tensors.
    """
    w1s, w2s = _as_tensors(params)
    return _propagate(_Graph(sub, init), w1s, w2s, use_relations=True)


def encode_gnn_ablation(sub: Subgraph, init: NodeInitTable, params) -> Tensor:
    """As :func:`encode` without the relation term."""
    w1s, w2s = _as_tensors(params)
    return _propagate(_Graph(sub, init), w1s, w2s, use_relations=False)


def encode_mlp_ablation(root_vector: np.ndarray, params) -> Tensor:
    """``z <- relu(W2 z)`` per layer on the root's initial vector; neighbors ignored."""
    _, w2s = _as_tensors(params)
    z = Tensor._wrap(np.asarray(root_vector)[None, :])
    for w2 in w2s:
        z = ad.relu(ad.matmul(z, ad.transpose(w2)))
    return ad.getitem(z, 0)
