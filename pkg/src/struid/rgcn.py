"""Relational graph convolution: structure-aware node encodings.

Each layer computes, per node i,

    h_i <- act( W0 h_i + sum_r sum_{j in N_r(i)} W_r h_j / |N_r(i)| )

with one weight matrix per directed relation slot plus a self-loop matrix.
Neighbor means are summed in value-sorted order, which makes encodings
bitwise invariant under node relabeling (the sum order no longer depends
on node ids).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .kg import RELATIONS, KnowledgeGraph

NUM_SLOTS = 2 * len(RELATIONS)  # forward and inverse direction per relation


@dataclass
class RgcnParams:
    """Base embeddings plus per-layer self-loop and per-slot matrices."""

    base: ad.Tensor                      # (num_nodes, dim)
    self_loops: list[ad.Tensor]          # layer -> (dim, dim)
    relations: list[list[ad.Tensor]]     # layer -> slot -> (dim, dim)

    @property
    def num_layers(self) -> int:
        return len(self.self_loops)

    @property
    def dim(self) -> int:
        return self.base.shape[1]

    def all_tensors(self) -> dict[str, ad.Tensor]:
        out = {"rgcn/base": self.base}
        for layer, w in enumerate(self.self_loops):
            out[f"rgcn/layer{layer}/self"] = w
        for layer, slots in enumerate(self.relations):
            for s, w in enumerate(slots):
                out[f"rgcn/layer{layer}/rel{s}"] = w
        return out

    def parameters(self) -> list[ad.Tensor]:
        return [t for _, t in sorted(self.all_tensors().items())]


def init_rgcn_params(num_nodes: int, dim: int, num_layers: int, rng: np.random.Generator) -> RgcnParams:
    # embeddings are lookup rows, not linear maps: fan-in 1 keeps the norm
    # large enough that stacked ReLU layers do not die at initialization
    base = ad.init_uniform((num_nodes, dim), 1, rng)
    self_loops = [ad.init_uniform((dim, dim), dim, rng) for _ in range(num_layers)]
    relations = [[ad.init_uniform((dim, dim), dim, rng) for _ in range(NUM_SLOTS)]
                 for _ in range(num_layers)]
    return RgcnParams(base=base, self_loops=self_loops, relations=relations)


def load_rgcn_params(tensors: dict[str, np.ndarray]) -> RgcnParams:
    layers = sorted({int(k.split("/")[1][5:]) for k in tensors if k.startswith("rgcn/layer")})
    base = ad.Tensor(tensors["rgcn/base"], requires_grad=True)
    self_loops = [ad.Tensor(tensors[f"rgcn/layer{m}/self"], requires_grad=True) for m in layers]
    relations = [[ad.Tensor(tensors[f"rgcn/layer{m}/rel{s}"], requires_grad=True)
                  for s in range(NUM_SLOTS)] for m in layers]
    return RgcnParams(base=base, self_loops=self_loops, relations=relations)


def segment_mean(h: ad.Tensor, indptr: np.ndarray, indices: np.ndarray) -> ad.Tensor:
    """Per-node mean of neighbor rows; zero rows for empty neighborhoods.

    Rows are grouped by equal degree and each column is summed in ascending
    value order with float64 accumulation, so the result depends only on
    the multiset of neighbor values, never on node numbering.
    """
    n = len(indptr) - 1
    degrees = np.diff(indptr)
    gathered = h.data[indices]
    out = np.zeros((n, h.shape[1]), dtype=h.dtype)
    for k in np.unique(degrees):
        if k == 0:
            continue
        nodes = np.flatnonzero(degrees == k)
        idx = indptr[nodes][:, None] + np.arange(k)[None, :]
        block = np.sort(gathered[idx], axis=1)
        out[nodes] = (block.sum(axis=1, dtype=np.float64) / float(k)).astype(h.dtype)

    def backward(grad):
        if h.requires_grad:
            if h.grad is None:
                h.grad = np.zeros_like(h.data)
            safe = np.maximum(degrees, 1).astype(h.dtype)
            per_edge = np.repeat(grad / safe[:, None], degrees, axis=0)
            np.add.at(h.grad, indices, per_edge)

    return ad.make_node(out, (h,), backward)


def rgcn_layer(h: ad.Tensor, slots: list[tuple[np.ndarray, np.ndarray]],
               self_loop: ad.Tensor, relation_ws: list[ad.Tensor],
               activation: str = "relu") -> ad.Tensor:
    out = ad.matmul(h, self_loop)
    for (indptr, indices), w in zip(slots, relation_ws):
        if len(indices) == 0:
            continue
        out = ad.add(out, ad.matmul(segment_mean(h, indptr, indices), w))
    if activation == "relu":
        return ad.relu(out)
    if activation == "identity":
        return out
    raise ValueError(f"unknown activation: {activation!r}")


def encode(graph: KnowledgeGraph, params: RgcnParams, activation: str = "relu") -> ad.Tensor:
    """Stacked relational convolutions; the final layer's output per node."""
    slots = graph.neighbor_slots()
    h = params.base
    for self_loop, relation_ws in zip(params.self_loops, params.relations):
        h = rgcn_layer(h, slots, self_loop, relation_ws, activation=activation)
    return h
