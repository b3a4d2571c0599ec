"""Graph-supervised residual quantizer that mints structural IDs.

Every KG node is encoded by the relational GCN, then pushed through a
per-entity-type stack of codebooks: each layer picks the nearest code to
the incoming residual and passes the leftover down. Training jointly
minimizes a link-reconstruction loss over quantized vectors (positive
triples vs corrupted tails, scored by a per-relation bilinear form) and
the usual two-sided commitment loss, with straight-through gradients
across the argmin. The resulting index paths are the structural IDs;
entities that collide on all layers get an extra disambiguator.
"""

from __future__ import annotations

import copy
import logging
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator

from . import autodiff as ad
from .errors import DataError, NumericalError
from .kg import ENTITY_TYPES, RELATIONS, KnowledgeGraph
from .rgcn import RgcnParams, encode, init_rgcn_params, load_rgcn_params

logger = logging.getLogger(__name__)

DEFAULT_CODEBOOK_SIZES = {"user": 256, "poi": 256, "category": 64, "region": 64}


def codebook_size_plan(sizes: dict | None, layers: int) -> dict[str, list[int]]:
    """Per-type, per-layer codebook sizes; ints broadcast across layers."""
    merged = dict(DEFAULT_CODEBOOK_SIZES, **(sizes or {}))
    plan = {}
    for t, spec in merged.items():
        if isinstance(spec, int):
            plan[t] = [spec] * layers
        else:
            if len(spec) != layers:
                raise DataError(f"codebook sizes for {t!r} must have {layers} entries, got {len(spec)}")
            plan[t] = [int(k) for k in spec]
        if any(k < 1 for k in plan[t]):
            raise DataError(f"codebook sizes must be >= 1, got {plan[t]} for {t!r}")
    return plan
_DISTANCE_CHUNK = 512
_MAX_NEGATIVE_TRIES = 50


@dataclass(frozen=True)
class StruId:
    """Ordered code indices naming one entity, plus optional disambiguator."""

    entity_type: str
    indices: tuple[int, ...]
    disambiguator: int | None = None

    def key(self) -> tuple:
        return (self.indices, self.disambiguator)


@dataclass
class QuantizeResult:
    indices: np.ndarray            # (n, L) selected code ids
    quantized: ad.Tensor           # (n, D) sum of selected codes
    residuals: list[ad.Tensor]     # z_1 .. z_L (inputs to each layer)
    selected: list[ad.Tensor]      # chosen code rows per layer
    final_residual: ad.Tensor      # z_{L+1}


def nearest_codes(queries: np.ndarray, codebook: np.ndarray) -> np.ndarray:
    """Exhaustive nearest-neighbor indices, ties to the lowest index.

    Distances accumulate in float64 so the ordering is insensitive to
    summation order.
    """
    out = np.empty(len(queries), dtype=np.int64)
    for lo in range(0, len(queries), _DISTANCE_CHUNK):
        chunk = queries[lo:lo + _DISTANCE_CHUNK]
        diff = (chunk[:, None, :] - codebook[None, :, :]).astype(np.float64)
        out[lo:lo + _DISTANCE_CHUNK] = np.argmin((diff * diff).sum(axis=-1), axis=1)
    return out


def quantize(h: ad.Tensor, books: list[ad.Tensor]) -> QuantizeResult:
    """Residual quantization of row vectors through a codebook stack.

    The recursion subtracts detached code values, so residuals depend on
    the encoder output alone: the commitment loss then pulls only the
    encoder, never earlier codebooks.
    """
    z = h
    indices, residuals, selected = [], [], []
    quantized = None
    for book in books:
        residuals.append(z)
        idx = nearest_codes(z.data, book.data)
        picked = ad.embedding_lookup(book, idx)
        indices.append(idx)
        selected.append(picked)
        quantized = picked if quantized is None else ad.add(quantized, picked)
        z = ad.sub(z, ad.stop_gradient(picked))
    return QuantizeResult(
        indices=np.stack(indices, axis=1),
        quantized=quantized,
        residuals=residuals,
        selected=selected,
        final_residual=z,
    )


def straight_through(h: ad.Tensor, quantized: ad.Tensor) -> ad.Tensor:
    """Quantized values forward; downstream gradients reach both sides.

    The sum of selected codes is differentiable in the codebooks as-is;
    the (h - sg[h]) term (exactly zero forward) additionally routes the
    task gradient past the argmin into the encoder output.
    """
    return ad.add(quantized, ad.sub(h, ad.stop_gradient(h)))


def quantization_loss(result: QuantizeResult, beta: float) -> ad.Tensor:
    """Two-sided commitment loss, summed over layers and rows.

    The first term moves codes toward frozen residuals, the second moves
    the encoder toward frozen codes, weighted by beta.
    """
    total = None
    for z, picked in zip(result.residuals, result.selected):
        code_term = ad.tsum(ad.squared_distance(ad.stop_gradient(z), picked))
        commit_term = ad.scale(ad.tsum(ad.squared_distance(ad.stop_gradient(picked), z)), beta)
        term = ad.add(code_term, commit_term)
        total = term if total is None else ad.add(total, term)
    return total


def score_triple(h_head, h_tail, relation_w) -> float:
    """P(head --relation--> tail) = sigmoid(head^T W tail)."""
    head = h_head.data if isinstance(h_head, ad.Tensor) else np.asarray(h_head)
    tail = h_tail.data if isinstance(h_tail, ad.Tensor) else np.asarray(h_tail)
    w = relation_w.data if isinstance(relation_w, ad.Tensor) else np.asarray(relation_w)
    s = float(head @ w @ tail)
    return float(1.0 / (1.0 + np.exp(-s)))


def batched_scores(h_heads: ad.Tensor, h_tails: ad.Tensor, relation_w: ad.Tensor) -> ad.Tensor:
    return ad.tsum(ad.mul(ad.matmul(h_heads, relation_w), h_tails), axis=1)


def all_positive_triples(graph: KnowledgeGraph) -> np.ndarray:
    """(relation_id, head_local, tail_local) rows over the whole graph."""
    rows = []
    for r, rel in enumerate(RELATIONS):
        pairs = graph.triples[rel]
        if len(pairs):
            rows.append(np.column_stack([np.full(len(pairs), r, dtype=np.int64), pairs]))
    if not rows:
        raise DataError("graph has no triples to train on")
    return np.concatenate(rows, axis=0)


def _true_pair_sets(graph: KnowledgeGraph) -> list[set[tuple[int, int]]]:
    sets = []
    for rel in RELATIONS:
        pairs = {(int(h), int(t)) for h, t in graph.triples[rel]}
        if rel == "adjacent":
            pairs |= {(t, h) for h, t in pairs}
        sets.append(pairs)
    return sets


def sample_negative_tails(positives: np.ndarray, graph: KnowledgeGraph,
                          per_positive: int, rng: np.random.Generator,
                          true_sets: list[set[tuple[int, int]]] | None = None) -> np.ndarray:
    """Corrupted tails, type-consistent, resampled on accidental positives.

    Returns (n_kept, 3) rows of (relation_id, head_local, tail_local);
    a corruption slot that cannot escape the true set is dropped.
    """
    from .kg import RELATION_DOMAINS

    if true_sets is None:
        true_sets = _true_pair_sets(graph)
    tail_counts = [graph.count(RELATION_DOMAINS[rel][1]) for rel in RELATIONS]
    out = []
    for r, h, t in positives:
        for _ in range(per_positive):
            for _ in range(_MAX_NEGATIVE_TRIES):
                cand = int(rng.integers(tail_counts[r]))
                if (int(h), cand) not in true_sets[r]:
                    out.append((int(r), int(h), cand))
                    break
    return np.asarray(out, dtype=np.int64).reshape(-1, 3)


class GraphTokenizer(BaseEstimator):
    """Learns structural IDs for every KG entity.

    sklearn-style estimator: hyperparameters in the constructor, training
    state in trailing-underscore attributes after fit(graph). transform()
    maps entities of the fitted (or a compatible) graph to their code
    index paths; assign_struids() additionally resolves collisions.
    """

    def __init__(self, dim: int = 64, rgcn_layers: int = 3, quant_layers: int = 3,
                 codebook_sizes: dict | None = None, beta: float = 0.25,
                 epochs: int = 300, lr: float = 0.01, triples_per_step: int = 256,
                 negatives_per_positive: int = 1, grad_clip: float = 5.0, seed: int = 0):
        self.dim = dim
        self.rgcn_layers = rgcn_layers
        self.quant_layers = quant_layers
        self.codebook_sizes = codebook_sizes
        self.beta = beta
        self.epochs = epochs
        self.lr = lr
        self.triples_per_step = triples_per_step
        self.negatives_per_positive = negatives_per_positive
        self.grad_clip = grad_clip
        self.seed = seed

    # -- fitting -------------------------------------------------------------

    def fit(self, graph: KnowledgeGraph, y=None) -> "GraphTokenizer":
        self._validate_hyperparameters()
        sizes = codebook_size_plan(self.codebook_sizes, self.quant_layers)
        rng = np.random.default_rng(self.seed)

        self.graph_ = graph
        self.codebook_sizes_ = sizes
        self.rgcn_params_ = init_rgcn_params(graph.num_nodes(), self.dim, self.rgcn_layers, rng)
        self.relation_weights_ = {rel: ad.init_uniform((self.dim, self.dim), self.dim, rng)
                                  for rel in RELATIONS}
        self._init_codebooks(graph, rng)

        params = self._parameters()
        optimizer = ad.Adam(params, lr=self.lr, grad_clip=self.grad_clip)
        positives = all_positive_triples(graph)
        true_sets = _true_pair_sets(graph)
        self.history_ = []
        last_good = None

        for epoch in range(1, self.epochs + 1):
            usage = {t: [np.zeros(b.shape[0], dtype=np.int64) for b in self.codebooks_[t]]
                     for t in self.codebooks_}
            order = rng.permutation(len(positives))
            kg_losses, rq_losses = [], []
            for lo in range(0, len(order), self.triples_per_step):
                batch = positives[order[lo:lo + self.triples_per_step]]
                kg_val, rq_val = self._train_step(graph, batch, true_sets, optimizer, rng, usage)
                kg_losses.append(kg_val)
                rq_losses.append(rq_val)
            entry = {"epoch": epoch,
                     "loss_kg": float(np.mean(kg_losses)),
                     "loss_rq": float(np.mean(rq_losses))}
            self.history_.append(entry)
            logger.info("tokenizer epoch %d: loss_kg=%.4f loss_rq=%.4f", epoch,
                        entry["loss_kg"], entry["loss_rq"])
            if not np.isfinite(entry["loss_kg"] + entry["loss_rq"]):
                if last_good is not None:
                    self._restore(last_good)
                raise NumericalError(
                    f"non-finite tokenizer loss at epoch {epoch}; restored epoch {epoch - 1}")
            self._restart_dead_codes(graph, usage, rng)
            last_good = self._snapshot()
        return self

    def _validate_hyperparameters(self) -> None:
        if self.dim < 1 or self.quant_layers < 1 or self.rgcn_layers < 0:
            raise DataError("tokenizer dimensions/layers must be positive")
        if not 0.0 <= self.beta:
            raise DataError(f"beta must be non-negative, got {self.beta}")
        if self.negatives_per_positive < 1:
            raise DataError("negatives_per_positive must be >= 1")

    def _parameters(self) -> list[ad.Tensor]:
        params = self.rgcn_params_.parameters()
        params += [self.relation_weights_[rel] for rel in RELATIONS]
        for t in sorted(self.codebooks_):
            params += self.codebooks_[t]
        return params

    def _snapshot(self):
        return [p.data.copy() for p in self._parameters()]

    def _restore(self, snapshot) -> None:
        for p, saved in zip(self._parameters(), snapshot):
            p.data = saved

    def _init_codebooks(self, graph: KnowledgeGraph, rng: np.random.Generator) -> None:
        """K-means over first-pass residuals, layer by layer."""
        with ad.no_grad():
            h = encode(graph, self.rgcn_params_).data
        self.codebooks_ = {}
        for t in ENTITY_TYPES:
            n = graph.count(t)
            if n == 0:
                continue
            off = graph.type_offset(t)
            z = h[off:off + n].copy()
            books = []
            for layer in range(self.quant_layers):
                centroids = kmeans(z, self.codebook_sizes_[t][layer], rng)
                books.append(ad.Tensor(centroids, requires_grad=True))
                z = z - centroids[nearest_codes(z, centroids)]
            self.codebooks_[t] = books

    def _quantize_batch(self, h_batch: ad.Tensor, nodes: np.ndarray, graph: KnowledgeGraph,
                        usage: dict | None):
        """Quantize sorted global node ids grouped by entity type."""
        parts, rq_parts = [], []
        indices_by_row = np.zeros((len(nodes), self.quant_layers), dtype=np.int64)
        cursor = 0
        for t in ENTITY_TYPES:
            off = graph.type_offset(t)
            count = graph.count(t)
            hi = cursor
            while hi < len(nodes) and off <= nodes[hi] < off + count:
                hi += 1
            if hi == cursor:
                continue
            rows = ad.take(h_batch, slice(cursor, hi))
            result = quantize(rows, self.codebooks_[t])
            parts.append(straight_through(rows, result.quantized))
            rq_parts.append(quantization_loss(result, self.beta))
            indices_by_row[cursor:hi] = result.indices
            if usage is not None:
                for layer in range(self.quant_layers):
                    np.add.at(usage[t][layer], result.indices[:, layer], 1)
            cursor = hi
        h_hat = parts[0] if len(parts) == 1 else ad.concat(parts, axis=0)
        rq_total = rq_parts[0]
        for extra in rq_parts[1:]:
            rq_total = ad.add(rq_total, extra)
        return h_hat, ad.scale(rq_total, 1.0 / len(nodes)), indices_by_row

    def _train_step(self, graph, batch, true_sets, optimizer, rng, usage):
        from .kg import RELATION_DOMAINS

        optimizer.zero_grad()
        negatives = sample_negative_tails(batch, graph, self.negatives_per_positive, rng, true_sets)
        triples = np.concatenate([batch, negatives], axis=0)
        labels = np.concatenate([np.ones(len(batch)), np.zeros(len(negatives))])

        offsets = np.array([[graph.type_offset(RELATION_DOMAINS[RELATIONS[r]][0]),
                             graph.type_offset(RELATION_DOMAINS[RELATIONS[r]][1])]
                            for r in triples[:, 0]])
        heads_g = triples[:, 1] + offsets[:, 0]
        tails_g = triples[:, 2] + offsets[:, 1]
        nodes = np.unique(np.concatenate([heads_g, tails_g]))

        h_all = encode(graph, self.rgcn_params_)
        h_batch = ad.embedding_lookup(h_all, nodes)
        h_hat, rq_loss, _ = self._quantize_batch(h_batch, nodes, graph, usage)

        head_rows = np.searchsorted(nodes, heads_g)
        tail_rows = np.searchsorted(nodes, tails_g)
        score_parts, label_parts = [], []
        for r, rel in enumerate(RELATIONS):
            mask = triples[:, 0] == r
            if not mask.any():
                continue
            score_parts.append(batched_scores(ad.embedding_lookup(h_hat, head_rows[mask]),
                                              ad.embedding_lookup(h_hat, tail_rows[mask]),
                                              self.relation_weights_[rel]))
            label_parts.append(labels[mask])
        scores = score_parts[0] if len(score_parts) == 1 else ad.concat(score_parts, axis=0)
        kg_loss = ad.logistic_loss(scores, np.concatenate(label_parts))

        loss = ad.add(kg_loss, rq_loss)
        loss.backward()
        optimizer.step()
        return float(kg_loss.data), float(rq_loss.data)

    def _restart_dead_codes(self, graph, usage, rng) -> None:
        """Re-seed codes unused for a whole epoch to current residuals."""
        with ad.no_grad():
            h = encode(graph, self.rgcn_params_).data
        for t, books in self.codebooks_.items():
            off = graph.type_offset(t)
            z = h[off:off + graph.count(t)].copy()
            for layer, book in enumerate(books):
                dead = np.flatnonzero(usage[t][layer] == 0)
                if len(dead) and len(z):
                    picks = rng.integers(0, len(z), size=len(dead))
                    book.data[dead] = z[picks]
                z = z - book.data[nearest_codes(z, book.data)]

    # -- inference -----------------------------------------------------------

    def _check_fitted(self) -> None:
        if not hasattr(self, "codebooks_"):
            raise DataError("GraphTokenizer is not fitted; call fit(graph) first")

    def _resolve_graph(self, graph: KnowledgeGraph | None) -> KnowledgeGraph:
        self._check_fitted()
        graph = graph if graph is not None else getattr(self, "graph_", None)
        if graph is None:
            raise DataError("no graph available; pass one explicitly")
        if graph.num_nodes() != self.rgcn_params_.base.shape[0]:
            raise DataError("graph node count does not match fitted parameters")
        return graph

    def encode_nodes(self, graph: KnowledgeGraph | None = None) -> np.ndarray:
        graph = self._resolve_graph(graph)
        with ad.no_grad():
            return encode(graph, self.rgcn_params_).data

    def transform(self, graph: KnowledgeGraph | None = None) -> dict[str, np.ndarray]:
        """Code index paths per entity type, aligned with local indices."""
        graph = self._resolve_graph(graph)
        h = self.encode_nodes(graph)
        out = {}
        with ad.no_grad():
            for t in ENTITY_TYPES:
                if graph.count(t) == 0:
                    continue
                off = graph.type_offset(t)
                rows = ad.Tensor(h[off:off + graph.count(t)])
                out[t] = quantize(rows, self.codebooks_[t]).indices
        return out

    def fit_transform(self, graph: KnowledgeGraph, y=None) -> dict[str, np.ndarray]:
        return self.fit(graph).transform(graph)

    def quantized_vectors(self, graph: KnowledgeGraph | None = None) -> dict[str, np.ndarray]:
        """Per-type quantized vectors (sum of selected codes per entity)."""
        graph = self._resolve_graph(graph)
        h = self.encode_nodes(graph)
        out = {}
        with ad.no_grad():
            for t in ENTITY_TYPES:
                if graph.count(t) == 0:
                    continue
                off = graph.type_offset(t)
                rows = ad.Tensor(h[off:off + graph.count(t)])
                out[t] = quantize(rows, self.codebooks_[t]).quantized.data
        return out

    def assign_struids(self, graph: KnowledgeGraph | None = None) -> dict[str, list[StruId]]:
        """Unique StruId per entity; full-path collisions get disambiguators
        0, 1, 2, ... in local-index order."""
        graph = self._resolve_graph(graph)
        indices = self.transform(graph)
        out: dict[str, list[StruId]] = {}
        for t, idx in indices.items():
            groups: dict[tuple, list[int]] = {}
            for local, row in enumerate(idx):
                groups.setdefault(tuple(int(v) for v in row), []).append(local)
            ids: list[StruId | None] = [None] * len(idx)
            for path, members in groups.items():
                if len(members) == 1:
                    ids[members[0]] = StruId(t, path)
                else:
                    for d, local in enumerate(sorted(members)):
                        ids[local] = StruId(t, path, d)
            out[t] = ids
        return out

    def score_edge(self, relation: str, h_head: np.ndarray, h_tail: np.ndarray) -> float:
        self._check_fitted()
        return score_triple(h_head, h_tail, self.relation_weights_[relation])

    # -- persistence ----------------------------------------------------------

    def save(self, path) -> None:
        self._check_fitted()
        tensors = dict(self.rgcn_params_.all_tensors())
        for rel in RELATIONS:
            tensors[f"score/{rel}"] = self.relation_weights_[rel]
        for t, books in self.codebooks_.items():
            for layer, book in enumerate(books):
                tensors[f"books/{t}/{layer}"] = book
        extra = {
            "dim": self.dim, "rgcn_layers": self.rgcn_layers, "quant_layers": self.quant_layers,
            "codebook_sizes": self.codebook_sizes_, "beta": self.beta, "epochs": self.epochs,
            "lr": self.lr, "triples_per_step": self.triples_per_step,
            "negatives_per_positive": self.negatives_per_positive,
            "grad_clip": self.grad_clip, "history": self.history_,
        }
        ad.save_checkpoint(path, tensors, seed=self.seed, step=len(self.history_), extra=extra)

    @classmethod
    def load(cls, path) -> "GraphTokenizer":
        tensors, meta = ad.load_checkpoint(path)
        extra = meta["extra"]
        tok = cls(dim=extra["dim"], rgcn_layers=extra["rgcn_layers"],
                  quant_layers=extra["quant_layers"], codebook_sizes=extra["codebook_sizes"],
                  beta=extra["beta"], epochs=extra["epochs"], lr=extra["lr"],
                  triples_per_step=extra["triples_per_step"],
                  negatives_per_positive=extra["negatives_per_positive"],
                  grad_clip=extra["grad_clip"], seed=meta["seed"])
        tok.codebook_sizes_ = extra["codebook_sizes"]
        tok.rgcn_params_ = load_rgcn_params(tensors)
        tok.relation_weights_ = {rel: ad.Tensor(tensors[f"score/{rel}"], requires_grad=True)
                                 for rel in RELATIONS}
        tok.codebooks_ = {}
        for t in ENTITY_TYPES:
            books = []
            for layer in range(extra["quant_layers"]):
                key = f"books/{t}/{layer}"
                if key in tensors:
                    books.append(ad.Tensor(tensors[key], requires_grad=True))
            if books:
                tok.codebooks_[t] = books
        tok.history_ = extra["history"]
        return tok


def kmeans(points: np.ndarray, k: int, rng: np.random.Generator, iters: int = 20) -> np.ndarray:
    """Deterministic k-means with greedy farthest-point style seeding.

    Returns (k, D) float32 centroids. With fewer points than centroids,
    leftover centroids are jittered copies of points so no two coincide.
    """
    points = np.asarray(points, dtype=np.float32)
    n, d = points.shape
    if n == 0:
        raise DataError("kmeans needs at least one point")
    centroids = np.empty((k, d), dtype=np.float32)
    centroids[0] = points[int(rng.integers(n))]
    dist = _sq_dists(points, centroids[0][None, :])[:, 0]
    for i in range(1, k):
        total = float(dist.sum())
        if total <= 0:
            centroids[i] = points[int(rng.integers(n))] + rng.normal(0, 1e-4, size=d).astype(np.float32)
            continue
        probs = dist / total
        centroids[i] = points[int(rng.choice(n, p=probs))]
        dist = np.minimum(dist, _sq_dists(points, centroids[i][None, :])[:, 0])
    for _ in range(iters):
        assign = np.argmin(_sq_dists(points, centroids), axis=1)
        new = centroids.copy()
        for c in range(k):
            members = points[assign == c]
            if len(members):
                new[c] = members.mean(axis=0, dtype=np.float64).astype(np.float32)
            else:
                new[c] = points[int(rng.integers(n))] + rng.normal(0, 1e-4, size=d).astype(np.float32)
        if np.array_equal(new, centroids):
            break
        centroids = new
    return centroids


def _sq_dists(points: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    out = np.empty((len(points), len(centroids)), dtype=np.float64)
    for lo in range(0, len(points), _DISTANCE_CHUNK):
        diff = (points[lo:lo + _DISTANCE_CHUNK, None, :] - centroids[None, :, :]).astype(np.float64)
        out[lo:lo + _DISTANCE_CHUNK] = (diff * diff).sum(axis=-1)
    return out
