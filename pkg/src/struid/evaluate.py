"""Top-K ranking metrics, subset protocols, ablation harness, projections.

HR@K is a hit indicator for the single true target; NDCG@K discounts by
1/log2(rank+1). Cold-start targets are POIs with fewer than five distinct
training visitors; unseen targets are POIs the predicting user never
visited in training. The ablation harness retrains the sequence model per
corpus variant under matched seeds.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field

import numpy as np
from sklearn.metrics import silhouette_score

from .corpus import CorpusBundle, TokenSequence, build_corpus
from .errors import DataError
from .ingest import DatasetSplit
from .kg import KnowledgeGraph
from .lm import DecodingTrie, SequenceRecommender
from .tokenizer import StruId

COLD_START_VISITORS = 5
TASK_TARGET_TYPE = {"poi": "poi", "category": "category", "region": "region"}


def hr_at_k(ranked: list[int], truth: int, k: int) -> float:
    """1.0 iff the true id appears in the top k of a duplicate-free ranking."""
    if len(set(ranked)) != len(ranked):
        raise DataError("ranking contains duplicate ids")
    return 1.0 if truth in ranked[:k] else 0.0


def ndcg_at_k(ranked: list[int], truth: int, k: int) -> float:
    """1/log2(rank+1) for the single true id within the top k, else 0."""
    if len(set(ranked)) != len(ranked):
        raise DataError("ranking contains duplicate ids")
    for rank, rid in enumerate(ranked[:k], start=1):
        if rid == truth:
            return 1.0 / math.log2(rank + 1.0)
    return 0.0


def build_tries(bundle: CorpusBundle, ids: dict[str, list[StruId]] | None) -> dict[str, DecodingTrie]:
    """One decoding trie per task target type, matching the bundle's tokens."""
    tries = {}
    for task in bundle.tasks():
        t = TASK_TARGET_TYPE[task]
        if bundle.rid_assignment is not None:
            paths = [[bundle.vocab.rid_token(t, rid)] for rid in bundle.rid_assignment[t]]
        else:
            if ids is None:
                raise DataError("StruId table required to build tries for this corpus")
            paths = [bundle.vocab.struid_tokens(sid) for sid in ids[t]]
        tries[task] = DecodingTrie.from_token_paths(paths)
    return tries


def resolve_target(trie: DecodingTrie, target_tokens: list[int]) -> int:
    """Entity local index named by a target block (id tokens then EOS)."""
    node = trie.root
    for tok in target_tokens[:-1]:
        if tok not in node:
            raise DataError("target tokens do not name a valid id")
        node = node[tok]
    if DecodingTrie.LEAF not in node:
        raise DataError("target tokens stop before a complete id")
    return node[DecodingTrie.LEAF]


def subset_masks(examples: list[TokenSequence], trie: DecodingTrie, split: DatasetSplit,
                 graph: KnowledgeGraph) -> dict[str, np.ndarray]:
    """Cold-start and unseen-POI masks over POI-task test examples."""
    visitors: dict[int, set[int]] = {}
    visited_by_user: set[tuple[int, int]] = set()
    for user_raw, events in split.train.items():
        u = graph.local_of("user", user_raw)
        for e in events:
            p = graph.local_of("poi", e.poi_id)
            visitors.setdefault(p, set()).add(u)
            visited_by_user.add((u, p))
    cold, unseen = [], []
    for seq in examples:
        target = resolve_target(trie, seq.target_tokens)
        cold.append(len(visitors.get(target, ())) < COLD_START_VISITORS)
        unseen.append((seq.user, target) not in visited_by_user)
    return {"cold_start": np.asarray(cold), "unseen": np.asarray(unseen)}


@dataclass
class EvalReport:
    """Per-task, per-K metric table plus subset breakdowns and metadata."""

    tasks: dict[str, dict]
    ks: list[int]
    meta: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {"format": "struid-eval-v1", "ks": self.ks, "tasks": self.tasks, "meta": self.meta}

    def dumps(self) -> str:
        return json.dumps(self.to_json(), sort_keys=True, indent=2) + "\n"

    def render(self) -> str:
        lines = []
        header = ["task", "subset", "n"] + [f"HR@{k}" for k in self.ks] + [f"N@{k}" for k in self.ks]
        lines.append("  ".join(f"{h:>10s}" for h in header))
        for task in sorted(self.tasks):
            for subset in ("all", "cold_start", "unseen"):
                entry = self.tasks[task].get(subset)
                if entry is None:
                    continue
                row = [task, subset, str(entry["count"])]
                if entry["metrics"] is None:
                    row += ["absent"] * (2 * len(self.ks))
                else:
                    row += [f"{entry['metrics'][f'hr@{k}']:.4f}" for k in self.ks]
                    row += [f"{entry['metrics'][f'ndcg@{k}']:.4f}" for k in self.ks]
                lines.append("  ".join(f"{c:>10s}" for c in row))
        return "\n".join(lines) + "\n"


def _aggregate(hits: np.ndarray, gains: np.ndarray, mask: np.ndarray | None,
               ks: list[int]) -> dict:
    """Mean metrics over a subset; absent (None) when the subset is empty."""
    idx = np.arange(len(hits)) if mask is None else np.flatnonzero(mask)
    if len(idx) == 0:
        return {"count": 0, "metrics": None}
    metrics = {}
    for j, k in enumerate(ks):
        metrics[f"hr@{k}"] = float(hits[idx, j].mean(dtype=np.float64))
        metrics[f"ndcg@{k}"] = float(gains[idx, j].mean(dtype=np.float64))
    return {"count": int(len(idx)), "metrics": metrics}


def evaluate_task(model: SequenceRecommender, examples: list[TokenSequence],
                  trie: DecodingTrie, ks: list[int], beam_width: int) -> tuple[np.ndarray, np.ndarray]:
    """Per-example HR and NDCG at each cutoff, in corpus order."""
    kmax = max(ks)
    hits = np.zeros((len(examples), len(ks)))
    gains = np.zeros((len(examples), len(ks)))
    for i, seq in enumerate(examples):
        truth = resolve_target(trie, seq.target_tokens)
        result = model.generate_topk(seq.input_tokens, trie, k=kmax,
                                     beam_width=max(beam_width, kmax))
        ranked = result.ranked_locals()
        for j, k in enumerate(ks):
            hits[i, j] = hr_at_k(ranked, truth, k)
            gains[i, j] = ndcg_at_k(ranked, truth, k)
    return hits, gains


def run_eval(model: SequenceRecommender, bundle: CorpusBundle, split: DatasetSplit,
             graph: KnowledgeGraph, ids: dict[str, list[StruId]] | None,
             ks: list[int] = (1, 5, 10), beam_width: int = 20, part: str = "test",
             meta: dict | None = None) -> EvalReport:
    """Full evaluation: all tasks, plus cold-start/unseen breakdowns for POI."""
    ks = list(ks)
    tries = build_tries(bundle, ids)
    tasks: dict[str, dict] = {}
    for task in bundle.tasks():
        examples = bundle.part(task, part)
        hits, gains = evaluate_task(model, examples, tries[task], ks, beam_width)
        entry = {"all": _aggregate(hits, gains, None, ks)}
        if task == "poi":
            masks = subset_masks(examples, tries[task], split, graph)
            entry["cold_start"] = _aggregate(hits, gains, masks["cold_start"], ks)
            entry["unseen"] = _aggregate(hits, gains, masks["unseen"], ks)
        tasks[task] = entry
    return EvalReport(tasks=tasks, ks=ks, meta=dict(meta or {}))


def split_fingerprint(split: DatasetSplit) -> str:
    """Stable hash of the split content; ablations must share it."""
    from .ingest import event_to_obj
    payload = json.dumps({part: [event_to_obj(e) for e in split.events_of(part)]
                          for part in ("train", "valid", "test")}, sort_keys=True)
    return hashlib.sha256(payload.encode()).hexdigest()


def run_ablations(split: DatasetSplit, graph: KnowledgeGraph, ids: dict[str, list[StruId]],
                  variants: list[str], lm_params: dict, window: int = 16,
                  corpus_seed: int = 0, ks: list[int] = (1, 5, 10), beam_width: int = 20,
                  meta: dict | None = None) -> dict:
    """Retrain and evaluate the sequence model per corpus variant.

    Every variant uses byte-identical splits (fingerprint recorded) and the
    same seeds; only the corpus construction differs.
    """
    fingerprint = split_fingerprint(split)
    table: dict[str, dict] = {}
    for variant in variants:
        bundle = build_corpus(split, graph, ids, window=window, variant=variant, seed=corpus_seed)
        model = SequenceRecommender(**lm_params)
        model.fit(bundle.training_sequences(seed=corpus_seed), bundle.vocab)
        report = run_eval(model, bundle, split, graph, ids, ks=ks, beam_width=beam_width,
                          meta=dict(meta or {}, variant=variant, splits_hash=fingerprint))
        table[variant] = report.to_json()
    return {"format": "struid-ablation-v1", "splits_hash": fingerprint, "variants": table}


def render_ablation_table(result: dict, k: int = 5) -> str:
    lines = [f"{'variant':>12s}  {'HR@%d' % k:>8s}  {'N@%d' % k:>8s}"]
    for variant in result["variants"]:
        poi = result["variants"][variant]["tasks"]["poi"]["all"]
        if poi["metrics"] is None:
            lines.append(f"{variant:>12s}  {'absent':>8s}  {'absent':>8s}")
        else:
            lines.append(f"{variant:>12s}  {poi['metrics'][f'hr@{k}']:>8.4f}  "
                         f"{poi['metrics'][f'ndcg@{k}']:>8.4f}")
    return "\n".join(lines) + "\n"


def project_ids(vectors: np.ndarray, labels: list, names: list[str]) -> tuple[list[dict], float | None]:
    """Top-2 principal components of quantized vectors, plus mean silhouette.

    Returns one row per entity {x, y, label, name} and the silhouette of
    the labels in the projected plane (None with fewer than 2 labels).
    """
    vectors = np.asarray(vectors, dtype=np.float64)
    if len(vectors) < 3:
        raise DataError("projection needs at least 3 vectors")
    if not (len(vectors) == len(labels) == len(names)):
        raise DataError("vectors, labels, and names must align")
    centered = vectors - vectors.mean(axis=0)
    _, _, vt = np.linalg.svd(centered, full_matrices=False)
    components = vt[:2]
    # deterministic orientation: largest-magnitude loading positive
    for row in components:
        pivot = np.argmax(np.abs(row))
        if row[pivot] < 0:
            row *= -1.0
    coords = centered @ components.T
    rows = [{"x": float(x), "y": float(y), "label": str(label), "name": name}
            for (x, y), label, name in zip(coords, labels, names)]
    distinct = {str(label) for label in labels}
    score = None
    if 2 <= len(distinct) < len(vectors):
        score = float(silhouette_score(coords, [str(label) for label in labels]))
    return rows, score


def write_projection_tsv(path, rows: list[dict]) -> None:
    lines = ["x\ty\tlabel\tpoi_id"]
    lines += [f"{r['x']:.6f}\t{r['y']:.6f}\t{r['label']}\t{r['name']}" for r in rows]
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
