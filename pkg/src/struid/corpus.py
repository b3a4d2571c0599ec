"""Multi-behavior prediction corpora over a closed token vocabulary.

Each example is one prompt: task marker, the user's ID, their top-5
preference entries, a timed history window, then a TARGET marker; the
target block is the next event's POI / category / region ID followed by
EOS. Compact structured tokens stand in for the natural-language prompt
text, since the downstream model is trained from scratch and prose
carries no pretrained meaning.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError
from .ingest import CheckInEvent, DatasetSplit
from .kg import ENTITY_TYPES, KnowledgeGraph
from .tokenizer import StruId

TASKS = ("poi", "category", "region")
VARIANTS = ("full", "wo_struid", "wo_reg", "wo_cat", "wo_regcat", "wo_pref", "wo_seq")

SPECIALS = ("<pad>", "<bos>", "<eos>", "<sep>", "<task_poi>", "<task_cat>", "<task_reg>",
            "<user>", "<pref>", "<hist>", "<time>", "<target>")
TASK_MARKERS = {"poi": "<task_poi>", "category": "<task_cat>", "region": "<task_reg>"}
N_TIME_BUCKETS = 48  # weekend flag x hour of day
PREFERENCE_SIZE = 5


def time_bucket(timestamp: int) -> int:
    """Weekend flag times 24 plus UTC hour-of-day."""
    tm = time.gmtime(timestamp)
    return (24 if tm.tm_wday >= 5 else 0) + tm.tm_hour


@dataclass
class Vocabulary:
    """Closed token set: specials, time buckets, and per-entity ID tokens."""

    tokens: list[str]
    index: dict[str, int] = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if not self.index:
            self.index = {tok: i for i, tok in enumerate(self.tokens)}
        if len(self.index) != len(self.tokens):
            raise DataError("duplicate tokens in vocabulary")

    def __len__(self):
        return len(self.tokens)

    def id(self, token: str) -> int:
        try:
            return self.index[token]
        except KeyError:
            raise DataError(f"token not in vocabulary: {token!r}") from None

    @property
    def pad_id(self) -> int:
        return self.id("<pad>")

    @property
    def eos_id(self) -> int:
        return self.id("<eos>")

    def time_token(self, bucket: int) -> int:
        return self.id(f"time:{bucket}")

    def struid_tokens(self, sid: StruId) -> list[int]:
        out = [self.id(f"{sid.entity_type}:{layer}:{idx}") for layer, idx in enumerate(sid.indices)]
        if sid.disambiguator is not None:
            out.append(self.id(f"{sid.entity_type}:d:{sid.disambiguator}"))
        return out

    def rid_token(self, entity_type: str, rid: int) -> int:
        return self.id(f"rid:{entity_type}:{rid}")

    def describe(self, token_id: int) -> str:
        return self.tokens[token_id]

    def to_json(self) -> dict:
        return {"format": "struid-vocab-v1", "tokens": list(self.tokens)}

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), sort_keys=True))

    @classmethod
    def from_json(cls, obj: dict) -> "Vocabulary":
        if obj.get("format") != "struid-vocab-v1":
            raise DataError("not a serialized vocabulary")
        return cls(tokens=list(obj["tokens"]))

    @classmethod
    def load(cls, path) -> "Vocabulary":
        return cls.from_json(json.loads(Path(path).read_text()))


def build_vocabulary(ids: dict[str, list[StruId]]) -> Vocabulary:
    """Dense, stable vocabulary covering every assigned StruId."""
    tokens = list(SPECIALS)
    tokens += [f"time:{b}" for b in range(N_TIME_BUCKETS)]
    for t in ENTITY_TYPES:
        if t not in ids:
            continue
        levels = len(ids[t][0].indices)
        per_layer_max = [0] * levels
        disamb_max = -1
        for sid in ids[t]:
            for layer, idx in enumerate(sid.indices):
                per_layer_max[layer] = max(per_layer_max[layer], idx)
            if sid.disambiguator is not None:
                disamb_max = max(disamb_max, sid.disambiguator)
        for layer in range(levels):
            tokens += [f"{t}:{layer}:{k}" for k in range(per_layer_max[layer] + 1)]
        tokens += [f"{t}:d:{d}" for d in range(disamb_max + 1)]
    return Vocabulary(tokens)


def build_rid_vocabulary(graph: KnowledgeGraph, seed: int) -> tuple[Vocabulary, dict[str, list[int]]]:
    """Fresh single-token-per-entity vocabulary with random id assignment."""
    rng = np.random.default_rng(seed)
    tokens = list(SPECIALS) + [f"time:{b}" for b in range(N_TIME_BUCKETS)]
    assignment: dict[str, list[int]] = {}
    for t in ENTITY_TYPES:
        n = graph.count(t)
        perm = rng.permutation(n)
        assignment[t] = [int(p) for p in perm]
        tokens += [f"rid:{t}:{k}" for k in range(n)]
    return Vocabulary(tokens), assignment


@dataclass
class TokenSequence:
    """One serialized training/evaluation example."""

    task: str
    user: int                  # local user index
    position: int              # target position within the user's timeline
    input_tokens: list[int]
    target_tokens: list[int]   # one entity id then EOS

    def to_obj(self) -> dict:
        return {"task": self.task, "user": self.user, "position": self.position,
                "input_ids": self.input_tokens, "target_ids": self.target_tokens}

    @classmethod
    def from_obj(cls, obj: dict) -> "TokenSequence":
        return cls(task=obj["task"], user=obj["user"], position=obj["position"],
                   input_tokens=list(obj["input_ids"]), target_tokens=list(obj["target_ids"]))


def top5_preference(poi_visits: list[int], k: int = PREFERENCE_SIZE) -> list[int]:
    """Most frequently visited POI locals, ties to the lower index."""
    counts: dict[int, int] = {}
    for p in poi_visits:
        counts[p] = counts.get(p, 0) + 1
    ranked = sorted(counts, key=lambda p: (-counts[p], p))
    return ranked[:k]


class CorpusBuilder:
    """Serializes one dataset split + ID assignment into task corpora."""

    def __init__(self, split: DatasetSplit, graph: KnowledgeGraph,
                 ids: dict[str, list[StruId]], window: int = 16, seed: int = 0):
        if window < 1:
            raise DataError(f"history window must be >= 1, got {window}")
        self.split = split
        self.graph = graph
        self.ids = ids
        self.window = window
        self.seed = seed
        self._poi_cat = {int(p): int(c) for p, c in graph.triples["categorized"]}
        self._poi_reg = {int(p): int(r) for p, r in graph.triples["located"]}

    # -- token plumbing -------------------------------------------------------

    def _entity_tokens(self, vocab: Vocabulary, entity_type: str, local: int,
                       rid_assignment: dict[str, list[int]] | None) -> list[int]:
        if rid_assignment is not None:
            return [vocab.rid_token(entity_type, rid_assignment[entity_type][local])]
        return vocab.struid_tokens(self.ids[entity_type][local])

    def _event_locals(self, e: CheckInEvent) -> tuple[int, int, int]:
        poi = self.graph.local_of("poi", e.poi_id)
        return poi, self._poi_cat[poi], self._poi_reg[poi]

    def max_len(self, vocab_levels: int) -> int:
        """Upper bound on sequence length; the builder asserts it."""
        id_len = vocab_levels + 1  # layers plus optional disambiguator
        return (len(SPECIALS) + PREFERENCE_SIZE * 3 * id_len
                + self.window * (1 + 3 * id_len) + id_len)

    # -- example emission -----------------------------------------------------

    def build_examples(self, task: str, variant: str = "full",
                       vocab: Vocabulary | None = None,
                       rid_assignment: dict[str, list[int]] | None = None) -> dict[str, list[TokenSequence]]:
        """Examples per split part for one task, deterministically ordered."""
        if task not in TASKS:
            raise DataError(f"unknown task: {task!r}")
        if variant not in VARIANTS:
            raise DataError(f"unknown ablation variant: {variant!r}")
        vocab = vocab if vocab is not None else build_vocabulary(self.ids)
        target_type = {"poi": "poi", "category": "category", "region": "region"}[task]
        with_pref = variant != "wo_pref"
        with_hist = variant != "wo_seq"
        levels = max(len(self.ids[t][0].indices) for t in self.ids) if rid_assignment is None else 0
        bound = self.max_len(levels if rid_assignment is None else 0)

        out: dict[str, list[TokenSequence]] = {"train": [], "valid": [], "test": []}
        for user_raw in self.split.users():
            user_local = self.graph.local_of("user", user_raw)
            train_events = self.split.train.get(user_raw, [])
            timeline = (
                [(e, "train") for e in train_events]
                + [(e, "valid") for e in self.split.valid.get(user_raw, [])]
                + [(e, "test") for e in self.split.test.get(user_raw, [])]
            )
            pref = top5_preference([self.graph.local_of("poi", e.poi_id) for e in train_events])

            prefix: list[int] = [vocab.id("<bos>"), vocab.id(TASK_MARKERS[task]), vocab.id("<user>")]
            prefix += self._entity_tokens(vocab, "user", user_local, rid_assignment)
            if with_pref:
                prefix.append(vocab.id("<pref>"))
                for p in pref:
                    prefix += self._entity_tokens(vocab, "category", self._poi_cat[p], rid_assignment)
                    prefix += self._entity_tokens(vocab, "region", self._poi_reg[p], rid_assignment)
                    prefix += self._entity_tokens(vocab, "poi", p, rid_assignment)
            prefix.append(vocab.id("<sep>"))

            for pos in range(1, len(timeline)):
                target_event, part = timeline[pos]
                history = timeline[max(0, pos - self.window):pos]
                if not history:
                    continue
                tokens = list(prefix)
                if with_hist:
                    tokens.append(vocab.id("<hist>"))
                    for e, _ in history:
                        poi, cat, reg = self._event_locals(e)
                        tokens.append(vocab.time_token(time_bucket(e.timestamp)))
                        if task == "poi":
                            tokens += self._entity_tokens(vocab, "category", cat, rid_assignment)
                            tokens += self._entity_tokens(vocab, "region", reg, rid_assignment)
                            tokens += self._entity_tokens(vocab, "poi", poi, rid_assignment)
                        elif task == "category":
                            tokens += self._entity_tokens(vocab, "category", cat, rid_assignment)
                        else:
                            tokens += self._entity_tokens(vocab, "region", reg, rid_assignment)
                tokens.append(vocab.id("<target>"))

                poi, cat, reg = self._event_locals(target_event)
                target_local = {"poi": poi, "category": cat, "region": reg}[task]
                target = self._entity_tokens(vocab, target_type, target_local, rid_assignment)
                target = target + [vocab.eos_id]
                if len(tokens) + len(target) > bound:
                    raise DataError(f"sequence exceeds the declared bound {bound}")
                out[part].append(TokenSequence(task=task, user=user_local, position=pos,
                                               input_tokens=tokens, target_tokens=target))
        return out


@dataclass
class CorpusBundle:
    """Everything the sequence model consumes for one ablation variant."""

    variant: str
    vocab: Vocabulary
    examples: dict[str, dict[str, list[TokenSequence]]]  # task -> part -> examples
    rid_assignment: dict[str, list[int]] | None = None

    def tasks(self) -> list[str]:
        return [t for t in TASKS if t in self.examples]

    def training_sequences(self, seed: int = 0) -> list[TokenSequence]:
        """All tasks' train examples, concatenated and shuffled (fixed seed)."""
        rows = [ex for task in self.tasks() for ex in self.examples[task]["train"]]
        order = np.random.default_rng(seed).permutation(len(rows))
        return [rows[i] for i in order]

    def part(self, task: str, part: str) -> list[TokenSequence]:
        return self.examples[task][part]


def build_corpus(split: DatasetSplit, graph: KnowledgeGraph, ids: dict[str, list[StruId]],
                 window: int = 16, variant: str = "full", seed: int = 0) -> CorpusBundle:
    """Build the multi-behavior corpus bundle for one ablation variant."""
    if variant not in VARIANTS:
        raise DataError(f"unknown ablation variant: {variant!r}")
    builder = CorpusBuilder(split, graph, ids, window=window, seed=seed)
    rid_assignment = None
    if variant == "wo_struid":
        vocab, rid_assignment = build_rid_vocabulary(graph, seed)
    else:
        vocab = build_vocabulary(ids)

    task_list = list(TASKS)
    if variant in ("wo_reg", "wo_regcat"):
        task_list.remove("region")
    if variant in ("wo_cat", "wo_regcat"):
        task_list.remove("category")

    examples = {task: builder.build_examples(task, variant=variant, vocab=vocab,
                                             rid_assignment=rid_assignment)
                for task in task_list}
    return CorpusBundle(variant=variant, vocab=vocab, examples=examples,
                        rid_assignment=rid_assignment)


def ablation_variants(split: DatasetSplit, graph: KnowledgeGraph, ids: dict[str, list[StruId]],
                      variant: str, window: int = 16, seed: int = 0) -> CorpusBundle:
    """The Table-3-style corpus variant; unknown names are fatal."""
    return build_corpus(split, graph, ids, window=window, variant=variant, seed=seed)


# -- round trip ----------------------------------------------------------------


def decode_example(vocab: Vocabulary, seq: TokenSequence) -> dict:
    """Recover the structured content of an emitted example.

    Returns the user id path, preference entries, history entries (time
    bucket plus id paths), and the target path, as token strings grouped
    per field.
    """
    toks = [vocab.describe(t) for t in seq.input_tokens]
    if toks[0] != "<bos>" or toks[-1] != "<target>":
        raise DataError("malformed example framing")
    task = {v: k for k, v in TASK_MARKERS.items()}[toks[1]]

    def grab(start: int, stops: set[str]) -> tuple[list[str], int]:
        out = []
        i = start
        while i < len(toks) and toks[i] not in stops:
            out.append(toks[i])
            i += 1
        return out, i

    if toks[2] != "<user>":
        raise DataError("missing user marker")
    user_tokens, i = grab(3, {"<pref>", "<sep>"})
    pref_tokens: list[str] = []
    if toks[i] == "<pref>":
        pref_tokens, i = grab(i + 1, {"<sep>"})
    if toks[i] != "<sep>":
        raise DataError("missing separator")
    i += 1
    history: list[tuple[int, list[str]]] = []
    if i < len(toks) - 1 and toks[i] == "<hist>":
        i += 1
        current: list[str] | None = None
        bucket = -1
        while i < len(toks) - 1:
            tok = toks[i]
            if tok.startswith("time:"):
                if current is not None:
                    history.append((bucket, current))
                bucket = int(tok.split(":")[1])
                current = []
            else:
                current.append(tok)
            i += 1
        if current is not None:
            history.append((bucket, current))
    target_tokens = [vocab.describe(t) for t in seq.target_tokens]
    if target_tokens[-1] != "<eos>":
        raise DataError("target must end with EOS")
    return {"task": task, "user_tokens": user_tokens, "pref_tokens": pref_tokens,
            "history": history, "target_tokens": target_tokens[:-1]}


def write_corpus_jsonl(path, sequences: list[TokenSequence]) -> None:
    with open(path, "w") as fh:
        for seq in sequences:
            fh.write(json.dumps(seq.to_obj(), sort_keys=True) + "\n")


def read_corpus_jsonl(path) -> list[TokenSequence]:
    out = []
    for line in Path(path).read_text().splitlines():
        if line.strip():
            out.append(TokenSequence.from_obj(json.loads(line)))
    return out


def save_bundle(directory, bundle: CorpusBundle) -> list[str]:
    """Persist a corpus bundle; returns the written file names."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    bundle.vocab.save(directory / "vocab.json")
    names = ["vocab.json", "meta.json"]
    for task in bundle.tasks():
        for part in ("train", "valid", "test"):
            name = f"{task}_{part}.jsonl"
            write_corpus_jsonl(directory / name, bundle.part(task, part))
            names.append(name)
    meta = {"variant": bundle.variant, "tasks": bundle.tasks(),
            "rid_assignment": bundle.rid_assignment}
    (directory / "meta.json").write_text(json.dumps(meta, sort_keys=True))
    return names


def load_bundle(directory) -> CorpusBundle:
    directory = Path(directory)
    meta = json.loads((directory / "meta.json").read_text())
    vocab = Vocabulary.load(directory / "vocab.json")
    examples = {task: {part: read_corpus_jsonl(directory / f"{task}_{part}.jsonl")
                       for part in ("train", "valid", "test")}
                for task in meta["tasks"]}
    return CorpusBundle(variant=meta["variant"], vocab=vocab, examples=examples,
                        rid_assignment=meta["rid_assignment"])
