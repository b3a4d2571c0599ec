import calendar

import numpy as np
import pytest

from struid.corpus import (
    SPECIALS,
    CorpusBundle,
    TokenSequence,
    build_corpus,
    build_vocabulary,
    decode_example,
    read_corpus_jsonl,
    time_bucket,
    top5_preference,
    write_corpus_jsonl,
)
from struid.errors import DataError
from struid.ingest import assign_regions, collect_poi_meta, split_chronological
from struid.kg import ENTITY_TYPES, build_kg
from struid.synthcity import SynthCityConfig, generate_city
from struid.tokenizer import StruId


def fake_ids(graph, levels=3, k=4):
    """Deterministic StruIds without training; locals 0/1 share a path."""
    ids = {}
    for t in ENTITY_TYPES:
        n = graph.count(t)
        if n == 0:
            continue
        rows = []
        for local in range(n):
            if local in (0, 1) and n >= 2:
                rows.append(StruId(t, (0, 0, 0)[:levels], disambiguator=local))
            else:
                path = tuple((local // (k ** layer)) % k for layer in range(levels))
                rows.append(StruId(t, path))
        ids[t] = rows
    return ids


@pytest.fixture(scope="module")
def city():
    events = generate_city(SynthCityConfig(n_users=8, n_regions=2, pois_per_region=10,
                                           visits_per_user=24, regularity=0.6, seed=4))
    split = split_chronological(events)
    _, region_map = assign_regions(events, 2)
    graph = build_kg(split, collect_poi_meta(events), region_map, d_km=0.2)
    return split, graph, fake_ids(graph)


def test_top5_by_count_then_index():
    assert top5_preference([0, 0, 0, 5]) == [0, 5]


def test_top5_tiebreak_by_index():
    assert top5_preference([6, 4, 2, 9, 0, 8, 3]) == [0, 2, 3, 4, 6]


def test_top5_matches_counting_oracle():
    rng = np.random.default_rng(9)
    visits = [int(v) for v in rng.integers(0, 12, size=200)]
    got = top5_preference(visits)
    counts = {p: visits.count(p) for p in set(visits)}
    expected = sorted(counts, key=lambda p: (-counts[p], p))[:5]
    assert got == expected


def test_top5_empty():
    assert top5_preference([]) == []


def test_time_bucket_saturday_14():
    # 2021-06-05 was a Saturday
    ts = calendar.timegm((2021, 6, 5, 14, 30, 0, 0, 0, 0))
    assert time_bucket(ts) == 24 + 14


def test_time_bucket_weekday():
    ts = calendar.timegm((2021, 6, 7, 7, 5, 0, 0, 0, 0))  # Monday
    assert time_bucket(ts) == 7


def test_train_example_count_matches_counting_oracle(city):
    split, graph, ids = city
    bundle = build_corpus(split, graph, ids, window=6)
    for task in bundle.tasks():
        got = len(bundle.part(task, "train"))
        expected = sum(max(0, len(evts) - 1) for evts in split.train.values())
        assert got == expected
        assert len(bundle.part(task, "valid")) == sum(len(v) for v in split.valid.values())
        assert len(bundle.part(task, "test")) == sum(len(v) for v in split.test.values())


def test_three_train_events_two_examples(city):
    _, graph, ids = city
    from struid.ingest import CheckInEvent, DatasetSplit
    poi_raw = graph.entities["poi"][0]
    user_raw = graph.entities["user"][0]
    meta_lat = 40.0
    events = [CheckInEvent(user_raw, poi_raw, meta_lat, 9.0, "c", t) for t in (10, 20, 30)]
    split = DatasetSplit(train={user_raw: events}, valid={user_raw: []}, test={user_raw: []})
    bundle = build_corpus(split, graph, ids, window=4)
    assert len(bundle.part("poi", "train")) == 2


def test_sequences_respect_length_bound(city):
    split, graph, ids = city
    bundle = build_corpus(split, graph, ids, window=6)
    from struid.corpus import CorpusBuilder
    bound = CorpusBuilder(split, graph, ids, window=6).max_len(3)
    for task in bundle.tasks():
        for part in ("train", "valid", "test"):
            for seq in bundle.part(task, part):
                assert len(seq.input_tokens) + len(seq.target_tokens) <= bound
                assert seq.input_tokens[-1] == bundle.vocab.id("<target>")
                assert seq.target_tokens[-1] == bundle.vocab.eos_id


def test_target_is_single_id_plus_eos(city):
    split, graph, ids = city
    bundle = build_corpus(split, graph, ids, window=6)
    for seq in bundle.part("poi", "train")[:50]:
        decoded = decode_example(bundle.vocab, seq)
        assert all(tok.startswith("poi:") for tok in decoded["target_tokens"])


def test_roundtrip_recovers_history_and_target(city):
    split, graph, ids = city
    window = 5
    bundle = build_corpus(split, graph, ids, window=window)
    id_lookup = {t: {sid.key(): local for local, sid in enumerate(rows)}
                 for t, rows in ids.items()}

    def resolve(tokens, entity_type):
        path, disamb = [], None
        for tok in tokens:
            _, a, b = tok.split(":")
            if a == "d":
                disamb = int(b)
            else:
                path.append(int(b))
        return id_lookup[entity_type][(tuple(path), disamb)]

    for part in ("train", "test"):
        for seq in bundle.part("poi", part)[:40]:
            decoded = decode_example(bundle.vocab, seq)
            user_raw = graph.entities["user"][seq.user]
            timeline = (split.train[user_raw] + split.valid[user_raw] + split.test[user_raw])
            target_event = timeline[seq.position]
            expected_history = timeline[max(0, seq.position - window):seq.position]

            assert resolve(decoded["user_tokens"], "user") == seq.user
            assert resolve(decoded["target_tokens"], "poi") == graph.local_of("poi", target_event.poi_id)
            assert len(decoded["history"]) == len(expected_history)
            for (bucket, toks), event in zip(decoded["history"], expected_history):
                assert bucket == time_bucket(event.timestamp)
                poi_tokens = [t for t in toks if t.startswith("poi:")]
                assert resolve(poi_tokens, "poi") == graph.local_of("poi", event.poi_id)
                # histories never include the target or anything after it
                assert event.timestamp <= target_event.timestamp


def test_category_task_history_has_no_poi_tokens(city):
    split, graph, ids = city
    bundle = build_corpus(split, graph, ids, window=6)
    for seq in bundle.part("category", "train")[:20]:
        decoded = decode_example(bundle.vocab, seq)
        for _, toks in decoded["history"]:
            assert all(tok.startswith("category:") for tok in toks)
        assert all(tok.startswith("category:") for tok in decoded["target_tokens"])


def test_vocabulary_stable_and_roundtrips(tmp_path, city):
    _, _, ids = city
    v1 = build_vocabulary(ids)
    v2 = build_vocabulary(ids)
    assert v1.tokens == v2.tokens
    v1.save(tmp_path / "vocab.json")
    from struid.corpus import Vocabulary
    loaded = Vocabulary.load(tmp_path / "vocab.json")
    assert loaded.tokens == v1.tokens
    assert loaded.pad_id == 0


def test_corpus_jsonl_roundtrip(tmp_path, city):
    split, graph, ids = city
    bundle = build_corpus(split, graph, ids, window=4)
    rows = bundle.part("poi", "train")
    write_corpus_jsonl(tmp_path / "c.jsonl", rows)
    loaded = read_corpus_jsonl(tmp_path / "c.jsonl")
    assert loaded == rows


def test_training_sequences_shuffle_deterministic(city):
    split, graph, ids = city
    bundle = build_corpus(split, graph, ids, window=4)
    a = bundle.training_sequences(seed=5)
    b = bundle.training_sequences(seed=5)
    assert a == b
    assert len(a) == sum(len(bundle.part(t, "train")) for t in bundle.tasks())


# -- ablation variants ---------------------------------------------------------


def test_wo_pref_removes_marker(city):
    split, graph, ids = city
    bundle = build_corpus(split, graph, ids, window=4, variant="wo_pref")
    pref_id = bundle.vocab.id("<pref>")
    for task in bundle.tasks():
        for seq in bundle.part(task, "train"):
            assert pref_id not in seq.input_tokens


def test_wo_seq_removes_history(city):
    split, graph, ids = city
    bundle = build_corpus(split, graph, ids, window=4, variant="wo_seq")
    hist_id = bundle.vocab.id("<hist>")
    for seq in bundle.part("poi", "train"):
        assert hist_id not in seq.input_tokens


def test_wo_regcat_keeps_only_poi_task(city):
    split, graph, ids = city
    bundle = build_corpus(split, graph, ids, window=4, variant="wo_regcat")
    assert bundle.tasks() == ["poi"]
    assert build_corpus(split, graph, ids, window=4, variant="wo_reg").tasks() == ["poi", "category"]
    assert build_corpus(split, graph, ids, window=4, variant="wo_cat").tasks() == ["poi", "region"]


def test_wo_struid_vocabulary_counting_oracle(city):
    split, graph, ids = city
    bundle = build_corpus(split, graph, ids, window=4, variant="wo_struid")
    expected = len(SPECIALS) + 48 + sum(graph.count(t) for t in ENTITY_TYPES)
    assert len(bundle.vocab) == expected
    # targets are single random ids plus EOS
    for seq in bundle.part("poi", "train")[:10]:
        assert len(seq.target_tokens) == 2
        assert bundle.vocab.describe(seq.target_tokens[0]).startswith("rid:poi:")


def test_unknown_variant_fatal(city):
    split, graph, ids = city
    with pytest.raises(DataError, match="variant"):
        build_corpus(split, graph, ids, window=4, variant="wo_everything")
