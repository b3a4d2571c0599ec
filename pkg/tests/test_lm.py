import numpy as np
import pytest

from struid import autodiff as ad
from struid.corpus import SPECIALS, TokenSequence, Vocabulary
from struid.errors import DataError
from struid.lm import DecodingTrie, SequenceRecommender

VOCAB = Vocabulary(list(SPECIALS) + [f"time:{b}" for b in range(48)]
                   + [f"poi:{layer}:{k}" for layer in range(3) for k in range(4)])


def poi_token(layer, k):
    return VOCAB.id(f"poi:{layer}:{k}")


def all_paths():
    """64 prefix-free length-3 paths over a 4-way codebook."""
    return [[poi_token(0, a), poi_token(1, b), poi_token(2, c)]
            for a in range(4) for b in range(4) for c in range(4)]


def toy_corpus(n=40, seed=0):
    """Inputs ending in <target>; targets one id path plus EOS."""
    rng = np.random.default_rng(seed)
    paths = all_paths()
    out = []
    for _ in range(n):
        path = paths[int(rng.integers(len(paths)))]
        history = [VOCAB.time_token(int(rng.integers(48))) for _ in range(4)]
        inputs = [VOCAB.id("<bos>"), VOCAB.id("<task_poi>")] + history + [VOCAB.id("<target>")]
        out.append(TokenSequence(task="poi", user=0, position=1,
                                 input_tokens=inputs, target_tokens=path + [VOCAB.eos_id]))
    return out


def small_model(**kw):
    defaults = dict(d_model=32, n_layers=2, n_heads=2, max_len=64, epochs=4,
                    lr=3e-3, batch_size=16, seed=1)
    defaults.update(kw)
    return SequenceRecommender(**defaults)


@pytest.fixture(scope="module")
def fitted():
    return small_model().fit(toy_corpus(), VOCAB)


# -- core model properties ----------------------------------------------------


def test_causality_bitwise(fitted):
    rng = np.random.default_rng(3)
    ids = rng.integers(0, len(VOCAB), size=(2, 12))
    with ad.no_grad():
        base = fitted._forward(ids).data
    mutated = ids.copy()
    mutated[:, 8:] = rng.integers(0, len(VOCAB), size=(2, 4))
    with ad.no_grad():
        changed = fitted._forward(mutated).data
    np.testing.assert_array_equal(changed[:, :8, :], base[:, :8, :])
    assert not np.array_equal(changed[:, 8:, :], base[:, 8:, :])


def test_attention_rows_sum_to_one(fitted):
    ids = np.random.default_rng(0).integers(0, len(VOCAB), size=(2, 10))
    sink = []
    with ad.no_grad():
        fitted._forward(ids, attn_sink=sink)
    assert len(sink) == fitted.n_layers
    for attn in sink:
        np.testing.assert_allclose(attn.sum(axis=-1), 1.0, atol=1e-5)


def test_loss_masks_input_positions(fitted):
    batch = toy_corpus(6, seed=9)
    ids, mask = fitted._pack(batch, VOCAB.pad_id)
    with ad.no_grad():
        logits = fitted._forward(ids)
    base = float(ad.cross_entropy(ad.take(logits, (slice(None), slice(0, ids.shape[1] - 1))),
                                  ids[:, 1:], mask).data)
    # scrambling the labels at masked-out positions must not move the loss
    scrambled = ids.copy()
    label_view = scrambled[:, 1:]
    label_view[mask == 0.0] = (label_view[mask == 0.0] + 7) % len(VOCAB)
    perturbed = float(ad.cross_entropy(ad.take(logits, (slice(None), slice(0, ids.shape[1] - 1))),
                                       scrambled[:, 1:], mask).data)
    assert perturbed == base


def test_training_loss_decreases(fitted):
    assert fitted.history_[-1]["loss"] < fitted.history_[0]["loss"]


def test_memorizes_single_example():
    corpus = [toy_corpus(1, seed=4)[0]] * 8
    model = small_model(epochs=60, lr=5e-3).fit(corpus, VOCAB)
    assert model.history_[-1]["loss"] < 0.01


def test_fit_is_deterministic():
    a = small_model(epochs=2).fit(toy_corpus(), VOCAB)
    b = small_model(epochs=2).fit(toy_corpus(), VOCAB)
    for k in a.params_:
        np.testing.assert_array_equal(a.params_[k].data, b.params_[k].data)


def test_rejects_overlong_corpus():
    seq = TokenSequence(task="poi", user=0, position=1,
                        input_tokens=[1] * 70, target_tokens=[2, VOCAB.eos_id])
    with pytest.raises(DataError, match="max_len"):
        small_model().fit([seq], VOCAB)


def test_save_load_roundtrip(tmp_path, fitted):
    fitted.save(tmp_path / "lm")
    loaded = SequenceRecommender.load(tmp_path / "lm", VOCAB)
    ids = np.random.default_rng(1).integers(0, len(VOCAB), size=(1, 9))
    with ad.no_grad():
        np.testing.assert_array_equal(loaded._forward(ids).data, fitted._forward(ids).data)


# -- trie ----------------------------------------------------------------------


def test_trie_leaf_count_equals_entity_count():
    trie = DecodingTrie.from_token_paths(all_paths())
    assert trie.leaf_count() == 64
    assert trie.size == 64


def test_trie_rejects_prefix_violation():
    with pytest.raises(DataError, match="prefix"):
        DecodingTrie.from_token_paths([[1, 2], [1, 2, 3]])
    with pytest.raises(DataError, match="prefix|leaf"):
        DecodingTrie.from_token_paths([[1, 2, 3], [1, 2]])


def test_trie_variable_depth_with_disambiguators():
    # collision group [5,5] vs a singleton [5,6]: disambiguators keep paths prefix-free
    trie = DecodingTrie.from_token_paths([[5, 5, 0], [5, 5, 1], [5, 6]])
    assert trie.leaf_count() == 3


# -- constrained generation ------------------------------------------------------


def test_single_id_trie_forces_path(fitted):
    trie = DecodingTrie.from_token_paths([all_paths()[17]])
    result = fitted.generate_topk(toy_corpus(1, seed=2)[0].input_tokens, trie, k=1)
    assert result.ranked_locals() == [0]
    assert not result.short


def test_generations_distinct_and_on_trie(fitted):
    trie = DecodingTrie.from_token_paths(all_paths())
    paths = {tuple(p) for p in all_paths()}
    for seed in range(6):
        inputs = toy_corpus(1, seed=seed)[0].input_tokens
        result = fitted.generate_topk(inputs, trie, k=10, beam_width=12)
        got = [p for _, _, p in result.items]
        assert len(set(got)) == len(got) == 10
        assert all(p in paths for p in got)


def test_short_result_flagged(fitted):
    trie = DecodingTrie.from_token_paths(all_paths()[:3])
    result = fitted.generate_topk(toy_corpus(1, seed=5)[0].input_tokens, trie, k=10, beam_width=10)
    assert result.short and len(result.items) == 3


def test_beam_equals_exhaustive_scoring(fitted):
    # with beam width equal to the catalog, top-1 must match scoring every
    # path by full-sequence log-probability (all paths share one length)
    paths = all_paths()
    trie = DecodingTrie.from_token_paths(paths)
    inputs = toy_corpus(1, seed=11)[0].input_tokens

    def full_logprob(path):
        ids = np.asarray([inputs + path], dtype=np.int64)
        with ad.no_grad():
            logits = fitted._forward(ids).data[0].astype(np.float64)
        total = 0.0
        for step, tok in enumerate(path):
            row = logits[len(inputs) - 1 + step]
            row = row - row.max()
            total += float(row[tok] - np.log(np.exp(row).sum()))
        return total

    scores = [(full_logprob(p), tuple(p)) for p in paths]
    scores.sort(key=lambda s: (-s[0], s[1]))
    expected_top = scores[0][1]

    result = fitted.generate_topk(inputs, trie, k=5, beam_width=len(paths))
    assert result.items[0][2] == expected_top


def test_beam_width_smaller_than_k_rejected(fitted):
    trie = DecodingTrie.from_token_paths(all_paths())
    with pytest.raises(DataError, match="beam_width"):
        fitted.generate_topk([1, 2], trie, k=8, beam_width=4)
