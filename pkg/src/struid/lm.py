"""Small decoder-only autoregressive model over the corpus vocabulary.

Pre-norm transformer blocks with learned positional embeddings, trained
from scratch with the loss masked to target positions. Generation is
length-normalized beam search constrained to a prefix trie of valid
entity IDs, so every emitted identifier is well-formed by construction.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator

from . import autodiff as ad
from .corpus import TokenSequence, Vocabulary
from .errors import DataError, NumericalError
from .tokenizer import StruId

logger = logging.getLogger(__name__)

MASK_VALUE = -1e30


@dataclass
class LmConfig:
    vocab_size: int
    d_model: int = 128
    n_layers: int = 4
    n_heads: int = 4
    max_len: int = 512
    dropout: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.d_model % self.n_heads != 0:
            raise DataError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")


class DecodingTrie:
    """Prefix trie over the valid target token sequences of one entity type."""

    LEAF = -1

    def __init__(self):
        self.root: dict = {}
        self.size = 0

    @classmethod
    def from_token_paths(cls, paths: list[list[int]]) -> "DecodingTrie":
        trie = cls()
        for local, path in enumerate(paths):
            node = trie.root
            for depth, tok in enumerate(path):
                if cls.LEAF in node:
                    raise DataError("trie path passes through a leaf; ids are not prefix-free")
                node = node.setdefault(tok, {})
            if cls.LEAF in node:
                raise DataError(f"duplicate id path for local {local}")
            if node and any(k != cls.LEAF for k in node):
                raise DataError("id path is a prefix of another; ids are not prefix-free")
            node[cls.LEAF] = local
            trie.size += 1
        return trie

    @classmethod
    def from_struids(cls, ids: list[StruId], vocab: Vocabulary) -> "DecodingTrie":
        return cls.from_token_paths([vocab.struid_tokens(sid) for sid in ids])

    def leaf_count(self) -> int:
        def count(node) -> int:
            return sum(1 if k == self.LEAF else count(child)
                       for k, child in node.items())
        return count(self.root)


@dataclass
class GenerationResult:
    """Ranked complete ids; `short` marks a beam that ran out of paths."""

    items: list[tuple[int, float, tuple[int, ...]]]  # (entity local, score, token path)
    short: bool = False

    def ranked_locals(self) -> list[int]:
        return [local for local, _, _ in self.items]


class SequenceRecommender(BaseEstimator):
    """Next-ID language model with an sklearn-style estimator surface."""

    def __init__(self, d_model: int = 128, n_layers: int = 4, n_heads: int = 4,
                 max_len: int = 512, dropout: float = 0.0, epochs: int = 10,
                 lr: float = 3e-3, batch_size: int = 32, grad_clip: float = 5.0,
                 seed: int = 0):
        self.d_model = d_model
        self.n_layers = n_layers
        self.n_heads = n_heads
        self.max_len = max_len
        self.dropout = dropout
        self.epochs = epochs
        self.lr = lr
        self.batch_size = batch_size
        self.grad_clip = grad_clip
        self.seed = seed

    # -- parameters -----------------------------------------------------------

    def _init_params(self, vocab_size: int, rng: np.random.Generator) -> dict[str, ad.Tensor]:
        d, layers = self.d_model, self.n_layers
        hidden = 4 * d
        params: dict[str, ad.Tensor] = {
            "lm/emb": ad.init_uniform((vocab_size, d), 1, rng),
            "lm/pos": ad.init_uniform((self.max_len, d), 1, rng),
            "lm/final/gain": ad.Tensor(np.ones(d, dtype=np.float32), requires_grad=True),
            "lm/final/bias": ad.Tensor(np.zeros(d, dtype=np.float32), requires_grad=True),
            "lm/out": ad.init_uniform((d, vocab_size), d, rng),
        }
        for i in range(layers):
            params[f"lm/layer{i}/attn_qkv"] = ad.init_uniform((d, 3 * d), d, rng)
            params[f"lm/layer{i}/attn_o"] = ad.init_uniform((d, d), d, rng)
            params[f"lm/layer{i}/ln1/gain"] = ad.Tensor(np.ones(d, dtype=np.float32), requires_grad=True)
            params[f"lm/layer{i}/ln1/bias"] = ad.Tensor(np.zeros(d, dtype=np.float32), requires_grad=True)
            params[f"lm/layer{i}/ln2/gain"] = ad.Tensor(np.ones(d, dtype=np.float32), requires_grad=True)
            params[f"lm/layer{i}/ln2/bias"] = ad.Tensor(np.zeros(d, dtype=np.float32), requires_grad=True)
            params[f"lm/layer{i}/mlp_w1"] = ad.init_uniform((d, hidden), d, rng)
            params[f"lm/layer{i}/mlp_b1"] = ad.Tensor(np.zeros(hidden, dtype=np.float32), requires_grad=True)
            params[f"lm/layer{i}/mlp_w2"] = ad.init_uniform((hidden, d), hidden, rng)
            params[f"lm/layer{i}/mlp_b2"] = ad.Tensor(np.zeros(d, dtype=np.float32), requires_grad=True)
        return params

    def _check_fitted(self):
        if not hasattr(self, "params_"):
            raise DataError("SequenceRecommender is not fitted; call fit first")

    # -- forward ----------------------------------------------------------------

    def _forward(self, ids: np.ndarray, train_rng: np.random.Generator | None = None,
                 attn_sink: list | None = None) -> ad.Tensor:
        """Logits (batch, T, vocab) for a batch of token id rows."""
        p = self.params_
        batch, t = ids.shape
        if t > self.max_len:
            raise DataError(f"sequence length {t} exceeds max_len {self.max_len}")
        d, heads = self.d_model, self.n_heads
        dh = d // heads
        causal = np.triu(np.full((t, t), MASK_VALUE, dtype=np.float32), k=1)
        mask = ad.Tensor(causal)

        x = ad.add(ad.embedding_lookup(p["lm/emb"], ids),
                   ad.embedding_lookup(p["lm/pos"], np.arange(t)))
        for i in range(self.n_layers):
            a = ad.layer_norm(x, p[f"lm/layer{i}/ln1/gain"], p[f"lm/layer{i}/ln1/bias"])
            qkv = ad.reshape(ad.matmul(a, p[f"lm/layer{i}/attn_qkv"]), (batch, t, 3, heads, dh))
            q = ad.transpose(ad.take(qkv, (slice(None), slice(None), 0)), (0, 2, 1, 3))
            k = ad.transpose(ad.take(qkv, (slice(None), slice(None), 1)), (0, 2, 1, 3))
            v = ad.transpose(ad.take(qkv, (slice(None), slice(None), 2)), (0, 2, 1, 3))
            scores = ad.add(ad.scale(ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(dh)),
                            mask)
            attn = ad.softmax(scores, axis=-1)
            if attn_sink is not None:
                attn_sink.append(attn.data)
            ctx = ad.reshape(ad.transpose(ad.matmul(attn, v), (0, 2, 1, 3)), (batch, t, d))
            ctx = ad.matmul(ctx, p[f"lm/layer{i}/attn_o"])
            if train_rng is not None and self.dropout > 0:
                ctx = ad.dropout(ctx, self.dropout, train_rng)
            x = ad.add(x, ctx)

            m = ad.layer_norm(x, p[f"lm/layer{i}/ln2/gain"], p[f"lm/layer{i}/ln2/bias"])
            hdn = ad.relu(ad.add(ad.matmul(m, p[f"lm/layer{i}/mlp_w1"]), p[f"lm/layer{i}/mlp_b1"]))
            out = ad.add(ad.matmul(hdn, p[f"lm/layer{i}/mlp_w2"]), p[f"lm/layer{i}/mlp_b2"])
            if train_rng is not None and self.dropout > 0:
                out = ad.dropout(out, self.dropout, train_rng)
            x = ad.add(x, out)

        x = ad.layer_norm(x, p["lm/final/gain"], p["lm/final/bias"])
        return ad.matmul(x, p["lm/out"])

    def _pack(self, batch: list[TokenSequence], pad_id: int) -> tuple[np.ndarray, np.ndarray]:
        """Padded id matrix plus the label mask over target positions."""
        rows = [seq.input_tokens + seq.target_tokens for seq in batch]
        tmax = max(len(r) for r in rows)
        ids = np.full((len(rows), tmax), pad_id, dtype=np.int64)
        mask = np.zeros((len(rows), tmax - 1), dtype=np.float64)
        for b, (row, seq) in enumerate(zip(rows, batch)):
            ids[b, :len(row)] = row
            start = len(seq.input_tokens)
            mask[b, start - 1:len(row) - 1] = 1.0
        return ids, mask

    def batch_loss(self, batch: list[TokenSequence], train_rng=None) -> ad.Tensor:
        ids, mask = self._pack(batch, self.vocab_.pad_id)
        logits = self._forward(ids, train_rng)
        return ad.cross_entropy(ad.take(logits, (slice(None), slice(0, ids.shape[1] - 1))),
                                ids[:, 1:], mask)

    # -- training ----------------------------------------------------------------

    def fit(self, sequences: list[TokenSequence], vocab: Vocabulary) -> "SequenceRecommender":
        if not sequences:
            raise DataError("empty training corpus")
        longest = max(len(s.input_tokens) + len(s.target_tokens) for s in sequences)
        if longest > self.max_len:
            raise DataError(f"corpus sequence length {longest} exceeds max_len {self.max_len}")
        rng = np.random.default_rng(self.seed)
        self.vocab_ = vocab
        self.config_ = LmConfig(vocab_size=len(vocab), d_model=self.d_model,
                                n_layers=self.n_layers, n_heads=self.n_heads,
                                max_len=self.max_len, dropout=self.dropout, seed=self.seed)
        self.params_ = self._init_params(len(vocab), rng)
        ordered = sorted(self.params_)
        optimizer = ad.Adam([self.params_[k] for k in ordered], lr=self.lr, grad_clip=self.grad_clip)
        self.history_ = []
        last_good = None

        for epoch in range(1, self.epochs + 1):
            order = rng.permutation(len(sequences))
            losses = []
            for lo in range(0, len(order), self.batch_size):
                batch = [sequences[i] for i in order[lo:lo + self.batch_size]]
                optimizer.zero_grad()
                loss = self.batch_loss(batch, train_rng=rng if self.dropout > 0 else None)
                loss.backward()
                optimizer.step()
                losses.append(float(loss.data))
            epoch_loss = float(np.mean(losses))
            self.history_.append({"epoch": epoch, "loss": epoch_loss})
            logger.info("lm epoch %d: loss=%.4f", epoch, epoch_loss)
            if not np.isfinite(epoch_loss):
                if last_good is not None:
                    for k, saved in zip(ordered, last_good):
                        self.params_[k].data = saved
                raise NumericalError(f"non-finite LM loss at epoch {epoch}; restored epoch {epoch - 1}")
            last_good = [self.params_[k].data.copy() for k in ordered]
        return self

    # -- generation ----------------------------------------------------------------

    def generate_topk(self, input_tokens: list[int], trie: DecodingTrie, k: int,
                      beam_width: int | None = None) -> GenerationResult:
        """Trie-constrained beam search, length-normalized scores.

        Ties break lexicographically on the token path, so rankings are
        deterministic. Returns fewer than k items (flagged short) only if
        the trie has fewer reachable completions than requested.
        """
        self._check_fitted()
        beam_width = beam_width if beam_width is not None else max(k, 10)
        if beam_width < k:
            raise DataError(f"beam_width {beam_width} smaller than k {k}")
        prefix = np.asarray(input_tokens, dtype=np.int64)
        beams: list[tuple[float, tuple[int, ...], dict]] = [(0.0, (), trie.root)]
        completed: list[tuple[int, float, tuple[int, ...]]] = []

        with ad.no_grad():
            while beams:
                ids = np.stack([np.concatenate([prefix, np.asarray(path, dtype=np.int64)])
                                for _, path, _ in beams])
                logits = self._forward(ids).data[:, -1, :].astype(np.float64)
                shifted = logits - logits.max(axis=1, keepdims=True)
                logprobs = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))

                candidates: list[tuple[float, tuple[int, ...], dict]] = []
                for (score, path, node), row in zip(beams, logprobs):
                    for tok, child in node.items():
                        if tok == DecodingTrie.LEAF:
                            continue
                        candidates.append((score + float(row[tok]), path + (tok,), child))
                candidates.sort(key=lambda c: (-c[0], c[1]))
                beams = []
                for score, path, node in candidates[:beam_width]:
                    if DecodingTrie.LEAF in node:  # ids are prefix-free: leaves are terminal
                        completed.append((node[DecodingTrie.LEAF], score / len(path), path))
                    else:
                        beams.append((score, path, node))

        completed.sort(key=lambda c: (-c[1], c[2]))
        items = completed[:k]
        return GenerationResult(items=items, short=len(items) < k)

    # -- persistence ------------------------------------------------------------

    def save(self, path) -> None:
        self._check_fitted()
        extra = {"d_model": self.d_model, "n_layers": self.n_layers, "n_heads": self.n_heads,
                 "max_len": self.max_len, "dropout": self.dropout, "epochs": self.epochs,
                 "lr": self.lr, "batch_size": self.batch_size, "grad_clip": self.grad_clip,
                 "vocab_size": len(self.vocab_), "history": self.history_}
        ad.save_checkpoint(path, self.params_, seed=self.seed, step=len(self.history_), extra=extra)

    @classmethod
    def load(cls, path, vocab: Vocabulary) -> "SequenceRecommender":
        tensors, meta = ad.load_checkpoint(path)
        extra = meta["extra"]
        if extra["vocab_size"] != len(vocab):
            raise DataError(f"vocabulary size mismatch: checkpoint {extra['vocab_size']}, got {len(vocab)}")
        model = cls(d_model=extra["d_model"], n_layers=extra["n_layers"], n_heads=extra["n_heads"],
                    max_len=extra["max_len"], dropout=extra["dropout"], epochs=extra["epochs"],
                    lr=extra["lr"], batch_size=extra["batch_size"], grad_clip=extra["grad_clip"],
                    seed=meta["seed"])
        model.vocab_ = vocab
        model.config_ = LmConfig(vocab_size=len(vocab), d_model=extra["d_model"],
                                 n_layers=extra["n_layers"], n_heads=extra["n_heads"],
                                 max_len=extra["max_len"], dropout=extra["dropout"], seed=meta["seed"])
        model.params_ = {k: ad.Tensor(v, requires_grad=True) for k, v in tensors.items()}
        model.history_ = extra["history"]
        return model
