"""Utterance and schema encoders.

Both run the same trainable stack (small self-attention by default, a
bidirectional LSTM behind the `bilstm` encoder kind) over token ids and
produce one column per input position. The schema encoder feeds each
element's two description sequences as "[CLS] seq1 [SEP] seq2 [SEP]" and
keeps the final [CLS] column as the element embedding.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import schema as sch
from . import text as tx
from .autodiff import ParamSet, Tensor
from .layers import LSTMCell, SequenceEmbedder, TransformerLayer

SELF_ATTENTION = "self_attention"
BILSTM = "bilstm"


@dataclass
class EncoderConfig:
    vocab_size: int
    hidden: int = 64
    layers: int = 2
    heads: int = 4
    max_len: int = 96
    kind: str = SELF_ATTENTION

    def validate(self):
        if self.layers < 1:
            raise ValueError("encoder needs at least one layer")
        if self.hidden % self.heads:
            raise ValueError(f"hidden {self.hidden} not divisible by heads {self.heads}")
        if self.kind not in (SELF_ATTENTION, BILSTM):
            raise ValueError(f"unknown encoder kind {self.kind!r}")
        if self.kind == BILSTM and self.hidden % 2:
            raise ValueError("bilstm encoder needs an even hidden size")


class SequenceEncoder:
    """Drop-in encoder: token ids + segment ids -> (hidden, N)."""

    def __init__(self, ps: ParamSet, prefix: str, config: EncoderConfig, embedder: SequenceEmbedder | None = None):
        config.validate()
        self.config = config
        self.embedder = embedder or SequenceEmbedder(ps, f"{prefix}.emb", config.vocab_size, config.hidden, config.max_len)
        self.kind = config.kind
        if self.kind == SELF_ATTENTION:
            self.blocks = [
                TransformerLayer(ps, f"{prefix}.layer{i}", config.hidden, config.heads, 2 * config.hidden)
                for i in range(config.layers)
            ]
        else:
            half = config.hidden // 2
            self.fwd = [LSTMCell(ps, f"{prefix}.fwd{i}", config.hidden, half) for i in range(config.layers)]
            self.bwd = [LSTMCell(ps, f"{prefix}.bwd{i}", config.hidden, half) for i in range(config.layers)]

    def __call__(self, token_ids, segment_ids, dropout_p: float, rng: np.random.Generator, training: bool) -> Tensor:
        n = len(token_ids)
        if n > self.config.max_len:
            raise ValueError(f"input of {n} tokens exceeds encoder max_len {self.config.max_len}")
        x = self.embedder(token_ids, segment_ids)
        if self.kind == SELF_ATTENTION:
            for block in self.blocks:
                x = block(x, dropout_p, rng, training)
            return x
        return self._bilstm(x, dropout_p, rng, training)

    def _bilstm(self, x: Tensor, dropout_p: float, rng, training: bool) -> Tensor:
        n = x.data.shape[1]
        half = self.config.hidden // 2
        dtype = x.data.dtype
        for layer, (fw, bw) in enumerate(zip(self.fwd, self.bwd)):
            cols = [ad.narrow(x, 1, i, 1) for i in range(n)]
            zeros = Tensor(np.zeros((half, 1), dtype=dtype))
            h, c = zeros, zeros
            fwd_states = []
            for col in cols:
                h, c = fw(col, h, c)
                fwd_states.append(h)
            h, c = zeros, zeros
            bwd_states: list[Tensor] = [None] * n
            for i in range(n - 1, -1, -1):
                h, c = bw(cols[i], h, c)
                bwd_states[i] = h
            x = ad.concat(
                [ad.concat([fwd_states[i], bwd_states[i]], axis=0) for i in range(n)], axis=1
            )
            x = ad.dropout(x, dropout_p, rng, training)
        return x


def utterance_segments(tokens: list[str]) -> np.ndarray:
    """Segment 0 through the first [SEP] (current utterance), 1 afterwards."""
    segs = np.zeros(len(tokens), dtype=np.int64)
    if tx.SEP in tokens:
        first = tokens.index(tx.SEP)
        segs[first + 1 :] = 1
    return segs


def element_input(pair: tuple[str, str], max_len: int) -> tuple[list[str], np.ndarray]:
    """"[CLS] seq1 [SEP] seq2 [SEP]" token/segment ids for one schema element."""
    t1, t2 = tx.tokenize(pair[0]), tx.tokenize(pair[1])
    tokens = [tx.CLS] + t1 + [tx.SEP] + t2 + [tx.SEP]
    segs = np.array([0] * (len(t1) + 2) + [1] * (len(t2) + 1), dtype=np.int64)
    if len(tokens) > max_len:
        tokens = tokens[: max_len - 1] + [tx.SEP]
        segs = segs[: max_len - 1]
        segs = np.append(segs, 1)
    return tokens, segs


class UtteranceEncoder:
    def __init__(self, ps: ParamSet, prefix: str, config: EncoderConfig, vocab: tx.Vocabulary, embedder=None):
        self.enc = SequenceEncoder(ps, prefix, config, embedder)
        self.vocab = vocab

    def __call__(self, tokens: list[str], dropout_p: float = 0.0, rng=None, training: bool = False) -> Tensor:
        ids = self.vocab.ids(tokens)
        return self.enc(ids, utterance_segments(tokens), dropout_p, rng, training)


class SchemaEncoder:
    def __init__(self, ps: ParamSet, prefix: str, config: EncoderConfig, vocab: tx.Vocabulary, embedder=None):
        self.enc = SequenceEncoder(ps, prefix, config, embedder)
        self.vocab = vocab
        self.max_len = config.max_len

    def encode_element(self, element: sch.Element, dropout_p: float = 0.0, rng=None, training: bool = False) -> Tensor:
        """(hidden, L) full-sequence representation of one element."""
        tokens, segs = element_input(element.pair, self.max_len)
        return self.enc(self.vocab.ids(tokens), segs, dropout_p, rng, training)

    def __call__(
        self,
        table: sch.ElementTable,
        dropout_p: float = 0.0,
        rng=None,
        training: bool = False,
        keep_tokens: bool = False,
    ) -> tuple[Tensor, list[Tensor] | None]:
        """Schema embeddings (hidden, M); optionally the per-element token matrices."""
        cls_cols = []
        token_mats = [] if keep_tokens else None
        for el in table:
            full = self.encode_element(el, dropout_p, rng, training)
            cls_cols.append(ad.narrow(full, 1, 0, 1))
            if keep_tokens:
                token_mats.append(full)
        if not cls_cols:
            raise ValueError("cannot encode an empty element table")
        return ad.concat(cls_cols, axis=1), token_mats


class StaleCacheError(RuntimeError):
    pass


class SchemaCache:
    """Memoized eval-mode schema encodings, invalidated on parameter updates."""

    def __init__(self, encoder: SchemaEncoder, params: ParamSet):
        self.encoder = encoder
        self.params = params
        self.encode_calls = 0
        self._store: dict[tuple, tuple[int, np.ndarray, list[np.ndarray] | None]] = {}

    @staticmethod
    def _key(table: sch.ElementTable, keep_tokens: bool) -> tuple:
        return (tuple(e.key() for e in table), keep_tokens)

    def get(self, table: sch.ElementTable, keep_tokens: bool = False) -> tuple[np.ndarray, list[np.ndarray] | None]:
        key = self._key(table, keep_tokens)
        hit = self._store.get(key)
        if hit is not None and hit[0] == self.params.version:
            return hit[1], hit[2]
        with ad.no_grad():
            emb, toks = self.encoder(table, keep_tokens=keep_tokens)
        self.encode_calls += 1
        entry = (self.params.version, emb.data, [t.data for t in toks] if toks else None)
        self._store[key] = entry
        return entry[1], entry[2]

    def pin(self, table: sch.ElementTable, keep_tokens: bool = False) -> "PinnedSchema":
        emb, toks = self.get(table, keep_tokens)
        return PinnedSchema(self.params, self.params.version, emb, toks)


class PinnedSchema:
    """Frozen handle; using it after a parameter update is an error."""

    def __init__(self, params: ParamSet, version: int, embeddings: np.ndarray, token_mats):
        self._params = params
        self._version = version
        self._embeddings = embeddings
        self._token_mats = token_mats

    @property
    def embeddings(self) -> np.ndarray:
        if self._params.version != self._version:
            raise StaleCacheError(
                f"schema encodings pinned at parameter version {self._version}, now {self._params.version}"
            )
        return self._embeddings

    @property
    def token_mats(self):
        _ = self.embeddings  # reuse the staleness guard
        return self._token_mats
