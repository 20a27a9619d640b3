"""Full tracker: encoders + attender + decoder behind one loss/predict API.

Variant wiring (selected in RunConfig):
  - attention overall/token: decoder sees both fused representations
  - attention none:          decoder sees the raw encoder outputs
  - schema_only:             (raw utterance, fused schema)
  - utterance_only:          (fused utterance, raw schema)
  - use_schema=false:        schema side is a learned per-element embedding
                             table over the training element table
  - pointer=false:           candidates are a fixed output vocabulary
                             (markers + training elements + words) with
                             learned representations
  - seqlabel:                utterance encoder + per-token BIO head
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import attender as att
from . import autodiff as ad
from . import decoder as dec
from . import dialogue as dlg
from . import encoders as enc
from . import schema as sch
from . import text as tx
from .autodiff import ParamSet, Tensor
from .config import RunConfig


class DataError(ValueError):
    pass


@dataclass
class OutputVocab:
    """Fixed generation vocabulary: markers, training elements, then words."""

    element_keys: list[tuple]
    n_words: int

    @property
    def n_elements(self) -> int:
        return len(self.element_keys)

    def __len__(self) -> int:
        return dlg.N_MARKERS + self.n_elements + self.n_words

    def element_id(self, key: tuple) -> int | None:
        try:
            return dlg.N_MARKERS + self.element_keys.index(key)
        except ValueError:
            return None

    def word_id(self, vocab_id: int) -> int:
        return dlg.N_MARKERS + self.n_elements + vocab_id

    def split(self, symbol: int) -> tuple[str, int]:
        if symbol < dlg.N_MARKERS:
            return ("marker", symbol)
        if symbol < dlg.N_MARKERS + self.n_elements:
            return ("element", symbol - dlg.N_MARKERS)
        return ("word", symbol - dlg.N_MARKERS - self.n_elements)


@dataclass
class SchemaPack:
    """Schema-side tensors for one forward pass."""

    embeddings: Tensor  # (hidden, M)
    token_mats: list[Tensor] | None = None


class Tracker:
    """The trainable model. Construction order fixes parameter initialization."""

    def __init__(
        self,
        cfg: RunConfig,
        vocab: tx.Vocabulary,
        train_table: sch.ElementTable,
    ):
        cfg.validate()
        self.cfg = cfg
        self.vocab = vocab
        self.train_table = train_table
        dtype = np.float32 if cfg.dtype == "float32" else np.float64
        self.params = ParamSet(seed=cfg.seed, dtype=dtype)
        enc_cfg = enc.EncoderConfig(
            vocab_size=len(vocab), hidden=cfg.hidden, layers=cfg.layers,
            heads=cfg.heads, max_len=cfg.max_len, kind=cfg.encoder,
        )
        self.utt_encoder = enc.UtteranceEncoder(self.params, "utt_enc", enc_cfg, vocab)
        self.schema_encoder = None
        self.attender = None
        self.element_embed = None
        self.decoder = None
        self.out_vocab = None
        self.out_embed = None
        self.label_head = None

        if cfg.use_schema:
            shared = self.utt_encoder.enc.embedder if cfg.share_embeddings else None
            self.schema_encoder = enc.SchemaEncoder(self.params, "sch_enc", enc_cfg, vocab, embedder=shared)
            if cfg.attention != att.NONE:
                self.attender = att.Attender(
                    self.params, "attender", cfg.hidden, cfg.attn_dim,
                    token_level=(cfg.attention == att.TOKEN),
                )
        elif not cfg.seqlabel:
            self.element_embed = self.params.param("no_schema.elements", (len(train_table), cfg.hidden))

        if cfg.seqlabel:
            self.labels = ["O"]
            for el in train_table:
                if el.kind == sch.SLOT:
                    self.labels += [f"B-{el.service}.{el.name}", f"I-{el.service}.{el.name}"]
            self.intent_classes: list[tuple | None] = [None] + [
                el.key() for el in train_table if el.kind == sch.INTENT
            ]
            self.label_head = dec.SeqLabelHead(
                self.params, "seqlabel.head", cfg.hidden, len(self.labels), len(self.intent_classes)
            )
        else:
            self.decoder = dec.StateDecoder(self.params, "dec", cfg.hidden, cfg.attn_dim)
            if not cfg.pointer:
                self.out_vocab = OutputVocab([el.key() for el in train_table], len(vocab))
                self.out_embed = self.params.param("no_pointer.out", (len(self.out_vocab), cfg.hidden))

        self.schema_cache = enc.SchemaCache(self.schema_encoder, self.params) if self.schema_encoder else None

    # ------------------------------------------------------------------
    # forward

    def encode_schema_for_training(self, table: sch.ElementTable, rng, training: bool) -> SchemaPack | None:
        """Gradient-carrying schema encodings, shared across a batch."""
        if self.schema_encoder is None:
            return None
        keep = self.cfg.attention == att.TOKEN
        emb, toks = self.schema_encoder(table, self.cfg.dropout, rng, training, keep_tokens=keep)
        return SchemaPack(emb, toks)

    def schema_pack_for_eval(self, table: sch.ElementTable) -> SchemaPack | None:
        if self.schema_cache is None:
            return None
        keep = self.cfg.attention == att.TOKEN
        emb, toks = self.schema_cache.get(table, keep_tokens=keep)
        return SchemaPack(Tensor(emb), [Tensor(t) for t in toks] if toks else None)

    def representations(
        self,
        enc_input: dlg.EncoderInput,
        pack: SchemaPack | None,
        rng=None,
        training: bool = False,
    ) -> tuple[Tensor, Tensor]:
        """(utterance side, schema side) the decoder conditions on."""
        cfg = self.cfg
        utt = self.utt_encoder(enc_input.tokens, cfg.dropout, rng, training)
        if not cfg.use_schema:
            return utt, ad.transpose(self.element_embed)
        assert pack is not None
        if cfg.attention == att.NONE:
            return utt, pack.embeddings
        if cfg.attention == att.TOKEN:
            sim = self.attender.similarity_token(utt, pack.token_mats)
        else:
            sim = self.attender.similarity_overall(utt, pack.embeddings)
        fused = att.fuse(sim, utt, pack.embeddings)
        if cfg.attention == att.SCHEMA_ONLY:
            return utt, fused.schema
        if cfg.attention == att.UTTERANCE_ONLY:
            return fused.utt, pack.embeddings
        return fused.utt, fused.schema

    def _candidates(self, utt_side: Tensor, schema_side: Tensor) -> Tensor:
        if self.cfg.pointer:
            return self.decoder.candidates(schema_side, utt_side)
        return ad.transpose(self.out_embed)

    # ------------------------------------------------------------------
    # targets

    def target_ids(self, example: dlg.DialogueExample, table: sch.ElementTable) -> list[int]:
        """Teacher-forcing target (flat ids after BOS) for one example."""
        seq = dlg.linearize_state(example.gold, example.enc, table)
        if self.cfg.pointer:
            ids = [p.flat(len(table)) for p in seq[1:]]
            width = dlg.N_MARKERS + len(table) + len(example.enc)
            for p, fid in zip(seq[1:], ids):
                if fid >= width:
                    raise DataError(f"example {example.example_id}: pointer {p} outside the vocabulary")
            return ids
        return self._symbol_ids(seq[1:], example, table)

    def _symbol_ids(self, seq: list[dlg.Pointer], example: dlg.DialogueExample, table) -> list[int]:
        out = []
        for p in seq:
            if p.kind == dlg.MARKER:
                out.append(p.idx)
            elif p.kind == dlg.SCHEMA:
                sid = self.out_vocab.element_id(table[p.idx].key())
                if sid is None:
                    raise DataError(
                        f"example {example.example_id}: element {table[p.idx].key()} absent from the output vocabulary"
                    )
                out.append(sid)
            else:
                out.append(self.out_vocab.word_id(self.vocab.id_of(example.enc.tokens[p.idx])))
        return out

    # ------------------------------------------------------------------
    # losses

    def example_loss(
        self,
        example: dlg.DialogueExample,
        table: sch.ElementTable,
        pack: SchemaPack | None,
        rng=None,
        training: bool = False,
    ) -> Tensor:
        """Mean negative log-likelihood over the example's target steps."""
        if self.cfg.seqlabel:
            return self._seqlabel_loss(example, table, rng, training)
        targets = self.target_ids(example, table)
        utt_side, schema_side = self.representations(example.enc, pack, rng, training)
        cand = self._candidates(utt_side, schema_side)
        h, c = self.decoder.initial_state(utt_side)
        prev = ad.narrow(cand, 1, dlg.BOS, 1)
        logps = []
        for target in targets:
            h, c, scores = self.decoder.step(
                prev, h, c, utt_side, schema_side, cand, self.cfg.dropout, rng, training
            )
            logps.append(ad.pick(ad.log_softmax(scores, axis=1), (0, target)))
            prev = ad.narrow(cand, 1, target, 1)
        return ad.scale(ad.add_n(logps), -1.0 / len(targets))

    def batch_loss(self, examples, table, rng=None, training: bool = False) -> Tensor:
        """Mean of per-example losses; schema encodings are shared."""
        pack = self.encode_schema_for_training(table, rng, training)
        losses = [self.example_loss(ex, table, pack, rng, training) for ex in examples]
        return ad.scale(ad.add_n(losses), 1.0 / len(losses))

    # ------------------------------------------------------------------
    # prediction

    def predict(
        self,
        enc_input: dlg.EncoderInput,
        table: sch.ElementTable,
        pack: SchemaPack | None = None,
    ) -> tuple[dlg.StateFrame, int, list[int]]:
        """(frame, malformation count, raw emitted ids) for one turn."""
        if self.cfg.seqlabel:
            return self._seqlabel_predict(enc_input, table)
        with ad.no_grad():
            if pack is None:
                pack = self.schema_pack_for_eval(table)
            utt_side, schema_side = self.representations(enc_input, pack)
            options = dec.DecoderOptions(self.cfg.beam, self.cfg.decode_max_len, self.cfg.constrained)
            if self.cfg.pointer:
                ids = dec.beam_search(
                    self.decoder, utt_side, schema_side, options, table=table, n_tokens=len(enc_input)
                )
                seq = [dlg.marker(dlg.BOS)] + [dlg.Pointer.from_flat(i, len(table)) for i in ids]
                res = dlg.delinearize(seq, enc_input, table)
                return res.frame, res.malformed, ids
            ids = dec.beam_search(
                self.decoder, utt_side, schema_side, options, candidates=ad.transpose(self.out_embed)
            )
            frame, malformed = self.frame_from_symbols(ids, enc_input, table)
            return frame, malformed, ids

    def frame_from_symbols(self, ids: list[int], enc_input, table: sch.ElementTable) -> tuple[dlg.StateFrame, int]:
        """Parse a fixed-vocabulary symbol sequence back into a frame."""
        eval_index = {el.key(): el.index for el in table}
        pointers: list[dlg.Pointer] = [dlg.marker(dlg.BOS)]
        words: list[str] = []
        bad = 0
        frame = dlg.StateFrame()
        open_slot: int | None = None

        def close_span():
            nonlocal words, bad
            if open_slot is not None and words:
                frame.slots[open_slot] = dlg.SlotValue.span(" ".join(words))
            elif words:
                bad += 1
            words = []

        for symbol in ids:
            kind, idx = self.out_vocab.split(symbol)
            if kind == "marker":
                if idx == dlg.EOS:
                    break
                if idx == dlg.VALUE_END:
                    close_span()
                continue
            if kind == "element":
                close_span()
                key = self.out_vocab.element_keys[idx]
                target = eval_index.get(key)
                if target is None:
                    bad += 1  # trained symbol does not exist in this schema
                    open_slot = None
                    continue
                el = table[target]
                if el.kind == sch.INTENT:
                    frame.active_intent = target
                    open_slot = None
                elif el.kind == sch.SLOT:
                    open_slot = target
                else:  # categorical value
                    if open_slot is not None and el.service == table[open_slot].service and el.owning_slot == table[open_slot].name:
                        frame.slots[open_slot] = dlg.SlotValue.categorical(target)
                    else:
                        bad += 1
                    open_slot = None
            else:  # word
                if open_slot is None:
                    bad += 1
                else:
                    words.append(self.vocab.tokens[idx])
        close_span()
        return frame, bad

    # ------------------------------------------------------------------
    # sequence labeling

    def _gold_labels(self, example: dlg.DialogueExample, table) -> tuple[np.ndarray, int]:
        n = len(example.enc)
        labels = np.zeros(n, dtype=np.int64)  # O
        for slot_idx, value in example.gold.slots.items():
            if value.kind != "text":
                continue
            span = dlg.align_value_span(value.text or "", example.enc)
            if span is None:
                continue
            el = table[slot_idx]
            b = self.labels.index(f"B-{el.service}.{el.name}")
            labels[span[0]] = b
            labels[span[0] + 1 : span[1]] = b + 1
        intent = 0
        if example.gold.active_intent is not None:
            key = table[example.gold.active_intent].key()
            intent = self.intent_classes.index(key)
        return labels, intent

    def _seqlabel_loss(self, example, table, rng, training) -> Tensor:
        utt = self.utt_encoder(example.enc.tokens, self.cfg.dropout, rng, training)
        label_logits, intent_logits = self.label_head(utt)
        gold_labels, gold_intent = self._gold_labels(example, table)
        lp = ad.log_softmax(label_logits, axis=0)
        picks = [ad.pick(lp, (int(lab), pos)) for pos, lab in enumerate(gold_labels)]
        picks.append(ad.pick(ad.log_softmax(intent_logits, axis=0), (gold_intent, 0)))
        return ad.scale(ad.add_n(picks), -1.0 / len(picks))

    def predict_labels(self, enc_input: dlg.EncoderInput) -> tuple[list[str], int]:
        """Per-token label names plus the intent class index."""
        with ad.no_grad():
            utt = self.utt_encoder(enc_input.tokens)
            label_logits, intent_logits = self.label_head(utt)
        label_ids = label_logits.data.argmax(axis=0)
        return [self.labels[i] for i in label_ids], int(intent_logits.data.argmax())

    def _seqlabel_predict(self, enc_input, table) -> tuple[dlg.StateFrame, int, list[int]]:
        names, intent_cls = self.predict_labels(enc_input)
        frame, bad = frame_from_bio(names, enc_input, table)
        if intent_cls > 0:
            key = self.intent_classes[intent_cls]
            try:
                frame.active_intent = table.index_of(*_key_to_args(key))
            except KeyError:
                bad += 1
        return frame, bad, []

    # ------------------------------------------------------------------
    # persistence helpers

    def state_arrays(self) -> dict[str, np.ndarray]:
        return self.params.state_arrays()

    def load_arrays(self, arrays: dict[str, np.ndarray]):
        self.params.load_arrays(arrays)


def _key_to_args(key: tuple):
    kind, service, owning_slot, name = key
    return kind, service, name, (owning_slot or None)


def frame_from_bio(labels: list[str], enc_input: dlg.EncoderInput, table: sch.ElementTable) -> tuple[dlg.StateFrame, int]:
    """Decode BIO labels to span assignments; returns (frame, violations)."""
    frame = dlg.StateFrame()
    bad = 0
    open_name = None
    start = 0
    for pos, lab in enumerate(labels + ["O"]):
        if lab.startswith("B-"):
            if open_name is not None:
                _close_bio(frame, open_name, start, pos, enc_input, table)
            open_name = lab[2:]
            start = pos
        elif lab.startswith("I-"):
            if open_name != lab[2:]:
                bad += 1  # I- without matching B-
                if open_name is not None:
                    _close_bio(frame, open_name, start, pos, enc_input, table)
                open_name = None
        else:
            if open_name is not None:
                _close_bio(frame, open_name, start, pos, enc_input, table)
            open_name = None
    return frame, bad


def _close_bio(frame, name: str, start: int, end: int, enc_input, table):
    service, slot = name.split(".", 1)
    try:
        slot_idx = table.index_of(sch.SLOT, service, slot)
    except KeyError:
        return
    text = enc_input.span_text(start, end)
    if text:
        frame.slots[slot_idx] = dlg.SlotValue.span(text)
