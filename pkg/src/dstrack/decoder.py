"""LSTM state decoder with additive attention and pointer generation.

Each step attends over the fused utterance and schema representations,
feeds [previous-item representation; utterance context; schema context]
into an LSTM, and scores every pointer candidate with a bilinear-tanh
scorer. Candidates are the four markers, the schema elements (columns of
the schema representations) and the utterance token positions (columns of
the utterance representations).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import dialogue as dlg
from . import schema as sch
from .autodiff import ParamSet, Tensor
from .layers import LSTMCell, Linear


class AdditiveAttention:
    """score(k) = v . tanh(Wq query + Wk key_k); context = values @ softmax."""

    def __init__(self, ps: ParamSet, prefix: str, query_dim: int, key_dim: int, attn_dim: int):
        self.v = ps.param(f"{prefix}.v", (attn_dim, 1))
        self.wq = ps.param(f"{prefix}.wq", (attn_dim, query_dim))
        self.wk = ps.param(f"{prefix}.wk", (attn_dim, key_dim))

    def __call__(self, query: Tensor, keys: Tensor, values: Tensor) -> Tensor:
        return self.batched(query, keys, values)

    def batched(self, queries: Tensor, keys: Tensor, values: Tensor) -> Tensor:
        """(q, N) queries against (k, K) keys -> (h, N) contexts."""
        if keys.data.shape[1] == 0:
            raise ad.ShapeError("additive attention over zero keys")
        scores = ad.additive_scores(self.v, ad.matmul(self.wq, queries), ad.matmul(self.wk, keys))  # (N, K)
        weights = ad.softmax(scores, axis=1)
        return ad.matmul(values, ad.transpose(weights))


@dataclass
class DecoderOptions:
    beam_size: int = 5
    max_len: int = 48
    constrained: bool = False


class StateDecoder:
    def __init__(self, ps: ParamSet, prefix: str, hidden: int, attn_dim: int):
        self.hidden = hidden
        self.markers = ps.param(f"{prefix}.markers", (dlg.N_MARKERS, hidden))
        self.utt_attn = AdditiveAttention(ps, f"{prefix}.utt_attn", hidden, hidden, attn_dim)
        self.sch_attn = AdditiveAttention(ps, f"{prefix}.sch_attn", hidden, hidden, attn_dim)
        self.lstm = LSTMCell(ps, f"{prefix}.lstm", 3 * hidden, hidden)
        self.init_h = Linear(ps, f"{prefix}.init_h", hidden, hidden)
        self.init_c = Linear(ps, f"{prefix}.init_c", hidden, hidden)
        self.q = ps.param(f"{prefix}.score.q", (attn_dim, 1))
        self.u1 = ps.param(f"{prefix}.score.u1", (attn_dim, hidden))
        self.u2 = ps.param(f"{prefix}.score.u2", (attn_dim, hidden))

    def initial_state(self, utt_repr: Tensor) -> tuple[Tensor, Tensor]:
        """Ground h0/c0 in the [CLS] column of the utterance representations."""
        cls_col = ad.narrow(utt_repr, 1, 0, 1)
        return ad.tanh(self.init_h(cls_col)), ad.tanh(self.init_c(cls_col))

    def candidates(self, schema_repr: Tensor, utt_repr: Tensor) -> Tensor:
        """(hidden, markers + M + N) pointer-candidate representations."""
        return ad.concat([ad.transpose(self.markers), schema_repr, utt_repr], axis=1)

    def step(
        self,
        prev_repr: Tensor,
        h: Tensor,
        c: Tensor,
        utt_repr: Tensor,
        schema_repr: Tensor,
        cand: Tensor,
        dropout_p: float = 0.0,
        rng: np.random.Generator | None = None,
        training: bool = False,
    ) -> tuple[Tensor, Tensor, Tensor]:
        """One decode step; returns (h, c, scores over candidates (1, W))."""
        if cand.data.shape[0] != self.hidden:
            raise ad.ShapeError(
                f"candidate width {cand.data.shape[0]} != decoder hidden {self.hidden}"
            )
        u = self.utt_attn(h, utt_repr, utt_repr)
        s = self.sch_attn(h, schema_repr, schema_repr)
        x = ad.concat([prev_repr, u, s], axis=0)
        x = ad.dropout(x, dropout_p, rng, training)
        h2, c2 = self.lstm(x, h, c)
        scores = ad.additive_scores(self.q, ad.matmul(self.u1, h2), ad.matmul(self.u2, cand))
        return h2, c2, scores

    def step_distribution(self, *args, **kwargs) -> tuple[Tensor, Tensor, Tensor]:
        h2, c2, scores = self.step(*args, **kwargs)
        return h2, c2, ad.softmax(scores, axis=1)


# ---------------------------------------------------------------------------
# grammar masking (optional constrained decoding)


def grammar_mask(prefix_flat: list[int], table: sch.ElementTable, n_tokens: int) -> np.ndarray:
    """Boolean mask of grammatically valid next candidates after `prefix_flat`.

    The prefix excludes BOS and contains flat candidate ids.
    """
    m = len(table)
    w = dlg.N_MARKERS + m + n_tokens
    mask = np.zeros(w, dtype=bool)

    def allow_slots_and_eos():
        mask[dlg.EOS] = True
        for el in table:
            if el.kind == sch.SLOT:
                mask[dlg.N_MARKERS + el.index] = True

    ptrs = [dlg.Pointer.from_flat(f, m) for f in prefix_flat]
    state = "start"
    open_slot: sch.Element | None = None
    last_tok = -1
    for p in ptrs:
        if state in ("start", "body"):
            if p.kind == dlg.SCHEMA and table[p.idx].kind == sch.INTENT and state == "start":
                state = "body"
            elif p.kind == dlg.SCHEMA and table[p.idx].kind == sch.SLOT:
                open_slot = table[p.idx]
                state = "value"
            else:
                state = "body"
        elif state == "value":
            if p.kind == dlg.TOKEN:
                state = "span"
                last_tok = p.idx
            else:
                state = "sep"
        elif state == "span":
            if p.kind == dlg.TOKEN:
                last_tok = p.idx
            else:
                state = "sep"
        elif state == "sep":
            state = "body"
            open_slot = None
    if state == "start":
        allow_slots_and_eos()
        for el in table:
            if el.kind == sch.INTENT:
                mask[dlg.N_MARKERS + el.index] = True
    elif state == "body":
        allow_slots_and_eos()
    elif state == "value":
        for el in table:
            if el.kind == sch.VALUE and open_slot is not None and el.service == open_slot.service and el.owning_slot == open_slot.name:
                mask[dlg.N_MARKERS + el.index] = True
        mask[dlg.N_MARKERS + m :] = True
    elif state == "span":
        if last_tok + 1 < n_tokens:
            mask[dlg.N_MARKERS + m + last_tok + 1] = True
        mask[dlg.VALUE_END] = True
    elif state == "sep":
        mask[dlg.PAIR_SEP] = True
    return mask


# ---------------------------------------------------------------------------
# beam search


@dataclass
class Hypothesis:
    ids: tuple[int, ...]  # emitted flat candidate ids, BOS excluded
    logp: float
    h: Tensor
    c: Tensor
    done_step: int  # step index at completion


def _log_probs(scores: np.ndarray, mask: np.ndarray | None) -> np.ndarray:
    s = scores.astype(np.float64).reshape(-1).copy()
    if mask is not None:
        s[~mask] = -1e30
    s -= s.max()
    return s - np.log(np.exp(s).sum())


def beam_search(
    decoder: StateDecoder,
    utt_repr: Tensor,
    schema_repr: Tensor,
    options: DecoderOptions,
    table: sch.ElementTable | None = None,
    n_tokens: int | None = None,
    candidates: Tensor | None = None,
) -> list[int]:
    """Highest-probability pointer sequence (flat ids, EOS included).

    No length normalization; ties break by earlier completion, then by the
    lexicographically smaller id sequence. Hypotheses that never emit EOS
    are force-terminated at max_len. A fixed-vocabulary candidate matrix
    can be supplied in place of the pointer candidates.
    """
    if options.beam_size < 1 or options.max_len < 2:
        raise ValueError("beam_size must be >= 1 and max_len >= 2")
    with ad.no_grad():
        cand = candidates if candidates is not None else decoder.candidates(schema_repr, utt_repr)
        n_cand = cand.data.shape[1]
        h0, c0 = decoder.initial_state(utt_repr)
        active = [Hypothesis((), 0.0, h0, c0, -1)]
        finished: list[Hypothesis] = []
        for step in range(options.max_len):
            expansions: list[Hypothesis] = []
            for hyp in active:
                prev_flat = hyp.ids[-1] if hyp.ids else dlg.BOS
                prev_repr = ad.narrow(cand, 1, prev_flat, 1)
                h2, c2, scores = decoder.step(prev_repr, hyp.h, hyp.c, utt_repr, schema_repr, cand)
                mask = None
                if options.constrained:
                    if table is None or n_tokens is None:
                        raise ValueError("constrained decoding needs the element table and token count")
                    mask = grammar_mask(list(hyp.ids), table, n_tokens)
                logp = _log_probs(scores.data, mask)
                order = np.lexsort((np.arange(n_cand), -logp))[: options.beam_size]
                for cid in order:
                    expansions.append(
                        Hypothesis(hyp.ids + (int(cid),), hyp.logp + float(logp[cid]), h2, c2, -1)
                    )
            expansions.sort(key=lambda hy: (-hy.logp, hy.ids))
            active = []
            for hy in expansions:
                if hy.ids[-1] == dlg.EOS:
                    finished.append(Hypothesis(hy.ids, hy.logp, hy.h, hy.c, step))
                elif len(active) < options.beam_size:
                    active.append(hy)
            if not active:
                break
        for hy in active:  # force-terminate leftovers
            finished.append(Hypothesis(hy.ids, hy.logp, hy.h, hy.c, options.max_len))
        finished.sort(key=lambda hy: (-hy.logp, hy.done_step, hy.ids))
        return list(finished[0].ids)


def sequence_log_prob(
    decoder: StateDecoder,
    utt_repr: Tensor,
    schema_repr: Tensor,
    flat_ids: list[int],
) -> float:
    """Total log-probability of a given pointer sequence under the model."""
    with ad.no_grad():
        cand = decoder.candidates(schema_repr, utt_repr)
        h, c = decoder.initial_state(utt_repr)
        prev = dlg.BOS
        total = 0.0
        for fid in flat_ids:
            h, c, scores = decoder.step(ad.narrow(cand, 1, prev, 1), h, c, utt_repr, schema_repr, cand)
            total += float(_log_probs(scores.data, None)[fid])
            prev = fid
    return total


def enumerate_best_sequence(
    decoder: StateDecoder,
    utt_repr: Tensor,
    schema_repr: Tensor,
    max_len: int,
) -> tuple[list[int], float]:
    """Exhaustive argmax over all decode sequences (test oracle; tiny spaces only)."""
    with ad.no_grad():
        cand = decoder.candidates(schema_repr, utt_repr)
        n_cand = cand.data.shape[1]
        h0, c0 = decoder.initial_state(utt_repr)
        best: tuple[float, int, tuple[int, ...]] | None = None

        def recurse(prefix: tuple[int, ...], logp: float, h, c, step: int):
            nonlocal best
            if prefix and prefix[-1] == dlg.EOS or step == max_len:
                key = (-logp, step if prefix and prefix[-1] == dlg.EOS else max_len, prefix)
                if best is None or key < (-best[0], best[1], best[2]):
                    best = (logp, key[1], prefix)
                return
            prev_flat = prefix[-1] if prefix else dlg.BOS
            prev_repr = ad.narrow(cand, 1, prev_flat, 1)
            h2, c2, scores = decoder.step(prev_repr, h, c, utt_repr, schema_repr, cand)
            logps = _log_probs(scores.data, None)
            for cid in range(n_cand):
                recurse(prefix + (cid,), logp + float(logps[cid]), h2, c2, step + 1)

        recurse((), 0.0, h0, c0, 0)
        assert best is not None
        return list(best[2]), best[0]


# ---------------------------------------------------------------------------
# sequence-labeling head (single-turn NLU degeneration)


class SeqLabelHead:
    """Per-token BIO slot labels plus an intent decision from [CLS]."""

    def __init__(self, ps: ParamSet, prefix: str, hidden: int, n_labels: int, n_intents: int):
        self.label = Linear(ps, f"{prefix}.label", n_labels, hidden)
        self.intent = Linear(ps, f"{prefix}.intent", n_intents, hidden)

    def __call__(self, utt_repr: Tensor) -> tuple[Tensor, Tensor]:
        """(n_labels, N) label logits and (n_intents, 1) intent logits."""
        label_logits = self.label(utt_repr)
        intent_logits = self.intent(ad.narrow(utt_repr, 1, 0, 1))
        return label_logits, intent_logits
