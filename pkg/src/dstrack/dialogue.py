"""Dialogue turns, state frames, and the pointer-sequence target format.

A state frame is linearized into a flat pointer sequence over the schema
element table and the encoder-input token positions:

    BOS [intent] (slot value-part PAIR_SEP)* EOS

where value-part is a single categorical-value reference, or a contiguous
run of utterance-token references closed by VALUE_END. Delinearization is
the tolerant inverse used on raw model output.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

from . import schema as sch
from . import text as tx

# marker ids (always the first pointer candidates, in this order)
BOS, EOS, PAIR_SEP, VALUE_END = 0, 1, 2, 3
N_MARKERS = 4
MARKER_NAMES = ("BOS", "EOS", "PAIR_SEP", "VALUE_END")

MARKER, SCHEMA, TOKEN = "marker", "schema", "token"

NONE_INTENT = "NONE"


class TruncationError(ValueError):
    pass


class FlaggedExampleError(ValueError):
    """A gold non-categorical value has no alignable span in the input."""


class DialogueParseError(ValueError):
    pass


@dataclass(frozen=True, order=True)
class Pointer:
    kind: str
    idx: int

    def flat(self, n_schema: int) -> int:
        """Dense candidate id: markers, then schema elements, then tokens."""
        if self.kind == MARKER:
            return self.idx
        if self.kind == SCHEMA:
            return N_MARKERS + self.idx
        return N_MARKERS + n_schema + self.idx

    @staticmethod
    def from_flat(flat_id: int, n_schema: int) -> "Pointer":
        if flat_id < N_MARKERS:
            return Pointer(MARKER, flat_id)
        if flat_id < N_MARKERS + n_schema:
            return Pointer(SCHEMA, flat_id - N_MARKERS)
        return Pointer(TOKEN, flat_id - N_MARKERS - n_schema)


def marker(m: int) -> Pointer:
    return Pointer(MARKER, m)


def schema_ref(element_index: int) -> Pointer:
    return Pointer(SCHEMA, element_index)


def token_ref(position: int) -> Pointer:
    return Pointer(TOKEN, position)


# ---------------------------------------------------------------------------
# encoder input


@dataclass
class EncoderInput:
    """[CLS] current-utterance [SEP] (previous-turn [SEP])*, newest history first.

    `provenance[i]` is (turns_back, char_start, char_end) for utterance
    tokens and None for reserved tokens; turns_back counts 0 for the
    current utterance, 1 for the most recent previous turn, and so on.
    """

    tokens: list[str]
    provenance: list[tuple[int, int, int] | None]

    def __len__(self) -> int:
        return len(self.tokens)

    def is_reserved(self, position: int) -> bool:
        return self.tokens[position] in tx.RESERVED

    def span_text(self, start: int, end: int) -> str:
        """Detokenized text of positions [start, end), reserved tokens skipped."""
        return " ".join(t for t in self.tokens[start:end] if t not in tx.RESERVED)


def build_encoder_input(current: str, history: list[str], max_len: int) -> EncoderInput:
    """Assemble the encoder token sequence, dropping oldest turns to fit.

    `history` is ordered oldest first (natural dialogue order); the encoder
    input places the most recent previous turn right after the current one.
    """
    cur = tx.tokenize_with_spans(current)
    if not cur:
        raise ValueError("current utterance empty after normalization")
    needed = len(cur) + 2  # [CLS] ... [SEP]
    if max_len < needed:
        raise TruncationError(f"max_len {max_len} cannot hold the current utterance ({needed} tokens)")
    tokens: list[str] = [tx.CLS] + [t for t, _, _ in cur] + [tx.SEP]
    prov: list[tuple[int, int, int] | None] = [None] + [(0, s, e) for _, s, e in cur] + [None]
    budget = max_len - len(tokens)
    for back, utterance in enumerate(reversed(history), start=1):
        turn = tx.tokenize_with_spans(utterance)
        cost = len(turn) + 1  # + [SEP]
        if cost > budget:
            break  # this and all older turns are dropped
        tokens.extend(t for t, _, _ in turn)
        prov.extend((back, s, e) for _, s, e in turn)
        tokens.append(tx.SEP)
        prov.append(None)
        budget -= cost
    return EncoderInput(tokens, prov)


def align_value_span(value: str, enc: EncoderInput) -> tuple[int, int] | None:
    """Most recent contiguous token run matching the normalized value.

    Matching compares punctuation-stripped token sequences. Recency follows
    dialogue time, not raw position: the encoder input holds the current
    utterance first and history newest-to-oldest, so candidates are ranked
    by fewest turns back, then by the latest position inside that turn.
    """
    pattern = tx.content_tokens(value)
    if not pattern:
        return None
    n = len(enc.tokens)
    w = len(pattern)
    best: tuple[int, int] | None = None
    best_key: tuple[int, int] | None = None
    for start in range(n - w + 1):
        window = enc.tokens[start : start + w]
        if window != pattern or any(t in tx.RESERVED for t in window):
            continue
        turns_back = enc.provenance[start][0]
        key = (turns_back, -start)
        if best_key is None or key < best_key:
            best_key = key
            best = (start, start + w)
    return best


# ---------------------------------------------------------------------------
# state frames


@dataclass(frozen=True)
class SlotValue:
    """Value of one slot: a categorical element index or free span text."""

    kind: str  # "cat" | "text"
    element: int | None = None  # categorical value element index
    text: str | None = None  # non-categorical value text

    @staticmethod
    def categorical(element_index: int) -> "SlotValue":
        return SlotValue("cat", element=element_index)

    @staticmethod
    def span(value_text: str) -> "SlotValue":
        return SlotValue("text", text=value_text)


@dataclass
class StateFrame:
    """Active intent plus slot assignments, indexed into an ElementTable."""

    active_intent: int | None = None
    slots: dict[int, SlotValue] = field(default_factory=dict)

    def copy(self) -> "StateFrame":
        return StateFrame(self.active_intent, dict(self.slots))


def frames_match(a: StateFrame, b: StateFrame) -> bool:
    """Strict equality with normalized text comparison for span values."""
    if a.active_intent != b.active_intent or set(a.slots) != set(b.slots):
        return False
    for k, va in a.slots.items():
        vb = b.slots[k]
        if va.kind != vb.kind:
            return False
        if va.kind == "cat":
            if va.element != vb.element:
                return False
        elif tx.normalize_value(va.text or "") != tx.normalize_value(vb.text or ""):
            return False
    return True


# ---------------------------------------------------------------------------
# linearize / delinearize


def sequence_is_well_formed(seq: list[Pointer], table: sch.ElementTable, n_tokens: int) -> bool:
    """Check the target grammar exactly (used by tests and the constrained decoder)."""
    i = 0
    if not seq or seq[0] != marker(BOS):
        return False
    i = 1
    if i < len(seq) and seq[i].kind == SCHEMA and table[seq[i].idx].kind == sch.INTENT:
        i += 1
    while i < len(seq) and seq[i] != marker(EOS):
        p = seq[i]
        if p.kind != SCHEMA or table[p.idx].kind != sch.SLOT:
            return False
        slot_el = table[p.idx]
        i += 1
        if i >= len(seq):
            return False
        if seq[i].kind == SCHEMA:
            v = table[seq[i].idx]
            if v.kind != sch.VALUE or v.service != slot_el.service or v.owning_slot != slot_el.name:
                return False
            i += 1
        elif seq[i].kind == TOKEN:
            prev = None
            while i < len(seq) and seq[i].kind == TOKEN:
                if seq[i].idx >= n_tokens:
                    return False
                if prev is not None and seq[i].idx != prev + 1:
                    return False
                prev = seq[i].idx
                i += 1
            if i >= len(seq) or seq[i] != marker(VALUE_END):
                return False
            i += 1
        else:
            return False
        if i >= len(seq) or seq[i] != marker(PAIR_SEP):
            return False
        i += 1
    return i < len(seq) and seq[i] == marker(EOS) and i == len(seq) - 1


def linearize_state(frame: StateFrame, enc: EncoderInput, table: sch.ElementTable) -> list[Pointer]:
    """Gold pointer sequence for a frame; raises FlaggedExampleError when a
    non-categorical value cannot be aligned to the encoder input."""
    seq = [marker(BOS)]
    if frame.active_intent is not None:
        seq.append(schema_ref(frame.active_intent))
    for slot_idx in sorted(frame.slots):
        value = frame.slots[slot_idx]
        seq.append(schema_ref(slot_idx))
        if value.kind == "cat":
            seq.append(schema_ref(value.element))
        else:
            span = align_value_span(value.text or "", enc)
            if span is None:
                el = table[slot_idx]
                raise FlaggedExampleError(
                    f"value {value.text!r} for slot {el.service}.{el.name} not found in the input"
                )
            seq.extend(token_ref(p) for p in range(span[0], span[1]))
            seq.append(marker(VALUE_END))
        seq.append(marker(PAIR_SEP))
    seq.append(marker(EOS))
    return seq


@dataclass
class DelinearizeResult:
    frame: StateFrame
    malformed: int  # count of grammar violations skipped over


def delinearize(seq: list[Pointer], enc: EncoderInput, table: sch.ElementTable) -> DelinearizeResult:
    """Best-effort inverse of linearize_state; never raises on model output.

    Grammar violations are skipped and counted; a later assignment to the
    same slot wins.
    """
    frame = StateFrame()
    bad = 0
    i = 0
    n = len(seq)
    if i < n and seq[i] == marker(BOS):
        i += 1
    while i < n:
        p = seq[i]
        if p == marker(EOS):
            break
        if p.kind == SCHEMA and p.idx < len(table):
            el = table[p.idx]
            if el.kind == sch.INTENT:
                if frame.active_intent is not None:
                    bad += 1
                frame.active_intent = p.idx
                i += 1
                continue
            if el.kind == sch.SLOT:
                i, slot_bad = _read_value_part(seq, i + 1, p.idx, frame, enc, table)
                bad += slot_bad
                continue
        # orphan token / marker / bad schema ref
        bad += 1
        i += 1
    return DelinearizeResult(frame, bad)


def _read_value_part(
    seq: list[Pointer],
    i: int,
    slot_idx: int,
    frame: StateFrame,
    enc: EncoderInput,
    table: sch.ElementTable,
) -> tuple[int, int]:
    slot_el = table[slot_idx]
    bad = 0
    n = len(seq)
    if i < n and seq[i].kind == SCHEMA and seq[i].idx < len(table) and table[seq[i].idx].kind == sch.VALUE:
        v = table[seq[i].idx]
        if v.service == slot_el.service and v.owning_slot == slot_el.name:
            frame.slots[slot_idx] = SlotValue.categorical(seq[i].idx)
        else:
            bad += 1  # value belongs to a different slot
        i += 1
    elif i < n and seq[i].kind == TOKEN:
        positions = []
        while i < n and seq[i].kind == TOKEN:
            positions.append(seq[i].idx)
            i += 1
        run = [p for p in positions if p < len(enc.tokens)]
        bad += len(positions) - len(run)
        if run:
            start, end = run[0], run[0] + 1
            for p in run[1:]:
                if p == end:
                    end += 1
                else:
                    bad += 1  # non-contiguous tail ignored
                    break
            text = enc.span_text(start, end)
            if text:
                frame.slots[slot_idx] = SlotValue.span(text)
            else:
                bad += 1
        if i < n and seq[i] == marker(VALUE_END):
            i += 1
        else:
            bad += 1
    else:
        # slot with no value part; leave the current item to the outer loop
        return i, bad + 1
    if i < n and seq[i] == marker(PAIR_SEP):
        i += 1
    else:
        bad += 1  # missing pair separator
    return i, bad


# ---------------------------------------------------------------------------
# dialogue files (SGD layout subset)


@dataclass
class RawFrame:
    service: str
    active_intent: str = NONE_INTENT
    slot_values: dict[str, list[str]] = field(default_factory=dict)
    spans: dict[str, tuple[int, int]] = field(default_factory=dict)


@dataclass
class Turn:
    speaker: str  # USER | SYSTEM
    utterance: str
    frames: list[RawFrame] = field(default_factory=list)


@dataclass
class Dialogue:
    dialogue_id: str
    services: list[str]
    turns: list[Turn]


def parse_dialogues(text: str) -> list[Dialogue]:
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as e:
        raise DialogueParseError(f"not valid JSON: {e}") from e
    if not isinstance(raw, list):
        raise DialogueParseError("dialogue file must be a JSON list of dialogues")
    dialogues = []
    for di, d in enumerate(raw):
        path = f"dialogues[{di}]"
        if "dialogue_id" not in d:
            raise DialogueParseError(f"missing dialogue_id at {path}")
        turns = []
        for ti, t in enumerate(d.get("turns", [])):
            tpath = f"{path}.turns[{ti}]"
            if "speaker" not in t or "utterance" not in t:
                raise DialogueParseError(f"missing speaker/utterance at {tpath}")
            speaker = t["speaker"].upper()
            if speaker not in ("USER", "SYSTEM"):
                raise DialogueParseError(f"unknown speaker {t['speaker']!r} at {tpath}")
            frames = []
            for f in t.get("frames", []):
                state = f.get("state", {})
                frames.append(
                    RawFrame(
                        service=f.get("service", ""),
                        active_intent=state.get("active_intent", NONE_INTENT) or NONE_INTENT,
                        slot_values={k: list(v) for k, v in state.get("slot_values", {}).items()},
                        spans={
                            s["slot"]: (int(s["start"]), int(s["exclusive_end"]))
                            for s in f.get("slots", [])
                            if "slot" in s and "start" in s and "exclusive_end" in s
                        },
                    )
                )
            turns.append(Turn(speaker, t["utterance"], frames))
        dialogues.append(Dialogue(d["dialogue_id"], list(d.get("services", [])), turns))
    return dialogues


def load_dialogues(path: str | Path) -> list[Dialogue]:
    return parse_dialogues(Path(path).read_text(encoding="utf-8"))


# ---------------------------------------------------------------------------
# training examples


@dataclass
class DialogueExample:
    """One user turn: encoder input plus its gold state frame."""

    dialogue_id: str
    turn_index: int
    service: str
    enc: EncoderInput
    gold: StateFrame
    flagged: bool = False  # some gold value had no alignable span

    @property
    def example_id(self) -> str:
        return f"{self.dialogue_id}:{self.turn_index}"


def frame_from_raw(
    raw: RawFrame,
    schemas_by_name: dict[str, sch.Schema],
    table: sch.ElementTable,
    enc: EncoderInput,
) -> tuple[StateFrame, bool]:
    """Bind a raw state to element indices; returns (frame, flagged)."""
    frame = StateFrame()
    flagged = False
    schema = schemas_by_name[raw.service]
    if raw.active_intent != NONE_INTENT:
        frame.active_intent = table.index_of(sch.INTENT, raw.service, raw.active_intent)
    for slot_name, values in raw.slot_values.items():
        if not values:
            continue
        slot = schema.slot(slot_name)
        slot_idx = table.index_of(sch.SLOT, raw.service, slot_name)
        if slot.is_categorical:
            chosen = next((v for v in values if v in slot.possible_values or v == sch.DONTCARE), values[0])
            frame.slots[slot_idx] = SlotValue.categorical(
                table.index_of(sch.VALUE, raw.service, chosen, owning_slot=slot_name)
            )
        else:
            aligned = next((v for v in values if align_value_span(v, enc) is not None), None)
            if aligned is None:
                flagged = True
                frame.slots[slot_idx] = SlotValue.span(values[0])
            else:
                frame.slots[slot_idx] = SlotValue.span(aligned)
    return frame, flagged


def dialogue_examples(
    dialogues: list[Dialogue],
    schemas: list[sch.Schema],
    table: sch.ElementTable,
    max_len: int,
) -> list[DialogueExample]:
    """All user turns as training/eval examples.

    Multi-service turns merge their frames into one state; the first frame
    with an active intent supplies the intent.
    """
    by_name = {s.service_name: s for s in schemas}
    out = []
    for d in dialogues:
        history: list[str] = []
        for ti, turn in enumerate(d.turns):
            if turn.speaker != "USER":
                history.append(turn.utterance)
                continue
            enc = build_encoder_input(turn.utterance, history, max_len)
            merged = StateFrame()
            flagged = False
            service = turn.frames[0].service if turn.frames else (d.services[0] if d.services else "")
            for rf in turn.frames:
                if rf.service not in by_name:
                    raise DialogueParseError(f"dialogue {d.dialogue_id} uses unknown service {rf.service!r}")
                fr, fl = frame_from_raw(rf, by_name, table, enc)
                flagged = flagged or fl
                if merged.active_intent is None:
                    merged.active_intent = fr.active_intent
                merged.slots.update(fr.slots)
            out.append(DialogueExample(d.dialogue_id, ti, service, enc, merged, flagged))
            history.append(turn.utterance)
    return out
