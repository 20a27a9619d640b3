"""Evaluation measures: intent accuracy, joint goal accuracy (exact and
fuzzy), span-level slot F1, and per-domain reporting with seen/unseen tags.
"""
from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from pathlib import Path

from . import dialogue as dlg
from . import text as tx

EXACT = "exact"
FUZZY = "fuzzy"

SEEN = "seen"
PARTIAL = "partially_seen"
UNSEEN = "unseen"

_TAG_MARK = {SEEN: "", PARTIAL: "**", UNSEEN: "*"}


def edit_distance(a: str, b: str) -> int:
    """Levenshtein distance (unit costs), iterative two-row DP."""
    if len(a) < len(b):
        a, b = b, a
    prev = list(range(len(b) + 1))
    for i, ca in enumerate(a, start=1):
        cur = [i]
        for j, cb in enumerate(b, start=1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (ca != cb)))
        prev = cur
    return prev[-1]


def fuzzy_score(a: str, b: str) -> float:
    """Normalized edit similarity in [0, 1]; 1.0 for identical strings."""
    na, nb = tx.normalize_value(a), tx.normalize_value(b)
    longest = max(len(na), len(nb))
    if longest == 0:
        return 1.0
    return 1.0 - edit_distance(na, nb) / longest


def intent_accuracy(predicted: list[dlg.StateFrame], gold: list[dlg.StateFrame]) -> float:
    if len(predicted) != len(gold):
        raise ValueError(f"turn count mismatch: {len(predicted)} predicted vs {len(gold)} gold")
    if not gold:
        return 1.0
    hits = sum(1 for p, g in zip(predicted, gold) if p.active_intent == g.active_intent)
    return hits / len(gold)


def value_matches(pred: dlg.SlotValue, gold: dlg.SlotValue, mode: str, threshold: float) -> bool:
    if pred.kind != gold.kind:
        return False
    if gold.kind == "cat":
        return pred.element == gold.element  # dontcare is its own element
    a, b = pred.text or "", gold.text or ""
    if mode == EXACT:
        return tx.normalize_value(a) == tx.normalize_value(b)
    return fuzzy_score(a, b) >= threshold


def turn_correct(pred: dlg.StateFrame, gold: dlg.StateFrame, mode: str, threshold: float) -> bool:
    """All gold slots matched, no extra predicted slots."""
    if set(pred.slots) != set(gold.slots):
        return False
    return all(value_matches(pred.slots[k], gold.slots[k], mode, threshold) for k in gold.slots)


def joint_goal_accuracy(
    predicted: list[dlg.StateFrame],
    gold: list[dlg.StateFrame],
    mode: str = EXACT,
    threshold: float = 0.95,
) -> float:
    if mode not in (EXACT, FUZZY):
        raise ValueError(f"mode must be exact or fuzzy, got {mode!r}")
    if len(predicted) != len(gold):
        raise ValueError(f"turn count mismatch: {len(predicted)} predicted vs {len(gold)} gold")
    if not gold:
        return 1.0
    hits = sum(1 for p, g in zip(predicted, gold) if turn_correct(p, g, mode, threshold))
    return hits / len(gold)


def split_joint_goal_accuracy(
    predicted: list[dlg.StateFrame],
    gold: list[dlg.StateFrame],
    table,
    mode: str = EXACT,
    threshold: float = 0.95,
) -> dict[str, float]:
    """Joint GA restricted to categorical / non-categorical assignments."""

    def restrict(frame: dlg.StateFrame, want_cat: bool) -> dlg.StateFrame:
        out = dlg.StateFrame(frame.active_intent)
        out.slots = {k: v for k, v in frame.slots.items() if (v.kind == "cat") == want_cat}
        return out

    result = {}
    for name, want_cat in (("categorical", True), ("non_categorical", False)):
        p = [restrict(f, want_cat) for f in predicted]
        g = [restrict(f, want_cat) for f in gold]
        result[name] = joint_goal_accuracy(p, g, mode, threshold)
    return result


# ---------------------------------------------------------------------------
# span-level F1 for sequence labeling


def bio_spans(labels: list[str]) -> set[tuple[str, int, int]]:
    spans = set()
    open_name, start = None, 0
    for pos, lab in enumerate(list(labels) + ["O"]):
        if lab.startswith("B-"):
            if open_name is not None:
                spans.add((open_name, start, pos))
            open_name, start = lab[2:], pos
        elif lab.startswith("I-") and open_name == lab[2:]:
            continue
        else:
            if open_name is not None:
                spans.add((open_name, start, pos))
            open_name = None
    return spans


def slot_f1(predicted: list[list[str]], gold: list[list[str]]) -> float:
    """Span-level F1: a prediction counts iff label and boundaries match."""
    if len(predicted) != len(gold):
        raise ValueError("sentence count mismatch")
    tp = fp = fn = 0
    for p_labels, g_labels in zip(predicted, gold):
        if len(p_labels) != len(g_labels):
            raise ValueError(f"label sequence length mismatch: {len(p_labels)} vs {len(g_labels)}")
        p_spans, g_spans = bio_spans(p_labels), bio_spans(g_labels)
        tp += len(p_spans & g_spans)
        fp += len(p_spans - g_spans)
        fn += len(g_spans - p_spans)
    if tp == 0:
        return 0.0  # precision/recall undefined or zero
    precision = tp / (tp + fp)
    recall = tp / (tp + fn)
    return 2 * precision * recall / (precision + recall)


# ---------------------------------------------------------------------------
# per-domain reporting


def domain_of(service: str) -> str:
    """SGD-style service names drop their numeric suffix: Homes_1 -> Homes."""
    return re.sub(r"_\d+$", "", service)


def domain_tag(domain: str, test_services: set[str], train_services: set[str]) -> str:
    in_domain = {s for s in test_services if domain_of(s) == domain}
    seen = {s for s in in_domain if s in train_services}
    if not seen:
        return UNSEEN
    if seen == in_domain:
        return SEEN
    return PARTIAL


@dataclass
class DomainRow:
    domain: str
    tag: str
    turns: int
    joint_ga: float
    intent_acc: float

    @property
    def starred(self) -> str:
        return self.domain + _TAG_MARK[self.tag]


@dataclass
class EvalReport:
    intent_acc: float
    joint_ga: float
    mode: str
    threshold: float
    turns: int
    malformed: int
    slot_f1: float | None = None
    split_ga: dict[str, float] | None = None
    domains: list[DomainRow] = field(default_factory=list)

    def validate(self):
        rates = [self.intent_acc, self.joint_ga] + [r.joint_ga for r in self.domains]
        if any(not (0 <= r <= 1) for r in rates):
            raise ValueError("rates must lie in [0, 1]")
        if self.domains and sum(r.turns for r in self.domains) != self.turns:
            raise ValueError("per-domain turn counts must sum to the total")

    def to_json(self) -> str:
        payload = {
            "intent_acc": self.intent_acc,
            "joint_ga": self.joint_ga,
            "mode": self.mode,
            "threshold": self.threshold,
            "turns": self.turns,
            "malformed": self.malformed,
            "slot_f1": self.slot_f1,
            "split_ga": self.split_ga,
            "domains": [
                {"domain": r.domain, "tag": r.tag, "turns": r.turns, "joint_ga": r.joint_ga, "intent_acc": r.intent_acc}
                for r in self.domains
            ],
        }
        return json.dumps(payload, indent=1)

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        raw = json.loads(text)
        rows = [DomainRow(d["domain"], d["tag"], d["turns"], d["joint_ga"], d["intent_acc"]) for d in raw["domains"]]
        return cls(
            intent_acc=raw["intent_acc"],
            joint_ga=raw["joint_ga"],
            mode=raw["mode"],
            threshold=raw["threshold"],
            turns=raw["turns"],
            malformed=raw["malformed"],
            slot_f1=raw.get("slot_f1"),
            split_ga=raw.get("split_ga"),
            domains=rows,
        )

    def save(self, path: str | Path):
        Path(path).write_text(self.to_json(), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "EvalReport":
        return cls.from_json(Path(path).read_text(encoding="utf-8"))

    def render(self) -> str:
        lines = [
            f"turns: {self.turns}   malformed decodes: {self.malformed}",
            f"intent accuracy : {self.intent_acc:.4f}",
            f"joint goal acc  : {self.joint_ga:.4f}  ({self.mode}"
            + (f", threshold {self.threshold}" if self.mode == FUZZY else "")
            + ")",
        ]
        if self.slot_f1 is not None:
            lines.append(f"slot f1         : {self.slot_f1:.4f}")
        if self.split_ga:
            lines.append(
                "categorical ga  : {categorical:.4f}   non-categorical ga: {non_categorical:.4f}".format(**self.split_ga)
            )
        if self.domains:
            lines.append("")
            lines.append(f"{'domain':<24}{'turns':>6}  {'joint ga':>8}  {'int acc':>8}")
            for row in sorted(self.domains, key=lambda r: r.domain):
                lines.append(f"{row.starred:<24}{row.turns:>6}  {row.joint_ga:>8.4f}  {row.intent_acc:>8.4f}")
        return "\n".join(lines)


def per_domain_rows(
    services: list[str],
    predicted: list[dlg.StateFrame],
    gold: list[dlg.StateFrame],
    train_services: set[str],
    mode: str,
    threshold: float,
) -> list[DomainRow]:
    if len(services) != len(predicted) or len(predicted) != len(gold):
        raise ValueError("services, predictions and gold must align")
    if any(not s for s in services):
        raise ValueError("every evaluated turn needs a service/domain tag")
    test_services = set(services)
    by_domain: dict[str, list[int]] = {}
    for i, svc in enumerate(services):
        by_domain.setdefault(domain_of(svc), []).append(i)
    rows = []
    for domain, idxs in sorted(by_domain.items()):
        p = [predicted[i] for i in idxs]
        g = [gold[i] for i in idxs]
        rows.append(
            DomainRow(
                domain=domain,
                tag=domain_tag(domain, test_services, train_services),
                turns=len(idxs),
                joint_ga=joint_goal_accuracy(p, g, mode, threshold),
                intent_acc=intent_accuracy(p, g),
            )
        )
    return rows
