"""Strict entity F1 and intent error rate over aligned hypothesis/reference frames.

Entities are matched per utterance as multisets of (label, normalized
value) pairs: a hypothesis entity scores a true positive only when both
the label and the full value match; otherwise it is one false positive
and the missed reference is one false negative. Counts are aggregated
over the whole corpus before the single precision/recall/F1 is computed
(micro-averaging). Values normalize to lowercase single-spaced word
strings with underscores equal to spaces.

An unparseable hypothesis (frame None) contributes all its reference
entities as false negatives and always counts as one intent error.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass

from .errors import DataError
from .iob import SemanticFrame


def normalize_value(value: str) -> str:
    return " ".join(value.lower().replace("_", " ").split())


def entity_multiset(frame: SemanticFrame | None) -> Counter:
    if frame is None:
        return Counter()
    return Counter((e.label, normalize_value(e.value_text)) for e in frame.entities)


@dataclass
class EntityScore:
    tp: int = 0
    fp: int = 0
    fn: int = 0

    @property
    def precision(self) -> float:
        return self.tp / (self.tp + self.fp) if self.tp + self.fp else 0.0

    @property
    def recall(self) -> float:
        return self.tp / (self.tp + self.fn) if self.tp + self.fn else 0.0

    @property
    def f1(self) -> float:
        p, r = self.precision, self.recall
        return 2 * p * r / (p + r) if p + r else 0.0

    def to_json(self) -> dict:
        return {
            "tp": self.tp,
            "fp": self.fp,
            "fn": self.fn,
            "precision": self.precision,
            "recall": self.recall,
            "f1": self.f1,
        }


@dataclass
class IntentScore:
    errors: int = 0
    total: int = 0

    @property
    def ier(self) -> float:
        return self.errors / self.total if self.total else 0.0

    def to_json(self) -> dict:
        return {"errors": self.errors, "total": self.total, "ier": self.ier}


def _check_alignment(refs, hyps) -> None:
    if len(refs) != len(hyps):
        raise DataError(f"{len(refs)} references vs {len(hyps)} hypotheses")
    for (rid, _), (hid, _) in zip(refs, hyps):
        if rid != hid:
            raise DataError(f"utterance id mismatch: reference {rid!r} vs hypothesis {hid!r}")


def score_entities(refs, hyps) -> EntityScore:
    """refs/hyps: aligned lists of (utterance id, SemanticFrame-or-None)."""
    _check_alignment(refs, hyps)
    score = EntityScore()
    for (_, ref), (_, hyp) in zip(refs, hyps):
        r, h = entity_multiset(ref), entity_multiset(hyp)
        tp = sum((r & h).values())
        score.tp += tp
        score.fn += sum(r.values()) - tp
        score.fp += sum(h.values()) - tp
    return score


def score_intent(refs, hyps) -> IntentScore:
    _check_alignment(refs, hyps)
    score = IntentScore(total=len(refs))
    for (_, ref), (_, hyp) in zip(refs, hyps):
        if hyp is None or hyp.intent != ref.intent:
            score.errors += 1
    return score


def score_corpus(refs, hyps, per_utterance: bool = False) -> dict:
    """Full report: entity and intent scores, optionally per-utterance diffs."""
    report = {
        "entities": score_entities(refs, hyps).to_json(),
        "intent": score_intent(refs, hyps).to_json(),
    }
    if per_utterance:
        diffs = []
        for (uid, ref), (_, hyp) in zip(refs, hyps):
            r, h = entity_multiset(ref), entity_multiset(hyp)
            diffs.append(
                {
                    "id": uid,
                    "intent_ref": ref.intent,
                    "intent_hyp": None if hyp is None else hyp.intent,
                    "missing": sorted((r - h).elements()),
                    "spurious": sorted((h - r).elements()),
                }
            )
        report["per_utterance"] = diffs
    return report
