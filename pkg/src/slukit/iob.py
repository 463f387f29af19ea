"""Flat IOB token sequences for intent + entity semantics, and back.

A frame (intent, ordered entities) serializes as an intent token at both
ends with word-then-tag pairs in between:

    O-INT-flight charlotte B-fromloc-city-name las B-toloc-city-name
    vegas I-toloc-city-name saint B-stoploc-city-name louis
    I-stoploc-city-name O-INT-flight

Canonical labels are dotted ("toloc.city_name"); on the wire both the
dot and the underscores flatten to hyphens, so the inverse maps the
first hyphen to a dot and the rest to underscores. Labels that do not
survive that round trip are rejected at encode time.

Decoding tolerates arbitrary model output: orphan I- tags are promoted
to B-, words without tags and tags without words are dropped, intent
disagreements resolve to the earliest intent token, and each repair is
reported as a warning. Output with no intent token at all is
unparseable.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field

from .errors import DataError, UnparseableOutputError

INTENT_PREFIX = "O-INT-"
_LABEL_RE = re.compile(r"[a-z0-9_.]+\Z")


def label_to_surface(label: str) -> str:
    return label.replace(".", "-").replace("_", "-")


def surface_to_label(surface: str) -> str:
    head, *rest = surface.split("-")
    return head + "." + "_".join(rest) if rest else head


@dataclass
class EntityAnnotation:
    label: str
    value: list[str]

    def __post_init__(self):
        if not self.value or any(not w for w in self.value):
            raise DataError(f"entity {self.label!r} has an empty value")
        if not _LABEL_RE.match(self.label):
            raise DataError(f"entity label {self.label!r} is not canonical [a-z0-9_.]+")

    @property
    def value_text(self) -> str:
        return " ".join(self.value)


@dataclass
class SemanticFrame:
    intent: str
    entities: list[EntityAnnotation] = field(default_factory=list)

    def __post_init__(self):
        if not self.intent:
            raise DataError("frame intent must be non-empty")

    def to_json(self) -> dict:
        return {
            "intent": self.intent,
            "entities": [{"label": e.label, "value": e.value_text} for e in self.entities],
        }

    @classmethod
    def from_json(cls, doc: dict) -> "SemanticFrame":
        return cls(
            doc["intent"],
            [EntityAnnotation(e["label"], str(e["value"]).split()) for e in doc["entities"]],
        )


def encode_iob(frame: SemanticFrame) -> list[str]:
    intent_token = INTENT_PREFIX + frame.intent
    out = [intent_token]
    for ent in frame.entities:
        surface = label_to_surface(ent.label)
        if surface_to_label(surface) != ent.label:
            raise DataError(f"label {ent.label!r} does not survive the hyphen round trip")
        for i, word in enumerate(ent.value):
            out.append(word)
            out.append(("B-" if i == 0 else "I-") + surface)
    out.append(intent_token)
    return out


def _is_tag(token: str) -> bool:
    return len(token) > 2 and token[1] == "-" and token[0] in "BI"


def decode_iob(tokens: list[str]) -> tuple[SemanticFrame, list[str]]:
    """Best-effort inverse of encode_iob; returns (frame, repair warnings)."""
    tokens = [t for t in tokens if t]
    intent: str | None = None
    warnings: list[str] = []
    for pos, tok in enumerate(tokens):
        if tok.startswith(INTENT_PREFIX) and len(tok) > len(INTENT_PREFIX):
            intent = tok[len(INTENT_PREFIX) :]
            if pos != 0:
                warnings.append(f"intent token appears at position {pos}, not first")
            break
    if intent is None:
        raise UnparseableOutputError("no intent token in decoded sequence")

    entities: list[EntityAnnotation] = []
    current: tuple[str, list[str]] | None = None
    pending: str | None = None

    def flush():
        nonlocal current
        if current is not None:
            entities.append(EntityAnnotation(current[0], current[1]))
            current = None

    for tok in tokens:
        if tok.startswith(INTENT_PREFIX) and len(tok) > len(INTENT_PREFIX):
            if tok[len(INTENT_PREFIX) :] != intent:
                warnings.append(f"intent token {tok!r} disagrees with {intent!r}; keeping first")
            continue
        if _is_tag(tok):
            kind, label = tok[0], surface_to_label(tok[2:])
            if pending is None:
                warnings.append(f"tag {tok!r} has no preceding word; dropped")
                continue
            if kind == "B":
                flush()
                current = (label, [pending])
            elif current is not None and current[0] == label:
                current[1].append(pending)
            else:
                reason = "follows a different label" if current else "has no open entity"
                warnings.append(f"orphan tag {tok!r} {reason}; promoted to B-")
                flush()
                current = (label, [pending])
            pending = None
        else:
            if pending is not None:
                warnings.append(f"word {pending!r} carries no tag; dropped")
            pending = tok
    if pending is not None:
        warnings.append(f"word {pending!r} carries no tag; dropped")
    flush()

    last = tokens[-1] if tokens else ""
    if len(tokens) < 2 or not (last.startswith(INTENT_PREFIX) and len(last) > len(INTENT_PREFIX)):
        warnings.append("sequence does not end with an intent token")
    return SemanticFrame(intent, entities), warnings


def iob_tag_inventory(labels, intents) -> list[str]:
    """Atomic token strings the subword vocabulary must keep unsplittable."""
    tokens: list[str] = []
    for label in labels:
        surface = label_to_surface(label)
        tokens.extend(("B-" + surface, "I-" + surface))
    tokens.extend(INTENT_PREFIX + intent for intent in intents)
    return tokens
