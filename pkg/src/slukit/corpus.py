"""Synthetic micro-corpus generation, JSONL manifests and augmentation.

Each lexicon word renders to a fixed signature of two or three pure
tones (frequencies hashed from the word string), so an utterance's audio
is an unambiguous acoustic spelling of its transcript: small models can
genuinely learn speech→text and speech→semantics from a few hundred
samples. Hash collisions between two words' signatures are resolved by
salted re-hashing, deterministically.

Manifest lines are JSON objects {id, audio, features, text, intent,
entities}; relative paths resolve against the manifest's directory.
"""

from __future__ import annotations

import hashlib
import json
import re
import warnings as _warnings
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .audio import AudioSignal, read_audio, speed_perturb, write_wav
from .errors import DataError
from .features import FrontendConfig, compute_filterbank, save_features
from .iob import EntityAnnotation, SemanticFrame, decode_iob, encode_iob, iob_tag_inventory

_SLOT_RE = re.compile(r"\{([a-z0-9_.]+)\}")

TONE_SECONDS = 0.08
GAP_SECONDS = 0.02
SAMPLE_RATE = 16000


@dataclass
class Utterance:
    id: str
    text: str
    frame: SemanticFrame
    audio: str | None = None
    features: str | None = None

    def to_json(self) -> dict:
        doc = {"id": self.id, "audio": self.audio, "features": self.features, "text": self.text}
        doc.update(self.frame.to_json())
        return doc


@dataclass
class SynthGrammar:
    """Intent templates plus slot lexicons; placeholders are {dotted.labels}."""

    intents: dict[str, list[str]] = field(default_factory=dict)
    slots: dict[str, list[str]] = field(default_factory=dict)

    def __post_init__(self):
        if not self.intents or not self.slots:
            raise DataError("grammar needs at least one intent and one slot type")
        for intent, templates in self.intents.items():
            if not templates:
                raise DataError(f"intent {intent!r} has no templates")
            for tpl in templates:
                for label in _SLOT_RE.findall(tpl):
                    if label not in self.slots:
                        raise DataError(f"template {tpl!r} references unknown slot {label!r}")

    def words(self) -> list[str]:
        """Every surface word the grammar can emit, deduplicated, sorted."""
        bag: set[str] = set()
        for templates in self.intents.values():
            for tpl in templates:
                bag.update(_SLOT_RE.sub(" ", tpl).split())
        for values in self.slots.values():
            for v in values:
                bag.update(v.split())
        return sorted(bag)


def default_grammar() -> SynthGrammar:
    cities = [
        "boston",
        "denver",
        "atlanta",
        "chicago",
        "dallas",
        "memphis",
        "las vegas",
        "new york",
        "saint louis",
        "salt lake city",
    ]
    airlines = ["united", "american", "delta", "northwest", "air canada"]
    return SynthGrammar(
        intents={
            "flight": [
                "show me flights from {fromloc.city_name} to {toloc.city_name}",
                "i want to fly from {fromloc.city_name} to {toloc.city_name}",
                "flights from {fromloc.city_name} to {toloc.city_name} stopping in"
                " {stoploc.city_name}",
                "list {airline.name} flights from {fromloc.city_name} to {toloc.city_name}",
            ],
            "airfare": [
                "how much is a ticket from {fromloc.city_name} to {toloc.city_name}",
                "cheapest fare from {fromloc.city_name} to {toloc.city_name}",
                "what does {airline.name} charge from {fromloc.city_name} to"
                " {toloc.city_name}",
                "fare from {fromloc.city_name} to {toloc.city_name} via {stoploc.city_name}",
            ],
            "ground_service": [
                "what ground transportation is available in {toloc.city_name}",
                "how do i get downtown in {toloc.city_name}",
                "show ground transportation for {toloc.city_name}",
                "is there a shuttle in {toloc.city_name}",
            ],
        },
        slots={
            "fromloc.city_name": cities,
            "toloc.city_name": cities,
            "stoploc.city_name": cities[:6],
            "airline.name": airlines,
        },
    )


# ---------------------------------------------------------------------------
# word -> tone-signature audio


def word_signatures(words) -> dict[str, tuple]:
    """Deterministic per-word tone tuples (freq Hz each); collisions re-salted."""
    table: dict[str, tuple] = {}
    used: set[tuple] = set()
    for word in sorted(set(words)):
        salt = 0
        while True:
            digest = hashlib.sha256(f"{word}#{salt}".encode()).digest()
            n_tones = 2 + digest[0] % 2
            sig = tuple(320.0 + 12.0 * digest[1 + i] for i in range(n_tones))
            if sig not in used:
                break
            salt += 1
        table[word] = sig
        used.add(sig)
    return table


def render_text(text: str, signatures: dict[str, tuple], sr: int = SAMPLE_RATE) -> AudioSignal:
    tone_n = int(TONE_SECONDS * sr)
    gap = np.zeros(int(GAP_SECONDS * sr), dtype=np.float32)
    ramp = np.minimum(np.arange(tone_n) / (0.005 * sr), 1.0)
    envelope = (np.minimum(ramp, ramp[::-1]) * 0.4).astype(np.float32)
    t = np.arange(tone_n) / sr
    chunks = []
    for word in text.split():
        for freq in signatures[word]:
            chunks.append((envelope * np.sin(2 * np.pi * freq * t)).astype(np.float32))
        chunks.append(gap)
    return AudioSignal(np.concatenate(chunks) if chunks else np.zeros(0, np.float32), sr)


# ---------------------------------------------------------------------------
# generation


def generate_corpus(
    grammar: SynthGrammar,
    n: int,
    seed: int,
    out_dir=None,
    prefix: str = "utt",
) -> list[Utterance]:
    """n deterministic utterances; audio WAVs written when out_dir is given.

    Intents and their templates are cycled so coverage of all intents and
    slot types is guaranteed once n covers the template inventory; only
    slot values are sampled from the seeded stream.
    """
    if n < 1:
        raise DataError(f"corpus size must be >= 1, got {n}")
    rng = np.random.default_rng(seed)
    signatures = word_signatures(grammar.words())
    intents = sorted(grammar.intents)
    out_dir = Path(out_dir).resolve() if out_dir is not None else None
    if out_dir is not None:
        (out_dir / "audio").mkdir(parents=True, exist_ok=True)

    corpus: list[Utterance] = []
    for i in range(n):
        intent = intents[i % len(intents)]
        templates = grammar.intents[intent]
        template = templates[(i // len(intents)) % len(templates)]
        entities: list[EntityAnnotation] = []
        parts: list[str] = []
        cursor = 0
        for m in _SLOT_RE.finditer(template):
            parts.append(template[cursor : m.start()])
            label = m.group(1)
            lexicon = grammar.slots[label]
            value = lexicon[int(rng.integers(len(lexicon)))]
            entities.append(EntityAnnotation(label, value.split()))
            parts.append(value)
            cursor = m.end()
        parts.append(template[cursor:])
        text = " ".join("".join(parts).split())
        utt = Utterance(f"{prefix}{i:05d}", text, SemanticFrame(intent, entities))
        if out_dir is not None:
            wav_path = out_dir / "audio" / f"{utt.id}.wav"
            write_wav(wav_path, render_text(text, signatures))
            utt.audio = str(wav_path)
        corpus.append(utt)
    return corpus


def validate_corpus(corpus) -> list[str]:
    """Utterance-invariant scan; returns one message per violation."""
    problems = []
    for utt in corpus:
        words = utt.text.split()
        for ent in utt.frame.entities:
            k = len(ent.value)
            if not any(words[j : j + k] == ent.value for j in range(len(words) - k + 1)):
                problems.append(f"{utt.id}: entity value {ent.value_text!r} not in transcript")
        tokens = encode_iob(utt.frame)
        frame, warn = decode_iob(tokens)
        if warn or frame != utt.frame:
            problems.append(f"{utt.id}: frame does not round-trip its token sequence")
    return problems


# ---------------------------------------------------------------------------
# manifests


def _relativize(value, base: Path):
    if value is None:
        return None
    p = Path(value)
    try:
        return str(p.relative_to(base))
    except ValueError:
        return str(p)


def save_manifest(corpus, path) -> None:
    """Paths under the manifest's directory are stored relative to it."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    base = path.parent.resolve()
    with open(path, "w") as f:
        for utt in corpus:
            doc = utt.to_json()
            doc["audio"] = _relativize(doc["audio"], base)
            doc["features"] = _relativize(doc["features"], base)
            f.write(json.dumps(doc) + "\n")


def _resolve(base: Path, value, lineno: int, key: str, check_exists: bool):
    if value is None:
        return None
    p = Path(value)
    if not p.is_absolute():
        p = base / p
    if check_exists and not p.exists():
        raise DataError(f"line {lineno}: {key} file not found: {p}")
    return str(p)


def load_manifest(path, strict: bool = False, check_files: bool = True) -> list[Utterance]:
    path = Path(path)
    base = path.parent
    corpus: list[Utterance] = []
    with open(path) as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                doc = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"{path}: line {lineno}: malformed JSON ({exc})") from exc
            for key in ("id", "text", "intent", "entities"):
                if key not in doc:
                    raise DataError(f"{path}: line {lineno}: missing field {key!r}")
            frame = SemanticFrame.from_json(doc)
            utt = Utterance(
                doc["id"],
                doc["text"],
                frame,
                audio=_resolve(base, doc.get("audio"), lineno, "audio", check_files),
                features=_resolve(base, doc.get("features"), lineno, "features", check_files),
            )
            words = utt.text.split()
            for ent in frame.entities:
                k = len(ent.value)
                if not any(words[j : j + k] == ent.value for j in range(len(words) - k + 1)):
                    msg = f"{path}: line {lineno}: entity {ent.value_text!r} not in transcript"
                    if strict:
                        raise DataError(msg)
                    _warnings.warn(msg)
            corpus.append(utt)
    return corpus


# ---------------------------------------------------------------------------
# augmentation and featurization


def augment_speed(corpus, factors, out_dir) -> list[Utterance]:
    """|corpus|x|factors| utterances with perturbed audio; frames unchanged."""
    out_dir = Path(out_dir).resolve()
    (out_dir / "audio").mkdir(parents=True, exist_ok=True)
    out: list[Utterance] = []
    for utt in corpus:
        if utt.audio is None:
            raise DataError(f"{utt.id}: speed augmentation needs audio, only features present")
        signal = read_audio(utt.audio)
        for factor in factors:
            new_id = f"{utt.id}-sp{factor}"
            wav_path = out_dir / "audio" / f"{new_id}.wav"
            write_wav(wav_path, speed_perturb(signal, factor))
            out.append(replace(utt, id=new_id, audio=str(wav_path), features=None))
    return out


def featurize_corpus(corpus, out_dir, cfg: FrontendConfig | None = None) -> list[Utterance]:
    """Compute filterbank features for every utterance with audio."""
    out_dir = Path(out_dir).resolve()
    (out_dir / "feats").mkdir(parents=True, exist_ok=True)
    out = []
    for utt in corpus:
        if utt.audio is None:
            if utt.features is None:
                raise DataError(f"{utt.id}: neither audio nor features present")
            out.append(utt)
            continue
        frames = compute_filterbank(read_audio(utt.audio), cfg)
        feat_path = out_dir / "feats" / f"{utt.id}.sluf"
        save_features(feat_path, frames)
        out.append(replace(utt, features=str(feat_path)))
    return out


# ---------------------------------------------------------------------------
# tokenizer feeds


def transcript_lines(corpus) -> list[str]:
    return [utt.text for utt in corpus]


def semantic_lines(corpus) -> list[str]:
    return [" ".join(encode_iob(utt.frame)) for utt in corpus]


def corpus_tag_inventory(corpus) -> list[str]:
    labels = sorted({e.label for utt in corpus for e in utt.frame.entities})
    intents = sorted({utt.frame.intent for utt in corpus})
    return iob_tag_inventory(labels, intents)
