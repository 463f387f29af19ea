"""Byte-pair-encoding subword vocabularies for transcripts and semantics.

Words are split into characters with a "▁" separator symbol between
words; the separator is an ordinary mergeable symbol, so frequent words
can absorb their boundary. Tag and intent tokens are registered as
atomic pieces: they enter the symbol stream whole, never merge with
neighbors, and always encode to exactly one id.

Merging is greedy most-frequent-pair, counted per adjacent position,
with ties broken by the lexicographically smallest concatenated pair.
Training stops at the vocab budget or when no pair occurs twice.
"""

from __future__ import annotations

import json
from pathlib import Path

from .errors import VocabError

BOUNDARY = "▁"  # ▁
PAD, BOS, EOS, UNK = "<pad>", "<bos>", "<eos>", "<unk>"
VOCAB_FORMAT_VERSION = 1


class BpeVocab:
    """Immutable trained vocabulary: ordered pieces plus ordered merges."""

    def __init__(self, pieces: list[str], merges: list[tuple[str, str]], atomic: list[str]):
        self.pieces = list(pieces)
        self.merges = [tuple(m) for m in merges]
        self.atomic = list(atomic)
        self.piece_to_id = {p: i for i, p in enumerate(self.pieces)}
        if len(self.piece_to_id) != len(self.pieces):
            raise VocabError("duplicate piece in vocabulary")
        self._protected = {PAD, BOS, EOS, UNK, *atomic}

    @property
    def size(self) -> int:
        return len(self.pieces)

    @property
    def pad_id(self) -> int:
        return self.piece_to_id[PAD]

    @property
    def bos_id(self) -> int:
        return self.piece_to_id[BOS]

    @property
    def eos_id(self) -> int:
        return self.piece_to_id[EOS]

    @property
    def unk_id(self) -> int:
        return self.piece_to_id[UNK]

    # -- text <-> symbols ---------------------------------------------------

    def _stream(self, text: str) -> list[str]:
        """Whitespace-split text to the pre-merge symbol stream."""
        symbols: list[str] = []
        for word in text.split():
            if symbols:
                symbols.append(BOUNDARY)
            if word in self._protected:
                symbols.append(word)
            else:
                symbols.extend(word)
        return symbols

    def _apply_merges(self, symbols: list[str]) -> list[str]:
        for x, y in self.merges:
            i = 0
            out: list[str] = []
            while i < len(symbols):
                if (
                    i + 1 < len(symbols)
                    and symbols[i] == x
                    and symbols[i + 1] == y
                    and symbols[i] not in self._protected
                    and symbols[i + 1] not in self._protected
                ):
                    out.append(x + y)
                    i += 2
                else:
                    out.append(symbols[i])
                    i += 1
            symbols = out
        return symbols

    def encode(self, text: str) -> list[int]:
        unk = self.unk_id
        return [self.piece_to_id.get(s, unk) for s in self._apply_merges(self._stream(text))]

    def decode(self, ids) -> str:
        drop = {self.pad_id, self.bos_id, self.eos_id, self.unk_id}
        out: list[str] = []
        for i in ids:
            i = int(i)
            if not 0 <= i < self.size:
                raise VocabError(f"token id {i} out of range [0, {self.size})")
            if i in drop:
                continue
            out.append(self.pieces[i])
        return " ".join("".join(out).replace(BOUNDARY, " ").split())

    # -- persistence ---------------------------------------------------------

    def save(self, path) -> None:
        doc = {
            "version": VOCAB_FORMAT_VERSION,
            "specials": {"pad": PAD, "bos": BOS, "eos": EOS, "unk": UNK, "atomic": self.atomic},
            "pieces": self.pieces,
            "merges": [list(m) for m in self.merges],
        }
        Path(path).write_text(json.dumps(doc, ensure_ascii=False, indent=1))

    @classmethod
    def load(cls, path) -> "BpeVocab":
        try:
            doc = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise VocabError(f"{path}: unreadable vocabulary file ({exc})") from exc
        if doc.get("version") != VOCAB_FORMAT_VERSION:
            raise VocabError(f"{path}: unsupported vocabulary version {doc.get('version')!r}")
        return cls(doc["pieces"], [tuple(m) for m in doc["merges"]], doc["specials"]["atomic"])


def train_bpe(corpus, vocab_size: int, atomic_tokens=()) -> BpeVocab:
    """Learn merges over ``corpus`` until ``vocab_size`` pieces exist."""
    corpus = list(corpus)
    if not corpus or all(not line.split() for line in corpus):
        raise VocabError("cannot train a vocabulary on an empty corpus")
    atomic: list[str] = []
    for tok in atomic_tokens:
        if tok not in atomic:
            atomic.append(tok)
    protected = {PAD, BOS, EOS, UNK, *atomic}

    chars: set[str] = set()
    for line in corpus:
        for word in line.split():
            if word not in protected:
                chars.update(word)
    base = [PAD, BOS, EOS, UNK, *atomic, BOUNDARY, *sorted(chars)]
    if vocab_size < len(base):
        raise VocabError(f"vocab_size {vocab_size} cannot hold the {len(base)} base pieces")

    scratch = BpeVocab(base, [], atomic)
    streams = [scratch._stream(line) for line in corpus]
    merges: list[tuple[str, str]] = []
    pieces = list(base)
    known = set(pieces)

    while len(pieces) < vocab_size:
        counts: dict[tuple[str, str], int] = {}
        for stream in streams:
            for a, b in zip(stream, stream[1:]):
                if a in protected or b in protected:
                    continue
                counts[(a, b)] = counts.get((a, b), 0) + 1
        # candidates that would collide with a protected literal are skipped
        viable = {p: c for p, c in counts.items() if c >= 2 and p[0] + p[1] not in known}
        if not viable:
            break
        best = min(viable, key=lambda p: (-viable[p], p[0] + p[1], p))
        merges.append(best)
        pieces.append(best[0] + best[1])
        known.add(best[0] + best[1])
        x, y = best
        for si, stream in enumerate(streams):
            i = 0
            out: list[str] = []
            while i < len(stream):
                if i + 1 < len(stream) and stream[i] == x and stream[i + 1] == y:
                    out.append(x + y)
                    i += 2
                else:
                    out.append(stream[i])
                    i += 1
            streams[si] = out

    return BpeVocab(pieces, merges, atomic)
