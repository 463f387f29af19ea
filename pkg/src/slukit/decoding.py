"""Beam search, model ensembling, and the cascaded reference pipeline.

One engine drives both single-model and ensemble decoding: per step,
every model scores the live prefixes, the per-model log-softmax vectors
are averaged and renormalized, and the beam keeps the highest-scoring
extensions. ``beam_decode`` is the one-model special case of the same
code path, so an ensemble of one is bit-identical to plain decoding.

Ranking uses length-normalized scores, log-prob / len(tokens)^alpha,
with ties broken toward the lexicographically smaller token sequence.
Hypotheses that hit the step budget without eos are force-finished and
carry a warning.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ConfigError, NumericError, UnparseableOutputError
from .iob import SemanticFrame, decode_iob

FORCE_FINISH_WARNING = "max_len reached without eos; hypothesis force-finished"


@dataclass
class BeamConfig:
    beam_size: int = 8
    max_len: int = 48
    length_penalty: float = 0.6  # alpha in score / len^alpha

    def __post_init__(self):
        if self.beam_size < 1:
            raise ConfigError("beam_size must be >= 1")
        if self.max_len < 1:
            raise ConfigError("max_len must be >= 1")
        if self.length_penalty < 0:
            raise ConfigError("length_penalty must be >= 0")


@dataclass
class Hypothesis:
    tokens: tuple  # generated ids, eos included when it was produced
    log_prob: float
    finished: bool
    warnings: list = field(default_factory=list)

    def score(self, alpha: float) -> float:
        return self.log_prob / (max(len(self.tokens), 1) ** alpha)


def _mean_log_probs(step_logits: list) -> np.ndarray:
    """Average per-model log-softmax rows, renormalized per row."""
    stacked = np.stack(
        [T.log_softmax(lg, axis=-1).data.astype(np.float64) for lg in step_logits]
    )
    mean = stacked.mean(axis=0)
    norm = mean - _logsumexp_rows(mean)
    total = np.exp(norm).sum(axis=-1)
    if np.abs(total - 1.0).max() > 1e-5:
        raise NumericError("ensemble renormalization failed to produce a distribution")
    return norm


def _logsumexp_rows(x: np.ndarray) -> np.ndarray:
    m = x.max(axis=-1, keepdims=True)
    return m + np.log(np.exp(x - m).sum(axis=-1, keepdims=True))


def ensemble_decode(models, task, inputs, cfg: BeamConfig, bos_id=1, eos_id=2):
    """Beam search over the averaged next-token distribution of ``models``.

    inputs: the batch dict for one utterance (leading dimension 1).
    Returns (best, nbest) with nbest sorted best-first.
    """
    if not models:
        raise ConfigError("ensemble needs at least one model")
    vocabs = {m.decoder_for(task).vocab for m in models}
    if len(vocabs) > 1:
        raise ConfigError(f"models disagree on output vocab: {sorted(vocabs)}")

    memories = [m.encode(task, inputs) for m in models]
    live = [((), 0.0)]  # (generated tokens, accumulated log-prob)
    finished: list[Hypothesis] = []

    for _ in range(cfg.max_len):
        n = len(live)
        prefix = np.array(
            [(bos_id,) + tokens for tokens, _ in live], dtype=np.int64
        )
        step_logits = []
        for model, (memory, lens) in zip(models, memories):
            tiled = T.Tensor(np.repeat(memory.data, n, axis=0))
            logits = model.decode_logits(task, tiled, np.repeat(lens, n), prefix)
            step_logits.append(T.Tensor(logits.data[:, -1]))
        lp = _mean_log_probs(step_logits)  # [n, V]

        candidates = []
        for i, (tokens, logp) in enumerate(live):
            for v in range(lp.shape[1]):
                candidates.append((tokens + (v,), logp + float(lp[i, v])))
        candidates.sort(key=lambda c: (-c[1], c[0]))

        # finished hypotheses occupy beam slots, so beam_size=1 is greedy
        live = []
        for tokens, logp in candidates[: cfg.beam_size]:
            if tokens[-1] == eos_id:
                finished.append(Hypothesis(tokens, logp, True))
            else:
                live.append((tokens, logp))
        if not live:
            break

    for tokens, logp in live:
        finished.append(Hypothesis(tokens, logp, True, [FORCE_FINISH_WARNING]))

    alpha = cfg.length_penalty
    finished.sort(key=lambda h: (-h.score(alpha), h.tokens))
    return finished[0], finished


def beam_decode(model, task, inputs, cfg: BeamConfig, bos_id=1, eos_id=2):
    """Single-model beam search; same engine as the ensemble path."""
    return ensemble_decode([model], task, inputs, cfg, bos_id, eos_id)


def strip_eos(tokens, eos_id=2) -> tuple:
    return tuple(t for t in tokens if t != eos_id)


def cascade_decode(
    s2t_model,
    t2ie_model,
    inputs,
    cfg: BeamConfig,
    bos_id=1,
    eos_id=2,
):
    """Speech -> transcription -> semantics, the two-stage reference path.

    Returns (transcript hypothesis, semantic hypothesis). The transcript
    token ids feed the second stage directly; both models must share the
    text vocabulary.
    """
    transcript, _ = beam_decode(s2t_model, "s2t", inputs, cfg, bos_id, eos_id)
    src = strip_eos(transcript.tokens, eos_id)
    if not src:
        raise UnparseableOutputError("cascade stage 1 produced an empty transcription")
    text_batch = {
        "src_ids": np.array([src], dtype=np.int64),
        "src_lens": np.array([len(src)]),
    }
    semantic, _ = beam_decode(t2ie_model, "t2ie", text_batch, cfg, bos_id, eos_id)
    return transcript, semantic


def hypothesis_record(utt_id: str, hyp: Hypothesis, vocab, cfg: BeamConfig, semantic: bool):
    """The JSONL row for one decoded utterance."""
    text = vocab.decode(list(strip_eos(hyp.tokens)))
    record = {
        "id": utt_id,
        "tokens": [int(t) for t in hyp.tokens],
        "text": text,
        "frame": None,
        "score": hyp.score(cfg.length_penalty),
        "warnings": list(hyp.warnings),
    }
    if semantic:
        try:
            frame, warnings = decode_iob(text.split())
            record["frame"] = frame.to_json()
            record["warnings"].extend(warnings)
        except UnparseableOutputError as exc:
            record["warnings"].append(f"unparseable semantics: {exc}")
    return record


def frame_from_record(record: dict) -> SemanticFrame | None:
    if record.get("frame") is None:
        return None
    return SemanticFrame.from_json(record["frame"])
