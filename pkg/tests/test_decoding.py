"""Beam search against exhaustive enumeration, ensembling, and the cascade."""

import itertools
import math

import numpy as np
import pytest

import slukit.tensor as T
from slukit.decoding import (
    FORCE_FINISH_WARNING,
    BeamConfig,
    Hypothesis,
    beam_decode,
    cascade_decode,
    ensemble_decode,
    hypothesis_record,
    strip_eos,
)
from slukit.errors import ConfigError, UnparseableOutputError
from slukit.model import MultiTaskModel, toy_config

BOS, EOS = 1, 2


class _StubDecoder:
    def __init__(self, vocab):
        self.vocab = vocab


class StubModel:
    """Fixed per-position next-token distributions, prefix-independent."""

    def __init__(self, tables):
        # tables: [position][vocab] probabilities; last row reused beyond it
        self.tables = [np.asarray(row, dtype=np.float64) for row in tables]
        self._decoder = _StubDecoder(len(self.tables[0]))

    def decoder_for(self, task):
        return self._decoder

    def encode(self, task, inputs):
        return T.Tensor(np.zeros((1, 1, 1), dtype=np.float32)), np.array([1])

    def decode_logits(self, task, memory, lens, prefix):
        n, l = prefix.shape
        row = self.tables[min(l - 1, len(self.tables) - 1)]
        logits = np.log(row)[None, None, :].repeat(n, axis=0).repeat(l, axis=1)
        return T.Tensor(logits.astype(np.float32))


def seq_log_prob(model: StubModel, tokens) -> float:
    total = 0.0
    for pos, tok in enumerate(tokens):
        row = model.tables[min(pos, len(model.tables) - 1)]
        total += math.log(row[tok])
    return total


def exhaustive_best(models, cfg: BeamConfig, vocab: int):
    """Enumerate every sequence the beam could produce and rank identically."""

    def mean_lp(pos):
        rows = []
        for m in models:
            row = m.tables[min(pos, len(m.tables) - 1)]
            rows.append(np.log(row) - math.log(row.sum()))
        mean = np.mean(rows, axis=0)
        return mean - math.log(np.exp(mean).sum())

    scored = []
    for length in range(1, cfg.max_len + 1):
        for body in itertools.product(range(vocab), repeat=length):
            if EOS in body[:-1]:
                continue  # eos terminates a sequence
            if body[-1] == EOS:
                lp = sum(mean_lp(i)[t] for i, t in enumerate(body))
                scored.append((tuple(body), lp))
            elif length == cfg.max_len:
                lp = sum(mean_lp(i)[t] for i, t in enumerate(body))
                scored.append((tuple(body), lp))
    alpha = cfg.length_penalty
    scored.sort(key=lambda s: (-(s[1] / len(s[0]) ** alpha), s[0]))
    return scored[0]


def test_beam_config_validation():
    with pytest.raises(ConfigError):
        BeamConfig(beam_size=0)
    with pytest.raises(ConfigError):
        BeamConfig(max_len=0)
    with pytest.raises(ConfigError):
        BeamConfig(length_penalty=-1)


def test_beam_one_is_greedy():
    # greedy path: token 3 (p=.5), then eos (p=.6)
    model = StubModel(
        [
            [0.05, 0.05, 0.1, 0.5, 0.3],
            [0.1, 0.1, 0.6, 0.1, 0.1],
        ]
    )
    best, _ = beam_decode(model, "s2ie", {}, BeamConfig(beam_size=1, max_len=6))
    assert best.tokens == (3, EOS)
    assert best.finished and not best.warnings


def test_beam_recovers_exhaustive_optimum_on_stub():
    rng = np.random.default_rng(0)
    for _ in range(20):
        rows = rng.dirichlet(np.ones(3), size=3)
        model = StubModel(rows)
        cfg = BeamConfig(beam_size=3**4, max_len=4)
        best, _ = beam_decode(model, "s2ie", {}, cfg)
        want_tokens, want_lp = exhaustive_best([model], cfg, 3)
        assert best.tokens == want_tokens
        # engine sees f32-quantized logits, the oracle works in f64
        assert best.log_prob == pytest.approx(want_lp, abs=1e-5)


def test_tie_breaks_lexicographically():
    # position 0: eos nearly impossible, tokens 0 and 3 exactly tied;
    # position 1: eos certain enough that both finish at length 2
    model = StubModel(
        [
            [0.4499999, 0.05, 1e-7, 0.4499999, 0.05],
            [0.01, 0.01, 0.95, 0.01, 0.02],
        ]
    )
    cfg = BeamConfig(beam_size=8, max_len=3, length_penalty=0.0)
    best, nbest = beam_decode(model, "s2ie", {}, cfg)
    assert best.tokens == (0, EOS)
    tied = [h for h in nbest if h.log_prob == best.log_prob]
    assert (3, EOS) in [h.tokens for h in tied]


def test_force_finish_warning():
    # eos has vanishing probability: the beam must hit max_len and warn
    model = StubModel([[0.5, 0.3, 1e-12, 0.2 - 1e-12]])
    best, _ = beam_decode(model, "s2ie", {}, BeamConfig(beam_size=2, max_len=3))
    assert len(best.tokens) == 3
    assert best.finished
    assert FORCE_FINISH_WARNING in best.warnings


def test_scores_monotone_in_extensions():
    # uniform distribution: every appended token subtracts ln(4), so the
    # accumulated log-prob strictly decreases with hypothesis length
    model = StubModel([np.full(4, 0.25)])
    _, nbest = beam_decode(model, "s2ie", {}, BeamConfig(beam_size=4, max_len=4))
    for h in nbest:
        assert h.log_prob == pytest.approx(len(h.tokens) * math.log(0.25), abs=1e-6)
        assert h.log_prob <= 0.0


def test_ensemble_of_identical_models_equals_single():
    rows = np.random.default_rng(1).dirichlet(np.ones(4), size=2)
    single, _ = beam_decode(StubModel(rows), "s2ie", {}, BeamConfig(beam_size=3, max_len=4))
    double, _ = ensemble_decode(
        [StubModel(rows), StubModel(rows)], "s2ie", {}, BeamConfig(beam_size=3, max_len=4)
    )
    assert single.tokens == double.tokens
    assert single.log_prob == pytest.approx(double.log_prob, abs=1e-12)


def test_ensemble_of_one_is_bit_identical():
    rows = np.random.default_rng(2).dirichlet(np.ones(5), size=3)
    cfg = BeamConfig(beam_size=3, max_len=5)
    a, na = beam_decode(StubModel(rows), "s2ie", {}, cfg)
    b, nb = ensemble_decode([StubModel(rows)], "s2ie", {}, cfg)
    assert a == b
    assert na == nb


def test_ensemble_mean_argmax_matches_direct_computation():
    # individual argmaxes are 0 and 3; the averaged log-probs prefer 1
    pa = np.array([0.40, 0.35, 0.15, 0.10])
    pb = np.array([0.10, 0.35, 0.15, 0.40])
    ma, mb = StubModel([pa]), StubModel([pb])
    mean_lp = 0.5 * (np.log(pa) + np.log(pb))
    mean_lp -= math.log(np.exp(mean_lp).sum())
    first = int(np.argmax(mean_lp))
    assert first not in (int(np.argmax(pa)), int(np.argmax(pb)))
    best, _ = ensemble_decode([ma, mb], "s2ie", {}, BeamConfig(beam_size=1, max_len=2))
    assert best.tokens[0] == first


def test_ensemble_vocab_mismatch():
    with pytest.raises(ConfigError, match="vocab"):
        ensemble_decode(
            [StubModel([np.full(4, 0.25)]), StubModel([np.full(5, 0.2)])],
            "s2ie",
            {},
            BeamConfig(),
        )
    with pytest.raises(ConfigError):
        ensemble_decode([], "s2ie", {}, BeamConfig())


def test_beam_decode_real_model_deterministic(rng):
    model = MultiTaskModel(
        toy_config(24, 16, attn_dim=16, heads=2, ff_units=32, conv_channels=4, feat_dim=11),
        seed=0,
    )
    inputs = {
        "feats": rng.normal(size=(1, 29, 11)).astype(np.float32),
        "feat_lens": np.array([29]),
    }
    cfg = BeamConfig(beam_size=3, max_len=8)
    a, _ = beam_decode(model, "s2ie", inputs, cfg)
    b, _ = beam_decode(model, "s2ie", inputs, cfg)
    assert a == b
    assert all(t < 17 for t in a.tokens)  # semantic vocab + nothing else


def test_cascade_glue():
    # stage 1 deterministically emits [5, 6, eos]; stage 2 te model sees
    # src [5, 6] and deterministically emits [4, eos]
    s2t = StubModel(
        [
            [0.01, 0.01, 0.01, 0.01, 0.01, 0.9, 0.05],
            [0.01, 0.01, 0.01, 0.01, 0.01, 0.05, 0.9],
            [0.01, 0.01, 0.94, 0.01, 0.01, 0.01, 0.01],
        ]
    )

    class RecordingStub(StubModel):
        def encode(self, task, inputs):
            self.saw = inputs
            return super().encode(task, inputs)

    t2ie = RecordingStub(
        [
            [0.01, 0.01, 0.01, 0.01, 0.95, 0.005, 0.005],
            [0.01, 0.01, 0.95, 0.01, 0.01, 0.005, 0.005],
        ]
    )
    transcript, semantic = cascade_decode(s2t, t2ie, {}, BeamConfig(beam_size=1, max_len=4))
    assert strip_eos(transcript.tokens) == (5, 6)
    assert list(t2ie.saw["src_ids"][0]) == [5, 6]
    assert semantic.tokens == (4, EOS)


def test_cascade_empty_transcription():
    s2t = StubModel([[0.01, 0.01, 0.96, 0.01, 0.01]])
    t2ie = StubModel([[0.2, 0.2, 0.2, 0.2, 0.2]])
    with pytest.raises(UnparseableOutputError, match="empty"):
        cascade_decode(s2t, t2ie, {}, BeamConfig(beam_size=1, max_len=3))


def test_hypothesis_record_shapes():
    class MiniVocab:
        def decode(self, ids):
            return " ".join({5: "O-INT-flight", 6: "home"}.get(i, "?") for i in ids)

    hyp = Hypothesis((5, 6, 5, EOS), -1.5, True, [])
    record = hypothesis_record("utt1", hyp, MiniVocab(), BeamConfig(), semantic=True)
    assert record["id"] == "utt1"
    assert record["tokens"] == [5, 6, 5, EOS]
    assert record["text"] == "O-INT-flight home O-INT-flight"
    assert record["frame"]["intent"] == "flight"
    assert record["score"] == pytest.approx(-1.5 / 4**0.6)

    bad = Hypothesis((6, EOS), -0.5, True, [])
    record = hypothesis_record("utt2", bad, MiniVocab(), BeamConfig(), semantic=True)
    assert record["frame"] is None
    assert any("unparseable" in w for w in record["warnings"])
