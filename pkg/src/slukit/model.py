"""Transformer encoder/decoder blocks wired into three tied tasks.

One model owns four parameter blocks — speech encoder, text encoder,
semantic decoder, text decoder — plus the conv subsampler, optional
input projection, feature-normalization buffers and two CTC heads. Task
routing:

    S2IE: speech_encoder -> semantic_decoder   (+ ctc_semantic head)
    S2T:  speech_encoder -> text_decoder       (+ ctc_text head)
    T2IE: text_encoder   -> semantic_decoder

Tying is by object identity: S2IE and S2T literally hold the same
speech_encoder instance, S2IE and T2IE the same semantic_decoder, so
bit-level parameter sharing is structural, not copied. Every component
draws its initial weights from its own seeded stream, which keeps
initialization independent of which tasks a training run enables.

Blocks are pre-norm residual with sinusoidal positions; attention masks
are additive (0 keeps, -1e9 removes).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import tensor as T
from .ctc import ctc_loss
from .errors import ConfigError, DataError, DimensionError
from .features import FeatureNormalizer, project_features

NEG = -1e9

S2IE, S2T, T2IE = "s2ie", "s2t", "t2ie"
TASKS = (S2IE, S2T, T2IE)


@dataclass
class ModelConfig:
    text_vocab: int
    sem_vocab: int
    enc_layers: int = 2
    dec_layers: int = 2
    attn_dim: int = 64
    heads: int = 4
    ff_units: int = 256
    dropout: float = 0.1
    ctc_weight: float = 0.5
    feat_dim: int = 83
    external_dim: int | None = None
    conv_channels: int = 16
    input_layer: str = "conv2d"
    ctc_tasks: tuple = (S2IE, S2T)
    max_len: int = 72

    def __post_init__(self):
        if self.attn_dim % self.heads:
            raise ConfigError(f"attn_dim {self.attn_dim} not divisible by {self.heads} heads")
        if self.enc_layers < 1 or self.dec_layers < 1:
            raise ConfigError("encoder and decoder need at least one layer each")
        if not 0.0 <= self.ctc_weight <= 1.0:
            raise ConfigError(f"ctc_weight must be in [0,1], got {self.ctc_weight}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must be in [0,1), got {self.dropout}")
        if self.input_layer not in ("conv2d", "embed"):
            raise ConfigError(f"unknown input_layer {self.input_layer!r}")
        self.ctc_tasks = tuple(self.ctc_tasks)
        if not set(self.ctc_tasks) <= {S2IE, S2T}:
            raise ConfigError(f"ctc_tasks must be speech tasks, got {self.ctc_tasks}")

    def to_json(self) -> dict:
        doc = {k: getattr(self, k) for k in self.__dataclass_fields__}
        doc["ctc_tasks"] = list(self.ctc_tasks)
        return doc

    @classmethod
    def from_json(cls, doc: dict) -> "ModelConfig":
        return cls(**doc)


def toy_config(text_vocab: int, sem_vocab: int, **overrides) -> ModelConfig:
    return replace(ModelConfig(text_vocab, sem_vocab), **overrides)


def base_config(text_vocab: int, sem_vocab: int, **overrides) -> ModelConfig:
    cfg = ModelConfig(
        text_vocab,
        sem_vocab,
        enc_layers=8,
        dec_layers=4,
        attn_dim=256,
        heads=4,
        ff_units=2048,
        ctc_weight=0.5,
        conv_channels=256,
    )
    return replace(cfg, **overrides)


def large_config(text_vocab: int, sem_vocab: int, **overrides) -> ModelConfig:
    cfg = ModelConfig(
        text_vocab,
        sem_vocab,
        enc_layers=12,
        dec_layers=6,
        attn_dim=512,
        heads=8,
        ff_units=2048,
        ctc_weight=0.5,
        conv_channels=512,
    )
    return replace(cfg, **overrides)


PRESETS = {"toy": toy_config, "base": base_config, "large": large_config}


# ---------------------------------------------------------------------------
# building blocks


class Linear:
    def __init__(self, rng, din: int, dout: int):
        self.w = T.parameter(rng, (din, dout), fan_in=din)
        self.b = T.parameter(rng, (dout,), fan_in=din)

    def __call__(self, x: T.Tensor) -> T.Tensor:
        return T.add(T.matmul(x, self.w), self.b)

    def params(self, prefix: str):
        return [(prefix + ".w", self.w), (prefix + ".b", self.b)]


class LayerNorm:
    def __init__(self, dim: int):
        self.gain = T.Tensor(np.ones(dim, dtype=T.default_dtype()), requires_grad=True)
        self.bias = T.Tensor(np.zeros(dim, dtype=T.default_dtype()), requires_grad=True)

    def __call__(self, x: T.Tensor) -> T.Tensor:
        return T.layer_norm(x, self.gain, self.bias)

    def params(self, prefix: str):
        return [(prefix + ".gain", self.gain), (prefix + ".bias", self.bias)]


class MultiHeadAttention:
    def __init__(self, rng, dim: int, heads: int):
        self.heads = heads
        self.wq = Linear(rng, dim, dim)
        self.wk = Linear(rng, dim, dim)
        self.wv = Linear(rng, dim, dim)
        self.wo = Linear(rng, dim, dim)

    def __call__(self, q_in, kv_in, mask=None, need_weights: bool = False):
        b, lq, dim = q_in.shape
        lk = kv_in.shape[1]
        h, dh = self.heads, dim // self.heads

        def split(x, length):
            return T.transpose(T.reshape(x, (b, length, h, dh)), (0, 2, 1, 3))

        q = split(self.wq(q_in), lq)
        k = split(self.wk(kv_in), lk)
        v = split(self.wv(kv_in), lk)
        scores = T.scale(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dh))
        if mask is not None:
            scores = T.add(scores, mask)
        probs = T.softmax(scores, axis=-1)
        ctx = T.reshape(T.transpose(T.matmul(probs, v), (0, 2, 1, 3)), (b, lq, dim))
        out = self.wo(ctx)
        return (out, probs) if need_weights else out

    def params(self, prefix: str):
        out = []
        for name in ("wq", "wk", "wv", "wo"):
            out.extend(getattr(self, name).params(f"{prefix}.{name}"))
        return out


class FeedForward:
    def __init__(self, rng, dim: int, hidden: int):
        self.w1 = Linear(rng, dim, hidden)
        self.w2 = Linear(rng, hidden, dim)

    def __call__(self, x):
        return self.w2(T.relu(self.w1(x)))

    def params(self, prefix: str):
        return self.w1.params(prefix + ".w1") + self.w2.params(prefix + ".w2")


def positional_encoding(length: int, dim: int) -> np.ndarray:
    pos = np.arange(length, dtype=np.float64)[:, None]
    idx = np.arange(0, dim, 2, dtype=np.float64)[None, :]
    angle = pos / np.power(10000.0, idx / dim)
    pe = np.zeros((length, dim), dtype=np.float64)
    pe[:, 0::2] = np.sin(angle)
    pe[:, 1::2] = np.cos(angle)[:, : dim // 2]
    return pe.astype(T.default_dtype())


class _Dropout:
    """Binds the config rate; rng comes per-call from the owner."""

    def __init__(self, rate: float):
        self.rate = rate

    def __call__(self, x, rng, training):
        return T.dropout(x, self.rate, rng, training) if rng is not None else x


class EncoderBlock:
    def __init__(self, rng, cfg: ModelConfig):
        self.ln1 = LayerNorm(cfg.attn_dim)
        self.attn = MultiHeadAttention(rng, cfg.attn_dim, cfg.heads)
        self.ln2 = LayerNorm(cfg.attn_dim)
        self.ff = FeedForward(rng, cfg.attn_dim, cfg.ff_units)
        self.drop = _Dropout(cfg.dropout)

    def __call__(self, x, mask, rng, training):
        h = self.ln1(x)
        x = T.add(x, self.drop(self.attn(h, h, mask), rng, training))
        x = T.add(x, self.drop(self.ff(self.ln2(x)), rng, training))
        return x

    def params(self, prefix: str):
        return (
            self.ln1.params(prefix + ".ln1")
            + self.attn.params(prefix + ".attn")
            + self.ln2.params(prefix + ".ln2")
            + self.ff.params(prefix + ".ff")
        )


class DecoderBlock:
    def __init__(self, rng, cfg: ModelConfig):
        self.ln1 = LayerNorm(cfg.attn_dim)
        self.self_attn = MultiHeadAttention(rng, cfg.attn_dim, cfg.heads)
        self.ln2 = LayerNorm(cfg.attn_dim)
        self.cross_attn = MultiHeadAttention(rng, cfg.attn_dim, cfg.heads)
        self.ln3 = LayerNorm(cfg.attn_dim)
        self.ff = FeedForward(rng, cfg.attn_dim, cfg.ff_units)
        self.drop = _Dropout(cfg.dropout)

    def __call__(self, x, memory, causal_mask, mem_mask, rng, training):
        h = self.ln1(x)
        x = T.add(x, self.drop(self.self_attn(h, h, causal_mask), rng, training))
        x = T.add(
            x, self.drop(self.cross_attn(self.ln2(x), memory, mem_mask), rng, training)
        )
        x = T.add(x, self.drop(self.ff(self.ln3(x)), rng, training))
        return x

    def params(self, prefix: str):
        return (
            self.ln1.params(prefix + ".ln1")
            + self.self_attn.params(prefix + ".self_attn")
            + self.ln2.params(prefix + ".ln2")
            + self.cross_attn.params(prefix + ".cross_attn")
            + self.ln3.params(prefix + ".ln3")
            + self.ff.params(prefix + ".ff")
        )


class ConvSubsampler:
    """Two 3x3 stride-2 valid conv stages, then a linear to attn_dim."""

    def __init__(self, rng, cfg: ModelConfig):
        c = cfg.conv_channels
        self.w1 = T.parameter(rng, (3, 3, 1, c), fan_in=9)
        self.b1 = T.parameter(rng, (c,), fan_in=9)
        self.w2 = T.parameter(rng, (3, 3, c, c), fan_in=9 * c)
        self.b2 = T.parameter(rng, (c,), fan_in=9 * c)
        d_out = ConvSubsampler.axis_out(ConvSubsampler.axis_out(cfg.feat_dim))
        self.out = Linear(rng, d_out * c, cfg.attn_dim)
        self.channels = c

    @staticmethod
    def axis_out(n: int) -> int:
        return (n - 1) // 2

    @classmethod
    def out_length(cls, t: int) -> int:
        return cls.axis_out(cls.axis_out(t))

    def __call__(self, feats: T.Tensor) -> T.Tensor:
        b, t, d = feats.shape
        if self.out_length(t) < 1:
            raise DimensionError(f"{t} frames too few for two stride-2 conv stages")
        x = T.reshape(feats, (b, t, d, 1))
        x = T.relu(T.conv3x3s2(x, self.w1, self.b1))
        x = T.relu(T.conv3x3s2(x, self.w2, self.b2))
        b2, t2, d2, c = x.shape
        return self.out(T.reshape(x, (b2, t2, d2 * c)))

    def params(self, prefix: str):
        return [
            (prefix + ".w1", self.w1),
            (prefix + ".b1", self.b1),
            (prefix + ".w2", self.w2),
            (prefix + ".b2", self.b2),
        ] + self.out.params(prefix + ".out")


class Encoder:
    def __init__(self, rng, cfg: ModelConfig):
        self.blocks = [EncoderBlock(rng, cfg) for _ in range(cfg.enc_layers)]
        self.ln = LayerNorm(cfg.attn_dim)

    def __call__(self, x, mask, rng, training):
        for block in self.blocks:
            x = block(x, mask, rng, training)
        return self.ln(x)

    def params(self, prefix: str):
        out = []
        for i, block in enumerate(self.blocks):
            out.extend(block.params(f"{prefix}.blocks.{i}"))
        return out + self.ln.params(prefix + ".ln")


class Decoder:
    def __init__(self, rng, cfg: ModelConfig, vocab: int):
        self.embed = T.parameter(rng, (vocab, cfg.attn_dim), fan_in=cfg.attn_dim)
        self.blocks = [DecoderBlock(rng, cfg) for _ in range(cfg.dec_layers)]
        self.ln = LayerNorm(cfg.attn_dim)
        self.out = Linear(rng, cfg.attn_dim, vocab)
        self.vocab = vocab

    def params(self, prefix: str):
        out = [(prefix + ".embed", self.embed)]
        for i, block in enumerate(self.blocks):
            out.extend(block.params(f"{prefix}.blocks.{i}"))
        return out + self.ln.params(prefix + ".ln") + self.out.params(prefix + ".out")


class CtcHead:
    def __init__(self, rng, cfg: ModelConfig, vocab: int):
        self.proj = Linear(rng, cfg.attn_dim, vocab + 1)  # +1: blank
        self.blank = vocab

    def params(self, prefix: str):
        return self.proj.params(prefix + ".proj")


# ---------------------------------------------------------------------------
# masks


def pad_mask(lens: np.ndarray, max_len: int) -> np.ndarray:
    """[B,1,1,L] additive mask removing key positions beyond each length."""
    keep = np.arange(max_len)[None, :] < np.asarray(lens)[:, None]
    return np.where(keep, 0.0, NEG).astype(T.default_dtype())[:, None, None, :]


def causal_mask(length: int) -> np.ndarray:
    m = np.triu(np.full((length, length), NEG), k=1).astype(T.default_dtype())
    return m[None, None]


# ---------------------------------------------------------------------------
# the multitask model


_COMPONENT_SEEDS = {
    "feat_norm": 0,
    "projection": 1,
    "subsampler": 2,
    "speech_encoder": 3,
    "text_encoder": 4,
    "semantic_decoder": 5,
    "text_decoder": 6,
    "ctc_semantic": 7,
    "ctc_text": 8,
    "text_embed": 9,
}


class MultiTaskModel:
    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        self.seed = seed

        def rng_for(component: str):
            return np.random.default_rng(
                np.random.SeedSequence((seed, _COMPONENT_SEEDS[component]))
            )

        input_dim = config.external_dim or config.feat_dim
        self.feat_norm = FeatureNormalizer.identity(input_dim)
        self.projection = (
            Linear(rng_for("projection"), config.external_dim, config.feat_dim)
            if config.external_dim
            else None
        )
        if config.input_layer == "conv2d":
            self.subsampler = ConvSubsampler(rng_for("subsampler"), config)
            self.speech_embed = None
        else:
            self.subsampler = None
            rng = rng_for("subsampler")
            self.speech_embed = T.parameter(
                rng, (config.text_vocab, config.attn_dim), fan_in=config.attn_dim
            )
        self.speech_encoder = Encoder(rng_for("speech_encoder"), config)
        self.text_encoder = Encoder(rng_for("text_encoder"), config)
        self.text_embed = T.parameter(
            rng_for("text_embed"), (config.text_vocab, config.attn_dim), fan_in=config.attn_dim
        )
        self.semantic_decoder = Decoder(rng_for("semantic_decoder"), config, config.sem_vocab)
        self.text_decoder = Decoder(rng_for("text_decoder"), config, config.text_vocab)
        self.ctc_semantic = CtcHead(rng_for("ctc_semantic"), config, config.sem_vocab)
        self.ctc_text = CtcHead(rng_for("ctc_text"), config, config.text_vocab)
        self._scale = math.sqrt(config.attn_dim)

    # -- parameter registry ---------------------------------------------------

    def components(self) -> dict[str, list]:
        comps = {
            # explicit dtype: wrappers must share the live buffer storage
            "feat_norm": [
                ("feat_norm.mean", T.Tensor(self.feat_norm.mean, dtype=np.float32)),
                ("feat_norm.istd", T.Tensor(self.feat_norm.istd, dtype=np.float32)),
            ],
            "speech_encoder": self.speech_encoder.params("speech_encoder"),
            "text_encoder": self.text_encoder.params("text_encoder")
            + [("text_encoder.embed", self.text_embed)],
            "semantic_decoder": self.semantic_decoder.params("semantic_decoder"),
            "text_decoder": self.text_decoder.params("text_decoder"),
            "ctc_semantic": self.ctc_semantic.params("ctc_semantic"),
            "ctc_text": self.ctc_text.params("ctc_text"),
        }
        if self.projection is not None:
            comps["projection"] = self.projection.params("projection")
        if self.subsampler is not None:
            comps["subsampler"] = self.subsampler.params("subsampler")
        elif self.speech_embed is not None:
            comps["subsampler"] = [("subsampler.embed", self.speech_embed)]
        return comps

    def named_parameters(self) -> list[tuple[str, T.Tensor]]:
        """Stable (name, tensor) list, sorted by component then declaration."""
        comps = self.components()
        out = []
        for comp in sorted(comps):
            out.extend(comps[comp])
        return out

    def trainable_parameters(self) -> list[tuple[str, T.Tensor]]:
        return [(n, p) for n, p in self.named_parameters() if p.requires_grad]

    def parameter_count(self) -> int:
        return sum(p.size for _, p in self.named_parameters())

    # -- forward paths ----------------------------------------------------------

    def _posenc(self, x: T.Tensor, rng, training) -> T.Tensor:
        pe = positional_encoding(x.shape[1], self.config.attn_dim)
        x = T.add(T.scale(x, self._scale), T.Tensor(pe[None]))
        return T.dropout(x, self.config.dropout, rng, training) if rng is not None else x

    def encode_speech(self, feats: np.ndarray, lens: np.ndarray, rng=None, training=False):
        """feats [B,T,D] raw (or [B,T] ids under input_layer='embed');
        returns (memory [B,T',attn], out_lens)."""
        if self.subsampler is None:
            ids = np.asarray(feats, dtype=np.int64)
            if ids.ndim != 2:
                raise DimensionError(f"embed input must be [B,T] ids, got {ids.shape}")
            h = T.embedding(self.speech_embed, ids)
            out_lens = np.asarray(lens)
        else:
            feats = np.asarray(feats, dtype=T.default_dtype())
            if feats.ndim != 3:
                raise DimensionError(f"speech input must be [B,T,D], got {feats.shape}")
            x = T.Tensor(self.feat_norm.apply(feats))
            if self.projection is not None:
                x = project_features(x, self.projection.w, self.projection.b)
            h = self.subsampler(x)
            out_lens = np.array([ConvSubsampler.out_length(int(l)) for l in lens])
            if np.any(out_lens < 1):
                raise DimensionError(
                    f"an utterance subsamples to zero frames: lens={list(lens)}"
                )
        h = self._posenc(h, rng, training)
        mask = T.Tensor(pad_mask(out_lens, h.shape[1]))
        memory = self.speech_encoder(h, mask, rng, training)
        return memory, out_lens

    def encode_text(self, ids: np.ndarray, lens: np.ndarray, rng=None, training=False):
        ids = np.asarray(ids, dtype=np.int64)
        x = T.embedding(self.text_embed, ids)
        x = self._posenc(x, rng, training)
        mask = T.Tensor(pad_mask(np.asarray(lens), ids.shape[1]))
        memory = self.text_encoder(x, mask, rng, training)
        return memory, np.asarray(lens)

    def encode(self, task: str, batch, rng=None, training=False):
        if task in (S2IE, S2T):
            if "feats" not in batch:
                raise DataError(f"task {task} expects speech features in the batch")
            return self.encode_speech(batch["feats"], batch["feat_lens"], rng, training)
        if task == T2IE:
            if "src_ids" not in batch:
                raise DataError("task t2ie expects source token ids in the batch")
            return self.encode_text(batch["src_ids"], batch["src_lens"], rng, training)
        raise ConfigError(f"unknown task {task!r}")

    def decoder_for(self, task: str) -> Decoder:
        return self.text_decoder if task == S2T else self.semantic_decoder

    def decode_logits(self, task: str, memory, mem_lens, prefix_ids, rng=None, training=False):
        """Causal logits [B, L, V] over the target prefix (starts with bos)."""
        prefix_ids = np.asarray(prefix_ids, dtype=np.int64)
        b, l = prefix_ids.shape
        if l > self.config.max_len:
            raise DimensionError(f"prefix length {l} exceeds max_len {self.config.max_len}")
        dec = self.decoder_for(task)
        x = T.embedding(dec.embed, prefix_ids)
        x = self._posenc(x, rng, training)
        cmask = T.Tensor(causal_mask(l))
        mmask = T.Tensor(pad_mask(np.asarray(mem_lens), memory.shape[1]))
        for block in dec.blocks:
            x = block(x, memory, cmask, mmask, rng, training)
        return dec.out(dec.ln(x))

    def ctc_log_probs(self, task: str, memory) -> T.Tensor:
        head = self.ctc_semantic if task == S2IE else self.ctc_text
        return T.log_softmax(head.proj(memory), axis=-1)

    # -- losses -------------------------------------------------------------

    def task_loss(self, task: str, batch, rng=None, training=False):
        """Hybrid loss for one task; returns (scalar Tensor, parts dict)."""
        vocab = self.decoder_for(task).vocab
        pad_id = batch["pad_id"]
        memory, mem_lens = self.encode(task, batch, rng, training)
        logits = self.decode_logits(
            task, memory, mem_lens, batch["dec_in"], rng, training
        )
        flat = T.reshape(logits, (-1, vocab))
        ce = T.cross_entropy(
            flat,
            np.asarray(batch["dec_out"]).reshape(-1),
            label_smoothing=batch.get("label_smoothing", 0.0),
            pad_id=pad_id,
        )
        parts = {"ce": ce.item()}
        w = self.config.ctc_weight
        if task in self.config.ctc_tasks and w > 0.0:
            head = self.ctc_semantic if task == S2IE else self.ctc_text
            ctc = ctc_loss(
                head.proj(memory),
                batch["tgt_ids"],
                mem_lens,
                batch["tgt_lens"],
            )
            parts["ctc"] = ctc.item()
            loss = T.add(T.scale(ctc, w), T.scale(ce, 1.0 - w))
        else:
            loss = ce
        parts["loss"] = loss.item()
        return loss, parts


def multitask_loss(losses: dict[str, T.Tensor], weights: dict[str, float]) -> T.Tensor:
    """Weighted sum over enabled tasks, in fixed task order."""
    if not any(weights.get(t, 0.0) > 0 for t in TASKS):
        raise ConfigError("all task weights are zero")
    total = None
    for task in TASKS:
        w = weights.get(task, 0.0)
        if w == 0.0:
            continue
        if task not in losses:
            raise ConfigError(f"weight {w} for task {task} but no loss provided")
        term = T.scale(losses[task], w)
        total = term if total is None else T.add(total, term)
    return total
