"""Acoustic feature extraction, feature-file I/O and input projection.

The internal frontend produces 83-dim frames: 80 log-mel energies plus a
3-slot pitch block (normalized-autocorrelation f0, voicing correlation,
delta-f0). Externally computed feature matrices (e.g. 512-dim) are read
from SLUF files and projected down inside the model.

SLUF layout: magic "SLUF", u32 LE rows, u32 LE cols, rows*cols f32 LE
values, row-major. The same layout with magic "RAWF" and cols=1 carries
raw float audio for tests (see audio.py).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from .audio import AudioSignal
from .errors import DataError, DimensionError, FormatError

SLUF_MAGIC = b"SLUF"
LOG_FLOOR = 1e-10


@dataclass
class FrontendConfig:
    win_ms: float = 25.0
    hop_ms: float = 10.0
    n_fft: int = 512
    n_mels: int = 80
    fmin: float = 20.0
    pitch_fmin: float = 50.0
    pitch_fmax: float = 400.0
    voicing_threshold: float = 0.3

    @property
    def dim(self) -> int:
        return self.n_mels + 3


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filter_matrix(n_fft: int, sample_rate: int, n_mels: int, fmin: float) -> np.ndarray:
    """Triangular filters [n_mels, n_fft//2+1] spanning fmin..Nyquist."""
    nyquist = sample_rate / 2.0
    edges = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(nyquist), n_mels + 2))
    bin_freqs = np.arange(n_fft // 2 + 1) * (sample_rate / n_fft)
    filters = np.zeros((n_mels, n_fft // 2 + 1), dtype=np.float64)
    for m in range(n_mels):
        lo, mid, hi = edges[m], edges[m + 1], edges[m + 2]
        up = (bin_freqs - lo) / max(mid - lo, 1e-12)
        down = (hi - bin_freqs) / max(hi - mid, 1e-12)
        filters[m] = np.clip(np.minimum(up, down), 0.0, None)
    return filters


def frame_signal(samples: np.ndarray, win: int, hop: int) -> np.ndarray:
    """[T, win] view with T = floor((N - win)/hop) + 1."""
    n = len(samples)
    if n < win:
        raise DataError(f"audio of {n} samples is shorter than one {win}-sample window")
    t = (n - win) // hop + 1
    idx = np.arange(win)[None, :] + hop * np.arange(t)[:, None]
    return samples[idx]


def _pitch_block(frames: np.ndarray, sample_rate: int, cfg: FrontendConfig) -> np.ndarray:
    """Per-frame (f0, voicing, delta-f0); f0 reported as a fraction of pitch_fmax."""
    t, win = frames.shape
    lag_lo = max(1, int(sample_rate / cfg.pitch_fmax))
    lag_hi = min(win - 1, int(sample_rate / cfg.pitch_fmin))
    r0 = np.einsum("ij,ij->i", frames, frames)
    lags = np.arange(lag_lo, lag_hi + 1)
    corr = np.empty((t, len(lags)), dtype=np.float64)
    for j, lag in enumerate(lags):
        # compensate the shrinking overlap so a stationary tone scores ~1 at its period
        corr[:, j] = np.einsum("ij,ij->i", frames[:, :-lag], frames[:, lag:]) * (win / (win - lag))
    norm = corr / np.maximum(r0[:, None], 1e-12)
    best_val = norm.max(axis=1)
    # prefer the shortest lag near the best score, else period multiples win
    near_best = norm >= 0.98 * np.maximum(best_val, 1e-12)[:, None]
    best = np.argmax(near_best, axis=1)
    voicing = np.clip(best_val, 0.0, 1.0)
    voicing = np.where(r0 > 0, voicing, 0.0)
    f0 = sample_rate / lags[best].astype(np.float64)
    voiced = voicing >= cfg.voicing_threshold
    f0_slot = np.where(voiced, f0 / cfg.pitch_fmax, 0.0)
    delta = np.diff(f0_slot, prepend=f0_slot[:1])
    return np.stack([f0_slot, voicing, delta], axis=1)


def compute_filterbank(signal: AudioSignal, cfg: FrontendConfig | None = None) -> np.ndarray:
    """Log-mel + pitch features, [T, cfg.dim] float32 at the hop rate."""
    cfg = cfg or FrontendConfig()
    sr = signal.sample_rate
    win = int(round(cfg.win_ms * sr / 1000.0))
    hop = int(round(cfg.hop_ms * sr / 1000.0))
    frames = frame_signal(signal.samples.astype(np.float64), win, hop)
    windowed = frames * np.hamming(win)
    spectrum = np.fft.rfft(windowed, n=cfg.n_fft, axis=1)
    power = np.abs(spectrum) ** 2
    mel = power @ mel_filter_matrix(cfg.n_fft, sr, cfg.n_mels, cfg.fmin).T
    logmel = np.log(np.maximum(mel, LOG_FLOOR))
    pitch = _pitch_block(frames, sr, cfg)
    out = np.concatenate([logmel, pitch], axis=1).astype(np.float32)
    if not np.all(np.isfinite(out)):
        raise DataError("non-finite feature values produced")
    return out


# ---------------------------------------------------------------------------
# SLUF feature files


def save_features(path, frames: np.ndarray) -> None:
    frames = np.asarray(frames, dtype="<f4")
    if frames.ndim != 2 or frames.size == 0:
        raise DataError(f"feature matrix must be non-empty 2-d, got shape {frames.shape}")
    with open(path, "wb") as f:
        f.write(SLUF_MAGIC)
        f.write(struct.pack("<II", frames.shape[0], frames.shape[1]))
        f.write(np.ascontiguousarray(frames).tobytes())


def load_features(path) -> np.ndarray:
    blob = Path(path).read_bytes()
    if blob[:4] != SLUF_MAGIC:
        raise FormatError(f"{path}: bad magic at byte offset 0: {blob[:4]!r}")
    if len(blob) < 12:
        raise FormatError(f"{path}: truncated header at byte offset {len(blob)}")
    rows, cols = struct.unpack_from("<II", blob, 4)
    if rows == 0 or cols == 0:
        raise FormatError(f"{path}: empty feature matrix (header at byte offset 4: {rows}x{cols})")
    want = rows * cols * 4
    payload = blob[12:]
    if len(payload) != want:
        raise FormatError(
            f"{path}: payload at byte offset 12 holds {len(payload)} bytes, "
            f"header implies {want}"
        )
    return np.frombuffer(payload, dtype="<f4").reshape(rows, cols).copy()


# ---------------------------------------------------------------------------
# projection and normalization (parameters owned by the model)


def project_features(frames: T.Tensor, weight: T.Tensor, bias: T.Tensor) -> T.Tensor:
    """relu(frames @ weight + bias); maps external dims down to the model dim."""
    if frames.shape[-1] != weight.shape[0]:
        raise DimensionError(
            f"projection expects dim {weight.shape[0]}, features have {frames.shape[-1]}"
        )
    return T.relu(T.add(T.matmul(frames, weight), bias))


class FeatureNormalizer:
    """Global mean/variance normalization with stats held as model buffers."""

    def __init__(self, mean: np.ndarray, istd: np.ndarray):
        self.mean = np.asarray(mean, dtype=np.float32)
        self.istd = np.asarray(istd, dtype=np.float32)

    @classmethod
    def fit(cls, matrices) -> "FeatureNormalizer":
        total = None
        total_sq = None
        count = 0
        for m in matrices:
            m64 = np.asarray(m, dtype=np.float64)
            total = m64.sum(axis=0) if total is None else total + m64.sum(axis=0)
            total_sq = (m64**2).sum(axis=0) if total_sq is None else total_sq + (m64**2).sum(axis=0)
            count += m64.shape[0]
        if count == 0:
            raise DataError("cannot fit a normalizer on zero frames")
        mean = total / count
        var = np.maximum(total_sq / count - mean**2, 0.0)
        return cls(mean, 1.0 / np.sqrt(var + 1e-8))

    @classmethod
    def identity(cls, dim: int) -> "FeatureNormalizer":
        return cls(np.zeros(dim), np.ones(dim))

    def apply(self, frames: np.ndarray) -> np.ndarray:
        return ((frames - self.mean) * self.istd).astype(np.float32)
