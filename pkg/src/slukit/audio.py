"""Waveform I/O and time-domain augmentation.

Two on-disk audio forms are accepted: WAV (PCM16 mono) and RAWF, a
headers-only float container laid out like the feature file format
(magic ``RAWF``, u32 LE rows, u32 LE cols=1, f32 LE samples) that test
fixtures use to avoid quantization.
"""

from __future__ import annotations

import struct
import wave
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataError, FormatError

RAWF_MAGIC = b"RAWF"


@dataclass
class AudioSignal:
    """Mono waveform with samples in [-1, 1]."""

    samples: np.ndarray
    sample_rate: int = 16000

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float32).reshape(-1)
        if self.sample_rate <= 0:
            raise DataError(f"sample_rate must be positive, got {self.sample_rate}")
        if not np.all(np.isfinite(self.samples)):
            raise DataError("audio contains non-finite samples")

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate


def write_wav(path, signal: AudioSignal) -> None:
    clipped = np.clip(signal.samples, -1.0, 1.0)
    pcm = (clipped * 32767.0).astype(np.int16)
    with wave.open(str(path), "wb") as w:
        w.setnchannels(1)
        w.setsampwidth(2)
        w.setframerate(signal.sample_rate)
        w.writeframes(pcm.tobytes())


def read_wav(path) -> AudioSignal:
    try:
        with wave.open(str(path), "rb") as w:
            if w.getnchannels() != 1:
                raise FormatError(f"{path}: expected mono audio, got {w.getnchannels()} channels")
            if w.getsampwidth() != 2:
                raise FormatError(f"{path}: expected 16-bit PCM, got {8 * w.getsampwidth()}-bit")
            rate = w.getframerate()
            raw = w.readframes(w.getnframes())
    except wave.Error as exc:
        raise FormatError(f"{path}: not a readable WAV file ({exc})") from exc
    samples = np.frombuffer(raw, dtype="<i2").astype(np.float32) / 32767.0
    return AudioSignal(samples, rate)


def write_rawf(path, signal: AudioSignal) -> None:
    n = len(signal.samples)
    with open(path, "wb") as f:
        f.write(RAWF_MAGIC)
        f.write(struct.pack("<II", n, 1))
        f.write(signal.samples.astype("<f4").tobytes())


def read_rawf(path, sample_rate: int = 16000) -> AudioSignal:
    blob = Path(path).read_bytes()
    if blob[:4] != RAWF_MAGIC:
        raise FormatError(f"{path}: bad magic at byte offset 0: {blob[:4]!r}")
    if len(blob) < 12:
        raise FormatError(f"{path}: truncated header at byte offset {len(blob)}")
    rows, cols = struct.unpack_from("<II", blob, 4)
    if cols != 1:
        raise FormatError(f"{path}: raw audio requires cols=1, header at byte offset 8 says {cols}")
    want = rows * 4
    payload = blob[12:]
    if len(payload) != want:
        raise FormatError(
            f"{path}: payload at byte offset 12 holds {len(payload)} bytes, header implies {want}"
        )
    samples = np.frombuffer(payload, dtype="<f4")
    return AudioSignal(samples, sample_rate)


def read_audio(path, sample_rate: int = 16000) -> AudioSignal:
    """Dispatch on file magic: WAV container or RAWF float samples."""
    head = Path(path).open("rb").read(4)
    if head == RAWF_MAGIC:
        return read_rawf(path, sample_rate)
    return read_wav(path)


def speed_perturb(signal: AudioSignal, factor: float) -> AudioSignal:
    """Resample by linear interpolation so playback speed scales by ``factor``.

    Output length is floor((N-1)/factor) + 1; factor 1.0 returns the input
    signal unchanged. A tone at f Hz comes out near factor*f.
    """
    if factor <= 0:
        raise DataError(f"speed factor must be positive, got {factor}")
    if factor == 1.0:
        return signal
    n = len(signal.samples)
    if n == 0:
        return AudioSignal(signal.samples.copy(), signal.sample_rate)
    out_len = int((n - 1) / factor) + 1
    positions = np.arange(out_len, dtype=np.float64) * factor
    resampled = np.interp(positions, np.arange(n, dtype=np.float64), signal.samples)
    return AudioSignal(resampled.astype(np.float32), signal.sample_rate)
