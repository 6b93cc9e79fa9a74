"""WAV I/O, word alignments and SNR-controlled noise mixing."""
from __future__ import annotations

import logging
import wave
from dataclasses import dataclass
from pathlib import Path
from typing import List, Tuple, Union

import numpy as np

PathLike = Union[str, Path]

SAMPLE_RATE = 16000

log = logging.getLogger(__name__)


class AudioFormatError(ValueError):
    """Malformed RIFF/WAVE header or data."""


class UnsupportedFormatError(AudioFormatError):
    """Valid WAV that is not mono 16-bit PCM."""


class SampleRateError(ValueError):
    pass


class AlignmentError(ValueError):
    pass


class DegeneratePowerError(ValueError):
    pass


@dataclass
class AudioClip:
    samples: np.ndarray
    sample_rate_hz: int = SAMPLE_RATE

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64).reshape(-1)
        if self.samples.size == 0:
            raise ValueError("AudioClip must be non-empty")
        if int(self.sample_rate_hz) <= 0:
            raise SampleRateError(f"sample rate must be positive, got {self.sample_rate_hz}")
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("AudioClip contains non-finite samples")

    def __len__(self) -> int:
        return self.samples.size

    @property
    def duration_s(self) -> float:
        return self.samples.size / self.sample_rate_hz


def require_rate(clip: AudioClip, rate: int = SAMPLE_RATE) -> None:
    if clip.sample_rate_hz != rate:
        raise SampleRateError(f"expected {rate} Hz audio, got {clip.sample_rate_hz} Hz")


def read_wav(path: PathLike) -> AudioClip:
    """Read a mono 16-bit PCM WAV at 16 kHz; samples are scaled by 1/32768."""
    try:
        with wave.open(str(path), "rb") as wf:
            nch = wf.getnchannels()
            width = wf.getsampwidth()
            rate = wf.getframerate()
            raw = wf.readframes(wf.getnframes())
    except wave.Error as exc:
        msg = str(exc)
        if "unknown format" in msg:
            raise UnsupportedFormatError(f"{path}: {msg}") from exc
        raise AudioFormatError(f"{path}: {msg}") from exc
    except EOFError as exc:
        raise AudioFormatError(f"{path}: truncated header") from exc
    if nch != 1:
        raise UnsupportedFormatError(f"{path}: expected mono, got {nch} channels")
    if width != 2:
        raise UnsupportedFormatError(f"{path}: expected 16-bit PCM, got {8 * width}-bit")
    if rate != SAMPLE_RATE:
        raise SampleRateError(f"{path}: expected {SAMPLE_RATE} Hz, got {rate} Hz")
    if len(raw) % 2:
        raise AudioFormatError(f"{path}: odd-length data chunk")
    pcm = np.frombuffer(raw, dtype="<i2")
    return AudioClip(pcm.astype(np.float64) / 32768.0, rate)


def quantize(samples: np.ndarray) -> np.ndarray:
    x = np.clip(np.asarray(samples, dtype=np.float64), -1.0, 1.0)
    return np.round(x * 32767.0).astype("<i2")


def write_wav(clip: AudioClip, path: PathLike) -> None:
    """Write ``clip`` as mono 16-bit PCM, quantized by round(s * 32767)."""
    pcm = quantize(clip.samples)
    with wave.open(str(path), "wb") as wf:
        wf.setnchannels(1)
        wf.setsampwidth(2)
        wf.setframerate(int(clip.sample_rate_hz))
        wf.writeframes(pcm.tobytes())


@dataclass(frozen=True)
class WordAlignment:
    entries: Tuple[Tuple[int, int, str], ...] = ()

    def __post_init__(self):
        prev_end = None
        prev_start = None
        for start, end, word in self.entries:
            if not 0 <= start < end:
                raise AlignmentError(f"bad word span {start}..{end} ({word!r})")
            if prev_start is not None and start < prev_start:
                raise AlignmentError(f"entries not sorted at {start} ({word!r})")
            if prev_end is not None and start < prev_end:
                raise AlignmentError(f"overlapping entries at {start} ({word!r})")
            prev_start, prev_end = start, end

    def __len__(self) -> int:
        return len(self.entries)

    def boundaries(self) -> List[int]:
        """Sorted distinct word-boundary sample positions (starts and ends)."""
        points = {s for s, _, _ in self.entries} | {e for _, e, _ in self.entries}
        return sorted(points)


def parse_alignment_text(text: str, source: str = "<string>") -> WordAlignment:
    entries = []
    for lineno, line in enumerate(text.splitlines(), 1):
        parts = line.split()
        if not parts:
            continue
        if len(parts) < 3:
            raise AlignmentError(f"{source}:{lineno}: expected 'start end word'")
        try:
            start, end = int(parts[0]), int(parts[1])
        except ValueError as exc:
            raise AlignmentError(f"{source}:{lineno}: non-integer sample index") from exc
        entries.append((start, end, " ".join(parts[2:])))
    return WordAlignment(tuple(entries))


def parse_alignment(path: PathLike) -> WordAlignment:
    """Parse a TIMIT ``.wrd``-style file of ``start end word`` lines."""
    return parse_alignment_text(Path(path).read_text(encoding="utf-8"), str(path))


def write_alignment(alignment: WordAlignment, path: PathLike) -> None:
    lines = [f"{s} {e} {w}\n" for s, e, w in alignment.entries]
    Path(path).write_text("".join(lines), encoding="utf-8")


def power(x: np.ndarray) -> float:
    return float(np.mean(np.square(x)))


def noise_segment(noise: np.ndarray, length: int, seed: int) -> np.ndarray:
    """Tile ``noise`` end to end and crop ``length`` samples at a seeded offset."""
    noise = np.asarray(noise, dtype=np.float64)
    reps = -(-(length + noise.size) // noise.size)
    tiled = np.tile(noise, reps)
    offset = int(np.random.default_rng(seed).integers(0, noise.size))
    return tiled[offset:offset + length]


def scaled_noise(signal: AudioClip, noise: AudioClip, snr_db: float, seed: int) -> np.ndarray:
    """The noise component that ``mix_at_snr`` adds, before any peak rescale."""
    if signal.sample_rate_hz != noise.sample_rate_hz:
        raise SampleRateError("signal and noise sample rates differ")
    seg = noise_segment(noise.samples, signal.samples.size, seed)
    p_sig = power(signal.samples)
    p_noise = power(seg)
    if p_sig <= 0.0 or p_noise <= 0.0:
        raise DegeneratePowerError(f"zero-power input (signal={p_sig}, noise={p_noise})")
    gain = np.sqrt(p_sig / (p_noise * 10.0 ** (snr_db / 10.0)))
    return gain * seg


def mix_at_snr(signal: AudioClip, noise: AudioClip, snr_db: float, seed: int) -> AudioClip:
    """Add ``noise`` to ``signal`` so that the injected component sits at ``snr_db``.

    If the mixture peaks above 1 the whole clip is divided by its peak; the
    factor is logged.
    """
    mixed = signal.samples + scaled_noise(signal, noise, snr_db, seed)
    peak = float(np.max(np.abs(mixed)))
    if peak > 1.0:
        log.info("event=mix_rescale factor=%.9g snr_db=%g", 1.0 / peak, snr_db)
        mixed = mixed / peak
    return AudioClip(mixed, signal.sample_rate_hz)


def measured_snr_db(signal: np.ndarray, component: np.ndarray) -> float:
    return 10.0 * np.log10(power(signal) / power(component))
