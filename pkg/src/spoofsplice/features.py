"""Constant-Q transform front end and fixed-length frame fitting.

The transform evaluates, for every hop-spaced frame centre, the inner
product of the zero-padded signal with one Hann-windowed complex kernel per
bin.  Those inner products are computed in the frequency domain against a
sparsified spectral kernel matrix, one FFT per frame.
"""
from __future__ import annotations

import functools
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Union

import numpy as np
from scipy import sparse

from .audio_io import AudioClip, require_rate

PathLike = Union[str, Path]

FEATURE_MAGIC = b"SPSPCQT\x00"
FEATURE_VERSION = 1
DEFAULT_FRAMES = 400


class CqtConfigError(ValueError):
    pass


class TooShortError(ValueError):
    pass


class FeatureFileError(ValueError):
    pass


@dataclass(frozen=True)
class CqtConfig:
    hop_ms: float = 16.0
    octaves: int = 9
    bins_per_octave: int = 48
    window: str = "hann"
    f_min_hz: Optional[float] = None  # None: Nyquist / 2**octaves
    log_floor: float = 1e-6
    # spectral-kernel entries below this fraction of the kernel peak are dropped
    sparsity: float = 1e-3

    @property
    def n_bins(self) -> int:
        return self.octaves * self.bins_per_octave

    @property
    def q_factor(self) -> float:
        return 1.0 / (2.0 ** (1.0 / self.bins_per_octave) - 1.0)

    def resolved_f_min(self, sample_rate_hz: int) -> float:
        if self.f_min_hz is not None:
            return float(self.f_min_hz)
        return (sample_rate_hz / 2.0) / 2.0 ** self.octaves

    def hop_samples(self, sample_rate_hz: int) -> int:
        return int(round(self.hop_ms * sample_rate_hz / 1000.0))

    def center_frequencies(self, sample_rate_hz: int) -> np.ndarray:
        k = np.arange(self.n_bins)
        return self.resolved_f_min(sample_rate_hz) * 2.0 ** (k / self.bins_per_octave)


@dataclass
class CqtSpectrogram:
    values: np.ndarray  # (T, B) log-magnitude
    hop_samples: int = 256

    def __post_init__(self):
        self.values = np.asarray(self.values)
        if self.values.ndim != 2 or self.values.shape[0] < 1:
            raise ValueError(f"expected a (T>=1, B) matrix, got shape {self.values.shape}")

    @property
    def n_frames(self) -> int:
        return self.values.shape[0]

    @property
    def bins(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True, eq=False)
class CqtKernelBank:
    config: CqtConfig
    sample_rate_hz: int
    frequencies: np.ndarray
    lengths: np.ndarray
    kernels: List[np.ndarray] = field(repr=False)  # time domain, centred at len // 2
    n_fft: int = 0
    # (B, n_fft//2 + 1) sparse matrices; see _spectral_kernels
    positive: Optional[sparse.csr_matrix] = field(default=None, repr=False)
    negative: Optional[sparse.csr_matrix] = field(default=None, repr=False)

    @property
    def hop_samples(self) -> int:
        return self.config.hop_samples(self.sample_rate_hz)

    @property
    def max_half_length(self) -> int:
        return int(self.lengths.max()) // 2


def _time_kernel(freq: float, length: int, sample_rate_hz: int) -> np.ndarray:
    offsets = np.arange(length) - length // 2
    window = np.hanning(length) if length > 1 else np.ones(1)
    kern = window * np.exp(-2j * np.pi * freq * offsets / sample_rate_hz)
    return kern / np.sum(np.abs(kern))


def _dirichlet(theta, n):
    """sum_{m<n} exp(-i m theta) for an array of angles."""
    half = np.sin(theta / 2.0)
    small = np.abs(half) < 1e-12
    ratio = np.where(small, 0.0, np.sin(n * theta / 2.0) / np.where(small, 1.0, half))
    # limit at theta = 2*pi*m is n * (-1)**(m*(n-1))
    m = np.rint(theta / (2.0 * np.pi)).astype(np.int64)
    limit = n * np.where((m * (n - 1)) % 2 == 0, 1.0, -1.0)
    ratio = np.where(small, limit, ratio)
    return np.exp(-0.5j * theta * (n - 1)) * ratio


def kernel_spectrum(freq, length, sample_rate_hz, n_fft, bins):
    """DFT (size ``n_fft``, divided by ``n_fft``) of the time kernel at ``bins``.

    The kernel sits in an ``n_fft`` buffer centred at ``n_fft // 2``.  Uses
    the closed form of a Hann-windowed complex exponential, so only the
    requested bins are evaluated.
    """
    bins = np.asarray(bins, dtype=np.int64)
    centre = length // 2
    frac = np.mod(bins / n_fft + freq / sample_rate_hz, 1.0)
    theta = 2.0 * np.pi * frac
    if length > 1:
        alpha = 2.0 * np.pi / (length - 1)
        win = (0.5 * _dirichlet(theta, length)
               - 0.25 * _dirichlet(theta - alpha, length)
               - 0.25 * _dirichlet(theta + alpha, length))
        norm = np.hanning(length).sum()
    else:
        win = np.ones(bins.shape, dtype=np.complex128)
        norm = 1.0
    shift = np.exp(-2j * np.pi * np.mod(bins * (n_fft // 2 - centre), n_fft) / n_fft)
    phase = np.exp(2j * np.pi * np.mod(freq * centre / sample_rate_hz, 1.0))
    return shift * phase * win / (norm * n_fft)


def _spectral_kernels(freqs, lengths, sample_rate_hz, n_fft, threshold):
    # For real a and any b: sum_j a[j] b[j] = (1/N) sum_f A[f] B[-f].  With A
    # the rfft of a frame (f <= N/2), the remaining terms are conj(A[g]) B[g]
    # for 1 <= g < N/2.
    half = n_fft // 2
    pos = ([], [], [])
    neg = ([], [], [])
    for k, (freq, length) in enumerate(zip(freqs, lengths)):
        # the kernel's energy sits at bin -freq; Hann sidelobes are far below
        # any sensible threshold 12 main-lobe widths out
        reach = int(math.ceil(12 * n_fft / length)) + 2
        peak = -freq * n_fft / sample_rate_hz
        bins = np.arange(int(math.floor(peak)) - reach, int(math.ceil(peak)) + reach + 1)
        bins = np.unique(np.mod(bins, n_fft))
        vals = kernel_spectrum(freq, int(length), sample_rate_hz, n_fft, bins)
        mag = np.abs(vals)
        keep = mag >= threshold * mag.max()
        bins, vals = bins[keep], vals[keep]
        rows = np.mod(-bins, n_fft)
        on_pos = rows <= half
        pos[0].append(np.full(on_pos.sum(), k))
        pos[1].append(rows[on_pos])
        pos[2].append(vals[on_pos])
        on_neg = ~on_pos
        neg[0].append(np.full(on_neg.sum(), k))
        neg[1].append(bins[on_neg])
        neg[2].append(vals[on_neg])
    shape = (len(freqs), half + 1)

    def assemble(rows, cols, vals):
        return sparse.csr_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=shape
        )

    return assemble(*pos), assemble(*neg)


@functools.lru_cache(maxsize=8)
def build_cqt_kernels(config: CqtConfig = CqtConfig(), sample_rate_hz: int = 16000) -> CqtKernelBank:
    """Kernel bank for ``config`` at ``sample_rate_hz``; cached and immutable."""
    if config.octaves < 1 or config.bins_per_octave < 1:
        raise CqtConfigError("octaves and bins_per_octave must be positive")
    if config.window != "hann":
        raise CqtConfigError(f"unsupported window {config.window!r}")
    nyquist = sample_rate_hz / 2.0
    f_min = config.resolved_f_min(sample_rate_hz)
    if f_min <= 0:
        raise CqtConfigError("f_min must be positive")
    freqs = config.center_frequencies(sample_rate_hz)
    if freqs[-1] >= nyquist:
        raise CqtConfigError(
            f"top bin {freqs[-1]:.3f} Hz reaches Nyquist {nyquist:.1f} Hz; lower f_min"
        )
    if config.hop_samples(sample_rate_hz) < 1:
        raise CqtConfigError("hop is shorter than one sample")
    q = config.q_factor
    lengths = np.array([math.ceil(q * sample_rate_hz / f) for f in freqs], dtype=np.int64)
    kernels = [_time_kernel(f, int(n), sample_rate_hz) for f, n in zip(freqs, lengths)]
    n_fft = 1 << int(math.ceil(math.log2(lengths.max())))
    pos, neg = _spectral_kernels(freqs, lengths, sample_rate_hz, n_fft, config.sparsity)
    return CqtKernelBank(config, sample_rate_hz, freqs, lengths, kernels, n_fft, pos, neg)


def cqt_magnitude(samples: np.ndarray, bank: CqtKernelBank, batch: int = 32) -> np.ndarray:
    """|CQT| as a (T, B) array with frames centred at 0, hop, 2*hop, ... < N."""
    x = np.asarray(samples, dtype=np.float64)
    hop = bank.hop_samples
    n_frames = -(-x.size // hop)
    half = bank.n_fft // 2
    padded = np.zeros(x.size + 2 * half + hop)
    padded[half:half + x.size] = x
    frames = np.lib.stride_tricks.as_strided(
        padded,
        shape=(n_frames, bank.n_fft),
        strides=(padded.strides[0] * hop, padded.strides[0]),
        writeable=False,
    )
    out = np.empty((n_frames, bank.frequencies.size))
    neg_cols = np.unique(bank.negative.indices)
    neg = bank.negative[:, neg_cols]
    for start in range(0, n_frames, batch):
        spec = np.fft.rfft(frames[start:start + batch], axis=1).T
        resp = bank.positive @ spec
        if neg_cols.size:
            resp += neg @ np.conj(spec[neg_cols])
        out[start:start + batch] = np.abs(resp.T)
    return out


def cqt(clip: AudioClip, config: CqtConfig = CqtConfig()) -> CqtSpectrogram:
    """Log-magnitude CQT, ``log(|X| + log_floor)``, of a 16 kHz clip."""
    require_rate(clip)
    bank = build_cqt_kernels(config, clip.sample_rate_hz)
    hop = bank.hop_samples
    if len(clip) < hop:
        raise TooShortError(f"clip of {len(clip)} samples is shorter than one hop ({hop})")
    mag = cqt_magnitude(clip.samples, bank)
    return CqtSpectrogram(np.log(mag + config.log_floor), hop)


def fit_frames(spec: CqtSpectrogram, target: int = DEFAULT_FRAMES) -> CqtSpectrogram:
    """Truncate to the first ``target`` frames, or tile cyclically up to it."""
    if target < 1:
        raise ValueError("target must be >= 1")
    n = spec.n_frames
    if n >= target:
        values = spec.values[:target]
    else:
        values = spec.values[np.arange(target) % n]
    return CqtSpectrogram(np.array(values, copy=True), spec.hop_samples)


# -- feature files -------------------------------------------------------

def write_features(spec: CqtSpectrogram, path: PathLike) -> None:
    values = np.ascontiguousarray(spec.values, dtype="<f4")
    t, b = values.shape
    header = FEATURE_MAGIC + struct.pack("<II", FEATURE_VERSION, spec.hop_samples)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(struct.pack("<II", t, b))
        fh.write(values.tobytes())


def read_features(path: PathLike) -> CqtSpectrogram:
    data = Path(path).read_bytes()
    if len(data) < 24 or data[:8] != FEATURE_MAGIC:
        raise FeatureFileError(f"{path}: not a feature file")
    version, hop = struct.unpack_from("<II", data, 8)
    if version != FEATURE_VERSION:
        raise FeatureFileError(f"{path}: unsupported version {version}")
    t, b = struct.unpack_from("<II", data, 16)
    payload = data[24:]
    if len(payload) != 4 * t * b or t < 1:
        raise FeatureFileError(f"{path}: payload size does not match dims ({t}, {b})")
    values = np.frombuffer(payload, dtype="<f4").reshape(t, b).astype(np.float32)
    return CqtSpectrogram(values, hop)
