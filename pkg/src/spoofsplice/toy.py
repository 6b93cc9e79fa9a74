"""Synthetic corpora for smoke runs: tone classes, word-aligned speakers, clicked splices.

None of this is speech.  The generators exist so the full pipeline (features,
training, scoring, splicing) can be exercised in minutes on a laptop.
"""
from __future__ import annotations

import csv
from pathlib import Path
from typing import List, Tuple, Union

import numpy as np

from .audio_io import SAMPLE_RATE, AudioClip, WordAlignment, write_alignment, write_wav
from .features import CqtConfig, cqt
from .splicing import Utterance, chunk_and_label, generate_splice
from .training import LabeledExample

PathLike = Union[str, Path]

# The three classes differ in local time-frequency texture rather than in
# absolute frequency, since a convolutional net with global pooling sees
# CQT shifts along frequency as nearly identical:
# 0 steady tone, 1 tone gated on and off, 2 band-limited noise.
TONE_RANGE_HZ = (200.0, 3000.0)
GATE_HZ = 8.0
# attack ids whose LA family maps to classes 0, 1, 2
TONE_ATTACKS = ("bonafide", "A01", "A05")


def tone_clip(label: int, rng: np.random.Generator, duration_s: float = 1.0,
              sample_rate_hz: int = SAMPLE_RATE) -> AudioClip:
    n = int(round(duration_s * sample_rate_hz))
    t = np.arange(n) / sample_rate_hz
    f = np.exp(rng.uniform(*np.log(TONE_RANGE_HZ)))
    amp = rng.uniform(0.2, 0.5)
    if label == 2:
        spectrum = np.fft.rfft(rng.standard_normal(n))
        freqs = np.fft.rfftfreq(n, 1.0 / sample_rate_hz)
        spectrum[(freqs < f / 2 ** 0.5) | (freqs > f * 2 ** 0.5)] = 0
        x = np.fft.irfft(spectrum, n)
        x *= amp / (np.sqrt(2) * np.std(x))
    else:
        x = amp * np.sin(2 * np.pi * f * t + rng.uniform(0, 2 * np.pi))
        if label == 1:
            x *= (np.sin(2 * np.pi * GATE_HZ * t + rng.uniform(0, 2 * np.pi)) > 0)
    x = x + 0.01 * rng.standard_normal(n)
    return AudioClip(x, sample_rate_hz)


def tone_dataset(n_per_class: int = 10, seed: int = 0, duration_s: float = 1.0,
                 num_classes: int = 3) -> List[Tuple[AudioClip, int]]:
    rng = np.random.default_rng(seed)
    items = [(tone_clip(c, rng, duration_s), c) for c in range(num_classes) for _ in range(n_per_class)]
    order = rng.permutation(len(items))
    return [items[i] for i in order]


def write_tone_corpus(out_dir: PathLike, n_per_class: int = 10, seed: int = 0,
                      duration_s: float = 1.0) -> Path:
    """WAVs plus ``manifest.csv`` (``path,attack_id``); returns the manifest path."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = out_dir / "manifest.csv"
    with open(manifest, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["path", "attack_id"])
        for i, (clip, label) in enumerate(tone_dataset(n_per_class, seed, duration_s)):
            name = f"tone_{i:04d}.wav"
            write_wav(clip, out_dir / name)
            w.writerow([name, TONE_ATTACKS[label]])
    return manifest


# -- word-aligned utterances ---------------------------------------------

def synthetic_utterance(rng: np.random.Generator, n_words: int = 6, utt_id: str = "u",
                        speaker_id: str = "s", sample_rate_hz: int = SAMPLE_RATE,
                        word_s: Tuple[float, float] = (0.15, 0.35),
                        gap_s: Tuple[float, float] = (0.03, 0.10)) -> Utterance:
    """Amplitude-shaped tone "words" separated by quiet gaps, with an alignment."""
    pieces, entries = [], []
    pos = 0
    for i in range(n_words):
        gap = int(rng.uniform(*gap_s) * sample_rate_hz)
        pieces.append(0.005 * rng.standard_normal(gap))
        pos += gap
        n = int(rng.uniform(*word_s) * sample_rate_hz)
        t = np.arange(n) / sample_rate_hz
        env = np.hanning(n) ** 0.5
        word = env * 0.3 * np.sin(2 * np.pi * rng.uniform(200, 2000) * t)
        word += 0.005 * rng.standard_normal(n)
        pieces.append(word)
        entries.append((pos, pos + n, f"w{i}"))
        pos += n
    tail = int(gap_s[1] * sample_rate_hz)
    pieces.append(0.005 * rng.standard_normal(tail))
    clip = AudioClip(np.concatenate(pieces), sample_rate_hz)
    return Utterance(utt_id, speaker_id, clip, WordAlignment(tuple(entries)))


def write_word_corpus(out_dir: PathLike, speakers: int = 2, utts_per_speaker: int = 3,
                      seed: int = 0) -> Path:
    """``<speaker>/<utt>.wav`` + ``.wrd`` files in the layout ``build_corpus`` reads."""
    out_dir = Path(out_dir)
    rng = np.random.default_rng(seed)
    for s in range(speakers):
        spk = out_dir / f"spk{s:02d}"
        spk.mkdir(parents=True, exist_ok=True)
        for u in range(utts_per_speaker):
            utt = synthetic_utterance(rng, n_words=int(rng.integers(4, 8)))
            write_wav(utt.clip, spk / f"utt{u:02d}.wav")
            write_alignment(utt.alignment, spk / f"utt{u:02d}.wrd")
    return out_dir


# -- clicked splices -----------------------------------------------------

def add_clicks(clip: AudioClip, positions, amplitude: float = 0.8) -> AudioClip:
    """Copy of ``clip`` with a two-sample +/- impulse at each position."""
    x = clip.samples.copy()
    for p in positions:
        p = min(max(int(p), 0), x.size - 2)
        x[p] += amplitude
        x[p + 1] -= amplitude
    return AudioClip(np.clip(x, -1.0, 1.0), clip.sample_rate_hz)


def click_chunks(n_chunks: int = 200, seed: int = 0, hop_frames: int = 8,
                 config: CqtConfig = CqtConfig()) -> List[LabeledExample]:
    """Balanced boundary/no-boundary chunks from clicked synthetic splices."""
    rng = np.random.default_rng(seed)
    want = {0: n_chunks // 2, 1: n_chunks - n_chunks // 2}
    out: List[LabeledExample] = []
    i = 0
    while want[0] or want[1]:
        host = synthetic_utterance(rng, int(rng.integers(4, 8)), f"h{i}")
        donor = synthetic_utterance(rng, 4, f"d{i}")
        k = int(rng.integers(1, 4))
        clip, record = generate_splice(host, donor, k, int(rng.integers(2 ** 31)))
        spec = cqt(add_clicks(clip, record.boundaries), config)
        for ch in chunk_and_label(spec, record.boundaries, hop_frames=hop_frames):
            if want[ch.label]:
                want[ch.label] -= 1
                out.append(LabeledExample(ch.feature.astype(np.float32), ch.label, f"{i}:{ch.start_frame}"))
        i += 1
    order = rng.permutation(len(out))
    return [out[j] for j in order]
