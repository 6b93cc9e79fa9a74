"""Spliced-corpus generation, sliding-window chunk labels and boundary detection."""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .audio_io import AudioClip, WordAlignment, mix_at_snr, parse_alignment, read_wav, write_wav
from .features import CqtConfig, CqtSpectrogram, TooShortError, cqt
from .model import Model, ModelConfigError

PathLike = Union[str, Path]

log = logging.getLogger(__name__)

CHUNK_FRAMES = 16
DEFAULT_HOP_FRAMES = 8


class GenerationError(ValueError):
    pass


class SpliceConfigError(ValueError):
    pass


@dataclass(frozen=True)
class Utterance:
    utt_id: str
    speaker_id: str
    clip: AudioClip
    alignment: WordAlignment


@dataclass(frozen=True)
class SpliceRecord:
    host_id: str
    donor_id: str
    insertions: Tuple[Tuple[int, int], ...]  # (donor word index, host insert sample)
    boundaries: Tuple[int, ...]  # sorted, in output samples
    output_path: str = ""

    @property
    def k(self) -> int:
        return len(self.insertions)


@dataclass
class Chunk:
    start_frame: int
    label: int
    feature: np.ndarray  # (num_frames, bins)
    num_frames: int = CHUNK_FRAMES


def generate_splice(host: Utterance, donor: Utterance, k: int, seed: int,
                    allow_empty: bool = False) -> Tuple[AudioClip, SpliceRecord]:
    """Insert ``k`` distinct donor words at ``k`` distinct host word boundaries.

    ``allow_empty`` permits ``k == 0`` (returns the host unchanged); it exists
    for tests only.
    """
    if not (1 <= k <= 3 or (allow_empty and k == 0)):
        raise SpliceConfigError(f"k must be in 1..3, got {k}")
    if host.speaker_id != donor.speaker_id:
        raise GenerationError(f"host speaker {host.speaker_id} != donor speaker {donor.speaker_id}")
    if len(donor.alignment) < k:
        raise GenerationError(f"donor {donor.utt_id} has {len(donor.alignment)} words, need {k}")
    n_host = len(host.clip)
    positions = [b for b in host.alignment.boundaries() if 0 <= b <= n_host]
    if not any(0 < b < n_host for b in positions):
        raise GenerationError(f"host {host.utt_id} has no interior word boundary")
    if len(positions) < k:
        raise GenerationError(f"host {host.utt_id} has {len(positions)} boundaries, need {k}")
    rng = np.random.default_rng(seed)
    words = rng.choice(len(donor.alignment), size=k, replace=False)
    spots = rng.choice(len(positions), size=k, replace=False)
    insertions = tuple((int(w), int(positions[s])) for w, s in zip(words, spots))

    pieces, boundaries = [], []
    cursor = 0
    out_len = 0
    for word, at in sorted(insertions, key=lambda ins: ins[1]):
        start, end, _ = donor.alignment.entries[word]
        segment = donor.clip.samples[start:end]
        pieces.append(host.clip.samples[cursor:at])
        out_len += at - cursor
        boundaries.append(out_len)
        pieces.append(segment)
        out_len += segment.size
        boundaries.append(out_len)
        cursor = at
    pieces.append(host.clip.samples[cursor:])
    clip = AudioClip(np.concatenate(pieces), host.clip.sample_rate_hz)
    return clip, SpliceRecord(host.utt_id, donor.utt_id, insertions, tuple(boundaries))


# -- corpus --------------------------------------------------------------

def load_corpus(corpus_dir: PathLike) -> Dict[str, List[Utterance]]:
    """Utterances grouped by speaker from ``<speaker>/<utt>.wav`` + ``<utt>.wrd``."""
    corpus_dir = Path(corpus_dir)
    speakers: Dict[str, List[Utterance]] = {}
    for wav in sorted(corpus_dir.glob("*/*.wav")):
        wrd = wav.with_suffix(".wrd")
        if not wrd.exists():
            log.warning("event=skip_utterance reason=no_alignment path=%s", wav)
            continue
        speaker = wav.parent.name
        utt = Utterance(f"{speaker}/{wav.stem}", speaker, read_wav(wav), parse_alignment(wrd))
        speakers.setdefault(speaker, []).append(utt)
    return speakers


def build_corpus(corpus_dir: PathLike, out_dir: PathLike, noise: Optional[Tuple[AudioClip, float]] = None,
                 pairs_per_speaker: int = 1, seed: int = 0) -> List[SpliceRecord]:
    """Write spliced WAVs plus ``manifest.csv`` under ``out_dir``.

    With ``noise = (clip, snr_db)`` both utterances of a pair are mixed with
    noise before splicing.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    speakers = load_corpus(corpus_dir)
    records = []
    for speaker, utts in sorted(speakers.items()):
        if len(utts) < 2:
            log.warning("event=skip_speaker speaker=%s utterances=%d", speaker, len(utts))
            continue
        for pair in range(pairs_per_speaker):
            pair_seed = np.random.SeedSequence(
                [seed, pair, *map(ord, speaker)]).generate_state(4)
            rng = np.random.default_rng(pair_seed)
            hi, di = rng.choice(len(utts), size=2, replace=False)
            host, donor = utts[hi], utts[di]
            if noise is not None:
                noise_clip, snr_db = noise
                host = _noisy(host, noise_clip, snr_db, int(pair_seed[1]))
                donor = _noisy(donor, noise_clip, snr_db, int(pair_seed[2]))
            k = int(rng.integers(1, 4))
            k = min(k, len(donor.alignment))
            try:
                clip, record = generate_splice(host, donor, k, int(pair_seed[3]))
            except GenerationError as exc:
                log.warning("event=skip_pair speaker=%s reason=%s", speaker, exc)
                continue
            name = f"{speaker}_{Path(host.utt_id).name}_{Path(donor.utt_id).name}_{pair}.wav"
            write_wav(clip, out_dir / name)
            records.append(SpliceRecord(record.host_id, record.donor_id, record.insertions,
                                        record.boundaries, name))
    write_manifest(records, out_dir / "manifest.csv")
    return records


def _noisy(utt: Utterance, noise: AudioClip, snr_db: float, seed: int) -> Utterance:
    return Utterance(utt.utt_id, utt.speaker_id, mix_at_snr(utt.clip, noise, snr_db, seed), utt.alignment)


def write_manifest(records: Sequence[SpliceRecord], path: PathLike) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["output_path", "host_id", "donor_id", "k", "boundaries"])
        for r in records:
            w.writerow([r.output_path, r.host_id, r.donor_id, r.k, ";".join(map(str, r.boundaries))])


def read_manifest(path: PathLike) -> List[Tuple[str, str, str, int, Tuple[int, ...]]]:
    rows = []
    with open(path, newline="", encoding="utf-8") as fh:
        for r in csv.DictReader(fh):
            bounds = tuple(int(b) for b in r["boundaries"].split(";") if b)
            rows.append((r["output_path"], r["host_id"], r["donor_id"], int(r["k"]), bounds))
    return rows


# -- chunks --------------------------------------------------------------

def chunk_starts(n_frames: int, window: int = CHUNK_FRAMES, hop_frames: int = DEFAULT_HOP_FRAMES) -> range:
    if hop_frames < 1:
        raise SpliceConfigError("hop_frames must be >= 1")
    if n_frames < window:
        raise TooShortError(f"{n_frames} frames is shorter than one {window}-frame chunk")
    return range(0, n_frames - window + 1, hop_frames)


def chunk_labels(n_frames: int, boundaries: Sequence[int], hop_samples: int,
                 window: int = CHUNK_FRAMES, hop_frames: int = DEFAULT_HOP_FRAMES) -> np.ndarray:
    """1 for chunks whose sample span ``[s*hop, (s+window)*hop)`` holds a boundary."""
    starts = np.array(chunk_starts(n_frames, window, hop_frames), dtype=np.int64)
    bounds = np.sort(np.asarray(boundaries, dtype=np.int64))
    lo = starts * hop_samples
    hi = (starts + window) * hop_samples
    # count of boundaries in [lo, hi)
    inside = np.searchsorted(bounds, hi, side="left") - np.searchsorted(bounds, lo, side="left")
    return (inside > 0).astype(np.int64)


def chunk_and_label(spec: CqtSpectrogram, boundaries: Sequence[int], window: int = CHUNK_FRAMES,
                    hop_frames: int = DEFAULT_HOP_FRAMES) -> List[Chunk]:
    labels = chunk_labels(spec.n_frames, boundaries, spec.hop_samples, window, hop_frames)
    starts = chunk_starts(spec.n_frames, window, hop_frames)
    return [Chunk(s, int(l), spec.values[s:s + window], window) for s, l in zip(starts, labels)]


@dataclass(frozen=True)
class ChunkDecision:
    start_s: float
    p_boundary: float
    decision: int
    p_clean: float


def detect_boundaries(model: Model, clip: AudioClip, window: int = CHUNK_FRAMES,
                      hop_frames: int = DEFAULT_HOP_FRAMES, config: CqtConfig = CqtConfig(),
                      batch_size: int = 32) -> List[ChunkDecision]:
    """Classify every sliding-window chunk of ``clip`` for splice boundaries."""
    t, f, c = model.config.input_shape
    if model.config.num_classes != 2:
        raise ModelConfigError("boundary detection needs a 2-class model")
    if (t, c) != (window, 1):
        raise ModelConfigError(f"model input {model.config.input_shape} does not take {window}-frame chunks")
    min_samples = window * config.hop_samples(clip.sample_rate_hz)
    if len(clip) < min_samples:
        raise TooShortError(f"clip of {len(clip)} samples is shorter than one chunk ({min_samples})")
    spec = cqt(clip, config)
    if spec.bins != f:
        raise ModelConfigError(f"model expects {f} bins, features have {spec.bins}")
    chunks = chunk_and_label(spec, (), window, hop_frames)
    x = np.stack([ch.feature for ch in chunks]).astype(np.float32)[..., None]
    probs = model.predict(x, batch_size)
    hop_s = spec.hop_samples / clip.sample_rate_hz
    return [ChunkDecision(ch.start_frame * hop_s, float(p[1]), int(np.argmax(p)), float(p[0]))
            for ch, p in zip(chunks, probs)]


def write_decisions(decisions: Sequence[ChunkDecision], path: PathLike) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["chunk_start_s", "p_boundary", "decision"])
        for d in decisions:
            w.writerow([f"{d.start_s:.3f}", repr(d.p_boundary), d.decision])
