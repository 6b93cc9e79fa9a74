import logging

import numpy as np
import pytest

from spoofsplice.audio_io import AudioClip, WordAlignment, measured_snr_db, read_wav
from spoofsplice.features import TooShortError, cqt
from spoofsplice.model import ModelConfigError, build, preset
from spoofsplice.splicing import (
    GenerationError,
    SpliceConfigError,
    Utterance,
    build_corpus,
    chunk_and_label,
    chunk_labels,
    detect_boundaries,
    generate_splice,
    load_corpus,
    read_manifest,
    write_decisions,
)
from spoofsplice.toy import synthetic_utterance, write_word_corpus

from oracles import diff_boundaries, naive_chunk_labels

HOP = 256


def _pair(seed, host_words=6, donor_words=5):
    rng = np.random.default_rng(seed)
    host = synthetic_utterance(rng, host_words, "h", "spk")
    donor = synthetic_utterance(rng, donor_words, "d", "spk")
    return host, donor


def _donor_words(donor):
    return [donor.clip.samples[s:e] for s, e, _ in donor.alignment.entries]


# -- generation ----------------------------------------------------------

def test_single_insertion_geometry():
    host, donor = _pair(0)
    clip, rec = generate_splice(host, donor, 1, seed=3)
    (word, at), = rec.insertions
    s, e, _ = donor.alignment.entries[word]
    assert len(rec.boundaries) == 2
    assert len(clip) == len(host.clip) + (e - s)
    b0, b1 = rec.boundaries
    assert clip.samples[b0:b1].tobytes() == donor.clip.samples[s:e].tobytes()
    assert at in host.alignment.boundaries()


@pytest.mark.parametrize("seed", range(30))
def test_random_k_matches_diff_oracle(seed):
    host, donor = _pair(seed)
    k = seed % 3 + 1
    clip, rec = generate_splice(host, donor, k, seed)
    assert rec.k == k and len(rec.boundaries) == 2 * k
    assert list(rec.boundaries) == sorted(rec.boundaries)
    assert diff_boundaries(host.clip.samples, clip.samples, _donor_words(donor)) == list(rec.boundaries)
    # every inserted span is a donor word, bit for bit, in host-position order
    words = [w for w, _ in sorted(rec.insertions, key=lambda ins: ins[1])]
    for (lo, hi), w in zip(zip(rec.boundaries[::2], rec.boundaries[1::2]), words):
        s, e, _ = donor.alignment.entries[w]
        assert clip.samples[lo:hi].tobytes() == donor.clip.samples[s:e].tobytes()
    assert len({w for w, _ in rec.insertions}) == k
    assert len({a for _, a in rec.insertions}) == k


def test_generation_is_seed_deterministic():
    host, donor = _pair(1)
    a = generate_splice(host, donor, 3, 11)
    b = generate_splice(host, donor, 3, 11)
    assert a[0].samples.tobytes() == b[0].samples.tobytes() and a[1] == b[1]


def test_empty_insertion_returns_host():
    host, donor = _pair(2)
    clip, rec = generate_splice(host, donor, 0, 0, allow_empty=True)
    assert clip.samples.tobytes() == host.clip.samples.tobytes()
    spec = cqt(clip)
    assert not any(ch.label for ch in chunk_and_label(spec, rec.boundaries))


def test_generation_errors():
    host, donor = _pair(3, donor_words=2)
    with pytest.raises(SpliceConfigError):
        generate_splice(host, donor, 4, 0)
    with pytest.raises(SpliceConfigError):
        generate_splice(host, donor, 0, 0)
    with pytest.raises(GenerationError, match="words"):
        generate_splice(host, donor, 3, 0)
    other = Utterance("o", "other", donor.clip, donor.alignment)
    with pytest.raises(GenerationError, match="speaker"):
        generate_splice(host, other, 1, 0)
    edge_only = Utterance("e", "spk", AudioClip(np.zeros(100)), WordAlignment(((0, 100, "w"),)))
    with pytest.raises(GenerationError, match="interior"):
        generate_splice(edge_only, donor, 1, 0)


# -- corpus --------------------------------------------------------------

def test_clean_corpus(tmp_path):
    corpus = write_word_corpus(tmp_path / "c", speakers=2, utts_per_speaker=3, seed=0)
    records = build_corpus(corpus, tmp_path / "out", pairs_per_speaker=2, seed=7)
    assert len(records) == 4
    rows = read_manifest(tmp_path / "out" / "manifest.csv")
    assert [r[4] for r in rows] == [r.boundaries for r in records]
    speakers = load_corpus(corpus)
    for rec in records:
        assert 2 <= len(rec.boundaries) <= 6
        assert rec.host_id.split("/")[0] == rec.donor_id.split("/")[0]
        host = next(u for u in speakers[rec.host_id.split("/")[0]] if u.utt_id == rec.host_id)
        out = read_wav(tmp_path / "out" / rec.output_path)
        assert len(out) == len(host.clip) + sum(np.diff(rec.boundaries)[::2])


def test_corpus_is_byte_identical_for_same_seed(tmp_path):
    corpus = write_word_corpus(tmp_path / "c", speakers=2, utts_per_speaker=3, seed=1)
    build_corpus(corpus, tmp_path / "a", seed=5)
    build_corpus(corpus, tmp_path / "b", seed=5)
    names = sorted(p.name for p in (tmp_path / "a").iterdir())
    assert names == sorted(p.name for p in (tmp_path / "b").iterdir())
    for n in names:
        assert (tmp_path / "a" / n).read_bytes() == (tmp_path / "b" / n).read_bytes()


def test_noisy_corpus_host_snr(tmp_path):
    corpus = write_word_corpus(tmp_path / "c", speakers=1, utts_per_speaker=2, seed=2)
    rng = np.random.default_rng(0)
    noise = AudioClip(0.2 * rng.standard_normal(5000))
    (rec,) = build_corpus(corpus, tmp_path / "out", noise=(noise, 15.0), seed=3)
    host = next(u for u in load_corpus(corpus)["spk00"] if u.utt_id == rec.host_id)
    out = read_wav(tmp_path / "out" / rec.output_path).samples
    # drop the inserted spans to recover the noisy host
    keep = np.ones(out.size, bool)
    for lo, hi in zip(rec.boundaries[::2], rec.boundaries[1::2]):
        keep[lo:hi] = False
    noisy_host = out[keep]
    assert noisy_host.size == len(host.clip)
    assert abs(measured_snr_db(host.clip.samples, noisy_host - host.clip.samples) - 15.0) < 0.01


def test_speaker_with_one_utterance_is_skipped(tmp_path, caplog):
    corpus = write_word_corpus(tmp_path / "c", speakers=2, utts_per_speaker=1, seed=0)
    with caplog.at_level(logging.WARNING):
        records = build_corpus(corpus, tmp_path / "out")
    assert records == []
    assert "skip_speaker" in caplog.text


# -- chunks --------------------------------------------------------------

def test_boundary_inside_chunk_span():
    labels = chunk_labels(60, [8000], HOP, hop_frames=1)
    assert labels[28] == 1  # span [7168, 11264)
    assert labels[32] == 0  # span [8192, 12288)
    assert labels[16] == 1  # span [4096, 8192)
    assert labels[15] == 0  # span [3840, 7936)

def test_no_boundaries_gives_all_zero():
    assert not chunk_labels(100, [], HOP).any()


def test_labels_match_naive_loop():
    rng = np.random.default_rng(0)
    for _ in range(100):
        n_frames = int(rng.integers(16, 300))
        hop_frames = int(rng.integers(1, 17))
        bounds = sorted(rng.integers(0, n_frames * HOP, size=int(rng.integers(0, 7))).tolist())
        assert chunk_labels(n_frames, bounds, HOP, hop_frames=hop_frames).tolist() == \
            naive_chunk_labels(n_frames, bounds, HOP, hop_frames=hop_frames)


def test_labels_invariant_to_hop_for_shared_spans():
    bounds = [1000, 5000, 20000]
    a = chunk_labels(120, bounds, HOP, hop_frames=4)
    b = chunk_labels(120, bounds, HOP, hop_frames=8)
    assert a[::2].tolist() == b.tolist()


def test_chunk_and_label_slices_features(rng):
    spec = cqt(AudioClip(0.1 * rng.standard_normal(16000)))
    chunks = chunk_and_label(spec, [4000], hop_frames=8)
    assert len(chunks) == (spec.n_frames - 16) // 8 + 1
    for ch in chunks:
        assert ch.feature.shape == (16, 432)
        np.testing.assert_array_equal(ch.feature, spec.values[ch.start_frame:ch.start_frame + 16])
    assert chunks[0].label == 1


def test_chunk_errors():
    with pytest.raises(TooShortError):
        chunk_labels(15, [], HOP)
    with pytest.raises(SpliceConfigError):
        chunk_labels(40, [], HOP, hop_frames=0)


# -- detection -----------------------------------------------------------

@pytest.fixture(scope="module")
def chunk_model():
    return build(preset("tiny-plain", input_shape=(16, 432, 1)), seed=0)


@pytest.mark.parametrize("hop_frames", [1, 8, 5])
def test_detect_row_count_and_probabilities(chunk_model, hop_frames, tmp_path):
    rng = np.random.default_rng(hop_frames)
    clip = AudioClip(0.1 * rng.standard_normal(20000))
    n_frames = cqt(clip).n_frames
    dec = detect_boundaries(chunk_model, clip, hop_frames=hop_frames)
    assert len(dec) == (n_frames - 16) // hop_frames + 1
    for d in dec:
        assert 0.0 <= d.p_boundary <= 1.0
        assert abs(d.p_boundary + d.p_clean - 1.0) <= 1e-6
        assert d.decision == int(d.p_boundary > d.p_clean)
    assert dec[1].start_s == pytest.approx(hop_frames * HOP / 16000)
    write_decisions(dec, tmp_path / "d.csv")
    lines = (tmp_path / "d.csv").read_text().splitlines()
    assert lines[0] == "chunk_start_s,p_boundary,decision" and len(lines) == len(dec) + 1


def test_detect_too_short(chunk_model):
    with pytest.raises(TooShortError):
        detect_boundaries(chunk_model, AudioClip(np.zeros(16 * HOP - 1)))


def test_detect_shape_mismatch():
    clip = AudioClip(np.zeros(8000))
    with pytest.raises(ModelConfigError):
        detect_boundaries(build(preset("tiny-plain", input_shape=(32, 432, 1))), clip)
    with pytest.raises(ModelConfigError):
        detect_boundaries(build(preset("tiny-plain", input_shape=(16, 432, 1), num_classes=3)), clip)
    with pytest.raises(ModelConfigError):
        detect_boundaries(build(preset("tiny-plain", input_shape=(16, 100, 1))), clip)
