"""Sparse categorical accuracy, EER and normalized minimum t-DCF.

Scores follow the convention "higher = more bonafide"; a record is accepted
as bonafide at threshold ``t`` iff ``score >= t``.  Threshold sweeps run over
every distinct score plus ``+inf`` (reject everything), so both trivial
operating points are always present.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, List, Sequence, Tuple, Union

import numpy as np

PathLike = Union[str, Path]

TDCF_VARIANT = "asvspoof2019-constrained"


class MetricError(ValueError):
    pass


class MetricInputError(MetricError):
    pass


class TdcfConfigError(MetricError):
    pass


@dataclass(frozen=True)
class ScoreRecord:
    utt_id: str
    score: float
    truth: str  # bonafide | spoof

    def __post_init__(self):
        if self.truth not in ("bonafide", "spoof"):
            raise MetricInputError(f"truth must be bonafide or spoof, got {self.truth!r}")
        if not math.isfinite(self.score):
            raise MetricInputError(f"non-finite score for {self.utt_id}")


@dataclass(frozen=True)
class TdcfConfig:
    c_miss_asv: float = 1.0
    c_fa_asv: float = 10.0
    c_miss_cm: float = 1.0
    c_fa_cm: float = 10.0
    p_tar: float = 0.9405
    p_non: float = 0.0095
    p_spoof: float = 0.05
    p_miss_asv: float = 0.0
    p_fa_asv: float = 0.0
    p_miss_spoof_asv: float = 0.0

    def validate(self) -> "TdcfConfig":
        priors = (self.p_tar, self.p_non, self.p_spoof)
        if min(priors) < 0 or not math.isclose(sum(priors), 1.0, abs_tol=1e-9):
            raise TdcfConfigError(f"priors must be nonnegative and sum to 1, got {priors}")
        if min(self.c_miss_asv, self.c_fa_asv, self.c_miss_cm, self.c_fa_cm) <= 0:
            raise TdcfConfigError("costs must be positive")
        for rate in (self.p_miss_asv, self.p_fa_asv, self.p_miss_spoof_asv):
            if not 0 <= rate <= 1:
                raise TdcfConfigError(f"ASV rates must lie in [0, 1], got {rate}")
        return self

    def weights(self) -> Tuple[float, float]:
        """(C1, C2): costs of a CM miss and a CM false alarm."""
        c1 = self.p_tar * (self.c_miss_cm - self.c_miss_asv * self.p_miss_asv) \
            - self.p_non * self.c_fa_asv * self.p_fa_asv
        c2 = self.c_fa_cm * self.p_spoof * (1.0 - self.p_miss_spoof_asv)
        return c1, c2


def sca(predictions: Sequence[int], truths: Sequence[int]) -> float:
    """Fraction of exact label matches."""
    p = np.asarray(predictions)
    t = np.asarray(truths)
    if p.shape != t.shape:
        raise MetricInputError(f"length mismatch: {p.shape} vs {t.shape}")
    if p.size == 0:
        raise MetricInputError("sca of empty input")
    return float(np.count_nonzero(p == t)) / p.size


def merge_to_binary(probs: np.ndarray) -> np.ndarray:
    """Bonafide score from [B, K] class probabilities (column 0 is bonafide)."""
    probs = np.asarray(probs)
    if probs.ndim != 2 or probs.shape[1] < 2:
        raise MetricInputError(f"expected [B, K>=2] probabilities, got {probs.shape}")
    return probs[:, 0].astype(np.float64)


def _split(records: Iterable[ScoreRecord]) -> Tuple[np.ndarray, np.ndarray]:
    records = list(records)
    bona = np.array([r.score for r in records if r.truth == "bonafide"], dtype=np.float64)
    spoof = np.array([r.score for r in records if r.truth == "spoof"], dtype=np.float64)
    if bona.size == 0 or spoof.size == 0:
        raise MetricError("need at least one bonafide and one spoof record")
    return bona, spoof


def det_curve(records: Iterable[ScoreRecord]) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(thresholds, FRR, FAR) ascending in threshold, ending at +inf."""
    bona, spoof = _split(records)
    thresholds = np.append(np.unique(np.concatenate([bona, spoof])), np.inf)
    bona.sort()
    spoof.sort()
    # rejected bonafide: score < t; accepted spoof: score >= t
    frr_counts = np.searchsorted(bona, thresholds, side="left")
    far_counts = spoof.size - np.searchsorted(spoof, thresholds, side="left")
    return thresholds, frr_counts / bona.size, far_counts / spoof.size


def eer(records: Iterable[ScoreRecord]) -> Tuple[float, float]:
    """(EER, threshold) at the sweep point minimizing |FRR - FAR|.

    The EER is the mean of FRR and FAR at that point; ties go to the
    smaller threshold.
    """
    thresholds, frr, far = det_curve(records)
    i = int(np.argmin(np.abs(frr - far)))
    return float((frr[i] + far[i]) / 2.0), float(thresholds[i])


def tdcf_curve(records: Iterable[ScoreRecord], cfg: TdcfConfig = TdcfConfig()) -> Tuple[np.ndarray, np.ndarray]:
    """(thresholds, normalized t-DCF) over the sweep."""
    cfg.validate()
    c1, c2 = cfg.weights()
    norm = min(c1, c2)
    if norm <= 0:
        raise TdcfConfigError(f"t-DCF normalizer min(C1, C2) = {norm} is not positive")
    thresholds, p_miss, p_fa = det_curve(records)
    return thresholds, (c1 * p_miss + c2 * p_fa) / norm


def min_tdcf(records: Iterable[ScoreRecord], cfg: TdcfConfig = TdcfConfig()) -> float:
    _, curve = tdcf_curve(records, cfg)
    return float(curve.min())


# -- files ---------------------------------------------------------------

def read_scores(path: PathLike) -> List[ScoreRecord]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if not {"utt_id", "score", "truth"} <= set(reader.fieldnames or []):
            raise MetricInputError(f"{path}: expected columns utt_id,score,truth")
        return [ScoreRecord(r["utt_id"], float(r["score"]), r["truth"].strip()) for r in reader]


def write_scores(records: Iterable[ScoreRecord], path: PathLike) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["utt_id", "score", "truth"])
        for r in records:
            w.writerow([r.utt_id, repr(r.score), r.truth])


def write_det(records: Iterable[ScoreRecord], path: PathLike) -> None:
    thresholds, frr, far = det_curve(records)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["threshold", "far", "frr"])
        for t, a, r in zip(thresholds, far, frr):
            w.writerow([repr(float(t)), repr(float(a)), repr(float(r))])


_RATE_KEYS = {"p_miss_asv", "p_fa_asv", "p_miss_spoof_asv"}


def read_asv_rates(path: PathLike) -> dict:
    """ASV operating rates from ``key value`` or ``key=value`` lines."""
    rates = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, _, value = line.replace("=", " ").partition(" ")
        key = key.strip().lower()
        if key not in _RATE_KEYS:
            raise TdcfConfigError(f"{path}:{lineno}: unknown ASV rate {key!r}")
        rates[key] = float(value)
    missing = _RATE_KEYS - set(rates)
    if missing:
        raise TdcfConfigError(f"{path}: missing ASV rates {sorted(missing)}")
    return rates
