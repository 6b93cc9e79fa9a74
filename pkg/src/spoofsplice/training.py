"""Labels, loss, Adam, and the dev-loss-selected training loop."""
from __future__ import annotations

import csv
import json
import logging
import math
from collections import Counter
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from . import autodiff as ad
from .audio_io import read_wav
from .autodiff import Tensor
from .features import CqtConfig, cqt, fit_frames, read_features
from .metrics import sca
from .model import Checkpoint, Model

PathLike = Union[str, Path]

log = logging.getLogger(__name__)

BONAFIDE, TTS, VC = 0, 1, 2
SPOOF = 1
CLASS_NAMES = {2: ("bonafide", "spoof"), 3: ("bonafide", "tts", "vc")}


class LabelError(ValueError):
    pass


class TrainingError(RuntimeError):
    pass


class TrainConfigError(ValueError):
    pass


# -- labels --------------------------------------------------------------

def load_families(path: Optional[PathLike] = None) -> Dict[str, str]:
    """Map attack id -> "TTS" | "VC" from a JSON family table."""
    if path is None:
        text = resources.files("spoofsplice").joinpath("data/la_attack_families.json").read_text()
    else:
        text = Path(path).read_text(encoding="utf-8")
    table = json.loads(text)
    families = {}
    for family in ("TTS", "VC"):
        for attack in table.get(family, []):
            if attack in families:
                raise LabelError(f"attack {attack} listed in more than one family")
            families[attack] = family
    return families


def relabel_la(attack_id: str, mode: str = "3class", families: Optional[Mapping[str, str]] = None) -> int:
    """Class id for an LA attack id: bonafide=0; TTS=1, VC=2 (3class) or spoof=1 (2class)."""
    if mode not in ("2class", "3class"):
        raise LabelError(f"mode must be 2class or 3class, got {mode!r}")
    if attack_id in ("bonafide", "-"):
        return BONAFIDE
    families = load_families() if families is None else families
    family = families.get(attack_id)
    if family is None:
        raise LabelError(f"unknown attack id {attack_id!r}")
    if mode == "2class":
        return SPOOF
    return TTS if family == "TTS" else VC


def read_protocol(path: PathLike) -> List[Tuple[str, str]]:
    """(utterance id, attack id) pairs from an ASVspoof 2019 LA protocol file."""
    rows = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            parts = line.split()
            if not parts:
                continue
            if len(parts) < 5:
                raise LabelError(f"{path}: malformed protocol line {line.strip()!r}")
            _, utt, _, attack, key = parts[:5]
            rows.append((utt, "bonafide" if key == "bonafide" else attack))
    return rows


def protocol_class_counts(path: PathLike, mode: str = "3class",
                          families: Optional[Mapping[str, str]] = None) -> Counter:
    families = load_families() if families is None else families
    return Counter(relabel_la(attack, mode, families) for _, attack in read_protocol(path))


# -- data ----------------------------------------------------------------

@dataclass
class LabeledExample:
    features: np.ndarray  # (frames, bins)
    label: int
    utt_id: str = ""


def read_manifest(path: PathLike) -> List[Tuple[str, str, str]]:
    """Rows of (resolved path, column name, value) from a ``path,attack_id|label`` CSV."""
    path = Path(path)
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        fields = reader.fieldnames or []
        if "path" not in fields or not ({"attack_id", "label"} & set(fields)):
            raise TrainConfigError(f"{path}: manifest needs columns path and attack_id or label")
        column = "label" if "label" in fields else "attack_id"
        rows = []
        for row in reader:
            p = Path(row["path"])
            rows.append((str(p if p.is_absolute() else path.parent / p), column, row[column].strip()))
    return rows


def load_features_for(path: PathLike, frames: int, config: CqtConfig = CqtConfig()) -> np.ndarray:
    path = Path(path)
    spec = cqt(read_wav(path), config) if path.suffix.lower() == ".wav" else read_features(path)
    return fit_frames(spec, frames).values.astype(np.float32)


def load_examples(manifest: PathLike, mode: str = "3class", frames: int = 400,
                  families: Optional[Mapping[str, str]] = None) -> List[LabeledExample]:
    rows = read_manifest(manifest)
    if not rows:
        raise TrainConfigError(f"{manifest}: empty manifest")
    out = []
    for path, column, value in rows:
        if column == "label":
            label = int(value)
        else:
            label = relabel_la(value, mode, families)
        out.append(LabeledExample(load_features_for(path, frames), label, Path(path).stem))
    return out


def stack(examples: Sequence[LabeledExample]) -> Tuple[np.ndarray, np.ndarray]:
    x = np.stack([e.features for e in examples])[..., None]
    y = np.array([e.label for e in examples], dtype=np.int64)
    return x, y


# -- loss and optimizer --------------------------------------------------

def sparse_ce(probs: Tensor, labels: Sequence[int], floor: float = 1e-12) -> Tensor:
    """Mean of -log(probs[i, label_i]) with probabilities floored at ``floor``."""
    labels = np.asarray(labels, dtype=np.int64)
    bsz, k = probs.shape
    if labels.shape != (bsz,):
        raise LabelError(f"expected {bsz} labels, got {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise LabelError(f"labels must lie in [0, {k})")
    onehot = np.zeros(probs.shape, dtype=probs.dtype)
    onehot[np.arange(bsz), labels] = 1.0
    chosen = ad.reduce_sum(ad.mul(probs, Tensor(onehot)), axis=1)
    return ad.scale(ad.mean(ad.log(chosen, floor)), -1.0)


@dataclass
class AdamState:
    step: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: Mapping[str, Tensor], grads: Mapping[str, np.ndarray], state: AdamState,
              lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    """Bias-corrected Adam update applied in place to ``params``."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient for {name} at step {state.step + 1}")
    state.step += 1
    t = state.step
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for name, g in grads.items():
        p = params[name]
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= beta1
        m += (1 - beta1) * g
        v *= beta2
        v += (1 - beta2) * g * g
        p.data = p.data - (lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(p.dtype)


# -- loop ----------------------------------------------------------------

@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    dev_loss: float
    dev_sca: float


@dataclass
class TrainResult:
    best: Checkpoint
    best_epoch: int
    best_dev_loss: float
    log: List[EpochRecord]


class BestKeeper:
    """Keeps the state with the lowest dev loss; ties keep the earlier epoch."""

    def __init__(self):
        self.best_loss = math.inf
        self.best_epoch: Optional[int] = None
        self.state = None

    def offer(self, epoch: int, dev_loss: float, snapshot) -> bool:
        if dev_loss < self.best_loss:
            self.best_loss, self.best_epoch = dev_loss, epoch
            self.state = snapshot() if callable(snapshot) else snapshot
            return True
        return False


def select_best(dev_losses: Sequence[float]) -> int:
    keeper = BestKeeper()
    for epoch, loss in enumerate(dev_losses, 1):
        keeper.offer(epoch, loss, None)
    return keeper.best_epoch


def evaluate(model: Model, examples: Sequence[LabeledExample], batch_size: int = 16) -> Tuple[float, float, np.ndarray]:
    """(mean CE loss, SCA, probabilities) in infer mode, summed in fixed order."""
    x, y = stack(examples)
    probs = model.predict(x, batch_size)
    picked = np.maximum(probs[np.arange(len(y)), y].astype(np.float64), 1e-12)
    loss = float(np.sum(-np.log(picked)) / len(y))
    return loss, sca(np.argmax(probs, axis=1), y), probs


def train_step(model: Model, x: np.ndarray, y: np.ndarray, state: AdamState, lr: float, seed: int) -> float:
    for p in model.params.values():
        p.grad = None
    loss = sparse_ce(model.forward(x, mode="train", seed=seed), y)
    loss.backward()
    grads = {k: (p.grad if p.grad is not None else np.zeros_like(p.data)) for k, p in model.params.items()}
    adam_step(model.params, grads, state, lr=lr)
    return float(loss.data)


def _step_seed(seed: int, epoch: int, step: int) -> int:
    return int(np.random.SeedSequence([seed, epoch, step]).generate_state(1)[0])


def train(model: Model, train_set: Sequence[LabeledExample], dev_set: Sequence[LabeledExample],
          epochs: int = 50, batch_size: int = 16, seed: int = 0, lr: float = 1e-3,
          stop: Optional[Callable[[EpochRecord, Model], bool]] = None) -> TrainResult:
    """Minibatch Adam; returns the checkpoint of the epoch with minimum dev loss.

    ``stop(record, model)`` is called after every epoch; returning True ends
    training early.
    """
    if not train_set or not dev_set:
        raise TrainConfigError("training and dev sets must be non-empty")
    if epochs < 1 or batch_size < 1:
        raise TrainConfigError("epochs and batch_size must be positive")
    k = model.config.num_classes
    for e in list(train_set) + list(dev_set):
        if not 0 <= e.label < k:
            raise LabelError(f"label {e.label} out of range for {k} classes")
    state = AdamState()
    keeper = BestKeeper()
    history: List[EpochRecord] = []
    n = len(train_set)
    for epoch in range(1, epochs + 1):
        order = np.random.default_rng(seed + epoch).permutation(n)
        total = 0.0
        for step, lo in enumerate(range(0, n, batch_size), 1):
            x, y = stack([train_set[i] for i in order[lo:lo + batch_size]])
            try:
                loss = train_step(model, x, y, state, lr, seed=_step_seed(seed, epoch, step))
            except (ad.NumericError, TrainingError) as exc:
                raise TrainingError(f"epoch {epoch} step {step}: {exc}") from exc
            total += loss * len(y)
        dev_loss, dev_sca, _ = evaluate(model, dev_set, batch_size)
        record = EpochRecord(epoch, total / n, dev_loss, dev_sca)
        history.append(record)
        kept = keeper.offer(epoch, dev_loss, lambda: model.to_checkpoint())
        log.info("event=epoch epoch=%d train_loss=%.6f dev_loss=%.6f dev_sca=%.4f kept=%s",
                 epoch, record.train_loss, dev_loss, dev_sca, kept)
        if stop is not None and stop(record, model):
            break
    best = keeper.state
    best.metadata.update(epoch=keeper.best_epoch, dev_loss=keeper.best_loss, seed=seed)
    return TrainResult(best, keeper.best_epoch, keeper.best_loss, history)


def write_log(history: Sequence[EpochRecord], path: PathLike) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "train_loss", "dev_loss", "dev_sca"])
        for r in history:
            w.writerow([r.epoch, repr(r.train_loss), repr(r.dev_loss), repr(r.dev_sca)])
