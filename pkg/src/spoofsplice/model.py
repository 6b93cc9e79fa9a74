"""SE-Res2Net34 and SE-Res2Net34-Conformer assembly, forward pass and checkpoints."""
from __future__ import annotations

import dataclasses
import json
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .blocks import (
    Buffers,
    ConformerConfig,
    ParamFactory,
    Params,
    SeRes2NetBlockConfig,
    conformer_block,
    init_conformer,
    init_se_res2net,
    se_res2net_block,
)

PathLike = Union[str, Path]

CHECKPOINT_MAGIC = b"SPSPCKPT"
CHECKPOINT_VERSION = 1


class ModelConfigError(ValueError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    variant: str = "plain"  # plain | conformer
    input_shape: Tuple[int, int, int] = (400, 432, 1)  # (time, frequency, channels)
    encoder_channels: Tuple[int, ...] = (16, 16, 16)
    stage_blocks: Tuple[int, ...] = (3, 4, 6, 3)
    stage_channels: Tuple[int, ...] = (16, 32, 64, 128)  # bottleneck width per stage
    stage_strides: Tuple[int, ...] = (1, 2, 2, 2)
    expansion: int = 4
    res2net_scale: int = 4
    se_reduction: int = 16
    conformer: ConformerConfig = ConformerConfig()
    num_conformer_blocks: int = 2
    num_classes: int = 2

    def validate(self) -> "ModelConfig":
        if self.variant not in ("plain", "conformer"):
            raise ModelConfigError(f"variant must be plain or conformer, got {self.variant!r}")
        if self.num_classes not in (2, 3):
            raise ModelConfigError("num_classes must be 2 or 3")
        if not (len(self.stage_blocks) == len(self.stage_channels) == len(self.stage_strides)):
            raise ModelConfigError("stage_blocks, stage_channels and stage_strides differ in length")
        if len(self.input_shape) != 3 or min(self.input_shape) < 1:
            raise ModelConfigError(f"bad input_shape {self.input_shape}")
        if not self.encoder_channels:
            raise ModelConfigError("encoder needs at least one layer")
        for ch in self.stage_channels:
            if ch % self.res2net_scale:
                raise ModelConfigError(f"stage width {ch} not divisible by scale {self.res2net_scale}")
            if (ch * self.expansion) % self.se_reduction:
                raise ModelConfigError(
                    f"se_reduction {self.se_reduction} does not divide {ch * self.expansion}")
        if self.variant == "conformer" and self.num_conformer_blocks < 1:
            raise ModelConfigError("conformer variant needs at least one conformer block")
        return self

    def to_dict(self) -> Dict[str, Any]:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: Dict[str, Any]) -> "ModelConfig":
        d = dict(d)
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ModelConfigError(f"unknown model config keys: {sorted(unknown)}")
        if "conformer" in d and isinstance(d["conformer"], dict):
            d["conformer"] = ConformerConfig(**d["conformer"])
        for key in ("input_shape", "encoder_channels", "stage_blocks", "stage_channels", "stage_strides"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d).validate()

    def canonical_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))


PRESETS: Dict[str, ModelConfig] = {
    "default-plain": ModelConfig(variant="plain"),
    "default-conformer": ModelConfig(variant="conformer", num_classes=3),
    # desk-scale configurations for smoke runs
    "tiny-plain": ModelConfig(
        variant="plain", encoder_channels=(4, 4, 4), stage_blocks=(1, 1),
        stage_channels=(8, 16), stage_strides=(2, 2), expansion=2, se_reduction=4),
    "tiny-conformer": ModelConfig(
        variant="conformer", encoder_channels=(4, 4, 4), stage_blocks=(1, 1),
        stage_channels=(8, 16), stage_strides=(2, 2), expansion=2, se_reduction=4,
        conformer=ConformerConfig(d_model=16, heads=2, head_size=8, conv_kernel=8)),
    "chunk-plain": ModelConfig(variant="plain", input_shape=(16, 432, 1)),
    "chunk-conformer": ModelConfig(variant="conformer", input_shape=(16, 432, 1)),
}


def preset(name: str, **overrides) -> ModelConfig:
    try:
        cfg = PRESETS[name]
    except KeyError:
        raise ModelConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None
    return dataclasses.replace(cfg, **overrides).validate()


@dataclass
class Checkpoint:
    config: ModelConfig
    params: Dict[str, np.ndarray]
    buffers: Dict[str, np.ndarray]
    metadata: Dict[str, Any] = field(default_factory=dict)


@dataclass(frozen=True)
class _Stage:
    blocks: Tuple[SeRes2NetBlockConfig, ...]


def _plan(config: ModelConfig) -> List[_Stage]:
    """Per-block configs with strides resolved against the input size."""
    t, f, _ = config.input_shape
    cin = config.encoder_channels[-1]
    stages = []
    for n_blocks, width, stride in zip(config.stage_blocks, config.stage_channels, config.stage_strides):
        out = width * config.expansion
        # never stride time below a single frame; keep reducing frequency
        st = (stride if t > 1 else 1, stride)
        blocks = []
        for i in range(n_blocks):
            s = st if i == 0 else (1, 1)
            blocks.append(SeRes2NetBlockConfig(
                in_channels=cin, mid_channels=width // config.res2net_scale, out_channels=out,
                scale=config.res2net_scale, se_reduction=config.se_reduction, stride=s))
            cin = out
            t, f = -(-t // s[0]), -(-f // s[1])
        stages.append(_Stage(tuple(blocks)))
    return stages


class Model:
    def __init__(self, config: ModelConfig, params: Params, buffers: Buffers):
        self.config = config
        self.params = params
        self.buffers = buffers
        self.stages = _plan(config)

    @property
    def manifest(self) -> List[str]:
        if self.config.variant == "plain":
            return ["encoder", "stages", "global_pool", "classifier"]
        convs = [f"conformer_{i + 1}" for i in range(self.config.num_conformer_blocks)]
        return ["encoder", "stages", "freq_pool", "dense", *convs, "time_pool", "classifier"]

    @property
    def out_channels(self) -> int:
        return self.config.stage_channels[-1] * self.config.expansion if self.config.stage_blocks else \
            self.config.encoder_channels[-1]

    def parameters(self) -> List[Tensor]:
        return list(self.params.values())

    def count_params(self) -> int:
        return count_params(self)

    def forward(self, x, mode: str = "infer", seed: int = 0) -> Tensor:
        """Class probabilities for ``x[B, T, F, 1]``; dropout seeds derive from ``seed``."""
        cfg = self.config
        x = ad.as_tensor(x)
        if tuple(x.shape[1:]) != tuple(cfg.input_shape):
            raise ad.ShapeError(f"model expects input [B, {', '.join(map(str, cfg.input_shape))}], "
                                f"got {list(x.shape)}")
        x = Tensor(x.data.astype(self._dtype(), copy=False)) if not x.requires_grad else x
        rng = np.random.default_rng(seed)
        for layer in self.manifest:
            try:
                x = self._apply(layer, x, mode, rng)
            except ad.NumericError as exc:
                raise ad.NumericError(f"layer {layer}: {exc}") from exc
        return x

    def _dtype(self):
        return next(iter(self.params.values())).dtype

    def _apply(self, layer, x, mode, rng):
        p, b, cfg = self.params, self.buffers, self.config
        if layer == "encoder":
            for i in range(len(cfg.encoder_channels)):
                x = ad.conv2d(x, p[f"encoder.{i}.conv"])
                x = ad.batch_norm(x, p[f"encoder.{i}.bn.gamma"], p[f"encoder.{i}.bn.beta"],
                                  b[f"encoder.{i}.bn.mean"], b[f"encoder.{i}.bn.var"], mode)
                x = ad.relu(x)
            return x
        if layer == "stages":
            for si, stage in enumerate(self.stages):
                for bi, bcfg in enumerate(stage.blocks):
                    x = se_res2net_block(x, p, b, f"stage{si + 1}.block{bi + 1}", bcfg, mode)
            return x
        if layer == "global_pool":
            return ad.global_avg_pool_2d(x)
        if layer == "freq_pool":
            return ad.avg_pool_axis(x, axis=2)
        if layer == "dense":
            return ad.dense(x, p["proj.w"], p["proj.b"])
        if layer.startswith("conformer_"):
            i = int(layer.split("_")[1])
            return conformer_block(x, p, b, f"conformer{i}", cfg.conformer, mode, rng)
        if layer == "time_pool":
            return ad.global_avg_pool_1d(x)
        if layer == "classifier":
            return ad.softmax(ad.dense(x, p["classifier.w"], p["classifier.b"]), axis=-1)
        raise KeyError(layer)

    def predict(self, x: np.ndarray, batch_size: int = 8) -> np.ndarray:
        """Infer-mode probabilities for a stack of inputs, without a graph."""
        out = []
        with ad.no_grad():
            for i in range(0, len(x), batch_size):
                out.append(self.forward(x[i:i + batch_size], mode="infer").data)
        return np.concatenate(out, axis=0)

    def to_checkpoint(self, metadata: Optional[Dict[str, Any]] = None) -> Checkpoint:
        return Checkpoint(
            self.config,
            {k: v.data.copy() for k, v in self.params.items()},
            {k: v.copy() for k, v in self.buffers.items()},
            dict(metadata or {}),
        )

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint) -> "Model":
        expected = build(ckpt.config, seed=0)
        _check_names(expected, ckpt)
        params = {k: Tensor(ckpt.params[k].astype(np.float32), requires_grad=True, name=k)
                  for k in expected.params}
        buffers = {k: ckpt.buffers[k].astype(np.float32) for k in expected.buffers}
        return cls(ckpt.config, params, buffers)

    def load_state(self, ckpt: Checkpoint) -> None:
        """Copy parameter and buffer values from ``ckpt`` into this model."""
        _check_names(self, ckpt)
        for k, t in self.params.items():
            t.data = ckpt.params[k].astype(t.dtype).copy()
        for k in self.buffers:
            self.buffers[k] = ckpt.buffers[k].astype(self.buffers[k].dtype).copy()


def build(config: ModelConfig, seed: int = 0, dtype=np.float32) -> Model:
    """Build and initialize a model; identical seeds give identical parameters."""
    config.validate()
    f = ParamFactory(np.random.default_rng(seed), dtype)
    cin = config.input_shape[2]
    for i, ch in enumerate(config.encoder_channels):
        f.conv(f"encoder.{i}.conv", 3, 3, cin, ch)
        f.batch_norm(f"encoder.{i}.bn", ch)
        cin = ch
    for si, stage in enumerate(_plan(config)):
        for bi, bcfg in enumerate(stage.blocks):
            init_se_res2net(f, f"stage{si + 1}.block{bi + 1}", bcfg)
            cin = bcfg.out_channels
    if config.variant == "conformer":
        f.dense("proj", cin, config.conformer.d_model)
        for i in range(config.num_conformer_blocks):
            init_conformer(f, f"conformer{i + 1}", config.conformer)
        cin = config.conformer.d_model
    f.dense("classifier", cin, config.num_classes)
    return Model(config, f.params, f.buffers)


def count_params(model: Model) -> int:
    return int(sum(t.size for t in model.params.values()))


def _check_names(model: Model, ckpt: Checkpoint) -> None:
    for kind, want, have in (("parameter", model.params, ckpt.params),
                             ("buffer", model.buffers, ckpt.buffers)):
        for name, value in want.items():
            if name not in have:
                raise CheckpointError(f"checkpoint is missing {kind} {name!r}")
            shape = value.shape
            if tuple(have[name].shape) != tuple(shape):
                raise CheckpointError(
                    f"{kind} {name!r} has shape {tuple(have[name].shape)}, expected {tuple(shape)}")
        extra = sorted(set(have) - set(want))
        if extra:
            raise CheckpointError(f"checkpoint has unexpected {kind} {extra[0]!r}")


# -- checkpoint files ----------------------------------------------------
# MAGIC | u32 version | u32 n + config json | u32 n + metadata json | u32 entries
# entry: u16 n + name | u8 kind (0 param, 1 buffer) | u8 ndim | u32 dims | f32 payload
# trailer: u32 crc32 over all payloads

def save_checkpoint(model: Union[Model, Checkpoint], path: PathLike,
                    metadata: Optional[Dict[str, Any]] = None) -> None:
    ckpt = model.to_checkpoint(metadata) if isinstance(model, Model) else model
    if metadata and isinstance(model, Checkpoint):
        ckpt = dataclasses.replace(ckpt, metadata={**ckpt.metadata, **metadata})
    chunks = [CHECKPOINT_MAGIC, struct.pack("<I", CHECKPOINT_VERSION)]
    for text in (ckpt.config.canonical_json(), json.dumps(ckpt.metadata, sort_keys=True)):
        raw = text.encode("utf-8")
        chunks += [struct.pack("<I", len(raw)), raw]
    entries = [(0, k, v) for k, v in ckpt.params.items()] + [(1, k, v) for k, v in ckpt.buffers.items()]
    chunks.append(struct.pack("<I", len(entries)))
    crc = 0
    for kind, name, value in entries:
        raw_name = name.encode("utf-8")
        arr = np.ascontiguousarray(value, dtype="<f4")
        payload = arr.tobytes()
        crc = zlib.crc32(payload, crc)
        chunks += [struct.pack("<H", len(raw_name)), raw_name, struct.pack("<BB", kind, arr.ndim),
                   struct.pack(f"<{arr.ndim}I", *arr.shape), payload]
    chunks.append(struct.pack("<I", crc))
    Path(path).write_bytes(b"".join(chunks))


class _Reader:
    def __init__(self, data: bytes):
        self.data, self.pos = data, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError("checkpoint file is truncated")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def read_checkpoint(path: PathLike) -> Checkpoint:
    r = _Reader(Path(path).read_bytes())
    if r.take(len(CHECKPOINT_MAGIC)) != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    (version,) = r.unpack("<I")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    try:
        config = ModelConfig.from_dict(json.loads(r.take(r.unpack("<I")[0]).decode("utf-8")))
        metadata = json.loads(r.take(r.unpack("<I")[0]).decode("utf-8"))
    except (ValueError, TypeError) as exc:
        if isinstance(exc, CheckpointError):
            raise
        raise CheckpointError(f"{path}: corrupt header ({exc})") from exc
    (count,) = r.unpack("<I")
    params, buffers = {}, {}
    crc = 0
    for _ in range(count):
        name = r.take(r.unpack("<H")[0]).decode("utf-8")
        kind, ndim = r.unpack("<BB")
        shape = r.unpack(f"<{ndim}I")
        payload = r.take(4 * int(np.prod(shape, dtype=np.int64)))
        crc = zlib.crc32(payload, crc)
        arr = np.frombuffer(payload, dtype="<f4").reshape(shape).astype(np.float32)
        (params if kind == 0 else buffers)[name] = arr
    (stored,) = r.unpack("<I")
    if stored != crc:
        raise CheckpointError(f"{path}: checksum mismatch")
    return Checkpoint(config, params, buffers, metadata)


def load_checkpoint(path: PathLike, config: Optional[ModelConfig] = None) -> Model:
    """Load a model; with ``config``, the file must match that architecture."""
    ckpt = read_checkpoint(path)
    if config is not None:
        ckpt = dataclasses.replace(ckpt, config=config)
    return Model.from_checkpoint(ckpt)
