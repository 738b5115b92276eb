"""Full neural operator: MLP encoder, L attention blocks, linear projection.

Checkpoints use a single binary file: magic ``LA2C``, u32 version, u64 JSON
header length, a UTF-8 JSON header (config, parameter names/shapes/offsets),
then the raw little-endian float64 parameter blobs in header order.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, asdict
from typing import Callable, Iterator

import numpy as np

from .attention import GlaLayerParams, la2_layer
from .geometry import KnnIndex, PointSet
from .tensor import (
    Tensor,
    TensorError,
    add,
    concat_lastdim,
    gelu,
    matmul,
)

__all__ = ["ModelConfig", "OperatorModel", "init_model", "encode", "forward",
           "mask_trajectory", "save_checkpoint", "load_checkpoint",
           "CheckpointError"]

CHECKPOINT_MAGIC = b"LA2C"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    """Malformed or truncated checkpoint file."""


@dataclass
class ModelConfig:
    in_channels: int          # C_f, input function channels
    coord_channels: int       # C_s
    out_channels: int         # C_u
    k: int                    # neighbor patch size
    layers: int = 8
    hidden: int = 128
    alpha: float = 10.0
    ff_hidden: int | None = None
    heads: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.ff_hidden is None:
            self.ff_hidden = 2 * self.hidden
        self.validate()

    @property
    def branch(self) -> int:
        return self.hidden // 2

    def validate(self) -> None:
        if self.hidden % 2 != 0:
            raise TensorError(f"hidden width must be even, got {self.hidden}")
        if self.layers < 1:
            raise TensorError("need at least one layer")
        if self.k < 1:
            raise TensorError("patch size K must be >= 1")
        if self.heads < 1 or (self.hidden // 2) % self.heads != 0:
            raise TensorError(
                f"branch width {self.hidden // 2} not divisible by {self.heads} heads")
        if min(self.in_channels, self.coord_channels, self.out_channels) < 1:
            raise TensorError("channel counts must be positive")
        if self.alpha <= 0:
            raise TensorError("alpha must be positive")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


@dataclass
class OperatorModel:
    config: ModelConfig
    enc_w1: Tensor
    enc_b1: Tensor
    enc_w2: Tensor
    enc_b2: Tensor
    blocks: list[GlaLayerParams] = field(default_factory=list)
    proj_w: Tensor = None
    proj_b: Tensor = None

    def named_parameters(self) -> Iterator[tuple[str, Tensor]]:
        """All learnables in a fixed, checkpoint-stable order."""
        yield "enc_w1", self.enc_w1
        yield "enc_b1", self.enc_b1
        yield "enc_w2", self.enc_w2
        yield "enc_b2", self.enc_b2
        for i, blk in enumerate(self.blocks):
            for name, t in blk.named_params():
                yield f"blocks.{i}.{name}", t
        yield "proj_w", self.proj_w
        yield "proj_b", self.proj_b

    def parameter_count(self) -> int:
        return sum(t.size for _, t in self.named_parameters())


def init_model(cfg: ModelConfig) -> OperatorModel:
    """Deterministic seeded initialization; equal seeds give equal models."""
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    c = cfg.hidden
    c_in = cfg.in_channels + cfg.coord_channels

    def w(fan_in, fan_out):
        bound = 1.0 / np.sqrt(fan_in)
        return Tensor(rng.uniform(-bound, bound, size=(fan_in, fan_out)),
                      requires_grad=True)

    def b(n):
        return Tensor(np.zeros(n), requires_grad=True)

    blocks = [GlaLayerParams.initialize(rng, c, cfg.ff_hidden, cfg.alpha, cfg.heads)
              for _ in range(cfg.layers)]
    return OperatorModel(
        config=cfg,
        enc_w1=w(c_in, c), enc_b1=b(c),
        enc_w2=w(c, c), enc_b2=b(c),
        blocks=blocks,
        proj_w=w(c, cfg.out_channels), proj_b=b(cfg.out_channels),
    )


def encode(f_in: Tensor, x: PointSet, m: OperatorModel) -> Tensor:
    """Concatenate coordinates to the input field and lift to width C."""
    if f_in.ndim != 2 or f_in.shape[0] != x.m:
        raise TensorError(
            f"input field rows {f_in.shape} must align with {x.m} points")
    if f_in.shape[1] != m.config.in_channels:
        raise TensorError(
            f"expected {m.config.in_channels} input channels, got {f_in.shape[1]}")
    z = concat_lastdim(f_in, x.coords)
    h = gelu(add(matmul(z, m.enc_w1), m.enc_b1))
    return add(matmul(h, m.enc_w2), m.enc_b2)


def forward(m: OperatorModel, f_in: Tensor, x: PointSet, knn: KnnIndex,
            layer_hook: Callable[[int, Tensor], None] | None = None) -> Tensor:
    """Apply encoder, the L blocks in order, and the output projection."""
    if knn.m != x.m:
        raise TensorError("KNN index does not match the point set")
    h = encode(f_in, x, m)
    for i, blk in enumerate(m.blocks):
        h = la2_layer(h, knn, blk)
        if layer_hook is not None:
            layer_hook(i, h)
    return add(matmul(h, m.proj_w), m.proj_b)


def mask_trajectory(m: OperatorModel) -> list[float]:
    """Per-layer effective-neighbor fraction sigmoid(s), each in (0, 1)."""
    return [blk.mask.fraction() for blk in m.blocks]


def save_checkpoint(m: OperatorModel, path) -> None:
    params = list(m.named_parameters())
    header_params = []
    offset = 0
    for name, t in params:
        header_params.append({"name": name, "shape": list(t.shape), "offset": offset})
        offset += t.size * 8
    header = json.dumps({"config": m.config.to_dict(),
                         "params": header_params}).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for _, t in params:
            fh.write(t.data.astype("<f8").tobytes())


def load_checkpoint(path) -> OperatorModel:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 16 or blob[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    (version,) = struct.unpack("<I", blob[4:8])
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    (hlen,) = struct.unpack("<Q", blob[8:16])
    if len(blob) < 16 + hlen:
        raise CheckpointError("truncated checkpoint header")
    try:
        header = json.loads(blob[16:16 + hlen].decode("utf-8"))
        cfg = ModelConfig.from_dict(header["config"])
        entries = header["params"]
    except (ValueError, KeyError, TypeError) as exc:
        raise CheckpointError(f"malformed checkpoint header: {exc}") from exc

    m = init_model(cfg)
    slots = dict(m.named_parameters())
    if set(slots) != {e["name"] for e in entries}:
        raise CheckpointError("checkpoint parameter names do not match config")
    base = 16 + hlen
    for e in entries:
        t = slots[e["name"]]
        shape = tuple(e["shape"])
        if shape != t.shape:
            raise CheckpointError(
                f"parameter {e['name']} has shape {shape}, expected {t.shape}")
        start = base + e["offset"]
        end = start + t.size * 8
        if end > len(blob):
            raise CheckpointError("truncated checkpoint data")
        t.data = np.frombuffer(blob[start:end], dtype="<f8").reshape(shape).astype(
            np.float64)
    return m
