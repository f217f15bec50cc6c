"""Trainable global-descriptor head.

Per-point MLP encoder -> softplus shift -> GeM pooling -> linear projection
to a nested (Matryoshka) descriptor.
"""
from __future__ import annotations

import json
import struct
import zlib
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .autodiff import Tensor, parameter, power, segment_mean
from .cloud import EmptyCloudError, PointCloud

GEM_EPS = 1e-6
CHECKPOINT_MAGIC = b"VLPRCKPT"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class DescriptorHeadParams:
    encoder_widths: tuple = (3, 32, 64, 128)
    nonlinearity: str = "relu"
    gem_p: float = 3.0
    output_dim: int = 192
    nested_dims: tuple = (64, 128, 192)
    use_intensity: bool = False
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "encoder_widths", tuple(int(w) for w in self.encoder_widths))
        object.__setattr__(self, "nested_dims", tuple(int(m) for m in self.nested_dims))
        if len(self.encoder_widths) < 2 or min(self.encoder_widths) < 1:
            raise ValueError("encoder_widths needs an input and at least one output width")
        expected_in = 4 if self.use_intensity else 3
        if self.encoder_widths[0] != expected_in:
            raise ValueError(f"encoder input width must be {expected_in}")
        if self.nonlinearity not in ("relu", "softplus"):
            raise ValueError(f"unknown nonlinearity {self.nonlinearity!r}")
        if not self.gem_p > 0:
            raise ValueError("gem_p must be > 0")
        if self.output_dim < 1:
            raise ValueError("output_dim must be >= 1")
        dims = list(self.nested_dims)
        if not dims or dims != sorted(set(dims)) or dims[0] < 1 or dims[-1] != self.output_dim:
            raise ValueError("nested_dims must be strictly increasing and end at output_dim")


@dataclass(frozen=True)
class MatryoshkaDescriptor:
    values: np.ndarray
    nested_dims: tuple = field(default=(64, 128, 192))

    def prefix(self, m: int) -> np.ndarray:
        if m not in self.nested_dims:
            raise ValueError(f"{m} is not one of the nested dims {self.nested_dims}")
        return self.values[:m]


def prefix_normalize(d, m: int, eps: float = 1e-12) -> np.ndarray:
    """First ``m`` entries of ``d`` scaled to unit L2 norm."""
    if isinstance(d, MatryoshkaDescriptor):
        v = d.prefix(m)
    else:
        v = np.asarray(d, dtype=np.float64)[..., :m]
        if v.shape[-1] != m:
            raise ValueError(f"descriptor shorter than prefix {m}")
    norm = np.linalg.norm(v, axis=-1, keepdims=True)
    if np.any(norm < eps):
        raise FloatingPointError("degenerate (near-zero) descriptor prefix")
    return v / norm


def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


class DescriptorHead:
    def __init__(self, params: DescriptorHeadParams = DescriptorHeadParams()):
        self.config = params
        rng = np.random.default_rng(params.seed)
        widths = params.encoder_widths
        self.weights = [
            parameter(_glorot(rng, a, b), f"enc{i}.w") for i, (a, b) in enumerate(zip(widths[:-1], widths[1:]))
        ]
        self.biases = [parameter(np.zeros(b), f"enc{i}.b") for i, b in enumerate(widths[1:])]
        self.gem_p = parameter(params.gem_p, "gem.p")
        self.proj_w = parameter(_glorot(rng, widths[-1], params.output_dim), "proj.w")
        self.proj_b = parameter(np.zeros(params.output_dim), "proj.b")

    def parameters(self) -> list[Tensor]:
        out: list[Tensor] = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out + [self.gem_p, self.proj_w, self.proj_b]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    # ------------------------------------------------------------ forward
    def _inputs(self, cloud: PointCloud) -> np.ndarray:
        if len(cloud) == 0:
            raise EmptyCloudError("descriptor head needs at least one point")
        if self.config.use_intensity:
            if cloud.intensity is None:
                raise ValueError("head configured for intensity but the cloud has none")
            return np.column_stack([cloud.points, cloud.intensity])
        return cloud.points

    def encode(self, x: Tensor) -> Tensor:
        """Per-point features, shifted to be strictly positive."""
        h = x
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ w + b
            if i < last:
                h = h.relu() if self.config.nonlinearity == "relu" else h.softplus()
        return h.softplus() + GEM_EPS

    def gem(self, features: Tensor, segments: np.ndarray, num_segments: int) -> Tensor:
        p = self.gem_p
        pooled = segment_mean(power(features, p), segments, num_segments)
        return power(pooled, 1.0 / p)

    def forward_batch(self, clouds: Sequence[PointCloud]) -> Tensor:
        """Unnormalized descriptors, one row per cloud."""
        if not clouds:
            raise ValueError("empty batch")
        inputs = [self._inputs(c) for c in clouds]
        segments = np.repeat(np.arange(len(inputs)), [len(a) for a in inputs])
        x = Tensor(np.concatenate(inputs, axis=0))
        pooled = self.gem(self.encode(x), segments, len(inputs))
        return pooled @ self.proj_w + self.proj_b

    def forward(self, cloud: PointCloud) -> MatryoshkaDescriptor:
        z = self.forward_batch([cloud])
        return MatryoshkaDescriptor(z.data[0].copy(), self.config.nested_dims)

    def describe(self, clouds: Sequence[PointCloud], chunk: int = 32) -> np.ndarray:
        """Descriptors for many clouds without keeping a graph."""
        rows = [self.forward_batch(clouds[i : i + chunk]).data for i in range(0, len(clouds), chunk)]
        return np.concatenate(rows, axis=0) if rows else np.zeros((0, self.config.output_dim))

    # -------------------------------------------------------- state I/O
    def state(self) -> list[np.ndarray]:
        return [p.data for p in self.parameters()]

    def load_state(self, arrays: Sequence[np.ndarray]) -> None:
        params = self.parameters()
        if len(arrays) != len(params):
            raise CheckpointError(f"expected {len(params)} arrays, got {len(arrays)}")
        for p, a in zip(params, arrays):
            a = np.asarray(a, dtype=np.float64)
            if a.shape != p.shape:
                raise CheckpointError(f"shape mismatch for {p.name}: {a.shape} vs {p.shape}")
            p.data = a.copy()

    def copy(self) -> "DescriptorHead":
        other = DescriptorHead(self.config)
        other.load_state(self.state())
        return other


def save_checkpoint(head: DescriptorHead) -> bytes:
    """Serialize a head: magic, version, JSON header, float64 payload, CRC32."""
    arrays = head.state()
    header = json.dumps(
        {"config": asdict(head.config), "shapes": [list(a.shape) for a in arrays]},
        sort_keys=True,
    ).encode("utf-8")
    payload = b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes() for a in arrays)
    body = struct.pack("<I", len(header)) + header + payload
    return CHECKPOINT_MAGIC + struct.pack("<H", CHECKPOINT_VERSION) + body + struct.pack("<I", zlib.crc32(body))


def load_checkpoint(blob: bytes) -> DescriptorHead:
    if blob[:8] != CHECKPOINT_MAGIC:
        raise CheckpointError("not a descriptor-head checkpoint (bad magic)")
    if len(blob) < 18:
        raise CheckpointError("checkpoint truncated")
    (version,) = struct.unpack_from("<H", blob, 8)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    body, (crc,) = blob[10:-4], struct.unpack("<I", blob[-4:])
    if zlib.crc32(body) != crc:
        raise CheckpointError("checkpoint checksum mismatch")
    (hlen,) = struct.unpack_from("<I", body, 0)
    meta = json.loads(body[4 : 4 + hlen].decode("utf-8"))
    cfg = meta["config"]
    cfg["encoder_widths"] = tuple(cfg["encoder_widths"])
    cfg["nested_dims"] = tuple(cfg["nested_dims"])
    head = DescriptorHead(DescriptorHeadParams(**cfg))
    offset = 4 + hlen
    arrays = []
    for shape in meta["shapes"]:
        count = int(np.prod(shape)) if shape else 1
        chunk = body[offset : offset + 8 * count]
        if len(chunk) != 8 * count:
            raise CheckpointError("checkpoint payload truncated")
        arrays.append(np.frombuffer(chunk, dtype="<f8").reshape(shape).astype(np.float64))
        offset += 8 * count
    if offset != len(body):
        raise CheckpointError("trailing bytes in checkpoint payload")
    head.load_state(arrays)
    return head
