"""MLP feature extractor, cosine classifier head and the checkpoint format."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .tensor import DimensionError, GradientTape, Tensor

__all__ = [
    "Layer",
    "FeatureExtractor",
    "ClassifierWeights",
    "init_extractor",
    "extract_features",
    "cosine_scores",
    "random_unit_columns",
    "normalize_columns",
    "save_checkpoint",
    "load_checkpoint",
    "dump_checkpoint",
    "parse_checkpoint",
    "CheckpointError",
]

ACTIVATIONS = {"none": 0, "relu": 1}
_TAG_TO_ACT = {v: k for k, v in ACTIVATIONS.items()}
MAGIC = b"SSLCKPT\x01"


def _frozen_array(x) -> np.ndarray:
    arr = np.array(x, dtype=np.float64)
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True)
class Layer:
    weight: np.ndarray  # (d_in, d_out)
    bias: np.ndarray  # (d_out,)
    activation: str = "relu"

    def __post_init__(self):
        object.__setattr__(self, "weight", _frozen_array(self.weight))
        object.__setattr__(self, "bias", _frozen_array(self.bias))
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[1],):
            raise DimensionError(
                f"layer weight {self.weight.shape} and bias {self.bias.shape} do not agree"
            )

    @property
    def d_in(self) -> int:
        return self.weight.shape[0]

    @property
    def d_out(self) -> int:
        return self.weight.shape[1]


@dataclass(frozen=True)
class FeatureExtractor:
    """Stack of dense layers. Parameters are read-only arrays."""

    layers: tuple[Layer, ...]
    frozen: bool = False

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        if not self.layers:
            raise ValueError("feature extractor needs at least one layer")
        for i, (a, b) in enumerate(zip(self.layers, self.layers[1:])):
            if a.d_out != b.d_in:
                raise DimensionError(f"layer {i} outputs {a.d_out} but layer {i + 1} takes {b.d_in}")

    @property
    def input_dim(self) -> int:
        return self.layers[0].d_in

    @property
    def output_dim(self) -> int:
        return self.layers[-1].d_out

    def freeze(self) -> "FeatureExtractor":
        return self if self.frozen else replace(self, frozen=True)

    def unfreeze(self) -> "FeatureExtractor":
        return replace(self, frozen=False) if self.frozen else self

    def params(self) -> dict[str, np.ndarray]:
        out = {}
        for i, layer in enumerate(self.layers):
            out[f"extractor.{i}.weight"] = layer.weight
            out[f"extractor.{i}.bias"] = layer.bias
        return out

    def with_params(self, params: dict[str, np.ndarray]) -> "FeatureExtractor":
        layers = tuple(
            Layer(params[f"extractor.{i}.weight"], params[f"extractor.{i}.bias"], layer.activation)
            for i, layer in enumerate(self.layers)
        )
        return replace(self, layers=layers)

    def forward(self, x: np.ndarray) -> np.ndarray:
        """Plain numpy forward pass; no tape."""
        h = np.asarray(x, dtype=np.float64)
        if h.ndim != 2 or h.shape[1] != self.input_dim:
            raise DimensionError(f"batch shape {h.shape} does not match input dim {self.input_dim}")
        for layer in self.layers:
            h = h @ layer.weight + layer.bias
            if layer.activation == "relu":
                h = np.maximum(h, 0.0)
        return h


def init_extractor(sizes: Sequence[int], seed: int, activations: Sequence[str] | None = None) -> FeatureExtractor:
    """Glorot-uniform MLP with zero biases.

    ``sizes`` lists the layer widths, input first: ``[16, 32, 8]`` gives two
    layers. Hidden layers use relu and the last layer is linear unless
    ``activations`` says otherwise.
    """
    sizes = [int(s) for s in sizes]
    if len(sizes) < 2:
        raise ValueError("need at least an input and an output size")
    if min(sizes) < 1:
        raise ValueError(f"layer sizes must be >= 1, got {sizes}")
    n_layers = len(sizes) - 1
    if activations is None:
        activations = ["relu"] * (n_layers - 1) + ["none"]
    if len(activations) != n_layers:
        raise ValueError("one activation per layer")
    rng = np.random.default_rng(seed)
    layers = []
    for d_in, d_out, act in zip(sizes, sizes[1:], activations):
        limit = np.sqrt(6.0 / (d_in + d_out))
        layers.append(Layer(rng.uniform(-limit, limit, (d_in, d_out)), np.zeros(d_out), act))
    return FeatureExtractor(tuple(layers))


def extract_features(fe: FeatureExtractor, batch, tape: GradientTape | None = None) -> Tensor:
    """Un-normalized embeddings of ``batch``.

    With a tape and an unfrozen extractor the layer parameters are watched
    under ``extractor.<i>.weight`` / ``extractor.<i>.bias``. A frozen
    extractor never puts parameters on any tape.
    """
    x = T.constant(batch)
    if x.data.ndim != 2 or x.shape[1] != fe.input_dim:
        raise DimensionError(f"batch shape {x.shape} does not match input dim {fe.input_dim}")
    for i, layer in enumerate(fe.layers):
        if tape is not None and not fe.frozen:
            w = tape.watch(layer.weight, name=f"extractor.{i}.weight")
            b = tape.watch(layer.bias[None, :], name=f"extractor.{i}.bias")
        else:
            w, b = Tensor(layer.weight), Tensor(layer.bias[None, :])
        x = T.add(T.matmul(x, w), b)
        if layer.activation == "relu":
            x = T.relu(x)
    return x


def normalize_columns(W: np.ndarray, eps: float = 1e-12) -> np.ndarray:
    norms = np.maximum(np.linalg.norm(W, axis=0, keepdims=True), eps)
    return W / norms


def random_unit_columns(d: int, c: int, rng: np.random.Generator) -> np.ndarray:
    return normalize_columns(rng.standard_normal((d, c)))


@dataclass(frozen=True)
class ClassifierWeights:
    """Bias-free cosine classifier head.

    ``W`` is (d, C) with one prototype per column. It is usually a plain
    array; loss and score functions also accept a :class:`Tensor` here so a
    caller can watch it on a tape.
    """

    W: "np.ndarray | Tensor"
    alpha: float = 10.0
    eps: float = field(default=1e-12, repr=False)

    def __post_init__(self):
        if not isinstance(self.W, Tensor):
            object.__setattr__(self, "W", _frozen_array(self.W))
        if len(self.W.shape) != 2:
            raise DimensionError(f"classifier weights must be (d, C), got {self.W.shape}")
        if not self.alpha > 0:
            raise ValueError(f"alpha must be positive, got {self.alpha}")

    @property
    def feature_dim(self) -> int:
        return self.W.shape[0]

    @property
    def class_count(self) -> int:
        return self.W.shape[1]

    def array(self) -> np.ndarray:
        return self.W.data if isinstance(self.W, Tensor) else self.W

    def watch(self, tape: GradientTape, name: str = "classifier.W") -> "ClassifierWeights":
        return replace(self, W=tape.watch(self.array(), name=name))

    def unit(self) -> "ClassifierWeights":
        """Copy with columns rescaled to unit length."""
        return replace(self, W=normalize_columns(self.array(), self.eps))


def cosine_scores(cw: ClassifierWeights, feats) -> Tensor:
    """``alpha * cos(angle(w_i, phi_j))`` as an (m, C) tensor."""
    feats = T.constant(feats)
    if feats.shape[1] != cw.feature_dim:
        raise DimensionError(
            f"features of dim {feats.shape[1]} do not match classifier dim {cw.feature_dim}"
        )
    w_hat = T.l2_normalize_cols(cw.W, cw.eps)
    f_hat = T.l2_normalize_rows(feats, cw.eps)
    return T.scale(T.matmul(f_hat, w_hat), cw.alpha)


# -- checkpoints --------------------------------------------------------------

class CheckpointError(ValueError):
    pass


def dump_checkpoint(fe: FeatureExtractor, cw: ClassifierWeights) -> bytes:
    parts = [MAGIC, struct.pack("<I", len(fe.layers))]
    for layer in fe.layers:
        parts.append(struct.pack("<IIB", layer.d_in, layer.d_out, ACTIVATIONS[layer.activation]))
        parts.append(np.ascontiguousarray(layer.weight, dtype="<f8").tobytes())
        parts.append(np.ascontiguousarray(layer.bias, dtype="<f8").tobytes())
    W = cw.array()
    d, c = W.shape
    parts.append(struct.pack("<IId", c, d, cw.alpha))
    parts.append(np.asarray(W, dtype="<f8").tobytes(order="F"))
    return b"".join(parts)


def parse_checkpoint(blob: bytes) -> tuple[FeatureExtractor, ClassifierWeights]:
    view = memoryview(blob)
    if bytes(view[:8]) != MAGIC:
        raise CheckpointError("bad magic, not an SSLCKPT file")
    pos = 8

    def take(fmt: str):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(view):
            raise CheckpointError("truncated checkpoint")
        vals = struct.unpack_from(fmt, view, pos)
        pos += size
        return vals

    def floats(n: int) -> np.ndarray:
        nonlocal pos
        if pos + 8 * n > len(view):
            raise CheckpointError("truncated checkpoint")
        arr = np.frombuffer(view, dtype="<f8", count=n, offset=pos).astype(np.float64)
        pos += 8 * n
        return arr

    (n_layers,) = take("<I")
    layers = []
    for _ in range(n_layers):
        d_in, d_out, tag = take("<IIB")
        if tag not in _TAG_TO_ACT:
            raise CheckpointError(f"unknown activation tag {tag}")
        w = floats(d_in * d_out).reshape(d_in, d_out)
        b = floats(d_out)
        layers.append(Layer(w, b, _TAG_TO_ACT[tag]))
    c, d, alpha = take("<IId")
    W = floats(d * c).reshape((d, c), order="F")
    if pos != len(view):
        raise CheckpointError(f"{len(view) - pos} trailing bytes in checkpoint")
    return FeatureExtractor(tuple(layers)), ClassifierWeights(np.ascontiguousarray(W), alpha)


def save_checkpoint(path, fe: FeatureExtractor, cw: ClassifierWeights) -> None:
    Path(path).write_bytes(dump_checkpoint(fe, cw))


def load_checkpoint(path) -> tuple[FeatureExtractor, ClassifierWeights]:
    return parse_checkpoint(Path(path).read_bytes())
