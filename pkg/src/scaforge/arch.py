"""Accelerator layer vocabulary and victim model architectures.

The layer space has exactly 23 symbols: 12 convolutions (kernel 2/3/4/5 x
output maps 10/20/30), 4 poolings (kernel 2/3/4/5), 5 fully-connected
layers (100..500 units), ReLU and Softmax. A victim architecture is an
ordered sequence of 2..16 such layers.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np


class LayerKind(enum.Enum):
    CONV = "conv"
    POOL = "pool"
    FC = "fc"
    RELU = "relu"
    SOFTMAX = "softmax"


CONV_KERNELS = (2, 3, 4, 5)
CONV_OUT_SIZES = (10, 20, 30)
POOL_KERNELS = (2, 3, 4, 5)
FC_OUT_SIZES = (100, 200, 300, 400, 500)

MIN_DEPTH = 2
MAX_DEPTH = 16


@dataclass(frozen=True)
class LayerSpec:
    kind: LayerKind
    kernel: int = 0
    out_size: int = 0

    def __post_init__(self):
        if self.kind is LayerKind.CONV:
            if self.kernel not in CONV_KERNELS or self.out_size not in CONV_OUT_SIZES:
                raise ValueError(f"invalid conv layer: {self}")
        elif self.kind is LayerKind.POOL:
            if self.kernel not in POOL_KERNELS or self.out_size != 0:
                raise ValueError(f"invalid pool layer: {self}")
        elif self.kind is LayerKind.FC:
            if self.kernel != 0 or self.out_size not in FC_OUT_SIZES:
                raise ValueError(f"invalid fc layer: {self}")
        else:
            if self.kernel != 0 or self.out_size != 0:
                raise ValueError(f"{self.kind.value} takes no kernel/out_size")

    def cost(self) -> int:
        """Work proxy driving leakage amplitude and duration."""
        if self.kind is LayerKind.CONV:
            return self.kernel * self.kernel * self.out_size
        if self.kind is LayerKind.POOL:
            return self.kernel * self.kernel
        if self.kind is LayerKind.FC:
            return self.out_size
        return 1

    def describe(self) -> str:
        if self.kind is LayerKind.CONV:
            return f"conv{self.kernel}x{self.kernel}o{self.out_size}"
        if self.kind is LayerKind.POOL:
            return f"pool{self.kernel}"
        if self.kind is LayerKind.FC:
            return f"fc{self.out_size}"
        return self.kind.value


def _build_vocab() -> tuple[LayerSpec, ...]:
    vocab = [LayerSpec(LayerKind.CONV, k, o) for k in CONV_KERNELS for o in CONV_OUT_SIZES]
    vocab += [LayerSpec(LayerKind.POOL, k) for k in POOL_KERNELS]
    vocab += [LayerSpec(LayerKind.FC, 0, o) for o in FC_OUT_SIZES]
    vocab += [LayerSpec(LayerKind.RELU), LayerSpec(LayerKind.SOFTMAX)]
    return tuple(vocab)


VOCAB: tuple[LayerSpec, ...] = _build_vocab()
VOCAB_SIZE = len(VOCAB)  # 23
_INDEX = {spec: i for i, spec in enumerate(VOCAB)}

# CTC alphabet: the 23 layer symbols plus one blank.
BLANK = VOCAB_SIZE
ALPHABET_SIZE = VOCAB_SIZE + 1


def symbol_index(layer: LayerSpec) -> int:
    return _INDEX[layer]


@dataclass(frozen=True)
class ModelArch:
    """The victim's secret: an ordered layer sequence of depth 2..16."""

    layers: tuple[LayerSpec, ...]

    def __post_init__(self):
        if not (MIN_DEPTH <= len(self.layers) <= MAX_DEPTH):
            raise ValueError(f"architecture depth {len(self.layers)} outside "
                             f"[{MIN_DEPTH}, {MAX_DEPTH}]")

    def __len__(self) -> int:
        return len(self.layers)

    def labels(self) -> np.ndarray:
        """Layer-symbol indices in [0, 22], the CTC ground truth."""
        return np.array([_INDEX[l] for l in self.layers], dtype=np.int64)

    def describe(self) -> str:
        return "-".join(l.describe() for l in self.layers)

    @staticmethod
    def from_labels(labels) -> "ModelArch":
        return ModelArch(tuple(VOCAB[int(i)] for i in labels))


def random_arch(rng: np.random.Generator) -> ModelArch:
    """Uniform depth in [2, 16], uniform layer choice from the 23 symbols."""
    depth = int(rng.integers(MIN_DEPTH, MAX_DEPTH + 1))
    idx = rng.integers(0, VOCAB_SIZE, size=depth)
    return ModelArch(tuple(VOCAB[int(i)] for i in idx))


def generate_zoo(n: int, seed: int) -> list[ModelArch]:
    """Deterministic random model zoo."""
    if n < 1:
        raise ValueError("zoo size must be >= 1")
    rng = np.random.default_rng(seed)
    return [random_arch(rng) for _ in range(n)]
