"""Trainable input/output layers around the frozen backbone."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping

import numpy as np

from . import numerics as nx
from .errors import DimensionError
from .numerics import Tensor
from .snapshot import content_hash


@dataclass(frozen=True)
class PatchEmbedder:
    """Maps a length-P patch to a d-wide token: ``patch @ weight + bias``."""

    weight: Tensor  # [P, d]
    bias: Tensor  # [d]
    trainable: bool = True

    def __post_init__(self):
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[1],):
            raise DimensionError(f"embedder weight {self.weight.shape} / bias {self.bias.shape} mismatch")

    @classmethod
    def init(cls, patch_len: int, width: int, rng: np.random.Generator) -> "PatchEmbedder":
        w = rng.standard_normal((patch_len, width)) / math.sqrt(patch_len)
        return cls(Tensor(w), nx.zeros(width))

    @property
    def patch_len(self) -> int:
        return self.weight.shape[0]

    @property
    def width(self) -> int:
        return self.weight.shape[1]

    def params(self, prefix: str = "input") -> dict[str, Tensor]:
        return {f"{prefix}.weight": self.weight, f"{prefix}.bias": self.bias}

    def with_params(self, params: Mapping[str, Tensor], prefix: str = "input") -> "PatchEmbedder":
        return PatchEmbedder(params[f"{prefix}.weight"], params[f"{prefix}.bias"], self.trainable)

    def content_hash(self) -> str:
        return content_hash({"weight": self.weight.numpy(), "bias": self.bias.numpy()})


@dataclass(frozen=True)
class OutputHead:
    """Maps a d-wide hidden state to a length-P patch: ``hidden @ weight + bias``."""

    weight: Tensor  # [d, P]
    bias: Tensor  # [P]
    trainable: bool = True

    def __post_init__(self):
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[1],):
            raise DimensionError(f"head weight {self.weight.shape} / bias {self.bias.shape} mismatch")

    @classmethod
    def init(cls, width: int, patch_len: int, rng: np.random.Generator) -> "OutputHead":
        w = rng.standard_normal((width, patch_len)) / math.sqrt(width)
        return cls(Tensor(w), nx.zeros(patch_len))

    @property
    def patch_len(self) -> int:
        return self.weight.shape[1]

    def params(self, prefix: str = "output") -> dict[str, Tensor]:
        return {f"{prefix}.weight": self.weight, f"{prefix}.bias": self.bias}

    def with_params(self, params: Mapping[str, Tensor], prefix: str = "output") -> "OutputHead":
        return OutputHead(params[f"{prefix}.weight"], params[f"{prefix}.bias"], self.trainable)


def embed_patches(patches, emb: PatchEmbedder) -> Tensor:
    """``[..., K, P]`` patches -> ``[..., K, d]`` tokens."""
    patches = nx.as_tensor(patches)
    if patches.ndim < 2 or patches.shape[-1] != emb.patch_len:
        raise DimensionError(f"patches {patches.shape} do not match embedder patch length {emb.patch_len}")
    return patches @ emb.weight + emb.bias


def decode_patch(hidden, head: OutputHead) -> Tensor:
    """``[..., d]`` hidden state -> ``[..., P]`` patch."""
    hidden = nx.as_tensor(hidden)
    d = head.weight.shape[0]
    if hidden.shape[-1:] != (d,):
        raise DimensionError(f"hidden state {hidden.shape} does not match head width {d}")
    if hidden.ndim == 1:
        return nx.reshape(nx.reshape(hidden, (1, d)) @ head.weight, (head.patch_len,)) + head.bias
    return hidden @ head.weight + head.bias
