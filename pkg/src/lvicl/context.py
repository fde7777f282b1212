"""Context vectors: example rendering, representation extraction, aggregation, adapters.

An example ``(X_s, Y_s)`` is rendered as the token sequence

    Emb_n("the input series is") ++ Emb_t(patches(X_s))
        ++ Emb_n(", and the predicted series is") ++ Emb_t(patches(Y_s))

and run through the frozen backbone without injection. The final token's
state at every layer is the example's representation (``[L, d]``); the mean
over examples is the raw context vector, which an adapter refines before it
is added to the residual stream.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field, replace
from typing import Mapping, Sequence

import numpy as np

from . import numerics as nx
from .errors import CacheMismatchError, ConfigError, ContractError, DataError, DimensionError
from .layers import PatchEmbedder, embed_patches
from .numerics import Tensor
from .snapshot import content_hash, load_arrays, save_arrays
from .transformer import (
    INPUT_PHRASE,
    PREDICTED_PHRASE,
    TransformerWeights,
    embed_text,
    forward,
    last_token_states,
    tokenize,
)
from .tsio import SeriesDataset, Window, make_windows, channel_split, normalize, patchify

INPUT_IDS: tuple[int, ...] = tuple(tokenize(INPUT_PHRASE))
PREDICTED_IDS: tuple[int, ...] = tuple(tokenize(PREDICTED_PHRASE))

ADAPTER_VARIANTS = ("none", "fc", "fc_relu", "mlp3")


@dataclass(frozen=True)
class ExamplePair:
    """A normalized (history, future) pair taken from the training split."""

    history: np.ndarray
    future: np.ndarray
    channel: int = 0
    start: int = 0

    @property
    def example_id(self) -> str:
        return f"{self.channel}:{self.start}"


@dataclass(frozen=True)
class RepresentationVector:
    values: Tensor  # [L, d]
    example_id: str = ""


@dataclass(frozen=True)
class ContextVector:
    values: Tensor  # [L, d]
    count: int = 1
    method: str = "mean"
    adapted: bool = False
    example_ids: tuple[str, ...] = ()

    def __post_init__(self):
        if self.values.ndim != 2:
            raise DimensionError(f"context vector must be [L, d], got {self.values.shape}")
        if not np.all(np.isfinite(self.values.numpy())):
            raise ContractError("context vector contains non-finite values")

    def content_hash(self) -> str:
        return content_hash({"values": self.values.numpy()})


def example_from_window(window: Window, future_len: int | None = None) -> ExamplePair:
    w = normalize(window)
    future = w.target if future_len is None else w.target[:future_len]
    return ExamplePair(w.history, future, window.channel, window.start)


def example_token_count(history_len: int, future_len: int, patch_len: int) -> int:
    return len(INPUT_IDS) + history_len // patch_len + len(PREDICTED_IDS) + future_len // patch_len


def render_example(ex: ExamplePair, embedder: PatchEmbedder, weights: TransformerWeights) -> Tensor:
    """Token features ``[T_tok, d]`` for one example."""
    P = embedder.patch_len
    return nx.concat(
        [
            embed_text(INPUT_IDS, weights),
            embed_patches(patchify(ex.history, P), embedder),
            embed_text(PREDICTED_IDS, weights),
            embed_patches(patchify(ex.future, P), embedder),
        ],
        axis=0,
    )


def render_prompt(examples: Sequence[ExamplePair], embedder: PatchEmbedder, weights: TransformerWeights) -> Tensor:
    """Rendered examples concatenated in the given order (prompt-ICL prefix)."""
    if not examples:
        return nx.zeros((0, weights.config.model_width))
    return nx.concat([render_example(ex, embedder, weights) for ex in examples], axis=0)


def extract_representation(tokens, weights: TransformerWeights, example_id: str = "") -> RepresentationVector:
    """Last-token state at every layer, no injection."""
    return RepresentationVector(last_token_states(forward(tokens, weights)), example_id)


def extract_representations(
    examples: Sequence[ExamplePair], embedder: PatchEmbedder, weights: TransformerWeights
) -> list[RepresentationVector]:
    # one forward per example, so each result is independent of list order
    return [
        extract_representation(render_example(ex, embedder, weights), weights, ex.example_id) for ex in examples
    ]


def _stacked(reps: Sequence[RepresentationVector]) -> np.ndarray:
    if not reps:
        raise ContractError("aggregation needs at least one representation")
    shape = reps[0].values.shape
    for r in reps:
        if r.values.shape != shape:
            raise DimensionError(f"representation shapes differ: {shape} vs {r.values.shape}")
    return np.stack([r.values.numpy() for r in reps])


def aggregate(reps: Sequence[RepresentationVector]) -> ContextVector:
    """Elementwise mean over examples.

    Each coordinate is summed in sorted order, so the result is bitwise
    independent of the order of ``reps``.
    """
    stacked = _stacked(reps)
    mean = np.sort(stacked, axis=0).sum(axis=0) / len(reps)
    return ContextVector(Tensor(mean), len(reps), "mean", False, tuple(sorted(r.example_id for r in reps)))


def aggregate_weighted(reps: Sequence[RepresentationVector], weights) -> ContextVector:
    """``sum_i softmax(weights)_i * rep_i``; differentiable in ``weights``."""
    stacked = _stacked(reps)
    weights = nx.as_tensor(weights)
    N = len(reps)
    if weights.shape != (N,):
        raise DimensionError(f"need {N} aggregation weights, got shape {weights.shape}")
    L, d = stacked.shape[1:]
    probs = nx.reshape(nx.softmax(weights), (1, N))
    values = nx.reshape(probs @ Tensor(stacked.reshape(N, L * d)), (L, d))
    return ContextVector(values, N, "adaptive", False, tuple(r.example_id for r in reps))


# ---------------------------------------------------------------------------
# adapters


@dataclass(frozen=True)
class ContextAdapter:
    """Affine map applied to every layer row: ``row -> weight @ row + bias``.

    With ``weight`` of shape ``[L, d, d]`` and ``bias`` ``[L, d]`` each layer
    gets its own map instead.
    """

    weight: Tensor
    bias: Tensor
    trainable: bool = True

    def __post_init__(self):
        w, b = self.weight.shape, self.bias.shape
        if not (len(w) in (2, 3) and w[-1] == w[-2] and b == w[:-1]):
            raise DimensionError(f"adapter weight {w} / bias {b} mismatch")

    @classmethod
    def identity(cls, width: int, num_layers: int | None = None) -> "ContextAdapter":
        if num_layers is None:
            return cls(nx.eye(width), nx.zeros(width))
        return cls(Tensor(np.tile(np.eye(width), (num_layers, 1, 1))), nx.zeros((num_layers, width)))

    @property
    def per_layer(self) -> bool:
        return self.weight.ndim == 3

    @property
    def width(self) -> int:
        return self.weight.shape[-1]

    def __call__(self, rows: Tensor) -> Tensor:
        if rows.shape[-1] != self.width:
            raise DimensionError(f"adapter width {self.width} does not match context width {rows.shape[-1]}")
        if self.per_layer:
            if rows.shape[0] != self.weight.shape[0]:
                raise DimensionError(f"per-layer adapter has {self.weight.shape[0]} layers, context has {rows.shape[0]}")
            col = nx.reshape(rows, rows.shape + (1,))
            return nx.reshape(self.weight @ col, rows.shape) + self.bias
        return rows @ nx.transpose(self.weight) + self.bias


@dataclass(frozen=True)
class AdapterStack:
    """One of the post-processing variants: none, fc, fc + ReLU, or three stacked fc layers."""

    variant: str
    layers: tuple[ContextAdapter, ...] = field(default=())

    def __post_init__(self):
        if self.variant not in ADAPTER_VARIANTS:
            raise ConfigError(f"unknown adapter variant {self.variant!r}; choose from {ADAPTER_VARIANTS}")
        expected = {"none": 0, "fc": 1, "fc_relu": 1, "mlp3": 3}[self.variant]
        if len(self.layers) != expected:
            raise ConfigError(f"variant {self.variant!r} needs {expected} layers, got {len(self.layers)}")

    def __call__(self, rows: Tensor) -> Tensor:
        out = rows
        for layer in self.layers:
            out = layer(out)
        if self.variant == "fc_relu":
            out = nx.relu(out)
        return out

    def params(self, prefix: str = "adapter") -> dict[str, Tensor]:
        out = {}
        for i, layer in enumerate(self.layers):
            out[f"{prefix}.{i}.weight"] = layer.weight
            out[f"{prefix}.{i}.bias"] = layer.bias
        return out

    def with_params(self, params: Mapping[str, Tensor], prefix: str = "adapter") -> "AdapterStack":
        layers = tuple(
            ContextAdapter(params[f"{prefix}.{i}.weight"], params[f"{prefix}.{i}.bias"])
            for i in range(len(self.layers))
        )
        return AdapterStack(self.variant, layers)

    def parameter_count(self) -> int:
        return sum(t.size for t in self.params().values())


def make_adapter(variant: str = "fc", width: int = 0, num_layers: int | None = None) -> AdapterStack:
    """Identity-initialized adapter; ``num_layers`` set means one map per layer."""
    count = {"none": 0, "fc": 1, "fc_relu": 1, "mlp3": 3}.get(variant)
    if count is None:
        raise ConfigError(f"unknown adapter variant {variant!r}; choose from {ADAPTER_VARIANTS}")
    return AdapterStack(variant, tuple(ContextAdapter.identity(width, num_layers) for _ in range(count)))


def adapt(cv: ContextVector, adapter: ContextAdapter | AdapterStack) -> ContextVector:
    return replace(cv, values=adapter(cv.values), adapted=True)


def adapt_variant(cv: ContextVector, variant: AdapterStack) -> ContextVector:
    if variant.variant == "none":
        return cv
    return adapt(cv, variant)


# ---------------------------------------------------------------------------
# example sampling


def candidate_windows(ds: SeriesDataset, history_len: int, future_len: int, stride: int = 1) -> list[Window]:
    """Training-split windows usable as examples, ordered by (channel, start)."""
    out = []
    for series in channel_split(ds, "train"):
        out.extend(w for w in make_windows(series, history_len, future_len, stride) if not w.degenerate)
    return out


def resolve_count(available: int, fraction: float | None = None, count: int | None = None) -> int:
    if (fraction is None) == (count is None):
        raise ConfigError("give exactly one of fraction or count")
    if fraction is not None:
        if not 0.0 < fraction <= 1.0:
            raise ConfigError(f"example fraction must lie in (0, 1], got {fraction}")
        count = max(1, int(round(fraction * available)))
    if count < 1:
        raise ConfigError(f"example count must be >= 1, got {count}")
    if count > available:
        raise DataError(f"requested {count} examples but only {available} candidates exist")
    return count


def sample_examples(
    ds: SeriesDataset,
    history_len: int,
    future_len: int,
    fraction: float | None = None,
    count: int | None = None,
    seed: int = 0,
    stride: int = 1,
) -> list[ExamplePair]:
    """Uniform sample without replacement from the training split.

    The result is sorted by (channel, start); callers reorder explicitly.
    """
    pool = candidate_windows(ds, history_len, future_len, stride)
    n = resolve_count(len(pool), fraction, count)
    picked = np.sort(np.random.default_rng(seed).choice(len(pool), size=n, replace=False))
    return [example_from_window(pool[i]) for i in picked]


# ---------------------------------------------------------------------------
# mutual information


def _bin_indices(x: np.ndarray, bins: int) -> np.ndarray:
    lo, hi = float(x.min()), float(x.max())
    if hi == lo:
        return np.zeros(x.size, dtype=np.int64)
    idx = np.floor((x - lo) / (hi - lo) * bins).astype(np.int64)
    return np.clip(idx, 0, bins - 1)


def mutual_info_histogram(u, v, bins: int = 16) -> float:
    """Plug-in MI (nats) treating coordinates of ``u`` and ``v`` as paired samples.

    Each variable gets ``bins`` equal-width bins over its observed range.
    """
    u = np.asarray(u.numpy() if isinstance(u, Tensor) else u, dtype=np.float64).reshape(-1)
    v = np.asarray(v.numpy() if isinstance(v, Tensor) else v, dtype=np.float64).reshape(-1)
    if u.shape != v.shape:
        raise DimensionError(f"MI needs paired samples, got {u.shape} and {v.shape}")
    if bins < 2:
        raise ContractError(f"bins must be >= 2, got {bins}")
    if u.size < bins:
        warnings.warn(f"only {u.size} samples for {bins} bins; MI estimate is heavily biased", stacklevel=2)
    iu, iv = _bin_indices(u, bins), _bin_indices(v, bins)
    joint = np.zeros((bins, bins))
    np.add.at(joint, (iu, iv), 1.0)
    joint /= u.size
    pu, pv = joint.sum(axis=1), joint.sum(axis=0)
    nz = joint > 0
    return float(np.sum(joint[nz] * np.log(joint[nz] / np.outer(pu, pv)[nz])))


# ---------------------------------------------------------------------------
# cache


def save_context(path, cv: ContextVector, embedder_hash: str, seed: int | None = None):
    meta = {
        "kind": "context_cache",
        "count": cv.count,
        "method": cv.method,
        "example_ids": list(cv.example_ids),
        "seed": seed,
        "embedder_hash": embedder_hash,
        "content_hash": cv.content_hash(),
    }
    return save_arrays(path, {"raw_context": cv.values.numpy()}, meta)


def load_context(path, embedder_hash: str) -> ContextVector:
    """Load a cached raw context; refuses one built with a different embedder."""
    arrays, meta = load_arrays(path)
    if meta.get("kind") != "context_cache":
        raise CacheMismatchError(f"{path}: not a context cache")
    if meta["embedder_hash"] != embedder_hash:
        raise CacheMismatchError(f"{path}: built with embedder {meta['embedder_hash'][:12]}, expected {embedder_hash[:12]}")
    cv = ContextVector(Tensor(arrays["raw_context"]), meta["count"], meta["method"], False, tuple(meta["example_ids"]))
    if cv.content_hash() != meta["content_hash"]:
        raise CacheMismatchError(f"{path}: content hash mismatch")
    return cv
