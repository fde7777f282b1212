"""Frozen decoder-only transformer written in residual-stream form.

Every layer reads the stream ``r[l-1]``, writes an attention output ``a[l]``
and an MLP output ``m[l]``, and the new state is

    r[l] = r[l-1] + a[l] + m[l] (+ v[l] when a context vector is injected)

Blocks are pre-norm (LayerNorm -> causal multi-head attention with rotary
positions, LayerNorm over ``r[l-1] + a[l]`` -> GELU MLP). The injected row
``v[l]`` is added after both writes, once per layer, at every position, so it
also enters the next layer's normalization statistics.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from functools import lru_cache
from typing import Mapping, Sequence

import numpy as np

from . import numerics as nx
from .errors import CacheMismatchError, CapacityError, ConfigError, ContractError, DimensionError, VocabularyError
from .numerics import Tensor
from .snapshot import content_hash, load_arrays, save_arrays

# Fixed 16-entry text vocabulary. "predicted series" is a single entry so the
# second template phrase renders to 5 tokens (comma is its own token).
VOCAB: tuple[str, ...] = (
    "<pad>",
    "<unk>",
    "the",
    "input",
    "series",
    "is",
    ",",
    "and",
    "predicted series",
    "<bos>",
    "<eos>",
    ".",
    ":",
    "history",
    "forecast",
    "<sep>",
)
TOKEN_IDS: dict[str, int] = {w: i for i, w in enumerate(VOCAB)}
INPUT_PHRASE = "the input series is"
PREDICTED_PHRASE = ", and the predicted series is"


def tokenize(text: str) -> list[int]:
    """Greedy longest-match tokenization against :data:`VOCAB`."""
    words = text.lower().replace(",", " , ").replace(".", " . ").replace(":", " : ").split()
    ids = []
    i = 0
    while i < len(words):
        pair = " ".join(words[i : i + 2])
        if i + 1 < len(words) and pair in TOKEN_IDS:
            ids.append(TOKEN_IDS[pair])
            i += 2
        else:
            ids.append(TOKEN_IDS.get(words[i], TOKEN_IDS["<unk>"]))
            i += 1
    return ids


@dataclass(frozen=True)
class TransformerConfig:
    num_layers: int
    model_width: int
    num_heads: int
    ff_width: int
    text_vocab_size: int = len(VOCAB)
    max_sequence_length: int = 512
    rope_base: float = 10000.0
    norm_eps: float = 1e-5

    def __post_init__(self):
        for name in ("num_layers", "model_width", "num_heads", "ff_width", "text_vocab_size", "max_sequence_length"):
            value = getattr(self, name)
            if not isinstance(value, (int, np.integer)) or value < 1:
                raise ConfigError(f"TransformerConfig.{name} must be a positive integer, got {value!r}")
        if self.model_width % self.num_heads:
            raise ConfigError(f"model_width {self.model_width} is not divisible by num_heads {self.num_heads}")
        if self.head_dim % 2:
            raise ConfigError(f"head dimension {self.head_dim} must be even for rotary positions")
        if self.text_vocab_size < len(VOCAB):
            raise ConfigError(f"text_vocab_size must cover the {len(VOCAB)}-entry template vocabulary")

    @property
    def head_dim(self) -> int:
        return self.model_width // self.num_heads


def _layer_shapes(cfg: TransformerConfig, l: int) -> dict[str, tuple[tuple[int, ...], float | None]]:
    """name -> (shape, init std); std None means a fixed init (ones/zeros)."""
    d, f = cfg.model_width, cfg.ff_width
    p = f"layers.{l}."
    return {
        p + "ln1.gamma": ((d,), None),
        p + "ln1.beta": ((d,), None),
        p + "attn.wq": ((d, d), 1.0 / math.sqrt(d)),
        p + "attn.wk": ((d, d), 1.0 / math.sqrt(d)),
        p + "attn.wv": ((d, d), 1.0 / math.sqrt(d)),
        p + "attn.wo": ((d, d), 1.0 / math.sqrt(d)),
        p + "ln2.gamma": ((d,), None),
        p + "ln2.beta": ((d,), None),
        p + "mlp.w_in": ((d, f), 1.0 / math.sqrt(d)),
        p + "mlp.b_in": ((f,), None),
        p + "mlp.w_out": ((f, d), 1.0 / math.sqrt(f)),
        p + "mlp.b_out": ((d,), None),
    }


@dataclass(frozen=True)
class TransformerWeights:
    """Backbone parameters. Never updated in place; see :meth:`replace`."""

    config: TransformerConfig
    seed: int
    tensors: Mapping[str, Tensor]
    initial_hash: str = field(default="", compare=False)

    def __post_init__(self):
        if not self.initial_hash:
            object.__setattr__(self, "initial_hash", self.content_hash())

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def content_hash(self) -> str:
        return content_hash({k: t.numpy() for k, t in self.tensors.items()})

    def replace(self, updates: Mapping[str, Tensor]) -> "TransformerWeights":
        unknown = set(updates) - set(self.tensors)
        if unknown:
            raise ContractError(f"unknown backbone tensors: {sorted(unknown)}")
        return TransformerWeights(self.config, self.seed, {**self.tensors, **updates})

    def parameter_count(self) -> int:
        return sum(t.size for t in self.tensors.values())


def init_frozen(config: TransformerConfig, seed: int) -> TransformerWeights:
    """Deterministic Gaussian stand-in for a pretrained backbone."""
    rng = np.random.default_rng(seed)
    d = config.model_width
    tensors: dict[str, Tensor] = {
        # unit scale so template tokens match the magnitude of patch tokens
        "emb_text": Tensor(rng.standard_normal((config.text_vocab_size, d))),
    }
    for l in range(config.num_layers):
        for name, (shape, std) in _layer_shapes(config, l).items():
            if std is not None:
                tensors[name] = Tensor(rng.standard_normal(shape) * std)
            elif name.endswith("gamma"):
                tensors[name] = nx.ones(shape)
            else:
                tensors[name] = nx.zeros(shape)
    return TransformerWeights(config, int(seed), tensors)


def embed_text(token_ids: Sequence[int], weights: TransformerWeights) -> Tensor:
    ids = np.asarray(list(token_ids), dtype=np.int64)
    vocab = weights.config.text_vocab_size
    bad = ids[(ids < 0) | (ids >= vocab)]
    if bad.size:
        raise VocabularyError(f"token ids {bad.tolist()} outside vocabulary of size {vocab}")
    return nx.getitem(weights["emb_text"], ids)


@dataclass(frozen=True)
class InjectionPlan:
    """Context vector (``[L, d]``) plus the layers that receive it."""

    vector: Tensor | None = None
    layer_mask: tuple[bool, ...] | None = None

    def resolve(self, config: TransformerConfig) -> tuple[bool, ...]:
        L = config.num_layers
        mask = tuple(bool(b) for b in self.layer_mask) if self.layer_mask is not None else (True,) * L
        if len(mask) != L:
            raise DimensionError(f"layer_mask has length {len(mask)}, backbone has {L} layers")
        if self.vector is not None and self.vector.shape != (L, config.model_width):
            raise DimensionError(f"context vector shape {self.vector.shape} != ({L}, {config.model_width})")
        return mask


@dataclass
class ResidualTrace:
    """Per-layer stream states: ``resid`` has L+1 entries, the others L."""

    resid: list[Tensor]
    attn: list[Tensor]
    mlp: list[Tensor]
    injected: list[Tensor | None]

    @property
    def r(self) -> Tensor:
        return nx.stack(self.resid)

    @property
    def a(self) -> Tensor:
        return nx.stack(self.attn)

    @property
    def m(self) -> Tensor:
        return nx.stack(self.mlp)

    @property
    def final(self) -> Tensor:
        return self.resid[-1]

    @property
    def num_tokens(self) -> int:
        return self.resid[0].shape[-2]


@lru_cache(maxsize=64)
def _rope_tables(T: int, head_dim: int, base: float) -> tuple[np.ndarray, np.ndarray]:
    inv_freq = base ** (-np.arange(0, head_dim, 2, dtype=np.float64) / head_dim)
    angles = np.outer(np.arange(T, dtype=np.float64), inv_freq)
    angles = np.concatenate([angles, angles], axis=-1)
    cos, sin = np.cos(angles), np.sin(angles)
    cos.setflags(write=False)
    sin.setflags(write=False)
    return cos, sin


def forward(token_embeddings, weights: TransformerWeights, plan: InjectionPlan | None = None) -> ResidualTrace:
    """Run the backbone over ``[T, d]`` or ``[B, T, d]`` token embeddings."""
    cfg = weights.config
    x = nx.as_tensor(token_embeddings)
    if x.ndim not in (2, 3) or x.shape[-1] != cfg.model_width:
        raise DimensionError(f"token embeddings must be [T, {cfg.model_width}] or [B, T, {cfg.model_width}], got {x.shape}")
    T = x.shape[-2]
    if T > cfg.max_sequence_length:
        raise CapacityError(f"sequence of {T} tokens exceeds max_sequence_length {cfg.max_sequence_length}")
    plan = plan or InjectionPlan()
    mask = plan.resolve(cfg)
    squeeze = x.ndim == 2
    if squeeze:
        x = nx.reshape(x, (1,) + x.shape)
    B, d, H, dh = x.shape[0], cfg.model_width, cfg.num_heads, cfg.head_dim
    cos, sin = _rope_tables(T, dh, cfg.rope_base)
    scale = 1.0 / math.sqrt(dh)

    def heads(t: Tensor) -> Tensor:
        return nx.transpose(nx.reshape(t, (B, T, H, dh)), (0, 2, 1, 3))

    resid, attn, mlp, injected = [x], [], [], []
    for l in range(cfg.num_layers):
        w = lambda name: weights[f"layers.{l}.{name}"]  # noqa: E731
        r = resid[-1]
        h = nx.layer_norm(r, w("ln1.gamma"), w("ln1.beta"), cfg.norm_eps)
        q = nx.rotary(heads(h @ w("attn.wq")), cos, sin)
        k = nx.rotary(heads(h @ w("attn.wk")), cos, sin)
        v = heads(h @ w("attn.wv"))
        probs = nx.causal_softmax((q @ nx.swapaxes(k, -1, -2)) * scale)
        mixed = nx.reshape(nx.transpose(probs @ v, (0, 2, 1, 3)), (B, T, d))
        a = mixed @ w("attn.wo")
        ra = r + a
        h2 = nx.layer_norm(ra, w("ln2.gamma"), w("ln2.beta"), cfg.norm_eps)
        m = nx.gelu(h2 @ w("mlp.w_in") + w("mlp.b_in")) @ w("mlp.w_out") + w("mlp.b_out")
        new = ra + m
        if plan.vector is not None and mask[l]:
            row = plan.vector[l]
            new = new + row
            injected.append(row)
        else:
            injected.append(None)
        attn.append(a)
        mlp.append(m)
        resid.append(new)

    if squeeze:
        unbatch = lambda ts: [nx.reshape(t, t.shape[1:]) for t in ts]  # noqa: E731
        resid, attn, mlp = unbatch(resid), unbatch(attn), unbatch(mlp)
    return ResidualTrace(resid, attn, mlp, injected)


def last_token_states(trace: ResidualTrace) -> Tensor:
    """State of the final position at layers 1..L: ``[L, d]`` (or ``[B, L, d]``)."""
    if trace.num_tokens < 1:
        raise ContractError("last_token_states on an empty sequence")
    return nx.stack([r[..., -1, :] for r in trace.resid[1:]], axis=-2)


def save_weights(path, weights: TransformerWeights):
    meta = {
        "kind": "transformer_weights",
        "config": asdict(weights.config),
        "seed": weights.seed,
        "content_hash": weights.content_hash(),
    }
    return save_arrays(path, {k: t.numpy() for k, t in weights.tensors.items()}, meta)


def load_weights(path) -> TransformerWeights:
    arrays, meta = load_arrays(path)
    if meta.get("kind") != "transformer_weights":
        raise CacheMismatchError(f"{path}: not a weight snapshot")
    weights = TransformerWeights(
        TransformerConfig(**meta["config"]), int(meta["seed"]), {k: Tensor(v) for k, v in arrays.items()}
    )
    if weights.initial_hash != meta["content_hash"]:
        raise CacheMismatchError(f"{path}: content hash mismatch")
    return weights
