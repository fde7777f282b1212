"""Forecast models over the frozen backbone, training stages and evaluation.

Modes:

* ``no_icl``      patch tokens only
* ``prompt_icl``  rendered examples prepended to the patch tokens
* ``vector_icl``  adapter(raw context) added to the residual stream at every masked-in layer
* ``full_ft``     like ``no_icl`` but the backbone is trained as well (comparison arm)

Losses are computed on instance-normalized windows; :func:`evaluate`
denormalizes forecasts before scoring.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Mapping, Sequence

import numpy as np

from . import metrics
from . import numerics as nx
from .context import AdapterStack, ContextVector, ExamplePair, adapt_variant, make_adapter, render_prompt
from .errors import CacheMismatchError, ConfigError, ContractError, DimensionError, TrainingError
from .layers import OutputHead, PatchEmbedder, decode_patch, embed_patches
from .numerics import GradientTape, Tensor, backward
from .snapshot import load_arrays, save_arrays
from .transformer import InjectionPlan, ResidualTrace, TransformerWeights, forward
from .tsio import Window, denormalize, normalize, patchify

log = logging.getLogger(__name__)

MODES = ("no_icl", "prompt_icl", "vector_icl", "full_ft")
LEARNING_RATE_GRID = (3e-5, 5e-5, 7e-5, 9e-5)

__all__ = [
    "ForecastModel",
    "OutputHead",
    "PatchEmbedder",
    "TrainConfig",
    "TrainState",
    "decode_patch",
    "embed_patches",
    "evaluate",
    "forecast",
    "sequence_loss",
    "train_full_finetune",
    "train_lvicl",
    "train_prompt_icl",
    "train_stage_a",
]


@dataclass(frozen=True)
class ForecastModel:
    backbone: TransformerWeights
    embedder: PatchEmbedder
    head: OutputHead
    mode: str = "no_icl"
    adapter: AdapterStack | None = None
    raw_context: ContextVector | None = None
    examples: tuple[ExamplePair, ...] = ()
    layer_mask: tuple[bool, ...] | None = None

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"unknown mode {self.mode!r}; choose from {MODES}")
        if self.mode == "vector_icl" and (self.raw_context is None or self.adapter is None):
            raise ContractError("vector_icl needs a cached raw context vector and an adapter")
        if self.mode == "prompt_icl" and not self.examples:
            raise ContractError("prompt_icl needs a non-empty example list")
        if self.embedder.patch_len != self.head.patch_len:
            raise DimensionError("embedder and head disagree on the patch length")
        if self.embedder.width != self.backbone.config.model_width:
            raise DimensionError("embedder width does not match the backbone")
        object.__setattr__(self, "examples", tuple(self.examples))

    @property
    def patch_len(self) -> int:
        return self.embedder.patch_len

    def trainable_params(self) -> dict[str, Tensor]:
        """θ_i, θ_o, plus θ_a in vector mode and the backbone in ``full_ft`` mode."""
        params = {**self.embedder.params(), **self.head.params()}
        if self.mode == "vector_icl":
            params.update(self.adapter.params())
        if self.mode == "full_ft":
            params.update({f"backbone.{k}": t for k, t in self.backbone.tensors.items()})
        return params

    def with_params(self, params: Mapping[str, Tensor]) -> "ForecastModel":
        changes = {"embedder": self.embedder.with_params(params), "head": self.head.with_params(params)}
        if self.mode == "vector_icl":
            changes["adapter"] = self.adapter.with_params(params)
        if self.mode == "full_ft":
            prefix = "backbone."
            changes["backbone"] = self.backbone.replace(
                {k[len(prefix) :]: t for k, t in params.items() if k.startswith(prefix)}
            )
        return replace(self, **changes)

    def trainable_parameter_count(self) -> int:
        return sum(t.size for t in self.trainable_params().values())


def injected_vector(model: ForecastModel) -> Tensor | None:
    if model.mode != "vector_icl":
        return None
    return adapt_variant(model.raw_context, model.adapter).values


def prompt_prefix(model: ForecastModel) -> Tensor | None:
    if model.mode != "prompt_icl":
        return None
    return render_prompt(model.examples, model.embedder, model.backbone)


def input_tokens(model: ForecastModel, patches) -> Tensor:
    """``[B, K, P]`` patches -> ``[B, T, d]`` backbone input (prefix included)."""
    tokens = embed_patches(patches, model.embedder)
    prefix = prompt_prefix(model)
    if prefix is None:
        return tokens
    B = tokens.shape[0]
    return nx.concat([nx.broadcast_to(prefix, (B,) + prefix.shape), tokens], axis=1)


def run_backbone(model: ForecastModel, patches) -> ResidualTrace:
    vector = injected_vector(model)
    plan = InjectionPlan(vector, model.layer_mask) if vector is not None else None
    return forward(input_tokens(model, patches), model.backbone, plan)


def input_token_count(model: ForecastModel, history_len: int) -> int:
    """Tokens fed to the backbone for the first generation step."""
    n = history_len // model.patch_len
    if model.mode == "prompt_icl":
        from .context import example_token_count

        n += sum(example_token_count(len(ex.history), len(ex.future), model.patch_len) for ex in model.examples)
    return n


def forecast(model: ForecastModel, history, horizon: int) -> np.ndarray:
    """Autoregressive forecast in normalized space.

    ``history`` is ``[T_h]`` or ``[B, T_h]``. Each step decodes the final
    token's last-layer state into the next patch and appends it to the input;
    ``ceil(horizon / P)`` steps are taken and the result is truncated.
    """
    h = np.asarray(history, dtype=np.float64)
    single = h.ndim == 1
    if single:
        h = h[None, :]
    if horizon < 1:
        raise ContractError(f"horizon must be >= 1, got {horizon}")
    P = model.patch_len
    patches = patchify(h, P)
    K = patches.shape[1]
    for _ in range(math.ceil(horizon / P)):
        trace = run_backbone(model, patches)
        nxt = decode_patch(trace.final[:, -1, :], model.head).numpy()
        patches = np.concatenate([patches, nxt[:, None, :]], axis=1)
    out = patches[:, K:, :].reshape(h.shape[0], -1)[:, :horizon]
    return out[0] if single else out


def sequence_loss(model: ForecastModel, histories, targets) -> Tensor:
    """Teacher-forced MSE of the horizon patches.

    The input is ``history ++ target[:-P]``; the states at the last
    ``ceil(T_f/P)`` positions decode the target patches.
    """
    H = np.asarray(histories, dtype=np.float64)
    Y = np.asarray(targets, dtype=np.float64)
    if H.ndim == 1:
        H, Y = H[None], Y[None]
    P = model.patch_len
    T_f = Y.shape[1]
    k_f = math.ceil(T_f / P)
    seq = np.concatenate([H, Y[:, : (k_f - 1) * P]], axis=1)
    trace = run_backbone(model, patchify(seq, P))
    hidden = trace.final[:, -k_f:, :]
    pred = nx.reshape(decode_patch(hidden, model.head), (H.shape[0], k_f * P))
    if k_f * P != T_f:
        pred = pred[:, :T_f]
    err = pred - Y
    return nx.mean(err * err)


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainConfig:
    lr: float = 3e-5
    max_epochs: int = 40
    patience: int = 3
    batch_size: int = 32
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    max_steps_per_epoch: int | None = None

    def __post_init__(self):
        if self.lr < 0 or self.max_epochs < 0 or self.patience < 1 or self.batch_size < 1:
            raise ConfigError(f"invalid training configuration {self}")


@dataclass
class TrainState:
    """Adam moments plus early-stopping bookkeeping (one evaluation per epoch)."""

    lr: float
    patience: int = 3
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    epoch: int = 0
    best_val: float = math.inf
    bad_evals: int = 0

    def record_eval(self, val_loss: float) -> bool:
        """Returns True when ``val_loss`` improves on the best so far."""
        if val_loss < self.best_val:
            self.best_val = val_loss
            self.bad_evals = 0
            return True
        self.bad_evals += 1
        return False

    @property
    def should_stop(self) -> bool:
        return self.bad_evals >= self.patience


def adam_step(
    params: Mapping[str, Tensor], grads: Mapping[str, Tensor], state: TrainState, cfg: TrainConfig
) -> dict[str, Tensor]:
    state.step += 1
    t = state.step
    out = {}
    for name, p in params.items():
        g = grads[name].numpy()
        m = state.m.get(name)
        v = state.v.get(name)
        m = (1 - cfg.beta1) * g if m is None else cfg.beta1 * m + (1 - cfg.beta1) * g
        v = (1 - cfg.beta2) * g * g if v is None else cfg.beta2 * v + (1 - cfg.beta2) * g * g
        state.m[name], state.v[name] = m, v
        m_hat = m / (1 - cfg.beta1**t)
        v_hat = v / (1 - cfg.beta2**t)
        out[name] = Tensor._wrap(p.numpy() - state.lr * m_hat / (np.sqrt(v_hat) + cfg.adam_eps))
    return out


def stack_windows(windows: Sequence[Window]) -> tuple[np.ndarray, np.ndarray]:
    normed = [normalize(w) for w in windows]
    return np.stack([w.history for w in normed]), np.stack([w.target for w in normed])


def batched_loss(model: ForecastModel, H: np.ndarray, Y: np.ndarray, batch_size: int = 256) -> float:
    total = 0.0
    for s in range(0, len(H), batch_size):
        total += sequence_loss(model, H[s : s + batch_size], Y[s : s + batch_size]).item() * len(H[s : s + batch_size])
    return total / len(H)


def loss_and_grads(model: ForecastModel, H, Y) -> tuple[float, dict[str, Tensor]]:
    params = model.trainable_params()
    with GradientTape() as tape:
        tape.watch(params)
        loss = sequence_loss(model.with_params(params), H, Y)
    return loss.item(), backward(tape, loss)


@dataclass
class FitResult:
    model: ForecastModel
    history: list[dict] = field(default_factory=list)
    state: TrainState | None = None


def fit(
    model: ForecastModel,
    train: Sequence[Window],
    val: Sequence[Window],
    cfg: TrainConfig,
    seed: int = 0,
) -> FitResult:
    """Adam on ``model.trainable_params()`` with per-epoch early stopping.

    The returned model carries the parameters with the best validation loss
    (the starting point counts as a candidate).
    """
    if not train:
        raise ContractError("no training windows")
    rng = np.random.default_rng(seed)
    H, Y = stack_windows(train)
    Hv, Yv = stack_windows(val) if val else (H, Y)
    state = TrainState(lr=cfg.lr, patience=cfg.patience)
    best_model = model
    state.best_val = batched_loss(model, Hv, Yv)
    history = [{"epoch": 0, "train_loss": None, "val_loss": state.best_val}]
    for epoch in range(1, cfg.max_epochs + 1):
        state.epoch = epoch
        order = rng.permutation(len(H))
        batches = [order[s : s + cfg.batch_size] for s in range(0, len(H), cfg.batch_size)]
        if cfg.max_steps_per_epoch is not None:
            batches = batches[: cfg.max_steps_per_epoch]
        losses = []
        for idx in batches:
            loss, grads = loss_and_grads(model, H[idx], Y[idx])
            if not math.isfinite(loss):
                raise TrainingError(f"loss became {loss} at step {state.step + 1}", step=state.step + 1)
            losses.append(loss)
            model = model.with_params(adam_step(model.trainable_params(), grads, state, cfg))
        val_loss = batched_loss(model, Hv, Yv)
        if not math.isfinite(val_loss):
            raise TrainingError(f"validation loss became {val_loss} after step {state.step}", step=state.step)
        if state.record_eval(val_loss):
            best_model = model
        history.append({"epoch": epoch, "train_loss": float(np.mean(losses)), "val_loss": val_loss})
        log.debug("epoch %d train %.5f val %.5f", epoch, history[-1]["train_loss"], val_loss)
        if state.should_stop:
            break
    return FitResult(best_model, history, state)


def init_heads(backbone: TransformerWeights, patch_len: int, seed: int) -> tuple[PatchEmbedder, OutputHead]:
    rng = np.random.default_rng(seed)
    d = backbone.config.model_width
    return PatchEmbedder.init(patch_len, d, rng), OutputHead.init(d, patch_len, rng)


def train_stage_a(
    train: Sequence[Window],
    val: Sequence[Window],
    backbone: TransformerWeights,
    patch_len: int,
    cfg: TrainConfig,
    seed: int = 0,
) -> FitResult:
    """Context-free model; its embedder later renders examples."""
    embedder, head = init_heads(backbone, patch_len, seed)
    return fit(ForecastModel(backbone, embedder, head, "no_icl"), train, val, cfg, seed)


def train_lvicl(
    train: Sequence[Window],
    val: Sequence[Window],
    stage_a: ForecastModel,
    raw_context: ContextVector,
    cfg: TrainConfig,
    seed: int = 0,
    variant: str = "fc",
    layer_mask: Sequence[bool] | None = None,
    per_layer_adapter: bool = False,
) -> FitResult:
    """Train θ_i, θ_o (from their stage-A values) and a fresh identity adapter."""
    L, d = raw_context.values.shape
    adapter = make_adapter(variant, d, L if per_layer_adapter else None)
    model = ForecastModel(
        stage_a.backbone,
        stage_a.embedder,
        stage_a.head,
        "vector_icl",
        adapter=adapter,
        raw_context=raw_context,
        layer_mask=tuple(layer_mask) if layer_mask is not None else None,
    )
    return fit(model, train, val, cfg, seed)


def train_prompt_icl(
    train: Sequence[Window],
    val: Sequence[Window],
    stage_a: ForecastModel,
    examples: Sequence[ExamplePair],
    cfg: TrainConfig,
    seed: int = 0,
) -> FitResult:
    """Fine-tune θ_i, θ_o with the example prompt prepended to every input."""
    model = ForecastModel(stage_a.backbone, stage_a.embedder, stage_a.head, "prompt_icl", examples=tuple(examples))
    if cfg.max_epochs == 0:
        return FitResult(model)
    return fit(model, train, val, cfg, seed)


def train_full_finetune(
    train: Sequence[Window], val: Sequence[Window], stage_a: ForecastModel, cfg: TrainConfig, seed: int = 0
) -> FitResult:
    """Train every parameter, backbone included, on a copy of the backbone."""
    model = ForecastModel(stage_a.backbone, stage_a.embedder, stage_a.head, "full_ft")
    return fit(model, train, val, cfg, seed)


# ---------------------------------------------------------------------------
# evaluation


def evaluate(
    model: ForecastModel,
    windows: Sequence[Window],
    horizon: int | None = None,
    season: int = 1,
    batch_size: int = 256,
) -> dict[str, float]:
    """Forecast every window and score in the original scale.

    MSE/MAE pool all values; SMAPE/MASE average per window; OWA compares the
    averaged SMAPE/MASE with those of :func:`metrics.naive2` on the same windows.
    """
    if not windows:
        raise ContractError("no evaluation windows")
    horizon = horizon or len(windows[0].target)
    normed = [normalize(w) for w in windows]
    H = np.stack([w.history for w in normed])
    preds = []
    for s in range(0, len(H), batch_size):
        preds.append(forecast(model, H[s : s + batch_size], horizon))
    pred_n = np.concatenate(preds, axis=0)
    pred = np.stack([denormalize(p, w.record) for p, w in zip(pred_n, normed)])
    actual = np.stack([w.target[:horizon] for w in windows])
    s_model, m_model, s_naive, m_naive = [], [], [], []
    for w, p, y in zip(windows, pred, actual):
        n2 = metrics.naive2(w.history, horizon, season)
        s_model.append(metrics.smape(p, y))
        s_naive.append(metrics.smape(n2, y))
        m_model.append(metrics.mase(p, y, w.history, season))
        m_naive.append(metrics.mase(n2, y, w.history, season))
    out = {
        "mse": metrics.mse(pred, actual),
        "mae": metrics.mae(pred, actual),
        "smape": float(np.mean(s_model)),
        "mase": float(np.mean(m_model)),
    }
    out["owa"] = metrics.owa(out["smape"], out["mase"], float(np.mean(s_naive)), float(np.mean(m_naive)))
    out["mse_normalized"] = metrics.mse(pred_n, np.stack([w.target[:horizon] for w in normed]))
    return out


# ---------------------------------------------------------------------------
# bundles


def save_model(path, model: ForecastModel, config: Mapping | None = None):
    params = {k: t.numpy() for k, t in model.trainable_params().items() if not k.startswith("backbone.")}
    arrays = dict(params)
    if model.mode == "full_ft":
        arrays.update({f"backbone.{k}": t.numpy() for k, t in model.backbone.tensors.items()})
    meta = {
        "kind": "model_bundle",
        "mode": model.mode,
        "backbone_hash": model.backbone.initial_hash,
        "context_hash": model.raw_context.content_hash() if model.raw_context is not None else None,
        "adapter_variant": model.adapter.variant if model.adapter is not None else None,
        "adapter_layers": len(model.adapter.layers) if model.adapter is not None else 0,
        "layer_mask": list(model.layer_mask) if model.layer_mask is not None else None,
        "config": dict(config or {}),
    }
    return save_arrays(path, arrays, meta)


def load_model(
    path,
    backbone: TransformerWeights,
    raw_context: ContextVector | None = None,
    examples: Sequence[ExamplePair] = (),
) -> ForecastModel:
    arrays, meta = load_arrays(path)
    if meta.get("kind") != "model_bundle":
        raise CacheMismatchError(f"{path}: not a model bundle")
    if meta["mode"] != "full_ft" and backbone.initial_hash != meta["backbone_hash"]:
        raise CacheMismatchError(f"{path}: bundle was trained against a different backbone")
    if meta["context_hash"] is not None:
        if raw_context is None or raw_context.content_hash() != meta["context_hash"]:
            raise CacheMismatchError(f"{path}: bundle needs the context vector it was trained with")
    params = {k: Tensor(v) for k, v in arrays.items()}
    adapter = None
    if meta["adapter_variant"] is not None:
        adapter = make_adapter(meta["adapter_variant"], backbone.config.model_width).with_params(params)
    embedder = PatchEmbedder(params["input.weight"], params["input.bias"])
    head = OutputHead(params["output.weight"], params["output.bias"])
    if meta["mode"] == "full_ft":
        backbone = backbone.replace({k[len("backbone.") :]: t for k, t in params.items() if k.startswith("backbone.")})
    return ForecastModel(
        backbone,
        embedder,
        head,
        meta["mode"],
        adapter=adapter,
        raw_context=raw_context if meta["mode"] == "vector_icl" else None,
        examples=tuple(examples),
        layer_mask=tuple(meta["layer_mask"]) if meta["layer_mask"] is not None else None,
    )
