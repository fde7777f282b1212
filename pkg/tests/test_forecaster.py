import dataclasses
import math

import numpy as np
import pytest

from lvicl import numerics as nx
from lvicl.context import ContextVector, ExamplePair, example_token_count, make_adapter
from lvicl.errors import CacheMismatchError, CapacityError, ConfigError, ContractError, TrainingError
from lvicl.forecaster import (
    ForecastModel,
    TrainConfig,
    TrainState,
    adam_step,
    evaluate,
    fit,
    forecast,
    init_heads,
    input_token_count,
    load_model,
    loss_and_grads,
    save_model,
    sequence_loss,
    train_full_finetune,
    train_lvicl,
    train_prompt_icl,
    train_stage_a,
)
from lvicl.layers import OutputHead, PatchEmbedder, decode_patch, embed_patches
from lvicl.numerics import Tensor, finite_difference_check
from lvicl.transformer import TransformerConfig, init_frozen
from lvicl.tsio import Window

TOY = TransformerConfig(num_layers=2, model_width=8, num_heads=2, ff_width=16, max_sequence_length=128)
P = 4


@pytest.fixture(scope="module")
def backbone():
    return init_frozen(TOY, 0)


def base_model(backbone, seed=1):
    emb, head = init_heads(backbone, P, seed)
    return ForecastModel(backbone, emb, head)


def context(seed=2, scale=0.5):
    return ContextVector(Tensor(np.random.default_rng(seed).standard_normal((2, 8)) * scale))


def vector_model(backbone, cv=None, seed=1):
    m = base_model(backbone, seed)
    return dataclasses.replace(m, mode="vector_icl", adapter=make_adapter("fc", 8), raw_context=cv or context())


def examples(n=2, seed=3):
    rng = np.random.default_rng(seed)
    return tuple(ExamplePair(rng.standard_normal(8), rng.standard_normal(4)) for _ in range(n))


def windows(n, T_h=16, T_f=8, seed=0):
    rng = np.random.default_rng(seed)
    t = np.arange(T_h + T_f)
    out = []
    for i in range(n):
        series = np.sin(2 * np.pi * (t + i) / 8) * (1 + i % 3) + rng.normal(0, 0.1, t.size) + 5
        out.append(Window(series[:T_h], series[T_h:], start=i))
    return out


def test_embed_patches_cases():
    zero = PatchEmbedder(nx.zeros((4, 8)), nx.zeros(8))
    assert np.array_equal(embed_patches(np.zeros((3, 4)), zero).numpy(), np.zeros((3, 8)))
    ident = PatchEmbedder(nx.eye(4), nx.zeros(4))
    x = np.random.default_rng(0).standard_normal((3, 4))
    assert np.array_equal(embed_patches(x, ident).numpy(), x)
    rng = np.random.default_rng(1)
    W, b = rng.standard_normal((4, 8)), rng.standard_normal(8)
    got = embed_patches(x, PatchEmbedder(Tensor(W), Tensor(b))).numpy()
    ref = [[math.fsum(x[i, k] * W[k, j] for k in range(4)) + b[j] for j in range(8)] for i in range(3)]
    assert np.allclose(got, ref, rtol=0, atol=1e-13)


def test_decode_patch_cases():
    hidden = np.random.default_rng(2).standard_normal(4)
    assert np.array_equal(decode_patch(hidden, OutputHead(nx.eye(4), nx.zeros(4))).numpy(), hidden)
    assert np.array_equal(decode_patch(np.zeros(8), OutputHead(nx.zeros((8, 4)), nx.zeros(4))).numpy(), np.zeros(4))
    rng = np.random.default_rng(3)
    W, b, h = rng.standard_normal((8, 4)), rng.standard_normal(4), rng.standard_normal(8)
    ref = [math.fsum(h[k] * W[k, j] for k in range(8)) + b[j] for j in range(4)]
    assert np.allclose(decode_patch(h, OutputHead(Tensor(W), Tensor(b))).numpy(), ref, rtol=0, atol=1e-13)


def test_model_contract_errors(backbone):
    m = base_model(backbone)
    with pytest.raises(ConfigError):
        dataclasses.replace(m, mode="few_shot")
    with pytest.raises(ContractError):
        dataclasses.replace(m, mode="vector_icl")
    with pytest.raises(ContractError):
        dataclasses.replace(m, mode="prompt_icl")


def count_forwards(monkeypatch):
    import lvicl.forecaster as fc

    calls = []
    real = fc.run_backbone

    def wrapped(model, patches):
        calls.append(np.asarray(patches).shape)
        return real(model, patches)

    monkeypatch.setattr(fc, "run_backbone", wrapped)
    return calls


def test_horizon_equal_to_patch_is_one_step(backbone, monkeypatch):
    calls = count_forwards(monkeypatch)
    out = forecast(base_model(backbone), np.zeros(16), P)
    assert out.shape == (P,) and len(calls) == 1


def test_step_count_336_over_96(monkeypatch):
    cfg = TransformerConfig(num_layers=1, model_width=8, num_heads=2, ff_width=8)
    w = init_frozen(cfg, 0)
    emb, head = init_heads(w, 96, 0)
    calls = count_forwards(monkeypatch)
    out = forecast(ForecastModel(w, emb, head), np.random.default_rng(0).standard_normal(192), 336)
    assert out.shape == (336,) and len(calls) == 4


def test_zero_context_is_bitwise_no_icl(backbone):
    base = base_model(backbone)
    zero = vector_model(backbone, ContextVector(nx.zeros((2, 8))))
    rng = np.random.default_rng(4)
    for _ in range(20):
        h = rng.standard_normal(16)
        assert np.array_equal(forecast(base, h, 10), forecast(zero, h, 10))


@pytest.mark.parametrize("mode", ["no_icl", "vector_icl", "prompt_icl"])
def test_autoregressive_chaining(backbone, mode):
    m = base_model(backbone)
    if mode == "vector_icl":
        m = vector_model(backbone)
    elif mode == "prompt_icl":
        m = dataclasses.replace(m, mode="prompt_icl", examples=examples())
    h = np.random.default_rng(5).standard_normal(16)
    two = forecast(m, h, 2 * P)
    first = forecast(m, h, P)
    second = forecast(m, np.concatenate([h, first]), P)
    assert np.array_equal(two, np.concatenate([first, second]))


def test_batched_forecast_matches_single(backbone):
    m = vector_model(backbone)
    H = np.random.default_rng(6).standard_normal((3, 16))
    batched = forecast(m, H, 6)
    for i in range(3):
        assert np.allclose(batched[i], forecast(m, H[i], 6), rtol=0, atol=1e-12)


def test_prompt_capacity_error(backbone):
    cfg = dataclasses.replace(TOY, max_sequence_length=16)
    w = init_frozen(cfg, 0)
    emb, head = init_heads(w, P, 0)
    m = ForecastModel(w, emb, head, "prompt_icl", examples=examples(3))
    with pytest.raises(CapacityError):
        forecast(m, np.zeros(16), P)


def test_token_growth_invariant(backbone):
    base = base_model(backbone)
    per = example_token_count(8, 4, P)
    for n in range(1, 6):
        prompt = dataclasses.replace(base, mode="prompt_icl", examples=examples(n))
        assert input_token_count(prompt, 16) == 4 + n * per
        assert input_token_count(vector_model(backbone), 16) == 4


def test_sequence_loss_teacher_forcing_matches_forecast_for_one_patch(backbone):
    m = base_model(backbone)
    h, y = np.random.default_rng(7).standard_normal(16), np.random.default_rng(8).standard_normal(P)
    pred = forecast(m, h, P)
    assert sequence_loss(m, h, y).item() == pytest.approx(float(np.mean((pred - y) ** 2)), abs=1e-13)


def test_gradient_map_groups(backbone):
    H, Y = np.zeros((2, 16)) + 0.1, np.ones((2, 8))
    _, grads = loss_and_grads(vector_model(backbone), H, Y)
    assert set(grads) == {"input.weight", "input.bias", "output.weight", "output.bias", "adapter.0.weight", "adapter.0.bias"}
    _, grads = loss_and_grads(base_model(backbone), H, Y)
    assert set(grads) == {"input.weight", "input.bias", "output.weight", "output.bias"}


def test_full_loss_finite_difference(backbone):
    m = vector_model(backbone)
    rng = np.random.default_rng(9)
    H, Y = rng.standard_normal((2, 16)), rng.standard_normal((2, 6))

    def f(p):
        return sequence_loss(m.with_params(p), H, Y)

    assert finite_difference_check(f, m.trainable_params()) < 1e-4


def test_zero_learning_rate_leaves_parameters(backbone):
    m = base_model(backbone)
    cfg = TrainConfig(lr=0.0)
    params = m.trainable_params()
    _, grads = loss_and_grads(m, np.ones((1, 16)), np.ones((1, 8)))
    new = adam_step(params, grads, TrainState(lr=0.0), cfg)
    for k in params:
        assert np.array_equal(new[k].numpy(), params[k].numpy())


def test_memorizable_window_loss_decreases_monotonically(backbone):
    w = windows(1)
    cfg = TrainConfig(lr=3e-5, max_epochs=10, patience=10, batch_size=1)
    res = fit(base_model(backbone), w, w, cfg, seed=0)
    losses = [h["val_loss"] for h in res.history]
    assert len(losses) == 11
    assert all(b < a for a, b in zip(losses, losses[1:]))


def test_stage_a_keeps_backbone_frozen(backbone):
    before = backbone.content_hash()
    res = train_stage_a(windows(8), windows(2, seed=1), backbone, P, TrainConfig(lr=1e-3, max_epochs=2), seed=0)
    assert res.model.backbone.content_hash() == before
    res_b = train_lvicl(windows(8), windows(2, seed=1), res.model, context(), TrainConfig(lr=1e-3, max_epochs=2))
    assert res_b.model.backbone.content_hash() == before == backbone.initial_hash


def test_stage_b_starts_from_stage_a_heads(backbone):
    a = base_model(backbone, seed=4)
    res = train_lvicl(windows(4), windows(1), a, context(), TrainConfig(lr=0.0, max_epochs=1))
    assert np.array_equal(res.model.embedder.weight.numpy(), a.embedder.weight.numpy())
    assert np.array_equal(res.model.adapter.layers[0].weight.numpy(), np.eye(8))


def test_patience_halts_training():
    state = TrainState(lr=1e-3, patience=3)
    state.best_val = 1.0
    for v in (1.5, 1.2, 1.1):
        assert not state.should_stop
        state.record_eval(v)
    assert state.should_stop
    state = TrainState(lr=1e-3, patience=3, best_val=1.0)
    state.record_eval(2.0)
    state.record_eval(0.5)
    assert state.bad_evals == 0


def test_fit_stops_after_three_bad_evals(backbone):
    # a huge learning rate makes every epoch worse than the starting point
    cfg = TrainConfig(lr=5.0, max_epochs=40, patience=3, batch_size=4)
    res = fit(base_model(backbone), windows(8), windows(2, seed=1), cfg)
    assert res.state.epoch == 3
    # nothing beat epoch 0, so the starting parameters come back
    assert np.array_equal(res.model.embedder.weight.numpy(), base_model(backbone).embedder.weight.numpy())


def test_epoch_cap(backbone):
    cfg = TrainConfig(lr=1e-4, max_epochs=2, patience=40, batch_size=8)
    res = fit(base_model(backbone), windows(8), windows(2, seed=1), cfg)
    assert res.state.epoch == 2 and len(res.history) == 3
    assert TrainConfig().max_epochs == 40 and TrainConfig().patience == 3


def test_divergence_raises_training_error_with_step(backbone):
    bad = [Window(np.full(16, np.nan), np.ones(8))]
    with pytest.raises(TrainingError) as info:
        fit(base_model(backbone), bad, [], TrainConfig(max_epochs=1))
    assert info.value.step == 1


def test_prompt_icl_zero_epochs_returns_untrained(backbone):
    a = base_model(backbone)
    res = train_prompt_icl(windows(2), windows(1), a, examples(), TrainConfig(max_epochs=0))
    assert res.model.mode == "prompt_icl" and res.model.embedder is a.embedder


def test_full_finetune_moves_backbone(backbone):
    a = base_model(backbone)
    res = train_full_finetune(windows(4), windows(1), a, TrainConfig(lr=1e-2, max_epochs=1, patience=5))
    assert backbone.content_hash() == backbone.initial_hash
    assert res.model.trainable_parameter_count() > a.trainable_parameter_count()


def test_evaluate_reports_denormalized_metrics(backbone):
    m = base_model(backbone)
    out = evaluate(m, windows(3), 8, season=8)
    assert set(out) == {"mse", "mae", "smape", "mase", "owa", "mse_normalized"}
    assert all(math.isfinite(v) for v in out.values())
    shifted = [Window(w.history * 10, w.target * 10) for w in windows(3)]
    assert evaluate(m, shifted, 8, season=8)["mse"] == pytest.approx(100 * out["mse"], rel=1e-10)


def test_parameter_count_is_sum_of_groups(backbone):
    m = vector_model(backbone)
    assert m.trainable_parameter_count() == (4 * 8 + 8) + (8 * 4 + 4) + (8 * 8 + 8)


def test_bundle_round_trip(tmp_path, backbone):
    m = vector_model(backbone)
    path = save_model(tmp_path / "m.bin", m)
    back = load_model(path, backbone, raw_context=m.raw_context)
    h = np.random.default_rng(10).standard_normal(16)
    assert np.array_equal(forecast(back, h, 8), forecast(m, h, 8))
    with pytest.raises(CacheMismatchError):
        load_model(path, backbone, raw_context=context(seed=99))
    with pytest.raises(CacheMismatchError):
        load_model(path, init_frozen(TOY, 1), raw_context=m.raw_context)
