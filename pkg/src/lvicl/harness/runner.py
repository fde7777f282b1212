"""Experiment protocols over a shared workspace of data, backbone and Stage-A models.

Every protocol appends entries (one per cell) to a report dict and returns
its section. A cell is one (section, mode, variant, horizon, seed) tuple; a
failing cell records its reason and the remaining cells still run.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Callable, Sequence

import numpy as np
from scipy import stats

from .. import context as cx
from .. import forecaster as fc
from ..errors import ContractError, LviclError
from ..layers import embed_patches
from ..numerics import Tensor
from ..transformer import TransformerWeights, init_frozen
from ..tsio import (
    SeriesDataset,
    Window,
    chronological_split,
    load_csv,
    make_synthetic,
    normalize,
    seasonal_period,
    split_windows,
)
from .config import MASK_PRESETS, ExperimentConfig, layer_mask
from .report import compute_aggregates, sensitivity_stats

log = logging.getLogger(__name__)


@dataclass
class Workspace:
    """Lazily built, memoized pieces shared by every protocol of one config."""

    cfg: ExperimentConfig
    dataset: SeriesDataset
    backbone: TransformerWeights
    _windows: dict = field(default_factory=dict)
    _stage_a: dict = field(default_factory=dict)
    _contexts: dict = field(default_factory=dict)

    @classmethod
    def from_config(cls, cfg: ExperimentConfig) -> "Workspace":
        spec = cfg.dataset
        if spec.path is None:
            ds = make_synthetic(
                spec.synthetic_length, spec.synthetic_vars, seed=spec.synthetic_seed, period=spec.synthetic_period, name=spec.name
            )
        else:
            ds = load_csv(spec.path, name=spec.name, frequency=spec.frequency)
        span = cfg.history_len + max(example_future_len(cfg, h) for h in cfg.horizons)
        ds = chronological_split(ds, spec.ratios, min_length=span)
        return cls(cfg, ds, init_frozen(cfg.backbone.transformer_config(), cfg.backbone.seed))

    @property
    def season(self) -> int:
        return seasonal_period(self.dataset.frequency)

    def windows(self, split: str, horizon: int) -> list[Window]:
        key = (split, horizon)
        if key not in self._windows:
            stride = self.cfg.train_stride if split == "train" else (self.cfg.eval_stride or horizon)
            self._windows[key] = split_windows(self.dataset, split, self.cfg.history_len, horizon, stride)
        return self._windows[key]

    def stage_a(self, seed: int, horizon: int) -> fc.ForecastModel:
        key = (seed, horizon)
        if key not in self._stage_a:
            res = fc.train_stage_a(
                self.windows("train", horizon),
                self.windows("val", horizon),
                self.backbone,
                self.cfg.patch_len,
                self.cfg.train.train_config(),
                seed=seed,
            )
            self._stage_a[key] = res.model
        return self._stage_a[key]

    def examples(
        self, set_seed: int, horizon: int, count: int | None = None, fraction: float | None = None
    ) -> list[cx.ExamplePair]:
        return cx.sample_examples(
            self.dataset,
            self.cfg.history_len,
            example_future_len(self.cfg, horizon),
            fraction=fraction,
            count=count,
            seed=set_seed,
            stride=self.cfg.sampling.stride,
        )

    def context(self, examples: Sequence[cx.ExamplePair], model: fc.ForecastModel) -> cx.ContextVector:
        key = (model.embedder.content_hash(), tuple(ex.example_id for ex in examples))
        if key not in self._contexts:
            reps = cx.extract_representations(examples, model.embedder, self.backbone)
            self._contexts[key] = cx.aggregate(reps)
        return self._contexts[key]

    def vector_examples(self, horizon: int) -> list[cx.ExamplePair]:
        s = self.cfg.sampling
        if s.fraction is not None:
            return self.examples(s.seeds[0], horizon, fraction=s.fraction)
        return self.examples(s.seeds[0], horizon, count=s.count)

    def score(self, model: fc.ForecastModel, horizon: int) -> tuple[dict, dict]:
        test = fc.evaluate(model, self.windows("test", horizon), horizon, self.season)
        val = fc.evaluate(model, self.windows("val", horizon), horizon, self.season)
        return test, val


def example_future_len(cfg: ExperimentConfig, horizon: int | None = None) -> int:
    """Example futures follow the shortest configured horizon, rounded up to whole patches.

    ``horizon`` is accepted for call-site symmetry; every horizon shares one example length.
    """
    return cfg.patch_len * math.ceil(min(cfg.horizons) / cfg.patch_len)


def new_report(cfg: ExperimentConfig, kind: str, ws: Workspace | None = None) -> dict:
    return {
        "kind": kind,
        "config": cfg.to_dict(),
        "config_hash": cfg.hash(),
        "backbone_hash": ws.backbone.initial_hash if ws else None,
        "entries": [],
        "sections": {},
        "aggregates": [],
    }


def finalize(report: dict, ws: Workspace) -> dict:
    if ws.backbone.content_hash() != ws.backbone.initial_hash:
        raise ContractError("backbone weights changed during the experiment")
    report["backbone_hash"] = ws.backbone.initial_hash
    report["aggregates"] = compute_aggregates(report["entries"])
    return report


def _cell(
    report: dict,
    ws: Workspace,
    section: str,
    mode: str,
    horizon: int,
    seed: int,
    fn: Callable[[], tuple[dict, dict, dict]],
    variant: str = "",
) -> dict:
    group = "/".join(p for p in (section, mode, variant, f"h{horizon}") if p)
    entry = {
        "cell_id": f"{group}/s{seed}",
        "group": group,
        "section": section,
        "mode": mode,
        "variant": variant,
        "horizon": horizon,
        "seed": seed,
        "config_hash": report["config_hash"],
    }
    start = time.perf_counter()
    try:
        metrics, val, info = fn()
        entry.update(status="ok", reason=None, metrics=metrics, val_metrics=val, info=info)
    except LviclError as exc:
        log.warning("cell %s failed: %s", entry["cell_id"], exc)
        entry.update(status="error", reason=f"{type(exc).__name__}: {exc}", metrics={}, val_metrics={}, info={})
    entry["wall_time"] = time.perf_counter() - start
    report["entries"].append(entry)
    return entry


def _trained(ws: Workspace, res: fc.FitResult, horizon: int, **info) -> tuple[dict, dict, dict]:
    test, val = ws.score(res.model, horizon)
    info = {"epochs": len(res.history) - 1, "best_val_loss": res.state.best_val if res.state else None, **info}
    return test, val, info


# ---------------------------------------------------------------------------
# protocols


def run(cfg: ExperimentConfig, ws: Workspace | None = None) -> dict:
    """Stage A, context construction and Stage B for every (horizon, seed, mode)."""
    ws = ws or Workspace.from_config(cfg)
    report = new_report(cfg, "run", ws)
    for h in cfg.horizons:
        for seed in cfg.seeds:
            for mode in cfg.modes:
                _cell(report, ws, "run", mode, h, seed, lambda mode=mode: _run_mode(ws, mode, h, seed))
    report["sections"]["run"] = {
        "plot": [
            {"x": a["group"].split("/")[-1][1:], "y": a["mean"], "series": a["group"].split("/")[1]}
            for a in compute_aggregates(report["entries"])
            if a["metric"] == "mse"
        ]
    }
    return finalize(report, ws)


def _run_mode(ws: Workspace, mode: str, h: int, seed: int):
    cfg = ws.cfg
    A = ws.stage_a(seed, h)
    train, val = ws.windows("train", h), ws.windows("val", h)
    if mode == "no_icl":
        test, v = ws.score(A, h)
        return test, v, {"trainable_parameters": A.trainable_parameter_count()}
    if mode == "full_ft":
        res = fc.train_full_finetune(train, val, A, cfg.train.full_ft_config(), seed)
        return _trained(ws, res, h, trainable_parameters=res.model.trainable_parameter_count())
    if mode == "prompt_icl":
        ex = ws.examples(cfg.sampling.seeds[0], h, count=cfg.sampling.prompt_count)
        res = fc.train_prompt_icl(train, val, A, ex, cfg.train.prompt_config(), seed)
        return _trained(ws, res, h, examples=[e.example_id for e in ex])
    ex = ws.vector_examples(h)
    raw = ws.context(ex, A)
    res = fc.train_lvicl(
        train,
        val,
        A,
        raw,
        cfg.train.train_config(),
        seed,
        variant=cfg.adapter,
        layer_mask=layer_mask(cfg.layer_mask, cfg.backbone.num_layers),
        per_layer_adapter=cfg.per_layer_adapter,
    )
    return _trained(ws, res, h, example_count=len(ex), context_hash=raw.content_hash())


def orderings(n: int, count: int, seed: int) -> list[tuple[int, ...]]:
    """The identity plus ``count - 1`` seeded permutations (distinct when possible)."""
    out = [tuple(range(n))]
    rng = np.random.default_rng([seed, n])
    attempts = 0
    while len(out) < count:
        perm = tuple(int(i) for i in rng.permutation(n))
        attempts += 1
        if perm not in out or attempts > 50:
            out.append(perm)
    return out


def sensitivity_suite(cfg: ExperimentConfig, ws: Workspace | None = None) -> dict:
    """Each example set under each ordering, for prompt_icl and vector_icl.

    vector_icl contexts are checked for bitwise equality across orderings;
    the model is then trained once per set and its metrics stand for every
    ordering.
    """
    ws = ws or Workspace.from_config(cfg)
    report = new_report(cfg, "sensitivity", ws)
    s = cfg.sampling
    for h in cfg.horizons:
        for seed in cfg.seeds:
            if "no_icl" in cfg.modes:
                _cell(report, ws, "sensitivity", "no_icl", h, seed, lambda: _run_mode(ws, "no_icl", h, seed))
            for set_seed in s.seeds:
                for o, order in enumerate(orderings(s.prompt_count, s.orderings, set_seed)):
                    if "prompt_icl" in cfg.modes:
                        _cell(
                            report, ws, "sensitivity", "prompt_icl", h, seed,
                            lambda order=order, set_seed=set_seed: _prompt_condition(ws, h, seed, set_seed, order),
                            variant=f"set{set_seed}/order{o}",
                        )
                if "vector_icl" in cfg.modes:
                    _vector_condition(report, ws, h, seed, set_seed)
    section = {"stats": sensitivity_stats(report["entries"])}
    section["plot"] = [
        {"x": a["group"].split("/", 2)[2].rsplit("/h", 1)[0] or "reference", "y": a["mean"], "series": a["group"].split("/")[1]}
        for a in compute_aggregates(report["entries"])
        if a["metric"] == "mse"
    ]
    report["sections"]["sensitivity"] = section
    return finalize(report, ws)


def _prompt_condition(ws: Workspace, h: int, seed: int, set_seed: int, order: tuple[int, ...]):
    ex = ws.examples(set_seed, h, count=ws.cfg.sampling.prompt_count)
    ordered = [ex[i] for i in order]
    A = ws.stage_a(seed, h)
    res = fc.train_prompt_icl(ws.windows("train", h), ws.windows("val", h), A, ordered, ws.cfg.train.prompt_config(), seed)
    return _trained(ws, res, h, examples=[e.example_id for e in ordered])


def _vector_condition(report: dict, ws: Workspace, h: int, seed: int, set_seed: int):
    cfg = ws.cfg
    ex = ws.examples(set_seed, h, count=cfg.sampling.prompt_count)
    orders = orderings(len(ex), cfg.sampling.orderings, set_seed)
    result: dict = {}

    def train_once():
        if "value" not in result:
            A = ws.stage_a(seed, h)
            contexts = [
                cx.aggregate(cx.extract_representations([ex[i] for i in order], A.embedder, ws.backbone))
                for order in orders
            ]
            ref = contexts[0].values.numpy()
            for c in contexts[1:]:
                if not np.array_equal(c.values.numpy(), ref):
                    raise ContractError("aggregated context differs between example orderings")
            res = fc.train_lvicl(
                ws.windows("train", h), ws.windows("val", h), A, contexts[0], cfg.train.train_config(), seed,
                variant=cfg.adapter, layer_mask=layer_mask(cfg.layer_mask, cfg.backbone.num_layers),
                per_layer_adapter=cfg.per_layer_adapter,
            )
            result["value"] = _trained(ws, res, h, context_hash=contexts[0].content_hash())
        return result["value"]

    for o, order in enumerate(orders):
        def cond(order=order):
            test, val, info = train_once()
            return test, val, {**info, "examples": [ex[i].example_id for i in order]}

        _cell(report, ws, "sensitivity", "vector_icl", h, seed, cond, variant=f"set{set_seed}/order{o}")


def _ranked(report: dict, section: str, variants: Sequence[str]) -> list[dict]:
    rows = []
    for v in variants:
        vals = [
            e["val_metrics"]["mse"]
            for e in report["entries"]
            if e["section"] == section and e["variant"] == v and e["status"] == "ok"
        ]
        tests = [
            e["metrics"]["mse"]
            for e in report["entries"]
            if e["section"] == section and e["variant"] == v and e["status"] == "ok"
        ]
        if vals:
            rows.append({"variant": v, "val_mse": math.fsum(vals) / len(vals), "test_mse": math.fsum(tests) / len(tests)})
    return sorted(rows, key=lambda r: (r["val_mse"], r["variant"]))


def ablation_adapter(cfg: ExperimentConfig, ws: Workspace | None = None) -> dict:
    ws = ws or Workspace.from_config(cfg)
    report = new_report(cfg, "ablate-adapter", ws)
    mask = layer_mask(cfg.layer_mask, cfg.backbone.num_layers)
    for h in cfg.horizons:
        for seed in cfg.seeds:
            for variant in cx.ADAPTER_VARIANTS:
                def fn(variant=variant):
                    A = ws.stage_a(seed, h)
                    raw = ws.context(ws.vector_examples(h), A)
                    res = fc.train_lvicl(
                        ws.windows("train", h), ws.windows("val", h), A, raw, cfg.train.train_config(), seed,
                        variant=variant, layer_mask=mask, per_layer_adapter=cfg.per_layer_adapter,
                    )
                    return _trained(ws, res, h, adapter_parameters=res.model.adapter.parameter_count())

                _cell(report, ws, "ablate-adapter", "vector_icl", h, seed, fn, variant=variant)
    ranking = _ranked(report, "ablate-adapter", cx.ADAPTER_VARIANTS)
    report["sections"]["ablate-adapter"] = {
        "ranking": ranking,
        "plot": [{"x": r["variant"], "y": r[k], "series": k} for r in ranking for k in ("val_mse", "test_mse")],
    }
    return finalize(report, ws)


def ablation_injection(cfg: ExperimentConfig, ws: Workspace | None = None) -> dict:
    ws = ws or Workspace.from_config(cfg)
    report = new_report(cfg, "ablate-injection", ws)
    L = cfg.backbone.num_layers
    for h in cfg.horizons:
        for seed in cfg.seeds:
            for preset in MASK_PRESETS:
                def fn(preset=preset):
                    A = ws.stage_a(seed, h)
                    raw = ws.context(ws.vector_examples(h), A)
                    mask = layer_mask(preset, L)
                    res = fc.train_lvicl(
                        ws.windows("train", h), ws.windows("val", h), A, raw, cfg.train.train_config(), seed,
                        variant=cfg.adapter, layer_mask=mask, per_layer_adapter=cfg.per_layer_adapter,
                    )
                    return _trained(ws, res, h, layers=[l for l in range(L) if mask[l]])

                _cell(report, ws, "ablate-injection", "vector_icl", h, seed, fn, variant=preset)
    ranking = _ranked(report, "ablate-injection", MASK_PRESETS)
    report["sections"]["ablate-injection"] = {
        "ranking": ranking,
        "masks": {p: list(layer_mask(p, L)) for p in MASK_PRESETS},
        "plot": [{"x": r["variant"], "y": r[k], "series": k} for r in ranking for k in ("val_mse", "test_mse")],
    }
    return finalize(report, ws)


def example_fraction_sweep(cfg: ExperimentConfig, ws: Workspace | None = None) -> dict:
    """Context rebuilt per fraction; fraction 0 must reproduce ``no_icl`` exactly."""
    ws = ws or Workspace.from_config(cfg)
    report = new_report(cfg, "sweep-fraction", ws)
    mask = layer_mask(cfg.layer_mask, cfg.backbone.num_layers)
    for h in cfg.horizons:
        for seed in cfg.seeds:
            for frac in cfg.fraction_grid:
                def fn(frac=frac):
                    A = ws.stage_a(seed, h)
                    if frac == 0:
                        return _zero_fraction(ws, A, h)
                    ex = ws.examples(cfg.sampling.seeds[0], h, fraction=frac)
                    raw = ws.context(ex, A)
                    res = fc.train_lvicl(
                        ws.windows("train", h), ws.windows("val", h), A, raw, cfg.train.train_config(), seed,
                        variant=cfg.adapter, layer_mask=mask, per_layer_adapter=cfg.per_layer_adapter,
                    )
                    return _trained(ws, res, h, example_count=len(ex))

                _cell(report, ws, "sweep-fraction", "vector_icl", h, seed, fn, variant=f"fraction={frac!r}")
    rows = [a for a in compute_aggregates(report["entries"]) if a["metric"] == "mse"]
    report["sections"]["sweep-fraction"] = {
        "plot": [{"x": a["group"].split("fraction=")[1].split("/")[0], "y": a["mean"], "series": a["group"].split("/")[-1]} for a in rows]
    }
    return finalize(report, ws)


def _zero_fraction(ws: Workspace, A: fc.ForecastModel, h: int):
    L, d = ws.cfg.backbone.num_layers, ws.cfg.backbone.model_width
    zero = cx.ContextVector(Tensor(np.zeros((L, d))), count=0)
    injected = fc.ForecastModel(A.backbone, A.embedder, A.head, "vector_icl", adapter=cx.make_adapter("fc", d), raw_context=zero)
    test, val = ws.score(injected, h)
    ref_test, ref_val = ws.score(A, h)
    if test != ref_test or val != ref_val:
        raise ContractError("zero-example context does not reproduce the no_icl metrics")
    return test, val, {"example_count": 0, "equals_no_icl": True}


def linear_fit_exact(xs: Sequence[int], ys: Sequence[int]) -> dict:
    """Least-squares line through integer points in rational arithmetic."""
    n = len(xs)
    X = [Fraction(x) for x in xs]
    Y = [Fraction(y) for y in ys]
    mx, my = sum(X) / n, sum(Y) / n
    sxx = sum((x - mx) ** 2 for x in X)
    sxy = sum((x - mx) * (y - my) for x, y in zip(X, Y))
    syy = sum((y - my) ** 2 for y in Y)
    if sxx == 0:
        raise ContractError("linear fit needs at least two distinct x values")
    slope = sxy / sxx
    intercept = my - slope * mx
    ss_res = sum((y - (slope * x + intercept)) ** 2 for x, y in zip(X, Y))
    r2 = Fraction(1) if syy == 0 else 1 - ss_res / syy
    return {"slope": str(slope), "intercept": str(intercept), "r2": str(r2), "r2_float": float(r2), "constant": syy == 0}


def efficiency_probe(cfg: ExperimentConfig, ws: Workspace | None = None) -> dict:
    """Token counts, inference time and trainable-parameter counts per example count."""
    ws = ws or Workspace.from_config(cfg)
    report = new_report(cfg, "efficiency", ws)
    seed = cfg.seeds[0]
    d, L = cfg.backbone.model_width, cfg.backbone.num_layers
    table = []
    for h in cfg.horizons:
        A = ws.stage_a(seed, h)
        queries = ws.windows("test", h)[: cfg.efficiency_windows]
        H = np.stack([normalize(w).history for w in queries])
        for n in cfg.efficiency_counts:
            ex = ws.examples(cfg.sampling.seeds[0], h, count=n)
            models = {
                "prompt_icl": fc.ForecastModel(A.backbone, A.embedder, A.head, "prompt_icl", examples=tuple(ex)),
                "vector_icl": fc.ForecastModel(
                    A.backbone, A.embedder, A.head, "vector_icl",
                    adapter=cx.make_adapter(cfg.adapter, d, L if cfg.per_layer_adapter else None),
                    raw_context=ws.context(ex, A),
                ),
            }
            for mode, model in models.items():
                def fn(model=model):
                    tokens = fc.input_token_count(model, cfg.history_len)
                    start = time.perf_counter()
                    fc.forecast(model, H, h)
                    elapsed = time.perf_counter() - start
                    return {"tokens": tokens}, {}, {"seconds_per_window": elapsed / len(H)}

                e = _cell(report, ws, "efficiency", mode, h, seed, fn, variant=f"N={n}")
                table.append({"mode": mode, "N": n, "horizon": h, "status": e["status"], **e["metrics"], **e["info"]})
    lvicl = fc.ForecastModel(
        A.backbone, A.embedder, A.head, "vector_icl",
        adapter=cx.make_adapter(cfg.adapter, d, L if cfg.per_layer_adapter else None),
        raw_context=cx.ContextVector(Tensor(np.zeros((L, d)))),
    )
    params = {
        "theta_i": sum(t.size for t in A.embedder.params().values()),
        "theta_o": sum(t.size for t in A.head.params().values()),
        "theta_a": lvicl.adapter.parameter_count(),
        "lvicl_total": lvicl.trainable_parameter_count(),
        "backbone": ws.backbone.parameter_count(),
    }
    params["full_ft_total"] = params["theta_i"] + params["theta_o"] + params["backbone"]
    fits = {}
    for mode in ("prompt_icl", "vector_icl"):
        rows = [r for r in table if r["mode"] == mode and r["status"] == "ok" and r["horizon"] == cfg.horizons[0]]
        if len({r["N"] for r in rows}) >= 2:
            fits[mode] = linear_fit_exact([r["N"] for r in rows], [r["tokens"] for r in rows])
    report["sections"]["efficiency"] = {
        "table": table,
        "parameters": params,
        "token_fits": fits,
        "plot": [{"x": r["N"], "y": r["tokens"], "series": f"{r['mode']}_tokens"} for r in table if r["status"] == "ok"]
        + [
            {"x": r["N"], "y": r["seconds_per_window"], "series": f"{r['mode']}_seconds"}
            for r in table
            if r["status"] == "ok"
        ],
    }
    return finalize(report, ws)


def mi_analysis(cfg: ExperimentConfig, ws: Workspace | None = None) -> dict:
    """MI between aggregate(N) and the embedded first patch of a disjoint target.

    Per trial a target window is drawn first; examples are then drawn from
    windows sharing no time step with it on the same channel. The target's
    first future patch goes through the Stage-A embedder to a width-d vector,
    which is paired with every layer row of the aggregate; the trial's MI is
    the mean over rows.
    """
    ws = ws or Workspace.from_config(cfg)
    report = new_report(cfg, "mi", ws)
    seed, h = cfg.seeds[0], cfg.horizons[0]
    P = cfg.patch_len
    A = ws.stage_a(seed, h)
    pool = cx.candidate_windows(ws.dataset, cfg.history_len, example_future_len(cfg, h), cfg.sampling.stride)
    reps: dict[int, np.ndarray] = {}

    def rep(i: int) -> np.ndarray:
        if i not in reps:
            ex = cx.example_from_window(pool[i])
            reps[i] = cx.extract_representation(cx.render_example(ex, A.embedder, ws.backbone), ws.backbone).values.numpy()
        return reps[i]

    def row_mean(fn, rows) -> float:
        return math.fsum(fn(r) for r in rows) / len(rows)

    for n in cfg.mi_counts:
        for trial in range(cfg.mi_trials):
            def fn(n=n, trial=trial):
                rng = np.random.default_rng([seed, n, trial])
                t = int(rng.integers(len(pool)))
                tw = pool[t]
                ok = [i for i, w in enumerate(pool) if w.channel != tw.channel or w.end <= tw.start or w.start >= tw.end]
                if len(ok) < n:
                    raise ContractError(f"only {len(ok)} disjoint windows for N={n}")
                picked = sorted(int(i) for i in rng.choice(ok, size=n, replace=False))
                agg = cx.aggregate([cx.RepresentationVector(Tensor(rep(i)), str(i)) for i in picked]).values.numpy()
                target = embed_patches(normalize(tw).target[None, :P], A.embedder).numpy()[0]
                bins = cfg.mi_bins
                return (
                    {
                        "mi": row_mean(lambda r: cx.mutual_info_histogram(r, target, bins), agg),
                        "mi_self": row_mean(lambda r: cx.mutual_info_histogram(r, r, bins), agg),
                        "mi_shuffled": row_mean(lambda r: cx.mutual_info_histogram(r, rng.permutation(r), bins), agg),
                        "pearson": row_mean(lambda r: float(np.corrcoef(r, target)[0, 1]), agg),
                    },
                    {},
                    {"trial": trial, "target": f"{tw.channel}:{tw.start}", "examples": picked},
                )

            _cell(report, ws, "mi", "vector_icl", h, seed, fn, variant=f"N={n}/trial={trial}")

    curve = []
    ok = [e for e in report["entries"] if e["status"] == "ok"]
    for n in cfg.mi_counts:
        vals = [e["metrics"]["mi"] for e in ok if e["variant"].startswith(f"N={n}/")]
        if vals:
            curve.append({"N": n, "mean_mi": math.fsum(vals) / len(vals), "trials": len(vals)})
    rho = float(stats.spearmanr([c["N"] for c in curve], [c["mean_mi"] for c in curve]).statistic) if len(curve) > 1 else None
    report["sections"]["mi"] = {
        "curve": curve,
        "spearman": rho,
        "self_ge_shuffled": all(e["metrics"]["mi_self"] >= e["metrics"]["mi_shuffled"] for e in ok),
        "plot": [{"x": c["N"], "y": c["mean_mi"], "series": "mean_mi"} for c in curve],
    }
    return finalize(report, ws)


PROTOCOLS = {
    "run": run,
    "sensitivity": sensitivity_suite,
    "ablate-adapter": ablation_adapter,
    "ablate-injection": ablation_injection,
    "sweep-fraction": example_fraction_sweep,
    "efficiency": efficiency_probe,
    "mi": mi_analysis,
}
