import json
from pathlib import Path

import numpy as np
import pytest

from lvicl import context as cx
from lvicl.errors import ConfigError
from lvicl.harness import cli
from lvicl.harness.config import ExperimentConfig, apply_overrides, layer_mask, load_config
from lvicl.harness.report import compute_aggregates, emit_report, load_report, strip_timing, to_json, verify_report
from lvicl.harness.runner import (
    Workspace,
    efficiency_probe,
    example_fraction_sweep,
    linear_fit_exact,
    mi_analysis,
    orderings,
    run,
    sensitivity_suite,
)

CONFIG_DIR = Path(__file__).resolve().parents[1] / "configs"


def tiny(**changes) -> ExperimentConfig:
    d = {
        "dataset": {"synthetic_length": 400, "synthetic_vars": 1, "synthetic_period": 4},
        "history_len": 16,
        "horizons": [8],
        "patch_len": 4,
        "backbone": {"num_layers": 2, "model_width": 8, "num_heads": 2, "ff_width": 16, "max_sequence_length": 128},
        "seeds": [1],
        "sampling": {"count": 4, "prompt_count": 2, "seeds": [0, 1], "orderings": 2},
        "train": {"lr": 1e-3, "max_epochs": 1, "batch_size": 16},
        "train_stride": 8,
        "mi_counts": [1, 2],
        "mi_trials": 2,
        "mi_bins": 4,
        "efficiency_counts": [1, 2, 3],
        "efficiency_windows": 2,
        "fraction_grid": [0.0, 0.05],
    }
    d.update(changes)
    return ExperimentConfig.from_dict(d)


@pytest.fixture(scope="module")
def ws():
    return Workspace.from_config(tiny())


def test_config_defaults_and_validation():
    cfg = ExperimentConfig()
    assert cfg.seeds == [1, 2, 3, 4, 5]
    assert cfg.train.lr == 3e-5 and cfg.train.max_epochs == 40 and cfg.train.patience == 3
    with pytest.raises(ConfigError):
        ExperimentConfig(seeds=[])
    with pytest.raises(ConfigError):
        ExperimentConfig(layer_mask="odd_layers")
    with pytest.raises(ConfigError):
        ExperimentConfig(modes=["few_shot"])
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict({"sampling": {"bogus": 1}})
    with pytest.raises(ConfigError):
        ExperimentConfig(history_len=30, patch_len=8)


def test_config_file_and_overrides(tmp_path):
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"seeds": [7], "train": {"lr": 1e-4}}))
    cfg = load_config(path)
    assert cfg.seeds == [7] and cfg.train.lr == 1e-4
    cfg = apply_overrides(cfg, seeds=[1, 2], modes=["no_icl"], horizons=[48], output_dir=str(tmp_path / "o"))
    assert cfg.seeds == [1, 2] and cfg.modes == ["no_icl"] and cfg.horizons == [48]
    assert cfg.hash() == apply_overrides(cfg, output_dir="elsewhere").hash()
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.json")
    (tmp_path / "bad.json").write_text("{not json")
    with pytest.raises(ConfigError):
        load_config(tmp_path / "bad.json")


def test_shipped_configs_load():
    acc = load_config(CONFIG_DIR / "acceptance.json")
    assert (acc.history_len, acc.horizons, acc.patch_len) == (96, [24], 8)
    assert (acc.backbone.num_layers, acc.backbone.model_width) == (4, 64)
    assert acc.seeds == [1, 2, 3, 4, 5]
    big = load_config(CONFIG_DIR / "prompt100.json")
    assert big.sampling.prompt_count == 100


def test_layer_mask_presets():
    assert layer_mask("all", 4) == (True,) * 4
    assert layer_mask("first_quarter", 4) == (True, False, False, False)
    assert layer_mask("last_quarter", 4) == (False, False, False, True)
    assert layer_mask("middle_quarter", 4) == (False, True, False, False)
    assert layer_mask("first_quarter", 8) == (True, True) + (False,) * 6
    assert layer_mask("middle_quarter", 8) == (False,) * 3 + (True, True) + (False,) * 3
    assert sum(layer_mask("last_quarter", 6)) == 1 and layer_mask("last_quarter", 6)[-1]
    assert layer_mask("first_quarter", 2) == (True, False)


def test_orderings_are_distinct_permutations():
    orders = orderings(4, 3, seed=0)
    assert orders[0] == (0, 1, 2, 3)
    assert len(set(orders)) == 3
    assert all(sorted(o) == [0, 1, 2, 3] for o in orders)
    assert orderings(4, 3, 0) == orders


def test_linear_fit_exact():
    fit = linear_fit_exact([1, 2, 4, 8], [36, 60, 108, 204])
    assert (fit["slope"], fit["intercept"], fit["r2"]) == ("24", "12", "1")
    assert linear_fit_exact([1, 2, 3], [5, 5, 5])["constant"]
    assert linear_fit_exact([0, 1, 2], [0, 2, 1])["r2_float"] < 1


def test_run_five_seeds_gives_five_entries(ws):
    cfg = tiny(seeds=[1, 2, 3, 4, 5], modes=["no_icl"])
    report = run(cfg, Workspace.from_config(cfg))
    assert len(report["entries"]) == 5
    assert sorted(e["seed"] for e in report["entries"]) == [1, 2, 3, 4, 5]
    agg = [a for a in report["aggregates"] if a["metric"] == "mse"]
    assert agg[0]["n"] == 5 and agg[0]["seeds"] == [1, 2, 3, 4, 5]
    assert all(e["config_hash"] == report["config_hash"] for e in report["entries"])


def test_no_icl_only_run_skips_context(monkeypatch):
    def boom(*a, **k):
        raise AssertionError("context built for a no_icl run")

    monkeypatch.setattr(cx, "extract_representations", boom)
    cfg = tiny(modes=["no_icl"])
    report = run(cfg, Workspace.from_config(cfg))
    assert all(e["status"] == "ok" for e in report["entries"])


def test_run_is_deterministic_excluding_timing():
    cfg = tiny(modes=["no_icl", "vector_icl", "prompt_icl"])
    a = run(cfg, Workspace.from_config(cfg))
    b = run(cfg, Workspace.from_config(cfg))
    assert to_json(strip_timing(a)) == to_json(strip_timing(b))
    assert not verify_report(a)


def test_failed_cell_recorded_and_run_continues():
    cfg = tiny(modes=["no_icl", "vector_icl"], sampling={"count": 10_000, "prompt_count": 2, "seeds": [0, 1], "orderings": 2})
    report = run(cfg, Workspace.from_config(cfg))
    status = {e["mode"]: e for e in report["entries"]}
    assert status["no_icl"]["status"] == "ok"
    assert status["vector_icl"]["status"] == "error" and "DataError" in status["vector_icl"]["reason"]


def test_sensitivity_vector_equal_across_orderings():
    cfg = tiny(modes=["no_icl", "prompt_icl", "vector_icl"])
    report = sensitivity_suite(cfg, Workspace.from_config(cfg))
    vec = [e for e in report["entries"] if e["mode"] == "vector_icl"]
    by_set = {}
    for e in vec:
        by_set.setdefault(e["variant"].split("/")[0], []).append(e["metrics"])
    assert all(len(v) == 2 and v[0] == v[1] for v in by_set.values())
    stats = report["sections"]["sensitivity"]["stats"]
    assert stats["vector_icl/h8"]["ordering_variance"] == 0.0
    assert not verify_report(report)


def test_fraction_zero_reproduces_no_icl(ws):
    report = example_fraction_sweep(ws.cfg, ws)
    zero = [e for e in report["entries"] if e["variant"] == "fraction=0.0"]
    assert zero and zero[0]["status"] == "ok" and zero[0]["info"]["equals_no_icl"]
    test, _ = ws.score(ws.stage_a(1, 8), 8)
    assert zero[0]["metrics"] == test


def test_efficiency_probe_counts(ws):
    section = efficiency_probe(ws.cfg, ws)["sections"]["efficiency"]
    fits = section["token_fits"]
    assert fits["prompt_icl"]["r2"] == "1"
    assert fits["prompt_icl"]["slope"] == str(cx.example_token_count(16, 8, 4))
    assert fits["vector_icl"]["constant"]
    p = section["parameters"]
    assert p["lvicl_total"] == p["theta_i"] + p["theta_o"] + p["theta_a"]
    assert p["theta_a"] == 8 * 8 + 8


def test_mi_analysis_structure(ws):
    report = mi_analysis(ws.cfg, ws)
    section = report["sections"]["mi"]
    assert [c["N"] for c in section["curve"]] == [1, 2]
    assert section["self_ge_shuffled"]
    pool = cx.candidate_windows(ws.dataset, 16, 8)
    for e in report["entries"]:
        ch, start = map(int, e["info"]["target"].split(":"))
        for i in e["info"]["examples"]:
            w = pool[i]
            assert w.channel != ch or w.end <= start or w.start >= start + 24


def test_emit_and_verify_round_trip(tmp_path, ws):
    report = efficiency_probe(ws.cfg, ws)
    paths = emit_report(report, tmp_path)
    names = {p.name for p in paths}
    assert {"efficiency.json", "efficiency_metrics.csv", "plot_efficiency.csv"} <= names
    loaded = load_report(tmp_path / "efficiency.json")
    assert not verify_report(loaded)
    assert compute_aggregates(loaded["entries"]) == loaded["aggregates"]
    header = (tmp_path / "plot_efficiency.csv").read_text().splitlines()[0]
    assert header == "x,y,series"


def test_verify_detects_tampering(tmp_path, ws):
    report = json.loads(to_json(efficiency_probe(ws.cfg, ws)))
    report["aggregates"][0]["mean"] += 1e-12
    assert verify_report(report)
    report = json.loads(to_json(efficiency_probe(ws.cfg, ws)))
    report["entries"][0]["config_hash"] = "0" * 16
    assert verify_report(report)


def test_cli_gen_synthetic_and_exit_codes(tmp_path, capsys):
    out = tmp_path / "s.csv"
    assert cli.main(["gen-synthetic", "--out", str(out), "--length", "50", "--vars", "2"]) == 0
    assert out.read_text().count("\n") == 51
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"seeds": []}))
    assert cli.main(["run", "--config", str(bad)]) == 1
    assert cli.main(["verify-report", str(tmp_path / "nope.json")]) == 2
    broken = tmp_path / "broken.csv"
    broken.write_text("a\n1\nx\n")
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps(tiny().to_dict()))
    assert cli.main(["run", "--config", str(cfg), "--dataset", str(broken)]) == 2


def test_cli_run_and_verify(tmp_path, monkeypatch, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps(tiny().to_dict()))
    monkeypatch.setenv("LVICL_OUT_DIR", str(tmp_path / "env_out"))
    assert cli.main(["run", "--config", str(cfg), "--mode", "no_icl", "--seed-list", "1,2"]) == 0
    report_path = tmp_path / "env_out" / "run.json"
    assert report_path.exists()
    assert cli.main(["verify-report", str(report_path)]) == 0
    assert "report verified" in capsys.readouterr().out
    data = json.loads(report_path.read_text())
    data["aggregates"][0]["mean"] = 123.0
    report_path.write_text(json.dumps(data))
    assert cli.main(["verify-report", str(report_path)]) == 3


def test_cli_all_cells_failing_exits_numerical(tmp_path):
    d = tiny().to_dict()
    d["modes"] = ["vector_icl"]
    d["sampling"]["count"] = 10_000
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps(d))
    assert cli.main(["run", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 3
