"""Report aggregation, emission (JSON, CSV, plot data) and verification.

Aggregates use ``math.fsum`` so recomputing them from a JSON round trip of
the entries gives the same floats bit for bit.
"""

from __future__ import annotations

import csv
import json
import math
from collections import defaultdict
from pathlib import Path
from typing import Iterable, Sequence

from ..errors import DataError

TIMING_KEYS = {"wall_time", "seconds_per_window"}


def mean_std(values: Sequence[float]) -> tuple[float, float]:
    """Mean and population standard deviation."""
    n = len(values)
    mean = math.fsum(values) / n
    return mean, math.sqrt(math.fsum((v - mean) ** 2 for v in values) / n)


def variance(values: Sequence[float]) -> float:
    return mean_std(values)[1] ** 2 if values else 0.0


def compute_aggregates(entries: Iterable[dict]) -> list[dict]:
    """Mean/std over seeds of every metric, grouped by ``entry["group"]``."""
    buckets: dict[tuple[str, str], list[float]] = defaultdict(list)
    seeds: dict[tuple[str, str], list[int]] = defaultdict(list)
    for e in entries:
        if e["status"] != "ok":
            continue
        for metric, value in e["metrics"].items():
            buckets[(e["group"], metric)].append(value)
            seeds[(e["group"], metric)].append(e["seed"])
    out = []
    for (group, metric), values in sorted(buckets.items()):
        mean, std = mean_std(values)
        out.append({"group": group, "metric": metric, "n": len(values), "mean": mean, "std": std, "seeds": seeds[(group, metric)]})
    return out


def sensitivity_stats(entries: Iterable[dict], metric: str = "mse") -> dict:
    """Per mode and horizon: variance across orderings and across all conditions.

    ``ordering_variance`` is the population variance over orderings of one
    example set, averaged over (seed, set); ``condition_variance`` is the
    variance over every (set, ordering) condition, averaged over seeds.
    """
    by_set: dict[tuple, list[float]] = defaultdict(list)
    by_seed: dict[tuple, list[float]] = defaultdict(list)
    for e in entries:
        if e["section"] != "sensitivity" or e["status"] != "ok" or e["mode"] == "no_icl":
            continue
        set_label = e["variant"].split("/")[0]
        v = e["metrics"][metric]
        by_set[(e["mode"], e["horizon"], e["seed"], set_label)].append(v)
        by_seed[(e["mode"], e["horizon"], e["seed"])].append(v)
    out: dict[str, dict] = {}
    keys = sorted({(k[0], k[1]) for k in by_seed})
    for mode, h in keys:
        set_vars = [variance(v) for k, v in sorted(by_set.items()) if k[:2] == (mode, h)]
        seed_vals = [v for k, v in sorted(by_seed.items()) if k[:2] == (mode, h)]
        out[f"{mode}/h{h}"] = {
            "mode": mode,
            "horizon": h,
            "ordering_variance": math.fsum(set_vars) / len(set_vars),
            "condition_variance": math.fsum(variance(v) for v in seed_vals) / len(seed_vals),
            f"mean_{metric}": mean_std([x for v in seed_vals for x in v])[0],
        }
    return out


def strip_timing(obj):
    """Copy of a report without wall-clock measurements."""
    if isinstance(obj, dict):
        return {k: strip_timing(v) for k, v in obj.items() if k not in TIMING_KEYS and not k.endswith("_seconds")}
    if isinstance(obj, list):
        filtered = [strip_timing(v) for v in obj]
        return [v for v in filtered if not (isinstance(v, dict) and str(v.get("series", "")).endswith("_seconds"))]
    return obj


def to_json(report: dict) -> str:
    return json.dumps(report, sort_keys=True, indent=2)


def emit_report(report: dict, out_dir, formats: Sequence[str] = ("json", "csv", "plots")) -> list[Path]:
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {out}: {exc}") from exc
    stem = report["kind"]
    written = []
    if "json" in formats:
        p = out / f"{stem}.json"
        p.write_text(to_json(report))
        written.append(p)
    if "csv" in formats:
        p = out / f"{stem}_metrics.csv"
        with open(p, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["cell_id", "section", "mode", "variant", "horizon", "seed", "config_hash", "status", "metric", "value"])
            for e in report["entries"]:
                base = [e["cell_id"], e["section"], e["mode"], e["variant"], e["horizon"], e["seed"], e["config_hash"], e["status"]]
                if e["status"] != "ok":
                    w.writerow(base + ["", ""])
                for metric, value in sorted(e["metrics"].items()):
                    w.writerow(base + [metric, repr(value)])
        written.append(p)
    if "plots" in formats:
        for name, section in sorted(report["sections"].items()):
            if not section.get("plot"):
                continue
            p = out / f"plot_{name}.csv"
            with open(p, "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(["x", "y", "series"])
                for row in section["plot"]:
                    w.writerow([row["x"], repr(row["y"]), row["series"]])
            written.append(p)
    return written


def load_report(path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except FileNotFoundError as exc:
        raise DataError(f"report not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: invalid JSON ({exc})") from exc


def verify_report(report: dict) -> list[str]:
    """Problems found when recomputing a report's derived numbers; empty means it checks out."""
    problems = []
    for e in report.get("entries", []):
        if "seed" not in e or e.get("config_hash") != report.get("config_hash"):
            problems.append(f"{e.get('cell_id')}: missing seed or config hash")
    recomputed = compute_aggregates(report.get("entries", []))
    stored = report.get("aggregates", [])
    if len(recomputed) != len(stored):
        problems.append(f"aggregate count {len(stored)} != recomputed {len(recomputed)}")
    for a, b in zip(stored, recomputed):
        if a != b:
            problems.append(f"aggregate {a.get('group')}/{a.get('metric')} differs from recomputation {b}")
    sens = report.get("sections", {}).get("sensitivity")
    if sens is not None:
        if sens.get("stats") != sensitivity_stats(report["entries"]):
            problems.append("sensitivity statistics differ from recomputation")
        groups: dict[tuple, list[dict]] = defaultdict(list)
        for e in report["entries"]:
            if e["section"] == "sensitivity" and e["mode"] == "vector_icl" and e["status"] == "ok":
                groups[(e["horizon"], e["seed"], e["variant"].split("/")[0])].append(e["metrics"])
        for key, metrics in groups.items():
            if any(m != metrics[0] for m in metrics):
                problems.append(f"vector_icl metrics differ across orderings for {key}")
    return problems
