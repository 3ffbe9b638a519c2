"""Artifact files, provenance hashes, static plots and the consolidated report."""

from __future__ import annotations

import csv
import hashlib
import json
import math
import os
import tempfile
from contextlib import contextmanager
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .evaluation import CellResult, EvalResult, ProtocolResult, SplitPlan
from .importance import AggregatedScores, FeatureMultiset, LLDRankRow, SweepResult

SCHEMA_VERSION = 1

RESULTS_FILE = "results.json"
IMPORTANCE_FILE = "importances.csv"
RUN_MANIFEST = "run_manifest.json"
SWEEP_FILES = {"aggregated": "sweeps_aggregated.csv", "individual": "sweeps_individual.csv"}
AGGREGATED_FILE = "aggregated_scores.csv"
MULTISET_FILE = "multiset.csv"
RANKING_FILE = "lld_ranking.csv"
RANK_MANIFEST = "rank_manifest.json"
UAR_DELTA_PLOT = "uar_delta.svg"
LLD_PLOT = "lld_occurrence.svg"
REPORT_FILE = "report.json"
SUMMARY_FILE = "report.txt"

SWEEP_COLUMNS = ["model", "dataset", "threshold_pct", "uar", "uar_delta", "baseline_uar", "stopped"]
RANKING_COLUMNS = ["rank", "lld", "count", "normalized", "cumulative", "in_cutoff"]


class ArtifactError(RuntimeError):
    """An upstream artifact is missing or empty."""


class ProvenanceError(ValueError):
    """An artifact does not match the hash recorded when it was produced."""


# ---------------------------------------------------------------------------
# hashing and atomic files
# ---------------------------------------------------------------------------

def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=True)


def stable_hash(obj) -> str:
    return hashlib.sha256(canonical_json(obj).encode("utf-8")).hexdigest()


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 16), b""):
            h.update(block)
    return h.hexdigest()


def dump_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=2, ensure_ascii=True) + "\n"


_UMASK = os.umask(0)
os.umask(_UMASK)


@contextmanager
def atomic_path(path):
    """Yield a temporary path next to `path`; it replaces `path` only if the block succeeds."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", suffix=".tmp", dir=path.parent)
    os.close(fd)
    try:
        yield tmp
        os.chmod(tmp, 0o666 & ~_UMASK)   # mkstemp creates 0600
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str) -> None:
    with atomic_path(path) as tmp:
        with open(tmp, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)


def require(path) -> Path:
    path = Path(path)
    if not path.is_file():
        raise ArtifactError(f"missing artifact: {path}")
    return path


def read_json(path) -> dict:
    with open(require(path), encoding="utf-8") as fh:
        return json.load(fh)


def verify_hashes(directory, recorded: Mapping[str, str], what: str) -> None:
    """Compare files in `directory` with the sha256 values recorded by the producing step."""
    for name, digest in sorted(recorded.items()):
        actual = sha256_file(require(Path(directory) / name))
        if actual != digest:
            raise ProvenanceError(f"{name} does not match the hash recorded in {what}; "
                                  "it was modified after it was written. Re-run the producing step.")


def _num(v) -> str:
    return "" if v is None else repr(float(v))


def _opt_float(s: str):
    return None if s == "" else float(s)


# ---------------------------------------------------------------------------
# results file
# ---------------------------------------------------------------------------

def _cell_json(cell: CellResult) -> dict:
    out = {"model": cell.family, "run": cell.run, "ok": cell.ok, "error": cell.error,
           "hyperparameters": cell.best_config, "selection_mode": cell.mode,
           "uar": None, "per_emotion_recall": None, "confusion": None, "importance_ref": None}
    if cell.eval is not None:
        out.update(cell.eval.to_dict())
    if cell.cv is not None:
        out["cv_mean_uar"] = cell.cv.mean_score
    if cell.importance is not None:
        out["importance_ref"] = {"file": IMPORTANCE_FILE, "model": cell.family,
                                 "dataset": cell.dataset, "run": cell.run}
    return out


def results_document(protocols: Sequence[ProtocolResult], provenance: dict) -> dict:
    datasets = {}
    for p in protocols:
        datasets[p.dataset] = {
            "n_features": len(p.feature_names),
            "feature_names_sha256": stable_hash(list(p.feature_names)),
            "plans": [plan.to_dict() for plan in p.plans],
            "cells": [_cell_json(c) for c in p.cells],
        }
    return {"schema_version": SCHEMA_VERSION, "provenance": provenance, "datasets": datasets}


def protocols_from_results(doc: dict, feature_names: Mapping[str, Sequence[str]]) -> list[ProtocolResult]:
    """Rebuild protocol results (baselines, chosen configs, splits) from a results document."""
    out = []
    for name, d in doc["datasets"].items():
        names = tuple(feature_names[name])
        if stable_hash(list(names)) != d["feature_names_sha256"]:
            raise ProvenanceError(f"{name}: feature columns differ from those used by `run`")
        plans = [SplitPlan(tuple(p["train_speakers"]), tuple(p["test_speakers"]), int(p["run"])) for p in d["plans"]]
        cells = []
        for c in d["cells"]:
            ev = None
            if c["uar"] is not None:
                conf = c["confusion"]
                ev = EvalResult(float(c["uar"]), dict(c["per_emotion_recall"]),
                                np.asarray(conf["counts"], dtype=np.int64), tuple(conf["labels"]))
            cells.append(CellResult(name, c["model"], int(c["run"]), eval=ev,
                                    best_config=c["hyperparameters"], mode=c["selection_mode"], error=c["error"]))
        out.append(ProtocolResult(name, names, plans, cells))
    return out


def uar_table(doc: dict) -> dict:
    """Mean and population standard deviation of test UAR over runs, per dataset and model."""
    table: dict = {}
    for name, d in doc["datasets"].items():
        per: dict = {}
        for c in d["cells"]:
            entry = per.setdefault(c["model"], {"runs": [], "n_failed": 0})
            if c["ok"]:
                entry["runs"].append(c["uar"])
            else:
                entry["n_failed"] += 1
        for entry in per.values():
            vals = entry["runs"]
            entry["mean"] = float(np.mean(vals)) if vals else None
            entry["std"] = float(np.std(vals, ddof=0)) if vals else None
        table[name] = per
    return table


# ---------------------------------------------------------------------------
# ranking outputs
# ---------------------------------------------------------------------------

def write_sweeps_csv(path, sweeps: Iterable[SweepResult]) -> None:
    """One row per evaluated threshold; `stopped` is 1 on the row where the baseline was first reached."""
    with atomic_path(path) as tmp, open(tmp, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SWEEP_COLUMNS)
        for s in sweeps:
            for p in s.points:
                stopped = int(s.pt is not None and math.isclose(p.threshold_pct, s.pt))
                w.writerow([s.model, s.dataset, repr(float(p.threshold_pct)), _num(p.uar), _num(p.uar_delta),
                            repr(float(s.baseline_uar)), stopped])


def read_sweeps_csv(path) -> list[dict]:
    with open(require(path), newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != SWEEP_COLUMNS:
            raise ArtifactError(f"{path}: unexpected sweep CSV header")
        return [{"model": r["model"], "dataset": r["dataset"], "threshold_pct": float(r["threshold_pct"]),
                 "uar": _opt_float(r["uar"]), "uar_delta": _opt_float(r["uar_delta"]),
                 "baseline_uar": float(r["baseline_uar"]), "stopped": r["stopped"] == "1"} for r in reader]


def write_aggregated_csv(path, orderings: Mapping[str, AggregatedScores]) -> None:
    with atomic_path(path) as tmp, open(tmp, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["dataset", "rank", "feature_name", "score"])
        for name, agg in orderings.items():
            for rank, i in enumerate(agg.order, start=1):
                w.writerow([name, rank, agg.feature_names[i], repr(float(agg.scores[i]))])


def write_multiset_csv(path, multiset: FeatureMultiset) -> None:
    """Distinct multiset elements with multiplicity, most frequent first."""
    from .importance import lld_of

    items = sorted(multiset.elements.items(), key=lambda kv: (-kv[1], kv[0]))
    with atomic_path(path) as tmp, open(tmp, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["feature_name", "lld", "count"])
        for name, count in items:
            w.writerow([name, lld_of(name), count])


def read_multiset_csv(path) -> dict:
    with open(require(path), newline="", encoding="utf-8") as fh:
        return {r["feature_name"]: int(r["count"]) for r in csv.DictReader(fh)}


def write_ranking_csv(path, rows: Sequence[LLDRankRow]) -> None:
    with atomic_path(path) as tmp, open(tmp, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(RANKING_COLUMNS)
        for r in rows:
            w.writerow([r.rank, r.lld, r.count, repr(r.normalized), repr(r.cumulative), int(r.in_cutoff)])


def read_ranking_csv(path) -> list[dict]:
    with open(require(path), newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != RANKING_COLUMNS:
            raise ArtifactError(f"{path}: unexpected LLD ranking header")
        return [{"rank": int(r["rank"]), "lld": r["lld"], "count": int(r["count"]),
                 "normalized": float(r["normalized"]), "cumulative": float(r["cumulative"]),
                 "in_cutoff": r["in_cutoff"] == "1"} for r in reader]


# ---------------------------------------------------------------------------
# plot and report data
# ---------------------------------------------------------------------------

def _pts(rows: Sequence[dict]) -> dict:
    pts: dict = {}
    for r in rows:
        key = (r["dataset"], r["model"])
        pts.setdefault(key, None)
        if r["stopped"]:
            pts[key] = r["threshold_pct"]
    return pts


def uar_delta_data(rows_by_ordering: Mapping[str, Sequence[dict]], threshold_pct: float) -> dict:
    """UAR-delta curves and at-par counts, comparing orderings over the models swept under both."""
    pts = {kind: _pts(rows) for kind, rows in rows_by_ordering.items()}
    kinds = list(rows_by_ordering)
    datasets = list(dict.fromkeys(r["dataset"] for rows in rows_by_ordering.values() for r in rows))
    out: dict = {"threshold_pct": threshold_pct, "datasets": {}}
    totals = {kind: 0 for kind in kinds}
    for ds in datasets:
        model_sets = [{m for (d, m) in pts[kind] if d == ds} for kind in kinds]
        shared = sorted(set.intersection(*model_sets)) if model_sets else []
        entry: dict = {"models": shared}
        for kind in kinds:
            by_t: dict = {}
            for r in rows_by_ordering[kind]:
                if r["dataset"] == ds and r["model"] in shared and r["uar_delta"] is not None:
                    by_t.setdefault(r["threshold_pct"], []).append(r["uar_delta"])
            curve = [[t, float(np.mean(v)), len(v)] for t, v in sorted(by_t.items())]
            cell_pts = {m: pts[kind][(ds, m)] for m in shared}
            at_par = sum(1 for p in cell_pts.values() if p is not None and p <= threshold_pct + 1e-12)
            totals[kind] += at_par
            entry[kind] = {"curve": curve, "pt": cell_pts, "at_par": at_par,
                           "first_threshold_mean_delta": curve[0][1] if curve else None}
        out["datasets"][ds] = entry
    out["at_par_totals"] = totals
    agg = pts.get("aggregated", {})
    out["all_par_aggregated"] = bool(agg) and all(p is not None and p <= threshold_pct + 1e-12 for p in agg.values())
    out["aggregated_pt"] = {f"{d}/{m}": p for (d, m), p in sorted(agg.items())}
    return out


def lld_ranking_data(ranking_rows: Sequence[dict], multiset_counts: Mapping[str, int]) -> dict:
    return {
        "rows": list(ranking_rows),
        "cutoff_llds": [r["lld"] for r in ranking_rows if r["in_cutoff"]],
        "multiset_size": int(sum(multiset_counts.values())),
        "multiset_distinct": len(multiset_counts),
    }


# ---------------------------------------------------------------------------
# plots
# ---------------------------------------------------------------------------

_SVG_RC = {"svg.hashsalt": "sercues", "svg.fonttype": "path"}


def _save_svg(fig, path) -> None:
    with atomic_path(path) as tmp:
        fig.savefig(tmp, format="svg", metadata={"Date": None})


def plot_uar_deltas(deltas: dict, path) -> None:
    """Mean UAR delta against threshold: solid lines for the aggregated ordering, dashed for per-model."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    with matplotlib.rc_context(_SVG_RC):
        fig, ax = plt.subplots(figsize=(7, 4))
        colors = plt.rcParams["axes.prop_cycle"].by_key()["color"]
        for i, (ds, entry) in enumerate(deltas["datasets"].items()):
            for kind, style in (("aggregated", "-"), ("individual", "--")):
                curve = entry.get(kind, {}).get("curve", [])
                if curve:
                    xs, ys = [c[0] for c in curve], [c[1] for c in curve]
                    ax.plot(xs, ys, style, marker=".", color=colors[i % len(colors)], label=f"{ds} ({kind})")
        ax.axhline(0.0, color="grey", linewidth=0.8)
        ax.set_xlabel("top-ranked features (%)")
        ax.set_ylabel("mean UAR difference to all features")
        ax.legend(fontsize="small")
        fig.tight_layout()
        _save_svg(fig, path)
        plt.close(fig)


def plot_lld_occurrence(rows: Sequence[dict], path) -> None:
    """Normalized LLD occurrence in rank order, with a line after the last LLD inside the cutoff."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    with matplotlib.rc_context(_SVG_RC):
        fig, ax = plt.subplots(figsize=(max(6, 0.35 * len(rows)), 4))
        xs = np.arange(len(rows))
        ax.bar(xs, [r["normalized"] for r in rows],
               color=["tab:blue" if r["in_cutoff"] else "tab:grey" for r in rows])
        n_cut = sum(r["in_cutoff"] for r in rows)
        if 0 < n_cut < len(rows):
            ax.axvline(n_cut - 0.5, color="tab:red", linestyle="--", label="50% cutoff")
            ax.legend(fontsize="small")
        ax.set_xticks(xs)
        ax.set_xticklabels([r["lld"] for r in rows], rotation=90, fontsize="small")
        ax.set_ylabel("normalized occurrence")
        fig.tight_layout()
        _save_svg(fig, path)
        plt.close(fig)


# ---------------------------------------------------------------------------
# report
# ---------------------------------------------------------------------------

def build_report(out_dir, run_manifest: dict, rank_manifest: dict) -> dict:
    """Assemble the report purely from the artifact files in `out_dir`."""
    out_dir = Path(out_dir)
    results = read_json(out_dir / RESULTS_FILE)
    rows = {kind: read_sweeps_csv(out_dir / name) for kind, name in SWEEP_FILES.items()}
    threshold = float(rank_manifest["report_threshold_pct"])
    deltas = uar_delta_data(rows, threshold)
    ranking = read_ranking_csv(out_dir / RANKING_FILE)
    llds = lld_ranking_data(ranking, read_multiset_csv(out_dir / MULTISET_FILE))
    artifacts = dict(run_manifest["artifacts"])
    artifacts.update(rank_manifest["artifacts"])
    report = {
        "schema_version": SCHEMA_VERSION,
        "provenance": {
            "config_hash": stable_hash({"protocol": run_manifest["protocol_hash"],
                                        "ranking": rank_manifest["ranking_hash"]}),
            "protocol_hash": run_manifest["protocol_hash"],
            "ranking_hash": rank_manifest["ranking_hash"],
            "seed": run_manifest["seed"],
            "versions": run_manifest["versions"],
            "artifacts": dict(sorted(artifacts.items())),
        },
        "uar_table": uar_table(results),
        "uar_deltas": deltas,
        "lld_ranking": llds,
        "all_par_at_threshold": deltas["all_par_aggregated"],
        "report_threshold_pct": threshold,
    }
    report["summary"] = summary_text(report)
    return report


def _fmt(v, spec=".3f") -> str:
    return "n/a" if v is None else format(v, spec)


def summary_text(report: dict) -> str:
    lines = [f"seed {report['provenance']['seed']}, config {report['provenance']['config_hash'][:12]}", ""]
    lines.append("Test UAR (mean +/- std over runs)")
    for ds, per in report["uar_table"].items():
        for model, e in per.items():
            failed = f"  ({e['n_failed']} failed)" if e["n_failed"] else ""
            lines.append(f"  {ds:<20} {model:<22} {_fmt(e['mean'])} +/- {_fmt(e['std'])}{failed}")
    deltas = report["uar_deltas"]
    t = report["report_threshold_pct"]
    lines += ["", f"Cells at par by {t:g}% of features"]
    for kind, n in deltas["at_par_totals"].items():
        lines.append(f"  {kind:<11} {n}")
    lines.append(f"  aggregated ordering at par everywhere: {'yes' if report['all_par_at_threshold'] else 'no'}")
    llds = report["lld_ranking"]
    lines += ["", f"LLDs covering half of the multiset ({llds['multiset_size']} features, "
                  f"{llds['multiset_distinct']} distinct):"]
    for r in llds["rows"]:
        if r["in_cutoff"]:
            lines.append(f"  {r['rank']:>2}. {r['lld']} ({r['normalized']:.3f})")
    return "\n".join(lines) + "\n"
