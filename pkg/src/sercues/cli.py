"""Command-line entry point: extract, run, rank, report and synth.

Every command reads the same JSON config (see README) and writes into its
output directory. Flags override config fields. Exit codes: 0 success,
2 input error, 3 missing artifact, 4 total run failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import platform
import sys
from dataclasses import asdict, dataclass, field, fields
from importlib import metadata
from pathlib import Path

import numpy as np

from . import __version__, classifiers
from . import report as rp
from .audio_features import AudioError, FrameConfig, extract_features, feature_names, read_feature_csv, read_wav, write_feature_csv
from .data_model import FeatureMatrix, ManifestError, SyntheticSpec, generate_synthetic, load_manifest, write_manifest
from .importance import AggregationError, ImportanceTensor, threshold_grid
from .pipeline import DatasetData, importance_tensor, rank_features, run_all

log = logging.getLogger("sercues")

EXIT_OK, EXIT_INPUT, EXIT_MISSING, EXIT_FAILED = 0, 2, 3, 4


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

PROTOCOL_KEYS = ("datasets", "models", "n_runs", "seed", "grid_preset", "features", "large_dataset_threshold")
RANKING_KEYS = ("sweep", "fast_sweep", "full_curve", "clamp_pt", "importance_run", "individual_orderings",
                "report_threshold")


@dataclass
class RunConfig:
    datasets: list = field(default_factory=list)
    models: list = field(default_factory=lambda: list(classifiers.FAMILIES))
    n_runs: int = 3
    seed: int | None = None
    grid_preset: str = "full"
    features: dict = field(default_factory=lambda: {"window_length": 0.025, "hop_length": 0.010,
                                                    "window_function": "hann", "sample_rate": None})
    large_dataset_threshold: int = 5000
    sweep: dict = field(default_factory=lambda: {"lo": 0.5, "hi": 20.0, "step": 0.5})
    fast_sweep: bool = False
    full_curve: bool = False
    clamp_pt: bool = False
    importance_run: int | None = None
    individual_orderings: bool = True
    report_threshold: float = 6.0
    tabular_only: bool = False
    output_dir: str = "out"
    base_dir: str = "."

    @classmethod
    def from_dict(cls, d: dict, base_dir=".") -> "RunConfig":
        known = {f.name for f in fields(cls)} - {"base_dir"}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown config fields: {', '.join(unknown)}")
        cfg = cls(**d)
        cfg.base_dir = str(base_dir)
        return cfg

    def validate(self) -> None:
        if not self.datasets:
            raise ConfigError("config lists no datasets")
        names = [dataset_name(d) for d in self.datasets]
        if len(set(names)) != len(names):
            raise ConfigError("dataset names must be unique")
        bad = [m for m in self.models if m not in classifiers.FAMILIES]
        if bad:
            raise ConfigError(f"unknown model families {bad}; choose from {list(classifiers.FAMILIES)}")
        if not any(m in classifiers.IMPORTANCE_FAMILIES for m in self.models):
            raise ConfigError("at least one importance-bearing model is required")
        if self.n_runs < 1:
            raise ConfigError("n_runs must be >= 1")
        if not isinstance(self.grid_preset, dict) and self.grid_preset not in classifiers.GRID_PRESETS:
            raise ConfigError(f"grid_preset must be one of {sorted(classifiers.GRID_PRESETS)}")
        try:
            threshold_grid(**self.sweep)
            FrameConfig(self.features.get("window_length", 0.025), self.features.get("hop_length", 0.010),
                        self.features.get("window_function", "hann"))
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc

    def thresholds(self) -> list[float]:
        return threshold_grid(**self.sweep)

    def frame_config(self) -> FrameConfig:
        f = self.features
        return FrameConfig(f.get("window_length", 0.025), f.get("hop_length", 0.010), f.get("window_function", "hann"))

    def protocol_hash(self) -> str:
        d = asdict(self)
        return rp.stable_hash({k: d[k] for k in PROTOCOL_KEYS})

    def ranking_hash(self) -> str:
        d = asdict(self)
        return rp.stable_hash({k: d[k] for k in RANKING_KEYS})

    def path(self, p) -> Path:
        p = Path(p)
        return p if p.is_absolute() else Path(self.base_dir) / p

    @property
    def out(self) -> Path:
        return self.path(self.output_dir)


def dataset_name(entry: dict) -> str:
    if "name" in entry:
        return str(entry["name"])
    if "synthetic" in entry:
        return str(entry["synthetic"].get("name", "synthetic"))
    if "manifest" in entry:
        return Path(entry["manifest"]).stem
    raise ConfigError(f"dataset entry needs a manifest or a synthetic spec: {entry}")


def _features_path(cfg: RunConfig, entry: dict) -> Path:
    if "features" in entry:
        return cfg.path(entry["features"])
    return cfg.out / "features" / f"{dataset_name(entry)}.csv"


def load_dataset(cfg: RunConfig, entry: dict) -> DatasetData:
    name = dataset_name(entry)
    if "synthetic" in entry:
        spec_d = dict(entry["synthetic"], name=name)
        try:
            return DatasetData.synthetic(SyntheticSpec.from_dict(spec_d))
        except TypeError as exc:
            raise ConfigError(f"{name}: bad synthetic spec: {exc}") from exc
    manifest_path = cfg.path(entry["manifest"])
    if not manifest_path.is_file():
        raise ConfigError(f"{name}: manifest not found: {manifest_path}")
    manifest = load_manifest(manifest_path, dataset_name=name, mapping_path=entry.get("mapping"))
    feats = rp.require(_features_path(cfg, entry))
    ids, names, values = read_feature_csv(feats)
    return DatasetData(name, manifest, FeatureMatrix(ids, names, values).aligned_to(manifest))


def _input_hashes(cfg: RunConfig) -> dict:
    out = {}
    for entry in cfg.datasets:
        if "synthetic" in entry:
            continue
        out[dataset_name(entry)] = {"manifest_sha256": rp.sha256_file(cfg.path(entry["manifest"])),
                                    "features_sha256": rp.sha256_file(_features_path(cfg, entry))}
    return out


def _versions() -> dict:
    out = {"python": platform.python_version(), "sercues": __version__}
    for dist in ("numpy", "scipy", "scikit-learn", "lightgbm"):
        try:
            out[dist] = metadata.version(dist)
        except metadata.PackageNotFoundError:
            out[dist] = None
    return out


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def _extract_one(path, expected_rate, frame_cfg):
    try:
        return extract_features(read_wav(path, expected_rate), frame_cfg).values, None
    except (AudioError, OSError, ValueError) as exc:
        return None, f"{path}: {exc}"


def cmd_extract(cfg: RunConfig, jobs: int = 1) -> int:
    """One feature CSV per manifest dataset; a dataset with any unreadable file gets no CSV."""
    status = EXIT_OK
    frame_cfg = cfg.frame_config()
    rate = cfg.features.get("sample_rate")
    names = feature_names()
    for entry in cfg.datasets:
        if "synthetic" in entry:
            continue
        name = dataset_name(entry)
        manifest_path = cfg.path(entry["manifest"])
        if not manifest_path.is_file():
            raise ConfigError(f"{name}: manifest not found: {manifest_path}")
        manifest = load_manifest(manifest_path, dataset_name=name, mapping_path=entry.get("mapping"))
        paths = [e.audio_path if Path(e.audio_path).is_absolute() else manifest_path.parent / e.audio_path
                 for e in manifest.entries]
        if jobs > 1:
            from joblib import Parallel, delayed

            results = Parallel(n_jobs=jobs)(delayed(_extract_one)(p, rate, frame_cfg) for p in paths)
        else:
            results = [_extract_one(p, rate, frame_cfg) for p in paths]
        errors = [err for _, err in results if err is not None]
        if errors:
            for err in errors:
                print(f"error: {err}", file=sys.stderr)
            print(f"{name}: {len(errors)} of {len(paths)} files failed; no feature file written", file=sys.stderr)
            status = EXIT_INPUT
            continue
        target = _features_path(cfg, entry)
        with rp.atomic_path(target) as tmp:
            write_feature_csv(tmp, manifest.utterance_ids, names, np.vstack([v for v, _ in results]))
        print(f"{name}: {len(paths)} utterances -> {target}")
    return status


def cmd_run(cfg: RunConfig, jobs: int = 1) -> int:
    datasets = [load_dataset(cfg, e) for e in cfg.datasets]
    protocols = run_all(datasets, cfg.models, cfg.n_runs, cfg.seed, grid_preset=cfg.grid_preset, jobs=jobs,
                        large_dataset_threshold=cfg.large_dataset_threshold)
    out = cfg.out
    provenance = {"protocol_hash": cfg.protocol_hash(), "seed": cfg.seed, "inputs": _input_hashes(cfg)}
    rp.atomic_write_text(out / rp.RESULTS_FILE, rp.dump_json(rp.results_document(protocols, provenance)))
    tensor = importance_tensor(protocols)
    with rp.atomic_path(out / rp.IMPORTANCE_FILE) as tmp:
        tensor.write_csv(tmp)
    manifest = {
        "schema_version": rp.SCHEMA_VERSION,
        "protocol_hash": cfg.protocol_hash(),
        "seed": cfg.seed,
        "versions": _versions(),
        "artifacts": {name: rp.sha256_file(out / name) for name in (rp.RESULTS_FILE, rp.IMPORTANCE_FILE)},
    }
    rp.atomic_write_text(out / rp.RUN_MANIFEST, rp.dump_json(manifest))

    cells = [c for p in protocols for c in p.cells]
    failed = [c for c in cells if not c.ok]
    for c in failed:
        print(f"warning: {c.dataset}/{c.family} run {c.run} failed: {c.error}", file=sys.stderr)
    print(f"{len(cells) - len(failed)} of {len(cells)} cells succeeded -> {out / rp.RESULTS_FILE}")
    return EXIT_FAILED if cells and len(failed) == len(cells) else EXIT_OK


def _check_protocol(cfg: RunConfig) -> dict:
    out = cfg.out
    run_manifest = rp.read_json(out / rp.RUN_MANIFEST)
    rp.verify_hashes(out, run_manifest["artifacts"], rp.RUN_MANIFEST)
    if cfg.seed is None:
        cfg.seed = run_manifest["seed"]
    if run_manifest["protocol_hash"] != cfg.protocol_hash():
        raise rp.ProvenanceError("the config (datasets, models, runs, seed, grid or features) differs from the "
                                 "one `run` used; re-run `run` or pass the original config")
    return run_manifest


def cmd_rank(cfg: RunConfig, jobs: int = 1) -> int:
    out = cfg.out
    run_manifest = _check_protocol(cfg)
    results = rp.read_json(out / rp.RESULTS_FILE)
    tensor = ImportanceTensor.read_csv(rp.require(out / rp.IMPORTANCE_FILE))
    if len(tensor) == 0:
        raise rp.ArtifactError(f"importance tensor {out / rp.IMPORTANCE_FILE} is empty; no importance-bearing "
                               "model succeeded in `run`")
    datasets = [load_dataset(cfg, e) for e in cfg.datasets]
    if _input_hashes(cfg) != results["provenance"]["inputs"]:
        raise rp.ProvenanceError("manifest or feature files changed since `run`")
    protocols = rp.protocols_from_results(results, {d.name: d.features.aligned_to(d.manifest).feature_names
                                                    for d in datasets})
    outcome = rank_features(datasets, protocols, tensor, cfg.seed, thresholds=cfg.thresholds(),
                            retune=not cfg.fast_sweep, stop_early=not cfg.full_curve, grid_preset=cfg.grid_preset,
                            clamp=cfg.clamp_pt, individual=cfg.individual_orderings, run_mode=cfg.importance_run,
                            jobs=jobs)

    written = []
    for kind, name in rp.SWEEP_FILES.items():
        rp.write_sweeps_csv(out / name, outcome.sweeps_for(kind))
        written.append(name)
    rp.write_aggregated_csv(out / rp.AGGREGATED_FILE, outcome.aggregated)
    written.append(rp.AGGREGATED_FILE)
    if outcome.multiset is not None:
        rp.write_multiset_csv(out / rp.MULTISET_FILE, outcome.multiset)
        rp.write_ranking_csv(out / rp.RANKING_FILE, outcome.ranking)
        written += [rp.MULTISET_FILE, rp.RANKING_FILE]
    if not cfg.tabular_only:
        rows = {kind: rp.read_sweeps_csv(out / name) for kind, name in rp.SWEEP_FILES.items()}
        rp.plot_uar_deltas(rp.uar_delta_data(rows, cfg.report_threshold), out / rp.UAR_DELTA_PLOT)
        written.append(rp.UAR_DELTA_PLOT)
        if outcome.multiset is not None:
            rp.plot_lld_occurrence(rp.read_ranking_csv(out / rp.RANKING_FILE), out / rp.LLD_PLOT)
            written.append(rp.LLD_PLOT)

    inputs = dict(run_manifest["artifacts"])
    inputs[rp.RUN_MANIFEST] = rp.sha256_file(out / rp.RUN_MANIFEST)
    manifest = {
        "schema_version": rp.SCHEMA_VERSION,
        "protocol_hash": run_manifest["protocol_hash"],
        "ranking_hash": cfg.ranking_hash(),
        "report_threshold_pct": cfg.report_threshold,
        "inputs": inputs,
        "artifacts": {name: rp.sha256_file(out / name) for name in written},
        "errors": outcome.errors,
    }
    rp.atomic_write_text(out / rp.RANK_MANIFEST, rp.dump_json(manifest))

    for s in outcome.sweeps:
        pt = "none" if s.pt is None else f"{s.pt:g}%"
        print(f"{s.dataset:<20} {s.model:<22} {s.ordering:<10} pt={pt}")
    if outcome.multiset is None:
        print("error: " + "; ".join(outcome.errors) + " (try --clamp-pt)", file=sys.stderr)
        return EXIT_FAILED
    print("cutoff LLDs: " + ", ".join(outcome.multiset.cutoff_llds))
    return EXIT_OK


def cmd_report(cfg: RunConfig) -> int:
    out = cfg.out
    run_manifest = _check_protocol(cfg)
    rank_manifest = rp.read_json(out / rp.RANK_MANIFEST)
    inputs = dict(run_manifest["artifacts"])
    inputs[rp.RUN_MANIFEST] = rp.sha256_file(out / rp.RUN_MANIFEST)
    if rank_manifest["inputs"] != inputs:
        raise rp.ProvenanceError("`rank` outputs were produced from different `run` artifacts; re-run `rank`")
    if rank_manifest["ranking_hash"] != cfg.ranking_hash():
        raise rp.ProvenanceError("the sweep/ranking settings differ from the ones `rank` used; re-run `rank`")
    for name in (rp.MULTISET_FILE, rp.RANKING_FILE):
        if name not in rank_manifest["artifacts"]:
            raise rp.ArtifactError(f"missing artifact: {out / name} (`rank` found no par threshold)")
    rp.verify_hashes(out, rank_manifest["artifacts"], rp.RANK_MANIFEST)
    report = rp.build_report(out, run_manifest, rank_manifest)
    rp.atomic_write_text(out / rp.REPORT_FILE, rp.dump_json(report))
    rp.atomic_write_text(out / rp.SUMMARY_FILE, report["summary"])
    print(report["summary"], end="")
    return EXIT_OK


def cmd_synth(spec: SyntheticSpec, out_dir: Path) -> int:
    manifest, features, informative = generate_synthetic(spec)
    out_dir.mkdir(parents=True, exist_ok=True)
    with rp.atomic_path(out_dir / "manifest.csv") as tmp:
        write_manifest(tmp, manifest)
    with rp.atomic_path(out_dir / "features.csv") as tmp:
        write_feature_csv(tmp, features.utterance_ids, features.feature_names, features.values)
    truth = {"spec": spec.to_dict(), "informative_indices": list(informative),
             "informative_features": [features.feature_names[i] for i in informative]}
    rp.atomic_write_text(out_dir / "ground_truth.json", rp.dump_json(truth))
    print(f"{spec.name}: {len(manifest)} utterances, {features.values.shape[1]} features -> {out_dir}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", required=True, help="JSON run configuration")
    p.add_argument("--out", help="output directory (overrides output_dir)")
    p.add_argument("--seed", type=int, help="base random seed")
    p.add_argument("--jobs", type=int, default=1, help="worker processes")
    p.add_argument("--runs", type=int, help="repetitions of the split protocol")
    p.add_argument("--models", help="comma-separated model families")
    p.add_argument("--grid", choices=sorted(classifiers.GRID_PRESETS), help="hyperparameter grid preset")
    p.add_argument("--sweep", nargs=3, type=float, metavar=("LO", "HI", "STEP"), help="threshold grid in percent")
    p.add_argument("--fast-sweep", action="store_true", default=None,
                   help="reuse each cell's chosen hyperparameters instead of re-tuning per threshold")
    p.add_argument("--full-curve", action="store_true", default=None, help="sweep every threshold, no early stop")
    p.add_argument("--clamp-pt", action="store_true", default=None,
                   help="count models that never reach par at the largest threshold")
    p.add_argument("--importance-run", type=int, help="use one run's importances instead of the run average")
    p.add_argument("--report-threshold", type=float, help="threshold (percent) for the at-par comparison")
    p.add_argument("--tabular-only", action="store_true", default=None, help="skip SVG plots")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sercues", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, text in (("extract", "extract feature CSVs from the manifests' WAV files"),
                       ("run", "train and evaluate every model on every dataset"),
                       ("rank", "aggregate importances, sweep thresholds, rank LLDs"),
                       ("report", "write the consolidated report")):
        _common(sub.add_parser(name, help=text))
    syn = sub.add_parser("synth", help="write a synthetic dataset (manifest, features, ground truth)")
    syn.add_argument("--out", required=True, help="output directory")
    syn.add_argument("--spec", help="JSON file with synthetic spec fields")
    syn.add_argument("--seed", type=int)
    syn.add_argument("--name")
    syn.add_argument("--view")
    return parser


def _load_config(args) -> RunConfig:
    path = Path(args.config)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: config must be a JSON object")
    cfg = RunConfig.from_dict(raw, base_dir=path.parent)
    if args.out:
        cfg.output_dir = str(Path(args.out).resolve())
    overrides = {"seed": args.seed, "n_runs": args.runs, "grid_preset": args.grid, "fast_sweep": args.fast_sweep,
                 "full_curve": args.full_curve, "clamp_pt": args.clamp_pt, "importance_run": args.importance_run,
                 "report_threshold": args.report_threshold, "tabular_only": args.tabular_only}
    for key, value in overrides.items():
        if value is not None:
            setattr(cfg, key, value)
    if args.models:
        cfg.models = [m.strip() for m in args.models.split(",") if m.strip()]
    if args.sweep:
        cfg.sweep = {"lo": args.sweep[0], "hi": args.sweep[1], "step": args.sweep[2]}
    cfg.validate()
    return cfg


def _dispatch(args) -> int:
    if args.command == "synth":
        spec_d = {}
        if args.spec:
            spec_d = json.loads(Path(args.spec).read_text(encoding="utf-8"))
        for key in ("seed", "name", "view"):
            if getattr(args, key) is not None:
                spec_d[key] = getattr(args, key)
        try:
            spec = SyntheticSpec.from_dict(spec_d)
        except TypeError as exc:
            raise ConfigError(f"bad synthetic spec: {exc}") from exc
        return cmd_synth(spec, Path(args.out))
    cfg = _load_config(args)
    if args.jobs < 1:
        raise ConfigError("--jobs must be >= 1")
    if args.command == "extract":
        return cmd_extract(cfg, args.jobs)
    if args.command == "run":
        if args.seed is None:
            raise ConfigError("`run` requires --seed")
        return cmd_run(cfg, args.jobs)
    if args.command == "rank":
        return cmd_rank(cfg, args.jobs)
    return cmd_report(cfg)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return _dispatch(args)
    except rp.ArtifactError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except AggregationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except (ConfigError, ManifestError, AudioError, rp.ProvenanceError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
