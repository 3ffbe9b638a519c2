import json
import shutil
import wave

import numpy as np
import pytest

from sercues import report as rp
from sercues.audio_features import feature_names, read_feature_csv, write_feature_csv
from sercues.cli import RunConfig, main

SMALL = {"q_features": 72, "informative_features": [0, 13, 26, 39, 52, 65], "n_speakers": 6,
         "utterances_per_speaker_per_emotion": 5}


def write_config(path, **overrides):
    cfg = {
        "datasets": [{"name": "alpha", "synthetic": dict(SMALL, seed=1)},
                     {"name": "beta", "synthetic": dict(SMALL, seed=2, view="mixed")}],
        "models": ["logistic_regression", "random_forest", "mlp"],
        "n_runs": 2,
        "grid_preset": "compact",
        "fast_sweep": True,
        "output_dir": "out",
    }
    cfg.update(overrides)
    path.write_text(json.dumps(cfg))
    return path


def pipeline(cfg, seed=5, extra=()):
    codes = [main(["run", "--config", str(cfg), "--seed", str(seed), *extra]),
             main(["rank", "--config", str(cfg), *extra]),
             main(["report", "--config", str(cfg), *extra])]
    return codes


@pytest.fixture(scope="module")
def done(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = write_config(root / "config.json")
    assert pipeline(cfg) == [0, 0, 0]
    return root, cfg, root / "out"


def test_pipeline_writes_every_artifact(done):
    _, _, out = done
    for name in (rp.RESULTS_FILE, rp.IMPORTANCE_FILE, rp.RUN_MANIFEST, *rp.SWEEP_FILES.values(), rp.AGGREGATED_FILE,
                 rp.MULTISET_FILE, rp.RANKING_FILE, rp.RANK_MANIFEST, rp.UAR_DELTA_PLOT, rp.LLD_PLOT,
                 rp.REPORT_FILE, rp.SUMMARY_FILE):
        assert (out / name).is_file(), name
    assert not list(out.glob("*.tmp*"))


def test_results_cardinality_and_validation_family(done):
    _, _, out = done
    results = json.loads((out / rp.RESULTS_FILE).read_text())
    for d in results["datasets"].values():
        assert len(d["cells"]) == 3 * 2
    header, *rows = (out / rp.IMPORTANCE_FILE).read_text().splitlines()
    assert header == "model,dataset,run,feature_name,score"
    models = {r.split(",")[0] for r in rows}
    assert models == {"logistic_regression", "random_forest"}
    assert len(rows) == 2 * 2 * 2 * 72


def test_report_uar_table_recomputes_from_results(done):
    _, _, out = done
    report = json.loads((out / rp.REPORT_FILE).read_text())
    results = json.loads((out / rp.RESULTS_FILE).read_text())
    for ds, d in results["datasets"].items():
        for model in ("logistic_regression", "random_forest", "mlp"):
            uars = [c["uar"] for c in d["cells"] if c["model"] == model and c["ok"]]
            entry = report["uar_table"][ds][model]
            assert entry["mean"] == pytest.approx(np.mean(uars), abs=1e-15)
            assert entry["std"] == pytest.approx(np.std(uars), abs=1e-15)
    assert report["schema_version"] == rp.SCHEMA_VERSION
    assert report["provenance"]["seed"] == 5


def test_summary_cutoff_matches_ranking_file(done):
    _, _, out = done
    ranking = rp.read_ranking_csv(out / rp.RANKING_FILE)
    cutoff = [r["lld"] for r in ranking if r["in_cutoff"]]
    report = json.loads((out / rp.REPORT_FILE).read_text())
    assert report["lld_ranking"]["cutoff_llds"] == cutoff
    summary = (out / rp.SUMMARY_FILE).read_text()
    tail = summary.split("LLDs covering half")[1].splitlines()[1:]
    assert [line.split(". ")[1].split(" (")[0] for line in tail if line.strip()] == cutoff
    assert summary == report["summary"]


def test_report_numbers_trace_to_artifacts(done):
    _, _, out = done
    report = json.loads((out / rp.REPORT_FILE).read_text())
    for name, digest in report["provenance"]["artifacts"].items():
        assert rp.sha256_file(out / name) == digest
    rows = {k: rp.read_sweeps_csv(out / f) for k, f in rp.SWEEP_FILES.items()}
    assert report["uar_deltas"] == json.loads(json.dumps(rp.uar_delta_data(rows, 6.0)))


def test_sweep_csv_layout(done):
    _, _, out = done
    lines = (out / rp.SWEEP_FILES["aggregated"]).read_text().splitlines()
    assert lines[0] == ",".join(rp.SWEEP_COLUMNS)
    lines = (out / rp.RANKING_FILE).read_text().splitlines()
    assert lines[0] == ",".join(rp.RANKING_COLUMNS)


def test_rerun_is_byte_identical(done, tmp_path):
    root, _, out = done
    cfg = write_config(tmp_path / "config.json")
    assert pipeline(cfg) == [0, 0, 0]
    for name in (rp.RESULTS_FILE, rp.IMPORTANCE_FILE, rp.REPORT_FILE, rp.UAR_DELTA_PLOT, rp.LLD_PLOT,
                 *rp.SWEEP_FILES.values(), rp.RANKING_FILE):
        assert (tmp_path / "out" / name).read_bytes() == (out / name).read_bytes(), name


def copy_run(done, tmp_path):
    root, cfg, out = done
    shutil.copytree(out, tmp_path / "out")
    shutil.copy(cfg, tmp_path / "config.json")
    return tmp_path / "config.json", tmp_path / "out"


def test_tampered_results_are_refused(done, tmp_path, capsys):
    cfg, out = copy_run(done, tmp_path)
    doc = json.loads((out / rp.RESULTS_FILE).read_text())
    first = next(iter(doc["datasets"].values()))["cells"][0]
    first["uar"] = 0.999
    (out / rp.RESULTS_FILE).write_text(json.dumps(doc))
    assert main(["report", "--config", str(cfg)]) == 2
    assert "results.json" in capsys.readouterr().err
    assert main(["rank", "--config", str(cfg)]) == 2


def test_changed_ranking_settings_are_refused(done, tmp_path):
    cfg, _ = copy_run(done, tmp_path)
    assert main(["report", "--config", str(cfg), "--report-threshold", "3"]) == 2
    assert main(["report", "--config", str(cfg), "--seed", "6"]) == 2
    assert main(["report", "--config", str(cfg)]) == 0


def test_missing_artifacts_exit_3(done, tmp_path, capsys):
    cfg, out = copy_run(done, tmp_path)
    (out / rp.RANK_MANIFEST).unlink()
    assert main(["report", "--config", str(cfg)]) == 3
    assert rp.RANK_MANIFEST in capsys.readouterr().err
    (out / rp.RUN_MANIFEST).unlink()
    assert main(["rank", "--config", str(cfg)]) == 3


def test_run_requires_seed(tmp_path, capsys):
    cfg = write_config(tmp_path / "config.json")
    assert main(["run", "--config", str(cfg)]) == 2
    assert "--seed" in capsys.readouterr().err


@pytest.mark.parametrize("overrides", [{"datasets": []}, {"models": ["mlp"]}, {"models": ["knn"]},
                                       {"sweep": {"lo": 0, "hi": 5, "step": 1}}, {"colour": "blue"}])
def test_bad_configs_exit_2(tmp_path, overrides):
    cfg = write_config(tmp_path / "config.json", **overrides)
    assert main(["run", "--config", str(cfg), "--seed", "1"]) == 2


def test_missing_config_exit_2(tmp_path):
    assert main(["run", "--config", str(tmp_path / "nope.json"), "--seed", "1"]) == 2


def test_total_failure_and_empty_tensor(tmp_path, capsys):
    main(["synth", "--out", str(tmp_path / "syn"), "--spec", str(write_spec(tmp_path))])
    ids, names, values = read_feature_csv(tmp_path / "syn" / "features.csv")
    values[:, 0] = np.nan
    write_feature_csv(tmp_path / "syn" / "features.csv", ids, names, values)
    cfg = write_config(tmp_path / "config.json",
                       datasets=[{"name": "broken", "manifest": "syn/manifest.csv", "features": "syn/features.csv"}],
                       models=["logistic_regression"])
    assert main(["run", "--config", str(cfg), "--seed", "1"]) == 4
    assert "failed" in capsys.readouterr().err
    assert main(["rank", "--config", str(cfg)]) == 3
    assert "empty" in capsys.readouterr().err


def write_spec(tmp_path):
    p = tmp_path / "spec.json"
    p.write_text(json.dumps(dict(SMALL, seed=3, name="filed")))
    return p


def test_synth_writes_dataset(tmp_path):
    assert main(["synth", "--out", str(tmp_path / "s"), "--spec", str(write_spec(tmp_path)), "--view", "heavy_tailed"]) == 0
    truth = json.loads((tmp_path / "s" / "ground_truth.json").read_text())
    assert truth["informative_indices"] == SMALL["informative_features"]
    assert truth["spec"]["view"] == "heavy_tailed"
    ids, names, values = read_feature_csv(tmp_path / "s" / "features.csv")
    assert values.shape == (6 * 4 * 5, 72) and [names[i] for i in truth["informative_indices"]] == truth["informative_features"]
    assert main(["synth", "--out", str(tmp_path / "bad"), "--view", "striped"]) == 2


def test_manifest_dataset_runs_through_cli(tmp_path):
    main(["synth", "--out", str(tmp_path / "syn"), "--spec", str(write_spec(tmp_path))])
    cfg = write_config(tmp_path / "config.json", models=["logistic_regression"],
                       datasets=[{"name": "filed", "manifest": "syn/manifest.csv", "features": "syn/features.csv"}])
    assert pipeline(cfg, extra=["--tabular-only"]) == [0, 0, 0]
    assert not (tmp_path / "out" / rp.UAR_DELTA_PLOT).exists()
    # editing an input after `run` invalidates the downstream steps
    (tmp_path / "syn" / "manifest.csv").write_text((tmp_path / "syn" / "manifest.csv").read_text() + "\n")
    assert main(["rank", "--config", str(cfg), "--tabular-only"]) == 2


# --- extract ----------------------------------------------------------------------

def write_tone(path, freq, rate=16000, seconds=0.5):
    t = np.arange(int(rate * seconds)) / rate
    x = (0.3 * np.sin(2 * np.pi * freq * t) * 32767).astype("<i2")
    with wave.open(str(path), "wb") as wf:
        wf.setnchannels(1)
        wf.setsampwidth(2)
        wf.setframerate(rate)
        wf.writeframes(x.tobytes())


def audio_corpus(root, n=10, corrupt=False):
    (root / "wav").mkdir(parents=True)
    lines = ["utterance_id,audio_path,speaker_id,sex,emotion"]
    for i in range(n):
        write_tone(root / "wav" / f"u{i}.wav", 120 + 15 * i)
        lines.append(f"u{i},wav/u{i}.wav,s{i % 2},{'m' if i % 2 else 'f'},{['anger', 'fear'][i % 2]}")
    if corrupt:
        (root / "wav" / "u3.wav").write_bytes(b"RIFF\x00\x00not a wave file")
    (root / "manifest.csv").write_text("\n".join(lines) + "\n")
    return write_config(root / "config.json", datasets=[{"name": "tones", "manifest": "manifest.csv"}])


def test_extract_writes_one_row_per_utterance(tmp_path):
    cfg = audio_corpus(tmp_path)
    assert main(["extract", "--config", str(cfg)]) == 0
    target = tmp_path / "out" / "features" / "tones.csv"
    ids, names, values = read_feature_csv(target)
    assert ids == [f"u{i}" for i in range(10)] and names == feature_names()
    assert values.shape == (10, len(feature_names())) and np.all(np.isfinite(values))
    first = target.read_bytes()
    assert main(["extract", "--config", str(cfg), "--jobs", "2"]) == 0
    assert target.read_bytes() == first


def test_extract_reports_corrupt_file_and_writes_nothing(tmp_path, capsys):
    cfg = audio_corpus(tmp_path, corrupt=True)
    assert main(["extract", "--config", str(cfg)]) == 2
    err = capsys.readouterr().err
    assert "u3.wav" in err and "1 of 10" in err
    assert not (tmp_path / "out" / "features" / "tones.csv").exists()


def test_config_hashes_split_protocol_and_ranking():
    a = RunConfig(datasets=[{"name": "x", "synthetic": {}}], seed=1)
    b = RunConfig(datasets=[{"name": "x", "synthetic": {}}], seed=1, report_threshold=3.0)
    assert a.protocol_hash() == b.protocol_hash() and a.ranking_hash() != b.ranking_hash()
    c = RunConfig(datasets=[{"name": "x", "synthetic": {}}], seed=2)
    assert a.protocol_hash() != c.protocol_hash()
