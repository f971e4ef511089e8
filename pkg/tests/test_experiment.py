"""End-to-end runs on tiny synthetic scenes, feature export and the CLI."""

import csv
import json
import sys
from pathlib import Path

import numpy as np
import pytest

# Add project root to path
sys.path.insert(0, str(Path(__file__).parent.parent))

from config import experiment_from_dict, validate_experiment
from core.cube import TARGET
from core.errors import ArgumentError, ConfigError
from experiment import export_features, load_domain_pair, run_experiment, run_seed
import main as main_module
from main import EXIT_CONFIG, EXIT_REPORT, EXIT_RUNTIME, main
from utils.reporting import METRICS_FILE, render_report

TINY_SYNTH = {
    "n_classes": 3,
    "height": 16,
    "width": 16,
    "source_grid": {"start_nm": 400.0, "stop_nm": 1000.0, "bands": 16},
    "target_grid": {"start_nm": 420.0, "stop_nm": 980.0, "bands": 12},
}
FAST_TRAIN = {"epochs": 2, "batch_size": 8, "learning_rate": 0.01, "optimizer": "adam"}


def _experiment(tmp_path, mode="supervised", model=None, seeds=(1,), **blocks) -> dict:
    data = {
        "name": f"tiny-{mode}",
        "dataset": {"kind": "synthetic", "synth": TINY_SYNTH, "domain": "target"},
        "split": {"per_class": 3, "source_per_class": 5},
        "model": model or {"config": "input-12 → fc-8 → softmax-3"},
        "trainer": {"mode": mode, "train": dict(FAST_TRAIN)},
        "report": {"out_dir": str(tmp_path / "run"), "seeds": list(seeds)},
    }
    data.update(blocks)
    return data


def _cfg(tmp_path, **kwargs):
    cfg = experiment_from_dict(_experiment(tmp_path, **kwargs))
    validate_experiment(cfg)
    return cfg


FANN_MODEL = {"source_config": "input-16 → conv3-4 → recur-4", "target_config": "input-12 → conv3-4 → recur-4"}


class TestRunExperiment:
    """run_experiment across trainer modes."""

    def test_supervised_two_seeds(self, tmp_path):
        cfg = _cfg(tmp_path, seeds=(2, 1))
        metrics = run_experiment(cfg)
        assert metrics["seeds"] == [1, 2]
        assert metrics["failed"] == []
        assert 0.0 <= metrics["summary"]["overall_accuracy"]["mean"] <= 1.0
        run_dir = tmp_path / "run"
        assert json.loads((run_dir / METRICS_FILE).read_text(encoding="utf-8")) == metrics
        assert (run_dir / "config.json").is_file()
        assert (run_dir / "seed_1" / "model" / "model.pt").is_file()

    def test_metrics_are_reproducible(self, tmp_path):
        first = run_experiment(_cfg(tmp_path / "a"))
        second = run_experiment(_cfg(tmp_path / "b"))
        assert first["runs"][0]["overall_accuracy"] == second["runs"][0]["overall_accuracy"]

    def test_semisup(self, tmp_path):
        cfg = _cfg(tmp_path, mode="semisup_recon")
        cfg.trainer.train.lambda_recon = 0.5
        assert run_experiment(cfg)["runs"][0]["status"] == "ok"

    def test_plssdl(self, tmp_path):
        cfg = _cfg(tmp_path, mode="plssdl", model={"config": "input-12 → fc-8 → fc-8 → softmax-3"})
        cfg.trainer.train.n_clusters = 3
        cfg.trainer.train.freeze_depth = 1
        run = run_experiment(cfg)["runs"][0]
        assert run["status"] == "ok"
        assert run["n_train"] == 9

    def test_fann_records_baseline_and_probes(self, tmp_path):
        cfg = _cfg(tmp_path, mode="fann", model=FANN_MODEL)
        metrics = run_experiment(cfg)
        run = metrics["runs"][0]
        assert run["status"] == "ok"
        assert 0.0 <= run["baseline_overall_accuracy"] <= 1.0
        assert set(run["probes"]) == {"FA-1", "FA-2", "concatenated"}
        assert "baseline_overall_accuracy" in metrics["summary"]
        assert (tmp_path / "run" / "seed_1" / "model" / "fann.json").is_file()
        assert (tmp_path / "run" / "seed_1" / "betas.csv").is_file()

    def test_active_curve(self, tmp_path):
        cfg = _cfg(tmp_path, mode="active", model={"config": "input-12 → fc-8 → dropout-0.5 → softmax-3"},
                   active={"strategy": "entropy", "initial_per_class": 1, "pool_per_class": 6,
                           "budget": 4, "step": 2})
        run = run_experiment(cfg)["runs"][0]
        assert [p["labels_used"] for p in run["curve"]] == [3, 5, 7]
        assert run["kappa"] is None
        assert (tmp_path / "run" / "seed_1" / "curve.csv").is_file()

    def test_failed_seed_is_recorded(self, tmp_path):
        cfg = _cfg(tmp_path, split={"per_class": 500, "source_per_class": 5})
        metrics = run_experiment(cfg)
        assert metrics["failed"] == [1]
        assert metrics["runs"][0]["error"].startswith("SplitError")

    def test_band_mismatch_raises(self, tmp_path):
        cfg = _cfg(tmp_path, model={"config": "input-16 → fc-8 → softmax-3"})
        with pytest.raises(ConfigError):
            run_seed(cfg, 1)

    def test_report_after_run(self, tmp_path):
        cfg = _cfg(tmp_path, mode="fann", model=FANN_MODEL)
        run_experiment(cfg)
        text = render_report(tmp_path / "run")
        assert "source only" in text
        assert "FA-1" in text

    def test_domain_pair_per_seed(self, tmp_path):
        cfg = _cfg(tmp_path)
        a, b = load_domain_pair(cfg, 1), load_domain_pair(cfg, 2)
        assert not np.array_equal(a.target[0].values, b.target[0].values)


class TestExportFeatures:
    """Layer activations from saved checkpoints."""

    def test_supervised_checkpoint(self, tmp_path):
        cfg = _cfg(tmp_path)
        run_experiment(cfg)
        cube, labels = load_domain_pair(cfg, 1).target
        features, patches = export_features(tmp_path / "run" / "seed_1" / "model", cube, labels, "fc1")
        assert features.shape == (len(patches), 8)
        assert len(patches) == int((labels.classes > 0).sum())

    def test_input_layer(self, tmp_path):
        cfg = _cfg(tmp_path)
        run_experiment(cfg)
        cube, labels = load_domain_pair(cfg, 1).target
        features, patches = export_features(tmp_path / "run" / "seed_1" / "model", cube, labels, "input")
        np.testing.assert_allclose(features, patches.flat(), atol=1e-6)

    def test_fann_pair_and_branch_layer(self, tmp_path):
        cfg = _cfg(tmp_path, mode="fann", model=FANN_MODEL)
        run_experiment(cfg)
        checkpoint = tmp_path / "run" / "seed_1" / "model"
        cube, labels = load_domain_pair(cfg, 1).target
        pair_features, _ = export_features(checkpoint, cube, labels, "FA-2", TARGET)
        assert pair_features.shape[1] == cfg.trainer.train.align_dim
        recur_features, _ = export_features(checkpoint, cube, labels, "recur1", TARGET)
        assert recur_features.shape[1] == 4

    def test_unknown_layer(self, tmp_path):
        cfg = _cfg(tmp_path)
        run_experiment(cfg)
        cube, labels = load_domain_pair(cfg, 1).target
        with pytest.raises(ArgumentError):
            export_features(tmp_path / "run" / "seed_1" / "model", cube, labels, "conv9")

    def test_missing_checkpoint(self, tmp_path):
        cfg = _cfg(tmp_path)
        cube, labels = load_domain_pair(cfg, 1).target
        with pytest.raises(ArgumentError):
            export_features(tmp_path, cube, labels, "fc1")


class TestCli:
    """Subcommands and exit codes."""

    def _main(self, monkeypatch, *argv):
        monkeypatch.setattr(sys, "argv", ["main.py", *argv])
        main()

    def _exit_code(self, monkeypatch, *argv):
        with pytest.raises(SystemExit) as excinfo:
            self._main(monkeypatch, *argv)
        return excinfo.value.code

    def _config_file(self, tmp_path, **kwargs) -> Path:
        path = tmp_path / "exp.json"
        path.write_text(json.dumps(_experiment(tmp_path, **kwargs)), encoding="utf-8")
        return path

    def test_gen_synth_then_report(self, monkeypatch, capsys, tmp_path):
        config = self._config_file(tmp_path)
        out = tmp_path / "scene"
        self._main(monkeypatch, "gen-synth", "--config", str(config), "--out", str(out), "--seed", "1")
        for name in ("source.hdr", "source_labels.csv", "target.hdr", "target_labels.csv", "shift.json"):
            assert (out / name).is_file()
        assert "12 bands" in capsys.readouterr().out

        self._main(monkeypatch, "report", str(out))
        assert "Band grids differ" in capsys.readouterr().out

    def test_gen_synth_identity(self, monkeypatch, capsys, tmp_path):
        out = tmp_path / "scene"
        self._main(monkeypatch, "gen-synth", "--config", str(self._config_file(tmp_path)),
                   "--out", str(out), "--identity")
        shift = json.loads((out / "shift.json").read_text(encoding="utf-8"))
        assert shift["gain"] == 1.0
        assert shift["mixing_concentration"] is None

    def test_ingest_writes_split(self, monkeypatch, capsys, tmp_path):
        out = tmp_path / "scene"
        self._main(monkeypatch, "gen-synth", "--config", str(self._config_file(tmp_path)), "--out", str(out))
        self._main(monkeypatch, "ingest", "--header", str(out / "target.hdr"),
                   "--labels", str(out / "target_labels.csv"), "--per-class", "3")
        split = json.loads((out / "target_labels.split.json").read_text(encoding="utf-8"))
        assert len(split["train_indices"]) == 9
        assert "Labeled pixels: 256 in 3 classes" in capsys.readouterr().out

    def test_ingest_descriptor_mismatch(self, monkeypatch, tmp_path):
        out = tmp_path / "scene"
        self._main(monkeypatch, "gen-synth", "--config", str(self._config_file(tmp_path)), "--out", str(out))
        code = self._exit_code(monkeypatch, "ingest", "--header", str(out / "target.hdr"),
                               "--labels", str(out / "target_labels.csv"), "--descriptor", "pavia")
        assert code == EXIT_RUNTIME

    def test_ingest_unknown_descriptor(self, monkeypatch, tmp_path):
        out = tmp_path / "scene"
        self._main(monkeypatch, "gen-synth", "--config", str(self._config_file(tmp_path)), "--out", str(out))
        code = self._exit_code(monkeypatch, "ingest", "--header", str(out / "target.hdr"),
                               "--labels", str(out / "target_labels.csv"), "--descriptor", "mars")
        assert code == EXIT_CONFIG

    def test_run_report_export(self, monkeypatch, capsys, tmp_path):
        config = self._config_file(tmp_path)
        run_dir = tmp_path / "cli_run"
        self._main(monkeypatch, "run", "--config", str(config), "--out", str(run_dir), "--seeds", "1,2", "--quiet")
        assert "OA:" in capsys.readouterr().out
        assert json.loads((run_dir / METRICS_FILE).read_text(encoding="utf-8"))["seeds"] == [1, 2]

        self._main(monkeypatch, "report", str(run_dir))
        assert (run_dir / "report.md").is_file()

        scene = tmp_path / "scene"
        self._main(monkeypatch, "gen-synth", "--config", str(config), "--out", str(scene), "--seed", "1")
        feats = tmp_path / "feats.csv"
        self._main(monkeypatch, "export-features", "--checkpoint", str(run_dir / "seed_1" / "model"),
                   "--header", str(scene / "target.hdr"), "--labels", str(scene / "target_labels.csv"),
                   "--layer", "fc1", "--out", str(feats))
        with open(feats, newline="", encoding="utf-8") as f:
            rows = list(csv.reader(f))
        assert rows[0][-2:] == ["label", "domain"]
        assert len(rows[0]) == 10
        assert rows[1][-1] == "target"

    def test_run_all_seeds_failed(self, monkeypatch, tmp_path):
        config = self._config_file(tmp_path, split={"per_class": 500, "source_per_class": 5})
        assert self._exit_code(monkeypatch, "run", "--config", str(config), "--quiet") == EXIT_RUNTIME

    def test_run_missing_config(self, monkeypatch, tmp_path):
        assert self._exit_code(monkeypatch, "run", "--config", str(tmp_path / "none.json")) == EXIT_CONFIG

    def test_run_bad_seeds(self, monkeypatch, tmp_path):
        config = self._config_file(tmp_path)
        assert self._exit_code(monkeypatch, "run", "--config", str(config), "--seeds", "1,x") == EXIT_CONFIG

    def test_run_bad_workers(self, monkeypatch, tmp_path):
        config = self._config_file(tmp_path)
        assert self._exit_code(monkeypatch, "run", "--config", str(config), "--workers", "0") == EXIT_CONFIG

    def test_report_missing_metrics(self, monkeypatch, tmp_path):
        assert self._exit_code(monkeypatch, "report", str(tmp_path)) == EXIT_REPORT

    def test_export_bad_domain(self, monkeypatch, tmp_path):
        code = self._exit_code(monkeypatch, "export-features", "--checkpoint", str(tmp_path), "--header", "x.hdr",
                               "--labels", "x.csv", "--layer", "fc1", "--domain", "mars", "--out", "f.csv")
        assert code == EXIT_CONFIG

    def test_export_descriptor_sets_kind(self, monkeypatch, tmp_path):
        out = tmp_path / "scene"
        self._main(monkeypatch, "gen-synth", "--config", str(self._config_file(tmp_path)), "--out", str(out))
        kinds = []
        original = main_module.load_cube

        def recording(header, kind):
            kinds.append(kind)
            return original(header, kind=kind)

        monkeypatch.setattr(main_module, "load_cube", recording)
        code = self._exit_code(monkeypatch, "export-features", "--checkpoint", str(tmp_path),
                               "--header", str(out / "target.hdr"), "--labels", str(out / "target_labels.csv"),
                               "--layer", "fc1", "--descriptor", "street_wetland", "--out", str(tmp_path / "f.csv"))
        assert kinds == ["radiance"]
        assert code == EXIT_RUNTIME
        assert not (tmp_path / "f.csv").exists()

    def test_export_unknown_descriptor(self, monkeypatch, tmp_path):
        code = self._exit_code(monkeypatch, "export-features", "--checkpoint", str(tmp_path), "--header", "x.hdr",
                               "--labels", "x.csv", "--layer", "fc1", "--descriptor", "mars", "--out", "f.csv")
        assert code == EXIT_CONFIG

    def test_env_seed_override(self, monkeypatch, tmp_path):
        config = self._config_file(tmp_path)
        monkeypatch.setenv("HSIADAPT_SEED", "4")
        monkeypatch.setenv("HSIADAPT_OUT_DIR", str(tmp_path / "env_run"))
        self._main(monkeypatch, "run", "--config", str(config), "--quiet")
        assert (tmp_path / "env_run" / "seed_4").is_dir()
