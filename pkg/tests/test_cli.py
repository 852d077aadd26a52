"""Command-line behaviour: config loading and merging, exit codes, run
directories, and a miniature end-to-end pipeline over all five commands."""

import json
import re

import numpy as np
import pytest
import yaml

from ppgrisk.cli import (_prepare_run_dir, default_config, file_digest,
                         load_config, main)
from ppgrisk.cohort import load_manifest, load_patient
from ppgrisk.errors import ConfigError, DataError
from ppgrisk.evaluation import parse_report
from ppgrisk.extractor import load_extractor
from ppgrisk.training import load_bundle

MICRO_YAML = """\
cohort:
  n_case: 4
  n_control: 6
extractor:
  custom: {n_layers: 1, d_model: 8, n_heads: 2, d_ff: 16}
pretrain:
  steps: 5
  batch_size: 16
  chunks_per_record: 4
aggregator:
  param_budget: 2000
train:
  epochs: 2
  batch_size: 8
  val_hours: [1]
"""


@pytest.fixture(scope="module")
def micro_config(tmp_path_factory):
    path = tmp_path_factory.mktemp("cfg") / "micro.yaml"
    path.write_text(MICRO_YAML)
    return str(path)


@pytest.fixture(scope="module")
def cohort_run(micro_config, tmp_path_factory):
    out = tmp_path_factory.mktemp("runs") / "synth"
    assert main(["synth", "--config", micro_config,
                 "--out", str(out), "--seed", "0"]) == 0
    return out


@pytest.fixture(scope="module")
def pretrain_run(micro_config, cohort_run, tmp_path_factory):
    out = tmp_path_factory.mktemp("runs") / "pretrain"
    assert main(["pretrain", "--config", micro_config, "--out", str(out),
                 "--cohort", str(cohort_run / "cohort_manifest.csv")]) == 0
    return out


@pytest.fixture(scope="module")
def train_run(micro_config, cohort_run, pretrain_run, tmp_path_factory):
    out = tmp_path_factory.mktemp("runs") / "train"
    cache = tmp_path_factory.mktemp("cache")
    assert main(["train", "--config", micro_config, "--out", str(out),
                 "--cohort", str(cohort_run / "cohort_manifest.csv"),
                 "--extractor", str(pretrain_run / "extractor.npz"),
                 "--cache", str(cache)]) == 0
    return out, cache


class TestConfigLoading:
    def test_defaults_carry_every_section(self):
        config = default_config()
        assert set(config) == {"schema_version", "cohort", "extractor",
                               "pretrain", "features", "aggregator",
                               "train", "trajectory"}
        assert load_config(None) == config

    def test_sparse_override_touches_only_named_keys(self, tmp_path):
        path = tmp_path / "o.yaml"
        path.write_text("train:\n  epochs: 7\n")
        config = load_config(path)
        assert config["train"]["epochs"] == 7
        assert config["train"]["batch_size"] == default_config()["train"]["batch_size"]
        assert config["cohort"] == default_config()["cohort"]

    def test_unknown_key_rejected_with_dotted_path(self, tmp_path):
        path = tmp_path / "o.yaml"
        path.write_text("train:\n  eppochs: 7\n")
        with pytest.raises(ConfigError, match=r"train\.'eppochs'"):
            load_config(path)
        path.write_text("trian: {}\n")
        with pytest.raises(ConfigError, match="trian"):
            load_config(path)

    def test_section_must_stay_a_mapping(self, tmp_path):
        path = tmp_path / "o.yaml"
        path.write_text("train: 3\n")
        with pytest.raises(ConfigError, match="mapping"):
            load_config(path)

    def test_yaml_error_reports_file_and_line(self, tmp_path):
        path = tmp_path / "broken.yaml"
        path.write_text("train:\n\tepochs: 1\n")
        with pytest.raises(ConfigError, match=re.escape(str(path)) + r":\d+"):
            load_config(path)

    def test_missing_file_rejected(self, tmp_path):
        with pytest.raises(ConfigError, match="cannot read"):
            load_config(tmp_path / "absent.yaml")

    def test_empty_override_keeps_defaults(self, tmp_path):
        path = tmp_path / "empty.yaml"
        path.write_text("")
        assert load_config(path) == default_config()

    def test_top_level_must_be_mapping(self, tmp_path):
        path = tmp_path / "list.yaml"
        path.write_text("- a\n- b\n")
        with pytest.raises(ConfigError, match="mapping"):
            load_config(path)

    def test_schema_version_checked(self, tmp_path):
        path = tmp_path / "v2.yaml"
        path.write_text("schema_version: 2\n")
        with pytest.raises(ConfigError, match="schema_version"):
            load_config(path)


class TestRunDirs:
    def test_refuses_nonempty_without_force(self, tmp_path):
        target = tmp_path / "run"
        target.mkdir()
        (target / "junk.txt").write_text("x")
        with pytest.raises(DataError, match="--force"):
            _prepare_run_dir(target, force=False)
        assert _prepare_run_dir(target, force=True) == target

    def test_creates_missing_directories(self, tmp_path):
        target = tmp_path / "a" / "b"
        assert _prepare_run_dir(target, force=False).is_dir()

    def test_file_digest_tracks_content(self, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        a.write_bytes(b"same bytes")
        b.write_bytes(b"same bytes")
        assert file_digest(a) == file_digest(b)
        b.write_bytes(b"other bytes")
        assert file_digest(a) != file_digest(b)


class TestExitCodes:
    def test_missing_subcommand_is_usage_error(self):
        with pytest.raises(SystemExit) as err:
            main([])
        assert err.value.code == 1

    def test_unknown_flag_is_usage_error(self):
        with pytest.raises(SystemExit) as err:
            main(["synth", "--no-such-flag"])
        assert err.value.code == 1

    def test_config_error_is_exit_1(self, tmp_path):
        rc = main(["synth", "--config", str(tmp_path / "absent.yaml"),
                   "--out", str(tmp_path / "out")])
        assert rc == 1

    def test_data_error_is_exit_2(self, tmp_path):
        target = tmp_path / "busy"
        target.mkdir()
        (target / "junk").write_text("x")
        assert main(["synth", "--out", str(target)]) == 2

    def test_numeric_failure_is_exit_3(self, capsys):
        rc = main(["gradcheck", "--kind", "ssm", "--tolerance", "1e-30"])
        assert rc == 3
        assert "FAIL" in capsys.readouterr().out

    def test_gradcheck_single_kind_passes(self, capsys):
        assert main(["gradcheck", "--kind", "ssm"]) == 0
        out = capsys.readouterr().out
        assert "gradcheck ssm:" in out and "[ok]" in out


class TestSynth:
    def test_manifest_lists_whole_cohort(self, cohort_run):
        entries = load_manifest(cohort_run / "cohort_manifest.csv")
        assert len(entries) == 10
        assert [pid for pid, _, _ in entries[:4]] \
            == [f"case{i:04d}" for i in range(4)]
        assert all(label == 1 for _, label, _ in entries[:4])
        assert all(label == 0 for _, label, _ in entries[4:])
        assert all(path.exists() for _, _, path in entries)

    def test_records_are_canonical(self, cohort_run):
        entries = load_manifest(cohort_run / "cohort_manifest.csv")
        record = load_patient(entries[0][2])
        assert record.is_canonical()
        assert record.label == 1

    def test_run_manifest_snapshot(self, cohort_run):
        manifest = json.loads((cohort_run / "manifest.json").read_text())
        assert manifest["command"] == "synth"
        assert manifest["seed"] == 0
        assert manifest["schema_version"] == 1
        assert manifest["wall_clock_s"] > 0
        assert "cohort_manifest.csv" in manifest["outputs"]
        snapshot = yaml.safe_load((cohort_run / "config.yaml").read_text())
        assert snapshot == manifest["config"]
        assert snapshot["cohort"]["n_case"] == 4

    def test_synthesis_is_reproducible_across_runs(self, tmp_path):
        config = tmp_path / "two.yaml"
        config.write_text("cohort:\n  n_case: 1\n  n_control: 1\n")
        digests = []
        for name in ("r1", "r2"):
            out = tmp_path / name
            assert main(["synth", "--config", str(config),
                         "--out", str(out), "--seed", "3"]) == 0
            digests.append([file_digest(p)
                            for p in sorted(out.glob("*.ppg"))])
        assert digests[0] == digests[1]
        assert len(digests[0]) == 2


class TestPretrain:
    def test_outputs_and_log(self, pretrain_run):
        model = load_extractor(pretrain_run / "extractor.npz")
        assert model.config.d_model == 8
        log = (pretrain_run / "pretrain.log").read_text()
        assert "pool_chunks=40" in log
        assert "copy_last_baseline_mse=" in log
        assert "step=1 " in log and "step=5 " in log
        manifest = json.loads((pretrain_run / "manifest.json").read_text())
        assert re.fullmatch(r"[0-9a-f]{32}", manifest["inputs"]["cohort"])


class TestTrain:
    def test_bundle_and_logs(self, train_run):
        run_dir, _ = train_run
        bundle = load_bundle(run_dir / "bundle.npz")
        assert bundle.source.family == "extractor"
        assert bundle.aggregator.config.kind == "blstm_att"
        assert len(bundle.history) == 2
        log = (run_dir / "history.log").read_text()
        assert "epoch=1 " in log and "best_epoch=" in log
        assert "agg_params=" in log

    def test_split_is_persisted_and_disjoint(self, train_run, cohort_run):
        run_dir, _ = train_run
        split = json.loads((run_dir / "split.json").read_text())
        ids = split["train"] + split["val"] + split["test"]
        assert len(ids) == len(set(ids)) == 10
        assert len(split["train"]) == 6
        assert len(split["val"]) == len(split["test"]) == 2
        manifest_ids = [pid for pid, _, _
                        in load_manifest(cohort_run / "cohort_manifest.csv")]
        assert set(ids) == set(manifest_ids)

    def test_cache_holds_train_and_val_grids(self, train_run):
        _, cache = train_run
        assert len(list(cache.glob("**/*.npz"))) == 8


class TestEval:
    def test_report_on_test_subset(self, train_run, cohort_run, micro_config,
                                   tmp_path, capsys):
        run_dir, cache = train_run
        out = tmp_path / "eval"
        rc = main(["eval", "--config", micro_config, "--out", str(out),
                   "--cohort", str(cohort_run / "cohort_manifest.csv"),
                   "--bundle", str(run_dir / "bundle.npz"),
                   "--cache", str(cache), "--subset", "test"])
        assert rc == 0
        assert "mean_auroc_all=" in capsys.readouterr().out
        entries, means = parse_report(out / "report.csv")
        assert len(entries) == 24
        assert all(e.n_case == 1 and e.n_control == 1 for e in entries)
        assert set(means) == {"Mean (All)", "Mean (Last 12h)", "Mean (Last 6h)"}
        assert (out / "report_roc.csv").exists()
        manifest = json.loads((out / "manifest.json").read_text())
        assert set(manifest["inputs"]) == {"cohort", "bundle"}

    def test_eval_all_subset_counts_everyone(self, train_run, cohort_run,
                                             micro_config, tmp_path, capsys):
        run_dir, cache = train_run
        out = tmp_path / "eval-all"
        rc = main(["eval", "--config", micro_config, "--out", str(out),
                   "--cohort", str(cohort_run / "cohort_manifest.csv"),
                   "--bundle", str(run_dir / "bundle.npz"),
                   "--cache", str(cache), "--subset", "all"])
        assert rc == 0
        assert "n=10" in capsys.readouterr().out
        entries, _ = parse_report(out / "report.csv")
        assert all(e.n_case == 4 and e.n_control == 6 for e in entries)


class TestTrajectory:
    def test_export_last_hour(self, train_run, cohort_run, micro_config,
                              tmp_path, capsys):
        run_dir, _ = train_run
        out = tmp_path / "traj"
        rc = main(["trajectory", "--config", micro_config, "--out", str(out),
                   "--cohort", str(cohort_run / "cohort_manifest.csv"),
                   "--bundle", str(run_dir / "bundle.npz"),
                   "--patient", "case0000", "--last-hours", "1"])
        assert rc == 0
        assert "120 points" in capsys.readouterr().out
        table = out / "trajectory_case0000.csv"
        assert table.exists()
        assert len(table.read_text().strip().splitlines()) == 121
        images = [p for p in out.iterdir()
                  if p.stem == "trajectory_case0000" and p.suffix != ".csv"]
        assert len(images) == 1 and images[0].stat().st_size > 0

    def test_unknown_patient_is_data_error(self, train_run, cohort_run,
                                           micro_config, tmp_path):
        run_dir, _ = train_run
        rc = main(["trajectory", "--config", micro_config,
                   "--out", str(tmp_path / "t2"),
                   "--cohort", str(cohort_run / "cohort_manifest.csv"),
                   "--bundle", str(run_dir / "bundle.npz"),
                   "--patient", "nobody"])
        assert rc == 2
