import csv
import json

import numpy as np
import pytest
import yaml

from progseg import cli
from progseg.cli import ConfigError, RunConfig, main, read_ranking
from progseg.report import PLOT_FILES, difference_outline

TINY = {
    "output_dir": "out",
    "data": {"synthetic": {"count": 16, "n_labeled": 4, "n_val": 4, "H": 32, "W": 32, "edema_radius": [4, 8]}},
    "backbone": {"input_size": 32, "depth": 3, "base_width": 4, "token_dim": 16, "heads": 2},
    "teacher": {"epochs": 2, "K": 3},
    "schedule": {"epochs": 1},
}


def _write(path, cfg):
    path.write_text(yaml.safe_dump(cfg))
    return path


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("pipe")
    conf = _write(root / "run.yaml", {**TINY, "output_dir": str(root / "out")})
    codes = {c: main([c, str(conf)]) for c in ("train-teacher", "pseudolabel", "train-student", "evaluate", "report")}
    return root, conf, codes


class TestConfig:
    def test_round_trip(self):
        cfg = RunConfig.from_dict(TINY)
        assert RunConfig.loads(cfg.dump()) == cfg
        assert RunConfig.loads(RunConfig().dump()) == RunConfig()

    def test_seed_inheritance(self):
        cfg = RunConfig.from_dict({"seed": 4, "student": {"seed": 9}})
        assert (cfg.teacher.seed, cfg.student.seed) == (4, 9)
        assert RunConfig.loads(cfg.dump()) == cfg
        assert cfg.with_seed(2).teacher.seed == 2

    def test_empty_file_gives_defaults(self):
        assert RunConfig.loads("") == RunConfig()

    def test_field_level_diagnostics(self):
        with pytest.raises(ConfigError, match="teacher: unknown field"):
            RunConfig.from_dict({"teacher": {"epochz": 3}})
        with pytest.raises(ConfigError, match=r"^loss: tau"):
            RunConfig.from_dict({"loss": {"tau": 2.0}})
        with pytest.raises(ConfigError, match=r"data\.synthetic"):
            RunConfig.from_dict({"data": {"synthetic": {"edema_radius": [30, 40]}}})
        with pytest.raises(ConfigError):
            RunConfig.loads("- a\n- b\n")
        with pytest.raises(ConfigError):
            RunConfig.loads("a: [")

    def test_data_kinds(self):
        with pytest.raises(ConfigError):
            RunConfig.from_dict({"data": {"kind": "web"}})
        with pytest.raises(ConfigError):
            RunConfig.from_dict({"data": {"kind": "corpus"}})

    def test_output_env(self, monkeypatch, tmp_path):
        monkeypatch.setenv(cli.OUTPUT_ENV, str(tmp_path))
        assert RunConfig(output_dir="x").output_root() == tmp_path / "x"
        assert RunConfig(output_dir="/abs").output_root().as_posix() == "/abs"


class TestExitCodes:
    def test_missing_config_no_outputs(self, tmp_path, monkeypatch):
        monkeypatch.chdir(tmp_path)
        assert main(["train-teacher", "absent.yaml"]) == 1
        assert list(tmp_path.iterdir()) == []

    def test_usage_error(self):
        assert main(["no-such-verb", "x.yaml"]) == 1
        assert main([]) == 1

    def test_invalid_config(self, tmp_path):
        conf = _write(tmp_path / "c.yaml", {"teacher": {"epochs": 0}})
        assert main(["train-teacher", str(conf)]) == 1

    def test_missing_artifact_named(self, tmp_path, capsys):
        conf = _write(tmp_path / "c.yaml", {**TINY, "output_dir": str(tmp_path / "o")})
        assert main(["evaluate", str(conf)]) == 1
        assert "teacher checkpoint" in capsys.readouterr().err
        assert main(["report", str(conf)]) == 1
        assert "teacher history" in capsys.readouterr().err

    def test_runtime_failure(self, tmp_path):
        cfg = {**TINY, "output_dir": str(tmp_path / "o"), "data": {"kind": "corpus", "corpus": str(tmp_path / "none")}}
        assert main(["train-teacher", str(_write(tmp_path / "c.yaml", cfg))]) == 2


class TestPipeline:
    def test_all_commands_succeed(self, pipeline):
        assert set(pipeline[2].values()) == {0}

    def test_artifacts(self, pipeline):
        out = pipeline[0] / "out"
        for rel in (
            "config.yaml",
            "teacher/teacher.ckpt",
            "teacher/history.jsonl",
            "pseudolabels/ranking.csv",
            "student/student.ckpt",
            "student/history.jsonl",
            "student/stage_reports.jsonl",
            "eval/metrics.json",
        ):
            assert (out / rel).is_file(), rel
        assert sorted(p.name for p in (out / "report").iterdir()) == sorted(PLOT_FILES)
        assert len(list((out / "pseudolabels" / "cache").glob("*.zip"))) == 8
        assert len((out / "teacher/history.jsonl").read_text().splitlines()) == 2
        assert len((out / "student/stage_reports.jsonl").read_text().splitlines()) == 6

    def test_ranking_sorted(self, pipeline):
        rows = read_ranking(pipeline[0] / "out" / "pseudolabels" / "ranking.csv")
        assert [r[2] for r in rows] == list(range(1, 9))
        confs = [r[1] for r in rows]
        assert confs == sorted(confs, reverse=True)

    def test_metrics_records(self, pipeline):
        m = json.loads((pipeline[0] / "out" / "eval" / "metrics.json").read_text())
        for role in ("teacher", "student"):
            assert set(m[role]["classes"]) == {"Background", "NCR/NET", "Edema", "Enhancing", "macro"}
            assert m[role]["inconsistent_classes"] == []

    def test_rerun_hits_cache(self, pipeline, capsys):
        _, conf, _ = pipeline
        capsys.readouterr()
        assert main(["pseudolabel", str(conf)]) == 0
        assert json.loads(capsys.readouterr().out.strip().splitlines()[-1]) == {"samples": 8, "computed": 0}

    def test_overrides(self, pipeline, tmp_path):
        root, conf, _ = pipeline
        teacher = root / "out" / "teacher" / "teacher.ckpt"
        out = tmp_path / "ov"
        assert main(["train-teacher", str(conf), "--epochs", "1", "--output", str(out)]) == 0
        assert len((out / "teacher/history.jsonl").read_text().splitlines()) == 1
        assert main(["train-student", str(conf), "--teacher", str(teacher), "--fractions", "1.0", "--output", str(out)]) == 0
        assert len((out / "student/stage_reports.jsonl").read_text().splitlines()) == 1
        assert main(["train-student", str(conf), "--fractions", "0.5", "0.2", "1.0", "--output", str(out)]) == 1

    def test_stale_cache_rebuilt(self, pipeline, tmp_path, caplog):
        root, conf, _ = pipeline
        out = tmp_path / "stale"
        assert main(["train-teacher", str(conf), "--epochs", "1", "--output", str(out)]) == 0
        assert main(["pseudolabel", str(conf), "--output", str(out)]) == 0
        assert main(["train-teacher", str(conf), "--epochs", "1", "--seed", "9", "--output", str(out)]) == 0
        with caplog.at_level("WARNING"):
            assert main(["pseudolabel", str(conf), "--output", str(out)]) == 0
        assert "rebuilding" in caplog.text

    def test_empty_unlabeled(self, tmp_path, capsys):
        cfg = {**TINY, "output_dir": str(tmp_path / "o"), "teacher": {"epochs": 1, "K": 2}}
        cfg["data"] = {"synthetic": {**TINY["data"]["synthetic"], "count": 8}}
        conf = _write(tmp_path / "c.yaml", cfg)
        assert main(["train-teacher", str(conf)]) == 0
        capsys.readouterr()
        assert main(["pseudolabel", str(conf)]) == 0
        assert json.loads(capsys.readouterr().out.strip()) == {"samples": 0, "computed": 0}
        with open(tmp_path / "o" / "pseudolabels" / "ranking.csv") as fh:
            assert list(csv.reader(fh)) == [["sample_id", "C_img", "rank"]]


def test_difference_outline_identical_is_empty():
    y = np.random.default_rng(0).integers(0, 4, (8, 8))
    assert not difference_outline(y, y.copy()).any()
