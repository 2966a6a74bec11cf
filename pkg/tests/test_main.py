import json
import logging

import pytest
import yaml

import main
from db_manager import ResultsDatabase
from exceptions import ConfigError, GateFailure
from main import EXIT_ERROR, EXIT_GATE, ExperimentManifest

from conftest import TINY_ENCODER


@pytest.fixture(autouse=True)
def output_root(tmp_path, monkeypatch):
    monkeypatch.setenv("VLA_OUTPUT_ROOT", str(tmp_path))
    yield tmp_path
    app_logger = logging.getLogger('vla')
    for handler in list(app_logger.handlers):
        app_logger.removeHandler(handler)
        handler.close()


@pytest.fixture
def small_config(tmp_path):
    path = tmp_path / "small.yaml"
    path.write_text(yaml.safe_dump({
        "data": {"robot_episodes": 3, "vl_samples": 6, "class_samples": 12, "class_holdout_samples": 6,
                 "gate_episodes": 2},
        "encoder": dict(TINY_ENCODER),
        "eval": {"tasks": ["Reach"], "variants": [{"kind": "Matching"}], "episodes_per_cell": 2,
                 "max_steps": 10, "batch_size": 2},
    }))
    return path


def test_tokenize_prints_codec_tokens(capsys):
    assert main.main(["tokenize", "0.0312", "-0.5"]) == 0
    out = capsys.readouterr().out.splitlines()
    assert out == ["0.0312: 0 . 0 3 1 2", "-0.5: - 0 . 5 0 0 0"]


def test_tokenize_decodes(capsys):
    assert main.main(["tokenize", "--decode", "0", ".", "0", "3", "1", "2"]) == 0
    assert capsys.readouterr().out.strip() == "0.0312"
    assert main.main(["tokenize", "--codec", "bin", "1.0"]) == 0
    assert capsys.readouterr().out.strip() == "1.0: <bin_255>"


def test_errors_map_to_exit_codes(capsys):
    assert main.main(["train"]) == EXIT_ERROR
    assert "gen-data" in capsys.readouterr().err
    assert main.main(["train", "--override", "train.epochs=3"]) == EXIT_ERROR
    assert main.main(["tokenize", "--decode", "0", "."]) == EXIT_ERROR
    assert main.main(["eval", "--policy", "model"]) == EXIT_ERROR


def test_gate_failure_exit_code(monkeypatch, capsys):
    def failing_gate(*args, **kwargs):
        raise GateFailure("expert gate failed for ['Pick']", {"Pick": {"generator": 0.5, "harness": 0.5}})

    monkeypatch.setattr(main, "expert_gate", failing_gate)
    assert main.main(["gen-data"]) == EXIT_GATE
    assert "Pick" in capsys.readouterr().err


def test_gen_data_then_expert_eval(small_config, output_root, monkeypatch):
    monkeypatch.setattr(main, "expert_gate", lambda *args, **kwargs: {})
    assert main.main(["gen-data", "--config", str(small_config)]) == 0
    data_dir = output_root / "data"
    for name in main.DATASET_FILES.values():
        assert (data_dir / name).is_file()
    header = json.loads((data_dir / main.DATASET_FILES["robot"]).read_text().splitlines()[0])
    assert header["count"] == 3

    assert main.main(["eval", "--config", str(small_config), "--policy", "expert", "--paraphrase"]) == 0
    for name in ("eval.jsonl", "eval.txt", "eval.csv"):
        assert (output_root / "eval" / name).is_file()
    runs = ResultsDatabase(str(output_root / "results.db")).get_runs("expert")
    assert len(runs) == 1 and runs[0]["status"] == "evaluated"


def test_manifest_arm_names_must_be_unique(tmp_path):
    path = tmp_path / "manifest.yaml"
    path.write_text(yaml.safe_dump({"arms": [{"name": "full"}, {"name": "full", "overrides": ["seed=1"]}]}))
    with pytest.raises(ConfigError, match="unique"):
        ExperimentManifest.from_yaml(path)
    with pytest.raises(ConfigError):
        ExperimentManifest.from_yaml(tmp_path / "absent.yaml")


def test_manifest_resolves_base_config(tmp_path):
    path = tmp_path / "grid" / "manifest.yaml"
    path.parent.mkdir()
    path.write_text(yaml.safe_dump({
        "base_config": "base.yaml",
        "seeds": [0, 1],
        "arms": [{"name": "full", "role": "full"}, {"name": "baseline", "overrides": ["train.cotrain=false"]}],
    }))
    manifest = ExperimentManifest.from_yaml(path)
    assert manifest.base_config == str(path.parent / "base.yaml")
    assert manifest.seeds == [0, 1]
    assert manifest.arms[1].overrides == ["train.cotrain=false"]
    assert manifest.arm_dir(tmp_path, manifest.arms[0], 1) == tmp_path / "full" / "seed_1"
