"""End-to-end CLI pipeline on a miniature corpus."""

import json
import os

import pytest

from causadv import cli


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """Run the whole pipeline once on a small corpus; return the directories."""
    root = tmp_path_factory.mktemp("pipeline")
    data = str(root / "data")
    out = str(root / "out")
    common = ["--data-dir", data, "--out", out, "--seed", "7", "--per-class", "3"]
    assert cli.main(["gen-data", "--data-dir", data, "--train-per-class", "30",
                     "--test-per-class", "5", "--seed", "7"]) == 0
    assert cli.main(["train", *common]) == 0
    for kind in ("fgsm", "bim", "pgd"):
        assert cli.main(["attack", *common, "--attack", kind, "--eps", "0.2"]) == 0
    assert cli.main(["ci", *common]) == 0
    assert cli.main(["protos", *common]) == 0
    assert cli.main(["detect", "--out", out, "--seed", "7", "--per-class", "3"]) == 0
    return data, out


def test_pipeline_artifacts(pipeline):
    data, out = pipeline
    assert os.path.exists(os.path.join(out, "weights.cadv"))
    with open(os.path.join(out, "train_summary.json")) as fh:
        summary = json.load(fh)
    assert 0.0 <= summary["test_accuracy"] <= 1.0
    for kind in ("fgsm", "bim", "pgd"):
        assert os.path.exists(os.path.join(out, "attacks", f"{kind}_untargeted",
                                           "manifest.json"))
    clean_dir = os.path.join(out, "ci", "clean")
    csvs = [f for f in os.listdir(clean_dir) if f.endswith(".csv")]
    assert len(csvs) == 30  # 10 classes x 3 per class
    assert os.path.exists(os.path.join(out, "registry.json"))
    for kind in ("clean", "fgsm_untargeted", "bim_untargeted", "pgd_untargeted"):
        assert os.path.exists(os.path.join(out, "verdicts", f"{kind}.jsonl"))
    for name in ("report.csv", "report.txt", "common_features.csv",
                 "ci_histogram.csv"):
        assert os.path.exists(os.path.join(out, "reports", name))


def test_explain_and_report_commands(pipeline, capsys):
    data, out = pipeline
    common = ["--data-dir", data, "--out", out, "--seed", "7", "--per-class", "3"]
    assert cli.main(["explain", *common, "--top-n", "5"]) == 0
    heatmaps = os.listdir(os.path.join(out, "heatmaps"))
    assert any(f.endswith(".ppm") for f in heatmaps)
    assert cli.main(["report", "--out", out, "--seed", "7", "--per-class", "3"]) == 0
    assert "population" in capsys.readouterr().out


def test_missing_artifacts_exit_code_1(tmp_path, capsys):
    out = str(tmp_path / "empty")
    code = cli.main(["detect", "--out", out, "--seed", "7", "--per-class", "3"])
    assert code == 1
    assert "error:" in capsys.readouterr().err
    code = cli.main(["attack", "--data-dir", str(tmp_path), "--out", out,
                     "--attack", "fgsm"])
    assert code == 1


def test_usage_errors_exit_code_2():
    with pytest.raises(SystemExit) as exc:
        cli.main(["attack", "--attack", "nuke"])
    assert exc.value.code == 2
    with pytest.raises(SystemExit) as exc:
        cli.main([])
    assert exc.value.code == 2


def test_strategy_config_file(pipeline, tmp_path):
    data, out = pipeline
    cfg = tmp_path / "strategies.json"
    cfg.write_text(json.dumps({"strategy1_n": 10,
                               "strategy2_mode": ["threshold", 0.3]}))
    assert cli.main(["detect", "--out", out, "--seed", "7", "--per-class", "3",
                     "--strategy-config", str(cfg)]) == 0
