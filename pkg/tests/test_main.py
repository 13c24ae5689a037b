import json
from pathlib import Path

import pytest

from app.classifier import ClassifierParams, SiameseClassifier, save_classifier
from app.config import TrainConfig
from app.main import build_parser, collect_overrides, main
from app.seeding import seeded


def run_dirs(root, command):
    return sorted(p for p in Path(root).iterdir() if p.name.startswith(f"{command}-"))


def test_parser_maps_flags_to_overrides():
    """Test dedicated flags become config overrides next to --set"""
    args = build_parser().parse_args([
        "synthesize", "--target", "delta-flood", "--num-candidates", "3", "--set", "seed=4",
    ])
    sources = collect_overrides(args)
    assert ("--set", "seed=4") in sources
    assert ("--num-candidates", "synthesis.num_candidates=3") in sources


def test_usage_errors_exit_1():
    with pytest.raises(SystemExit) as excinfo:
        main(["no-such-command"])
    assert excinfo.value.code == 1
    with pytest.raises(SystemExit) as excinfo:
        main(["synthesize"])
    assert excinfo.value.code == 1


def test_conflicting_flags_exit_1(tmp_path, smoke_config):
    """Test the same key from two sources is rejected before any work"""
    code = main(["gen-data", "--config", smoke_config, "--output", str(tmp_path),
                 "--seed", "1", "--set", "seed=2"])
    assert code == 1
    assert not any(tmp_path.iterdir())


def test_gen_data_is_idempotent(tmp_path, smoke_config):
    """Test a completed run directory is skipped on rerun"""
    argv = ["gen-data", "--config", smoke_config, "--output", str(tmp_path), "--domains", "delta-flood"]
    assert main(argv) == 0
    dirs = run_dirs(tmp_path, "gen-data")
    assert len(dirs) == 1
    result = json.loads((dirs[0] / "result.json").read_text())
    assert result["delta-flood"]["counts"] == {"train": 48, "val": 6, "test": 6}
    snapshot = json.loads((dirs[0] / "snapshot.json").read_text())
    assert snapshot["config"]["toyworld"]["image_size"] == 32
    assert snapshot["inputs"]["codec"].startswith("codec-")
    assert snapshot["inputs"]["data/delta-flood"] == Path(result["delta-flood"]["dir"]).name
    stamp = (dirs[0] / "result.json").stat().st_mtime_ns

    assert main(argv) == 0
    assert run_dirs(tmp_path, "gen-data") == dirs
    assert (dirs[0] / "result.json").stat().st_mtime_ns == stamp

    # a different seed is a different run
    assert main(argv + ["--seed", "3"]) == 0
    assert len(run_dirs(tmp_path, "gen-data")) == 2


def test_unknown_domain_exit_1(tmp_path, smoke_config):
    code = main(["train", "--config", smoke_config, "--output", str(tmp_path),
                 "--sources", "atlantis", "--target", "delta-flood"])
    assert code == 1


def test_evaluate_errors(tmp_path, smoke_config):
    """Test a missing checkpoint is a usage error and a broken manifest a data error"""
    assert main(["evaluate", "--config", smoke_config, "--output", str(tmp_path),
                 "--checkpoint", str(tmp_path / "none.pt"), "--target", "delta-flood"]) == 1

    config = TrainConfig(width=16, depth=1, heads=2, patch=8)
    with seeded(0):
        model = SiameseClassifier(config, 32)
    checkpoint = save_classifier(ClassifierParams(model=model, config=config, stage="R0"), tmp_path / "R0.pt")
    manifest = tmp_path / "broken.jsonl"
    manifest.write_text("{not json\n")
    assert main(["evaluate", "--config", smoke_config, "--output", str(tmp_path),
                 "--checkpoint", str(checkpoint), "--manifest", str(manifest)]) == 2


def test_evaluate_and_plot(tmp_path, smoke_config):
    """Test evaluation writes a report and PR curve that plot can re-render"""
    config = TrainConfig(width=16, depth=1, heads=2, patch=8)
    with seeded(0):
        model = SiameseClassifier(config, 32)
    checkpoint = save_classifier(ClassifierParams(model=model, config=config, stage="R0"), tmp_path / "R0.pt")
    output = tmp_path / "runs"
    assert main(["evaluate", "--config", smoke_config, "--output", str(output),
                 "--checkpoint", str(checkpoint), "--target", "delta-flood"]) == 0
    run_dir = run_dirs(output, "evaluate")[0]
    report = json.loads((run_dir / "report.json").read_text())
    assert report["n_pos"] + report["n_neg"] == 6
    assert (run_dir / "pr_curve.png").is_file()

    assert main(["plot", "--config", smoke_config, "--output", str(output),
                 "--report", str(run_dir / "report.json")]) == 0
    assert (run_dir / "report_plot.png").is_file()
    assert json.loads((run_dir / "report.json").read_text()) == report
