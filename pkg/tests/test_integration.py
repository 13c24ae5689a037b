"""
End-to-end runs of the experiment commands.

These tests train every model and classifier from scratch. The smoke runs
take minutes; the desk runs check the experiment outcomes and take hours.
Both only run when RUN_BENCHMARK is set:

   $ RUN_BENCHMARK=1 pytest tests/test_integration.py -v
"""

import json
import os
from pathlib import Path

import pytest
import torch

from app.config import Settings
from app.evaluation import FINETUNED_COLUMN, SweepReport, TransferReport, load_report
from app.main import main
from app.maskgen import DecodeSchedule, parallel_decode
from app.masking import apply_mask, downsample_mask, sample_mask
from app.pipeline import Experiment
from app.prompts import build_pool, tokenize_prompt
from app.seeding import numpy_rng, torch_generator
from app.toyworld import default_benchmark_domains
from app.vqcodec import tokenize

DESK_CONFIG = str(Path(__file__).resolve().parents[1] / "configs" / "desk.json")

pytestmark = pytest.mark.skipif(
    os.environ.get("RUN_BENCHMARK", "") != "1",
    reason="Set RUN_BENCHMARK=1 to run the end-to-end experiments",
)


def only_run_dir(root: Path, command: str) -> Path:
    dirs = [p for p in root.iterdir() if p.name.startswith(f"{command}-")]
    assert len(dirs) == 1
    return dirs[0]


def test_transfer_matrix(tmp_path, smoke_config):
    """Test a multi-source matrix over all domains with real and synthetic variants"""
    assert main(["transfer-matrix", "--config", smoke_config, "--output", str(tmp_path),
                 "--protocol", "multi_source", "--variants", "R0,R1,R4", "--seeds", "1"]) == 0
    run_dir = only_run_dir(tmp_path, "transfer-matrix")
    report = load_report(run_dir / "report.json")
    assert isinstance(report, TransferReport)
    assert len(report.cells) == 4
    for cell in report.cells:
        assert set(cell.values) == {"R0", "R1", "R4"}
        assert all(0.0 <= v <= 1.0 for values in cell.values.values() for v in values)
    assert (run_dir / "transfer.png").is_file()
    assert "Avg." in (run_dir / "report.txt").read_text()

    snapshot = json.loads((run_dir / "snapshot.json").read_text())
    assert snapshot["config"]["evaluation"]["variants"] == ["R0", "R1", "R4"]


def test_volume_sweep(tmp_path, smoke_config):
    assert main(["volume-sweep", "--config", smoke_config, "--output", str(tmp_path),
                 "--targets", "delta-flood", "--fractions", "0.5,1.0"]) == 0
    run_dir = only_run_dir(tmp_path, "volume-sweep")
    report = load_report(run_dir / "report.json")
    assert isinstance(report, SweepReport)
    assert [f for f, _, _ in report.series("delta-flood")] == [0.5, 1.0]
    assert (run_dir / "volume_sweep.png").is_file()


def test_stage_commands(tmp_path, smoke_config):
    """Test each stage command completes and reports its diagnostics"""
    common = ["--config", smoke_config, "--output", str(tmp_path)]
    for argv in (
        ["train-codec"],
        ["train-generator"],
        ["train-scorer"],
        ["finetune-generator", "--target", "delta-flood"],
        ["synthesize", "--target", "delta-flood", "--workers", "2"],
        ["synthesize", "--target", "delta-flood", "--finetuned"],
    ):
        assert main(argv + common) == 0

    scorer = json.loads((only_run_dir(tmp_path, "train-scorer") / "result.json").read_text())
    assert 0.0 <= scorer["retrieval_accuracy"] <= 1.0
    codec = json.loads((only_run_dir(tmp_path, "train-codec") / "result.json").read_text())
    assert codec["probe_usage"] > 0
    finetune = json.loads((only_run_dir(tmp_path, "finetune-generator") / "result.json").read_text())
    assert finetune["base_cross_entropy"] > 0 and finetune["finetuned_cross_entropy"] > 0

    assert main(["train", "--sources", "gulf-hurricane,plains-tornado", "--target", "delta-flood",
                 "--variants", "R0,R2"] + common) == 0
    train_dir = only_run_dir(tmp_path, "train")
    assert main(["evaluate", "--checkpoint", str(train_dir / "R2.pt"), "--target", "delta-flood"] + common) == 0


@pytest.fixture(scope="module")
def desk_output(tmp_path_factory):
    """One output root for all desk runs, so data and models are trained once"""
    return tmp_path_factory.mktemp("desk")


def desk(output, command, *flags) -> Path:
    """Run a command on the desk preset and return its run directory"""
    assert main([command, "--config", DESK_CONFIG, "--output", str(output), *flags]) == 0
    dirs = [p for p in output.iterdir() if p.name.startswith(f"{command}-")]
    return max(dirs, key=lambda p: (p / "result.json").stat().st_mtime_ns)


def test_desk_multi_source_matrix(desk_output):
    """Test synthetic head fine-tuning beats the real-only baseline and the other variants"""
    run_dir = desk(desk_output, "transfer-matrix", "--protocol", "multi_source", "--variants", "R0,R1,R2,R3,R4",
                     "--seeds", "3", "--include-finetuned")
    report = load_report(run_dir / "report.json")
    assert len(report.cells) == 4
    assert all(len(values) == 3 for cell in report.cells for values in cell.values.values())
    assert report.average("R4") >= report.average("R0") + 0.05
    assert report.average("R4") >= report.average("R2")
    assert report.average("R4") >= report.average("R1")

    table = (run_dir / "report.txt").read_text()
    for column in ("R0", "R1", "R2", "R3", "R4", FINETUNED_COLUMN):
        assert column in table


def test_desk_single_source_matrix(desk_output):
    domains = [d.name for d in default_benchmark_domains()[:3]]
    run_dir = desk(desk_output, "transfer-matrix", "--protocol", "single_source", "--variants", "R0,R4",
                     "--seeds", "3", "--domains", ",".join(domains))
    report = load_report(run_dir / "report.json")
    assert len(report.cells) == 6
    assert report.delta("R4") > 0


def test_desk_volume_sweep(desk_output):
    """Test the full synthetic set helps at least as much as a quarter of it on most targets"""
    run_dir = desk(desk_output, "volume-sweep", "--protocol", "multi_source", "--seeds", "3",
                     "--fractions", "0.25,0.5,0.75,1.0")
    report = load_report(run_dir / "report.json")
    assert report.nested
    improved = 0
    for target in report.values:
        means = {fraction: mean for fraction, mean, _ in report.series(target)}
        improved += means[1.0] >= means[0.25]
    assert len(report.values) == 4
    assert improved >= 3


def test_desk_finetuned_generator_fits_target(desk_output):
    run_dir = desk(desk_output, "finetune-generator", "--target", "delta-flood")
    result = json.loads((run_dir / "result.json").read_text())
    assert result["finetuned_cross_entropy"] < result["base_cross_entropy"]


def test_desk_generator_follows_the_prompt(desk_output):
    """Test damaged and undamaged prompts decode differently on the same masked image"""
    experiment = Experiment(Settings.load(DESK_CONFIG, {"output_root": str(desk_output)}))
    codec, generator = experiment.codec(), experiment.generator()
    train, _, _ = experiment.domain_splits("delta-flood")
    prompts = [
        tokenize_prompt(build_pool(name).prompts[0].text, generator.vocabulary, generator.model.prompt_length)
        for name in ("toy_flood_damaged", "toy_undamaged")
    ]
    schedule = DecodeSchedule(total_steps=8)
    differ = 0
    for case, pair in enumerate(train[:100]):
        size = pair.pre.shape[0]
        mask = sample_mask(size, size, size // 2, size // 2, numpy_rng(case))
        masked = apply_mask(tokenize(codec, pair.pre)[0], downsample_mask(mask, codec.config.factor), codec.mask_id)
        damaged, undamaged = (
            parallel_decode(generator, masked, ids, schedule, torch_generator(case)) for ids in prompts
        )
        differ += not torch.equal(damaged, undamaged)
    assert differ >= 90
