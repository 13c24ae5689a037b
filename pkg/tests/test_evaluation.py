import json
from unittest.mock import patch

import numpy as np
import pytest

from app.classifier import ClassifierParams, SiameseClassifier, train_variant
from app.config import TrainConfig
from app.errors import ConfigurationError, ContractError
from app.evaluation import (
    CellResult, EvalReport, SweepReport, TransferReport, cell_label, evaluate, load_report, plot_pr_curves,
    plot_report, save_report, transfer_cells, volume_sweep,
)
from app.seeding import seeded
from app.toyworld import as_targets

DOMAINS = ["a", "b", "c", "d"]


@pytest.fixture
def classifier():
    config = TrainConfig(width=16, depth=1, heads=2, patch=8)
    with seeded(0):
        model = SiameseClassifier(config, 32)
    return ClassifierParams(model=model, config=config, stage="R0")


@pytest.fixture
def transfer_report():
    cells = [
        CellResult(sources=["b", "c"], target="a", values={"R0": [0.2, 0.4], "R4": [0.5, 0.5]}),
        CellResult(sources=["a", "c"], target="b", values={"R0": [0.6, 0.6], "R4": [0.5, 0.7]}),
    ]
    return TransferReport(protocol="multi_source", variants=["R0", "R4"], seeds=[0, 1], cells=cells)


def test_transfer_cells():
    """Test both protocols enumerate the expected settings"""
    single = transfer_cells(DOMAINS, "single_source")
    assert len(single) == 12
    assert (("a",), "b") in single and (("b",), "a") in single
    assert all(target not in sources for sources, target in single)

    multi = transfer_cells(DOMAINS, "multi_source")
    assert multi[0] == (("b", "c", "d"), "a")
    assert len(multi) == 4

    with pytest.raises(ConfigurationError):
        transfer_cells(["a"], "single_source")
    with pytest.raises(ConfigurationError):
        transfer_cells(DOMAINS, "round_robin")
    assert cell_label(("b", "c"), "a") == "b+c->a"


def test_transfer_report_averages(transfer_report):
    """Test unweighted means of per-cell means and deltas against R0"""
    assert np.isclose(transfer_report.cells[0].mean("R0"), 0.3)
    assert np.isclose(transfer_report.average("R0"), 0.45)
    assert np.isclose(transfer_report.average("R4"), 0.55)
    assert np.isclose(transfer_report.delta("R4"), 0.10)
    assert np.isclose(transfer_report.delta("R4", transfer_report.cells[1]), 0.0)


def test_transfer_table(transfer_report):
    table = transfer_report.format_table()
    assert "b+c->a" in table and "Avg." in table
    assert "30.00" in table
    assert "50.00 (+20.00)" in table
    assert "55.00 (+10.00)" in table


def test_report_round_trip(tmp_path, transfer_report):
    """Test saved reports load back as the same kind"""
    path = save_report(transfer_report, tmp_path, "matrix")
    assert (tmp_path / "matrix.txt").read_text() == transfer_report.format_table()
    data = json.loads(path.read_text())
    assert data["kind"] == "transfer"
    assert np.isclose(data["average"]["R4"], 0.55)
    loaded = load_report(path)
    assert isinstance(loaded, TransferReport)
    assert loaded.average("R4") == transfer_report.average("R4")

    sweep = SweepReport(protocol="multi_source", fractions=[0.5, 1.0], seeds=[0],
                        values={"a": [[0.4], [0.6]]})
    loaded = load_report(save_report(sweep, tmp_path, "sweep"))
    assert isinstance(loaded, SweepReport)
    assert loaded.series("a") == [(0.5, 0.4, [0.4]), (1.0, 0.6, [0.6])]
    assert "50%" in sweep.format_table()


def test_load_report_errors(tmp_path):
    with pytest.raises(ConfigurationError):
        load_report(tmp_path / "missing.json")
    other = tmp_path / "other.json"
    other.write_text(json.dumps({"something": 1}))
    with pytest.raises(ConfigurationError):
        load_report(other)


def test_evaluate(classifier, pairs32):
    """Test the report counts classes and carries the checkpoint hash"""
    report = evaluate(classifier, pairs32, "plains-tornado")
    assert (report.n_pos, report.n_neg) == (8, 8)
    assert 0.0 <= report.auprc <= 1.0
    assert report.checkpoint_hash == classifier.hash
    assert report.stage == "R0"
    assert report.pr_points[-1][1] == 1.0
    assert EvalReport.from_dict(report.to_dict()) == report


def test_evaluate_contracts(classifier, pairs32):
    with pytest.raises(ContractError):
        evaluate(classifier, [])
    with pytest.raises(ContractError):
        evaluate(classifier, as_targets(pairs32))


def test_plots(tmp_path, classifier, pairs32, transfer_report):
    """Test every report type renders to PNG"""
    report = evaluate(classifier, pairs32, "plains-tornado")
    png = plot_pr_curves({"R0": report}, tmp_path / "pr.png")
    assert png.is_file() and png.stat().st_size > 0
    assert (tmp_path / "pr.json").is_file()

    assert plot_report(transfer_report, tmp_path / "transfer.png").is_file()
    sweep = SweepReport(protocol="multi_source", fractions=[0.5, 1.0], seeds=[0], values={"a": [[0.4], [0.6]]})
    assert plot_report(sweep, tmp_path / "sweep.png").is_file()
    assert plot_report(report, tmp_path / "single.png").is_file()


def test_volume_sweep_trains_r0_once_per_seed(experiment):
    """Test every fraction fine-tunes the same R0 instead of retraining it"""
    with patch("app.pipeline.train_variant", wraps=train_variant) as training:
        report = volume_sweep(experiment, [0.5, 1.0], "multi_source", seeds=1, targets=["plains-tornado"])
    variants = [call.args[0] for call in training.call_args_list]
    assert variants.count("R0") == 1
    assert variants.count("R4") == 2
    bases = {id(call.kwargs["base"]) for call in training.call_args_list if call.args[0] == "R4"}
    assert len(bases) == 1
    assert report.nested
    assert [len(v) for v in report.values["plains-tornado"]] == [1, 1]
