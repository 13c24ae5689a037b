import pytest

from app.errors import ConfigurationError
from app.pipeline import Experiment


def test_domain_splits_are_written_once(experiment):
    """Test splits land on disk and are reused"""
    train, val, test = experiment.domain_splits("delta-flood")
    data_dir = experiment.data_dir("delta-flood")
    assert all((data_dir / f"{split}.jsonl").is_file() for split in ("train", "val", "test"))
    assert len(train) + len(val) + len(test) == experiment.settings.benchmark.pairs_per_domain
    assert any(p.label for p in val)
    assert experiment.domain_splits("delta-flood")[0] is train


def test_unknown_domain(experiment):
    with pytest.raises(ConfigurationError):
        experiment.domain("atlantis")


def test_models_are_cached_on_disk(experiment, tiny_bundle):
    """Test a fresh experiment loads the stored models instead of retraining"""
    fresh = Experiment(experiment.settings)
    assert fresh.codec_path().is_file()
    assert fresh.codec().hash == tiny_bundle.codec.hash
    assert fresh.generator().hash == tiny_bundle.generator.hash
    assert fresh.scorer().hash == tiny_bundle.scorer.hash


def test_model_paths_follow_config(experiment):
    other = experiment.settings.model_copy(
        update={"codec": experiment.settings.codec.model_copy(update={"steps": 7})}
    )
    changed = Experiment(other)
    assert changed.codec_path() != experiment.codec_path()
    assert changed.generator_path() != experiment.generator_path()
    assert changed.scorer_path() == experiment.scorer_path()


def test_synthetic_sets_vary_by_seed(experiment):
    """Test each run seed gets its own cached synthetic set"""
    first = experiment.synthetic("plains-tornado", 0)
    again = experiment.synthetic("plains-tornado", 0)
    second = experiment.synthetic("plains-tornado", 1)
    assert again is first
    assert experiment.synthetic_dir("plains-tornado", 0) != experiment.synthetic_dir("plains-tornado", 1)
    assert (experiment.synthetic_dir("plains-tornado", 0) / "manifest.jsonl").is_file()
    assert first.seed != second.seed
    train, _, _ = experiment.domain_splits("plains-tornado")
    assert first.total_targets == len(train)


def test_run_cell(experiment):
    """Test one transfer cell trains the variants and evaluates on the target test split"""
    reports = experiment.run_cell(["gulf-hurricane"], "plains-tornado", ["R0", "R4"], seed=0)
    assert set(reports) == {"R0", "R4"}
    _, _, test = experiment.domain_splits("plains-tornado")
    for variant, report in reports.items():
        assert report.stage == variant
        assert report.domain == "plains-tornado"
        assert report.n_pos + report.n_neg == len(test)
        assert 0.0 <= report.auprc <= 1.0


def test_train_cell_rejects_target_in_sources(experiment):
    with pytest.raises(ConfigurationError):
        experiment.train_cell(["plains-tornado"], "plains-tornado", ["R0"], seed=0)


def test_input_hashes(experiment):
    keys = experiment.input_hashes()
    assert keys["codec"] == experiment.codec_path().stem
    assert keys["data/plains-tornado"] == experiment.data_dir("plains-tornado").name
    assert set(keys) >= {"codec", "generator", "scorer"}
