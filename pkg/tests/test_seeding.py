import pytest
import torch

from app.errors import (
    ConfigurationError, ContractError, DataError, ManifestError, NumericError, PipelineError, UndefinedMetricError,
)
from app.seeding import derive_seed, numpy_rng, params_hash, seeded, torch_generator
from app.workers import WorkerPool


def test_derive_seed():
    """Test child seeds are deterministic, distinct and 63-bit"""
    assert derive_seed(0, "codec") == derive_seed(0, "codec")
    assert derive_seed(0, "codec") != derive_seed(1, "codec")
    assert derive_seed(0, "codec") != derive_seed(0, "generator")
    assert derive_seed(0, "synthesis", "a", 1) != derive_seed(0, "synthesis", "a", 2)
    assert 0 <= derive_seed(123, "x") < 2 ** 63


def test_rngs_are_reproducible():
    assert numpy_rng(5).integers(0, 1000, 10).tolist() == numpy_rng(5).integers(0, 1000, 10).tolist()
    a = torch.rand(4, generator=torch_generator(5))
    b = torch.rand(4, generator=torch_generator(5))
    assert torch.equal(a, b)


def test_seeded_restores_global_state():
    """Test seeded() leaves the global torch stream where it was"""
    torch.manual_seed(0)
    expected = torch.rand(3)
    torch.manual_seed(0)
    with seeded(42):
        torch.rand(10)
    assert torch.equal(torch.rand(3), expected)


def test_params_hash():
    """Test same-seeded modules hash equal and differ after an update"""
    with seeded(1):
        a = torch.nn.Linear(4, 2)
    with seeded(1):
        b = torch.nn.Linear(4, 2)
    assert params_hash(a) == params_hash(b)
    with torch.no_grad():
        b.bias.add_(1.0)
    assert params_hash(a) != params_hash(b)


def test_exit_codes():
    """Test the error hierarchy carries CLI exit codes"""
    assert ConfigurationError("x").exit_code == 1
    assert DataError("x").exit_code == 2
    assert ContractError("x").exit_code == 2
    assert UndefinedMetricError("x").exit_code == 2
    assert NumericError("x").exit_code == 3
    assert PipelineError("x", exit_code=5).exit_code == 5


def test_manifest_error_location():
    error = ManifestError("Malformed JSON", "data/train.jsonl", 3)
    assert isinstance(error, DataError)
    assert "data/train.jsonl:3" in str(error)
    assert error.line == 3


@pytest.mark.asyncio
async def test_worker_pool_keeps_order():
    """Test results come back in input order"""
    pool = WorkerPool(max_workers=3)
    results = await pool.run(list(range(10)), lambda x: x * x)
    assert results == [x * x for x in range(10)]
    assert pool.completed == 10


def test_worker_pool_rejects_zero_workers():
    with pytest.raises(ValueError):
        WorkerPool(max_workers=0)
