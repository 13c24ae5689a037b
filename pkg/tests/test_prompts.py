import pytest
from pydantic import ValidationError

from app.errors import ConfigurationError
from app.prompts import (
    MAX_LENGTH, PAD_ID, UNK_ID, Prompt, PromptPool, Vocabulary, build_pool, default_vocabulary, load_pool,
    normalize, pool_kinds, sample_prompt, save_pool, tokenize_prompt,
)
from app.seeding import numpy_rng


def test_named_pools():
    """Test the fixed pools carry their labels and sizes"""
    assert build_pool("skai_damaged").label == 1
    assert len(build_pool("skai_damaged").prompts) == 5
    assert build_pool("skai_undamaged").label == 0
    assert len(build_pool("skai_undamaged").prompts) == 4
    assert len(build_pool("portugal_wildfire").prompts) == 4
    assert build_pool("nepal_floods").prompts[0].disaster_kind == "flood"


def test_toy_pools():
    pool = build_pool("toy_flood_damaged")
    assert pool.label == 1
    assert len(pool.prompts) == 5
    assert all("flood" in p.text for p in pool.prompts)
    assert all(p.pool_name == "toy_flood_damaged" for p in pool.prompts)
    assert build_pool("toy_undamaged").label == 0
    assert "toy_wildfire_damaged" in pool_kinds()


def test_unknown_pool():
    with pytest.raises(ConfigurationError):
        build_pool("toy_earthquake_damaged")
    with pytest.raises(ConfigurationError):
        build_pool("nothing")


def test_mixed_labels_rejected():
    """Test a pool cannot mix damaged and undamaged prompts"""
    with pytest.raises(ValidationError):
        PromptPool(name="mixed", prompts=[Prompt(text="a house", label=0), Prompt(text="a ruin", label=1)])


def test_sample_prompt_is_seeded():
    pool = build_pool("moore_tornado")
    first = [sample_prompt(pool, numpy_rng(3)).text for _ in range(3)]
    assert first == [sample_prompt(pool, numpy_rng(3)).text for _ in range(3)]
    assert sample_prompt(pool, numpy_rng(3)).pool_name == "moore_tornado"


def test_normalize():
    assert normalize("A bird's-eye view, of A house.") == ["a", "birdseye", "view", "of", "a", "house"]


def test_tokenize_prompt():
    """Test fixed length, unknown words and padding"""
    vocab = Vocabulary(["a", "house", "view"])
    ids = tokenize_prompt("A view of a house", vocab, 8)
    assert len(ids) == 8
    assert ids[:5] == [vocab.index["a"], vocab.index["view"], UNK_ID, vocab.index["a"], vocab.index["house"]]
    assert ids[5:] == [PAD_ID] * 3

    long_text = " ".join(["house"] * 40)
    assert len(tokenize_prompt(long_text, vocab)) == MAX_LENGTH


def test_vocabulary():
    vocab = default_vocabulary()
    assert min(vocab.index.values()) == 2
    assert len(vocab) == len(vocab.to_list()) + 2
    assert vocab == Vocabulary(reversed(vocab.to_list()))
    for kind in pool_kinds():
        for prompt in build_pool(kind).prompts:
            assert UNK_ID not in tokenize_prompt(prompt.text, vocab)


def test_save_and_load_pool(tmp_path):
    pool = build_pool("toy_hurricane_damaged")
    path = save_pool(pool, tmp_path / "pool.json")
    loaded = load_pool(path)
    assert loaded.name == pool.name
    assert [p.text for p in loaded.prompts] == [p.text for p in pool.prompts]
    assert loaded.label == 1

    with pytest.raises(ConfigurationError):
        load_pool(tmp_path / "missing.json")
