"""
Prompt pools and the toy text tokenizer.

A prompt's pool fixes its damage label: generated images inherit the label
of the pool their prompt was drawn from.
"""
import json
import re
from pathlib import Path
from typing import Dict, Iterable, List, Literal, Tuple, Union

import numpy as np
from pydantic import BaseModel, Field, model_validator

from app.errors import ConfigurationError

UNK_ID = 0
PAD_ID = 1
MAX_LENGTH = 16

_PUNCTUATION = re.compile(r"[^\w\s]")

SKAI_DAMAGED = [
    "An aerial view of a house damaged due to a hurricane.",
    "A bird's-eye view of a building destroyed by a hurricane.",
    "A top-down view of a house damaged by a hurricane.",
    "A satellite image of a building destroyed by a hurricane.",
    "A bird's-eye view of a building damaged by a hurricane.",
]
SKAI_UNDAMAGED = [
    "A satellite image of a house covered by trees.",
    "A bird's-eye view of a house surrounded by trees.",
    "A top-down view of a house under tree shade.",
    "An aerial view of an intact house under tree shade.",
]
MOORE_TORNADO = [
    "An aerial view of a house damaged due to a tornado.",
    "A bird's-eye view of a building destroyed by a tornado.",
    "A top-down view of a house damaged by a tornado.",
    "A satellite image of a building destroyed by a tornado.",
    "A bird's-eye view of a building damaged by a tornado.",
]
NEPAL_FLOODS = [
    "An aerial view of houses surrounded by a flood.",
    "A top-down view of houses damaged by floods.",
    "A top-down view of a house damaged by floods inundated in water.",
    "A satellite image of a building destroyed by a flood surrounded by water.",
    "A satellite image of houses that was destroyed by a flood surrounded by water and trees.",
]
PORTUGAL_WILDFIRE = [
    "An aerial view of forest land after it is torched by a wildfire.",
    "An aerial view of buildings after a wildfire.",
    "An aerial image of forest land scorched by a wildfire.",
    "A bird's-eye view of a forest region with completely scorched trees.",
]

_TOY_DAMAGED_TEMPLATES = [
    "An aerial view of a house damaged by a {kind}.",
    "A satellite image of a building destroyed by a {kind}.",
    "A top-down view of a roof torn apart after a {kind}.",
    "A bird's-eye view of a damaged building after the {kind}.",
]
_TOY_DAMAGE_DETAILS = {
    "hurricane": "A satellite image of debris scattered around a house after a hurricane.",
    "tornado": "A top-down view of a house with its roof scattered by a tornado.",
    "flood": "An aerial view of a building inundated in flood water.",
    "wildfire": "An aerial view of scorched land around a building after a wildfire.",
}
TOY_UNDAMAGED = [
    "A satellite image of a building.",
    "An aerial view of an intact house.",
    "A top-down view of a house surrounded by trees.",
    "A bird's-eye view of an undamaged building.",
]

# kind -> (prompt texts, label, disaster kind)
_NAMED_POOLS: Dict[str, Tuple[List[str], int, str]] = {
    "skai_damaged": (SKAI_DAMAGED, 1, "hurricane"),
    "skai_undamaged": (SKAI_UNDAMAGED, 0, "hurricane"),
    "moore_tornado": (MOORE_TORNADO, 1, "tornado"),
    "nepal_floods": (NEPAL_FLOODS, 1, "flood"),
    "portugal_wildfire": (PORTUGAL_WILDFIRE, 1, "wildfire"),
}
TOY_KINDS = ("hurricane", "tornado", "flood", "wildfire")


class Prompt(BaseModel):
    text: str
    label: Literal[0, 1]
    disaster_kind: str = "any"
    pool_name: str = ""


class PromptPool(BaseModel):
    name: str
    prompts: List[Prompt] = Field(min_length=1)
    vocabulary: List[str] = []

    @model_validator(mode="after")
    def check_pool(self):
        labels = {p.label for p in self.prompts}
        if len(labels) != 1:
            raise ValueError(f"pool {self.name} mixes labels {sorted(labels)}")
        if not self.vocabulary:
            self.vocabulary = build_vocabulary(p.text for p in self.prompts)
        for prompt in self.prompts:
            prompt.pool_name = self.name
        return self

    @property
    def label(self) -> int:
        return self.prompts[0].label


def normalize(text: str) -> List[str]:
    """Lowercase, drop punctuation, split on whitespace"""
    return _PUNCTUATION.sub("", text.lower()).split()


def build_vocabulary(texts: Iterable[str]) -> List[str]:
    return sorted({word for text in texts for word in normalize(text)})


def pool_kinds() -> List[str]:
    toy = [f"toy_{kind}_damaged" for kind in TOY_KINDS] + ["toy_undamaged"]
    return list(_NAMED_POOLS) + toy


def build_pool(kind: str) -> PromptPool:
    """A fixed named pool, or a toy pool for one disaster kind"""
    if kind in _NAMED_POOLS:
        texts, label, disaster = _NAMED_POOLS[kind]
    elif kind == "toy_undamaged":
        texts, label, disaster = TOY_UNDAMAGED, 0, "any"
    else:
        match = re.fullmatch(r"toy_(\w+)_damaged", kind)
        if not match or match.group(1) not in TOY_KINDS:
            raise ConfigurationError(f"Unknown prompt pool '{kind}'; expected one of {pool_kinds()}")
        disaster = match.group(1)
        texts = [t.format(kind=disaster) for t in _TOY_DAMAGED_TEMPLATES] + [_TOY_DAMAGE_DETAILS[disaster]]
        label = 1
    prompts = [Prompt(text=t, label=label, disaster_kind=disaster, pool_name=kind) for t in texts]
    return PromptPool(name=kind, prompts=prompts)


def sample_prompt(pool: PromptPool, rng: np.random.Generator) -> Prompt:
    """Uniform draw from the pool"""
    return pool.prompts[int(rng.integers(0, len(pool.prompts)))]


class Vocabulary:
    """Word -> id map shared by the generator and the scorer (0 = UNK, 1 = PAD)"""

    def __init__(self, words: Iterable[str]):
        self.words = sorted(set(words))
        self.index = {word: i + 2 for i, word in enumerate(self.words)}

    def __len__(self) -> int:
        return len(self.words) + 2

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and self.words == other.words

    def to_list(self) -> List[str]:
        return list(self.words)


def shared_vocabulary(pools: Iterable[PromptPool]) -> Vocabulary:
    return Vocabulary(word for pool in pools for word in pool.vocabulary)


def default_vocabulary() -> Vocabulary:
    """Vocabulary over every built-in pool"""
    return shared_vocabulary(build_pool(kind) for kind in pool_kinds())


def tokenize_prompt(text: str, vocabulary: Union[Vocabulary, Iterable[str]], max_length: int = MAX_LENGTH) -> List[int]:
    """Fixed-length id sequence: words to ids, unknown to UNK, padded with PAD"""
    if not isinstance(vocabulary, Vocabulary):
        vocabulary = Vocabulary(vocabulary)
    ids = [vocabulary.index.get(word, UNK_ID) for word in normalize(text)][:max_length]
    return ids + [PAD_ID] * (max_length - len(ids))


def save_pool(pool: PromptPool, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "name": pool.name,
        "prompts": [{"text": p.text, "label": p.label, "disaster_kind": p.disaster_kind} for p in pool.prompts],
        "vocabulary": pool.vocabulary,
    }
    path.write_text(json.dumps(payload, indent=2), encoding="utf-8")
    return path


def load_pool(path: Union[str, Path]) -> PromptPool:
    path = Path(path)
    if not path.is_file():
        raise ConfigurationError(f"Prompt pool file not found: {path}")
    try:
        return PromptPool.model_validate_json(path.read_text(encoding="utf-8"))
    except ValueError as e:
        raise ConfigurationError(f"Invalid prompt pool {path}: {e}")
