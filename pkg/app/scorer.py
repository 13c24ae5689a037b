"""
Image-text similarity scorer and best-of-N selection.

A small convolutional image encoder and a bag-of-words text encoder map into
a shared space of unit vectors; the score of an image and a prompt is their
cosine similarity.
"""
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from app.config import ScorerConfig
from app.errors import ConfigurationError, ContractError, NumericError
from app.logging import StageLogger
from app.prompts import MAX_LENGTH, PAD_ID, Vocabulary, tokenize_prompt
from app.seeding import derive_seed, params_hash, seeded, torch_generator
from app.vqcodec import to_tensor

logger = logging.getLogger("disaster-synth.scorer")


class ImageEncoder(nn.Module):
    def __init__(self, embed_dim: int, hidden: int = 32):
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv2d(3, hidden, kernel_size=4, stride=2, padding=1), nn.ReLU(),
            nn.Conv2d(hidden, hidden * 2, kernel_size=4, stride=2, padding=1), nn.ReLU(),
            nn.Conv2d(hidden * 2, hidden * 2, kernel_size=4, stride=2, padding=1), nn.ReLU(),
            nn.AdaptiveAvgPool2d(1),
            nn.Flatten(),
            nn.Linear(hidden * 2, embed_dim),
        )

    def forward(self, x):
        return F.normalize(self.net(x), dim=-1)


class TextEncoder(nn.Module):
    def __init__(self, vocab_size: int, embed_dim: int):
        super().__init__()
        self.bag = nn.EmbeddingBag(vocab_size, embed_dim, mode="mean", padding_idx=PAD_ID)
        self.proj = nn.Linear(embed_dim, embed_dim)

    def forward(self, prompt_ids):
        return F.normalize(self.proj(self.bag(prompt_ids)), dim=-1)


class DualEncoder(nn.Module):
    def __init__(self, config: ScorerConfig, vocab_size: int):
        super().__init__()
        self.image = ImageEncoder(config.embed_dim)
        self.text = TextEncoder(vocab_size, config.embed_dim)
        self.logit_scale = nn.Parameter(torch.tensor(np.log(1 / 0.07), dtype=torch.float32))


@dataclass
class ScorerParams:
    model: DualEncoder
    config: ScorerConfig
    vocabulary: Vocabulary
    prompt_length: int = MAX_LENGTH
    losses: List[float] = field(default_factory=list)

    @property
    def hash(self) -> str:
        return params_hash(self.model)


def _prompt_tensor(prompt_ids) -> torch.Tensor:
    prompts = torch.as_tensor(prompt_ids, dtype=torch.long)
    return prompts[None] if prompts.dim() == 1 else prompts


def score_images(params: ScorerParams, images, prompt_ids) -> np.ndarray:
    """Similarity of each image to the prompt (or to its own row of prompts)"""
    x = to_tensor(images)
    prompts = _prompt_tensor(prompt_ids)
    if prompts.shape[0] == 1:
        prompts = prompts.expand(len(x), -1)
    if prompts.shape[0] != len(x):
        raise ContractError(f"{prompts.shape[0]} prompts for {len(x)} images")
    params.model.eval()
    with torch.no_grad():
        sims = (params.model.image(x) * params.model.text(prompts)).sum(dim=-1)
    return sims.clamp(-1.0, 1.0).numpy().astype(np.float64)


def similarity(image: np.ndarray, prompt_ids, params: ScorerParams) -> float:
    """Cosine similarity in [-1, 1]"""
    return float(score_images(params, image, prompt_ids)[0])


def best_index(scores: Sequence[float]) -> int:
    """First index of the maximum"""
    best = 0
    for i, score in enumerate(scores):
        if score > scores[best]:
            best = i
    return best


def select_best(candidates: Sequence[np.ndarray], prompt_ids, params: ScorerParams) -> Tuple[int, np.ndarray, float, List[float]]:
    """(index, image, score, all scores) of the highest scoring candidate"""
    if len(candidates) == 0:
        raise ContractError("select_best needs at least one candidate")
    if len(candidates) == 1:
        score = similarity(candidates[0], prompt_ids, params)
        return 0, candidates[0], score, [score]
    scores = score_images(params, np.stack(candidates), prompt_ids).tolist()
    index = best_index(scores)
    return index, candidates[index], scores[index], scores


def _soft_targets(prompts: torch.Tensor) -> torch.Tensor:
    # identical prompts in a batch are all positives for each other
    same = (prompts[:, None, :] == prompts[None, :, :]).all(dim=-1).float()
    return same / same.sum(dim=1, keepdim=True)


def contrastive_loss(image_embeds: torch.Tensor, text_embeds: torch.Tensor, logit_scale: torch.Tensor,
                     prompts: torch.Tensor) -> torch.Tensor:
    """Symmetric InfoNCE over in-batch negatives"""
    logits = logit_scale.exp().clamp(max=100.0) * image_embeds @ text_embeds.t()
    targets = _soft_targets(prompts)
    return (F.cross_entropy(logits, targets) + F.cross_entropy(logits.t(), targets)) / 2


def train_scorer(
    pairs: Sequence[Tuple[np.ndarray, str]],
    vocabulary: Vocabulary,
    config: ScorerConfig,
    prompt_length: int = MAX_LENGTH,
    stage_logger: Optional[StageLogger] = None,
) -> ScorerParams:
    """Contrastive training on matched (post image, prompt) pairs"""
    if len(pairs) == 0:
        raise ConfigurationError("train_scorer needs a nonempty dataset")
    stage_logger = stage_logger or StageLogger(logger, f"scorer-{config.seed}")
    stage_logger.log_start("train-scorer", config.model_dump())

    images = to_tensor([image for image, _ in pairs])
    prompts = torch.tensor([tokenize_prompt(text, vocabulary, prompt_length) for _, text in pairs])
    with seeded(derive_seed(config.seed, "scorer-init")):
        model = DualEncoder(config, len(vocabulary))
    generator = torch_generator(derive_seed(config.seed, "scorer-batches"))
    optimizer = torch.optim.Adam(model.parameters(), lr=config.lr)

    losses: List[float] = []
    model.train()
    batch_size = min(config.batch_size, len(images))
    for step in range(config.steps):
        index = torch.randperm(len(images), generator=generator)[:batch_size]
        loss = contrastive_loss(model.image(images[index]), model.text(prompts[index]), model.logit_scale, prompts[index])
        if not torch.isfinite(loss):
            stage_logger.log_error("train-scorer", f"loss became {loss.item()} at step {step}", "numeric")
            raise NumericError(f"scorer training diverged at step {step}")
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()
        losses.append(float(loss.item()))
        if (step + 1) % max(1, config.steps // 10) == 0:
            stage_logger.log_progress("train-scorer", step + 1, {"loss": losses[-1]})

    model.eval()
    params = ScorerParams(model=model, config=config, vocabulary=vocabulary, prompt_length=prompt_length, losses=losses)
    stage_logger.log_end("train-scorer", {"final_loss": losses[-1], "hash": params.hash})
    return params


def retrieval_accuracy(params: ScorerParams, images: Sequence[np.ndarray], prompt_ids, candidate_prompt_ids) -> float:
    """Share of images whose own prompt scores highest among the candidates"""
    candidates = _prompt_tensor(candidate_prompt_ids)
    own = _prompt_tensor(prompt_ids)
    x = to_tensor(list(images))
    params.model.eval()
    with torch.no_grad():
        sims = params.model.image(x) @ params.model.text(candidates).t()
    hits = 0
    for i, row in enumerate(sims.tolist()):
        picked = candidates[best_index(row)]
        hits += int(torch.equal(picked, own[i]))
    return hits / len(x)


def save_scorer(params: ScorerParams, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save({"state_dict": params.model.state_dict()}, path)
    sidecar = {
        "config": params.config.model_dump(),
        "seed": params.config.seed,
        "vocabulary": params.vocabulary.to_list(),
        "prompt_length": params.prompt_length,
        "losses": params.losses,
        "hash": params.hash,
    }
    path.with_suffix(".json").write_text(json.dumps(sidecar, indent=2), encoding="utf-8")
    return path


def load_scorer(path: Union[str, Path]) -> ScorerParams:
    path = Path(path)
    sidecar = json.loads(path.with_suffix(".json").read_text(encoding="utf-8"))
    config = ScorerConfig(**sidecar["config"])
    vocabulary = Vocabulary(sidecar["vocabulary"])
    model = DualEncoder(config, len(vocabulary))
    model.load_state_dict(torch.load(path, map_location="cpu")["state_dict"])
    model.eval()
    return ScorerParams(model=model, config=config, vocabulary=vocabulary,
                        prompt_length=sidecar["prompt_length"], losses=sidecar.get("losses", []))
