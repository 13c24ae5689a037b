"""
Text-conditioned masked-token transformer.

The prompt's word embeddings are prepended to the image token sequence and
attended to by every block. Training masks a random share of each token grid
and predicts the original ids there; editing fills MASK positions over a few
parallel decoding steps, keeping the most confident predictions first.
"""
import copy
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from app.config import AdapterConfig, GeneratorConfig, config_hash
from app.errors import ConfigurationError, ContractError, NumericError
from app.layers import TransformerBlock
from app.logging import StageLogger
from app.prompts import PAD_ID, MAX_LENGTH, PromptPool, Vocabulary, sample_prompt, tokenize_prompt
from app.seeding import derive_seed, numpy_rng, params_hash, seeded, torch_generator
from app.vqcodec import CodecParams, tokenize

logger = logging.getLogger("disaster-synth.generator")

PromptIds = Union[Sequence[int], torch.Tensor]


class MaskedTokenTransformer(nn.Module):
    def __init__(self, config: GeneratorConfig, codebook_size: int, grid: Tuple[int, int], vocab_size: int,
                 prompt_length: int = MAX_LENGTH):
        super().__init__()
        if config.width % config.heads:
            raise ConfigurationError(f"generator width {config.width} is not divisible by {config.heads} heads")
        self.codebook_size = codebook_size
        self.grid = tuple(grid)
        self.prompt_length = prompt_length
        width = config.width
        # codebook ids plus MASK
        self.token_embed = nn.Embedding(codebook_size + 1, width)
        self.word_embed = nn.Embedding(vocab_size, width, padding_idx=PAD_ID)
        self.row_embed = nn.Parameter(torch.zeros(grid[0], 1, width))
        self.col_embed = nn.Parameter(torch.zeros(1, grid[1], width))
        self.prompt_pos = nn.Parameter(torch.zeros(prompt_length, width))
        for p in (self.row_embed, self.col_embed, self.prompt_pos):
            nn.init.trunc_normal_(p, 0.0, 0.02)
        self.blocks = nn.ModuleList([TransformerBlock(width, config.heads) for _ in range(config.layers)])
        self.norm = nn.LayerNorm(width)
        # never predicts MASK
        self.head = nn.Linear(width, codebook_size)

    def add_adapters(self, rank: int) -> List[nn.Parameter]:
        params: List[nn.Parameter] = []
        for block in self.blocks:
            params += list(block.add_adapter(rank).parameters())
        return params

    def forward(self, tokens: torch.Tensor, prompt_ids: torch.Tensor) -> torch.Tensor:
        """(B, rows, cols) ids and (B, L) prompt ids -> (B, rows*cols, K) logits"""
        batch = tokens.shape[0]
        positions = (self.row_embed + self.col_embed).reshape(-1, self.token_embed.embedding_dim)
        x = self.token_embed(tokens.reshape(batch, -1)) + positions
        words = self.word_embed(prompt_ids) + self.prompt_pos
        h = torch.cat([words, x], dim=1)
        padding = torch.cat(
            [prompt_ids == PAD_ID, torch.zeros(batch, x.shape[1], dtype=torch.bool, device=x.device)], dim=1
        )
        for block in self.blocks:
            h = block(h, padding)
        return self.head(self.norm(h[:, self.prompt_length:]))


@dataclass
class GeneratorParams:
    model: MaskedTokenTransformer
    config: GeneratorConfig
    vocabulary: Vocabulary
    codec_hash: str
    adapter_config: Optional[AdapterConfig] = None
    losses: List[float] = field(default_factory=list)

    @property
    def adapter(self) -> bool:
        return self.adapter_config is not None

    @property
    def mask_id(self) -> int:
        return self.model.codebook_size

    @property
    def hash(self) -> str:
        return params_hash(self.model)

    @property
    def vocab_hash(self) -> str:
        return config_hash(self.vocabulary.to_list())

    def base_state(self) -> Dict[str, torch.Tensor]:
        return {k: v for k, v in self.model.state_dict().items() if ".adapter." not in k}


@dataclass
class DecodeSchedule:
    """Cosine masking schedule: mask_ratio(t) = cos(pi * t / (2T))"""
    total_steps: int = 8
    temperature: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.total_steps < 1:
            raise ConfigurationError(f"total_steps must be >= 1, got {self.total_steps}")
        if self.temperature < 0:
            raise ConfigurationError(f"temperature must be >= 0, got {self.temperature}")

    def mask_ratio(self, t: int) -> float:
        if t >= self.total_steps:
            return 0.0
        return math.cos(math.pi * t / (2 * self.total_steps))

    def remaining_counts(self, initial: int) -> List[int]:
        """Masked positions left after each step; every step unmasks at least one while any remain"""
        counts: List[int] = []
        previous = initial
        for t in range(1, self.total_steps + 1):
            # rounding guards ceil against float noise on exact products
            target = math.ceil(round(self.mask_ratio(t) * initial, 9))
            previous = max(0, min(target, previous - 1))
            counts.append(previous)
        return counts


def _as_batch(masked: torch.Tensor, prompt_ids: PromptIds) -> Tuple[torch.Tensor, torch.Tensor, bool]:
    tokens = torch.as_tensor(masked, dtype=torch.long)
    single = tokens.dim() == 2
    if single:
        tokens = tokens[None]
    prompts = torch.as_tensor(prompt_ids, dtype=torch.long)
    if prompts.dim() == 1:
        prompts = prompts[None].expand(tokens.shape[0], -1)
    return tokens, prompts, single


def _check_inputs(params: GeneratorParams, tokens: torch.Tensor, prompts: torch.Tensor) -> None:
    model = params.model
    if tokens.dim() != 3 or tuple(tokens.shape[1:]) != model.grid:
        raise ContractError(f"token grid {tuple(tokens.shape)} does not match generator grid {model.grid}")
    if tokens.min() < 0 or tokens.max() > params.mask_id:
        raise ContractError(f"token ids must lie in [0, {params.mask_id}]")
    if prompts.shape != (tokens.shape[0], model.prompt_length):
        raise ContractError(
            f"prompt ids {tuple(prompts.shape)} do not match ({tokens.shape[0]}, {model.prompt_length})"
        )
    if prompts.min() < 0 or prompts.max() >= len(params.vocabulary):
        raise ContractError("prompt ids fall outside the generator vocabulary")


def predict_tokens(params: GeneratorParams, masked: torch.Tensor, prompt_ids: PromptIds) -> torch.Tensor:
    """Logits over the K codebook classes at every grid position.

    A single (rows, cols) grid gives (rows*cols, K); a batch gives (B, rows*cols, K).
    """
    tokens, prompts, single = _as_batch(masked, prompt_ids)
    _check_inputs(params, tokens, prompts)
    params.model.eval()
    with torch.no_grad():
        logits = params.model(tokens, prompts)
    return logits[0] if single else logits


def parallel_decode(
    params: GeneratorParams,
    masked: torch.Tensor,
    prompt_ids: PromptIds,
    schedule: DecodeSchedule,
    generator: Union[torch.Generator, Sequence[torch.Generator], None] = None,
    trace: Optional[List[int]] = None,
) -> torch.Tensor:
    """Fill every MASK position; unmasked positions are returned untouched.

    Each step runs one forward pass over the rows that still have positions
    to fill, samples all masked positions, keeps the most confident samples
    (probability of the sampled id, ties to the lowest flat index) and leaves
    the rest masked according to each row's schedule.

    Every row samples from its own stream. generator may be one generator per
    row; a single generator seeds the row streams (and is used directly for a
    single grid). trace, when given, receives the number of positions of the
    first row still masked after each step.
    """
    tokens, prompts, single = _as_batch(masked, prompt_ids)
    _check_inputs(params, tokens, prompts)
    streams = _row_generators(tokens.shape[0], schedule, generator)
    params.model.eval()

    batch = tokens.shape[0]
    flat = tokens.reshape(batch, -1).clone()
    pending = flat == params.mask_id
    counts = [schedule.remaining_counts(int(n)) for n in pending.sum(dim=1)]
    record = trace is not None and bool(pending[0].any())

    with torch.no_grad():
        for step in range(schedule.total_steps):
            fills = [int(pending[i].sum()) - counts[i][step] for i in range(batch)]
            active = [i for i in range(batch) if fills[i] > 0]
            if active:
                rows = torch.tensor(active)
                logits = params.model(flat[rows].reshape(-1, *tokens.shape[1:]), prompts[rows])
                for j, i in enumerate(active):
                    _fill_row(flat[i], pending[i], logits[j], fills[i], schedule.temperature, streams[i])
            if record:
                trace.append(int(pending[0].sum()))

    result = flat.reshape(tokens.shape)
    return result[0] if single else result


def _row_generators(
    batch: int, schedule: DecodeSchedule, generator: Union[torch.Generator, Sequence[torch.Generator], None]
) -> List[torch.Generator]:
    if generator is not None and not isinstance(generator, torch.Generator):
        streams = list(generator)
        if len(streams) != batch:
            raise ContractError(f"{len(streams)} generators for a batch of {batch}")
        return streams
    generator = generator or torch_generator(schedule.seed)
    if batch == 1:
        return [generator]
    seeds = torch.randint(0, 2 ** 62, (batch,), generator=generator).tolist()
    return [torch_generator(int(seed)) for seed in seeds]


def _fill_row(flat, pending, logits, fill, temperature, generator):
    if temperature == 0:
        probs = torch.softmax(logits, dim=-1)
        sampled = logits.argmax(dim=-1)
    else:
        probs = torch.softmax(logits / temperature, dim=-1)
        sampled = torch.multinomial(probs, 1, generator=generator).squeeze(-1)
    confidence = probs.gather(1, sampled[:, None]).squeeze(-1)
    confidence = torch.where(pending, confidence, torch.full_like(confidence, -math.inf))
    chosen = torch.sort(confidence, descending=True, stable=True).indices[:fill]
    flat[chosen] = sampled[chosen]
    pending[chosen] = False


def _random_masks(batch: int, positions: int, low: float, high: float, generator: torch.Generator) -> torch.Tensor:
    """Mask a uniform fraction in [low, high] of each row, at least one position"""
    ratios = low + (high - low) * torch.rand(batch, generator=generator)
    counts = (ratios * positions).round().clamp(min=1).long()
    ranks = torch.rand(batch, positions, generator=generator).argsort(dim=1).argsort(dim=1)
    return ranks < counts[:, None]


def _tokenize_all(codec: CodecParams, images: Sequence[np.ndarray], chunk: int = 256) -> torch.Tensor:
    parts = [tokenize(codec, np.stack(images[i:i + chunk])) for i in range(0, len(images), chunk)]
    return torch.cat(parts)


def _fit(
    model: MaskedTokenTransformer,
    trainable: List[nn.Parameter],
    tokens: torch.Tensor,
    prompts: torch.Tensor,
    steps: int,
    batch_size: int,
    lr: float,
    mask_range: Tuple[float, float],
    generator: torch.Generator,
    stage: str,
    stage_logger: StageLogger,
) -> List[float]:
    optimizer = torch.optim.Adam(trainable, lr=lr)
    mask_id = model.codebook_size
    positions = tokens.shape[1] * tokens.shape[2]
    losses: List[float] = []
    model.train()
    for step in range(steps):
        index = torch.randint(0, len(tokens), (batch_size,), generator=generator)
        target = tokens[index]
        mask = _random_masks(batch_size, positions, mask_range[0], mask_range[1], generator)
        inputs = torch.where(mask, torch.full_like(target.reshape(batch_size, -1), mask_id),
                             target.reshape(batch_size, -1))
        logits = model(inputs.reshape(target.shape), prompts[index])
        loss = F.cross_entropy(logits[mask], target.reshape(batch_size, -1)[mask])
        if not torch.isfinite(loss):
            stage_logger.log_error(stage, f"loss became {loss.item()} at step {step}", "numeric")
            raise NumericError(f"{stage} diverged at step {step}")
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()
        losses.append(float(loss.item()))
        if (step + 1) % max(1, steps // 10) == 0:
            stage_logger.log_progress(stage, step + 1, {"loss": losses[-1]})
    model.eval()
    return losses


def train_generator(
    pairs: Sequence[Tuple[np.ndarray, str]],
    codec: CodecParams,
    vocabulary: Vocabulary,
    config: GeneratorConfig,
    prompt_length: int = MAX_LENGTH,
    stage_logger: Optional[StageLogger] = None,
) -> GeneratorParams:
    """Masked-token modeling of post images given their prompts"""
    if len(pairs) == 0:
        raise ConfigurationError("train_generator needs a nonempty dataset")
    stage_logger = stage_logger or StageLogger(logger, f"generator-{config.seed}")
    stage_logger.log_start("train-generator", config.model_dump())

    tokens = _tokenize_all(codec, [image for image, _ in pairs])
    prompts = torch.tensor([tokenize_prompt(text, vocabulary, prompt_length) for _, text in pairs])
    grid = (codec.model.grid_size, codec.model.grid_size)
    with seeded(derive_seed(config.seed, "generator-init")):
        model = MaskedTokenTransformer(config, codec.model.codebook_size, grid, len(vocabulary), prompt_length)

    losses = _fit(
        model, list(model.parameters()), tokens, prompts, config.steps, config.batch_size, config.lr,
        (config.mask_min, config.mask_max), torch_generator(derive_seed(config.seed, "generator-batches")),
        "train-generator", stage_logger,
    )
    params = GeneratorParams(model=model, config=config, vocabulary=vocabulary, codec_hash=codec.hash, losses=losses)
    stage_logger.log_end("train-generator", {"final_loss": losses[-1], "hash": params.hash})
    return params


def finetune_adapters(
    target_pre_images: Sequence[np.ndarray],
    undamaged_pool: PromptPool,
    base: GeneratorParams,
    codec: CodecParams,
    config: AdapterConfig,
    stage_logger: Optional[StageLogger] = None,
) -> GeneratorParams:
    """Train bottleneck adapters after each block on (target pre-image, undamaged prompt) pairs.

    The base weights are frozen; the returned params share none of their
    tensors with base.
    """
    if len(target_pre_images) == 0:
        raise ConfigurationError("finetune_adapters needs target images")
    if base.adapter:
        raise ContractError("generator already carries adapters")
    if base.codec_hash != codec.hash:
        raise ConfigurationError(f"generator was trained with codec {base.codec_hash}, got {codec.hash}")
    stage_logger = stage_logger or StageLogger(logger, f"adapter-{config.seed}")
    stage_logger.log_start("finetune-generator", config.model_dump())

    model = copy.deepcopy(base.model)
    for p in model.parameters():
        p.requires_grad_(False)
    with seeded(derive_seed(config.seed, "adapter-init")):
        trainable = model.add_adapters(config.rank)

    rng = numpy_rng(derive_seed(config.seed, "adapter-prompts"))
    texts = [sample_prompt(undamaged_pool, rng).text for _ in target_pre_images]
    tokens = _tokenize_all(codec, list(target_pre_images))
    prompts = torch.tensor([tokenize_prompt(t, base.vocabulary, model.prompt_length) for t in texts])

    losses = _fit(
        model, trainable, tokens, prompts, config.steps, config.batch_size, config.lr,
        (base.config.mask_min, base.config.mask_max), torch_generator(derive_seed(config.seed, "adapter-batches")),
        "finetune-generator", stage_logger,
    )
    params = GeneratorParams(
        model=model, config=base.config, vocabulary=base.vocabulary, codec_hash=base.codec_hash,
        adapter_config=config, losses=losses,
    )
    stage_logger.log_end("finetune-generator", {"final_loss": losses[-1], "hash": params.hash})
    return params


def masked_token_cross_entropy(
    params: GeneratorParams,
    codec: CodecParams,
    images: Sequence[np.ndarray],
    prompt_ids: PromptIds,
    seed: int = 0,
    mask_fraction: float = 0.5,
) -> float:
    """Mean cross-entropy at masked positions, with masks fixed by seed"""
    if len(images) == 0:
        raise ContractError("masked_token_cross_entropy needs images")
    tokens = _tokenize_all(codec, list(images))
    prompts = torch.as_tensor(prompt_ids, dtype=torch.long)
    if prompts.dim() == 1:
        prompts = prompts[None].expand(len(tokens), -1)
    batch, positions = len(tokens), tokens.shape[1] * tokens.shape[2]
    mask = _random_masks(batch, positions, mask_fraction, mask_fraction, torch_generator(seed))
    flat = tokens.reshape(batch, -1)
    inputs = torch.where(mask, torch.full_like(flat, params.mask_id), flat).reshape(tokens.shape)
    logits = predict_tokens(params, inputs, prompts)
    return float(F.cross_entropy(logits[mask], flat[mask]))


def save_generator(params: GeneratorParams, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save({"state_dict": params.model.state_dict()}, path)
    sidecar = {
        "config": params.config.model_dump(),
        "adapter_config": params.adapter_config.model_dump() if params.adapter_config else None,
        "adapter": params.adapter,
        "seed": params.config.seed,
        "vocabulary": params.vocabulary.to_list(),
        "vocab_hash": params.vocab_hash,
        "codec_hash": params.codec_hash,
        "codebook_size": params.model.codebook_size,
        "grid": list(params.model.grid),
        "prompt_length": params.model.prompt_length,
        "losses": params.losses,
        "hash": params.hash,
    }
    path.with_suffix(".json").write_text(json.dumps(sidecar, indent=2), encoding="utf-8")
    return path


def load_generator(path: Union[str, Path]) -> GeneratorParams:
    path = Path(path)
    sidecar = json.loads(path.with_suffix(".json").read_text(encoding="utf-8"))
    config = GeneratorConfig(**sidecar["config"])
    vocabulary = Vocabulary(sidecar["vocabulary"])
    model = MaskedTokenTransformer(
        config, sidecar["codebook_size"], tuple(sidecar["grid"]), len(vocabulary), sidecar["prompt_length"]
    )
    adapter_config = AdapterConfig(**sidecar["adapter_config"]) if sidecar.get("adapter_config") else None
    if adapter_config is not None:
        model.add_adapters(adapter_config.rank)
    model.load_state_dict(torch.load(path, map_location="cpu")["state_dict"])
    model.eval()
    return GeneratorParams(
        model=model, config=config, vocabulary=vocabulary, codec_hash=sidecar["codec_hash"],
        adapter_config=adapter_config, losses=sidecar.get("losses", []),
    )
