"""
Siamese damage classifier and its training variants.

One patch-transformer encoder embeds both the pre and the post image; the
two feature vectors are concatenated (pre first) and a two-layer MLP head
turns them into a single damage logit.

Variants:
    R0  end-to-end on real source data
    R1  end-to-end on synthetic target data only
    R2  end-to-end on real + synthetic, sampled uniformly from the union
    R3  R0, then end-to-end fine-tuning on synthetic data
    R4  R0, then head-only fine-tuning on synthetic data (encoder frozen)
"""
import copy
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from app.config import VARIANTS, TrainConfig
from app.errors import ConfigurationError, ContractError, NumericError
from app.layers import TransformerBlock
from app.logging import StageLogger
from app.metrics import auprc
from app.seeding import derive_seed, params_hash, seeded, torch_generator
from app.toyworld import LabeledPair
from app.vqcodec import to_tensor

logger = logging.getLogger("disaster-synth.classifier")


class PatchEncoder(nn.Module):
    def __init__(self, config: TrainConfig, image_size: int):
        super().__init__()
        if image_size % config.patch:
            raise ConfigurationError(f"patch {config.patch} does not divide image size {image_size}")
        if config.width % config.heads:
            raise ConfigurationError(f"classifier width {config.width} is not divisible by {config.heads} heads")
        patches = (image_size // config.patch) ** 2
        self.embed = nn.Conv2d(3, config.width, kernel_size=config.patch, stride=config.patch)
        self.pos = nn.Parameter(torch.zeros(1, patches, config.width))
        nn.init.trunc_normal_(self.pos, 0.0, 0.02)
        self.blocks = nn.ModuleList([TransformerBlock(config.width, config.heads) for _ in range(config.depth)])
        self.norm = nn.LayerNorm(config.width)

    def forward(self, x):
        h = self.embed(x).flatten(2).transpose(1, 2) + self.pos
        for block in self.blocks:
            h = block(h)
        return self.norm(h).mean(dim=1)


class SiameseClassifier(nn.Module):
    def __init__(self, config: TrainConfig, image_size: int):
        super().__init__()
        d = config.width
        self.image_size = image_size
        self.encoder = PatchEncoder(config, image_size)
        self.head = nn.Sequential(nn.Linear(2 * d, d), nn.ReLU(), nn.Linear(d, 1))

    def features(self, pre, post):
        """Shared-encoder embeddings, pre first: (B, 2 * width)"""
        return torch.cat([self.encoder(pre), self.encoder(post)], dim=-1)

    def forward(self, pre, post):
        return self.head(self.features(pre, post)).squeeze(-1)


@dataclass
class ClassifierParams:
    model: SiameseClassifier
    config: TrainConfig
    stage: str
    history: List[Tuple[int, float]] = field(default_factory=list)
    best_iteration: int = 0

    @property
    def hash(self) -> str:
        return params_hash(self.model)

    def encoder_state(self) -> Dict[str, torch.Tensor]:
        return {k: v.clone() for k, v in self.model.encoder.state_dict().items()}


def _pair_tensors(pairs: Sequence[LabeledPair]) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    pre = to_tensor([p.pre for p in pairs])
    post = to_tensor([p.post for p in pairs])
    labels = torch.tensor([p.label for p in pairs], dtype=torch.float32)
    return pre, post, labels


def forward(pre, post, params: ClassifierParams) -> torch.Tensor:
    """Logit per pair (eval mode, no gradients)"""
    pre_x, post_x = to_tensor(pre), to_tensor(post)
    size = params.model.image_size
    if pre_x.shape != post_x.shape or tuple(pre_x.shape[-2:]) != (size, size):
        raise ContractError(
            f"pre {tuple(pre_x.shape)} and post {tuple(post_x.shape)} must both be {size}x{size} images"
        )
    params.model.eval()
    with torch.no_grad():
        return params.model(pre_x, post_x)


def bce_loss(logit: torch.Tensor, label: torch.Tensor) -> torch.Tensor:
    """Binary cross-entropy on logits (log-sum-exp form)"""
    logit = torch.as_tensor(logit)
    return F.binary_cross_entropy_with_logits(logit, torch.as_tensor(label, dtype=logit.dtype))


def decide(probability: float) -> int:
    """1 (damaged) iff the probability is strictly above 0.5"""
    return int(probability > 0.5)


def predict(pre, post, params: ClassifierParams) -> Tuple[float, int]:
    """(probability, decision); damaged iff probability > 0.5"""
    probability = float(torch.sigmoid(forward(pre, post, params)[0].double()))
    return probability, decide(probability)


def predict_proba(params: ClassifierParams, pairs: Sequence[LabeledPair], chunk: int = 256) -> np.ndarray:
    probs = []
    for start in range(0, len(pairs), chunk):
        part = pairs[start:start + chunk]
        logits = forward(np.stack([p.pre for p in part]), np.stack([p.post for p in part]), params)
        probs.append(torch.sigmoid(logits).numpy())
    return np.concatenate(probs).astype(np.float64)


def sample_batch(size: int, batch_size: int, generator: torch.Generator) -> torch.Tensor:
    """Indices drawn uniformly with replacement from range(size)"""
    return torch.randint(0, size, (batch_size,), generator=generator)


def _validation_auprc(model: SiameseClassifier, val: Tuple[torch.Tensor, torch.Tensor, torch.Tensor]) -> float:
    pre, post, labels = val
    model.eval()
    with torch.no_grad():
        scores = torch.cat([
            torch.sigmoid(model(pre[i:i + 256], post[i:i + 256])) for i in range(0, len(pre), 256)
        ])
    model.train()
    return auprc(scores.numpy(), labels.numpy().astype(int))


def _fit(
    model: SiameseClassifier,
    groups: List[Dict],
    train: Sequence[LabeledPair],
    val: Sequence[LabeledPair],
    config: TrainConfig,
    stage: str,
    stage_logger: StageLogger,
) -> Tuple[List[Tuple[int, float]], int]:
    """Adam over the given parameter groups with early stopping on validation AUPRC.

    The model ends up holding the best checkpoint; the earliest best wins.
    """
    if len(train) == 0:
        raise ConfigurationError(f"{stage} needs nonempty training data")
    if len(val) == 0 or not any(p.label for p in val):
        raise ConfigurationError(f"{stage} needs validation data with at least one damaged pair")
    pre, post, labels = _pair_tensors(train)
    val_tensors = _pair_tensors(val)
    generator = torch_generator(derive_seed(config.seed, stage, "batches"))
    optimizer = torch.optim.Adam(groups)

    history: List[Tuple[int, float]] = []
    best_score, best_iteration, best_state, stale = -1.0, 0, None, 0
    model.train()
    for iteration in range(1, config.max_iterations + 1):
        index = sample_batch(len(pre), config.batch_size, generator)
        loss = bce_loss(model(pre[index], post[index]), labels[index])
        if not torch.isfinite(loss):
            stage_logger.log_error(stage, f"loss became {loss.item()} at iteration {iteration}", "numeric")
            raise NumericError(f"{stage} diverged at iteration {iteration}")
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()

        if iteration % config.eval_every == 0 or iteration == config.max_iterations:
            score = _validation_auprc(model, val_tensors)
            history.append((iteration, score))
            stage_logger.log_progress(stage, iteration, {"loss": float(loss.item()), "val_auprc": score})
            if score > best_score:
                best_score, best_iteration, stale = score, iteration, 0
                best_state = copy.deepcopy(model.state_dict())
            else:
                stale += 1
                if stale >= config.patience:
                    logger.debug(f"{stage}: early stop at iteration {iteration}, best {best_iteration}")
                    break

    model.load_state_dict(best_state)
    model.eval()
    return history, best_iteration


def _new_model(config: TrainConfig, image_size: int) -> SiameseClassifier:
    with seeded(derive_seed(config.seed, "classifier-init")):
        return SiameseClassifier(config, image_size)


def _image_size(pairs: Sequence[LabeledPair]) -> int:
    return int(pairs[0].pre.shape[0])


def _end_to_end(model, train, val, config, stage, stage_logger) -> ClassifierParams:
    groups = [
        {"params": model.encoder.parameters(), "lr": config.lr_backbone},
        {"params": model.head.parameters(), "lr": config.lr_head},
    ]
    stage_logger.log_start(stage, {"train": len(train), "val": len(val), **config.model_dump()})
    history, best = _fit(model, groups, train, val, config, stage, stage_logger)
    params = ClassifierParams(model=model, config=config, stage=stage, history=history, best_iteration=best)
    stage_logger.log_end(stage, {"best_iteration": best, "best_val_auprc": max(s for _, s in history)})
    return params


def train_stage1(
    source_train: Sequence[LabeledPair],
    val: Sequence[LabeledPair],
    config: TrainConfig,
    stage: str = "R0",
    stage_logger: Optional[StageLogger] = None,
) -> ClassifierParams:
    """End-to-end training with per-group learning rates (backbone, head)"""
    if len(source_train) == 0:
        raise ConfigurationError("train_stage1 needs labeled source data")
    stage_logger = stage_logger or StageLogger(logger, f"classifier-{config.seed}")
    model = _new_model(config, _image_size(source_train))
    return _end_to_end(model, source_train, val, config, stage, stage_logger)


def train_stage2_lastlayer(
    base: ClassifierParams,
    synthetic_train: Sequence[LabeledPair],
    target_val: Sequence[LabeledPair],
    config: TrainConfig,
    stage_logger: Optional[StageLogger] = None,
) -> ClassifierParams:
    """Head-only fine-tuning on synthetic pairs; encoder weights stay byte-identical"""
    stage_logger = stage_logger or StageLogger(logger, f"classifier-{config.seed}")
    model = copy.deepcopy(base.model)
    for p in model.encoder.parameters():
        p.requires_grad_(False)
    stage_logger.log_start("R4", {"train": len(synthetic_train), "val": len(target_val)})
    history, best = _fit(
        model, [{"params": model.head.parameters(), "lr": config.lr_head}],
        synthetic_train, target_val, config, "R4", stage_logger,
    )
    stage_logger.log_end("R4", {"best_iteration": best})
    return ClassifierParams(model=model, config=config, stage="R4", history=history, best_iteration=best)


def train_variant(
    variant: str,
    real_source: Optional[Sequence[LabeledPair]],
    synthetic_target: Optional[Sequence[LabeledPair]],
    target_val: Optional[Sequence[LabeledPair]],
    config: TrainConfig,
    source_val: Optional[Sequence[LabeledPair]] = None,
    base: Optional[ClassifierParams] = None,
    stage_logger: Optional[StageLogger] = None,
) -> ClassifierParams:
    """Train one of R0..R4; base, when given, is a finished R0 to start R3/R4 from"""
    if variant not in VARIANTS:
        raise ConfigurationError(f"unknown variant '{variant}'; expected one of {list(VARIANTS)}")
    val = target_val if config.validation == "target" else source_val
    if not val:
        raise ConfigurationError(f"{variant} needs {config.validation} validation data")
    needs_real = variant in ("R0", "R2") or (variant in ("R3", "R4") and base is None)
    needs_synthetic = variant != "R0"
    if needs_real and not real_source:
        raise ConfigurationError(f"{variant} needs labeled source data")
    if needs_synthetic and not synthetic_target:
        raise ConfigurationError(f"{variant} needs synthetic target data")
    stage_logger = stage_logger or StageLogger(logger, f"classifier-{config.seed}")

    if variant == "R0":
        return train_stage1(real_source, val, config, "R0", stage_logger)
    if variant == "R1":
        return train_stage1(synthetic_target, val, config, "R1", stage_logger)
    if variant == "R2":
        return train_stage1(list(real_source) + list(synthetic_target), val, config, "R2", stage_logger)

    base = base or train_stage1(real_source, val, config, "R0", stage_logger)
    if variant == "R3":
        return _end_to_end(copy.deepcopy(base.model), synthetic_target, val, config, "R3", stage_logger)
    return train_stage2_lastlayer(base, synthetic_target, val, config, stage_logger)


def save_classifier(params: ClassifierParams, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save({"state_dict": params.model.state_dict()}, path)
    sidecar = {
        "stage": params.stage,
        "config": params.config.model_dump(),
        "seed": params.config.seed,
        "image_size": params.model.image_size,
        "history": params.history,
        "best_iteration": params.best_iteration,
        "hash": params.hash,
    }
    path.with_suffix(".json").write_text(json.dumps(sidecar, indent=2), encoding="utf-8")
    return path


def load_classifier(path: Union[str, Path]) -> ClassifierParams:
    path = Path(path)
    sidecar = json.loads(path.with_suffix(".json").read_text(encoding="utf-8"))
    config = TrainConfig(**sidecar["config"])
    model = SiameseClassifier(config, sidecar["image_size"])
    model.load_state_dict(torch.load(path, map_location="cpu")["state_dict"])
    model.eval()
    return ClassifierParams(
        model=model, config=config, stage=sidecar["stage"],
        history=[tuple(h) for h in sidecar["history"]], best_iteration=sidecar["best_iteration"],
    )
