"""
Vector-quantized image codec.

Images are mapped by a strided convolutional encoder to a (H/f) x (W/f) grid
of e-dimensional features, each snapped to its nearest codebook row. The id
K (one past the codebook) is reserved as the MASK token and is never
produced by quantization.
"""
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Union

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from app.config import CodecConfig
from app.errors import ConfigurationError, ContractError, NumericError
from app.logging import StageLogger
from app.seeding import derive_seed, params_hash, seeded, torch_generator

logger = logging.getLogger("disaster-synth.codec")

ImageBatch = Union[np.ndarray, Sequence[np.ndarray]]


class Encoder(nn.Module):
    def __init__(self, embed_dim: int, hidden: int, factor: int):
        super().__init__()
        layers: List[nn.Module] = []
        channels = 3
        for i in range(int(math.log2(factor))):
            out = hidden // 2 if i == 0 else hidden
            layers += [nn.Conv2d(channels, out, kernel_size=4, stride=2, padding=1), nn.ReLU()]
            channels = out
        layers.append(nn.Conv2d(channels, embed_dim, kernel_size=1))
        self.net = nn.Sequential(*layers)

    def forward(self, x):
        return self.net(x)


class Decoder(nn.Module):
    def __init__(self, embed_dim: int, hidden: int, factor: int):
        super().__init__()
        layers: List[nn.Module] = [nn.Conv2d(embed_dim, hidden, kernel_size=3, padding=1), nn.ReLU()]
        steps = int(math.log2(factor))
        channels = hidden
        for i in range(steps):
            last = i == steps - 1
            out = 3 if last else (hidden // 2 if i == steps - 2 else hidden)
            layers.append(nn.ConvTranspose2d(channels, out, kernel_size=4, stride=2, padding=1))
            if not last:
                layers.append(nn.ReLU())
            channels = out
        self.net = nn.Sequential(*layers)

    def forward(self, z):
        return torch.sigmoid(self.net(z))


class VQCodec(nn.Module):
    """Encoder, codebook and decoder"""

    def __init__(self, config: CodecConfig, image_size: int = 64):
        super().__init__()
        if image_size % config.factor:
            raise ConfigurationError(f"factor {config.factor} does not divide image size {image_size}")
        self.image_size = image_size
        self.factor = config.factor
        self.codebook_size = config.codebook_size
        self.embed_dim = config.embed_dim
        self.encoder = Encoder(config.embed_dim, config.hidden, config.factor)
        self.decoder = Decoder(config.embed_dim, config.hidden, config.factor)
        self.codebook = nn.Parameter(
            torch.empty(config.codebook_size, config.embed_dim).uniform_(
                -1.0 / config.codebook_size, 1.0 / config.codebook_size
            )
        )

    @property
    def mask_id(self) -> int:
        return self.codebook_size

    @property
    def grid_size(self) -> int:
        return self.image_size // self.factor

    def features(self, x: torch.Tensor) -> torch.Tensor:
        """(B, 3, H, W) in [0, 1] -> (B, H/f, W/f, e)"""
        return self.encoder(x).permute(0, 2, 3, 1)

    def reconstruct(self, ids: torch.Tensor) -> torch.Tensor:
        """(B, H/f, W/f) ids -> (B, 3, H, W) in [0, 1]"""
        z = self.codebook[ids].permute(0, 3, 1, 2)
        return self.decoder(z)


@dataclass
class CodecParams:
    model: VQCodec
    config: CodecConfig
    image_size: int
    losses: List[float] = field(default_factory=list)
    mse_threshold: float = float("inf")

    @property
    def hash(self) -> str:
        return params_hash(self.model)

    @property
    def mask_id(self) -> int:
        return self.model.mask_id


def to_tensor(images: ImageBatch) -> torch.Tensor:
    """uint8 (H, W, 3) or (B, H, W, 3) -> float (B, 3, H, W) in [0, 1]"""
    array = np.asarray(images if isinstance(images, np.ndarray) else np.stack(images))
    if array.ndim == 3:
        array = array[None]
    if array.ndim != 4 or array.shape[-1] != 3:
        raise ContractError(f"expected RGB image(s) of shape (..., H, W, 3), got {array.shape}")
    return torch.from_numpy(array.astype(np.float32) / 255.0).permute(0, 3, 1, 2).contiguous()


def to_images(x: torch.Tensor) -> np.ndarray:
    """float (B, 3, H, W) in [0, 1] -> uint8 (B, H, W, 3)"""
    pixels = (x.clamp(0.0, 1.0) * 255.0).round().to(torch.uint8)
    return pixels.permute(0, 2, 3, 1).cpu().numpy()


def encode(params: CodecParams, images: ImageBatch) -> torch.Tensor:
    """Feature grid (B, H/f, W/f, e) of one image or a batch"""
    x = to_tensor(images)
    size = params.image_size
    if tuple(x.shape[-2:]) != (size, size):
        raise ContractError(f"image size {tuple(x.shape[-2:])} does not match codec size {size}x{size}")
    params.model.eval()
    with torch.no_grad():
        return params.model.features(x)


def quantize(features: torch.Tensor, codebook: torch.Tensor) -> torch.Tensor:
    """Nearest codebook row by squared distance; ties go to the lowest index"""
    if features.shape[-1] != codebook.shape[-1]:
        raise ContractError(f"feature dim {features.shape[-1]} does not match codebook dim {codebook.shape[-1]}")
    flat = features.reshape(-1, features.shape[-1])
    ids = _nearest(flat, codebook.detach())
    return ids.reshape(features.shape[:-1])


def _nearest(flat: torch.Tensor, codebook: torch.Tensor) -> torch.Tensor:
    # exhaustive scan; argmin returns the first minimum
    distances = ((flat[:, None, :] - codebook[None, :, :]) ** 2).sum(dim=-1)
    return distances.argmin(dim=1)


def tokenize(params: CodecParams, images: ImageBatch) -> torch.Tensor:
    """quantize(encode(images)) as a (B, H/f, W/f) LongTensor"""
    return quantize(encode(params, images), params.model.codebook)


def decode(params: CodecParams, tokens: torch.Tensor) -> np.ndarray:
    """uint8 images (B, H, W, 3) from complete token grids"""
    ids = tokens if tokens.dim() == 3 else tokens[None]
    if (ids == params.mask_id).any():
        raise ContractError("cannot decode a token grid that still contains MASK ids")
    if ids.min() < 0 or ids.max() >= params.model.codebook_size:
        raise ContractError(f"token ids must lie in [0, {params.model.codebook_size})")
    params.model.eval()
    with torch.no_grad():
        return to_images(params.model.reconstruct(ids.long()))


def reconstruction_mse(params: CodecParams, images: ImageBatch) -> float:
    """Mean squared pixel error in [0, 1] units of decode(quantize(encode(x)))"""
    original = to_tensor(images)
    restored = to_tensor(decode(params, tokenize(params, images)))
    return float(F.mse_loss(restored, original))


def codebook_usage(params: CodecParams, images: ImageBatch) -> float:
    """Fraction of codebook entries used on the given images"""
    ids = tokenize(params, images)
    return len(torch.unique(ids)) / params.model.codebook_size


def train_codec(
    images: Sequence[np.ndarray],
    config: CodecConfig,
    image_size: int = 64,
    stage_logger: Optional[StageLogger] = None,
) -> CodecParams:
    """Reconstruction + commitment loss with a straight-through quantizer"""
    if len(images) == 0:
        raise ConfigurationError("train_codec needs a nonempty dataset")
    stage_logger = stage_logger or StageLogger(logger, f"codec-{config.seed}")
    stage_logger.log_start("train-codec", config.model_dump())

    data = to_tensor(images)
    generator = torch_generator(derive_seed(config.seed, "codec-batches"))
    order = torch.randperm(len(data), generator=generator)
    n_holdout = int(len(data) * config.holdout_fraction) if len(data) > 1 else 0
    holdout, train = data[order[:n_holdout]], data[order[n_holdout:]]

    with seeded(derive_seed(config.seed, "codec-init")):
        model = VQCodec(config, image_size)
    _init_codebook(model, train, generator)
    optimizer = torch.optim.Adam(model.parameters(), lr=config.lr)

    losses: List[float] = []
    usage = torch.zeros(config.codebook_size, dtype=torch.long)
    model.train()
    for step in range(config.steps):
        batch = train[torch.randint(0, len(train), (config.batch_size,), generator=generator)]
        z = model.features(batch)
        flat = z.reshape(-1, config.embed_dim)
        ids = _nearest(flat.detach(), model.codebook.detach())
        chosen = model.codebook[ids]
        codebook_loss = F.mse_loss(chosen, flat.detach())
        commitment_loss = F.mse_loss(flat, chosen.detach())
        # straight-through: decoder gradients pass to the encoder unchanged
        quantized = (flat + (chosen - flat).detach()).reshape(z.shape).permute(0, 3, 1, 2)
        recon_loss = F.mse_loss(model.decoder(quantized), batch)
        loss = recon_loss + codebook_loss + config.commitment * commitment_loss

        if not torch.isfinite(loss):
            stage_logger.log_error("train-codec", f"loss became {loss.item()} at step {step}", "numeric")
            raise NumericError(f"codec training diverged at step {step}")
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()

        losses.append(float(loss.item()))
        usage += torch.bincount(ids, minlength=config.codebook_size)
        if config.restart_every and (step + 1) % config.restart_every == 0:
            _restart_dead_codes(model, flat.detach(), usage, generator)
            usage.zero_()
        if (step + 1) % max(1, config.steps // 10) == 0:
            stage_logger.log_progress("train-codec", step + 1, {"loss": losses[-1], "recon": float(recon_loss)})

    model.eval()
    params = CodecParams(model=model, config=config, image_size=image_size, losses=losses)
    reference = holdout if len(holdout) else train[:64]
    params.mse_threshold = 1.5 * reconstruction_mse(params, to_images(reference))
    stage_logger.log_end("train-codec", {"final_loss": losses[-1], "mse_threshold": params.mse_threshold})
    return params


def _init_codebook(model: VQCodec, data: torch.Tensor, generator: torch.Generator) -> None:
    """Seed the codebook with encoder outputs of random training images"""
    with torch.no_grad():
        sample = data[torch.randperm(len(data), generator=generator)[:256]]
        flat = model.features(sample).reshape(-1, model.embed_dim)
        picks = torch.randint(0, len(flat), (model.codebook_size,), generator=generator)
        model.codebook.copy_(flat[picks])


def _restart_dead_codes(model: VQCodec, flat: torch.Tensor, usage: torch.Tensor, generator: torch.Generator) -> None:
    dead = (usage == 0).nonzero().flatten()
    if len(dead) == 0:
        return
    with torch.no_grad():
        picks = torch.randint(0, len(flat), (len(dead),), generator=generator)
        model.codebook[dead] = flat[picks]
    logger.debug(f"Restarted {len(dead)} unused codebook entries")


def save_codec(params: CodecParams, path: Union[str, Path]) -> Path:
    """Parameter archive plus a JSON sidecar"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save({"state_dict": params.model.state_dict()}, path)
    sidecar = {
        "config": params.config.model_dump(),
        "image_size": params.image_size,
        "seed": params.config.seed,
        "final_loss": params.losses[-1] if params.losses else None,
        "losses": params.losses,
        "mse_threshold": params.mse_threshold,
        "hash": params.hash,
    }
    path.with_suffix(".json").write_text(json.dumps(sidecar, indent=2), encoding="utf-8")
    return path


def load_codec(path: Union[str, Path]) -> CodecParams:
    path = Path(path)
    sidecar: Dict = json.loads(path.with_suffix(".json").read_text(encoding="utf-8"))
    config = CodecConfig(**sidecar["config"])
    model = VQCodec(config, sidecar["image_size"])
    model.load_state_dict(torch.load(path, map_location="cpu")["state_dict"])
    model.eval()
    return CodecParams(
        model=model,
        config=config,
        image_size=sidecar["image_size"],
        losses=sidecar.get("losses", []),
        mse_threshold=sidecar["mse_threshold"],
    )
