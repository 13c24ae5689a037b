from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np
import torch

from app.errors import ConfigurationError, ContractError


@dataclass(frozen=True)
class Perturbation:
    """Integer pixel offset of the patch center from the image center"""
    delta_x: int
    delta_y: int


@dataclass
class EditMask:
    """Pixel mask with a single all-ones patch (1 = editable)"""
    height: int
    width: int
    patch_height: int
    patch_width: int
    center_row: int
    center_col: int
    grid: np.ndarray

    @property
    def row_span(self) -> Tuple[int, int]:
        start = self.center_row - self.patch_height // 2
        return start, start + self.patch_height

    @property
    def col_span(self) -> Tuple[int, int]:
        start = self.center_col - self.patch_width // 2
        return start, start + self.patch_width

    def to_record(self) -> dict:
        return {
            "height": self.height,
            "width": self.width,
            "patch_height": self.patch_height,
            "patch_width": self.patch_width,
            "center_row": self.center_row,
            "center_col": self.center_col,
        }

    @classmethod
    def from_record(cls, record: dict) -> "EditMask":
        """Rebuild the pixel mask from its manifest record"""
        mask = cls(grid=np.zeros((record["height"], record["width"]), dtype=np.uint8), **record)
        r0, r1 = mask.row_span
        c0, c1 = mask.col_span
        mask.grid[r0:r1, c0:c1] = 1
        return mask


@dataclass
class TokenMask:
    """Token-resolution mask (1 = token to regenerate)"""
    rows: int
    cols: int
    factor: int
    grid: np.ndarray

    def as_tensor(self) -> torch.Tensor:
        return torch.from_numpy(self.grid.astype(bool))


def sample_mask(
    height: int,
    width: int,
    patch_height: int,
    patch_width: int,
    rng: np.random.Generator,
    perturbation: Optional[Perturbation] = None,
) -> EditMask:
    """Center patch mask jittered by up to 1/16 of the image in each direction.

    The patch is centered at (H/2 + dy, W/2 + dx) with dy, dx drawn uniformly
    from the integers in [-H/16, H/16] and [-W/16, W/16]. Requiring
    H' <= H/2 keeps the patch inside the image for every legal offset.
    """
    if height % 16 or width % 16:
        raise ConfigurationError(f"image size {height}x{width} must be divisible by 16")
    if not (0 < patch_height <= height // 2 and 0 < patch_width <= width // 2):
        raise ConfigurationError(
            f"patch {patch_height}x{patch_width} must be positive and at most half of {height}x{width}"
        )

    if perturbation is None:
        delta_y = int(rng.integers(-(height // 16), height // 16 + 1))
        delta_x = int(rng.integers(-(width // 16), width // 16 + 1))
        perturbation = Perturbation(delta_x=delta_x, delta_y=delta_y)
    elif abs(perturbation.delta_y) > height // 16 or abs(perturbation.delta_x) > width // 16:
        raise ConfigurationError(f"perturbation {perturbation} exceeds 1/16 of the image size")

    mask = EditMask(
        height=height,
        width=width,
        patch_height=patch_height,
        patch_width=patch_width,
        center_row=height // 2 + perturbation.delta_y,
        center_col=width // 2 + perturbation.delta_x,
        grid=np.zeros((height, width), dtype=np.uint8),
    )
    r0, r1 = mask.row_span
    c0, c1 = mask.col_span
    mask.grid[r0:r1, c0:c1] = 1
    return mask


def downsample_mask(mask: EditMask, factor: int) -> TokenMask:
    """Max-pool to token resolution: a token is set if any of its pixels is"""
    if factor < 1 or mask.height % factor or mask.width % factor:
        raise ConfigurationError(f"factor {factor} does not divide {mask.height}x{mask.width}")
    rows, cols = mask.height // factor, mask.width // factor
    pooled = mask.grid.reshape(rows, factor, cols, factor).max(axis=(1, 3))
    return TokenMask(rows=rows, cols=cols, factor=factor, grid=pooled.astype(np.uint8))


def apply_mask(tokens: torch.Tensor, token_mask: TokenMask, mask_id: int) -> torch.Tensor:
    """Replace masked positions with the reserved MASK id; others are untouched"""
    if tuple(tokens.shape[-2:]) != (token_mask.rows, token_mask.cols):
        raise ContractError(
            f"token grid {tuple(tokens.shape)} does not match mask {token_mask.rows}x{token_mask.cols}"
        )
    selected = token_mask.as_tensor().to(tokens.device)
    return torch.where(selected, torch.full_like(tokens, mask_id), tokens)
