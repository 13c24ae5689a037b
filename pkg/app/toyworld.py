"""
Procedural pre/post disaster scenes and the JSONL dataset manifest.

Every scene is a pure function of (domain, scene_seed, damaged): a textured
background in the domain's hue, vegetation clutter and one rectangular
building near the image center. Damaged post images apply the domain's
disaster transform around the building; undamaged ones only get a small
photometric jitter.
"""
import json
import logging
import math
import os
from dataclasses import dataclass
from pathlib import Path
from typing import List, Literal, Optional, Sequence, Tuple, Union

import numpy as np
from matplotlib.colors import hsv_to_rgb
from PIL import Image
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from app.errors import ConfigurationError, ContractError, ManifestError
from app.seeding import derive_seed, numpy_rng

logger = logging.getLogger("disaster-synth.toyworld")

DisasterKind = Literal["hurricane", "tornado", "flood", "wildfire"]
DISASTER_KINDS: Tuple[str, ...] = ("hurricane", "tornado", "flood", "wildfire")
Split = Literal["train", "val", "test"]
SPLITS: Tuple[str, ...] = ("train", "val", "test")
Provenance = Literal["procedural", "ingested", "synthetic", "synthetic-pending"]

IMAGE_SIZE = 64
JITTER_AMPLITUDE = 4
# global offset up to JITTER_AMPLITUDE plus per-pixel noise of at most 1
JITTER_BOUND = JITTER_AMPLITUDE + 1


class DomainSpec(BaseModel):
    """Visual style and disaster type of one toy domain"""
    name: str
    disaster_kind: DisasterKind
    background_hue: float = Field(ge=0.0, lt=360.0)
    texture_noise: float = Field(ge=0.0, le=1.0)
    clutter_density: float = Field(ge=0.0, le=1.0)
    seed: int = Field(ge=0, lt=2 ** 64)


@dataclass
class LabeledPair:
    pre: np.ndarray
    post: np.ndarray
    label: int
    domain: str
    provenance: str = "procedural"
    id: Optional[str] = None

    def __post_init__(self):
        if self.pre.shape != self.post.shape:
            raise ContractError(f"pre {self.pre.shape} and post {self.post.shape} differ in shape")
        if self.label not in (0, 1):
            raise ContractError(f"label must be 0 or 1, got {self.label}")


@dataclass
class TargetExample:
    pre: np.ndarray
    domain: str
    id: Optional[str] = None


@dataclass(frozen=True)
class Building:
    top: int
    left: int
    height: int
    width: int

    @property
    def center(self) -> Tuple[int, int]:
        return self.top + self.height // 2, self.left + self.width // 2

    def dilate(self, margin: int, size: int) -> Tuple[int, int, int, int]:
        """(row0, row1, col0, col1) of the box grown by margin, clipped to the image"""
        return (
            max(0, self.top - margin),
            min(size, self.top + self.height + margin),
            max(0, self.left - margin),
            min(size, self.left + self.width + margin),
        )


class ManifestRecord(BaseModel):
    """One JSONL line; synthetic datasets add extension fields"""
    id: str
    pre_path: str
    post_path: Optional[str] = None
    label: Optional[Literal[0, 1]] = None
    domain: str
    split: Split = "train"
    provenance: Provenance = "procedural"
    scene_seed: Optional[int] = None

    model_config = ConfigDict(extra="allow")

    @model_validator(mode="after")
    def check_label_has_post(self):
        if self.label is not None and self.post_path is None and self.provenance != "synthetic-pending":
            raise ValueError("labeled entries need a post_path")
        return self


class DatasetManifest(BaseModel):
    root: str
    entries: List[ManifestRecord]

    def labels(self) -> List[Optional[int]]:
        return [entry.label for entry in self.entries]


def scene_rng(domain: DomainSpec, scene_seed: int) -> np.random.Generator:
    return np.random.default_rng([int(domain.seed), int(scene_seed)])


def sample_building(rng: np.random.Generator, size: int) -> Building:
    """Building whose center lies in the central size/4 x size/4 window"""
    height = int(rng.integers(size // 4, size * 7 // 16 + 1))
    width = int(rng.integers(size // 4, size * 7 // 16 + 1))
    lo, hi = size // 2 - size // 8, size // 2 + size // 8
    center_row = int(rng.integers(lo, hi))
    center_col = int(rng.integers(lo, hi))
    return Building(center_row - height // 2, center_col - width // 2, height, width)


def scene_building(domain: DomainSpec, scene_seed: int, size: int = IMAGE_SIZE) -> Building:
    """The building render_pair places for this scene"""
    return sample_building(scene_rng(domain, scene_seed), size)


def render_pair(domain: DomainSpec, scene_seed: int, damaged: bool, size: int = IMAGE_SIZE) -> LabeledPair:
    """Render a deterministic pre/post pair; the label equals damaged"""
    rng = scene_rng(domain, scene_seed)
    building = sample_building(rng, size)
    pre, vegetation = _render_scene(domain, building, rng, size)

    post = pre.copy()
    offset = int(rng.integers(1, JITTER_AMPLITUDE + 1)) * int(rng.choice([-1, 1]))
    post += offset + rng.integers(-1, 2, size=post.shape)
    if damaged:
        _DISASTERS[domain.disaster_kind](post, building, vegetation, rng, size)

    return LabeledPair(
        pre=_to_uint8(pre),
        post=_to_uint8(post),
        label=int(damaged),
        domain=domain.name,
        provenance="procedural",
        id=f"{domain.name}-{scene_seed}",
    )


def _render_scene(domain: DomainSpec, building: Building, rng: np.random.Generator, size: int):
    hue = domain.background_hue / 360.0
    base = hsv_to_rgb([hue, 0.35, 0.55]) * 255.0
    image = np.broadcast_to(base, (size, size, 3)).astype(np.float64).copy()

    # coarse blotches plus fine grain
    amplitude = 40.0 * domain.texture_noise
    coarse = np.kron(rng.normal(0.0, 1.0, (size // 8, size // 8)), np.ones((8, 8)))
    fine = rng.normal(0.0, 0.5, (size, size))
    image += (amplitude * (coarse + fine))[:, :, None]

    vegetation = np.zeros((size, size), dtype=bool)
    rows, cols = np.mgrid[0:size, 0:size]
    for _ in range(int(round(40 * domain.clutter_density))):
        r, c = rng.integers(0, size, 2)
        radius = rng.integers(1, 4)
        blob = (rows - r) ** 2 + (cols - c) ** 2 <= radius ** 2
        green = np.array([35.0, 90.0, 35.0]) + rng.normal(0.0, 10.0, 3)
        image[blob] = green
        vegetation |= blob

    palette = np.array([[150, 150, 150], [170, 80, 60], [120, 95, 70], [200, 200, 190]], dtype=np.float64)
    roof = palette[rng.integers(0, len(palette))] + rng.normal(0.0, 8.0, 3)
    b = building
    # shadow to the lower right, then the roof with a darker ridge line
    image[b.top + 2:b.top + b.height + 2, b.left + 2:b.left + b.width + 2] *= 0.6
    image[b.top:b.top + b.height, b.left:b.left + b.width] = roof
    ridge = b.top + b.height // 2
    image[ridge, b.left:b.left + b.width] = roof * 0.75
    vegetation[b.top:b.top + b.height, b.left:b.left + b.width] = False
    return image, vegetation


def _building_mask(building: Building, size: int) -> np.ndarray:
    mask = np.zeros((size, size), dtype=bool)
    mask[building.top:building.top + building.height, building.left:building.left + building.width] = True
    return mask


def _scatter_roof(image, building, rng, size, fraction, margin):
    r0, r1, c0, c1 = building.dilate(margin, size)
    roof = np.argwhere(_building_mask(building, size))
    moved = roof[rng.random(len(roof)) < fraction]
    if len(moved) == 0:
        return
    colors = image[moved[:, 0], moved[:, 1]].copy()
    debris = np.array([115.0, 100.0, 85.0])
    image[moved[:, 0], moved[:, 1]] = debris + rng.normal(0.0, 12.0, (len(moved), 3))
    dest_rows = rng.integers(r0, r1, len(moved))
    dest_cols = rng.integers(c0, c1, len(moved))
    image[dest_rows, dest_cols] = colors


def _speckle(image, region, rng, fraction, colors):
    r0, r1, c0, c1 = region
    hit = rng.random((r1 - r0, c1 - c0)) < fraction
    picks = rng.integers(0, len(colors), hit.sum())
    window = image[r0:r1, c0:c1]
    window[hit] = np.asarray(colors, dtype=np.float64)[picks]


def _tornado(image, building, vegetation, rng, size):
    _scatter_roof(image, building, rng, size, fraction=0.6, margin=4)


def _hurricane(image, building, vegetation, rng, size):
    _scatter_roof(image, building, rng, size, fraction=0.35, margin=4)
    _speckle(image, building.dilate(8, size), rng, 0.08, [[235, 230, 220], [60, 50, 45], [140, 120, 90]])


def _flood(image, building, vegetation, rng, size):
    r0, r1, c0, c1 = building.dilate(12, size)
    region = np.zeros((size, size), dtype=bool)
    region[r0:r1, c0:c1] = True
    ground = region & ~_building_mask(building, size)
    water = np.array([60.0, 90.0, 140.0])
    image[ground] = water + rng.normal(0.0, 6.0, (ground.sum(), 3))
    # lower part of the building sits under water
    waterline = building.top + int(building.height * 0.55)
    rows = slice(waterline, building.top + building.height)
    cols = slice(building.left, building.left + building.width)
    image[rows, cols] = 0.3 * image[rows, cols] + 0.7 * water


def _wildfire(image, building, vegetation, rng, size):
    r0, r1, c0, c1 = building.dilate(14, size)
    region = np.zeros((size, size), dtype=bool)
    region[r0:r1, c0:c1] = True
    # ground in the burn zone counts as vegetation too
    burnt = region & ~_building_mask(building, size)
    image[burnt] = image[burnt] * 0.35 + np.array([25.0, 15.0, 5.0])
    image[vegetation & region] = np.array([30.0, 25.0, 20.0])
    _speckle(image, (r0, r1, c0, c1), rng, 0.15, [[15, 15, 15], [40, 30, 25]])


_DISASTERS = {
    "tornado": _tornado,
    "hurricane": _hurricane,
    "flood": _flood,
    "wildfire": _wildfire,
}


def _to_uint8(image: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(image), 0, 255).astype(np.uint8)


def entry_paths(domain: str, split: str, entry_id: str) -> Tuple[str, str]:
    base = f"{domain}/{split}/{entry_id}"
    return f"{base}_pre.png", f"{base}_post.png"


def build_dataset(domain: DomainSpec, n: int, damage_rate: float = 0.2, seed: int = 0, root: str = ".") -> DatasetManifest:
    """Manifest of n scenes with exactly round(n * damage_rate) damaged ones"""
    if n < 1:
        raise ConfigurationError(f"n must be >= 1, got {n}")
    if not 0.0 <= damage_rate <= 1.0:
        raise ConfigurationError(f"damage_rate must lie in [0, 1], got {damage_rate}")
    n_damaged = int(math.floor(n * damage_rate + 0.5))
    rng = numpy_rng(derive_seed(seed, "build", domain.name))
    labels = rng.permutation(np.array([1] * n_damaged + [0] * (n - n_damaged)))

    entries = []
    for index, label in enumerate(labels.tolist()):
        entry_id = f"{domain.name}-{index:05d}"
        pre_path, post_path = entry_paths(domain.name, "train", entry_id)
        entries.append(ManifestRecord(
            id=entry_id,
            pre_path=pre_path,
            post_path=post_path,
            label=label,
            domain=domain.name,
            split="train",
            provenance="procedural",
            scene_seed=derive_seed(seed, "scene", domain.name, index),
        ))
    logger.debug(f"Built manifest for {domain.name}: {n} entries, {n_damaged} damaged")
    return DatasetManifest(root=str(root), entries=entries)


def split_dataset(
    manifest: DatasetManifest,
    fractions: Sequence[float] = (0.8, 0.1, 0.1),
    seed: int = 0,
) -> Tuple[DatasetManifest, DatasetManifest, DatasetManifest]:
    """Stratified, deterministic train/val/test split"""
    if len(fractions) != 3 or any(f < 0 for f in fractions) or abs(sum(fractions) - 1.0) > 1e-9:
        raise ConfigurationError(f"split fractions {tuple(fractions)} must be three non-negative values summing to 1")

    rng = numpy_rng(derive_seed(seed, "split"))
    buckets: List[List[ManifestRecord]] = [[], [], []]
    strata = {}
    for entry in manifest.entries:
        strata.setdefault(entry.label, []).append(entry)
    for label in sorted(strata, key=lambda v: -1 if v is None else v):
        members = strata[label]
        order = rng.permutation(len(members))
        counts = _largest_remainder(len(members), fractions)
        start = 0
        for split_index, count in enumerate(counts):
            buckets[split_index].extend(members[i] for i in order[start:start + count])
            start += count

    splits = []
    for split_name, bucket in zip(SPLITS, buckets):
        bucket.sort(key=lambda e: e.id)
        entries = []
        for entry in bucket:
            pre_path, post_path = entry_paths(entry.domain, split_name, entry.id)
            entries.append(entry.model_copy(update={
                "split": split_name,
                "pre_path": pre_path,
                "post_path": post_path if entry.post_path is not None else None,
            }))
        splits.append(DatasetManifest(root=manifest.root, entries=entries))
    return splits[0], splits[1], splits[2]


def _largest_remainder(n: int, fractions: Sequence[float]) -> List[int]:
    raw = [n * f for f in fractions]
    counts = [int(math.floor(r)) for r in raw]
    leftovers = sorted(range(len(raw)), key=lambda i: (-(raw[i] - counts[i]), i))
    for i in leftovers[: n - sum(counts)]:
        counts[i] += 1
    return counts


def write_dataset(manifest: DatasetManifest, domain: DomainSpec, size: int = IMAGE_SIZE) -> None:
    """Render every procedural entry of the manifest to PNG under its root"""
    root = Path(manifest.root)
    for entry in manifest.entries:
        if entry.scene_seed is None:
            raise ContractError(f"entry {entry.id} has no scene_seed to render from")
        pair = render_pair(domain, entry.scene_seed, bool(entry.label), size)
        save_png(root / entry.pre_path, pair.pre)
        if entry.post_path is not None:
            save_png(root / entry.post_path, pair.post)
    logger.info(f"Wrote {len(manifest.entries)} pairs for {domain.name} under {root}")


def write_manifest(manifest: DatasetManifest, path: Union[str, Path]) -> Path:
    """Write JSONL; image paths are stored relative to the manifest file"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    root = Path(manifest.root)
    lines = []
    for entry in manifest.entries:
        record = entry.model_dump(mode="json", exclude_none=True)
        for key in ("pre_path", "post_path"):
            if key in record:
                record[key] = _relative(root / record[key], path.parent)
        lines.append(json.dumps(record, sort_keys=True))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def _relative(target: Path, base: Path) -> str:
    return Path(os.path.relpath(target.resolve(), base.resolve())).as_posix()


def read_records(path: Union[str, Path]) -> List[ManifestRecord]:
    """Parse and validate a JSONL manifest without touching image files"""
    return [record for _, record in _numbered_records(Path(path))]


def _numbered_records(path: Path) -> List[Tuple[int, ManifestRecord]]:
    if not path.is_file():
        raise ManifestError("Manifest not found", str(path))
    records = []
    with path.open(encoding="utf-8") as handle:
        for line_number, line in enumerate(handle, start=1):
            if not line.strip():
                continue
            try:
                raw = json.loads(line)
            except json.JSONDecodeError as e:
                raise ManifestError(f"Malformed JSON: {e.msg}", str(path), line_number)
            try:
                records.append((line_number, ManifestRecord.model_validate(raw)))
            except ValidationError as e:
                raise ManifestError(f"Invalid record: {e.errors()[0]['msg']}", str(path), line_number)
    return records


def read_manifest(path: Union[str, Path]) -> DatasetManifest:
    """Records of a manifest file with paths resolved against its directory"""
    path = Path(path)
    return DatasetManifest(root=str(path.parent), entries=read_records(path))


def load_manifest(path: Union[str, Path]) -> List[Union[LabeledPair, TargetExample]]:
    """Load images: labeled entries as LabeledPair, the rest as TargetExample"""
    path = Path(path)
    items: List[Union[LabeledPair, TargetExample]] = []
    for line_number, record in _numbered_records(path):
        pre = _load_referenced(path.parent, record.pre_path, path, line_number)
        if record.label is not None and record.post_path is not None:
            post = _load_referenced(path.parent, record.post_path, path, line_number)
            items.append(LabeledPair(
                pre=pre,
                post=post,
                label=int(record.label),
                domain=record.domain,
                provenance=record.provenance,
                id=record.id,
            ))
        else:
            items.append(TargetExample(pre=pre, domain=record.domain, id=record.id))
    return items


def _load_referenced(base: Path, relative: str, manifest: Path, line_number: int) -> np.ndarray:
    image_path = base / relative
    if not image_path.is_file():
        raise ManifestError(f"Referenced image not found: {image_path}", str(manifest), line_number)
    return read_png(image_path)


def as_targets(items: Sequence[Union[LabeledPair, TargetExample]]) -> List[TargetExample]:
    """Drop post images and labels"""
    return [TargetExample(pre=item.pre, domain=item.domain, id=item.id) for item in items]


def save_png(path: Union[str, Path], image: np.ndarray) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.ascontiguousarray(image, dtype=np.uint8)).save(path, format="PNG")


def read_png(path: Union[str, Path]) -> np.ndarray:
    with Image.open(path) as image:
        return np.asarray(image.convert("RGB"), dtype=np.uint8).copy()


def random_domains(n: int, seed: int) -> List[DomainSpec]:
    """Domains for the generative pretraining corpus, cycling disaster kinds"""
    rng = numpy_rng(derive_seed(seed, "pretrain-domains"))
    domains = []
    for index in range(n):
        kind = DISASTER_KINDS[index % len(DISASTER_KINDS)]
        domains.append(DomainSpec(
            name=f"pretrain-{index:02d}-{kind}",
            disaster_kind=kind,
            background_hue=float(rng.uniform(0.0, 360.0)),
            texture_noise=float(rng.uniform(0.1, 0.9)),
            clutter_density=float(rng.uniform(0.1, 0.9)),
            seed=derive_seed(seed, "pretrain-domain", index),
        ))
    return domains


def default_benchmark_domains() -> List[DomainSpec]:
    """One toy domain per disaster kind, each in its own visual style"""
    return [
        DomainSpec(name="gulf-hurricane", disaster_kind="hurricane", background_hue=95.0,
                   texture_noise=0.3, clutter_density=0.5, seed=101),
        DomainSpec(name="plains-tornado", disaster_kind="tornado", background_hue=45.0,
                   texture_noise=0.5, clutter_density=0.2, seed=202),
        DomainSpec(name="delta-flood", disaster_kind="flood", background_hue=70.0,
                   texture_noise=0.2, clutter_density=0.35, seed=303),
        DomainSpec(name="ridge-wildfire", disaster_kind="wildfire", background_hue=120.0,
                   texture_noise=0.6, clutter_density=0.8, seed=404),
    ]
