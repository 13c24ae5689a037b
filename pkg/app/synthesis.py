"""
Synthetic post-disaster images for an unlabeled target domain.

For every selected target pre-image: sample an edit mask, tokenize the image,
mask the tokens under the edit region, let the generator fill them N times
under a damaged or undamaged prompt, decode, and keep the candidate the
scorer ranks highest. The prompt's pool gives the label.
"""
import asyncio
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch

from app.config import SynthesisConfig
from app.errors import ConfigurationError, ContractError, ManifestError
from app.logging import StageLogger
from app.maskgen import DecodeSchedule, GeneratorParams, parallel_decode
from app.masking import apply_mask, downsample_mask, sample_mask
from app.prompts import Prompt, PromptPool, build_pool, load_pool, sample_prompt, tokenize_prompt
from app.scorer import ScorerParams, select_best
from app.seeding import derive_seed, numpy_rng, torch_generator
from app.toyworld import (
    DatasetManifest, LabeledPair, ManifestRecord, TargetExample, read_png, read_records, save_png,
    write_manifest,
)
from app.vqcodec import CodecParams, decode, tokenize
from app.workers import WorkerPool

logger = logging.getLogger("disaster-synth.synthesis")


@dataclass
class ModelBundle:
    """Codec, generator and scorer that were trained together"""
    codec: CodecParams
    generator: GeneratorParams
    scorer: ScorerParams
    codec_hash: str = field(init=False)

    def __post_init__(self):
        # cached: params_hash walks every weight
        self.codec_hash = self.codec.hash
        if self.generator.codec_hash != self.codec_hash:
            raise ConfigurationError(
                f"generator expects codec {self.generator.codec_hash} but codec hash is {self.codec_hash}"
            )
        if self.scorer.vocabulary != self.generator.vocabulary:
            raise ConfigurationError("scorer and generator were trained with different vocabularies")

    @property
    def hashes(self) -> Dict[str, str]:
        return {"codec": self.codec_hash, "generator": self.generator.hash, "scorer": self.scorer.hash}


@dataclass
class SyntheticEntry:
    id: str
    target_id: str
    domain: str
    pre: np.ndarray
    post: np.ndarray
    label: int
    prompt: str
    pool_name: str
    score: float
    candidate_scores: List[float]
    candidate_index: int
    mask: Dict[str, int]
    rank: int
    seed: int
    tokens: List[List[int]] = field(default_factory=list)


@dataclass
class SyntheticDataset:
    domain: str
    entries: List[SyntheticEntry]
    total_targets: int
    volume_fraction: float
    seed: int
    hashes: Dict[str, str]

    def subset(self, fraction: float) -> "SyntheticDataset":
        """Entries synthesizing at the given volume fraction would produce"""
        if not 0 < fraction <= self.volume_fraction:
            raise ConfigurationError(f"fraction {fraction} must lie in (0, {self.volume_fraction}]")
        keep = volume_count(self.total_targets, fraction)
        return SyntheticDataset(
            domain=self.domain,
            entries=[e for e in self.entries if e.rank < keep],
            total_targets=self.total_targets,
            volume_fraction=fraction,
            seed=self.seed,
            hashes=dict(self.hashes),
        )

    def pairs(self) -> List[LabeledPair]:
        return [
            LabeledPair(pre=e.pre, post=e.post, label=e.label, domain=e.domain, provenance="synthetic", id=e.id)
            for e in self.entries
        ]

    def labels(self) -> List[int]:
        return [e.label for e in self.entries]


@dataclass
class _Job:
    target: TargetExample
    prompt: Prompt
    rank: int
    seed: int


def volume_count(total: int, fraction: float) -> int:
    """round(fraction * total), halves rounding up"""
    return int(math.floor(fraction * total + 0.5))


def is_damaged_rank(rank: int, damaged_fraction: float) -> bool:
    """Spread damaged prompts evenly over ranks: any prefix of n ranks holds floor(n * f) of them"""
    return math.floor((rank + 1) * damaged_fraction) > math.floor(rank * damaged_fraction)


def resolve_pool(name_or_path: str) -> PromptPool:
    if name_or_path.endswith(".json"):
        return load_pool(name_or_path)
    return build_pool(name_or_path)


def resolve_pools(config: SynthesisConfig, disaster_kind: Optional[str]) -> Tuple[PromptPool, PromptPool]:
    """(damaged pool, undamaged pool) for a target of the given disaster kind"""
    damaged_name = config.damaged_pool or (f"toy_{disaster_kind}_damaged" if disaster_kind else None)
    if damaged_name is None:
        raise ConfigurationError("no damaged prompt pool configured and the target disaster kind is unknown")
    damaged, undamaged = resolve_pool(damaged_name), resolve_pool(config.undamaged_pool)
    if damaged.label != 1 or undamaged.label != 0:
        raise ConfigurationError(
            f"pool {damaged.name} must be damaged (label 1) and {undamaged.name} undamaged (label 0)"
        )
    return damaged, undamaged


def generate_post_image(
    pre_image: np.ndarray,
    prompt: Prompt,
    config: SynthesisConfig,
    models: ModelBundle,
    seed: int,
) -> Tuple[np.ndarray, float, Dict]:
    """One edited post image for a pre image: (image, selection score, record)"""
    codec, generator = models.codec, models.generator
    if generator.codec_hash != models.codec_hash:
        raise ConfigurationError(
            f"generator expects codec {generator.codec_hash} but codec hash is {models.codec_hash}"
        )
    height, width = pre_image.shape[:2]
    mask = sample_mask(
        height, width,
        int(height * config.patch_fraction_h), int(width * config.patch_fraction_w),
        numpy_rng(derive_seed(seed, "mask")),
    )
    tokens = tokenize(codec, pre_image)[0]
    token_mask = downsample_mask(mask, codec.config.factor)
    masked = apply_mask(tokens, token_mask, codec.mask_id)
    prompt_ids = tokenize_prompt(prompt.text, generator.vocabulary, generator.model.prompt_length)

    # one mask for all candidates; they differ only in their decode streams
    grids = []
    for n in range(config.num_candidates):
        candidate_seed = derive_seed(seed, "candidate", n)
        schedule = DecodeSchedule(config.decode_steps, config.temperature, candidate_seed)
        grids.append(parallel_decode(generator, masked, prompt_ids, schedule, torch_generator(candidate_seed)))
    images = decode(codec, torch.stack(grids))

    index, image, score, scores = select_best(list(images), prompt_ids, models.scorer)
    record = {
        "mask": mask.to_record(),
        "prompt": prompt.text,
        "pool_name": prompt.pool_name,
        "label": prompt.label,
        "candidate_scores": scores,
        "candidate_index": index,
        "seed": seed,
        "tokens": grids[index].tolist(),
    }
    return image, score, record


def _plan(targets: Sequence[TargetExample], config: SynthesisConfig, pools: Tuple[PromptPool, PromptPool]) -> List[_Job]:
    if len(targets) == 0:
        raise ConfigurationError("synthesize_dataset needs at least one target image")
    ids = [t.id or f"target-{i:05d}" for i, t in enumerate(targets)]
    if len(set(ids)) != len(ids):
        raise ContractError("target ids must be unique")
    order = sorted(range(len(targets)), key=lambda i: ids[i])
    domain = targets[order[0]].domain
    ranks = numpy_rng(derive_seed(config.seed, "volume", domain)).permutation(len(targets))
    keep = volume_count(len(targets), config.volume_fraction)

    damaged, undamaged = pools
    jobs = []
    for position, i in enumerate(order):
        rank = int(ranks[position])
        if rank >= keep:
            continue
        seed = derive_seed(config.seed, "synthesis", domain, ids[i])
        pool = damaged if is_damaged_rank(rank, config.damaged_fraction) else undamaged
        prompt = sample_prompt(pool, numpy_rng(derive_seed(seed, "prompt")))
        target = targets[i] if targets[i].id else TargetExample(pre=targets[i].pre, domain=targets[i].domain, id=ids[i])
        jobs.append(_Job(target=target, prompt=prompt, rank=rank, seed=seed))
    return jobs


def _run_job(job: _Job, config: SynthesisConfig, models: ModelBundle) -> SyntheticEntry:
    image, score, record = generate_post_image(job.target.pre, job.prompt, config, models, job.seed)
    return SyntheticEntry(
        id=f"{job.target.id}-syn",
        target_id=job.target.id,
        domain=job.target.domain,
        pre=job.target.pre,
        post=image,
        label=job.prompt.label,
        prompt=job.prompt.text,
        pool_name=job.prompt.pool_name,
        score=score,
        candidate_scores=record["candidate_scores"],
        candidate_index=record["candidate_index"],
        mask=record["mask"],
        rank=job.rank,
        seed=job.seed,
        tokens=record["tokens"],
    )


def _dataset(targets, config, models, entries) -> SyntheticDataset:
    return SyntheticDataset(
        domain=entries[0].domain if entries else targets[0].domain,
        entries=entries,
        total_targets=len(targets),
        volume_fraction=config.volume_fraction,
        seed=config.seed,
        hashes=models.hashes,
    )


def synthesize_dataset(
    targets: Sequence[TargetExample],
    config: SynthesisConfig,
    models: ModelBundle,
    disaster_kind: Optional[str] = None,
    stage_logger: Optional[StageLogger] = None,
) -> SyntheticDataset:
    """Synthetic labeled pairs for round(p * N_t) targets, in target id order"""
    pools = resolve_pools(config, disaster_kind)
    jobs = _plan(targets, config, pools)
    stage_logger = stage_logger or StageLogger(logger, f"synthesis-{config.seed}")
    stage_logger.log_start("synthesize", {"targets": len(targets), "selected": len(jobs), **config.model_dump()})
    entries = []
    for done, job in enumerate(jobs, start=1):
        entries.append(_run_job(job, config, models))
        if done % max(1, len(jobs) // 10) == 0:
            stage_logger.log_progress("synthesize", done, {"score": entries[-1].score})
    dataset = _dataset(targets, config, models, entries)
    stage_logger.log_end("synthesize", {"entries": len(entries), "damaged": sum(dataset.labels())})
    return dataset


async def synthesize_dataset_async(
    targets: Sequence[TargetExample],
    config: SynthesisConfig,
    models: ModelBundle,
    disaster_kind: Optional[str] = None,
    stage_logger: Optional[StageLogger] = None,
) -> SyntheticDataset:
    """Same output as synthesize_dataset, with images generated on a worker pool"""
    pools = resolve_pools(config, disaster_kind)
    jobs = _plan(targets, config, pools)
    stage_logger = stage_logger or StageLogger(logger, f"synthesis-{config.seed}")
    stage_logger.log_start("synthesize", {"targets": len(targets), "selected": len(jobs), "workers": config.max_workers})
    entries = await WorkerPool(config.max_workers).run(jobs, lambda job: _run_job(job, config, models))
    dataset = _dataset(targets, config, models, entries)
    stage_logger.log_end("synthesize", {"entries": len(entries), "damaged": sum(dataset.labels())})
    return dataset


def run_synthesis(targets, config, models, disaster_kind=None, stage_logger=None) -> SyntheticDataset:
    """Pick the sequential or pooled path from config.max_workers"""
    if config.max_workers > 1:
        return asyncio.run(synthesize_dataset_async(targets, config, models, disaster_kind, stage_logger))
    return synthesize_dataset(targets, config, models, disaster_kind, stage_logger)


def write_synthetic(dataset: SyntheticDataset, root: Union[str, Path]) -> Path:
    """PNG pairs plus manifest.jsonl under root; returns the manifest path"""
    root = Path(root)
    records = []
    for entry in dataset.entries:
        pre_path = f"{entry.domain}/synthetic/{entry.id}_pre.png"
        post_path = f"{entry.domain}/synthetic/{entry.id}_post.png"
        save_png(root / pre_path, entry.pre)
        save_png(root / post_path, entry.post)
        records.append(ManifestRecord(
            id=entry.id,
            pre_path=pre_path,
            post_path=post_path,
            label=entry.label,
            domain=entry.domain,
            split="train",
            provenance="synthetic",
            target_id=entry.target_id,
            prompt=entry.prompt,
            pool_name=entry.pool_name,
            score=entry.score,
            candidate_scores=entry.candidate_scores,
            candidate_index=entry.candidate_index,
            mask=entry.mask,
            rank=entry.rank,
            seed=entry.seed,
            volume_fraction=dataset.volume_fraction,
            synthesis_seed=dataset.seed,
            total_targets=dataset.total_targets,
            model_hashes=dataset.hashes,
        ))
    path = write_manifest(DatasetManifest(root=str(root), entries=records), root / "manifest.jsonl")
    logger.info(f"Wrote {len(records)} synthetic pairs for {dataset.domain} to {path}")
    return path


def load_synthetic(path: Union[str, Path]) -> SyntheticDataset:
    """Rebuild a SyntheticDataset from a manifest written by write_synthetic"""
    path = Path(path)
    records = read_records(path)
    if not records:
        raise ManifestError("Synthetic manifest has no entries", str(path))
    entries = []
    for record in records:
        extra = record.model_extra or {}
        if record.provenance != "synthetic" or "rank" not in extra:
            raise ManifestError(f"Entry {record.id} is not a synthetic entry", str(path))
        entries.append(SyntheticEntry(
            id=record.id,
            target_id=extra["target_id"],
            domain=record.domain,
            pre=read_png(path.parent / record.pre_path),
            post=read_png(path.parent / record.post_path),
            label=int(record.label),
            prompt=extra["prompt"],
            pool_name=extra["pool_name"],
            score=float(extra["score"]),
            candidate_scores=list(extra["candidate_scores"]),
            candidate_index=int(extra["candidate_index"]),
            mask=dict(extra["mask"]),
            rank=int(extra["rank"]),
            seed=int(extra["seed"]),
        ))
    first = records[0].model_extra
    return SyntheticDataset(
        domain=records[0].domain,
        entries=entries,
        total_targets=int(first["total_targets"]),
        volume_fraction=float(first["volume_fraction"]),
        seed=int(first["synthesis_seed"]),
        hashes=dict(first["model_hashes"]),
    )
