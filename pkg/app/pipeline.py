"""
Experiment workspace.

Every artifact (datasets, codec, generator, adapters, scorer, synthetic sets)
lives under <output_root>/workspace in a path keyed by the hash of the config
sections it depends on, so rerunning a stage with the same configuration
loads the earlier result instead of recomputing it.
"""
import logging
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

from app.classifier import ClassifierParams, train_variant
from app.config import Settings, config_hash
from app.errors import ConfigurationError
from app.evaluation import EvalReport, evaluate
from app.logging import StageLogger
from app.maskgen import GeneratorParams, finetune_adapters, load_generator, save_generator, train_generator
from app.prompts import Vocabulary, build_pool, default_vocabulary, load_pool, sample_prompt
from app.scorer import ScorerParams, load_scorer, save_scorer, train_scorer
from app.seeding import derive_seed, numpy_rng
from app.synthesis import (
    ModelBundle, SyntheticDataset, load_synthetic, resolve_pool, run_synthesis, write_synthetic,
)
from app.toyworld import (
    DomainSpec, LabeledPair, as_targets, build_dataset, load_manifest, random_domains, render_pair,
    split_dataset, write_dataset, write_manifest,
)
from app.vqcodec import CodecParams, load_codec, save_codec, train_codec

logger = logging.getLogger("disaster-synth.pipeline")

# balanced so the generator and scorer see both prompt classes often
PRETRAIN_DAMAGE_RATE = 0.5


class Experiment:
    def __init__(self, settings: Settings, stage_logger: Optional[StageLogger] = None):
        self.settings = settings
        self.workspace = Path(settings.output_root) / "workspace"
        self.stage_logger = stage_logger or StageLogger(logger, f"experiment-{settings.seed}")
        self._domains: Dict[str, DomainSpec] = {d.name: d for d in settings.benchmark.domains}
        self._splits: Dict[str, Tuple[List[LabeledPair], ...]] = {}
        self._codec: Optional[CodecParams] = None
        self._generator: Optional[GeneratorParams] = None
        self._scorer: Optional[ScorerParams] = None
        self._finetuned: Dict[str, GeneratorParams] = {}
        self._synthetic: Dict[Tuple[str, int, bool], SyntheticDataset] = {}
        self._corpus: Optional[List[Tuple[LabeledPair, str]]] = None

    def domain_names(self) -> List[str]:
        return list(self._domains)

    def domain(self, name: str) -> DomainSpec:
        if name not in self._domains:
            raise ConfigurationError(f"unknown domain '{name}'; configured domains are {self.domain_names()}")
        return self._domains[name]

    def _data_hash(self, domain: DomainSpec) -> str:
        s = self.settings
        return config_hash({
            "domain": domain, "pairs": s.benchmark.pairs_per_domain, "toyworld": s.toyworld, "seed": s.seed,
        })

    def data_dir(self, name: str) -> Path:
        domain = self.domain(name)
        return self.workspace / "data" / f"{name}-{self._data_hash(domain)}"

    def domain_splits(self, name: str) -> Tuple[List[LabeledPair], List[LabeledPair], List[LabeledPair]]:
        """(train, val, test) labeled pairs of a benchmark domain, rendered on first use"""
        if name in self._splits:
            return self._splits[name]
        domain, root = self.domain(name), self.data_dir(name)
        manifests = [root / f"{split}.jsonl" for split in ("train", "val", "test")]
        if not all(p.is_file() for p in manifests):
            toy = self.settings.toyworld
            manifest = build_dataset(domain, self.settings.benchmark.pairs_per_domain, toy.damage_rate,
                                     self.settings.seed, root=str(root))
            for split, path in zip(split_dataset(manifest, toy.split_fractions, self.settings.seed), manifests):
                write_dataset(split, domain, toy.image_size)
                write_manifest(split, path)
        self._splits[name] = tuple(load_manifest(p) for p in manifests)
        return self._splits[name]

    def pretrain_corpus(self) -> List[Tuple[LabeledPair, str]]:
        """(pair, prompt text) from procedural domains disjoint from the benchmark"""
        if self._corpus is None:
            bench = self.settings.benchmark
            self._corpus = self._render_corpus("pretrain", bench.pretrain_domains, bench.pretrain_pairs_per_domain)
        return self._corpus

    def probe_corpus(self, domains: int = 4, pairs_per_domain: int = 50) -> List[Tuple[LabeledPair, str]]:
        """Held-out corpus from further procedural domains, for model sanity checks"""
        return self._render_corpus("probe", domains, pairs_per_domain)

    def _render_corpus(self, label: str, n_domains: int, pairs_per_domain: int) -> List[Tuple[LabeledPair, str]]:
        seed = derive_seed(self.settings.seed, label)
        rng = numpy_rng(derive_seed(seed, "corpus-prompts"))
        undamaged = build_pool("toy_undamaged")
        corpus = []
        for domain in random_domains(n_domains, seed):
            damaged = build_pool(f"toy_{domain.disaster_kind}_damaged")
            manifest = build_dataset(domain, pairs_per_domain, PRETRAIN_DAMAGE_RATE, seed)
            for entry in manifest.entries:
                pair = render_pair(domain, entry.scene_seed, bool(entry.label), self.settings.toyworld.image_size)
                corpus.append((pair, sample_prompt(damaged if pair.label else undamaged, rng).text))
        return corpus

    def input_hashes(self) -> Dict[str, str]:
        """Workspace keys of the data and models this configuration resolves to"""
        keys = {f"data/{name}": self.data_dir(name).name for name in self.domain_names()}
        keys.update(codec=self.codec_path().stem, generator=self.generator_path().stem,
                    scorer=self.scorer_path().stem)
        return keys

    def vocabulary(self) -> Vocabulary:
        words = default_vocabulary().to_list()
        for path in self.settings.prompts.pool_files:
            words += load_pool(path).vocabulary
        return Vocabulary(words)

    def _model_path(self, kind: str, *sections: str) -> Path:
        s = self.settings
        key = config_hash({
            "sections": {name: getattr(s, name) for name in sections},
            "corpus": s.benchmark.model_dump(include={"pretrain_domains", "pretrain_pairs_per_domain"}),
            "image_size": s.toyworld.image_size,
            "seed": s.seed,
        })
        return self.workspace / "models" / f"{kind}-{key}.pt"

    def codec_path(self) -> Path:
        return self._model_path("codec", "codec")

    def codec(self) -> CodecParams:
        if self._codec is None:
            path = self.codec_path()
            if path.is_file():
                self._codec = load_codec(path)
            else:
                images = [img for pair, _ in self.pretrain_corpus() for img in (pair.pre, pair.post)]
                self._codec = train_codec(images, self.settings.codec, self.settings.toyworld.image_size,
                                          self.stage_logger)
                save_codec(self._codec, path)
        return self._codec

    def generator_path(self) -> Path:
        return self._model_path("generator", "codec", "generator", "prompts")

    def generator(self) -> GeneratorParams:
        if self._generator is None:
            path = self.generator_path()
            if path.is_file():
                self._generator = load_generator(path)
            else:
                pairs = [(pair.post, text) for pair, text in self.pretrain_corpus()]
                self._generator = train_generator(pairs, self.codec(), self.vocabulary(), self.settings.generator,
                                                  self.settings.prompts.max_length, self.stage_logger)
                save_generator(self._generator, path)
        return self._generator

    def finetuned_path(self, target: str) -> Path:
        base = self.generator_path().stem
        key = config_hash({"adapter": self.settings.adapter, "data": self._data_hash(self.domain(target)),
                           "undamaged_pool": self.settings.synthesis.undamaged_pool})
        return self.workspace / "models" / f"{base}-adapter-{target}-{key}.pt"

    def finetuned_generator(self, target: str) -> GeneratorParams:
        """Generator with adapters trained on the target's training pre-images"""
        if target not in self._finetuned:
            path = self.finetuned_path(target)
            if path.is_file():
                self._finetuned[target] = load_generator(path)
            else:
                train, _, _ = self.domain_splits(target)
                pool = resolve_pool(self.settings.synthesis.undamaged_pool)
                params = finetune_adapters([p.pre for p in train], pool, self.generator(), self.codec(),
                                           self.settings.adapter, self.stage_logger)
                save_generator(params, path)
                self._finetuned[target] = params
        return self._finetuned[target]

    def scorer_path(self) -> Path:
        return self._model_path("scorer", "scorer", "prompts")

    def scorer(self) -> ScorerParams:
        if self._scorer is None:
            path = self.scorer_path()
            if path.is_file():
                self._scorer = load_scorer(path)
            else:
                pairs = [(pair.post, text) for pair, text in self.pretrain_corpus()]
                self._scorer = train_scorer(pairs, self.vocabulary(), self.settings.scorer,
                                            self.settings.prompts.max_length, self.stage_logger)
                save_scorer(self._scorer, path)
        return self._scorer

    def bundle(self, finetuned_target: Optional[str] = None) -> ModelBundle:
        generator = self.finetuned_generator(finetuned_target) if finetuned_target else self.generator()
        return ModelBundle(codec=self.codec(), generator=generator, scorer=self.scorer())

    def synthetic_dir(self, target: str, seed: int, finetuned: bool = False) -> Path:
        generator = self.finetuned_path(target) if finetuned else self.generator_path()
        key = config_hash({
            "synthesis": self.settings.synthesis, "seed": seed, "generator": generator.stem,
            "scorer": self.scorer_path().stem, "data": self._data_hash(self.domain(target)),
        })
        return self.workspace / "synthetic" / f"{target}-{key}"

    def synthetic(self, target: str, seed: int = 0, finetuned: bool = False) -> SyntheticDataset:
        """Synthetic pairs for the target's training pre-images"""
        cache_key = (target, seed, finetuned)
        if cache_key not in self._synthetic:
            directory = self.synthetic_dir(target, seed, finetuned)
            manifest = directory / "manifest.jsonl"
            if manifest.is_file():
                dataset = load_synthetic(manifest)
            else:
                train, _, _ = self.domain_splits(target)
                config = self.settings.synthesis.model_copy(
                    update={"seed": derive_seed(self.settings.synthesis.seed, "seed", seed)}
                )
                dataset = run_synthesis(as_targets(train), config, self.bundle(target if finetuned else None),
                                        self.domain(target).disaster_kind, self.stage_logger)
                write_synthetic(dataset, directory)
            self._synthetic[cache_key] = dataset
        return self._synthetic[cache_key]

    def source_data(self, sources: Sequence[str]) -> Tuple[List[LabeledPair], List[LabeledPair]]:
        train, val = [], []
        for name in sources:
            s_train, s_val, _ = self.domain_splits(name)
            train += s_train
            val += s_val
        return train, val

    def train_cell(
        self,
        sources: Sequence[str],
        target: str,
        variants: Sequence[str],
        seed: int,
        volume_fraction: Optional[float] = None,
        finetuned: bool = False,
        base: Optional[ClassifierParams] = None,
    ) -> Dict[str, ClassifierParams]:
        """Train the requested variants for one (sources, target) setting.

        base, when given, is an R0 already trained for this cell and seed; it is
        reused instead of retraining.
        """
        if target in sources:
            raise ConfigurationError(f"target {target} is also a source")
        real_train, source_val = self.source_data(sources)
        _, target_val, _ = self.domain_splits(target)
        synthetic = None
        if any(v != "R0" for v in variants):
            dataset = self.synthetic(target, seed, finetuned)
            if volume_fraction is not None:
                dataset = dataset.subset(volume_fraction)
            synthetic = dataset.pairs()
        config = self.settings.classifier.model_copy(
            update={"seed": derive_seed(self.settings.classifier.seed, "seed", seed)}
        )
        trained: Dict[str, ClassifierParams] = {}
        if base is None and any(v in ("R0", "R3", "R4") for v in variants):
            base = train_variant("R0", real_train, None, target_val, config, source_val,
                                 stage_logger=self.stage_logger)
        for variant in variants:
            if variant == "R0":
                trained[variant] = base
            else:
                trained[variant] = train_variant(variant, real_train, synthetic, target_val, config, source_val,
                                                 base=base, stage_logger=self.stage_logger)
        return trained

    def run_cell(
        self,
        sources: Sequence[str],
        target: str,
        variants: Sequence[str],
        seed: int,
        volume_fraction: Optional[float] = None,
        finetuned: bool = False,
        base: Optional[ClassifierParams] = None,
    ) -> Dict[str, EvalReport]:
        """Train the variants and evaluate each on the target's labeled test split"""
        trained = self.train_cell(sources, target, variants, seed, volume_fraction, finetuned, base)
        _, _, test = self.domain_splits(target)
        reports = {variant: evaluate(params, test, target) for variant, params in trained.items()}
        logger.info(
            f"Cell {'+'.join(sources)}->{target} seed {seed}: "
            + ", ".join(f"{v}={r.auprc:.4f}" for v, r in reports.items())
        )
        return reports
