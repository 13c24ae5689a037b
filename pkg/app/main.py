"""
Command-line entry point.

    python run.py <command> [--config FILE] [--set section.key=value ...]
                            [--seed N] [--output DIR] [command flags]

Each command runs in <output>/<command>-<hash>/, where the hash covers the
resolved configuration and the command's flags. A run directory holding a
result.json is complete; rerunning the same command is a no-op.
"""
import argparse
import json
import logging
import os
import sys
import time
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

from dotenv import load_dotenv

from app.config import Settings, config_hash, parse_overrides
from app.errors import ConfigurationError, PipelineError
from app.logging import StageLogger, setup_logging

load_dotenv()

logger = logging.getLogger("disaster-synth.cli")


class UsageParser(argparse.ArgumentParser):
    """argparse parser whose usage errors exit with status 1"""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _csv(value: str) -> List[str]:
    return [item.strip() for item in value.split(",") if item.strip()]


def _floats(value: str) -> List[float]:
    try:
        return [float(item) for item in _csv(value)]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got '{value}'")


# flag dest -> configuration key it overrides
FLAG_KEYS = {
    "seed": "seed",
    "output": "output_root",
    "protocol": "evaluation.protocol",
    "variants": "evaluation.variants",
    "seeds": "evaluation.seeds",
    "fractions": "evaluation.volume_fractions",
    "include_finetuned": "evaluation.include_finetuned",
    "validation": "classifier.validation",
    "volume_fraction": "synthesis.volume_fraction",
    "num_candidates": "synthesis.num_candidates",
    "damaged_pool": "synthesis.damaged_pool",
    "undamaged_pool": "synthesis.undamaged_pool",
    "workers": "synthesis.max_workers",
}


def build_parser() -> UsageParser:
    common = UsageParser(add_help=False)
    common.add_argument("--config", help="JSON configuration file")
    common.add_argument("--set", dest="assignments", action="append", default=[], metavar="KEY=VALUE",
                        help="Override a configuration key, e.g. classifier.lr_head=1e-3")
    common.add_argument("--seed", type=int, help="Global seed")
    common.add_argument("--output", help="Output root (default: $OUTPUT_ROOT or ./runs)")
    common.add_argument("--debug", action="store_true", help="Log full stage payloads")

    parser = UsageParser(description="Synthetic post-disaster data for damage classifiers")
    commands = parser.add_subparsers(dest="command", required=True, metavar="command")

    def command(name: str, help_text: str) -> UsageParser:
        return commands.add_parser(name, parents=[common], help=help_text)

    p = command("gen-data", "Render benchmark domains and their splits")
    p.add_argument("--domains", type=_csv, help="Comma-separated domain names (default: all)")

    command("train-codec", "Train the VQ codec on the pretraining corpus")
    command("train-generator", "Train the masked-token generator")

    p = command("finetune-generator", "Train generator adapters on a target's pre-images")
    p.add_argument("--target", required=True)
    p.add_argument("--undamaged-pool", dest="undamaged_pool")

    command("train-scorer", "Train the image-text scorer")

    p = command("synthesize", "Generate the synthetic dataset for a target domain")
    p.add_argument("--target", required=True)
    p.add_argument("--run-seed", type=int, default=0, help="Seed index of the synthetic set")
    p.add_argument("--finetuned", action="store_true", help="Use the adapter-fine-tuned generator")
    p.add_argument("--volume-fraction", dest="volume_fraction", type=float)
    p.add_argument("--num-candidates", dest="num_candidates", type=int)
    p.add_argument("--damaged-pool", dest="damaged_pool", help="Pool name or JSON pool file")
    p.add_argument("--undamaged-pool", dest="undamaged_pool", help="Pool name or JSON pool file")
    p.add_argument("--workers", type=int)

    p = command("train", "Train classifier variants for one transfer setting")
    p.add_argument("--sources", type=_csv, required=True)
    p.add_argument("--target", required=True)
    p.add_argument("--variants", type=_csv)
    p.add_argument("--run-seed", type=int, default=0)
    p.add_argument("--validation", choices=["target", "source"])
    p.add_argument("--finetuned", action="store_true")

    p = command("evaluate", "Evaluate a classifier checkpoint")
    p.add_argument("--checkpoint", required=True)
    group = p.add_mutually_exclusive_group(required=True)
    group.add_argument("--manifest", help="Labeled JSONL manifest")
    group.add_argument("--target", help="Benchmark domain whose test split is used")

    p = command("transfer-matrix", "Run the transfer-matrix experiment")
    p.add_argument("--protocol", choices=["single_source", "multi_source"])
    p.add_argument("--variants", type=_csv)
    p.add_argument("--seeds", type=int)
    p.add_argument("--domains", type=_csv)
    p.add_argument("--include-finetuned", dest="include_finetuned", action="store_const", const=True)

    p = command("volume-sweep", "R4 AUPRC as a function of synthetic data volume")
    p.add_argument("--fractions", type=_floats)
    p.add_argument("--protocol", choices=["single_source", "multi_source"])
    p.add_argument("--seeds", type=int)
    p.add_argument("--targets", type=_csv)

    p = command("plot", "Render plots from a saved report")
    p.add_argument("--report", required=True)
    p.add_argument("--out", help="Output PNG (default: next to the report)")
    return parser


def collect_overrides(args: argparse.Namespace) -> List[Tuple[str, str]]:
    """(source, key=value) pairs from --set and the dedicated flags"""
    sources = [("--set", assignment) for assignment in args.assignments]
    for dest, key in FLAG_KEYS.items():
        value = getattr(args, dest, None)
        if value is not None:
            sources.append((f"--{dest.replace('_', '-')}", f"{key}={json.dumps(value)}"))
    return sources


def resolve_settings(args: argparse.Namespace) -> Tuple[Settings, Dict[str, Any], List[Tuple[str, str]]]:
    sources = collect_overrides(args)
    overrides = parse_overrides(sources)
    return Settings.load(args.config, overrides), overrides, sources


def command_args(args: argparse.Namespace) -> Dict[str, Any]:
    skip = {"config", "assignments", "debug", "command"} | set(FLAG_KEYS)
    return {k: v for k, v in sorted(vars(args).items()) if k not in skip}


def cmd_gen_data(experiment, args, run_dir: Path) -> Dict:
    result = {}
    for name in args.domains or experiment.domain_names():
        train, val, test = experiment.domain_splits(name)
        result[name] = {
            "dir": str(experiment.data_dir(name)),
            "counts": {"train": len(train), "val": len(val), "test": len(test)},
            "damaged": {"train": sum(p.label for p in train), "val": sum(p.label for p in val),
                        "test": sum(p.label for p in test)},
        }
    return result


def cmd_train_codec(experiment, args, run_dir: Path) -> Dict:
    from app.vqcodec import codebook_usage, reconstruction_mse

    codec = experiment.codec()
    probe = [pair.pre for pair, _ in experiment.probe_corpus()]
    return {
        "path": str(experiment.codec_path()),
        "hash": codec.hash,
        "final_loss": codec.losses[-1] if codec.losses else None,
        "mse_threshold": codec.mse_threshold,
        "probe_mse": reconstruction_mse(codec, probe),
        "probe_usage": codebook_usage(codec, probe),
    }


def cmd_train_generator(experiment, args, run_dir: Path) -> Dict:
    generator = experiment.generator()
    return {
        "path": str(experiment.generator_path()),
        "hash": generator.hash,
        "codec_hash": generator.codec_hash,
        "final_loss": generator.losses[-1] if generator.losses else None,
    }


def cmd_finetune_generator(experiment, args, run_dir: Path) -> Dict:
    from app.maskgen import masked_token_cross_entropy
    from app.prompts import tokenize_prompt
    from app.synthesis import resolve_pool

    base, tuned = experiment.generator(), experiment.finetuned_generator(args.target)
    _, val, _ = experiment.domain_splits(args.target)
    pool = resolve_pool(experiment.settings.synthesis.undamaged_pool)
    prompt_ids = tokenize_prompt(pool.prompts[0].text, base.vocabulary, base.model.prompt_length)
    images = [p.pre for p in val]
    seed = experiment.settings.seed
    return {
        "path": str(experiment.finetuned_path(args.target)),
        "hash": tuned.hash,
        "base_cross_entropy": masked_token_cross_entropy(base, experiment.codec(), images, prompt_ids, seed),
        "finetuned_cross_entropy": masked_token_cross_entropy(tuned, experiment.codec(), images, prompt_ids, seed),
    }


def cmd_train_scorer(experiment, args, run_dir: Path) -> Dict:
    from app.prompts import tokenize_prompt
    from app.scorer import retrieval_accuracy, score_images

    scorer = experiment.scorer()
    probe = experiment.probe_corpus()
    length = scorer.prompt_length
    texts = sorted({text for _, text in probe})
    own = [tokenize_prompt(text, scorer.vocabulary, length) for _, text in probe]
    candidates = [tokenize_prompt(text, scorer.vocabulary, length) for text in texts]
    images = [pair.post for pair, _ in probe]
    matched = score_images(scorer, images, own)
    shifted = own[1:] + own[:1]
    mismatched = score_images(scorer, images, shifted)
    return {
        "path": str(experiment.scorer_path()),
        "hash": scorer.hash,
        "final_loss": scorer.losses[-1] if scorer.losses else None,
        "retrieval_accuracy": retrieval_accuracy(scorer, images, own, candidates),
        "chance": 1 / len(texts),
        "matched_similarity": float(matched.mean()),
        "mismatched_similarity": float(mismatched.mean()),
    }


def cmd_synthesize(experiment, args, run_dir: Path) -> Dict:
    dataset = experiment.synthetic(args.target, args.run_seed, args.finetuned)
    return {
        "manifest": str(experiment.synthetic_dir(args.target, args.run_seed, args.finetuned) / "manifest.jsonl"),
        "entries": len(dataset.entries),
        "damaged": sum(dataset.labels()),
        "total_targets": dataset.total_targets,
        "hashes": dataset.hashes,
    }


def cmd_train(experiment, args, run_dir: Path) -> Dict:
    from app.classifier import save_classifier

    variants = args.variants or experiment.settings.evaluation.variants
    trained = experiment.train_cell(args.sources, args.target, variants, args.run_seed, finetuned=args.finetuned)
    result = {}
    for variant, params in trained.items():
        path = save_classifier(params, run_dir / f"{variant}.pt")
        result[variant] = {
            "path": str(path), "hash": params.hash, "best_iteration": params.best_iteration,
            "history": params.history,
        }
    return result


def cmd_evaluate(experiment, args, run_dir: Path) -> Dict:
    from app.classifier import load_classifier
    from app.evaluation import evaluate, plot_pr_curves
    from app.toyworld import load_manifest

    path = Path(args.checkpoint)
    if not path.is_file():
        raise ConfigurationError(f"Checkpoint not found: {path}")
    params = load_classifier(path)
    dataset = load_manifest(args.manifest) if args.manifest else experiment.domain_splits(args.target)[2]
    report = evaluate(params, dataset, args.target)
    report.save(run_dir / "report.json")
    plot_pr_curves({params.stage: report}, run_dir / "pr_curve.png")
    return report.to_dict()


def cmd_transfer_matrix(experiment, args, run_dir: Path) -> Dict:
    from app.evaluation import plot_transfer, run_transfer_matrix, save_report

    ev = experiment.settings.evaluation
    report = run_transfer_matrix(
        experiment, args.domains or experiment.domain_names(), ev.protocol, ev.variants, ev.seeds,
        ev.include_finetuned, experiment.stage_logger,
    )
    save_report(report, run_dir, "report")
    plot_transfer(report, run_dir / "transfer.png")
    print(report.format_table())
    return report.to_dict()


def cmd_volume_sweep(experiment, args, run_dir: Path) -> Dict:
    from app.evaluation import plot_volume_sweep, save_report, volume_sweep

    ev = experiment.settings.evaluation
    report = volume_sweep(experiment, ev.volume_fractions, ev.protocol, ev.seeds, args.targets,
                          experiment.stage_logger)
    save_report(report, run_dir, "report")
    plot_volume_sweep(report, run_dir / "volume_sweep.png")
    print(report.format_table())
    return report.to_dict()


def cmd_plot(experiment, args, run_dir: Path) -> Dict:
    from app.evaluation import load_report, plot_report

    report_path = Path(args.report)
    out = Path(args.out) if args.out else report_path.with_name(f"{report_path.stem}_plot.png")
    plot_report(load_report(report_path), out)
    return {"plot": str(out)}


COMMANDS: Dict[str, Callable] = {
    "gen-data": cmd_gen_data,
    "train-codec": cmd_train_codec,
    "train-generator": cmd_train_generator,
    "finetune-generator": cmd_finetune_generator,
    "train-scorer": cmd_train_scorer,
    "synthesize": cmd_synthesize,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "transfer-matrix": cmd_transfer_matrix,
    "volume-sweep": cmd_volume_sweep,
    "plot": cmd_plot,
}


def run_command(args: argparse.Namespace) -> int:
    from app.pipeline import Experiment

    settings, overrides, sources = resolve_settings(args)
    run_hash = config_hash({"command": args.command, "settings": settings, "args": command_args(args)})
    run_dir = Path(settings.output_root) / f"{args.command}-{run_hash}"
    result_path = run_dir / "result.json"
    if result_path.is_file():
        logger.info(f"{args.command}: {run_dir} is already complete, nothing to do")
        return 0

    run_dir.mkdir(parents=True, exist_ok=True)
    stage_logger = StageLogger(logger, f"{args.command}-{run_hash}")
    experiment = Experiment(settings, stage_logger)
    snapshot = {
        "command": args.command,
        "config": settings.model_dump(mode="json"),
        "config_file": args.config,
        "overrides": [{"source": s, "assignment": a} for s, a in sources],
        "resolved_overrides": overrides,
        "args": command_args(args),
        "run_hash": run_hash,
        "inputs": experiment.input_hashes(),
    }
    (run_dir / "snapshot.json").write_text(json.dumps(snapshot, indent=2, default=str), encoding="utf-8")

    started = time.time()
    stage_logger.log_start(args.command, snapshot)
    try:
        result = COMMANDS[args.command](experiment, args, run_dir)
    except PipelineError as e:
        stage_logger.log_error(args.command, e.detail, type(e).__name__)
        raise
    stage_logger.log_end(args.command, {"seconds": round(time.time() - started, 2)})
    result_path.write_text(json.dumps(result, indent=2, default=str), encoding="utf-8")
    logger.info(f"{args.command}: results in {run_dir}")
    return 0


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.debug:
        os.environ["LOG_LEVEL"] = "DEBUG"
    setup_logging()
    try:
        return run_command(args)
    except PipelineError as e:
        logger.error(f"{args.command} failed: {e}")
        return e.exit_code
