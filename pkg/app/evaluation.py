"""
Evaluation reports, the transfer matrix and the synthetic-volume sweep.

Reports are JSON plus an aligned text table; averages across transfer
settings are unweighted means of per-cell means.
"""
import json
import logging
from dataclasses import asdict, dataclass, field
from itertools import permutations
from pathlib import Path
from typing import TYPE_CHECKING, Dict, List, Optional, Sequence, Tuple, Union

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from app.classifier import ClassifierParams, predict_proba  # noqa: E402
from app.errors import ConfigurationError, ContractError  # noqa: E402
from app.logging import StageLogger  # noqa: E402
from app.metrics import auprc, pr_curve  # noqa: E402
from app.toyworld import LabeledPair  # noqa: E402

if TYPE_CHECKING:
    from app.pipeline import Experiment

logger = logging.getLogger("disaster-synth.evaluation")

METRIC = "average precision, tied scores share one threshold"
FINETUNED_COLUMN = "R4-ft"


@dataclass
class EvalReport:
    auprc: float
    pr_points: List[Tuple[float, float, float]]
    n_pos: int
    n_neg: int
    domain: str
    checkpoint_hash: str
    stage: str = ""
    metric: str = METRIC

    def to_dict(self) -> Dict:
        return asdict(self)

    def save(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=2), encoding="utf-8")
        return path

    @classmethod
    def from_dict(cls, data: Dict) -> "EvalReport":
        data = dict(data)
        data["pr_points"] = [tuple(p) for p in data["pr_points"]]
        return cls(**data)


def evaluate(params: ClassifierParams, dataset: Sequence, domain: Optional[str] = None) -> EvalReport:
    """Score the dataset in manifest order and summarize AUPRC and the PR curve"""
    if len(dataset) == 0:
        raise ContractError("evaluate needs a nonempty dataset")
    unlabeled = [item for item in dataset if not isinstance(item, LabeledPair)]
    if unlabeled:
        raise ContractError(f"evaluate needs labeled pairs; {len(unlabeled)} entries have no label")
    scores = predict_proba(params, list(dataset))
    labels = [item.label for item in dataset]
    n_pos = int(sum(labels))
    return EvalReport(
        auprc=auprc(scores, labels),
        pr_points=pr_curve(scores, labels),
        n_pos=n_pos,
        n_neg=len(labels) - n_pos,
        domain=domain or dataset[0].domain,
        checkpoint_hash=params.hash,
        stage=params.stage,
    )


def transfer_cells(domains: Sequence[str], protocol: str) -> List[Tuple[Tuple[str, ...], str]]:
    """(sources, target) settings of a transfer matrix"""
    if len(domains) < 2:
        raise ConfigurationError(f"a transfer matrix needs at least 2 domains, got {len(domains)}")
    if protocol == "single_source":
        return [((source,), target) for source, target in permutations(domains, 2)]
    if protocol == "multi_source":
        return [(tuple(d for d in domains if d != target), target) for target in domains]
    raise ConfigurationError(f"unknown protocol '{protocol}'")


def cell_label(sources: Sequence[str], target: str) -> str:
    return f"{'+'.join(sources)}->{target}"


@dataclass
class CellResult:
    sources: List[str]
    target: str
    values: Dict[str, List[float]] = field(default_factory=dict)

    @property
    def label(self) -> str:
        return cell_label(self.sources, self.target)

    def mean(self, variant: str) -> float:
        return float(np.mean(self.values[variant]))


@dataclass
class TransferReport:
    protocol: str
    variants: List[str]
    seeds: List[int]
    cells: List[CellResult]
    metric: str = METRIC

    def average(self, variant: str) -> float:
        return float(np.mean([cell.mean(variant) for cell in self.cells]))

    def delta(self, variant: str, cell: Optional[CellResult] = None) -> float:
        """Variant mean minus R0 mean, for one cell or the average"""
        if cell is not None:
            return cell.mean(variant) - cell.mean("R0")
        return self.average(variant) - self.average("R0")

    def to_dict(self) -> Dict:
        data = asdict(self)
        data["kind"] = "transfer"
        data["means"] = {c.label: {v: c.mean(v) for v in self.variants} for c in self.cells}
        data["average"] = {v: self.average(v) for v in self.variants}
        if "R0" in self.variants:
            data["delta_vs_R0"] = {v: self.delta(v) for v in self.variants}
        return data

    @classmethod
    def from_dict(cls, data: Dict) -> "TransferReport":
        return cls(
            protocol=data["protocol"],
            variants=list(data["variants"]),
            seeds=list(data["seeds"]),
            cells=[CellResult(**c) for c in data["cells"]],
            metric=data.get("metric", METRIC),
        )

    def format_table(self) -> str:
        """Rows are variants, columns are transfer settings plus Avg.; AUPRC in percent"""
        columns = [c.label for c in self.cells] + ["Avg."]
        has_r0 = "R0" in self.variants
        rows = []
        for variant in self.variants:
            cells = [self._entry(c.mean(variant), c.mean("R0") if has_r0 else None, variant) for c in self.cells]
            cells.append(self._entry(self.average(variant), self.average("R0") if has_r0 else None, variant))
            rows.append([variant] + cells)
        header = ["Variant"] + columns
        widths = [max(len(str(row[i])) for row in [header] + rows) for i in range(len(header))]
        lines = [
            f"{self.protocol} transfer, AUPRC (%) over {len(self.seeds)} seed(s)",
            "  ".join(h.ljust(w) for h, w in zip(header, widths)),
            "  ".join("-" * w for w in widths),
        ]
        lines += ["  ".join(str(v).ljust(w) for v, w in zip(row, widths)) for row in rows]
        return "\n".join(lines) + "\n"

    @staticmethod
    def _entry(value: float, baseline: Optional[float], variant: str) -> str:
        text = f"{100 * value:.2f}"
        if baseline is not None and variant != "R0":
            text += f" ({100 * (value - baseline):+.2f})"
        return text


def run_transfer_matrix(
    experiment: "Experiment",
    domains: Sequence[str],
    protocol: str,
    variants: Sequence[str],
    seeds: int,
    include_finetuned: bool = False,
    stage_logger: Optional[StageLogger] = None,
) -> TransferReport:
    """Train and evaluate every (sources, target) cell for each seed; cells run in order"""
    cells = transfer_cells(domains, protocol)
    stage_logger = stage_logger or StageLogger(logger, f"transfer-{protocol}")
    stage_logger.log_start("transfer-matrix", {"cells": len(cells), "variants": list(variants), "seeds": seeds})
    columns = list(variants) + ([FINETUNED_COLUMN] if include_finetuned else [])
    results = []
    for number, (sources, target) in enumerate(cells, start=1):
        cell = CellResult(sources=list(sources), target=target, values={v: [] for v in columns})
        for seed in range(seeds):
            reports = experiment.run_cell(sources, target, variants, seed)
            for variant in variants:
                cell.values[variant].append(reports[variant].auprc)
            if include_finetuned:
                tuned = experiment.run_cell(sources, target, ["R4"], seed, finetuned=True)
                cell.values[FINETUNED_COLUMN].append(tuned["R4"].auprc)
        results.append(cell)
        stage_logger.log_progress("transfer-matrix", number, {v: cell.mean(v) for v in columns})
    report = TransferReport(protocol=protocol, variants=columns, seeds=list(range(seeds)), cells=results)
    stage_logger.log_end("transfer-matrix", {"average": {v: report.average(v) for v in columns}})
    return report


@dataclass
class SweepReport:
    protocol: str
    fractions: List[float]
    seeds: List[int]
    # target -> one list of per-seed AUPRC values per fraction
    values: Dict[str, List[List[float]]]
    nested: bool = True
    metric: str = METRIC

    def series(self, target: str) -> List[Tuple[float, float, List[float]]]:
        """(fraction, mean AUPRC, per-seed values) points"""
        return [(f, float(np.mean(v)), v) for f, v in zip(self.fractions, self.values[target])]

    def to_dict(self) -> Dict:
        data = asdict(self)
        data["kind"] = "sweep"
        data["series"] = {t: self.series(t) for t in self.values}
        return data

    @classmethod
    def from_dict(cls, data: Dict) -> "SweepReport":
        return cls(
            protocol=data["protocol"], fractions=list(data["fractions"]), seeds=list(data["seeds"]),
            values={k: [list(v) for v in vs] for k, vs in data["values"].items()},
            nested=data.get("nested", True), metric=data.get("metric", METRIC),
        )

    def format_table(self) -> str:
        header = ["Target"] + [f"{100 * f:g}%" for f in self.fractions]
        rows = [[t] + [f"{100 * m:.2f}" for _, m, _ in self.series(t)] for t in self.values]
        widths = [max(len(row[i]) for row in [header] + rows) for i in range(len(header))]
        lines = [f"R4 AUPRC (%) by synthetic volume, {self.protocol}", "  ".join(h.ljust(w) for h, w in zip(header, widths))]
        lines += ["  ".join(v.ljust(w) for v, w in zip(row, widths)) for row in rows]
        return "\n".join(lines) + "\n"


def volume_sweep(
    experiment: "Experiment",
    fractions: Sequence[float],
    protocol: str,
    seeds: int,
    targets: Optional[Sequence[str]] = None,
    stage_logger: Optional[StageLogger] = None,
) -> SweepReport:
    """R4 at each synthetic volume fraction, using nested subsets of one synthetic set per seed.

    R0 is trained once per cell and seed and shared by every fraction.
    """
    fractions = list(fractions)
    if not fractions or any(f <= 0 or f > 1 for f in fractions) or fractions != sorted(fractions):
        raise ConfigurationError(f"fractions {fractions} must be sorted values in (0, 1]")
    domains = experiment.domain_names()
    cells = [c for c in transfer_cells(domains, protocol) if targets is None or c[1] in targets]
    stage_logger = stage_logger or StageLogger(logger, f"sweep-{protocol}")
    stage_logger.log_start("volume-sweep", {"fractions": fractions, "cells": len(cells), "seeds": seeds})

    values: Dict[str, List[List[float]]] = {}
    nested = True
    for sources, target in cells:
        key = cell_label(sources, target) if protocol == "single_source" else target
        per_fraction: List[List[float]] = [[] for _ in fractions]
        for seed in range(seeds):
            previous: set = set()
            # R0 does not depend on the synthetic volume
            base = experiment.train_cell(sources, target, ["R0"], seed)["R0"]
            for i, fraction in enumerate(fractions):
                ids = {e.id for e in experiment.synthetic(target, seed).subset(fraction).entries}
                nested = nested and previous <= ids
                previous = ids
                reports = experiment.run_cell(sources, target, ["R4"], seed, volume_fraction=fraction, base=base)
                per_fraction[i].append(reports["R4"].auprc)
        values[key] = per_fraction
        stage_logger.log_progress("volume-sweep", key, {f"{f:g}": float(np.mean(v)) for f, v in zip(fractions, per_fraction)})
    report = SweepReport(protocol=protocol, fractions=fractions, seeds=list(range(seeds)), values=values, nested=nested)
    stage_logger.log_end("volume-sweep", {"nested": nested})
    return report


def save_report(report, directory: Union[str, Path], name: str = "report") -> Path:
    """JSON report plus its text table"""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    path = directory / f"{name}.json"
    path.write_text(json.dumps(report.to_dict(), indent=2), encoding="utf-8")
    if hasattr(report, "format_table"):
        (directory / f"{name}.txt").write_text(report.format_table(), encoding="utf-8")
    return path


def load_report(path: Union[str, Path]):
    path = Path(path)
    if not path.is_file():
        raise ConfigurationError(f"Report not found: {path}")
    data = json.loads(path.read_text(encoding="utf-8"))
    kind = data.get("kind")
    if kind == "transfer":
        return TransferReport.from_dict(data)
    if kind == "sweep":
        return SweepReport.from_dict(data)
    if "pr_points" in data:
        return EvalReport.from_dict(data)
    if isinstance(data, dict) and data and all(isinstance(v, dict) and "pr_points" in v for v in data.values()):
        return {k: EvalReport.from_dict(v) for k, v in data.items()}
    raise ConfigurationError(f"{path} is not a report written by this tool")


def plot_pr_curves(reports: Dict[str, EvalReport], path: Union[str, Path]) -> Path:
    """PR curves as PNG, with the plotted points alongside as JSON"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig, ax = plt.subplots(figsize=(5, 4))
    for label, report in reports.items():
        recall = [0.0] + [p[1] for p in report.pr_points]
        precision = [report.pr_points[0][0]] + [p[0] for p in report.pr_points]
        ax.step(recall, precision, where="post", label=f"{label} (AP {report.auprc:.3f})")
    ax.set_xlabel("Recall")
    ax.set_ylabel("Precision")
    ax.set_xlim(0, 1)
    ax.set_ylim(0, 1.05)
    ax.legend(fontsize="small")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    data = {label: report.pr_points for label, report in reports.items()}
    path.with_suffix(".json").write_text(json.dumps(data, indent=2), encoding="utf-8")
    return path


def plot_volume_sweep(report: SweepReport, path: Union[str, Path]) -> Path:
    """Mean AUPRC against synthetic volume, one line per target"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig, ax = plt.subplots(figsize=(5, 4))
    for target in report.values:
        points = report.series(target)
        ax.plot([100 * f for f, _, _ in points], [100 * m for _, m, _ in points], marker="o", label=target)
    ax.set_xlabel("Synthetic data (% of target images)")
    ax.set_ylabel("AUPRC (%)")
    ax.legend(fontsize="small")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    data = {t: report.series(t) for t in report.values}
    path.with_suffix(".json").write_text(json.dumps(data, indent=2), encoding="utf-8")
    return path


def plot_transfer(report: TransferReport, path: Union[str, Path]) -> Path:
    """Grouped bars of mean AUPRC per variant and transfer setting"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    labels = [c.label for c in report.cells] + ["Avg."]
    width = 0.8 / len(report.variants)
    fig, ax = plt.subplots(figsize=(max(5, 1.2 * len(labels)), 4))
    for i, variant in enumerate(report.variants):
        heights = [100 * c.mean(variant) for c in report.cells] + [100 * report.average(variant)]
        ax.bar(np.arange(len(labels)) + i * width, heights, width, label=variant)
    ax.set_xticks(np.arange(len(labels)) + 0.4 - width / 2)
    ax.set_xticklabels(labels, rotation=30, ha="right", fontsize="small")
    ax.set_ylabel("AUPRC (%)")
    ax.legend(fontsize="small")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_report(report, path: Union[str, Path]) -> Path:
    """Render whichever plot fits the report type"""
    if isinstance(report, SweepReport):
        return plot_volume_sweep(report, path)
    if isinstance(report, TransferReport):
        return plot_transfer(report, path)
    if isinstance(report, EvalReport):
        return plot_pr_curves({report.stage or report.domain: report}, path)
    return plot_pr_curves(report, path)
