"""UAR, confusion matrices, chance level, McNemar's test, run comparison.

UAR (unweighted average recall) is the mean of per-class recalls over the
classes actually present in the reference; chance level is 1/K. McNemar's
test compares two classifiers through their discordant error counts on the
same samples.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    ConfigError,
    EmptyMatrix,
    LabelOutOfRange,
    LengthMismatch,
    MisalignedRuns,
)

CHI2_1DF_CRITICAL_05 = 3.841
MCNEMAR_EXACT_BELOW = 25


def confusion_matrix(reference, predictions, k: int) -> np.ndarray:
    """K x K counts; rows are reference classes, columns predictions."""
    ref = np.asarray(reference, dtype=np.int64)
    pred = np.asarray(predictions, dtype=np.int64)
    if ref.shape != pred.shape or ref.ndim != 1:
        raise LengthMismatch(f"reference {ref.shape} vs predictions {pred.shape}")
    if ref.size and (min(ref.min(), pred.min()) < 0 or max(ref.max(), pred.max()) >= k):
        raise LabelOutOfRange(f"labels must lie in [0, {k})")
    conf = np.zeros((k, k), dtype=np.int64)
    np.add.at(conf, (ref, pred), 1)
    return conf


def per_class_recalls(conf: np.ndarray) -> list[float | None]:
    """Diagonal over row sum per class; None for reference-absent classes."""
    conf = np.asarray(conf)
    out: list[float | None] = []
    for row in range(conf.shape[0]):
        total = conf[row].sum()
        out.append(float(conf[row, row] / total) if total > 0 else None)
    return out


def uar(conf: np.ndarray) -> float:
    recalls = [r for r in per_class_recalls(conf) if r is not None]
    if not recalls:
        raise EmptyMatrix("no reference-present class in confusion matrix")
    return float(np.mean(recalls))


def chance_level(k: int) -> float:
    if k < 2:
        raise ConfigError(f"chance level needs at least 2 classes, got {k}")
    return 1.0 / k


def uar_from_labels(reference, predictions) -> float:
    classes = sorted(set(reference) | set(predictions))
    index = {c: i for i, c in enumerate(classes)}
    ref = [index[r] for r in reference]
    pred = [index[p] for p in predictions]
    return uar(confusion_matrix(ref, pred, len(classes)))


# --- McNemar ---------------------------------------------------------------

@dataclass(frozen=True)
class McNemarResult:
    b: int  # baseline correct, candidate wrong
    c: int  # baseline wrong, candidate correct
    statistic: float
    p_value: float
    method: str  # "chi2" (continuity corrected) or "exact" (binomial)
    significant_at_05: bool
    direction: str  # "improvement" | "decrease" | "none", for the candidate


def _binom_cdf(x: int, n: int, p: float = 0.5) -> float:
    return sum(math.comb(n, i) * p**i * (1 - p) ** (n - i) for i in range(x + 1))


def mcnemar(pred_baseline, pred_candidate, reference) -> McNemarResult:
    """Paired discordant-error test between two prediction sequences.

    With b + c >= 25: continuity-corrected statistic (|b-c|-1)^2/(b+c)
    against the chi-square(1) 5 % critical value; below that, the exact
    two-sided binomial test on min(b, c) of b + c fair coin flips.
    """
    a = np.asarray(pred_baseline)
    b_pred = np.asarray(pred_candidate)
    ref = np.asarray(reference)
    if not (len(a) == len(b_pred) == len(ref)):
        raise LengthMismatch(
            f"prediction/reference lengths differ: {len(a)}, {len(b_pred)}, {len(ref)}"
        )
    base_ok = a == ref
    cand_ok = b_pred == ref
    b = int(np.sum(base_ok & ~cand_ok))
    c = int(np.sum(~base_ok & cand_ok))
    n = b + c

    statistic = (abs(b - c) - 1) ** 2 / n if n > 0 else 0.0
    if n == 0:
        p_value, method, significant = 1.0, "exact", False
    elif n >= MCNEMAR_EXACT_BELOW:
        method = "chi2"
        # survival value not needed for the decision; report a two-sided
        # normal-approximation p for context
        p_value = float(math.erfc(math.sqrt(statistic / 2.0)))
        significant = statistic > CHI2_1DF_CRITICAL_05
    else:
        method = "exact"
        p_value = min(1.0, 2.0 * _binom_cdf(min(b, c), n))
        significant = p_value < 0.05

    if significant and c > b:
        direction = "improvement"
    elif significant and b > c:
        direction = "decrease"
    else:
        direction = "none"
    return McNemarResult(
        b=b, c=c, statistic=float(statistic), p_value=float(p_value),
        method=method, significant_at_05=significant, direction=direction,
    )


# --- per-run reports -----------------------------------------------------------

@dataclass
class EvalReport:
    corpus_id: str
    partition: str
    classes: list[str]
    n_samples: int
    uar: float
    chance: float
    per_class_recall: dict[str, float | None]
    confusion: list[list[int]]
    excluded_classes: list[str] = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps(self.__dict__, indent=1, sort_keys=True) + "\n"


def evaluate(reference_idx, predicted_idx, classes, corpus_id: str, partition: str) -> EvalReport:
    conf = confusion_matrix(reference_idx, predicted_idx, len(classes))
    recalls = per_class_recalls(conf)
    return EvalReport(
        corpus_id=corpus_id,
        partition=partition,
        classes=list(classes),
        n_samples=int(conf.sum()),
        uar=uar(conf),
        chance=chance_level(len(classes)),
        per_class_recall={c: r for c, r in zip(classes, recalls)},
        confusion=conf.tolist(),
        excluded_classes=[c for c, r in zip(classes, recalls) if r is None],
    )


def format_report(report: EvalReport) -> str:
    lines = [
        f"corpus     {report.corpus_id}",
        f"partition  {report.partition}",
        f"samples    {report.n_samples}",
        f"uar        {report.uar:.4f}",
        f"chance     {report.chance:.3f}",
    ]
    if report.excluded_classes:
        lines.append(f"excluded   {', '.join(report.excluded_classes)} (absent from reference)")
    width = max(len(c) for c in report.classes)
    lines.append("recall per class:")
    for c in report.classes:
        r = report.per_class_recall[c]
        lines.append(f"  {c.ljust(width)}  {'-' if r is None else f'{r:.4f}'}")
    return "\n".join(lines)


# --- prediction files and cross-run comparison -----------------------------------

PREDICTIONS_HEADER = ["sample_id", "reference", "prediction"]


def write_predictions(path, sample_ids, reference_labels, predicted_labels) -> None:
    if not (len(sample_ids) == len(reference_labels) == len(predicted_labels)):
        raise LengthMismatch("sample_ids, reference and prediction lengths differ")
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(PREDICTIONS_HEADER)
        for row in zip(sample_ids, reference_labels, predicted_labels):
            writer.writerow(row)


def read_predictions(path) -> tuple[list[str], list[str], list[str]]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or [c for c in PREDICTIONS_HEADER if c not in reader.fieldnames]:
            raise MisalignedRuns(f"{path}: expected header {','.join(PREDICTIONS_HEADER)}")
        ids, refs, preds = [], [], []
        for row in reader:
            ids.append(row["sample_id"])
            refs.append(row["reference"])
            preds.append(row["prediction"])
    if not ids:
        raise MisalignedRuns(f"{path}: no prediction rows")
    return ids, refs, preds


@dataclass
class CompareRow:
    name: str
    uar: float
    mcnemar: McNemarResult
    mark: str  # "+", "-" or ""


@dataclass
class CompareTable:
    baseline_name: str
    baseline_uar: float
    chance: float
    rows: list[CompareRow]
    note: str = (
        "McNemar direction weighs errors per sample and can disagree with the "
        "UAR ranking on imbalanced data."
    )

    def to_json(self) -> str:
        doc = {
            "baseline": {"name": self.baseline_name, "uar": self.baseline_uar},
            "chance": self.chance,
            "note": self.note,
            "candidates": [
                {
                    "name": r.name,
                    "uar": r.uar,
                    "mark": r.mark,
                    "b": r.mcnemar.b,
                    "c": r.mcnemar.c,
                    "statistic": r.mcnemar.statistic,
                    "p_value": r.mcnemar.p_value,
                    "method": r.mcnemar.method,
                    "significant": r.mcnemar.significant_at_05,
                    "direction": r.mcnemar.direction,
                }
                for r in self.rows
            ],
        }
        return json.dumps(doc, indent=1, sort_keys=True) + "\n"


def compare(baseline_path, candidate_paths, names=None) -> CompareTable:
    """McNemar each candidate prediction file against the baseline file."""
    ids, refs, base_preds = read_predictions(baseline_path)
    if names is None:
        names = [Path(p).stem for p in candidate_paths]
    rows = []
    for name, path in zip(names, candidate_paths):
        cand_ids, cand_refs, cand_preds = read_predictions(path)
        if cand_ids != ids or cand_refs != refs:
            raise MisalignedRuns(
                f"{path}: sample ids/references do not match the baseline file"
            )
        result = mcnemar(base_preds, cand_preds, refs)
        mark = {"improvement": "+", "decrease": "-", "none": ""}[result.direction]
        rows.append(CompareRow(name=name, uar=uar_from_labels(refs, cand_preds), mcnemar=result, mark=mark))
    return CompareTable(
        baseline_name=Path(baseline_path).stem,
        baseline_uar=uar_from_labels(refs, base_preds),
        chance=chance_level(len(set(refs))),
        rows=rows,
    )


def format_compare(table: CompareTable) -> str:
    header = ["run", "uar", "b", "c", "stat", "p", "mark"]
    rows = [[table.baseline_name, f"{table.baseline_uar:.4f}", "", "", "", "", "(baseline)"]]
    for r in table.rows:
        rows.append(
            [
                r.name,
                f"{r.uar:.4f}",
                str(r.mcnemar.b),
                str(r.mcnemar.c),
                f"{r.mcnemar.statistic:.2f}",
                f"{r.mcnemar.p_value:.4f}",
                r.mark,
            ]
        )
    widths = [max(len(h), *(len(row[i]) for row in rows)) for i, h in enumerate(header)]
    lines = ["  ".join(h.ljust(w) for h, w in zip(header, widths))]
    lines += ["  ".join(c.ljust(w) for c, w in zip(row, widths)) for row in rows]
    lines.append(f"chance {table.chance:.3f}; {table.note}")
    return "\n".join(lines)
