"""Corpus manifests, arousal/valence label mapping, balancing, and class weights.

A corpus is described by a CSV manifest with the fixed header
``corpus,sample_id,path,speaker,partition,label``. Categorical emotion labels
can be projected onto a shared two-level arousal / three-level valence space
for aggregated cross-corpus training.
"""

from __future__ import annotations

import csv
import logging
import math
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    DuplicateSampleId,
    EmptyManifest,
    EmptyPartition,
    MissingColumn,
    UnknownPartition,
    UnmappedLabel,
)

log = logging.getLogger(__name__)

PARTITIONS = ("train", "devel", "test")

MANIFEST_HEADER = ["corpus", "sample_id", "path", "speaker", "partition", "label"]

AROUSAL_LEVELS = ("low", "high")
VALENCE_LEVELS = ("negative", "neutral", "positive")

# Built-in category -> (arousal, valence) table. Each category belongs to
# exactly one of the six cells.
_AV_CELLS = {
    ("low", "negative"): [
        "contempt", "disappointment", "disgust", "frustration", "guilt",
        "hurt", "impatience", "irritation", "jealousy", "sadness", "shame",
        "unfriendliness", "worry",
    ],
    ("low", "neutral"): [
        "boredom", "confusion", "neutral", "pondering", "rest", "sneakiness",
    ],
    ("low", "positive"): [
        "admiration", "kindness", "pride", "relief", "tenderness",
    ],
    ("high", "negative"): [
        "aggressiveness", "anger", "anxiety", "despair", "fear",
        "helplessness", "high-stress", "scream",
    ],
    ("high", "neutral"): [
        "emphatic", "interest", "intoxication", "medium-stress",
        "nervousness", "surprise",
    ],
    ("high", "positive"): [
        "amusement", "cheerfulness", "elation", "excitement", "happiness",
        "joking", "joy", "pleasure", "positive",
    ],
}

AV_TABLE: dict[str, tuple[str, str]] = {
    category: cell for cell, categories in _AV_CELLS.items() for category in categories
}


@dataclass(frozen=True)
class SampleRecord:
    """One labeled audio sample inside a corpus."""

    corpus_id: str
    sample_id: str
    audio_path: str
    speaker_id: str
    partition: str
    label: str


@dataclass(frozen=True)
class AVLabel:
    arousal: str
    valence: str


@dataclass
class CorpusManifest:
    """A corpus's validated, partitioned sample list."""

    corpus_id: str
    records: list[SampleRecord]
    warnings: list[str] = field(default_factory=list)

    @property
    def label_space(self) -> list[str]:
        return sorted({r.label for r in self.records})

    def speaker_sets(self) -> dict[str, set[str]]:
        sets: dict[str, set[str]] = {p: set() for p in PARTITIONS}
        for r in self.records:
            sets[r.partition].add(r.speaker_id)
        return sets

    def partition_records(self, partition: str) -> list[SampleRecord]:
        if partition not in PARTITIONS:
            raise UnknownPartition(f"unknown partition {partition!r}")
        return [r for r in self.records if r.partition == partition]


def normalize_label(label: str) -> str:
    return label.strip().lower()


def load_manifest(path) -> CorpusManifest:
    """Load and validate a corpus manifest CSV.

    Raises MissingColumn, UnknownPartition, DuplicateSampleId or
    EmptyManifest on malformed input. Speaker overlap between partitions is
    reported as a warning only, since not all corpora are speaker-disjoint.
    """
    path = Path(path)
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise EmptyManifest(f"{path}: no header row")
        missing = [c for c in MANIFEST_HEADER if c not in reader.fieldnames]
        if missing:
            raise MissingColumn(f"{path}: missing column(s) {', '.join(missing)}")
        rows = list(reader)

    if not rows:
        raise EmptyManifest(f"{path}: no sample rows")

    records = []
    seen_ids: set[str] = set()
    corpus_id = rows[0]["corpus"].strip()
    for i, row in enumerate(rows, start=2):
        partition = row["partition"].strip()
        if partition not in PARTITIONS:
            raise UnknownPartition(
                f"{path}:{i}: partition {partition!r} not one of {PARTITIONS}"
            )
        sample_id = row["sample_id"].strip()
        if sample_id in seen_ids:
            raise DuplicateSampleId(f"{path}:{i}: duplicate sample_id {sample_id!r}")
        seen_ids.add(sample_id)
        label = normalize_label(row["label"])
        if not label:
            raise EmptyManifest(f"{path}:{i}: empty label")
        records.append(
            SampleRecord(
                corpus_id=row["corpus"].strip(),
                sample_id=sample_id,
                audio_path=row["path"].strip(),
                speaker_id=row["speaker"].strip(),
                partition=partition,
                label=label,
            )
        )

    manifest = CorpusManifest(corpus_id=corpus_id, records=records)
    sets = manifest.speaker_sets()
    for a, b in [("train", "devel"), ("train", "test"), ("devel", "test")]:
        shared = sets[a] & sets[b]
        if shared:
            msg = (
                f"{corpus_id}: speakers {sorted(shared)} appear in both "
                f"{a} and {b} partitions"
            )
            manifest.warnings.append(msg)
            log.warning(msg)
    return manifest


def save_manifest(manifest: CorpusManifest, path) -> None:
    """Write a manifest back to CSV; inverse of load_manifest."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(MANIFEST_HEADER)
        for r in manifest.records:
            writer.writerow(
                [r.corpus_id, r.sample_id, r.audio_path, r.speaker_id, r.partition, r.label]
            )


def map_to_av(label: str) -> AVLabel:
    """Map a categorical emotion label onto its (arousal, valence) cell."""
    key = normalize_label(label)
    if key not in AV_TABLE:
        raise UnmappedLabel(f"label {label!r} has no arousal/valence mapping")
    arousal, valence = AV_TABLE[key]
    return AVLabel(arousal=arousal, valence=valence)


def av_target_label(label: str, target: str) -> str:
    av = map_to_av(label)
    if target == "arousal":
        return av.arousal
    if target == "valence":
        return av.valence
    raise ValueError(f"target must be 'arousal' or 'valence', got {target!r}")


def export_av_table(path) -> None:
    """Dump the category mapping as TSV: category<TAB>arousal<TAB>valence."""
    with open(path, "w", encoding="utf-8") as fh:
        for category in sorted(AV_TABLE):
            arousal, valence = AV_TABLE[category]
            fh.write(f"{category}\t{arousal}\t{valence}\n")


def balance_subsample(manifest: CorpusManifest, target: str, seed: int) -> CorpusManifest:
    """Subsample every partition so each mapped class keeps minority-class count.

    Operates per partition of this one corpus: within a partition, each
    arousal (or valence) class retains exactly the count of the smallest
    class, drawn uniformly without replacement from a seeded generator. A
    class with zero samples in some partition forces that partition down to
    zero samples per class, with a warning.
    """
    rng = np.random.default_rng(np.random.SeedSequence([seed]))
    levels = AROUSAL_LEVELS if target == "arousal" else VALENCE_LEVELS
    if target not in ("arousal", "valence"):
        raise ValueError(f"target must be 'arousal' or 'valence', got {target!r}")

    kept: list[SampleRecord] = []
    warnings: list[str] = []
    for partition in PARTITIONS:
        part_records = manifest.partition_records(partition)
        if not part_records:
            continue
        by_class: dict[str, list[SampleRecord]] = defaultdict(list)
        for r in part_records:
            by_class[av_target_label(r.label, target)].append(r)
        counts = {lvl: len(by_class.get(lvl, [])) for lvl in levels}
        m = min(counts.values())
        if m == 0:
            empty = [lvl for lvl, n in counts.items() if n == 0]
            msg = (
                f"{manifest.corpus_id}/{partition}: {target} class(es) "
                f"{empty} empty; partition reduced to zero samples per class"
            )
            warnings.append(msg)
            log.warning(msg)
            continue
        for lvl in levels:
            pool = by_class[lvl]
            idx = rng.choice(len(pool), size=m, replace=False)
            kept.extend(pool[j] for j in sorted(idx))

    order = {r.sample_id: i for i, r in enumerate(manifest.records)}
    kept.sort(key=lambda r: order[r.sample_id])
    return CorpusManifest(
        corpus_id=manifest.corpus_id, records=kept, warnings=warnings
    )


def map_labels(manifest: CorpusManifest, target: str) -> CorpusManifest:
    """Rewrite categorical labels as their arousal or valence class names."""
    records = [
        SampleRecord(
            corpus_id=r.corpus_id,
            sample_id=r.sample_id,
            audio_path=r.audio_path,
            speaker_id=r.speaker_id,
            partition=r.partition,
            label=av_target_label(r.label, target),
        )
        for r in manifest.records
    ]
    return CorpusManifest(corpus_id=manifest.corpus_id, records=records)


def aggregate_corpora(
    manifests: list[CorpusManifest], target: str, seed: int
) -> CorpusManifest:
    """Pool per-corpus balanced, AV-mapped manifests into one corpus.

    Balancing happens per source dataset before pooling; sample and speaker
    ids are namespaced by their source corpus to stay unique.
    """
    records: list[SampleRecord] = []
    for m in manifests:
        balanced = map_labels(balance_subsample(m, target, seed), target)
        for r in balanced.records:
            records.append(
                SampleRecord(
                    corpus_id=target,
                    sample_id=f"{m.corpus_id}:{r.sample_id}",
                    audio_path=r.audio_path,
                    speaker_id=f"{m.corpus_id}:{r.speaker_id}",
                    partition=r.partition,
                    label=r.label,
                )
            )
    return CorpusManifest(corpus_id=target, records=records)


def class_weights(manifest: CorpusManifest, partition: str) -> dict[str, float]:
    """Balanced inverse-frequency weights: w(c) = N / (K * n_c).

    Weighted counts average to 1, so the loss scale stays comparable across
    corpora regardless of imbalance.
    """
    part = manifest.partition_records(partition)
    if not part:
        raise EmptyPartition(f"{manifest.corpus_id}: partition {partition!r} is empty")
    counts = Counter(r.label for r in part)
    n = len(part)
    k = len(counts)
    return {label: n / (k * c) for label, c in sorted(counts.items())}


@dataclass
class CorpusSummary:
    corpus_id: str
    n_samples: int
    n_classes: int
    mean_duration_s: float
    std_duration_s: float
    total_hours: float
    n_missing_duration: int


@dataclass
class InspectReport:
    summaries: list[CorpusSummary]
    histogram_counts: list[int]  # pooled 1 s bins over [0, 10) s

    def total_samples(self) -> int:
        return sum(s.n_samples for s in self.summaries)

    def total_hours(self) -> float:
        return sum(s.total_hours for s in self.summaries)


def inspect(
    manifests: list[CorpusManifest], durations: dict[str, float]
) -> InspectReport:
    """Summarize corpora: counts, duration statistics, pooled histogram.

    ``durations`` maps "corpus_id/sample_id" to seconds. Records without a
    duration are flagged per corpus instead of failing.
    """
    summaries = []
    pooled: list[float] = []
    for m in manifests:
        durs = []
        missing = 0
        for r in m.records:
            d = durations.get(f"{r.corpus_id}/{r.sample_id}")
            if d is None:
                missing += 1
            else:
                durs.append(d)
        pooled.extend(durs)
        if durs:
            mean = float(np.mean(durs))
            std = float(np.std(durs))
            total_h = float(np.sum(durs)) / 3600.0
        else:
            mean = std = total_h = 0.0
        summaries.append(
            CorpusSummary(
                corpus_id=m.corpus_id,
                n_samples=len(m.records),
                n_classes=len(m.label_space),
                mean_duration_s=mean,
                std_duration_s=std,
                total_hours=total_h,
                n_missing_duration=missing,
            )
        )
    counts = [0] * 10
    for d in pooled:
        b = int(math.floor(d))
        if 0 <= b < 10:
            counts[b] += 1
    return InspectReport(summaries=summaries, histogram_counts=counts)


def format_inspect_table(report: InspectReport) -> str:
    """Aligned-column plain-text rendering of an InspectReport."""
    header = ["corpus", "samples", "classes", "mean_dur[s]", "std[s]", "total[h]", "missing"]
    rows = [
        [
            s.corpus_id,
            str(s.n_samples),
            str(s.n_classes),
            f"{s.mean_duration_s:.2f}",
            f"{s.std_duration_s:.2f}",
            f"{s.total_hours:.3f}",
            str(s.n_missing_duration) if s.n_missing_duration else "",
        ]
        for s in report.summaries
    ]
    widths = [max(len(h), *(len(r[i]) for r in rows)) if rows else len(h) for i, h in enumerate(header)]
    lines = ["  ".join(h.ljust(w) for h, w in zip(header, widths))]
    for r in rows:
        lines.append("  ".join(c.ljust(w) for c, w in zip(r, widths)))
    return "\n".join(lines)
