"""Deterministic synthetic speech-emotion corpora.

Each class is a harmonic tone whose fundamental and amplitude-modulation
rate both depend on the class, so classifiers can exploit spectral and
temporal structure. Speakers perturb the fundamental, corpora shift pitch
and noise level, and partitions are speaker-disjoint by construction.
"""

import json
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import dsp
from .corpus import MANIFEST_HEADER
from .errors import ConfigError

# Labels deliberately chosen from the arousal/valence table so dimensional
# regimes work on the fixture; order fixes the class index.
CLASS_NAMES = ("anger", "happiness", "neutral", "sadness", "boredom", "fear", "surprise")

F0_BASE = 220.0
F0_CLASS_RATIO = 1.25
F0_SPEAKER_SPREAD = 0.03
AM_BASE_HZ = 2.0
HARMONICS = 4
PEAK = 0.5
EDGE_RAMP_S = 0.02


@dataclass(frozen=True)
class CorpusSpec:
    corpus_id: str
    class_count: int = 4
    samples_per_class: int = 30
    speakers: int = 5
    duration_range: tuple = (0.8, 1.6)
    pitch_offset_hz: float = 0.0
    noise_snr_db: float = 30.0

    def __post_init__(self):
        if not 2 <= self.class_count <= len(CLASS_NAMES):
            raise ConfigError(
                f"class_count must be in [2, {len(CLASS_NAMES)}], got {self.class_count}"
            )
        lo, hi = self.duration_range
        if not (0.5 <= lo <= hi <= 12.0):
            raise ConfigError(f"duration_range must lie within [0.5, 12] s, got {self.duration_range}")
        if self.speakers < 3:
            raise ConfigError("need at least 3 speakers for disjoint partitions")
        if self.samples_per_class < 5:
            raise ConfigError("need at least 5 samples per class to fill all partitions")
        object.__setattr__(self, "duration_range", (float(lo), float(hi)))


@dataclass(frozen=True)
class SynthSpec:
    corpora: tuple = ()
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "corpora", tuple(self.corpora))
        if not self.corpora:
            raise ConfigError("spec needs at least one corpus")
        ids = [c.corpus_id for c in self.corpora]
        if len(set(ids)) != len(ids):
            raise ConfigError(f"duplicate corpus ids in spec: {ids}")


def default_spec(seed: int = 0) -> SynthSpec:
    """Three pretraining corpora plus one shifted held-out corpus."""
    return SynthSpec(
        corpora=(
            CorpusSpec("syn_a"),
            CorpusSpec("syn_b", pitch_offset_hz=18.0, noise_snr_db=26.0),
            CorpusSpec("syn_c", pitch_offset_hz=-14.0, noise_snr_db=28.0),
            CorpusSpec("syn_held", pitch_offset_hz=30.0, noise_snr_db=24.0),
        ),
        seed=seed,
    )


def spec_from_json(path) -> SynthSpec:
    """Strict JSON loader: unknown keys are rejected by name."""
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    known_top = {"corpora", "seed"}
    for key in doc:
        if key not in known_top:
            raise ConfigError(f"unknown key {key!r} in synth spec")
    known_corpus = set(CorpusSpec.__dataclass_fields__)
    corpora = []
    for entry in doc.get("corpora", []):
        for key in entry:
            if key not in known_corpus:
                raise ConfigError(f"unknown key {key!r} in corpus spec")
        if "duration_range" in entry:
            entry = dict(entry, duration_range=tuple(entry["duration_range"]))
        corpora.append(CorpusSpec(**entry))
    return SynthSpec(corpora=tuple(corpora), seed=int(doc.get("seed", 0)))


def class_labels(class_count: int) -> list:
    return list(CLASS_NAMES[:class_count])


def am_rate(class_index: int) -> float:
    return AM_BASE_HZ * 2.0**class_index


def _partition_counts(samples_per_class: int) -> dict:
    held = max(1, samples_per_class // 5)
    return {"train": samples_per_class - 2 * held, "devel": held, "test": held}


def _partition_speakers(speakers: int) -> dict:
    held = max(1, speakers // 5)
    names = [f"spk{j:02d}" for j in range(speakers)]
    return {
        "train": names[: speakers - 2 * held],
        "devel": names[speakers - 2 * held : speakers - held],
        "test": names[speakers - held :],
    }


def _waveform(
    rng: np.random.Generator,
    duration_s: float,
    f0: float,
    modulation_hz: float,
    snr_db: float,
) -> np.ndarray:
    n = int(round(duration_s * dsp.SAMPLE_RATE))
    t = np.arange(n) / dsp.SAMPLE_RATE
    phases = rng.uniform(0.0, 2.0 * np.pi, size=HARMONICS + 1)
    signal = np.zeros(n)
    for h in range(1, HARMONICS + 1):
        signal += np.sin(2.0 * np.pi * h * f0 * t + phases[h - 1]) / h
    envelope = (1.0 + 0.8 * np.sin(2.0 * np.pi * modulation_hz * t + phases[-1])) / 1.8
    signal *= envelope

    ramp = min(int(EDGE_RAMP_S * dsp.SAMPLE_RATE), n // 2)
    if ramp:  # fade edges to avoid clicks
        signal[:ramp] *= np.linspace(0.0, 1.0, ramp)
        signal[n - ramp :] *= np.linspace(1.0, 0.0, ramp)

    signal *= PEAK / np.max(np.abs(signal))
    rms = float(np.sqrt(np.mean(signal**2)))
    noise = rng.standard_normal(n) * (rms * 10.0 ** (-snr_db / 20.0))
    return np.clip(signal + noise, -1.0, 1.0).astype(np.float32)


def generate(spec: SynthSpec, out_dir) -> dict:
    """Write every corpus's WAVs and manifest; returns corpus_id -> manifest path.

    Layout: out_dir/<corpus_id>/manifest.csv with audio under
    out_dir/<corpus_id>/audio/, paths stored relative to the manifest.
    """
    import csv

    out_dir = Path(out_dir)
    manifests = {}
    for corpus in spec.corpora:
        rng = np.random.default_rng(
            np.random.SeedSequence([spec.seed, zlib.crc32(corpus.corpus_id.encode("utf-8"))])
        )
        corpus_dir = out_dir / corpus.corpus_id
        audio_dir = corpus_dir / "audio"
        audio_dir.mkdir(parents=True, exist_ok=True)

        speaker_mult = {
            name: 1.0 + F0_SPEAKER_SPREAD * rng.uniform(-1.0, 1.0)
            for names in _partition_speakers(corpus.speakers).values()
            for name in names
        }
        by_partition = _partition_speakers(corpus.speakers)
        counts = _partition_counts(corpus.samples_per_class)
        labels = class_labels(corpus.class_count)
        lo, hi = corpus.duration_range

        rows = []
        for partition in ("train", "devel", "test"):
            pool = by_partition[partition]
            for class_index, label in enumerate(labels):
                for i in range(counts[partition]):
                    speaker = pool[i % len(pool)]
                    f0 = (
                        (F0_BASE + corpus.pitch_offset_hz)
                        * F0_CLASS_RATIO**class_index
                        * speaker_mult[speaker]
                        * (1.0 + 0.01 * rng.uniform(-1.0, 1.0))
                    )
                    duration = rng.uniform(lo, hi)
                    wave = _waveform(rng, duration, f0, am_rate(class_index), corpus.noise_snr_db)
                    sample_id = f"{corpus.corpus_id}_{partition}_{label}_{i:03d}"
                    dsp.write_wav(audio_dir / f"{sample_id}.wav", wave)
                    rows.append(
                        [corpus.corpus_id, sample_id, f"audio/{sample_id}.wav", speaker, partition, label]
                    )

        manifest_path = corpus_dir / "manifest.csv"
        with open(manifest_path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(MANIFEST_HEADER)
            writer.writerows(rows)
        manifests[corpus.corpus_id] = manifest_path
    return manifests
