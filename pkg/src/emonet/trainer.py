"""Training loops for every regime.

Single-corpus training runs epochs with a three-stage learning-rate ladder
driven by patience on development UAR; multi-corpus training interleaves
domains round-robin for a fixed number of rounds per stage. Transfer reuses
a pretrained checkpoint with a regime-specific freeze.
"""

import json
import time
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import dsp
from .corpus import CorpusManifest, class_weights, load_manifest
from .errors import (
    ConfigError,
    DivergedLoss,
    EmptyPartition,
    SingleDomainCategorical,
    UnknownPartition,
    UnknownRegime,
)
from .evaluation import confusion_matrix, uar
from .model import EmoNet, load_checkpoint, save_checkpoint
from .nn import backward, ops, sgd_step, zero_grads

FULL_LADDER = (0.1, 0.01, 0.001)
REDUCED_LADDER = (0.01, 0.001)

# Regimes that start from the reduced ladder; everything else uses the full one.
_REDUCED_REGIMES = {"head_only", "full_finetune"}
_TRANSFER_REGIMES = ("adapters", "head_only", "full_finetune")
MULTI_TARGETS = ("categorical", "arousal", "valence", "arousal+valence")

# Stream tags start above 2**33 so they can never collide with the model's
# init entropy ([seed, 2**33] shared, [seed, crc32(domain)] per domain).
_TAG_SHUFFLE = 2**33 + 1
_TAG_DROPOUT = 2**33 + 2
_TAG_CROP = 2**33 + 3
_TAG_STREAM = 2**33 + 4
_TAG_STREAM_CROP = 2**33 + 5


def effective_lr(
    stage_lr: float,
    step_in_run: int,
    decay: float = 1e-6,
    law: str = "inverse_time",
) -> float:
    """Per-step decayed learning rate within one stage ladder run."""
    if step_in_run < 0:
        raise ConfigError(f"step must be >= 0, got {step_in_run}")
    if law == "inverse_time":
        return stage_lr / (1.0 + decay * step_in_run)
    if law == "exponential":
        return stage_lr * float(np.exp(-decay * step_in_run))
    raise ConfigError(f"unknown decay law {law!r}")


@dataclass(frozen=True)
class ScheduleConfig:
    """Knobs for both schedule kinds; stage_lrs=None resolves per regime."""

    stage_lrs: tuple | None = None
    patience: int = 50
    rounds_per_stage: int = 2500
    per_step_decay: float = 1e-6
    decay_law: str = "inverse_time"
    batch_size: int = 64
    momentum: float = 0.9
    l2: float = 1e-6
    max_epochs: int | None = None
    eval_every_rounds: int = 250

    def __post_init__(self):
        if self.decay_law not in ("inverse_time", "exponential"):
            raise ConfigError(f"unknown decay law {self.decay_law!r}")
        if self.patience < 1 or self.batch_size < 1 or self.rounds_per_stage < 1:
            raise ConfigError("patience, batch_size and rounds_per_stage must be >= 1")
        if self.stage_lrs is not None:
            ladder = tuple(float(lr) for lr in self.stage_lrs)
            if not ladder or any(lr <= 0 for lr in ladder):
                raise ConfigError("stage_lrs must be positive")
            for hi, lo in zip(ladder, ladder[1:]):
                if abs(hi / lo - 10.0) > 1e-9:
                    raise ConfigError("stage_lrs must decrease by a factor of 10")
            object.__setattr__(self, "stage_lrs", ladder)

    def resolve_lrs(self, regime: str) -> tuple:
        if self.stage_lrs is not None:
            return self.stage_lrs
        return REDUCED_LADDER if regime in _REDUCED_REGIMES else FULL_LADDER


@dataclass
class EarlyStopState:
    """Patience automaton over development UAR.

    A strict improvement resets the stale counter; hitting `patience` stale
    epochs advances the ladder stage (the counter resets, the best never
    does) and stops after the last stage.
    """

    patience: int
    n_stages: int
    best_uar: float = float("-inf")
    best_epoch: int = 0
    epochs_since_improve: int = 0
    stage_index: int = 0
    best_checkpoint_path: str | None = None

    def update(self, epoch: int, devel_uar: float) -> str:
        if devel_uar > self.best_uar:
            self.best_uar = devel_uar
            self.best_epoch = epoch
            self.epochs_since_improve = 0
            return "improved"
        self.epochs_since_improve += 1
        if self.epochs_since_improve < self.patience:
            return "stale"
        self.epochs_since_improve = 0
        self.stage_index += 1
        return "stop" if self.stage_index >= self.n_stages else "advance"


class BatchStream:
    """Endless stream of sample indices, reshuffled whenever exhausted.

    Batches may straddle a reshuffle boundary, so every sample is drawn
    exactly once per pass over the data.
    """

    def __init__(self, n: int, batch_size: int, rng: np.random.Generator):
        if n < 1:
            raise EmptyPartition("cannot stream batches from an empty partition")
        self._n = n
        self._size = batch_size
        self._rng = rng
        self._order = rng.permutation(n)
        self._pos = 0

    def next_indices(self) -> np.ndarray:
        out = np.empty(self._size, dtype=np.int64)
        filled = 0
        while filled < self._size:
            if self._pos == self._n:
                self._order = self._rng.permutation(self._n)
                self._pos = 0
            take = min(self._size - filled, self._n - self._pos)
            out[filled : filled + take] = self._order[self._pos : self._pos + take]
            self._pos += take
            filled += take
        return out


# --- corpus loading -------------------------------------------------------------


@dataclass
class LoadedSample:
    sample_id: str
    label_index: int
    audio: np.ndarray
    eval_features: np.ndarray
    # set when the sample fits the 5 s crop, where train == eval features
    train_features: np.ndarray | None


@dataclass
class LoadedCorpus:
    """A manifest's audio decoded and featurized, ready for batching."""

    corpus_id: str
    classes: list
    train: list
    devel: list
    test: list
    weights: np.ndarray

    def partition(self, name: str) -> list:
        if name not in ("train", "devel", "test"):
            raise UnknownPartition(f"unknown partition {name!r}")
        return getattr(self, name)

    @property
    def n_classes(self) -> int:
        return len(self.classes)


def load_corpus(manifest, audio_root=None) -> LoadedCorpus:
    """Decode a manifest's WAVs and cache deterministic features.

    `manifest` is a CorpusManifest or a path to one; relative audio paths
    resolve against audio_root (default: the manifest's directory).
    """
    if not isinstance(manifest, CorpusManifest):
        path = Path(manifest)
        if audio_root is None:
            audio_root = path.parent
        manifest = load_manifest(path)
    root = Path(audio_root) if audio_root is not None else Path(".")

    classes = manifest.label_space
    index = {label: i for i, label in enumerate(classes)}
    parts = {"train": [], "devel": [], "test": []}
    for r in manifest.records:
        audio = dsp.load_audio(root / r.audio_path)
        eval_features = dsp.log_mel(dsp.center_crop(audio))
        train_features = eval_features if len(audio) <= dsp.CROP_SAMPLES else None
        parts[r.partition].append(
            LoadedSample(r.sample_id, index[r.label], audio, eval_features, train_features)
        )

    weights = np.zeros(len(classes), dtype=np.float32)
    if parts["train"]:
        for label, w in class_weights(manifest, "train").items():
            weights[index[label]] = w

    return LoadedCorpus(manifest.corpus_id, classes, parts["train"], parts["devel"], parts["test"], weights)


def _train_features(sample: LoadedSample, rng: np.random.Generator) -> np.ndarray:
    if sample.train_features is not None:
        return sample.train_features
    return dsp.log_mel(dsp.random_crop(sample.audio, rng))


def _make_batch(samples, indices, crop_rng):
    feats = [_train_features(samples[i], crop_rng) for i in indices]
    batch, lengths = dsp.pad_batch(feats)
    labels = np.array([samples[i].label_index for i in indices], dtype=np.int64)
    return batch, lengths, labels


def partition_uar(model: EmoNet, domain_id: str, samples, n_classes: int) -> float:
    """Development-style UAR from per-sample eval-mode predictions."""
    logits = model.predict([s.eval_features for s in samples], domain_id)
    refs = [s.label_index for s in samples]
    return uar(confusion_matrix(refs, logits.argmax(axis=1), n_classes))


def predict_labels(model: EmoNet, domain_id: str, samples, classes) -> list:
    logits = model.predict([s.eval_features for s in samples], domain_id)
    return [classes[i] for i in logits.argmax(axis=1)]


# --- training loops -------------------------------------------------------------


@dataclass
class TrainResult:
    history: list
    best_uar: float
    best_epoch: int
    final_uar: float
    best_dir: Path | None = None
    final_dir: Path | None = None


def _write_jsonl(path: Path, records) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for record in records:
            fh.write(json.dumps(record, sort_keys=True) + "\n")


def _snapshot(model: EmoNet) -> dict:
    values = {n: p.value.copy() for n, p in model.params.items()}
    values.update({n: b.copy() for n, b in model.buffers.items()})
    return values


def _restore(model: EmoNet, values: dict) -> None:
    for n, p in model.params.items():
        p.value[...] = values[n]
    for n, b in model.buffers.items():
        b[...] = values[n]


def _save_outputs(model, out_dir, history, timings, best_values):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    _write_jsonl(out_dir / "history.jsonl", history)
    # wall-clock times live in a sidecar so history stays bit-reproducible
    _write_jsonl(out_dir / "timings.jsonl", timings)
    final_dir = out_dir / "final"
    save_checkpoint(model, final_dir)
    best_dir = out_dir / "best"
    if best_values is None:
        save_checkpoint(model, best_dir)
    else:
        current = _snapshot(model)
        _restore(model, best_values)
        save_checkpoint(model, best_dir)
        _restore(model, current)
    return best_dir, final_dir


def train_single(
    model: EmoNet,
    domain_id: str,
    corpus: LoadedCorpus,
    regime: str = "scratch",
    seed: int = 0,
    schedule: ScheduleConfig | None = None,
    out_dir=None,
) -> TrainResult:
    """Epoch training with patience-driven LR stages on one corpus.

    Each epoch is one seeded-shuffled pass over the train partition in
    batches of `batch_size` (the last short batch is kept). Development UAR
    is measured after every epoch and drives the patience automaton.
    """
    schedule = schedule or ScheduleConfig()
    ladder = schedule.resolve_lrs(regime)
    if not corpus.train:
        raise EmptyPartition(f"{corpus.corpus_id}: train partition is empty")
    if not corpus.devel:
        raise EmptyPartition(f"{corpus.corpus_id}: devel partition is empty")

    trainable = [model.params[n] for n in sorted(model.trainable_set(regime, domain_id))]
    everything = list(model.params.values())
    shuffle_rng = np.random.default_rng(np.random.SeedSequence([seed, _TAG_SHUFFLE]))
    dropout_rng = np.random.default_rng(np.random.SeedSequence([seed, _TAG_DROPOUT]))
    crop_rng = np.random.default_rng(np.random.SeedSequence([seed, _TAG_CROP]))

    stopper = EarlyStopState(patience=schedule.patience, n_stages=len(ladder))
    history: list = []
    timings: list = []
    best_values = None
    step = 0
    epoch = 0
    while True:
        epoch += 1
        started = time.perf_counter()
        stage = stopper.stage_index
        epoch_lr = effective_lr(ladder[stage], step, schedule.per_step_decay, schedule.decay_law)
        order = shuffle_rng.permutation(len(corpus.train))
        losses = []
        for lo in range(0, len(order), schedule.batch_size):
            batch, lengths, labels = _make_batch(corpus.train, order[lo : lo + schedule.batch_size], crop_rng)
            logits = model.forward(batch, lengths, domain_id, training=True, rng=dropout_rng)
            loss = ops.softmax_xent(logits, labels, corpus.weights)
            if not np.isfinite(loss.value):
                raise DivergedLoss(
                    f"non-finite loss {loss.value!r} at epoch {epoch}, step {step} (lr stage {stage})"
                )
            zero_grads(everything)
            backward(loss)
            sgd_step(
                trainable,
                effective_lr(ladder[stage], step, schedule.per_step_decay, schedule.decay_law),
                momentum=schedule.momentum,
                l2=schedule.l2,
            )
            losses.append(float(loss.value))
            step += 1

        devel_uar = partition_uar(model, domain_id, corpus.devel, corpus.n_classes)
        outcome = stopper.update(epoch, devel_uar)
        history.append(
            {
                "epoch": epoch,
                "step": step,
                "stage": stage,
                "lr": epoch_lr,
                "train_loss": float(np.mean(losses)),
                "devel_uar": devel_uar,
            }
        )
        timings.append({"epoch": epoch, "wall_ms": 1000.0 * (time.perf_counter() - started)})
        if outcome == "improved":
            best_values = _snapshot(model)
        if outcome == "stop" or (schedule.max_epochs is not None and epoch >= schedule.max_epochs):
            break

    result = TrainResult(history, stopper.best_uar, stopper.best_epoch, history[-1]["devel_uar"])
    if out_dir is not None:
        result.best_dir, result.final_dir = _save_outputs(model, out_dir, history, timings, best_values)
    return result


@dataclass
class MultiTrainResult:
    history: list
    devel_uar_by_domain: dict
    batches_per_domain: dict
    checkpoint_dir: Path | None = None


def _check_targets(corpora, targets: str) -> None:
    from .corpus import AROUSAL_LEVELS, VALENCE_LEVELS

    if targets not in MULTI_TARGETS:
        raise ConfigError(f"unknown multi-domain target {targets!r}")
    if targets == "categorical":
        if len(corpora) < 2:
            raise SingleDomainCategorical(
                "categorical multi-domain training needs at least 2 corpora"
            )
        return
    if targets == "arousal+valence" and len(corpora) != 2:
        raise ConfigError("arousal+valence training takes exactly the two aggregated corpora")
    allowed = {
        "arousal": [set(AROUSAL_LEVELS)],
        "valence": [set(VALENCE_LEVELS)],
        "arousal+valence": [set(AROUSAL_LEVELS), set(VALENCE_LEVELS)],
    }[targets]
    for c in corpora:
        if not any(set(c.classes) <= space for space in allowed):
            raise ConfigError(
                f"{c.corpus_id}: classes {c.classes} do not match target {targets!r}; "
                "map and balance the corpus first"
            )


def train_round_robin(
    model: EmoNet,
    corpora,
    targets: str = "categorical",
    seed: int = 0,
    schedule: ScheduleConfig | None = None,
    out_dir=None,
) -> MultiTrainResult:
    """Fixed-rounds multi-domain training, one batch per domain per round.

    Runs rounds_per_stage rounds at each ladder stage; the round index is
    the decay step, so every domain's batch within a round shares one
    learning rate. Development UAR is recorded every eval_every_rounds
    rounds (history only, no early stopping).
    """
    schedule = schedule or ScheduleConfig()
    corpora = list(corpora)
    _check_targets(corpora, targets)
    ladder = schedule.resolve_lrs("multi_domain")

    for c in corpora:
        if not c.train:
            raise EmptyPartition(f"{c.corpus_id}: train partition is empty")
        if c.corpus_id not in model.domains:
            model.add_domain(c.corpus_id, c.n_classes)

    dropout_rng = np.random.default_rng(np.random.SeedSequence([seed, _TAG_DROPOUT]))
    streams = {}
    crop_rngs = {}
    trainable = {}
    for c in corpora:
        tag = zlib.crc32(c.corpus_id.encode("utf-8"))
        streams[c.corpus_id] = BatchStream(
            len(c.train),
            schedule.batch_size,
            np.random.default_rng(np.random.SeedSequence([seed, _TAG_STREAM, tag])),
        )
        crop_rngs[c.corpus_id] = np.random.default_rng(
            np.random.SeedSequence([seed, _TAG_STREAM_CROP, tag])
        )
        trainable[c.corpus_id] = [
            model.params[n] for n in sorted(model.trainable_set("multi_domain", c.corpus_id))
        ]

    everything = list(model.params.values())
    history: list = []
    timings: list = []
    counts = {c.corpus_id: 0 for c in corpora}
    total_rounds = len(ladder) * schedule.rounds_per_stage
    final_uars: dict = {}
    for rnd in range(total_rounds):
        started = time.perf_counter()
        stage = rnd // schedule.rounds_per_stage
        lr = effective_lr(ladder[stage], rnd, schedule.per_step_decay, schedule.decay_law)
        round_losses = []
        for c in corpora:
            idx = streams[c.corpus_id].next_indices()
            batch, lengths, labels = _make_batch(c.train, idx, crop_rngs[c.corpus_id])
            logits = model.forward(batch, lengths, c.corpus_id, training=True, rng=dropout_rng)
            loss = ops.softmax_xent(logits, labels, c.weights)
            if not np.isfinite(loss.value):
                raise DivergedLoss(
                    f"non-finite loss {loss.value!r} on {c.corpus_id} at round {rnd + 1}"
                )
            zero_grads(everything)
            backward(loss)
            sgd_step(trainable[c.corpus_id], lr, momentum=schedule.momentum, l2=schedule.l2)
            round_losses.append(float(loss.value))
            counts[c.corpus_id] += 1

        record = {
            "round": rnd + 1,
            "step": (rnd + 1) * len(corpora),
            "stage": stage,
            "lr": lr,
            "train_loss": float(np.mean(round_losses)),
            "devel_uar": None,
        }
        if (rnd + 1) % schedule.eval_every_rounds == 0 or rnd + 1 == total_rounds:
            per_domain = {
                c.corpus_id: partition_uar(model, c.corpus_id, c.devel, c.n_classes)
                for c in corpora
                if c.devel
            }
            if per_domain:
                record["devel_uar"] = float(np.mean(list(per_domain.values())))
                record["devel_uar_by_domain"] = per_domain
                final_uars = per_domain
        history.append(record)
        timings.append({"round": rnd + 1, "wall_ms": 1000.0 * (time.perf_counter() - started)})

    result = MultiTrainResult(history, final_uars, counts)
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        _write_jsonl(out_dir / "history.jsonl", history)
        _write_jsonl(out_dir / "timings.jsonl", timings)
        result.checkpoint_dir = out_dir / "final"
        save_checkpoint(model, result.checkpoint_dir)
    return result


def transfer(
    checkpoint,
    corpus: LoadedCorpus,
    regime: str,
    seed: int = 0,
    schedule: ScheduleConfig | None = None,
    out_dir=None,
) -> tuple[EmoNet, TrainResult]:
    """Adapt a pretrained checkpoint to a target corpus under one regime.

    Loads the checkpoint, registers fresh target-domain modules (zero
    adapters, fresh head), then trains with the regime's ladder and freeze
    set. Returns the adapted model alongside the training result.
    """
    if regime not in _TRANSFER_REGIMES:
        raise UnknownRegime(
            f"transfer regime must be one of {', '.join(_TRANSFER_REGIMES)}, got {regime!r}"
        )
    model = load_checkpoint(checkpoint)
    domain_id = corpus.corpus_id
    if domain_id in model.domains:
        model.reset_domain(domain_id, corpus.n_classes, seed=seed)
    else:
        model.add_domain(domain_id, corpus.n_classes, seed=seed)
    result = train_single(
        model, domain_id, corpus, regime=regime, seed=seed, schedule=schedule, out_dir=out_dir
    )
    return model, result
