"""Acceptance gate: eleven numbered end-to-end checks with pinned budgets.

Each test guards one release property of the package, from parameter
budgets through full training runs on the synthetic fixture, and asserts
a wall-clock ceiling alongside the functional tolerance. The fixture
corpora, model sizes and schedules used here are deliberately small so
the whole gate runs on one desktop CPU core.
"""

import json
import math
import subprocess
import sys
import time
from contextlib import contextmanager
from pathlib import Path

import numpy as np
import pytest

from emonet import dsp, synth, trainer, verify
from emonet.evaluation import (
    chance_level,
    compare,
    mcnemar,
    uar,
    write_predictions,
)
from emonet.model import EmoNet, ModelConfig, save_checkpoint
from emonet.nn import ops
from emonet.nn.tensor import Tensor
from emonet.trainer import EarlyStopState, ScheduleConfig, effective_lr

# Sized for corpora of ~70 training clips: few filters, light dropout,
# and a faster-tracking BN momentum. With only a handful of optimizer
# steps per epoch the default 0.99 momentum would leave the running
# statistics several epochs behind the weights, wrecking eval-mode
# forward passes while train-mode loss happily goes to zero.
DESK = ModelConfig(
    stem_filters=8,
    stack_filters=(16, 32, 64),
    attention_dim=64,
    head_units=32,
    dropout_rate=0.1,
    bn_momentum=0.6,
)

TINY_MODEL_SECTION = {
    "stem_filters": 4,
    "stack_filters": [8, 16, 32],
    "attention_dim": 32,
    "head_units": 8,
    "dropout_rate": 0.1,
    "bn_momentum": 0.6,
}


@contextmanager
def budget(seconds: float):
    start = time.perf_counter()
    yield
    elapsed = time.perf_counter() - start
    assert elapsed < seconds, f"exceeded {seconds:.0f}s budget: took {elapsed:.1f}s"


@pytest.fixture(scope="module")
def fixture_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("acceptance_fixture")
    return synth.generate(synth.default_spec(seed=0), out)


@pytest.fixture(scope="module")
def corpora(fixture_dir):
    return {cid: trainer.load_corpus(path) for cid, path in fixture_dir.items()}


def _walk_manifest(meta: dict) -> dict:
    """Independent parameter count from a checkpoint manifest."""
    totals = {"shared": 0, "domain": 0}
    for entry in meta["entries"]:
        if not entry["trainable"]:
            continue
        size = int(np.prod(entry["shape"])) if entry["shape"] else 1
        if entry["name"].startswith("shared."):
            totals["shared"] += size
        elif entry["name"].startswith("domain."):
            totals["domain"] += size
        else:
            raise AssertionError(f"unclassified parameter {entry['name']}")
    totals["total"] = totals["shared"] + totals["domain"]
    return totals


def test_c01_parameter_budget(tmp_path):
    with budget(1.0):
        model = EmoNet(ModelConfig(), seed=0)
        model.add_domain("emodb", 7)
        save_checkpoint(model, tmp_path / "ckpt")
        meta = json.loads((tmp_path / "ckpt" / "meta.json").read_text())
        counts = _walk_manifest(meta)
        assert 2_600_000 <= counts["total"] <= 3_400_000
        assert 270_000 <= counts["domain"] <= 330_000
        reported = model.parameter_counts()
        assert reported["total"] == counts["total"]
        assert reported["domains"]["emodb"] == counts["domain"]


def test_c02_multi_domain_efficiency():
    with budget(5.0):
        single = EmoNet(ModelConfig(), seed=0)
        single.add_domain("d00", 7)
        multi = EmoNet(ModelConfig(), seed=0)
        for i in range(26):
            multi.add_domain(f"d{i:02d}", 7)
        ratio = multi.parameter_counts()["total"] / single.parameter_counts()["total"]
        assert 3.0 <= ratio <= 4.0


def test_c03_backbone_shape_contract():
    with budget(10.0):
        model = EmoNet(ModelConfig(), seed=0)
        model.add_domain("d", 7)
        rng = np.random.default_rng(3)
        for t in (1, 7, 8, 311, 400):
            x = rng.normal(size=(2, 64, t, 1)).astype(np.float32)
            features, valid = model.backbone(x, [t, max(1, t - 1)], "d", training=False)
            assert features.value.shape == (2, 8, math.ceil(t / 8), 256), t
            assert valid[0] == math.ceil(t / 8)


def test_c04_gradient_verification():
    with budget(300.0):
        outcomes = verify.run_suite(full=True, seed=0)
        names = {o.name for o in outcomes}
        assert names == {
            "conv2d_s1",
            "conv2d_s2",
            "batch_norm_train",
            "batch_norm_eval",
            "relu",
            "tanh",
            "dense",
            "avg_pool2x2_masked",
            "concat_zero_channels",
            "mask_time",
            "masked_softmax",
            "attention_pool_masked",
            "softmax_xent_weighted",
            "dropout_fixed_mask",
            "full_model",
        }
        for outcome in outcomes:
            assert outcome.passed, f"{outcome.name}: {outcome.max_rel_error:.3e}"
            assert outcome.max_rel_error < 1e-5


def test_c05_attention_uniform_at_lambda_zero():
    with budget(1.0):
        rng = np.random.default_rng(5)
        batch, nf, nt, ch = 3, 4, 6, 5
        x = Tensor(rng.normal(size=(batch, nf, nt, ch)))
        w = Tensor(rng.normal(size=(ch, ch)))
        b = Tensor(rng.normal(size=(ch,)))
        u = Tensor(rng.normal(size=(ch,)))
        mask = np.zeros((batch, nf * nt), dtype=bool)
        valid = [nf * nt, 15, 7]
        for row, n in enumerate(valid):
            mask[row, :n] = True
        _, weights = ops.attention_pool(x, w, b, u, lam=0.0, mask=mask)
        for row, n in enumerate(valid):
            np.testing.assert_allclose(weights.value[row, :n], 1.0 / n, rtol=1e-12)
            assert (weights.value[row, n:] == 0.0).all()
            assert abs(weights.value[row].sum() - 1.0) <= 1e-6


def test_c06_adapter_equivalence_and_freeze_isolation(corpora):
    with budget(120.0):
        # a fresh adapter is exactly a no-op on the logits
        model = EmoNet(ModelConfig(), seed=0)
        model.add_domain("d", 7)
        rng = np.random.default_rng(6)
        x = rng.normal(size=(2, 64, 60, 1)).astype(np.float32)
        with_adapters = model.forward(x, [60, 41], "d", training=False, use_adapters=True)
        without = model.forward(x, [60, 41], "d", training=False, use_adapters=False)
        assert with_adapters.value.tobytes() == without.value.tobytes()

        # adapter training touches nothing shared and nothing foreign
        target, foreign = corpora["syn_a"], corpora["syn_b"]
        model = EmoNet(DESK, seed=0)
        model.add_domain(foreign.corpus_id, foreign.n_classes)
        model.add_domain(target.corpus_id, target.n_classes)
        frozen = {
            name: param.value.tobytes()
            for name, param in model.params.items()
            if not name.startswith(f"domain.{target.corpus_id}.")
        }
        frozen.update(
            (name, buf.tobytes())
            for name, buf in model.buffers.items()
            if name.startswith(f"domain.{foreign.corpus_id}.")
        )
        before_target = {
            name: param.value.tobytes()
            for name, param in model.params.items()
            if ".adapter" in name and name.startswith(f"domain.{target.corpus_id}.")
        }
        schedule = ScheduleConfig(stage_lrs=[0.1], batch_size=16, max_epochs=2)
        trainer.train_single(
            model, target.corpus_id, target, regime="adapters", seed=6, schedule=schedule
        )
        for name, blob in frozen.items():
            current = model.params[name].value if name in model.params else model.buffers[name]
            assert current.tobytes() == blob, f"{name} changed during adapter training"
        assert any(
            model.params[name].value.tobytes() != blob for name, blob in before_target.items()
        )


def _reference_automaton(uars, patience: int, n_stages: int) -> list[str]:
    best = float("-inf")
    stale = 0
    stage = 0
    outcomes = []
    for value in uars:
        if value > best:
            best = value
            stale = 0
            outcomes.append("improved")
            continue
        stale += 1
        if stale < patience:
            outcomes.append("stale")
            continue
        stale = 0
        stage += 1
        outcomes.append("stop" if stage >= n_stages else "advance")
        if outcomes[-1] == "stop":
            break
    return outcomes


def _tone_corpus(corpus_id: str, n_classes: int, per_class: int, seed: int):
    rng = np.random.default_rng(seed)
    train, devel = [], []
    for label in range(n_classes):
        for i in range(per_class + 2):
            f0 = 300.0 * (2.0 ** label) * (1.0 + rng.uniform(-0.02, 0.02))
            t = np.arange(4000) / dsp.SAMPLE_RATE
            audio = (0.4 * np.sin(2 * np.pi * f0 * t) + 0.01 * rng.normal(size=4000)).astype(
                np.float32
            )
            feats = dsp.log_mel(dsp.center_crop(audio))
            sample = trainer.LoadedSample(f"{corpus_id}_{label}_{i}", label, audio, feats, feats)
            (train if i < per_class else devel).append(sample)
    classes = tuple(f"c{k}" for k in range(n_classes))
    weights = np.ones(n_classes, dtype=np.float32)
    return trainer.LoadedCorpus(corpus_id, classes, train, devel, [], weights)


def test_c07_schedule_traces_match_oracle():
    with budget(10.0):
        # the documented example: improvements only at epochs 1 and 2
        state = EarlyStopState(patience=50, n_stages=3)
        trace = {}
        for epoch in range(1, 153):
            uar_value = {1: 0.5, 2: 0.6}.get(epoch, 0.4)
            outcome = state.update(epoch, uar_value)
            if outcome != "stale":
                trace[epoch] = outcome
        assert trace == {1: "improved", 2: "improved", 52: "advance", 102: "advance", 152: "stop"}
        assert state.best_epoch == 2 and state.best_uar == 0.6

        # randomized trace equals an independently written automaton
        rng = np.random.default_rng(7)
        uars = rng.uniform(0.2, 0.9, size=400).round(2).tolist()
        state = EarlyStopState(patience=5, n_stages=3)
        lived = []
        for epoch, value in enumerate(uars, start=1):
            lived.append(state.update(epoch, value))
            if lived[-1] == "stop":
                break
        assert lived == _reference_automaton(uars, patience=5, n_stages=3)

        # full three-stage round-robin learning-rate trace, 2500 rounds each
        schedule = ScheduleConfig()
        ladder = schedule.resolve_lrs("multi")
        assert ladder == (0.1, 0.01, 0.001)
        assert schedule.rounds_per_stage == 2500
        total = len(ladder) * schedule.rounds_per_stage
        produced = [
            effective_lr(ladder[r // schedule.rounds_per_stage], r, schedule.per_step_decay)
            for r in range(total)
        ]
        expected = [
            (0.1, 0.01, 0.001)[r // 2500] / (1.0 + 1e-6 * r) for r in range(total)
        ]
        assert len(produced) == 7500
        assert produced == expected
        assert effective_lr(0.1, 1_000_000) == pytest.approx(0.05, rel=1e-12)

        # a real micro run reproduces the trace, one batch per domain per round
        tiny = ModelConfig(
            stem_filters=4, stack_filters=(8, 16, 32), attention_dim=32,
            head_units=8, dropout_rate=0.0,
        )
        model = EmoNet(tiny, seed=0)
        domains = [_tone_corpus(f"rr{i}", 2, 4, seed=20 + i) for i in range(3)]
        micro = ScheduleConfig(rounds_per_stage=2, batch_size=4)
        result = trainer.train_round_robin(model, domains, seed=0, schedule=micro)
        micro_expected = [(0.1, 0.01, 0.001)[r // 2] / (1.0 + 1e-6 * r) for r in range(6)]
        assert [row["lr"] for row in result.history] == micro_expected
        assert [row["stage"] for row in result.history] == [0, 0, 1, 1, 2, 2]
        assert result.batches_per_domain == {f"rr{i}": 6 for i in range(3)}


def test_c08_end_to_end_learning_sanity(corpora, tmp_path):
    with budget(1800.0):
        held = corpora["syn_held"]
        schedule = ScheduleConfig(batch_size=16, max_epochs=30)

        scratch = EmoNet(DESK, seed=0)
        scratch.add_domain(held.corpus_id, held.n_classes)
        scratch_result = trainer.train_single(
            scratch, held.corpus_id, held, regime="scratch", seed=0, schedule=schedule
        )
        assert len(scratch_result.history) <= 30
        assert scratch_result.best_uar >= 0.9

        pretrain = EmoNet(DESK, seed=0)
        pretrain_schedule = ScheduleConfig(stage_lrs=[0.1, 0.01], rounds_per_stage=30, batch_size=16)
        pre = trainer.train_round_robin(
            pretrain,
            [corpora[c] for c in ("syn_a", "syn_b", "syn_c")],
            targets="categorical",
            seed=0,
            schedule=pretrain_schedule,
            out_dir=tmp_path / "pretrain",
        )
        transferred, transfer_result = trainer.transfer(
            pre.checkpoint_dir, held, regime="adapters", seed=0, schedule=schedule
        )
        assert transfer_result.best_uar >= scratch_result.best_uar - 0.05

        # paired comparison of the two systems on the held-out test split
        refs = [held.classes[s.label_index] for s in held.test]
        ids = [s.sample_id for s in held.test]
        base_pred = trainer.predict_labels(scratch, held.corpus_id, held.test, held.classes)
        cand_pred = trainer.predict_labels(transferred, held.corpus_id, held.test, held.classes)
        base_path, cand_path = tmp_path / "scratch.csv", tmp_path / "transfer.csv"
        write_predictions(base_path, ids, refs, base_pred)
        write_predictions(cand_path, ids, refs, cand_pred)
        table = compare(base_path, [cand_path], names=["transfer"])
        assert table.rows[0].mark in ("+", "-", "")


def test_c09_metric_oracles():
    with budget(1.0):
        assert uar(np.array([[5, 0], [2, 3]])) == pytest.approx(0.8, abs=1e-12)

        # 15 discordant errors one way, 5 the other, padding concordant
        reference = [0] * 20 + [1] * 10
        baseline = [0] * 15 + [1] * 5 + [1] * 10
        candidate = [1] * 15 + [0] * 5 + [1] * 10
        result = mcnemar(baseline, candidate, reference)
        assert result.b == 15 and result.c == 5
        assert result.statistic == pytest.approx(4.05, abs=1e-12)
        assert result.significant_at_05

        assert chance_level(7) == pytest.approx(1.0 / 7.0, abs=1e-12)
        assert round(chance_level(7), 3) == 0.143


def test_c10_dsp_oracles():
    with budget(30.0):
        for n in range(512, 4097):
            assert dsp.frame_count(n) == 1 + (n - 512) // 256, n
        rng = np.random.default_rng(10)
        for n in range(512, 4097, 97):
            x = rng.normal(size=n).astype(np.float32)
            assert dsp.stft_power(x).shape[0] == dsp.frame_count(n), n

        t = np.arange(dsp.SAMPLE_RATE) / dsp.SAMPLE_RATE
        tone = (0.5 * np.sin(2 * np.pi * 1000.0 * t)).astype(np.float32)
        power = dsp.stft_power(tone)
        assert int(np.argmax(power.mean(axis=0))) == 32

        # band whose centre is nearest 1 kHz, from the published mel formula
        edges = np.linspace(0.0, 2595.0 * np.log10(1.0 + 8000.0 / 700.0), 66)
        centers_hz = 700.0 * (10.0 ** (edges[1:-1] / 2595.0) - 1.0)
        nearest = int(np.argmin(np.abs(centers_hz - 1000.0)))
        mels = dsp.log_mel(tone)
        assert int(np.argmax(mels.mean(axis=0))) == nearest

        frame = rng.normal(size=512)
        spec = dsp.stft_power(frame)[0]
        folded = spec[0] + spec[256] + 2.0 * spec[1:256].sum()
        energy = np.sum((frame * dsp.hann_window()) ** 2)
        assert folded / 512.0 == pytest.approx(energy, rel=1e-6)


def test_c11_training_determinism(fixture_dir, tmp_path):
    with budget(600.0):
        config = {
            "seed": 7,
            "regime": "scratch",
            "manifests": [str(fixture_dir["syn_a"])],
            "model": TINY_MODEL_SECTION,
            "schedule": {"stage_lrs": [0.1], "batch_size": 16, "max_epochs": 2},
        }
        fixture = tmp_path / "fixture.json"
        fixture.write_text(json.dumps(config))

        outs = []
        for run in ("one", "two"):
            out = tmp_path / run
            proc = subprocess.run(
                [sys.executable, "-m", "emonet.cli", "train",
                 "--config", str(fixture), "--seed", "7", "--out", str(out)],
                capture_output=True, text=True,
            )
            assert proc.returncode == 0, proc.stderr
            outs.append(out)

        for rel in (
            "history.jsonl",
            "best/params.bin",
            "best/meta.json",
            "final/params.bin",
            "final/meta.json",
        ):
            first, second = (out / rel for out in outs)
            assert first.read_bytes() == second.read_bytes(), rel
