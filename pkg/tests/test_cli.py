import json

import numpy as np
import pytest

from emonet import cli, config, dsp, synth
from emonet.corpus import load_manifest
from emonet.errors import ConfigError


def run_cli(*argv):
    try:
        return cli.main(list(argv))
    except SystemExit as exc:
        return exc.code


MODEL_SECTION = {
    "stem_filters": 4,
    "stack_filters": [8, 16, 32],
    "attention_dim": 32,
    "head_units": 8,
    "dropout_rate": 0.0,
}


@pytest.fixture(scope="module")
def corpus_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("clifix")
    spec = synth.SynthSpec(
        corpora=(
            synth.CorpusSpec("cli_a", samples_per_class=5, speakers=3, duration_range=(0.5, 0.8)),
            synth.CorpusSpec("cli_b", samples_per_class=5, speakers=3, duration_range=(0.5, 0.8), pitch_offset_hz=15.0),
        ),
        seed=2,
    )
    manifests = synth.generate(spec, out)
    return out, manifests


def write_config(path, manifests, out_dir, schedule=None, **extra):
    doc = {
        "seed": 1,
        "manifests": [str(m) for m in manifests],
        "out_dir": str(out_dir),
        "model": MODEL_SECTION,
        "schedule": schedule or {"stage_lrs": [0.1], "batch_size": 8, "max_epochs": 2},
    }
    doc.update(extra)
    path.write_text(json.dumps(doc))
    return path


class TestRunConfig:
    def test_defaults_match_published_values(self):
        cfg = config.load_run_config(None)
        assert cfg.model.mel_bands == 64
        assert cfg.model.attention_lambda == 0.3
        assert cfg.schedule.batch_size == 64
        assert cfg.schedule.momentum == 0.9
        assert cfg.schedule.patience == 50
        assert cfg.schedule.rounds_per_stage == 2500
        assert cfg.schedule.resolve_lrs("scratch") == (0.1, 0.01, 0.001)

    def test_unknown_top_key_named(self, tmp_path):
        path = tmp_path / "run.json"
        path.write_text(json.dumps({"sedd": 3}))
        with pytest.raises(ConfigError, match="sedd"):
            config.load_run_config(path)

    def test_unknown_model_key_named(self, tmp_path):
        path = tmp_path / "run.json"
        path.write_text(json.dumps({"model": {"depth": 3}}))
        with pytest.raises(ConfigError, match="depth"):
            config.load_run_config(path)

    def test_frontend_values_fixed(self, tmp_path):
        path = tmp_path / "run.json"
        path.write_text(json.dumps({"frontend": {"sample_rate": 8000}}))
        with pytest.raises(ConfigError, match="sample_rate"):
            config.load_run_config(path)
        path.write_text(json.dumps({"frontend": {"sample_rate": 16000}}))
        config.load_run_config(path)

    def test_overrides_win(self, tmp_path):
        path = tmp_path / "run.json"
        path.write_text(json.dumps({"seed": 1, "out_dir": "a"}))
        cfg = config.load_run_config(path, {"seed": 7, "out_dir": None})
        assert cfg.seed == 7
        assert cfg.out_dir == "a"

    def test_effective_config_records_threads(self, monkeypatch):
        monkeypatch.setenv("EMONET_THREADS", "2")
        doc = config.effective_config(config.load_run_config(None))
        assert doc["threads"] == "2"
        assert doc["frontend"]["n_mels"] == 64

    def test_invalid_json_is_config_error(self, tmp_path):
        path = tmp_path / "run.json"
        path.write_text("{nope")
        with pytest.raises(ConfigError):
            config.load_run_config(path)


class TestUsageErrors:
    def test_missing_required_flag_exits_1(self):
        assert run_cli("train") == 1

    def test_unknown_subcommand_exits_1(self):
        assert run_cli("fit") == 1

    def test_no_subcommand_exits_1(self):
        assert run_cli() == 1

    def test_unknown_config_key_exit_1_names_key(self, tmp_path, capsys):
        path = tmp_path / "run.json"
        path.write_text(json.dumps({"learning_rate": 0.1}))
        assert run_cli("train", "--config", str(path)) == 1
        assert "learning_rate" in capsys.readouterr().err

    def test_missing_manifest_exits_2(self, tmp_path):
        assert run_cli("inspect", "--manifest", str(tmp_path / "nope.csv")) == 2


class TestDataCommands:
    def test_synth_default_spec(self, tmp_path):
        assert run_cli("synth", "--out", str(tmp_path), "--seed", "3") == 0
        assert sorted(p.name for p in tmp_path.iterdir()) == [
            "syn_a", "syn_b", "syn_c", "syn_held",
        ]
        load_manifest(tmp_path / "syn_a" / "manifest.csv")

    def test_inspect_outputs(self, corpus_dir, tmp_path, capsys):
        _, manifests = corpus_dir
        code = run_cli(
            "inspect",
            "--manifest", str(manifests["cli_a"]),
            "--manifest", str(manifests["cli_b"]),
            "--out", str(tmp_path),
        )
        assert code == 0
        seen = capsys.readouterr().out
        assert "cli_a" in seen and "cli_b" in seen
        assert (tmp_path / "inspect.csv").exists()
        assert (tmp_path / "durations.png").exists()
        header, *rows = (tmp_path / "inspect.csv").read_text().splitlines()
        assert header.startswith("corpus,samples")
        assert len(rows) == 2

    def test_features_round_trip(self, corpus_dir, tmp_path):
        out_dir, manifests = corpus_dir
        assert run_cli("features", "--manifest", str(manifests["cli_a"]), "--out", str(tmp_path)) == 0
        manifest = load_manifest(manifests["cli_a"])
        files = list(tmp_path.glob("*.mels"))
        assert len(files) == len(manifest.records)
        record = manifest.records[0]
        stored = dsp.read_mels(tmp_path / f"{record.sample_id}.mels")
        direct = dsp.log_mel(dsp.load_audio(out_dir / "cli_a" / record.audio_path))
        np.testing.assert_array_equal(stored, direct)

    def test_map_av_balances_and_relinks(self, corpus_dir, tmp_path):
        _, manifests = corpus_dir
        out = tmp_path / "mapped" / "arousal.csv"
        assert run_cli(
            "map-av", "--manifest", str(manifests["cli_a"]), "--target", "arousal",
            "--out", str(out),
        ) == 0
        mapped = load_manifest(out)
        assert set(mapped.label_space) <= {"low", "high"}
        labels = [r.label for r in mapped.partition_records("train")]
        assert labels.count("low") == labels.count("high")
        wav = out.parent / mapped.records[0].audio_path
        assert wav.exists()


@pytest.fixture(scope="module")
def trained(corpus_dir, tmp_path_factory):
    _, manifests = corpus_dir
    work = tmp_path_factory.mktemp("train")
    run_dir = work / "run"
    cfg = write_config(work / "run.json", [manifests["cli_a"]], run_dir)
    assert run_cli("train", "--config", str(cfg)) == 0
    return manifests, run_dir


class TestTrainingCommands:

    def test_train_outputs(self, trained):
        _, run_dir = trained
        for name in (
            "effective_config.json",
            "history.jsonl",
            "timings.jsonl",
            "training_curves.png",
        ):
            assert (run_dir / name).exists(), name
        assert (run_dir / "best" / "params.bin").exists()
        assert (run_dir / "final" / "meta.json").exists()
        effective = json.loads((run_dir / "effective_config.json").read_text())
        assert effective["model"]["stem_filters"] == 4
        assert effective["frontend"]["sample_rate"] == 16000
        history = [json.loads(line) for line in (run_dir / "history.jsonl").read_text().splitlines()]
        assert len(history) == 2
        assert "wall_ms" not in history[0]

    def test_eval_and_compare(self, trained, tmp_path, capsys):
        manifests, run_dir = trained
        eval_dir = tmp_path / "eval"
        code = run_cli(
            "eval", "--ckpt", str(run_dir / "best"),
            "--manifest", str(manifests["cli_a"]),
            "--partition", "devel", "--out", str(eval_dir),
        )
        assert code == 0
        assert "uar" in capsys.readouterr().out
        report_doc = json.loads((eval_dir / "report.json").read_text())
        assert report_doc["corpus_id"] == "cli_a"
        assert (eval_dir / "predictions.csv").exists()
        assert (eval_dir / "confusion.png").exists()

        compare_dir = tmp_path / "cmp"
        code = run_cli(
            "compare", "--baseline", str(eval_dir / "predictions.csv"),
            "--candidate", str(eval_dir / "predictions.csv"),
            "--out", str(compare_dir),
        )
        assert code == 0
        assert (compare_dir / "compare.tsv").exists()
        assert (compare_dir / "comparison.png").exists()
        table = json.loads((compare_dir / "compare.json").read_text())
        assert table["candidates"][0]["mark"] == ""

    def test_eval_wrong_corpus_exits_2(self, trained, corpus_dir):
        manifests, run_dir = trained
        code = run_cli(
            "eval", "--ckpt", str(run_dir / "best"),
            "--manifest", str(manifests["cli_b"]),
        )
        assert code == 2

    def test_train_multi_and_transfer(self, corpus_dir, tmp_path):
        _, manifests = corpus_dir
        pre_dir = tmp_path / "pre"
        cfg = write_config(
            tmp_path / "multi.json",
            [manifests["cli_a"], manifests["cli_b"]],
            pre_dir,
            schedule={"stage_lrs": [0.1], "batch_size": 8, "rounds_per_stage": 2, "eval_every_rounds": 2},
        )
        assert run_cli("train-multi", "--config", str(cfg)) == 0
        assert (pre_dir / "final" / "params.bin").exists()
        history = [json.loads(line) for line in (pre_dir / "history.jsonl").read_text().splitlines()]
        assert len(history) == 2 and history[-1]["devel_uar"] is not None

        transfer_dir = tmp_path / "tr"
        cfg2 = write_config(tmp_path / "transfer.json", [manifests["cli_b"]], transfer_dir)
        code = run_cli(
            "transfer", "--from", str(pre_dir / "final"), "--regime", "head",
            "--config", str(cfg2),
        )
        assert code == 0
        effective = json.loads((transfer_dir / "effective_config.json").read_text())
        assert effective["regime"] == "head_only"
        assert (transfer_dir / "best" / "params.bin").exists()

    def test_train_multi_av_target(self, corpus_dir, tmp_path):
        _, manifests = corpus_dir
        out = tmp_path / "av"
        cfg = write_config(
            tmp_path / "av.json",
            [manifests["cli_a"], manifests["cli_b"]],
            out,
            schedule={"stage_lrs": [0.1], "batch_size": 4, "rounds_per_stage": 1, "eval_every_rounds": 1},
        )
        assert run_cli("train-multi", "--config", str(cfg), "--target", "av") == 0
        meta = json.loads((out / "final" / "meta.json").read_text())
        assert meta["domains"] == {"arousal": 2, "valence": 3}


class TestGradCheckCommand:
    def test_op_suite_passes(self, capsys):
        assert run_cli("grad-check") == 0
        out = capsys.readouterr().out
        assert "conv2d_s1" in out and "FAIL" not in out
