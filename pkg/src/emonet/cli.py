"""Command-line entry point wiring every module together.

Subcommands: synth, inspect, features, train, train-multi, transfer,
map-av, eval, compare, grad-check. Exit codes: 0 success, 1 usage or
config error, 2 data error, 3 numeric failure.
"""

import os
import sys


def _cap_threads() -> None:
    # EMONET_THREADS must take effect before numpy loads its BLAS
    threads = os.environ.get("EMONET_THREADS")
    if threads:
        for var in (
            "OMP_NUM_THREADS",
            "OPENBLAS_NUM_THREADS",
            "MKL_NUM_THREADS",
            "VECLIB_MAXIMUM_THREADS",
            "NUMEXPR_NUM_THREADS",
        ):
            os.environ.setdefault(var, threads)


_cap_threads()

import argparse
import dataclasses
from pathlib import Path

from . import dsp, report, synth, trainer, verify
from .config import load_run_config, write_effective_config
from .corpus import (
    CorpusManifest,
    balance_subsample,
    format_inspect_table,
    inspect,
    load_manifest,
    map_labels,
    aggregate_corpora,
    save_manifest,
)
from .errors import ConfigError, DataError, EmonetError, EmptyPartition, NumericError
from .evaluation import compare as compare_runs
from .evaluation import evaluate, format_compare, format_report, write_predictions
from .model import EmoNet, load_checkpoint


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        # usage errors exit 1 (argparse's default is 2, reserved for data)
        self.print_usage(sys.stderr)
        self.exit(1, f"error: {message}\n")


def _manifest_with_absolute_paths(path) -> CorpusManifest:
    manifest = load_manifest(path)
    root = Path(path).resolve().parent
    records = [
        dataclasses.replace(r, audio_path=str(root / r.audio_path)) for r in manifest.records
    ]
    return CorpusManifest(manifest.corpus_id, records, manifest.warnings)


def _require_out(config):
    if config.out_dir is None:
        raise ConfigError("an output directory is required (config key 'out_dir' or --out)")
    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _single_manifest(config):
    if len(config.manifests) != 1:
        raise ConfigError(
            f"this command takes exactly one corpus manifest, got {len(config.manifests)}"
        )
    return config.manifests[0]


def _print_train_summary(result) -> None:
    print(
        f"best devel UAR {result.best_uar:.4f} at epoch {result.best_epoch}; "
        f"final devel UAR {result.final_uar:.4f} after {len(result.history)} epochs"
    )
    print(f"checkpoints: {result.best_dir} {result.final_dir}")


def cmd_synth(args) -> int:
    if args.spec is not None:
        spec = synth.spec_from_json(args.spec)
        if args.seed is not None:
            spec = dataclasses.replace(spec, seed=args.seed)
    else:
        spec = synth.default_spec(seed=args.seed if args.seed is not None else 0)
    manifests = synth.generate(spec, args.out)
    for corpus_id, path in manifests.items():
        print(f"{corpus_id}: {path}")
    return 0


def cmd_inspect(args) -> int:
    manifests = []
    durations = {}
    for manifest_path in args.manifest:
        manifest = load_manifest(manifest_path)
        manifests.append(manifest)
        root = Path(manifest_path).parent
        for record in manifest.records:
            wav = root / record.audio_path
            if wav.exists():
                durations[f"{record.corpus_id}/{record.sample_id}"] = dsp.probe_wav(wav)
    summary = inspect(manifests, durations)
    print(format_inspect_table(summary))
    print(f"total: {summary.total_samples()} samples, {summary.total_hours():.3f} h")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "inspect.csv", "w", encoding="utf-8") as fh:
            fh.write("corpus,samples,classes,mean_dur_s,std_dur_s,total_h,missing\n")
            for s in summary.summaries:
                fh.write(
                    f"{s.corpus_id},{s.n_samples},{s.n_classes},{s.mean_duration_s:.3f},"
                    f"{s.std_duration_s:.3f},{s.total_hours:.4f},{s.n_missing_duration}\n"
                )
        report.save_duration_histogram(summary, out / "durations.png")
        print(f"wrote {out / 'inspect.csv'} and {out / 'durations.png'}")
    return 0


def cmd_features(args) -> int:
    manifest = load_manifest(args.manifest)
    root = Path(args.manifest).parent
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for record in manifest.records:
        features = dsp.log_mel(dsp.load_audio(root / record.audio_path))
        dsp.write_mels(out / f"{record.sample_id}.mels", features)
    print(f"wrote {len(manifest.records)} feature files to {out}")
    return 0


def cmd_train(args) -> int:
    config = load_run_config(args.config, {"seed": args.seed, "out_dir": args.out})
    out = _require_out(config)
    write_effective_config(config, out)
    corpus = trainer.load_corpus(_single_manifest(config))
    model = EmoNet(config.model, seed=config.seed)
    model.add_domain(corpus.corpus_id, corpus.n_classes)
    result = trainer.train_single(
        model,
        corpus.corpus_id,
        corpus,
        regime=config.regime,
        seed=config.seed,
        schedule=config.schedule,
        out_dir=out,
    )
    report.save_training_curves(result.history, out / "training_curves.png")
    _print_train_summary(result)
    return 0


def cmd_train_multi(args) -> int:
    config = load_run_config(args.config, {"seed": args.seed, "out_dir": args.out})
    out = _require_out(config)
    write_effective_config(config, out)
    if not config.manifests:
        raise ConfigError("train-multi needs corpus manifests in the config")
    manifests = [_manifest_with_absolute_paths(p) for p in config.manifests]
    target = {"av": "arousal+valence"}.get(args.target, args.target)

    if target == "categorical":
        prepared = manifests
    elif target in ("arousal", "valence"):
        prepared = [map_labels(balance_subsample(m, target, config.seed), target) for m in manifests]
    else:
        prepared = [
            aggregate_corpora(manifests, "arousal", config.seed),
            aggregate_corpora(manifests, "valence", config.seed),
        ]
    corpora = [trainer.load_corpus(m, audio_root=".") for m in prepared]

    model = EmoNet(config.model, seed=config.seed)
    result = trainer.train_round_robin(
        model, corpora, targets=target, seed=config.seed, schedule=config.schedule, out_dir=out
    )
    report.save_training_curves(result.history, out / "training_curves.png")
    for domain, value in sorted(result.devel_uar_by_domain.items()):
        print(f"{domain}: devel UAR {value:.4f}")
    print(f"checkpoint: {result.checkpoint_dir}")
    return 0


def cmd_transfer(args) -> int:
    regime = {"adapters": "adapters", "head": "head_only", "full": "full_finetune"}[args.regime]
    config = load_run_config(args.config, {"seed": args.seed, "out_dir": args.out})
    config = dataclasses.replace(config, regime=regime)
    out = _require_out(config)
    write_effective_config(config, out)
    corpus = trainer.load_corpus(_single_manifest(config))
    _, result = trainer.transfer(
        args.source, corpus, regime=regime, seed=config.seed, schedule=config.schedule, out_dir=out
    )
    report.save_training_curves(result.history, out / "training_curves.png")
    _print_train_summary(result)
    return 0


def cmd_map_av(args) -> int:
    manifest = _manifest_with_absolute_paths(args.manifest)
    mapped = map_labels(balance_subsample(manifest, args.target, args.seed), args.target)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    records = [
        dataclasses.replace(r, audio_path=os.path.relpath(r.audio_path, out.resolve().parent))
        for r in mapped.records
    ]
    save_manifest(CorpusManifest(mapped.corpus_id, records), out)
    print(f"wrote {len(records)} samples with {args.target} labels to {out}")
    return 0


def cmd_eval(args) -> int:
    model = load_checkpoint(args.ckpt)
    corpus = trainer.load_corpus(args.manifest, audio_root=None)
    samples = corpus.partition(args.partition)
    if not samples:
        raise EmptyPartition(f"{corpus.corpus_id}: partition {args.partition!r} is empty")
    if corpus.corpus_id not in model.domains:
        raise DataError(
            f"checkpoint has no head for corpus {corpus.corpus_id!r} "
            f"(domains: {sorted(model.domains)})"
        )
    if model.domains[corpus.corpus_id] != corpus.n_classes:
        raise DataError(
            f"checkpoint head for {corpus.corpus_id!r} has {model.domains[corpus.corpus_id]} "
            f"classes, manifest has {corpus.n_classes}"
        )
    logits = model.predict([s.eval_features for s in samples], corpus.corpus_id)
    predicted = logits.argmax(axis=1)
    reference = [s.label_index for s in samples]
    result = evaluate(reference, predicted, corpus.classes, corpus.corpus_id, args.partition)
    print(format_report(result))
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.json").write_text(result.to_json(), encoding="utf-8")
        write_predictions(
            out / "predictions.csv",
            [s.sample_id for s in samples],
            [corpus.classes[i] for i in reference],
            [corpus.classes[i] for i in predicted],
        )
        report.save_confusion_heatmap(result, out / "confusion.png")
        print(f"wrote report.json, predictions.csv, confusion.png to {out}")
    return 0


def cmd_compare(args) -> int:
    table = compare_runs(args.baseline, args.candidate)
    print(format_compare(table))
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "compare.json").write_text(table.to_json(), encoding="utf-8")
        with open(out / "compare.tsv", "w", encoding="utf-8") as fh:
            fh.write("name\tuar\tb\tc\tstatistic\tp_value\tmark\n")
            fh.write(f"{table.baseline_name}\t{table.baseline_uar:.6f}\t\t\t\t\t\n")
            for row in table.rows:
                m = row.mcnemar
                fh.write(
                    f"{row.name}\t{row.uar:.6f}\t{m.b}\t{m.c}\t{m.statistic:.4f}\t"
                    f"{m.p_value:.6f}\t{row.mark}\n"
                )
        report.save_comparison_chart(table, out / "comparison.png")
        print(f"wrote compare.json, compare.tsv, comparison.png to {out}")
    return 0


def cmd_grad_check(args) -> int:
    outcomes = verify.run_suite(full=args.full, seed=args.seed)
    print(verify.format_outcomes(outcomes))
    if all(o.passed for o in outcomes):
        return 0
    print("gradient check FAILED", file=sys.stderr)
    return 3


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="emonet", description=__doc__)
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("synth", help="generate the synthetic fixture corpora")
    p.add_argument("--spec", help="synth spec JSON (default: built-in 4-corpus spec)")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, help="override the generator seed")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("inspect", help="summarize corpora")
    p.add_argument("--manifest", action="append", required=True, help="manifest CSV (repeatable)")
    p.add_argument("--out", help="write inspect.csv and durations.png here")
    p.set_defaults(func=cmd_inspect)

    p = sub.add_parser("features", help="precompute log-mel feature files")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_features)

    p = sub.add_parser("train", help="single-corpus training")
    p.add_argument("--config", required=True, help="run config JSON")
    p.add_argument("--seed", type=int, help="override config seed")
    p.add_argument("--out", help="override config out_dir")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("train-multi", help="round-robin multi-corpus training")
    p.add_argument("--config", required=True)
    p.add_argument(
        "--target",
        choices=("categorical", "arousal", "valence", "av"),
        default="categorical",
    )
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="override config out_dir")
    p.set_defaults(func=cmd_train_multi)

    p = sub.add_parser("transfer", help="adapt a pretrained checkpoint to a corpus")
    p.add_argument("--from", dest="source", required=True, help="pretrained checkpoint directory")
    p.add_argument("--regime", choices=("adapters", "head", "full"), required=True)
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="override config out_dir")
    p.set_defaults(func=cmd_transfer)

    p = sub.add_parser("map-av", help="balance a corpus and map labels to arousal or valence")
    p.add_argument("--manifest", required=True)
    p.add_argument("--target", choices=("arousal", "valence"), required=True)
    p.add_argument("--out", required=True, help="output manifest CSV path")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_map_av)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a partition")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--partition", choices=("train", "devel", "test"), default="test")
    p.add_argument("--out", help="write report.json, predictions.csv, confusion.png here")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("compare", help="McNemar comparison of prediction files")
    p.add_argument("--baseline", required=True)
    p.add_argument("--candidate", action="append", required=True, help="repeatable")
    p.add_argument("--out", help="write compare.json, compare.tsv, comparison.png here")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("grad-check", help="finite-difference gradient verification")
    p.add_argument("--full", action="store_true", help="also check the complete model")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_grad_check)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if not hasattr(args, "func"):
        parser.print_help()
        return 1
    try:
        return args.func(args)
    except ConfigError as err:
        print(f"error: {err}", file=sys.stderr)
        return 1
    except NumericError as err:
        print(f"error: {err}", file=sys.stderr)
        return 3
    except (EmonetError, OSError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
