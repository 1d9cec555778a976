"""Command-line driver.

Commands: pretrain-lm, train, eval, sweep, report. Every run starts by
dumping its effective settings for provenance. Exit codes: 0 success,
2 usage/config error, 3 runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import random
import sys
from pathlib import Path

from .config import ConfigError, ExperimentConfig, load_experiment_config
from .corpus import CorpusError, Dataset, build_vocab, load_labeled, load_unlabeled
from .lm import LMCheckpoint, LMConfig, perplexity, train_bilm
from .metrics import evaluate, write_prediction_file
from .model import SLUModel
from .transfer import (
    PipelineError,
    PipelineSpec,
    eval_pairs,
    low_resource_sweep,
    read_records,
    run_pipeline,
    seed_everything,
    write_records,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUNTIME = 3


def _log(msg: str) -> None:
    print(msg, flush=True)


def _dump_settings(config: ExperimentConfig) -> None:
    print("effective settings:")
    print(json.dumps(config.effective_settings(), indent=2, sort_keys=True))


def _load_dataset(section, what: str) -> Dataset:
    if section is None:
        raise ConfigError(f"config is missing the {what} section")
    return load_labeled(section.path, section.format, name=section.name)


def _split_heldout(corpus, fraction: float, seed: int):
    """Deterministic train/held-out split of an unlabeled corpus."""
    from .corpus import UnlabeledCorpus

    sentences = list(corpus.sentences)
    rng = random.Random(seed)
    rng.shuffle(sentences)
    n_heldout = max(1, int(len(sentences) * fraction))
    if n_heldout >= len(sentences):
        raise ConfigError("held-out fraction leaves no training sentences")
    heldout = tuple(sentences[:n_heldout])
    train = tuple(sentences[n_heldout:])
    return (
        UnlabeledCorpus(train, sum(len(s) for s in train)),
        UnlabeledCorpus(heldout, sum(len(s) for s in heldout)),
    )


def _lm_checkpoint_path(config: ExperimentConfig) -> Path:
    if config.lm.checkpoint:
        return Path(config.lm.checkpoint)
    return Path(config.output_dir) / "lm.npz"


def cmd_pretrain_lm(args, config: ExperimentConfig) -> int:
    if not config.lm.unlabeled:
        raise ConfigError("lm.unlabeled must list at least one text file")
    if args.dry_run:
        for p in config.lm.unlabeled:
            if not Path(p).exists():
                raise ConfigError(f"no such unlabeled file: {p}")
        print("config ok (dry run)")
        return EXIT_OK
    seed_everything(config.seed)
    pool = load_unlabeled(config.lm.unlabeled)
    train, heldout = _split_heldout(pool, config.lm.heldout_fraction, config.seed)
    vocab = build_vocab(train, config.lm.min_count)
    _log(f"corpus: {pool.token_count} tokens, vocabulary {len(vocab)}")
    section = config.lm
    if section.layers == 1:
        lm_config = LMConfig.single_layer(
            vocab,
            batch_size=section.batch_size,
            epochs=section.epochs,
            learning_rate=section.learning_rate,
        )
    else:
        lm_config = LMConfig.two_layer(
            vocab,
            batch_size=section.batch_size,
            epochs=section.epochs,
            learning_rate=section.learning_rate,
        )
    resume = LMCheckpoint.load(section.resume_from) if section.resume_from else None
    if resume is not None:
        lm_config = resume.config
        _log(f"resuming at epoch {resume.metadata.get('epochs_trained', 0)}")
    ckpt = train_bilm(train, lm_config, heldout, seed=config.seed, resume_from=resume, log=_log)
    out_path = _lm_checkpoint_path(config)
    ckpt.save(out_path)
    log_path = out_path.with_suffix(".ppl.json")
    with open(log_path, "w", encoding="utf-8") as fh:
        json.dump(ckpt.metadata["history"], fh, indent=2)
    _log(
        f"saved {out_path} (best epoch {ckpt.metadata['best_epoch']}, "
        f"held-out perplexity {ckpt.metadata['best_heldout_perplexity']:.2f})"
    )
    return EXIT_OK


def _build_spec(config: ExperimentConfig, target: Dataset) -> PipelineSpec:
    base = config.condition.removesuffix("+ST")
    lm_ckpt = None
    if base in ("ELMo", "ELMoL"):
        path = _lm_checkpoint_path(config)
        if not path.exists():
            raise ConfigError(f"{config.condition} requires LM checkpoint at {path}")
        lm_ckpt = LMCheckpoint.load(path)
    source = None
    if config.condition.endswith("+ST"):
        source = _load_dataset(config.source_dataset, "source_dataset")
    return PipelineSpec(
        condition=config.condition,
        target=target,
        schedule=config.schedule_config(),
        source=source,
        lm_checkpoint=lm_ckpt,
        pretrained_vectors=config.pretrained_vectors,
        seed=config.seed,
        batch_size=config.optimizer.batch_size,
        dropout=config.optimizer.dropout,
        l2_lambda=config.optimizer.l2_lambda,
        hidden_size=config.hidden_size,
        min_count=config.min_count,
    )


def cmd_train(args, config: ExperimentConfig) -> int:
    target = _load_dataset(config.dataset, "dataset")
    spec = _build_spec(config, target)
    if args.dry_run:
        print("config ok (dry run)")
        return EXIT_OK
    out_dir = Path(args.out or config.output_dir)
    record = run_pipeline(spec, out_dir=out_dir, log=_log)
    record_path = out_dir / f"run-{record.condition.replace('+', '_')}-{record.dataset}-s{record.seed}.jsonl"
    write_records([record], record_path)
    _log(
        f"test metrics: ica={record.test_metrics['ica']:.4f} "
        f"ef1={record.test_metrics['ef1']:.4f} ser={record.test_metrics['ser']:.4f}"
    )
    _log(f"record written to {record_path}")
    return EXIT_OK


def cmd_eval(args, config: ExperimentConfig | None) -> int:
    elmo_lm = None
    if args.lm:
        elmo_lm = LMCheckpoint.load(args.lm).build_model()
    model = SLUModel.load(args.model, elmo_lm=elmo_lm)
    dataset = load_labeled(args.data, args.format)
    utts = list(dataset.split(args.split))
    if not utts:
        raise ConfigError(f"{dataset.name} has no {args.split} split")
    model_space = model.config.label_space
    data_space = dataset.label_space
    if not set(data_space.intents) <= set(model_space.intents) or not set(
        data_space.entity_types
    ) <= set(model_space.entity_types):
        raise ConfigError("dataset labels are outside the model's label space")
    pairs = eval_pairs(model, utts)
    report = evaluate(pairs)
    print(json.dumps(report.as_dict(), indent=2, sort_keys=True))
    if args.out:
        pred_path = Path(args.out) / f"predictions-{dataset.name}-{args.split}.tsv"
        write_prediction_file(pred_path, [u.tokens for u in utts], pairs)
        _log(f"predictions written to {pred_path}")
    return EXIT_OK


def _plot_curves(curves: dict, out_path: Path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(7, 5))
    for condition, points in sorted(curves.items()):
        pts = sorted(points, key=lambda p: (isinstance(p["size"], str), p["size"]))
        xs = [p["size"] for p in pts]
        ys = [100 * p["mean_ser"] for p in pts]
        err = [100 * p["std_ser"] for p in pts]
        ax.errorbar(range(len(xs)), ys, yerr=err, marker="o", label=condition)
        ax.set_xticks(range(len(xs)))
        ax.set_xticklabels([str(x) for x in xs])
    ax.set_xlabel("training samples")
    ax.set_ylabel("SER (%)")
    ax.legend()
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)


def cmd_sweep(args, config: ExperimentConfig) -> int:
    conditions = config.sweep.conditions
    if len(conditions) < 2:
        raise ConfigError("sweep needs at least 2 conditions")
    target = _load_dataset(config.dataset, "dataset")
    specs = []
    for condition in conditions:
        cfg_i = ExperimentConfig(**{**config.__dict__, "condition": condition})
        specs.append(_build_spec(cfg_i, target))
    if args.dry_run:
        print("config ok (dry run)")
        return EXIT_OK
    out_dir = Path(args.out or config.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    result = low_resource_sweep(
        specs, sizes=config.sweep.sizes, seeds=config.sweep.seeds,
        out_dir=out_dir, log=_log,
    )
    write_records(result.records, out_dir / "sweep-records.jsonl")
    with open(out_dir / "sweep-summary.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=["condition", "size", "seed", "ica", "ef1", "ser"])
        writer.writeheader()
        writer.writerows(result.csv_rows())
    with open(out_dir / "sweep-ttests.json", "w", encoding="utf-8") as fh:
        json.dump(result.ttests, fh, indent=2)
    _plot_curves(result.curves, out_dir / "sweep-ser.png")
    _log(f"sweep outputs written to {out_dir}")
    return EXIT_OK


def cmd_report(args, config: ExperimentConfig | None) -> int:
    records = []
    for path in args.records:
        records.extend(read_records(path))
    if not records:
        raise ConfigError("no records found")
    print(f"{'condition':<16}{'dataset':<24}{'size':>7}{'seed':>6}{'ica':>9}{'ef1':>9}{'ser':>9}")
    for r in sorted(records, key=lambda r: (r.condition, r.dataset, r.train_size, r.seed)):
        m = r.test_metrics
        print(
            f"{r.condition:<16}{r.dataset:<24}{r.train_size:>7}{r.seed:>6}"
            f"{m['ica']:>9.4f}{m['ef1']:>9.4f}{m['ser']:>9.4f}"
        )
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="slukit",
        description="Joint intent classification and entity tagging with "
        "LM-based unsupervised transfer",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p, needs_config=True):
        if needs_config:
            p.add_argument("--config", required=True, help="experiment YAML file")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--out", help="output directory override")
        p.add_argument("--dry-run", action="store_true", help="validate and exit")

    p = sub.add_parser("pretrain-lm", help="pretrain a bidirectional LM on unlabeled text")
    add_common(p)
    p.set_defaults(func=cmd_pretrain_lm, needs_config=True)

    p = sub.add_parser("train", help="train one transfer condition")
    add_common(p)
    p.set_defaults(func=cmd_train, needs_config=True)

    p = sub.add_parser("eval", help="evaluate a model checkpoint on a split")
    p.add_argument("--model", required=True, help="SLU model checkpoint (.npz)")
    p.add_argument("--data", required=True, help="dataset directory or file")
    p.add_argument("--format", default="conll-tsv", choices=["conll-tsv", "json"])
    p.add_argument("--split", default="test", choices=["dev", "test"])
    p.add_argument("--lm", help="LM checkpoint (required for ELMo-mode models)")
    p.add_argument("--out", help="directory for the prediction file")
    p.set_defaults(func=cmd_eval, needs_config=False)

    p = sub.add_parser("sweep", help="low-resource sweep over conditions")
    add_common(p)
    p.set_defaults(func=cmd_sweep, needs_config=True)

    p = sub.add_parser("report", help="summarize run records")
    p.add_argument("records", nargs="+", help="run-record JSONL files")
    p.set_defaults(func=cmd_report, needs_config=False)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        config = None
        if args.needs_config:
            config = load_experiment_config(args.config)
            if args.seed is not None:
                config.seed = args.seed
            if args.out:
                config.output_dir = args.out
            _dump_settings(config)
        return args.func(args, config)
    except (ConfigError, CorpusError, PipelineError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"runtime failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
