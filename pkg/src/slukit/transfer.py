"""End-to-end training pipelines.

One entry point per transfer condition (NoUT, Pretrained, ELMo, ELMoL and
their +ST combinations) plus the low-resource sweep driver. Every run is
fully determined by (spec, seed): seeding covers initialization, dropout,
and batch shuffling; freeze contracts are checked with parameter snapshots
and recorded on the RunRecord.
"""

from __future__ import annotations

import copy
import json
import math
import random
import time
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import torch
import torch.nn as nn

from .corpus import Dataset, Utterance, Vocabulary, build_vocab, sample_low_resource
from .embeddings import load_pretrained_vectors
from .lm import LMCheckpoint, export_shared_layer
from .metrics import EvalPair, MetricReport, evaluate, paired_significance
from .model import ModelConfig, SLUModel, build_model, replace_heads
from .schedules import (
    PARAM_GROUPS,
    ScheduleConfig,
    TrainState,
    effective_lr,
    should_stop,
    unfreeze_plan,
)

GRAD_CLIP_NORM = 5.0

UT_CONDITIONS = ("NoUT", "Pretrained", "ELMo", "ELMoL")
CONDITIONS = UT_CONDITIONS + tuple(f"{c}+ST" for c in UT_CONDITIONS)
SWEEP_SIZES = (100, 200, 500, 1000, 2000, 5000, 10000)


class PipelineError(ValueError):
    pass


@dataclass(frozen=True)
class PipelineSpec:
    condition: str
    target: Dataset
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    source: Dataset | None = None
    lm_checkpoint: LMCheckpoint | None = None
    pretrained_vectors: str | Path | None = None
    seed: int = 0
    batch_size: int = 32
    dropout: float = 0.5
    l2_lambda: float = 1e-4
    hidden_size: int = 100
    min_count: int = 1

    def __post_init__(self):
        if self.condition not in CONDITIONS:
            raise PipelineError(f"unknown condition {self.condition!r}")
        if self.base_condition in ("ELMo", "ELMoL") and self.lm_checkpoint is None:
            raise PipelineError(f"{self.condition} requires an LM checkpoint")
        if self.is_st and self.source is None:
            raise PipelineError(f"{self.condition} requires a source dataset")
        if self.base_condition == "Pretrained" and self.pretrained_vectors is None:
            raise PipelineError("Pretrained condition requires a vector file")
        if self.base_condition == "ELMoL" and self.lm_checkpoint.layers != 1:
            raise PipelineError("ELMoL requires a single-layer LM checkpoint")

    @property
    def base_condition(self) -> str:
        return self.condition.removesuffix("+ST")

    @property
    def is_st(self) -> bool:
        return self.condition.endswith("+ST")


@dataclass
class RunRecord:
    condition: str
    dataset: str
    seed: int
    train_size: int
    epoch_dev_metrics: list[dict]
    best_epoch: int
    test_metrics: dict
    wall_clock_sec: float
    checkpoint_path: str | None = None
    steps: list[dict] = field(default_factory=list)
    freeze_checks: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(self.__dict__, sort_keys=True)

    @classmethod
    def from_json(cls, line: str) -> "RunRecord":
        return cls(**json.loads(line))


def seed_everything(seed: int) -> None:
    torch.manual_seed(seed)
    random.seed(seed)
    torch.set_num_threads(max(torch.get_num_threads(), 1))


def eval_pairs(model: SLUModel, utterances: Sequence[Utterance]) -> list[EvalPair]:
    return [
        EvalPair(
            gold_intent=utt.intent,
            gold_tags=tuple(utt.bio_tags),
            pred_intent=pred.intent,
            pred_tags=pred.tags,
        )
        for utt, pred in model.predict_dataset(utterances)
    ]


def evaluate_model(model: SLUModel, utterances: Sequence[Utterance]) -> MetricReport:
    return evaluate(eval_pairs(model, utterances))


@dataclass
class TrainResult:
    model: SLUModel
    epoch_dev_metrics: list[dict]
    best_epoch: int
    freeze_ok: bool


def _groups_equal(a: list[torch.Tensor], b: list[nn.Parameter]) -> bool:
    return all(torch.equal(x, y.detach()) for x, y in zip(a, b))


def train_supervised(
    model: SLUModel,
    dataset: Dataset,
    schedule: ScheduleConfig,
    seed: int,
    batch_size: int = 32,
    log: Callable[[str], None] | None = None,
) -> TrainResult:
    """Schedule-driven Adam training with early stopping on dev ICA + EF1.

    Frozen groups are excluded from the gradient graph and verified
    bit-identical over each frozen phase. The optimizer is rebuilt at phase
    boundaries (fresh moments for newly thawed layers); learning rates are
    recomputed from the schedule at every update.
    """
    train_utts = list(dataset.train)
    if not train_utts:
        raise PipelineError("empty training split")
    dev_utts = list(dataset.dev) if dataset.dev else train_utts

    groups = model.parameter_groups()
    steps_per_epoch = math.ceil(len(train_utts) / batch_size)
    if schedule.use_tlr:
        tlr_epochs = (
            schedule.max_epochs - schedule.unfreeze_epoch
            if schedule.use_guf
            else schedule.max_epochs
        )
        tlr_total = max(tlr_epochs, 1) * steps_per_epoch
    else:
        tlr_total = schedule.max_epochs * steps_per_epoch
    state = TrainState(total_updates=schedule.max_epochs * steps_per_epoch)

    optimizer = None
    opt_group_names: list[str] = []
    prev_trainable: frozenset[str] | None = None
    frozen_snapshot: dict[str, list[torch.Tensor]] = {}
    freeze_ok = True
    best_score = -math.inf
    best_state = copy.deepcopy(model.state_dict())
    best_epoch = -1
    history: list[float] = []
    epoch_metrics: list[dict] = []

    for epoch in range(schedule.max_epochs):
        trainable = unfreeze_plan(epoch, schedule)
        if trainable != prev_trainable:
            if frozen_snapshot:
                freeze_ok &= all(
                    _groups_equal(snap, groups[g]) for g, snap in frozen_snapshot.items()
                )
            for g, params in groups.items():
                for p in params:
                    p.requires_grad_(g in trainable)
            frozen = [g for g in groups if g not in trainable and groups[g]]
            frozen_snapshot = model.group_snapshot(frozen)
            opt_group_names = [g for g in PARAM_GROUPS if g in trainable and groups[g]]
            optimizer = torch.optim.Adam(
                [{"params": groups[g], "lr": 0.0} for g in opt_group_names]
            )
            prev_trainable = trainable
            state.phase_step = 0
            state.trainable = trainable

        model.train()
        rng = random.Random(seed * 1000003 + epoch)
        order = list(range(len(train_utts)))
        rng.shuffle(order)
        for k in range(0, len(order), batch_size):
            chunk = [train_utts[i] for i in order[k : k + batch_size]]
            batch = model.featurizer.encode(chunk)
            for pg, g in zip(optimizer.param_groups, opt_group_names):
                lr = effective_lr(g, epoch, min(state.phase_step, tlr_total), tlr_total, schedule)
                pg["lr"] = lr
                state.group_lrs[g] = lr
            optimizer.zero_grad()
            trace = model.forward_batch(batch)
            loss = model.joint_loss_batch(trace, batch).mean() + model.l2_penalty()
            if not torch.isfinite(loss):
                raise RuntimeError(
                    f"non-finite loss at epoch {epoch} step {state.step}"
                )
            loss.backward()
            nn.utils.clip_grad_norm_(
                [p for g in opt_group_names for p in groups[g]], GRAD_CLIP_NORM
            )
            optimizer.step()
            state.step += 1
            state.phase_step += 1

        model.eval()
        report = evaluate_model(model, dev_utts)
        score = report.ica + report.ef1
        history.append(score)
        epoch_metrics.append(
            {
                "epoch": epoch,
                "ica": report.ica,
                "ef1": report.ef1,
                "ser": report.ser,
                "score": score,
            }
        )
        if log:
            log(
                f"epoch {epoch}: dev ica={report.ica:.4f} ef1={report.ef1:.4f} "
                f"ser={report.ser:.4f}"
            )
        if score > best_score:
            best_score = score
            best_epoch = epoch
            best_state = copy.deepcopy(model.state_dict())
        state.epoch = epoch
        state.dev_history = history
        if should_stop(history, schedule):
            break

    if frozen_snapshot:
        freeze_ok &= all(
            _groups_equal(snap, groups[g]) for g, snap in frozen_snapshot.items()
        )
    model.load_state_dict(best_state)
    model.eval()
    for p in model.parameters():
        p.requires_grad_(True)
    state.best_epoch = best_epoch
    return TrainResult(
        model=model,
        epoch_dev_metrics=epoch_metrics,
        best_epoch=best_epoch,
        freeze_ok=freeze_ok,
    )


# ---------------------------------------------------------------------------
# Model assembly per condition


def _model_for(spec: PipelineSpec, dataset: Dataset) -> SLUModel:
    base = spec.base_condition
    if base in ("NoUT", "Pretrained"):
        vocab = build_vocab(dataset, spec.min_count)
    else:
        vocab = spec.lm_checkpoint.vocab
    config = ModelConfig(
        mode=base,
        label_space=dataset.label_space,
        vocab=None if base == "ELMo" else vocab,
        hidden_size=spec.hidden_size,
        dropout=spec.dropout,
        l2_lambda=spec.l2_lambda,
        contextual_layers=spec.lm_checkpoint.layers if base == "ELMo" else 2,
        elmo_dim=2 * spec.lm_checkpoint.config.hidden_size if base == "ELMo" else 1024,
    )
    if base == "NoUT":
        return build_model(config)
    if base == "Pretrained":
        table = load_pretrained_vectors(spec.pretrained_vectors, vocab)
        return build_model(config, pretrained_table=table)
    if base == "ELMo":
        return build_model(config, elmo_lm=spec.lm_checkpoint.build_model())
    bundle = export_shared_layer(spec.lm_checkpoint)
    return build_model(config, shared_bundle=bundle)


def _lm_snapshot(spec: PipelineSpec) -> dict[str, torch.Tensor] | None:
    if spec.lm_checkpoint is None:
        return None
    return {k: v.clone() for k, v in spec.lm_checkpoint.state.items()}


def _lm_unchanged(spec: PipelineSpec, snapshot, model: SLUModel) -> bool:
    """Bitwise comparison of the frozen LM against its pre-training snapshot."""
    if snapshot is None:
        return True
    if spec.base_condition == "ELMo":
        current = model.featurizer.elmo_lm.state_dict()
        return all(torch.equal(snapshot[k], current[k]) for k in snapshot)
    return all(torch.equal(snapshot[k], spec.lm_checkpoint.state[k]) for k in snapshot)


def _finish_record(
    spec: PipelineSpec,
    dataset: Dataset,
    result: TrainResult,
    t0: float,
    steps: list[dict],
    freeze_checks: dict,
    out_dir: str | Path | None,
) -> RunRecord:
    test_split = dataset.test if dataset.test else dataset.dev or dataset.train
    report = evaluate_model(result.model, list(test_split))
    checkpoint_path = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        checkpoint_path = str(
            out_dir / f"{spec.condition.replace('+', '_')}-{dataset.name}-s{spec.seed}.npz"
        )
        result.model.save(
            checkpoint_path,
            extra_meta={"condition": spec.condition, "seed": spec.seed},
        )
    return RunRecord(
        condition=spec.condition,
        dataset=dataset.name,
        seed=spec.seed,
        train_size=len(dataset.train),
        epoch_dev_metrics=result.epoch_dev_metrics,
        best_epoch=result.best_epoch,
        test_metrics=report.as_dict(),
        wall_clock_sec=time.time() - t0,
        checkpoint_path=checkpoint_path,
        steps=steps,
        freeze_checks=freeze_checks,
    )


def train_ut(
    spec: PipelineSpec, out_dir: str | Path | None = None, log=None
) -> RunRecord:
    """Train one unsupervised-transfer condition on the spec's target."""
    if spec.is_st:
        raise PipelineError("train_ut handles UT-only conditions; use run_pipeline")
    t0 = time.time()
    seed_everything(spec.seed)
    snapshot = _lm_snapshot(spec)
    model = _model_for(spec, spec.target)
    result = train_supervised(
        model, spec.target, spec.schedule, spec.seed, spec.batch_size, log
    )
    freeze_checks = {"schedule_freeze_phases": result.freeze_ok}
    if spec.base_condition == "ELMo":
        lm_ok = _lm_unchanged(spec, snapshot, model)
        freeze_checks["lm_frozen"] = lm_ok
        if not lm_ok:
            raise RuntimeError("frozen-LM contract violated during ELMo training")
    steps = [{"step": "target-train", "best_epoch": result.best_epoch}]
    return _finish_record(spec, spec.target, result, t0, steps, freeze_checks, out_dir)


def _st_schedules(spec: PipelineSpec) -> tuple[ScheduleConfig, ScheduleConfig]:
    """(source-phase, target-phase) schedules for the +ST recipes.

    The ELMoL recipe trains the source phase with guf+discr (no tlr) and the
    target phase with all three techniques; other conditions reuse the
    spec's schedule for both phases.
    """
    if spec.base_condition == "ELMoL":
        src = replace(spec.schedule, use_guf=True, use_discr=True, use_tlr=False)
        tgt = replace(spec.schedule, use_guf=True, use_discr=True, use_tlr=True)
        return src, tgt
    return spec.schedule, spec.schedule


_ST_KEEP = frozenset({"embedding", "shared_birnn", "et_birnn", "ic_birnn", "mixing"})


def _train_st(spec: PipelineSpec, out_dir, log) -> RunRecord:
    t0 = time.time()
    seed_everything(spec.seed)
    snapshot = _lm_snapshot(spec)
    src_schedule, tgt_schedule = _st_schedules(spec)
    steps: list[dict] = []

    if spec.lm_checkpoint is not None:
        steps.append(
            {
                "step": "lm-pretrain",
                "layers": spec.lm_checkpoint.layers,
                "heldout_perplexity": spec.lm_checkpoint.metadata.get(
                    "best_heldout_perplexity"
                ),
            }
        )

    # source-domain pretraining of the multi-task network
    source_model = _model_for(spec, spec.source)
    src_result = train_supervised(
        source_model, spec.source, src_schedule, spec.seed, spec.batch_size, log
    )
    steps.append(
        {
            "step": "source-finetune",
            "dataset": spec.source.name,
            "best_epoch": src_result.best_epoch,
            "freeze_phases_ok": src_result.freeze_ok,
        }
    )

    # swap heads for the target label space, then fine-tune
    keep = {g for g in _ST_KEEP if source_model.parameter_groups()[g]}
    target_model = replace_heads(source_model, spec.target.label_space, keep)
    kept_before = source_model.group_snapshot(sorted(keep))
    kept_after = target_model.group_snapshot(sorted(keep))
    heads_kept = all(
        all(torch.equal(a, b) for a, b in zip(kept_before[g], kept_after[g]))
        for g in kept_before
    )
    tgt_result = train_supervised(
        target_model, spec.target, tgt_schedule, spec.seed, spec.batch_size, log
    )
    steps.append(
        {
            "step": "target-finetune",
            "dataset": spec.target.name,
            "best_epoch": tgt_result.best_epoch,
            "freeze_phases_ok": tgt_result.freeze_ok,
        }
    )

    freeze_checks = {
        "replace_heads_kept_groups": heads_kept,
        "schedule_freeze_phases": src_result.freeze_ok and tgt_result.freeze_ok,
    }
    if spec.lm_checkpoint is not None:
        lm_ok = _lm_unchanged(spec, snapshot, target_model)
        freeze_checks["lm_frozen"] = lm_ok
        if spec.base_condition == "ELMo" and not lm_ok:
            raise RuntimeError("frozen-LM contract violated during ELMo+ST training")
    return _finish_record(
        spec, spec.target, tgt_result, t0, steps, freeze_checks, out_dir
    )


def train_elmo_plus_st(
    spec: PipelineSpec, out_dir: str | Path | None = None, log=None
) -> RunRecord:
    """Three-step recipe: frozen-LM embeddings, source pretraining, target
    fine-tuning with replaced heads. LM weights stay frozen in steps 2-3."""
    if spec.condition != "ELMo+ST":
        raise PipelineError(f"expected ELMo+ST, got {spec.condition}")
    return _train_st(spec, out_dir, log)


def train_elmol_plus_st(
    spec: PipelineSpec, out_dir: str | Path | None = None, log=None
) -> RunRecord:
    """Three-step recipe: LM-pretrained shared layer, source training with
    guf+discr, target fine-tuning with guf+discr+tlr."""
    if spec.condition != "ELMoL+ST":
        raise PipelineError(f"expected ELMoL+ST, got {spec.condition}")
    return _train_st(spec, out_dir, log)


def run_pipeline(
    spec: PipelineSpec, out_dir: str | Path | None = None, log=None
) -> RunRecord:
    if not spec.is_st:
        return train_ut(spec, out_dir, log)
    if spec.condition == "ELMo+ST":
        return train_elmo_plus_st(spec, out_dir, log)
    if spec.condition == "ELMoL+ST":
        return train_elmol_plus_st(spec, out_dir, log)
    return _train_st(spec, out_dir, log)


# ---------------------------------------------------------------------------
# Low-resource sweep


@dataclass
class SweepResult:
    records: list[RunRecord]
    curves: dict[str, list[dict]]  # condition -> [{size, mean_ser, std_ser, ...}]
    ttests: list[dict]  # pairwise per size

    def csv_rows(self) -> list[dict]:
        return [
            {
                "condition": r.condition,
                "size": r.train_size,
                "seed": r.seed,
                "ica": r.test_metrics["ica"],
                "ef1": r.test_metrics["ef1"],
                "ser": r.test_metrics["ser"],
            }
            for r in self.records
        ]


def _mean_std(values: Sequence[float]) -> tuple[float, float]:
    mean = sum(values) / len(values)
    var = sum((v - mean) ** 2 for v in values) / len(values)
    return mean, math.sqrt(var)


def low_resource_sweep(
    specs: Sequence[PipelineSpec],
    sizes: Sequence[int | str] = SWEEP_SIZES,
    seeds: Sequence[int] = (0, 1, 2, 3, 4),
    out_dir: str | Path | None = None,
    log=None,
) -> SweepResult:
    """One run per (condition, size, seed); means, deviations and paired
    t-tests per size. ``"full"`` uses the whole train split; sizes larger
    than the train split are skipped with a warning."""
    if len(seeds) < 2:
        raise PipelineError("need at least 2 seeds for significance testing")
    records: list[RunRecord] = []
    by_key: dict[tuple[str, int | str], list[float]] = {}
    for template in specs:
        for size in sizes:
            if size != "full" and int(size) > len(template.target.train):
                warnings.warn(
                    f"size {size} exceeds {template.target.name} train split; skipped"
                )
                continue
            for seed in seeds:
                if size == "full":
                    target = template.target
                else:
                    target = sample_low_resource(template.target, int(size), seed)
                spec = replace(template, target=target, seed=seed)
                record = run_pipeline(spec, out_dir=out_dir, log=log)
                records.append(record)
                by_key.setdefault((template.condition, size), []).append(
                    record.test_metrics["ser"]
                )
                if log:
                    log(
                        f"{template.condition} size={size} seed={seed}: "
                        f"ser={record.test_metrics['ser']:.4f}"
                    )

    curves: dict[str, list[dict]] = {}
    for (condition, size), sers in sorted(by_key.items(), key=lambda kv: str(kv[0])):
        mean, std = _mean_std(sers)
        curves.setdefault(condition, []).append(
            {"size": size, "mean_ser": mean, "std_ser": std, "n": len(sers)}
        )
    conditions = [s.condition for s in specs]
    ttests = []
    for i, cond_a in enumerate(conditions):
        for cond_b in conditions[i + 1 :]:
            for size in sizes:
                a = by_key.get((cond_a, size))
                b = by_key.get((cond_b, size))
                if not a or not b or len(a) != len(b):
                    continue
                p, significant = paired_significance(a, b)
                ttests.append(
                    {
                        "condition_a": cond_a,
                        "condition_b": cond_b,
                        "size": size,
                        "p_value": p,
                        "significant": significant,
                    }
                )
    return SweepResult(records=records, curves=curves, ttests=ttests)


def write_records(records: Sequence[RunRecord], path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(r.to_json() + "\n")


def read_records(path: str | Path) -> list[RunRecord]:
    with open(path, encoding="utf-8") as fh:
        return [RunRecord.from_json(line) for line in fh if line.strip()]
