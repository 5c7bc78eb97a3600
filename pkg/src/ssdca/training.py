"""Adam with linear warmup/decay, per-fold training with best-validation selection,
and cross-validation over patient-level folds."""

from __future__ import annotations

import copy
import csv
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .checkpoint import load_checkpoint, read_archive, write_archive
from .config import ModelConfig, RunConfig, TrainConfig
from .data import (
    ImageStore,
    LongitudinalPair,
    SplitPlan,
    StudyRecord,
    balanced_sampler,
    build_pairs,
    iter_batches,
    patient_outcomes,
    stratified_kfold,
)
from .evaluation import (
    MetricsReport,
    PredictionRecord,
    aggregate_records,
    compute_metrics,
    mean_std,
)
from .fusion import PairModel, build_model

log = logging.getLogger(__name__)


class NumericalError(RuntimeError):
    def __init__(self, message: str, fold: int | None = None, tensor: str | None = None):
        super().__init__(message)
        self.fold = fold
        self.tensor = tensor


def lr_schedule(epoch: int, cfg: TrainConfig) -> float:
    """Per-epoch learning rate: linear ramp to the peak, then linear decay to 0.

    Warmup epoch ``e`` uses ``lr * (e + 1) / warmup``; decay epoch ``e``
    uses ``lr * (total - e) / (total - warmup)``.
    """
    if not 0 <= epoch < cfg.total_epochs:
        raise ValueError(f"epoch {epoch} outside [0, {cfg.total_epochs})")
    lr = cfg.learning_rate
    if epoch < cfg.warmup_epochs:
        return lr * (epoch + 1) / cfg.warmup_epochs
    if cfg.schedule == "constant":
        return lr
    return lr * (cfg.total_epochs - epoch) / (cfg.total_epochs - cfg.warmup_epochs)


@dataclass
class AdamState:
    m: dict[str, torch.Tensor] = field(default_factory=dict)
    v: dict[str, torch.Tensor] = field(default_factory=dict)
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@torch.no_grad()
def adam_step(
    params: dict[str, torch.Tensor], grads: dict[str, torch.Tensor | None], state: AdamState, lr: float
) -> tuple[dict[str, torch.Tensor], AdamState]:
    """One bias-corrected Adam update applied in place.

    Raises :class:`NumericalError` naming the first tensor whose gradient
    is not finite, before any parameter is touched.
    """
    for name, g in grads.items():
        if g is not None and not torch.isfinite(g).all():
            raise NumericalError(f"non-finite gradient in {name}", tensor=name)
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if name not in state.m:
            state.m[name] = torch.zeros_like(p)
            state.v[name] = torch.zeros_like(p)
        m, v = state.m[name], state.v[name]
        m.mul_(b1).add_(g, alpha=1.0 - b1)
        v.mul_(b2).addcmul_(g, g, value=1.0 - b2)
        denom = (v / c2).sqrt_().add_(state.eps)
        p.addcdiv_(m / c1, denom, value=-lr)
    return params, state


def set_determinism(strict: bool, threads: int = 1) -> None:
    torch.set_num_threads(max(1, threads if not strict else 1))
    torch.use_deterministic_algorithms(strict)


def _seed_for(*parts: int) -> int:
    return int(np.random.SeedSequence(list(parts)).generate_state(1)[0])


@torch.no_grad()
def predict_pairs(
    model: PairModel, pairs: Sequence[LongitudinalPair], store: ImageStore, batch_size: int = 8
) -> list[PredictionRecord]:
    """Per-pair probabilities in eval mode; artifact tags come from the post image."""
    was_training = model.training
    model.eval()
    out = []
    for chunk in iter_batches(list(pairs), batch_size):
        pre, post, _ = store.batch(chunk)
        probs = torch.sigmoid(model(pre, post)).tolist()
        for pair, p in zip(chunk, probs):
            out.append(
                PredictionRecord(pair.patient_id, pair.same_day_group[1], float(p), pair.label, pair.post.artifacts)
            )
    model.train(was_training)
    return out


def evaluate_pairs(
    model: PairModel, pairs: Sequence[LongitudinalPair], store: ImageStore, cfg: TrainConfig
) -> tuple[MetricsReport, list[PredictionRecord]]:
    raw = predict_pairs(model, pairs, store, cfg.batch_size)
    agg = aggregate_records(raw, cfg.topk)
    return compute_metrics(agg, cfg.threshold), raw


def _selection_value(m: MetricsReport, cfg: TrainConfig) -> float:
    v = m.balanced_accuracy if cfg.selection_metric == "balanced_accuracy" else m.accuracy
    return -math.inf if math.isnan(v) else v


@dataclass
class FoldArtifacts:
    fold: int
    best_epoch: int
    best_val: float
    curves: list[tuple[int, str, str, float]]
    best_state: dict[str, torch.Tensor]
    val_metrics: MetricsReport | None = None
    checkpoint: Path | None = None

    def curve(self, split: str, metric: str) -> list[float]:
        return [v for _, s, m, v in self.curves if s == split and m == metric]


def write_curves_csv(curves, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "split", "metric", "value"])
        for e, s, m, v in curves:
            w.writerow([e, s, m, repr(float(v))])


def _save_state(path: Path, model: PairModel, meta: dict, adam: AdamState | None = None) -> None:
    tensors = dict(model.state_dict())
    if adam is not None:
        for k in adam.m:
            tensors[f"adam.m.{k}"] = adam.m[k]
            tensors[f"adam.v.{k}"] = adam.v[k]
    write_archive(tensors, path.with_suffix(".tns"))
    path.with_suffix(".json").write_text(json.dumps(meta, indent=2, sort_keys=True))


def _load_state(path: Path, model: PairModel, adam: AdamState | None = None) -> dict:
    tensors = read_archive(path.with_suffix(".tns"))
    model_t = {k: v for k, v in tensors.items() if not k.startswith("adam.")}
    load_checkpoint(model_t, model)
    if adam is not None:
        for k, v in tensors.items():
            if k.startswith("adam.m."):
                adam.m[k[7:]] = torch.from_numpy(v)
            elif k.startswith("adam.v."):
                adam.v[k[7:]] = torch.from_numpy(v)
    return json.loads(path.with_suffix(".json").read_text())


def init_model(model_cfg: ModelConfig, encoder_checkpoint: str | None = None) -> PairModel:
    model = build_model(model_cfg)
    if encoder_checkpoint:
        load_checkpoint(encoder_checkpoint, model.encoder, prefix="encoder.")
    return model


def train_fold(
    fold: int,
    plan: SplitPlan,
    records: Sequence[StudyRecord],
    run: RunConfig,
    store: ImageStore,
    out_dir: str | Path | None = None,
    resume: bool = False,
    encoder_checkpoint: str | None = None,
) -> FoldArtifacts:
    """Train one CV fold: all ordered pairs of the training patients, validated
    on (restaging, last follow-up) pairs of the held-out patients."""
    train_pairs = build_pairs(records, "train", plan.train_patients(fold))
    val_pairs = build_pairs(records, "test", plan.val_patients(fold))
    return fit(train_pairs, val_pairs, run, store, fold, out_dir, resume, encoder_checkpoint)


def fit(
    train_pairs: Sequence[LongitudinalPair],
    val_pairs: Sequence[LongitudinalPair],
    run: RunConfig,
    store: ImageStore,
    fold: int = 0,
    out_dir: str | Path | None = None,
    resume: bool = False,
    encoder_checkpoint: str | None = None,
) -> FoldArtifacts:
    """Train for ``total_epochs`` and keep the checkpoint with the best validation metric.

    Ties keep the earliest epoch; without validation pairs the final epoch
    is kept. Every epoch draws its own RNG stream from ``(seed, fold,
    epoch)``, so a resumed run replays the remaining epochs exactly.
    """
    cfg = run.train
    labels = [p.label for p in train_pairs]
    model = init_model(run.model, encoder_checkpoint)
    params = dict(model.named_parameters())
    adam = AdamState(beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.eps)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    curves: list[tuple[int, str, str, float]] = []
    best_val, best_epoch, best_state, best_metrics = -math.inf, -1, None, None
    start_epoch = 0
    if resume and out is not None and (out / "last.json").exists():
        meta = _load_state(out / "last", model, adam)
        adam.step = meta["adam_step"]
        start_epoch = meta["epoch"] + 1
        curves = [tuple(c) for c in meta["curves"]]
        best_val, best_epoch = meta["best_val"], meta["best_epoch"]
        if (out / "best.json").exists():
            best_model = copy.deepcopy(model)
            _load_state(out / "best", best_model)
            best_state = copy.deepcopy(best_model.state_dict())
        log.info("fold %d: resuming at epoch %d", fold, start_epoch)

    def partial_save():
        if out is not None:
            write_curves_csv(curves, out / "curves.csv")

    for epoch in range(start_epoch, cfg.total_epochs):
        rng = np.random.default_rng([cfg.seed, fold, epoch])
        torch.manual_seed(_seed_for(cfg.seed, fold, epoch))
        lr = lr_schedule(epoch, cfg)
        order = balanced_sampler(labels, rng, len(train_pairs))
        model.train()
        loss_sum, correct, seen = 0.0, 0, 0
        for idx in iter_batches(order, cfg.batch_size):
            batch = [train_pairs[i] for i in idx]
            pre, post, y = store.batch(batch, rng if cfg.augment else None)
            logits = model(pre, post)
            loss = F.binary_cross_entropy_with_logits(logits, y)
            if not torch.isfinite(loss):
                partial_save()
                raise NumericalError(f"fold {fold}: loss diverged at epoch {epoch}", fold=fold)
            model.zero_grad(set_to_none=True)
            loss.backward()
            grads = {k: p.grad for k, p in params.items()}
            if cfg.grad_clip:
                torch.nn.utils.clip_grad_norm_(list(params.values()), cfg.grad_clip)
            try:
                adam_step(params, grads, adam, lr)
            except NumericalError as err:
                partial_save()
                err.fold = fold
                raise
            loss_sum += float(loss.detach()) * len(batch)
            correct += int(((logits.detach() >= 0).float() == y).sum())
            seen += len(batch)
        curves.append((epoch, "train", "loss", loss_sum / seen))
        curves.append((epoch, "train", "accuracy", correct / seen))
        curves.append((epoch, "train", "lr", lr))

        if val_pairs:
            val_m, _ = evaluate_pairs(model, val_pairs, store, cfg)
            for k in ("balanced_accuracy", "sensitivity", "specificity"):
                curves.append((epoch, "val", k, getattr(val_m, k)))
            score = _selection_value(val_m, cfg)
        else:
            val_m, score = None, float(epoch)
        if score > best_val:
            best_val, best_epoch, best_metrics = score, epoch, val_m
            best_state = copy.deepcopy(model.state_dict())
            if out is not None:
                _save_state(out / "best", model, {"epoch": epoch, "val": val_m.as_dict() if val_m else None,
                                                  "config": run.to_dict(), "config_hash": run.config_hash()})
        if out is not None:
            _save_state(
                out / "last",
                model,
                {"epoch": epoch, "adam_step": adam.step, "curves": curves, "best_val": best_val,
                 "best_epoch": best_epoch, "config_hash": run.config_hash()},
                adam,
            )
        log.info("fold %d epoch %d: loss %.4f train acc %.3f val BA %.2f", fold, epoch,
                 loss_sum / seen, correct / seen, val_m.balanced_accuracy if val_m else float("nan"))

    partial_save()
    if best_state is None:
        best_state = copy.deepcopy(model.state_dict())
    return FoldArtifacts(fold, best_epoch, best_val, curves, best_state, best_metrics,
                         out / "best.tns" if out is not None else None)


@dataclass
class CvReport:
    folds: list[FoldArtifacts]
    test_metrics: dict[int, MetricsReport]
    test_predictions: dict[int, list[PredictionRecord]]
    failed: dict[int, str] = field(default_factory=dict)
    ensemble_metrics: MetricsReport | None = None
    plan: SplitPlan | None = None

    def summary(self) -> dict[str, tuple[float, float]]:
        out = {}
        for k in ("balanced_accuracy", "sensitivity", "specificity"):
            out[k] = mean_std([getattr(m, k) for m in self.test_metrics.values()])
        return out

    def rows(self) -> list[dict]:
        rows = []
        for f, m in sorted(self.test_metrics.items()):
            for k in ("balanced_accuracy", "sensitivity", "specificity"):
                rows.append({"fold": f, "metric": k, "value": getattr(m, k)})
        for k, (mu, sd) in self.summary().items():
            rows.append({"fold": "mean", "metric": k, "value": mu})
            rows.append({"fold": "std", "metric": k, "value": sd})
        if self.ensemble_metrics is not None:
            for k in ("balanced_accuracy", "sensitivity", "specificity"):
                rows.append({"fold": "ensemble", "metric": k, "value": getattr(self.ensemble_metrics, k)})
        for f in sorted(self.failed):
            rows.append({"fold": f, "metric": "failed", "value": float("nan")})
        return rows


def load_fold_model(run: RunConfig, state: dict[str, torch.Tensor]) -> PairModel:
    model = build_model(run.model)
    model.load_state_dict(state)
    model.eval()
    return model


def cross_validate(
    records: Sequence[StudyRecord],
    run: RunConfig,
    store: ImageStore | None = None,
    out_dir: str | Path | None = None,
    resume: bool = False,
    encoder_checkpoint: str | None = None,
) -> CvReport:
    """k-fold CV on the ``dev`` cohort; each fold's best model is scored on ``test`` pairs."""
    store = store or ImageStore(run.model.encoder.image_size)
    dev = [r for r in records if r.cohort == "dev"]
    test = [r for r in records if r.cohort == "test"]
    plan = stratified_kfold(patient_outcomes(dev), run.train.fold_count, run.train.seed)
    test_pairs = build_pairs(test, "test") if test else []
    out = Path(out_dir) if out_dir is not None else None

    report = CvReport([], {}, {}, plan=plan)
    for i in range(plan.k):
        fold_dir = out / f"fold{i}" if out is not None else None
        try:
            art = train_fold(i, plan, dev, run, store, fold_dir, resume, encoder_checkpoint)
        except NumericalError as err:
            log.error("fold %d failed: %s", i, err)
            report.failed[i] = str(err)
            continue
        report.folds.append(art)
        if test_pairs:
            model = load_fold_model(run, art.best_state)
            m, raw = evaluate_pairs(model, test_pairs, store, run.train)
            report.test_metrics[i] = m
            report.test_predictions[i] = raw
    if report.test_predictions:
        report.ensemble_metrics = _ensemble(list(report.test_predictions.values()), run.train)
    return report


def _ensemble(per_fold: list[list[PredictionRecord]], cfg: TrainConfig) -> MetricsReport:
    """Metrics of fold-averaged probabilities (records align across folds)."""
    merged = []
    for recs in zip(*per_fold):
        p = float(np.mean([r.probability for r in recs]))
        r0 = recs[0]
        merged.append(PredictionRecord(r0.patient_id, r0.group, p, r0.label, r0.artifacts))
    return compute_metrics(aggregate_records(merged, cfg.topk), cfg.threshold)
