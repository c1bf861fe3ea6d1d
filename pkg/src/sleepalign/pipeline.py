"""Training, selective fine-tuning, and evaluation orchestration.

pretrain -> extract features -> score/select source batches -> fine-tune on
the selected batches only -> evaluate. Target labels are never consumed by
the adaptation path (transductive contract); evaluate() is the only consumer
of target labels.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from . import aligner, nn
from .edf import STAGES, EpochDataset


class PipelineError(Exception):
    pass


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 20
    batch_size: int = 32
    lr: float = 1e-3
    weight_decay: float = 0.0
    seed: int = 0
    patience: int = 0  # 0 disables early stop
    feature_tap: int = 2
    holdout_fraction: float = 0.1
    finetune_lr_scale: float = 0.1  # fine-tuning runs at lr * this

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if self.lr <= 0:
            raise ValueError("lr must be > 0")


@dataclass
class EvalReport:
    confusion: np.ndarray  # (5, 5) counts; rows = truth, cols = prediction
    accuracy: float
    macro_f1: float
    per_class: dict[str, dict[str, float]]
    absent_classes: list[str]
    protocol: str = ""
    seed: int = 0
    wall_clock: float = 0.0

    def to_dict(self) -> dict:
        return {
            "confusion": self.confusion.tolist(),
            "accuracy": round(self.accuracy, 4),
            "macro_f1": round(self.macro_f1, 4),
            "per_class": {
                k: {m: round(v, 4) for m, v in d.items()} for k, d in self.per_class.items()
            },
            "absent_classes": self.absent_classes,
            "protocol": self.protocol,
            "seed": self.seed,
            "wall_clock": round(self.wall_clock, 4),
        }


def _labeled_arrays(dataset: EpochDataset):
    x = dataset.samples_matrix()
    y = dataset.labels_array()
    if np.any(y < 0):
        raise PipelineError("dataset contains unlabeled epochs where labels are required")
    return x, y


def _accuracy(model: nn.ModelParams, x: np.ndarray, y: np.ndarray) -> float:
    logits, _ = nn.forward(model, x)
    return float((logits.argmax(axis=1) == y).mean())


def _train_loop(model, x, y, cfg: TrainConfig, lr, n_epochs, rng):
    for _ in range(n_epochs):
        order = rng.permutation(len(x))
        for start in range(0, len(x), cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            _loss, grads = nn.backward(model, x[idx], y[idx])
            model = nn.sgd_step(model, grads, lr, cfg.weight_decay)
    return model


def pretrain(source: EpochDataset, cfg: TrainConfig) -> nn.ModelParams:
    """Mini-batch SGD with per-epoch shuffling; keeps the checkpoint with the
    best accuracy on a seeded 10% holdout split."""
    x, y = _labeled_arrays(source)
    if len(np.unique(y)) < 2:
        raise PipelineError("pretraining needs at least 2 classes in the source data")
    rng = np.random.default_rng(cfg.seed)
    order = rng.permutation(len(x))
    n_hold = max(1, int(round(cfg.holdout_fraction * len(x))))
    hold, train = order[:n_hold], order[n_hold:]
    if len(train) == 0:
        raise PipelineError("dataset too small for a holdout split")
    xt, yt = x[train], y[train]
    xh, yh = x[hold], y[hold]

    config = nn.ModelConfig(feature_tap=cfg.feature_tap)
    model = nn.init_model(config, seed=cfg.seed)
    best = model.copy()
    best_acc = _accuracy(model, xh, yh)
    stale = 0
    for _epoch in range(cfg.epochs):
        model = _train_loop(model, xt, yt, cfg, cfg.lr, 1, rng)
        acc = _accuracy(model, xh, yh)
        if acc > best_acc:
            best_acc = acc
            best = model.copy()
            stale = 0
        else:
            stale += 1
            if cfg.patience and stale >= cfg.patience:
                break
    return best


def evaluate(model: nn.ModelParams, labeled_target: EpochDataset,
             protocol: str = "", seed: int = 0) -> EvalReport:
    """Confusion matrix, accuracy, macro-F1 on labeled data."""
    if len(labeled_target) == 0:
        raise PipelineError("cannot evaluate on an empty dataset")
    t0 = time.perf_counter()
    x, y = _labeled_arrays(labeled_target)
    logits, _ = nn.forward(model, x)
    pred = logits.argmax(axis=1)
    k = nn.N_CLASSES
    confusion = np.zeros((k, k), dtype=np.int64)
    np.add.at(confusion, (y, pred), 1)
    accuracy = float(np.trace(confusion) / confusion.sum())
    per_class = {}
    f1s = []
    absent = []
    for ci, stage in enumerate(STAGES):
        tp = confusion[ci, ci]
        fp = confusion[:, ci].sum() - tp
        fn = confusion[ci, :].sum() - tp
        support = confusion[ci, :].sum()
        precision = tp / (tp + fp) if tp + fp else 0.0
        recall = tp / (tp + fn) if tp + fn else 0.0
        f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
        per_class[stage] = {"precision": precision, "recall": recall,
                            "f1": f1, "support": float(support)}
        if support == 0:
            absent.append(stage)  # excluded from macro-F1
        else:
            f1s.append(f1)
    macro_f1 = float(np.mean(f1s)) if f1s else 0.0
    return EvalReport(confusion=confusion, accuracy=accuracy, macro_f1=macro_f1,
                      per_class=per_class, absent_classes=absent,
                      protocol=protocol, seed=seed,
                      wall_clock=time.perf_counter() - t0)


def kfold_cv(dataset: EpochDataset, k: int, cfg: TrainConfig):
    """Subject-wise k-fold: no subject appears in both train and test of a
    fold. Returns (fold reports, aggregate dict)."""
    if k < 2:
        raise PipelineError("k must be >= 2")
    subjects = sorted({ep.subject_id for ep in dataset.epochs})
    if len(subjects) < k:
        raise PipelineError(f"need at least {k} subjects, have {len(subjects)}")
    rng = np.random.default_rng(cfg.seed)
    order = rng.permutation(len(subjects))
    folds = [sorted(subjects[i] for i in order[f::k]) for f in range(k)]
    reports = []
    for f, test_subjects in enumerate(folds):
        test_set = set(test_subjects)
        train_eps = [ep for ep in dataset.epochs if ep.subject_id not in test_set]
        test_eps = [ep for ep in dataset.epochs if ep.subject_id in test_set]
        train_ds = EpochDataset(train_eps, dataset.domain, dict(dataset.provenance))
        test_ds = EpochDataset(test_eps, dataset.domain, dict(dataset.provenance))
        model = pretrain(train_ds, cfg)
        reports.append(evaluate(model, test_ds, protocol=f"fold{f}", seed=cfg.seed))
    accs = [r.accuracy for r in reports]
    f1s = [r.macro_f1 for r in reports]
    aggregate = {
        "k": k,
        "accuracy_mean": float(np.mean(accs)),
        "accuracy_std": float(np.std(accs)),
        "macro_f1_mean": float(np.mean(f1s)),
        "macro_f1_std": float(np.std(f1s)),
    }
    return reports, aggregate


@dataclass
class FinetuneOutcome:
    model: nn.ModelParams
    rewards: list[aligner.BatchReward]
    selection: aligner.SelectionResult
    warnings: list[str] = field(default_factory=list)


def selective_finetune(
    model: nn.ModelParams,
    source: EpochDataset,
    target_unlabeled: EpochDataset,
    policy: aligner.SelectionPolicy,
    cfg: TrainConfig,
    solver: aligner.SolverConfig | None = None,
    batch_size: int | None = None,
) -> FinetuneOutcome:
    """Score source batches against the target features with the *input*
    model's extractor, keep batches passing the policy, fine-tune on their
    source labels only. Target labels, if present, are ignored."""
    source_feats = nn.extract_features(model, source)
    # feature extraction reads samples only, so any labels on the target
    # dataset cannot leak into scoring or selection
    target_feats = nn.extract_features(model, target_unlabeled)
    batches = aligner.make_batches(source, source_feats,
                                   batch_size or aligner.DEFAULT_BATCH_SIZE)
    rewards = aligner.score_batches(batches, target_feats, solver, policy)
    selection = aligner.select(rewards, policy)
    if not selection.selected_ids:
        return FinetuneOutcome(model=model, rewards=rewards, selection=selection,
                               warnings=[aligner.WARN_EMPTY_SELECTION])
    chosen = set(selection.selected_ids)
    idx = [i for b in batches if b.batch_id in chosen for i in b.epoch_indices]
    x = source.samples_matrix()[idx]
    y = source.labels_array()[idx]
    rng = np.random.default_rng(cfg.seed)
    tuned = _train_loop(model.copy(), x, y, cfg, cfg.lr * cfg.finetune_lr_scale,
                        cfg.epochs, rng)
    return FinetuneOutcome(model=tuned, rewards=rewards, selection=selection)


def run_planted_protocol(
    seed: int = 0,
    n_per_class_source: int = 24,
    n_per_class_target: int = 12,
    batch_size: int = 24,
    pretrain_cfg: TrainConfig | None = None,
    policy: aligner.SelectionPolicy | None = None,
) -> dict:
    """Planted domain-shift experiment on synthetic data.

    Source = matched population (same generator as the target) + a
    strong-shift population, batched so each batch is homogeneous. Compares
    no-adapt, fine-tune-on-all, and selective fine-tune on a held-out labeled
    target set, and reports the precision of batch selection against the
    planted ground truth.
    """
    from . import synth

    strong = synth.shift_preset("strong")
    matched = synth.gen_domain(n_per_class_source, shift=synth.IDENTITY_SHIFT,
                               seed=seed * 1000 + 1, domain="source")
    shifted = synth.gen_domain(n_per_class_source, shift=strong,
                               seed=seed * 1000 + 2, domain="source")
    target_align = synth.gen_domain(n_per_class_target, shift=synth.IDENTITY_SHIFT,
                                    seed=seed * 1000 + 3, domain="target")
    target_eval = synth.gen_domain(n_per_class_target, shift=synth.IDENTITY_SHIFT,
                                   seed=seed * 1000 + 4, domain="target")

    # interleave so matched/shifted epochs fill alternating homogeneous batches
    source_epochs = []
    matched_flags = []
    m_eps, s_eps = matched.epochs, shifted.epochs
    for start in range(0, len(m_eps), batch_size):
        source_epochs.extend(m_eps[start : start + batch_size])
        matched_flags.append(True)
        source_epochs.extend(s_eps[start : start + batch_size])
        matched_flags.append(False)
    source = EpochDataset(source_epochs, "source",
                          {"planted": True, "seed": seed})

    cfg = pretrain_cfg or TrainConfig(epochs=12, batch_size=32, lr=3e-3, seed=seed)
    policy = policy or aligner.SelectionPolicy(mode="top_quantile", quantile=0.5)

    model = pretrain(source, cfg)
    no_adapt = evaluate(model, target_eval, protocol="no-adapt", seed=seed)

    ft_cfg = TrainConfig(epochs=cfg.epochs, batch_size=cfg.batch_size, lr=cfg.lr,
                         weight_decay=cfg.weight_decay, seed=seed,
                         feature_tap=cfg.feature_tap,
                         finetune_lr_scale=cfg.finetune_lr_scale)
    select_all = aligner.SelectionPolicy(mode="absolute", tau=0.0)
    all_out = selective_finetune(model, source, target_align, select_all, ft_cfg,
                                 batch_size=batch_size)
    all_eval = evaluate(all_out.model, target_eval, protocol="finetune-all", seed=seed)

    sel_out = selective_finetune(model, source, target_align, policy, ft_cfg,
                                 batch_size=batch_size)
    sel_eval = evaluate(sel_out.model, target_eval, protocol="selective", seed=seed)

    matched_ids = {f"b{i:04d}" for i, flag in enumerate(matched_flags) if flag}
    chosen = set(sel_out.selection.selected_ids)
    precision = len(chosen & matched_ids) / len(chosen) if chosen else 0.0

    # precision at the median-reward threshold, the calibration headline
    tau_med = aligner.calibrate_threshold(sel_out.rewards, "median")
    med_sel = aligner.select(sel_out.rewards,
                             aligner.SelectionPolicy(mode="absolute", tau=tau_med))
    med_chosen = set(med_sel.selected_ids)
    precision_median = (len(med_chosen & matched_ids) / len(med_chosen)
                        if med_chosen else 0.0)

    return {
        "seed": seed,
        "no_adapt_accuracy": no_adapt.accuracy,
        "finetune_all_accuracy": all_eval.accuracy,
        "selective_accuracy": sel_eval.accuracy,
        "selection_precision": precision,
        "selection_precision_median_tau": precision_median,
        "n_selected": len(chosen),
        "rewards": [(r.batch_id, r.reward) for r in sel_out.rewards],
        "matched_batch_ids": sorted(matched_ids),
        "selected_batch_ids": sorted(chosen),
    }


def save_report(report: EvalReport, json_path: str | Path, csv_path: str | Path | None = None):
    Path(json_path).write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True))
    if csv_path is not None:
        lines = ["truth\\pred," + ",".join(STAGES)]
        for ci, stage in enumerate(STAGES):
            lines.append(stage + "," + ",".join(str(v) for v in report.confusion[ci]))
        Path(csv_path).write_text("\n".join(lines) + "\n")
