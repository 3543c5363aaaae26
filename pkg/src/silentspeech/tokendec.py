"""Token decoder lifecycle: pretrain, few-shot fine-tune, distill, evaluate.

Also streaming classification, input-gradient saliency over token positions
and a PCA projection of penultimate features.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import sigcore
from .errors import ConfigError, EmptyInput, InsufficientData, ShapeError
from .synthdata import TokenDataset
from .tinynet import (
    AdamState,
    ArchConfig,
    DistillConfig,
    Model,
    TrainConfig,
    build_model,
    count_flops,
    features,
    forward,
    input_gradient,
    minibatches,
    train_step,
)
from .errors import DivergenceError

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# inference helpers


def predict_logits(model: Model, x: np.ndarray, batch_size: int = 256) -> np.ndarray:
    x = np.asarray(x)
    if x.ndim != 2 or x.shape[1] != model.config.input_len:
        raise ShapeError(f"inputs {x.shape} do not match input_len {model.config.input_len}")
    out = [forward(model, x[i : i + batch_size]) for i in range(0, len(x), batch_size)]
    if not out:
        return np.zeros((0, model.config.classes), dtype=model.dtype)
    return np.concatenate(out)


def predict(model: Model, x: np.ndarray, batch_size: int = 256) -> np.ndarray:
    return np.argmax(predict_logits(model, x, batch_size), axis=1)


def accuracy(model: Model, ds: TokenDataset) -> float:
    if len(ds) == 0:
        return float("nan")
    return float(np.mean(predict(model, ds.x) == ds.y))


# ---------------------------------------------------------------------------
# training


@dataclass
class EpochLog:
    epoch: int
    train_loss: float
    val_accuracy: float


@dataclass
class TrainResult:
    model: Model
    history: list[EpochLog] = field(default_factory=list)
    best_epoch: int = -1
    val_accuracy: float = float("nan")


def split_by_group(ds: TokenDataset, val_fraction: float = 0.1, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Seeded utterance-level split so no utterance straddles train and validation."""
    groups = ds.group_ids()
    unique = np.unique(groups)
    rng = np.random.default_rng([seed, 17])
    perm = rng.permutation(unique)
    n_val = max(1, int(round(val_fraction * len(unique)))) if len(unique) > 1 else 0
    val_groups = perm[:n_val]
    is_val = np.isin(groups, val_groups)
    return np.flatnonzero(~is_val), np.flatnonzero(is_val)


def fit(
    model: Model,
    x: np.ndarray,
    y: np.ndarray,
    cfg: TrainConfig,
    val: tuple[np.ndarray, np.ndarray] | None = None,
    teacher_logits: np.ndarray | None = None,
    name: str = "model",
) -> TrainResult:
    """Minibatch Adam training; keeps the best-validation parameters
    (the final ones when no validation set is given).

    Mutates ``model``; the returned result holds a copy of the best one.
    """
    cfg.validate()
    rng = np.random.default_rng([cfg.seed, 23])
    state = AdamState()
    result = TrainResult(model.copy())
    best = -1.0
    total_steps = cfg.epochs * -(-len(y) // cfg.batch_size)
    step = 0
    for epoch in range(cfg.epochs):
        losses = []
        for idx in minibatches(len(y), cfg.batch_size, rng):
            t_logits = teacher_logits[idx] if teacher_logits is not None else None
            step_cfg = cfg if cfg.schedule == "constant" else cfg.with_(lr=cfg.lr_at(step, total_steps))
            step += 1
            try:
                loss, state = train_step(model, x[idx], y[idx], step_cfg, state, t_logits)
            except DivergenceError as exc:
                raise DivergenceError(f"{name}: diverged in epoch {epoch}: {exc}", epoch=epoch, step=exc.step) from exc
            losses.append(loss)
        train_loss = float(np.mean(losses)) if losses else float("nan")
        val_acc = float(np.mean(predict(model, val[0]) == val[1])) if val is not None and len(val[1]) else float("nan")
        result.history.append(EpochLog(epoch, train_loss, val_acc))
        log.info("%s epoch %d: loss %.4f, val acc %.4f", name, epoch, train_loss, val_acc)
        if val is None or not len(val[1]):
            continue
        if val_acc > best:
            best = val_acc
            result.model = model.copy()
            result.best_epoch = epoch
            result.val_accuracy = val_acc
    if val is None or not len(val[1]):
        result.model = model.copy()
        result.best_epoch = cfg.epochs - 1
    return result


def pretrain(healthy_ds: TokenDataset, arch: ArchConfig, train: TrainConfig) -> TrainResult:
    """Train from random init on healthy speech with a 90/10 utterance split."""
    if len(healthy_ds) == 0:
        raise EmptyInput("healthy dataset is empty")
    _check_arch(arch, healthy_ds)
    tr, va = split_by_group(healthy_ds, 0.1, train.seed)
    model = build_model(arch, train.seed)
    return fit(
        model,
        healthy_ds.x[tr],
        healthy_ds.y[tr],
        train,
        (healthy_ds.x[va], healthy_ds.y[va]),
        name=f"pretrain[{arch.role}]",
    )


def _check_arch(arch: ArchConfig, ds: TokenDataset) -> None:
    if arch.input_len != ds.input_len:
        raise ConfigError(f"architecture input_len {arch.input_len} != dataset {ds.input_len}")
    if arch.classes != ds.class_count:
        raise ConfigError(f"architecture has {arch.classes} classes, dataset {ds.class_count}")


def subsample_reps(ds: TokenDataset, reps_per_word: int, seed: int = 0) -> TokenDataset:
    """Keep ``reps_per_word`` utterances of every word (seeded choice)."""
    if ds.groups is None or not ds.group_words:
        raise InsufficientData("dataset carries no utterance groups to subsample")
    by_word: dict[int, list[int]] = {}
    for g, w in sorted(ds.group_words.items()):
        by_word.setdefault(w, []).append(g)
    rng = np.random.default_rng([seed, 29])
    keep = []
    for w in range(1, ds.class_count):
        groups = by_word.get(w, [])
        if len(groups) < reps_per_word:
            raise InsufficientData(
                f"word {w} has {len(groups)} utterances, {reps_per_word} requested", key=w
            )
        keep.extend(rng.choice(groups, size=reps_per_word, replace=False).tolist())
    return ds.subset(np.flatnonzero(np.isin(ds.groups, keep)))


def finetune(base: Model, patient_ds: TokenDataset, reps_per_word: int, train: TrainConfig) -> TrainResult:
    """Few-shot adaptation of every layer at a tenth of the pretraining rate.

    ``reps_per_word == 0`` is zero-shot: the base model comes back unchanged.
    """
    if reps_per_word == 0:
        return TrainResult(base.copy())
    few = subsample_reps(patient_ds, reps_per_word, train.seed)
    tr, va = split_by_group(few, 0.1, train.seed)
    return fit(
        base.copy(),
        few.x[tr],
        few.y[tr],
        train.with_(lr=train.lr / 10),
        (few.x[va], few.y[va]),
        name=f"finetune[{reps_per_word}]",
    )


def train_scratch(patient_ds: TokenDataset, reps_per_word: int, arch: ArchConfig, train: TrainConfig) -> TrainResult:
    """Baseline trained from random init on the same few-shot patient data."""
    few = subsample_reps(patient_ds, reps_per_word, train.seed)
    tr, va = split_by_group(few, 0.1, train.seed)
    return fit(
        build_model(arch, train.seed),
        few.x[tr],
        few.y[tr],
        train,
        (few.x[va], few.y[va]),
        name=f"scratch[{reps_per_word}]",
    )


@dataclass
class DistillResult:
    student: Model
    teacher_accuracy: float
    student_accuracy: float
    flops_ratio: float
    history: list[EpochLog] = field(default_factory=list)


def distill(
    teacher: Model,
    student_arch: ArchConfig,
    ds: TokenDataset,
    train: TrainConfig,
    eval_ds: TokenDataset | None = None,
    init: Model | None = None,
) -> DistillResult:
    """Train a student on the teacher's softened outputs plus the hard labels.

    ``init`` continues from an existing student (for a second, patient-only
    stage after distilling on healthy data).
    """
    if teacher.config.classes != student_arch.classes:
        raise ConfigError(
            f"teacher has {teacher.config.classes} classes, student {student_arch.classes}"
        )
    _check_arch(teacher.config, ds)
    _check_arch(student_arch, ds)
    if train.distill is None:
        train = train.with_(distill=DistillConfig())
    tr, va = split_by_group(ds, 0.1, train.seed)
    teacher_logits = predict_logits(teacher, ds.x[tr])
    if init is not None and init.config != student_arch:
        raise ConfigError("init model does not match the student architecture")
    result = fit(
        init.copy() if init is not None else build_model(student_arch, train.seed),
        ds.x[tr],
        ds.y[tr],
        train,
        (ds.x[va], ds.y[va]),
        teacher_logits=teacher_logits,
        name="distill",
    )
    target = eval_ds if eval_ds is not None else ds.subset(va)
    return DistillResult(
        student=result.model,
        teacher_accuracy=accuracy(teacher, target),
        student_accuracy=accuracy(result.model, target),
        flops_ratio=count_flops(student_arch) / count_flops(teacher.config),
        history=result.history,
    )


# ---------------------------------------------------------------------------
# evaluation


@dataclass
class EvalReport:
    token_accuracy: float
    confusion: np.ndarray  # rows = true class, cols = predicted
    per_class_recall: np.ndarray
    blank_boundary_error_fraction: float

    @property
    def total(self) -> int:
        return int(self.confusion.sum())

    @property
    def errors(self) -> int:
        return self.total - int(np.trace(self.confusion))


def report_from_predictions(y_true: np.ndarray, y_pred: np.ndarray, classes: int) -> EvalReport:
    y_true = np.asarray(y_true, dtype=np.int64)
    y_pred = np.asarray(y_pred, dtype=np.int64)
    conf = np.zeros((classes, classes), dtype=np.int64)
    np.add.at(conf, (y_true, y_pred), 1)
    total = conf.sum()
    support = conf.sum(axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        recall = np.where(support > 0, np.diag(conf) / support, np.nan)
    errors = total - np.trace(conf)
    blank_errors = conf[0, 1:].sum() + conf[1:, 0].sum()
    return EvalReport(
        token_accuracy=float(np.trace(conf) / total) if total else float("nan"),
        confusion=conf,
        per_class_recall=recall,
        blank_boundary_error_fraction=float(blank_errors / errors) if errors else 0.0,
    )


def evaluate(model: Model, ds: TokenDataset) -> EvalReport:
    if model.config.input_len != ds.input_len:
        raise ShapeError(f"model input_len {model.config.input_len} != dataset {ds.input_len}")
    return report_from_predictions(ds.y, predict(model, ds.x), ds.class_count)


def write_eval_csv(path, report: EvalReport) -> None:
    """Confusion matrix rows plus a summary line.

    Header: ``true_class,recall,pred_0,...,pred_{C-1}``; the last row holds
    ``summary`` with accuracy and blank-boundary error fraction.
    """
    classes = report.confusion.shape[0]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["true_class", "recall"] + [f"pred_{c}" for c in range(classes)])
        for c in range(classes):
            w.writerow([c, f"{report.per_class_recall[c]:.6f}"] + report.confusion[c].tolist())
        w.writerow(["summary", f"accuracy={report.token_accuracy:.6f}",
                    f"blank_boundary_error_fraction={report.blank_boundary_error_fraction:.6f}"])


@dataclass
class FewShotCurve:
    mode: str
    points: list[tuple[int, float]] = field(default_factory=list)

    def __post_init__(self):
        reps = [r for r, _ in self.points]
        if any(b <= a for a, b in zip(reps, reps[1:])):
            raise ValueError("repetitions must be strictly increasing")


def few_shot_curve(
    base: Model | None,
    patient_train: TokenDataset,
    patient_test: TokenDataset,
    reps_grid: Sequence[int],
    train: TrainConfig,
    mode: str = "transfer",
    arch: ArchConfig | None = None,
) -> FewShotCurve:
    points = []
    for reps in reps_grid:
        if mode == "transfer":
            model = finetune(base, patient_train, reps, train).model
        elif mode == "scratch":
            if reps == 0:
                continue
            model = train_scratch(patient_train, reps, arch or base.config, train).model
        else:
            raise ConfigError(f"unknown few-shot mode {mode!r}")
        points.append((int(reps), accuracy(model, patient_test)))
    return FewShotCurve(mode, points)


def write_curve_csv(path, curve: FewShotCurve) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["mode", "repetitions_per_word", "accuracy"])
        for reps, acc in curve.points:
            w.writerow([curve.mode, reps, f"{acc:.6f}"])


# ---------------------------------------------------------------------------
# streaming


class StreamClassifier:
    """Causal per-token classifier holding the last ``n`` tokens."""

    def __init__(self, model: Model, n: int, token_len: int):
        if n * token_len != model.config.input_len:
            raise ShapeError(
                f"n={n} x token_len={token_len} does not match model input_len {model.config.input_len}"
            )
        self.model = model
        self.n = n
        self.token_len = token_len
        self.buffer = np.zeros((n, token_len), dtype=model.dtype)
        self.inferences = 0

    def push(self, values: np.ndarray) -> int:
        values = np.asarray(values)
        if values.shape != (self.token_len,):
            raise ShapeError(f"token must have {self.token_len} samples, got {values.shape}")
        self.buffer[:-1] = self.buffer[1:]
        self.buffer[-1] = values
        self.inferences += 1
        return int(np.argmax(forward(self.model, self.buffer.reshape(1, -1))[0]))


def classify_stream(model: Model, tokens: Sequence[sigcore.Token], n: int) -> list[int]:
    if not tokens:
        return []
    clf = StreamClassifier(model, n, len(tokens[0].values))
    return [clf.push(t.values) for t in tokens]


# ---------------------------------------------------------------------------
# saliency and features


def _argmax_onehot(logits: np.ndarray) -> np.ndarray:
    g = np.zeros_like(logits)
    g[np.arange(len(logits)), np.argmax(logits, axis=1)] = 1.0
    return g


def saliency_batch(model: Model, x: np.ndarray, n: int) -> np.ndarray:
    """Per-position share of |d logit_argmax / d input|, rows sum to 1."""
    grad = input_gradient(model.astype(np.float64), np.asarray(x, dtype=np.float64), _argmax_onehot)
    mass = np.abs(grad).reshape(len(grad), n, -1).sum(axis=2)
    total = mass.sum(axis=1, keepdims=True)
    uniform = np.full_like(mass, 1.0 / n)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(total > 0, mass / total, uniform)


def saliency(model: Model, sample: sigcore.TokenSample) -> np.ndarray:
    return saliency_batch(model, sample.flat()[None, :], sample.n)[0]


@dataclass
class PCAResult:
    coords: np.ndarray  # (samples, 2)
    components: np.ndarray  # (2, feature_dim), orthonormal rows
    variances: np.ndarray  # projected variance per component
    labels: np.ndarray

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["sample_id", "label", "pc1", "pc2"])
            for i, ((a, b), lab) in enumerate(zip(self.coords, self.labels)):
                w.writerow([i, int(lab), f"{a:.9g}", f"{b:.9g}"])


def pca_features(model: Model, ds: TokenDataset, batch_size: int = 256) -> PCAResult:
    if len(ds) < 3:
        raise InsufficientData("PCA needs at least 3 samples")
    f64 = model.astype(np.float64)
    feats = np.concatenate(
        [features(f64, ds.x[i : i + batch_size].astype(np.float64)) for i in range(0, len(ds), batch_size)]
    )
    centered = feats - feats.mean(axis=0)
    cov = centered.T @ centered / (len(feats) - 1)
    vals, vecs = np.linalg.eigh(cov)
    order = np.argsort(vals)[::-1][:2]
    comps = vecs[:, order].T.copy()
    for row in comps:
        if row[np.argmax(np.abs(row))] < 0:
            row *= -1
    coords = centered @ comps.T
    return PCAResult(coords, comps, coords.var(axis=0, ddof=1), ds.y.copy())
