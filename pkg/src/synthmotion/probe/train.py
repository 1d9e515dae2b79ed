"""Pretraining on binned motion scores, transfer to 3-class QC, and the scratch baseline."""

from __future__ import annotations

import csv
import logging
import warnings
from dataclasses import asdict, dataclass, replace
from typing import Optional, Sequence

import numpy as np

from ..labels import BinSpec, decode_expected, encode_soft
from ..metrics import classification_report, median_report, r_squared
from .mlp import AdamW, MlpModel, TrainingError, backward, ce_loss_and_grad, forward, kl_loss_and_grad

log = logging.getLogger(__name__)

TRUNK_LAYERS = 2
N_QC_CLASSES = 3


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 2e-5
    weight_decay: float = 0.05
    scheduler_factor: float = 0.6  # 1.0 disables the plateau scheduler
    scheduler_patience: int = 5
    early_stop_patience: Optional[int] = 15  # None: run to max_epochs
    batch_size: int = 96
    max_epochs: int = 1000
    seed: int = 0
    objective: str = "kl-regression"  # or "cross-entropy-3class"
    dropout: float = 0.0
    min_delta: float = 1e-6
    class_weighted: bool = False

    def __post_init__(self):
        if self.lr < 0 or self.weight_decay < 0:
            raise ValueError("lr and weight_decay must be nonnegative")
        if self.scheduler_patience < 1 or (self.early_stop_patience is not None and self.early_stop_patience < 1):
            raise ValueError("patience must be >= 1")
        if not 0 < self.scheduler_factor <= 1:
            raise ValueError("scheduler_factor must lie in (0, 1]")
        if self.objective not in ("kl-regression", "cross-entropy-3class"):
            raise ValueError(f"unknown objective {self.objective!r}")
        if not 0 <= self.dropout < 1:
            raise ValueError("dropout must lie in [0, 1)")
        if self.batch_size < 1 or self.max_epochs < 0:
            raise ValueError("batch_size must be >= 1 and max_epochs >= 0")


# Hyperparameters reported for the full-scale runs.
PAPER_PRETRAIN = TrainConfig(lr=2e-5, weight_decay=0.05, batch_size=96)
PAPER_TRANSFER = TrainConfig(lr=5e-4, weight_decay=0.05, dropout=0.7, batch_size=12, max_epochs=50,
                             scheduler_factor=1.0, early_stop_patience=None, objective="cross-entropy-3class")
PAPER_SCRATCH = TrainConfig(lr=3e-6, weight_decay=0.06, dropout=0.68, batch_size=12, max_epochs=1000,
                            scheduler_factor=1.0, early_stop_patience=100, objective="cross-entropy-3class")
# Desk-scale pretraining: same schedule, larger step for a few hundred samples.
TOY_PRETRAIN = replace(PAPER_PRETRAIN, lr=2e-3, batch_size=32, max_epochs=400, weight_decay=0.01)
# With ~7 minority-class samples the unweighted loss lets the head ignore that class.
TOY_TRANSFER = replace(PAPER_TRANSFER, class_weighted=True)
TOY_SCRATCH = replace(PAPER_SCRATCH, class_weighted=True)


HISTORY_FIELDS = ["epoch", "train_loss", "val_loss", "val_metric", "lr"]


def _batches(n: int, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    perm = rng.permutation(n)
    out = [perm[i:i + batch_size] for i in range(0, n, batch_size)]
    # a trailing singleton cannot go through train-mode batch norm
    if len(out) > 1 and len(out[-1]) == 1:
        out[-2] = np.concatenate([out[-2], out[-1]])
        out.pop()
    return out


def fit(model: MlpModel, x_train, y_train, x_val, y_val, cfg: TrainConfig,
        bins: BinSpec | None = None, metric_name: str | None = None):
    """Train in place; return ``(best_model, history)``.

    The best model is the snapshot with the highest validation metric (R^2
    for regression, balanced accuracy for classification). The learning
    rate is multiplied by ``scheduler_factor`` after ``scheduler_patience``
    epochs without validation-loss improvement; training stops after more
    than ``early_stop_patience`` such epochs.
    """
    regression = cfg.objective == "kl-regression"
    bins = bins or BinSpec()
    x_train = np.asarray(x_train, dtype=np.float64)
    x_val = np.asarray(x_val, dtype=np.float64)
    if len(x_train) == 0 or len(x_val) == 0:
        raise ValueError("train and validation splits must be nonempty")
    if regression:
        t_train = encode_soft(np.asarray(y_train, dtype=np.float64), bins)
        t_val = encode_soft(np.asarray(y_val, dtype=np.float64), bins)
        weights = None
    else:
        y_train = np.asarray(y_train, dtype=int)
        y_val = np.asarray(y_val, dtype=int)
        counts = np.bincount(y_train, minlength=N_QC_CLASSES)
        weights = None
        if cfg.class_weighted:
            weights = np.where(counts > 0, len(y_train) / (N_QC_CLASSES * np.maximum(counts, 1)), 0.0)

    def loss_fn(probs, idx_or_targets, train=True):
        if regression:
            return kl_loss_and_grad(probs, idx_or_targets)
        return ce_loss_and_grad(probs, idx_or_targets, weights)

    def evaluate(m):
        probs, _ = forward(m, x_val, "eval")
        if regression:
            loss, _ = kl_loss_and_grad(probs, t_val)
            pred = decode_expected(probs, bins)
            try:
                metric = r_squared(y_val, pred)
            except ValueError:
                metric = float("nan")
        else:
            loss, _ = ce_loss_and_grad(probs, y_val, weights)
            metric = classification_report(y_val, probs.argmax(axis=1), N_QC_CLASSES)["balanced_accuracy"]
        return loss, metric

    rng = np.random.default_rng(cfg.seed)
    opt = AdamW(model, cfg.lr, cfg.weight_decay)
    history = []
    best_model, best_metric = model.copy(), -np.inf
    best_loss = np.inf
    sched_bad = stop_bad = 0
    for epoch in range(1, cfg.max_epochs + 1):
        losses = []
        for idx in _batches(len(x_train), cfg.batch_size, rng):
            probs, cache = forward(model, x_train[idx], "train", rng=rng)
            target = t_train[idx] if regression else y_train[idx]
            loss, dlogits = loss_fn(probs, target)
            if not np.isfinite(loss):
                raise TrainingError(f"non-finite loss at epoch {epoch}: {loss}; lr={opt.lr}, "
                                    f"max |logit|={np.abs(cache['logits']).max():.3g}")
            opt.step(backward(model, cache, dlogits))
            losses.append(loss)
        val_loss, metric = evaluate(model)
        history.append({"epoch": epoch, "train_loss": float(np.mean(losses)), "val_loss": val_loss,
                        "val_metric": metric, "lr": opt.lr})
        if metric > best_metric:
            best_metric, best_model = metric, model.copy()
        if val_loss < best_loss - cfg.min_delta:
            best_loss = val_loss
            sched_bad = stop_bad = 0
        else:
            sched_bad += 1
            stop_bad += 1
            if sched_bad >= cfg.scheduler_patience and cfg.scheduler_factor < 1:
                opt.lr *= cfg.scheduler_factor
                sched_bad = 0
        if cfg.early_stop_patience is not None and stop_bad > cfg.early_stop_patience:
            log.info("early stop at epoch %d", epoch)
            break
    best_model.meta["best_val_metric"] = float(best_metric)
    return best_model, history


def write_history(history, path, metric_name: str = "val_r2") -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "train_loss", "val_loss", metric_name, "lr"])
        for h in history:
            w.writerow([h["epoch"], repr(h["train_loss"]), repr(h["val_loss"]), repr(h["val_metric"]), repr(h["lr"])])


def _standardizer(x: np.ndarray):
    mean = x.mean(axis=0)
    scale = x.std(axis=0)
    return mean, np.where(scale > 1e-12, scale, 1.0)


def pretrain(x_train, y_train, x_val, y_val, cfg: TrainConfig = TOY_PRETRAIN, bins: BinSpec = BinSpec(),
             hidden: Sequence[int] = (64, 32), subjects_train=None, subjects_val=None):
    """Fit the motion-score network (features -> hidden -> bins); returns ``(model, history)``."""
    if subjects_train is not None and subjects_val is not None:
        leaked = set(subjects_train) & set(subjects_val)
        if leaked:
            raise ValueError(f"subjects in both train and val: {sorted(leaked)[:5]}")
    x_train = np.asarray(x_train, dtype=np.float64)
    if len(x_train) == 0 or len(x_val) == 0:
        raise ValueError("train and validation splits must be nonempty")
    model = MlpModel.build([x_train.shape[1], *hidden, bins.n_bins], seed=cfg.seed)
    model.input_mean, model.input_scale = _standardizer(x_train)
    model.meta.update({"trunk_layers": len(hidden), "bins": asdict(bins)})
    return fit(model, x_train, y_train, x_val, y_val, cfg, bins)


def predict_scores(model: MlpModel, x, bins: BinSpec = BinSpec()) -> np.ndarray:
    probs, _ = forward(model, x, "eval")
    return decode_expected(probs, bins)


def trunk_of(model: MlpModel) -> MlpModel:
    """The hidden layers of a pretrained model, emitting the last ReLU activations."""
    k = model.meta.get("trunk_layers", TRUNK_LAYERS)
    return MlpModel([l.copy() for l in model.layers[:k]], "none",
                    None if model.input_mean is None else model.input_mean.copy(),
                    None if model.input_scale is None else model.input_scale.copy(),
                    {"trunk_layers": k})


def embed(trunk: MlpModel, x) -> np.ndarray:
    out, _ = forward(trunk, x, "eval")
    return out


def build_head(n_in: int, seed: int, dropout: float, hidden: int = 32) -> MlpModel:
    """Linear -> batch norm -> ReLU (-> dropout) -> Linear -> softmax over 3 classes."""
    return MlpModel.build([n_in, hidden, N_QC_CLASSES], seed=seed, batchnorm=[True, False],
                          dropout=[dropout, 0.0])


@dataclass
class QcData:
    x_train: np.ndarray
    y_train: np.ndarray
    x_val: np.ndarray
    y_val: np.ndarray
    x_test: np.ndarray
    y_test: np.ndarray


def _check_classes(y_train):
    missing = sorted(set(range(N_QC_CLASSES)) - set(np.asarray(y_train).tolist()))
    if missing:
        warnings.warn(f"classes {missing} absent from the training split", stacklevel=3)


def transfer_train(pretrained: MlpModel, data: QcData, cfg: TrainConfig = PAPER_TRANSFER, head_seed: int | None = None):
    """Train a QC head on frozen trunk embeddings. Returns ``(head, report, history)``."""
    _check_classes(data.y_train)
    trunk = trunk_of(pretrained)
    before = trunk.param_hash()
    e_train, e_val, e_test = embed(trunk, data.x_train), embed(trunk, data.x_val), embed(trunk, data.x_test)
    head = build_head(e_train.shape[1], cfg.seed if head_seed is None else head_seed, cfg.dropout)
    head, history = fit(head, e_train, data.y_train, e_val, data.y_val, cfg)
    if trunk.param_hash() != before:
        raise TrainingError("frozen trunk was modified during transfer training")
    probs, _ = forward(head, e_test, "eval")
    report = classification_report(data.y_test, probs.argmax(axis=1), N_QC_CLASSES)
    report["trunk_hash"] = before
    return head, report, history


def scratch_train(n_features: int, data: QcData, cfg: TrainConfig = PAPER_SCRATCH, hidden: Sequence[int] = (64, 32),
                  init: MlpModel | None = None, head_seed: int | None = None):
    """Train trunk and head end to end on the QC labels. Returns ``(model, report, history)``.

    ``init`` seeds the trunk with given weights instead of a random draw.
    """
    _check_classes(data.y_train)
    if init is not None:
        trunk = trunk_of(init)
    else:
        trunk = MlpModel.build([n_features, *hidden, 1], seed=cfg.seed)
        trunk.layers = trunk.layers[:-1]
        trunk.layers[-1].activation = "relu"
        trunk.input_mean, trunk.input_scale = _standardizer(np.asarray(data.x_train, dtype=np.float64))
    for layer in trunk.layers:
        layer.dropout = cfg.dropout
    head = build_head(trunk.sizes[-1], cfg.seed if head_seed is None else head_seed, cfg.dropout)
    model = MlpModel(trunk.layers + head.layers, "softmax", trunk.input_mean, trunk.input_scale,
                     {"trunk_layers": len(trunk.layers)})
    model, history = fit(model, data.x_train, data.y_train, data.x_val, data.y_val, cfg)
    probs, _ = forward(model, data.x_test, "eval")
    return model, classification_report(data.y_test, probs.argmax(axis=1), N_QC_CLASSES), history


COMPARISON_FIELDS = ["arm", "seed", "balanced_accuracy", "f1_class0", "f1_class1", "f1_class2"]


def compare_transfer_vs_scratch(pretrained: MlpModel, data: QcData, transfer_cfg: TrainConfig = PAPER_TRANSFER,
                                scratch_cfg: TrainConfig = PAPER_SCRATCH, seeds: Sequence[int] = range(5),
                                scratch_init: str = "random") -> dict:
    """Run both arms once per seed on identical data and summarize test metrics."""
    rows = []
    runs = {"transfer": [], "scratch": []}
    n_features = pretrained.layers[0].weight.shape[0]
    for seed in seeds:
        _, rep_t, _ = transfer_train(pretrained, data, replace(transfer_cfg, seed=seed), head_seed=seed)
        init = pretrained if scratch_init == "pretrained" else None
        _, rep_s, _ = scratch_train(n_features, data, replace(scratch_cfg, seed=seed), init=init, head_seed=seed)
        for arm, rep in (("transfer", rep_t), ("scratch", rep_s)):
            runs[arm].append(rep)
            rows.append({"arm": arm, "seed": seed, **rep})
    medians = {arm: median_report(reps) for arm, reps in runs.items()}
    return {"runs": rows, "median": medians}


def write_comparison_csv(report: dict, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(COMPARISON_FIELDS)
        for arm in ("transfer", "scratch"):
            for r in (r for r in report["runs"] if r["arm"] == arm):
                w.writerow([arm, r["seed"], repr(r["balanced_accuracy"]), *(repr(f) for f in r["f1"])])
        for arm in ("transfer", "scratch"):
            med = report["median"][arm]
            w.writerow([arm, "median", repr(med["balanced_accuracy"]), *(repr(f) for f in med["f1"])])
