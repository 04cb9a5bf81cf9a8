"""Measurement instruments: accuracy under attack, predicted-label heatmaps,
label-level variance, overfitting and certainty gaps, and the extragradient
step-size sweep."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .attack import AttackConfig, generate_batch
from .autodiff import row_std_value
from .data import Batch, Dataset, slices
from .errors import CheckpointError, ConfigError, NumericError, ShapeError
from .netcore import ModelState, forward_logits, predict_label

CSV_COLUMNS = (
    "epoch", "method", "lr",
    "clean_acc_train", "clean_acc_test",
    "robust_acc_train", "robust_acc_test",
    "ac_train", "ac_test",
)


@dataclass(frozen=True)
class MetricsRecord:
    """One epoch's measurements.

    ``wall_time_s`` is kept in memory for logging but is excluded from every
    persisted artifact so that reruns with identical seeds stay byte-identical.
    """

    epoch: int
    method: str
    lr: float
    clean_acc_train: float
    clean_acc_test: float
    robust_acc_train: float
    robust_acc_test: float
    ac_train: float
    ac_test: float
    wall_time_s: float = 0.0

    def __post_init__(self):
        for field in ("clean_acc_train", "clean_acc_test", "robust_acc_train",
                      "robust_acc_test"):
            v = getattr(self, field)
            if not 0.0 <= v <= 1.0:
                raise NumericError(f"{field}={v} outside [0, 1]")
        if self.ac_train < 0.0 or self.ac_test < 0.0:
            raise NumericError("certainty values must be non-negative")

    def to_dict(self, include_wall_time=False):
        d = {name: getattr(self, name) for name in CSV_COLUMNS}
        d["wall_time_s"] = self.wall_time_s if include_wall_time else 0.0
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(
            epoch=int(d["epoch"]), method=str(d["method"]), lr=float(d["lr"]),
            clean_acc_train=float(d["clean_acc_train"]),
            clean_acc_test=float(d["clean_acc_test"]),
            robust_acc_train=float(d["robust_acc_train"]),
            robust_acc_test=float(d["robust_acc_test"]),
            ac_train=float(d["ac_train"]), ac_test=float(d["ac_test"]),
            wall_time_s=float(d.get("wall_time_s", 0.0)),
        )


@dataclass(frozen=True)
class Heatmap:
    """Predicted-class frequencies conditioned on ground truth.

    Row j holds the distribution of predicted labels for attacked inputs of
    true class j; ``counts[j]`` is that class's example count. Classes absent
    from the dataset get an all-zero row and a zero count instead of NaNs.
    """

    matrix: np.ndarray
    counts: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=np.float64)
        c = np.asarray(self.counts, dtype=np.int64)
        object.__setattr__(self, "matrix", m)
        object.__setattr__(self, "counts", c)
        if m.ndim != 2 or m.shape[0] != m.shape[1] or c.shape != (m.shape[0],):
            raise ShapeError("heatmap must be (K,K) with (K,) counts")
        if (m < 0).any() or (m > 1).any():
            raise NumericError("heatmap entries must lie in [0, 1]")
        filled = c > 0
        if filled.any():
            sums = m[filled].sum(axis=1)
            if np.abs(sums - 1.0).max() > 1e-12:
                raise NumericError("non-empty heatmap rows must sum to 1")

    @property
    def num_classes(self):
        return self.matrix.shape[0]

    @property
    def empty_classes(self):
        return tuple(int(j) for j in np.flatnonzero(self.counts == 0))


def _ensure_rng(rng):
    if rng is None or isinstance(rng, np.random.Generator):
        return rng
    return np.random.default_rng(rng)


def clean_accuracy(model: ModelState, dataset: Dataset) -> float:
    preds = predict_label(model, dataset.inputs)
    return float((preds == dataset.labels).mean())


def _attacked_stats(model: ModelState, dataset: Dataset, attack_config: AttackConfig,
                    rng=None):
    """One attack pass per example: (robust accuracy, mean certainty, preds)."""
    rng = _ensure_rng(rng)
    correct = 0
    spread_sum = 0.0
    preds_out = []
    for piece in slices(dataset):
        adv = generate_batch(model, piece, attack_config, rng=rng)
        logits = forward_logits(model, adv.perturbed)
        preds = np.argmax(logits, axis=-1)
        correct += int((preds == piece.labels).sum())
        spread_sum += float(row_std_value(logits).sum())
        preds_out.append(preds)
    n = len(dataset)
    return correct / n, spread_sum / n, np.concatenate(preds_out)


def robust_accuracy(model: ModelState, dataset: Dataset, attack_config: AttackConfig,
                    rng=None) -> float:
    """Share of examples still classified correctly at the attack's output.

    The exhaustive inner maximisation is approximated by the configured
    attack; with epsilon 0 this equals the clean accuracy exactly.
    """
    return _attacked_stats(model, dataset, attack_config, rng)[0]


def dataset_certainty(model: ModelState, dataset: Dataset, attack_config: AttackConfig,
                      rng=None) -> float:
    """Mean per-example logit spread on self-generated attacks."""
    return _attacked_stats(model, dataset, attack_config, rng)[1]


def split_metrics(model: ModelState, dataset: Dataset, attack_config: AttackConfig,
                  rng=None):
    """(clean accuracy, robust accuracy, certainty) with a single attack pass."""
    robust, spread, _ = _attacked_stats(model, dataset, attack_config, rng)
    return clean_accuracy(model, dataset), robust, spread


def compute_heatmap(model: ModelState, dataset: Dataset, attack_config: AttackConfig,
                    rng=None) -> Heatmap:
    """Exact predicted-class frequencies per ground-truth class on attacked
    inputs. Classes with no examples are flagged through a zero count."""
    k = model.spec.num_classes
    if dataset.num_classes > k:
        raise ShapeError(
            f"dataset has {dataset.num_classes} classes but model only {k}"
        )
    _, _, preds = _attacked_stats(model, dataset, attack_config, rng)
    counts = np.bincount(dataset.labels, minlength=k).astype(np.int64)
    matrix = np.zeros((k, k))
    np.add.at(matrix, (dataset.labels, preds), 1.0)
    filled = counts > 0
    matrix[filled] /= counts[filled, None]
    return Heatmap(matrix, counts)


def label_level_variance(heatmap: Heatmap) -> np.ndarray:
    """Per-class population standard deviation of the heatmap rows."""
    return row_std_value(heatmap.matrix)


def overfitting_gap(history):
    """(best, last, best - last) of held-out robust accuracy over a history."""
    if not history:
        raise ShapeError("history must not be empty")
    robust = [row.robust_acc_test for row in history]
    best = max(robust)
    last = robust[-1]
    return best, last, best - last


def certainty_gap(best, last, dataset: Dataset, attack_config: AttackConfig,
                  rng=None) -> float:
    """Certainty of the last checkpoint minus certainty of the best one."""
    if best.model.spec != last.model.spec:
        raise CheckpointError("checkpoints were trained from different model specs")
    ac_best = dataset_certainty(best.model, dataset, attack_config, rng)
    ac_last = dataset_certainty(last.model, dataset, attack_config, rng)
    return ac_last - ac_best


@dataclass(frozen=True)
class SweepRow:
    eta: float
    ac_train: float
    robust_acc_test: float
    ok: bool = True


def stepsize_sweep(checkpoint, data, etas, config) -> list:
    """Continue one extragradient epoch from a checkpoint for each step size.

    Every row restarts from the same checkpoint, trains a single epoch with
    the given certainty step size, and records the training-split certainty
    and held-out robust accuracy under the evaluation attack. Rows whose
    training blows up are kept with NaNs and ``ok=False``.
    """
    # imported here to avoid a circular dependency with train
    from .train import continue_one_epoch

    if len(etas) == 0:
        raise ConfigError("etas must not be empty")
    train_set, test_set = data
    rows = []
    for eta in etas:
        eta = float(eta)
        if eta < 0:
            raise ConfigError(f"step sizes must be non-negative, got {eta}")
        cfg = replace(config, method="edac", edac_eta=eta)
        try:
            model = continue_one_epoch(checkpoint, train_set, cfg)
            ac_train = dataset_certainty(model, train_set, cfg.eval_attack)
            racc = robust_accuracy(model, test_set, cfg.eval_attack)
            rows.append(SweepRow(eta, ac_train, racc, True))
        except (NumericError, FloatingPointError, OverflowError):
            rows.append(SweepRow(eta, float("nan"), float("nan"), False))
    return rows
