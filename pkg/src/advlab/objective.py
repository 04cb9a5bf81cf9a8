"""Training losses and the certainty functional over self-generated attacks.

The certainty of a single prediction is the population standard deviation of
its logit vector; averaging it over adversarial examples that the model
generates against itself gives the batch certainty score. Its parameter
gradient treats the generated examples as constants (the attack itself is
never differentiated through).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff
from .autodiff import (
    as_f64,
    backward,
    ce_rows_value,
    kl_rows_value,
    log_softmax_rows,
    row_std_value,
)
from .attack import AdversarialBatch, AttackConfig, generate_batch
from .data import Batch
from .errors import ConfigError, ShapeError
from .netcore import DiffModel, ModelState, ParamVector, forward_logits

OBJECTIVE_KINDS = ("at_ce", "trades")


@dataclass(frozen=True)
class ObjectiveKind:
    kind: str = "at_ce"
    trades_beta: float = 6.0

    def __post_init__(self):
        if self.kind not in OBJECTIVE_KINDS:
            raise ConfigError(f"objective must be one of {OBJECTIVE_KINDS}, got {self.kind!r}")
        if not np.isfinite(self.trades_beta) or self.trades_beta <= 0:
            raise ConfigError(f"trades_beta must be finite and positive, got {self.trades_beta}")


@dataclass(frozen=True)
class CertaintyReport:
    """Per-example logit-spread values, their mean, and per-class means."""

    per_example: np.ndarray
    mean: float
    per_class_mean: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "per_example", as_f64(self.per_example))
        object.__setattr__(self, "per_class_mean", as_f64(self.per_class_mean))


def var_functional(u) -> float:
    """Population standard deviation of a logit vector (includes the root)."""
    u = as_f64(u)
    if u.ndim != 1 or u.size < 1:
        raise ShapeError(f"var_functional expects a non-empty vector, got shape {u.shape}")
    return float(row_std_value(u[None, :])[0])


def cross_entropy(logits, y) -> float:
    """Negative log softmax probability of class ``y``, max-stabilised."""
    logits = as_f64(logits)
    if logits.ndim != 1 or logits.size < 1:
        raise ShapeError(f"cross_entropy expects a logit vector, got shape {logits.shape}")
    y = int(y)
    if not 0 <= y < logits.size:
        raise IndexError(f"class index {y} out of range for {logits.size} classes")
    return float(ce_rows_value(logits[None, :], np.array([y]))[0])


def trades_loss(model: ModelState, clean_batch: Batch, adv_inputs, beta) -> float:
    """Mean clean cross-entropy plus beta times the mean clean-to-adversarial
    KL divergence of the softmax outputs."""
    adv_inputs = as_f64(adv_inputs)
    if adv_inputs.shape != clean_batch.inputs.shape:
        raise ShapeError("clean and adversarial inputs must align")
    clean_logits = forward_logits(model, clean_batch.inputs)
    ce = ce_rows_value(clean_logits, clean_batch.labels).mean()
    if beta == 0.0:
        return float(ce)
    adv_logits = forward_logits(model, adv_inputs)
    return float(ce + beta * kl_rows_value(clean_logits, adv_logits).mean())


def robust_loss(model: ModelState, adv_batch: AdversarialBatch,
                objective: ObjectiveKind) -> float:
    """Surrogate loss on attack outputs: mean CE, or the TRADES combination."""
    if objective.kind == "at_ce":
        logits = forward_logits(model, adv_batch.perturbed)
        return float(ce_rows_value(logits, adv_batch.labels).mean())
    clean = Batch(adv_batch.originals, adv_batch.labels)
    return trades_loss(model, clean, adv_batch.perturbed, objective.trades_beta)


# ---------------------------------------------------------------------------
# graph builders shared with the training updates


def ce_mean_graph(dm: DiffModel, inputs, labels):
    rows = autodiff.neg(autodiff.pick(autodiff.log_softmax(dm.logits(inputs)), labels))
    return autodiff.mean_all(rows)


def kl_mean_graph(dm: DiffModel, clean_inputs, adv_inputs):
    lp = autodiff.log_softmax(dm.logits(clean_inputs))
    lq = autodiff.log_softmax(dm.logits(adv_inputs))
    rows = autodiff.row_sum(autodiff.mul(autodiff.exp(lp), autodiff.sub(lp, lq)))
    return autodiff.mean_all(rows)


def robust_loss_graph(dm: DiffModel, adv_batch: AdversarialBatch,
                      objective: ObjectiveKind):
    if objective.kind == "at_ce":
        return ce_mean_graph(dm, adv_batch.perturbed, adv_batch.labels)
    ce = ce_mean_graph(dm, adv_batch.originals, adv_batch.labels)
    kl = kl_mean_graph(dm, adv_batch.originals, adv_batch.perturbed)
    return autodiff.add(ce, autodiff.scale(kl, objective.trades_beta))


def certainty_graph(dm: DiffModel, adv_inputs):
    return autodiff.mean_all(autodiff.row_std(dm.logits(adv_inputs)))


# ---------------------------------------------------------------------------


def certainty_report(model: ModelState, adv_batch: AdversarialBatch,
                     num_classes=None) -> CertaintyReport:
    """Certainty statistics for already-generated adversarial examples."""
    k = num_classes if num_classes is not None else model.spec.num_classes
    logits = forward_logits(model, adv_batch.perturbed)
    per_example = row_std_value(logits)
    per_class = np.zeros(k)
    for c in range(k):
        mask = adv_batch.labels == c
        if mask.any():
            per_class[c] = per_example[mask].mean()
    return CertaintyReport(per_example, float(per_example.mean()), per_class)


def adversarial_certainty(model: ModelState, batch: Batch, attack_config: AttackConfig,
                          rng=None) -> CertaintyReport:
    """Generate attacks against the current model and score their certainty.

    Per-class means are keyed by ground-truth label; classes absent from the
    batch report 0.
    """
    adv = generate_batch(model, batch, attack_config, rng=rng)
    return certainty_report(model, adv)


def grad_adversarial_certainty(model: ModelState, batch: Batch,
                               attack_config: AttackConfig, rng=None) -> ParamVector:
    """Parameter gradient of the mean certainty with attacks held frozen.

    The adversarial examples are generated once at the current parameters and
    then treated as constants, so this is a plain first-order gradient.
    """
    adv = generate_batch(model, batch, attack_config, rng=rng)
    return grad_certainty_frozen(model, adv.perturbed)


def grad_certainty_frozen(model: ModelState, adv_inputs) -> ParamVector:
    dm = DiffModel(model)
    out = certainty_graph(dm, as_f64(adv_inputs))
    backward(out)
    return dm.param_grads(model.params)


def certainty_value(model: ModelState, adv_inputs) -> float:
    """Mean logit spread on fixed inputs (no attack regeneration)."""
    return float(row_std_value(forward_logits(model, as_f64(adv_inputs))).mean())


__all__ = [
    "ObjectiveKind",
    "CertaintyReport",
    "var_functional",
    "cross_entropy",
    "trades_loss",
    "robust_loss",
    "adversarial_certainty",
    "grad_adversarial_certainty",
    "grad_certainty_frozen",
    "certainty_report",
    "certainty_value",
    "certainty_graph",
    "robust_loss_graph",
    "ce_mean_graph",
    "kl_mean_graph",
    "log_softmax_rows",
]
