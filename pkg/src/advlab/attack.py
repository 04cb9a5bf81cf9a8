"""Norm-bounded adversarial example generation: ball projection, FGSM and
iterated projected gradient ascent for linf and l2 threat models.

The iterate keeps the perturbation delta as its state: each step adds a
signed (linf) or normalised (l2) gradient step, projects delta back into the
epsilon ball, and the candidate input is ``clamp(x + delta)``. Originals are
assumed to lie inside the domain box, so the final output satisfies both the
ball and the box constraints.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import autodiff
from .autodiff import Var, as_f64, backward
from .data import Batch
from .errors import ConfigError, NumericError, ShapeError
from .netcore import DiffModel, ModelState, _as_rows

NORMS = ("linf", "l2")
KINDS = ("pgd", "fgsm")


@dataclass(frozen=True)
class AttackConfig:
    """Threat-model descriptor: norm, radius, step size, iteration count."""

    norm: str = "linf"
    epsilon: float = 0.0
    step_size: float = 1.0
    steps: int = 0
    kind: str = "pgd"
    random_start: bool = False
    domain_clamp: Optional[tuple] = None

    def __post_init__(self):
        if self.norm not in NORMS:
            raise ConfigError(f"norm must be one of {NORMS}, got {self.norm!r}")
        if self.kind not in KINDS:
            raise ConfigError(f"attack kind must be one of {KINDS}, got {self.kind!r}")
        if self.epsilon < 0:
            raise ConfigError(f"epsilon must be non-negative, got {self.epsilon}")
        if self.steps < 0:
            raise ConfigError(f"steps must be non-negative, got {self.steps}")
        if self.steps > 0 and not self.step_size > 0:
            raise ConfigError(f"step_size must be positive when steps > 0, got {self.step_size}")
        if self.kind == "fgsm" and self.norm != "linf":
            raise ConfigError("fgsm is defined for the linf norm only")
        if self.domain_clamp is not None:
            lo, hi = self.domain_clamp
            if not lo < hi:
                raise ConfigError(f"domain_clamp must satisfy lo < hi, got {self.domain_clamp}")


def perturbation_norm(perturbed, originals, norm):
    """Distance between rows under the configured metric."""
    delta = as_f64(perturbed) - as_f64(originals)
    if delta.ndim == 1:
        delta = delta[None, :]
    if norm == "linf":
        return np.abs(delta).max(axis=-1)
    return np.sqrt((delta * delta).sum(axis=-1))


def _clamp(x, config: AttackConfig):
    if config.domain_clamp is None:
        return x
    lo, hi = config.domain_clamp
    return np.clip(x, lo, hi)


def _project_delta(delta, config: AttackConfig):
    if config.norm == "linf":
        return np.clip(delta, -config.epsilon, config.epsilon)
    norms = np.sqrt((delta * delta).sum(axis=-1, keepdims=True))
    factor = np.ones_like(norms)
    over = norms > config.epsilon
    np.divide(config.epsilon, norms, out=factor, where=over)
    return delta * factor


def project_ball(x_prime, center, config: AttackConfig):
    """Project a candidate back into the epsilon ball, then the domain box."""
    x_prime = as_f64(x_prime)
    center = as_f64(center)
    if x_prime.shape != center.shape:
        raise ShapeError(f"shape mismatch: {x_prime.shape} vs {center.shape}")
    single = x_prime.ndim == 1
    xp = x_prime[None, :] if single else x_prime
    c = center[None, :] if single else center
    out = _clamp(c + _project_delta(xp - c, config), config)
    return out[0] if single else out


def _ce_grad_x(model: ModelState, rows, labels):
    """Gradient of the summed cross-entropy with respect to each input row."""
    dm = DiffModel(model, track_params=False)
    xv = Var(rows)
    loss = autodiff.sum_all(autodiff.neg(autodiff.pick(autodiff.log_softmax(dm.logits(xv)), labels)))
    backward(loss)
    g = np.zeros_like(rows) if xv.grad is None else xv.grad
    if not np.isfinite(g).all():
        raise NumericError("non-finite input gradient during attack")
    return g


def _random_in_ball(rng, shape, config: AttackConfig):
    if config.norm == "linf":
        return rng.uniform(-config.epsilon, config.epsilon, size=shape)
    direction = rng.standard_normal(shape)
    norms = np.sqrt((direction * direction).sum(axis=-1, keepdims=True))
    norms[norms == 0.0] = 1.0
    radius = config.epsilon * rng.random(shape[0]) ** (1.0 / shape[1])
    return direction / norms * radius[:, None]


def _resolve_rng(config: AttackConfig, rng):
    if not config.random_start:
        return None
    if rng is None:
        raise ConfigError("random_start requires an rng or integer seed")
    return rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)


def pgd(model: ModelState, x, y, config: AttackConfig, rng=None):
    """Iterated signed-gradient ascent on the cross-entropy, ball-projected.

    linf steps move by step_size * sign(grad) with sign(0) = 0; l2 steps move
    by step_size along the row-normalised gradient (zero rows stay put). With
    ``random_start`` the iterate begins at a uniform in-ball offset drawn from
    ``rng``. Returns the final candidate ``clamp(x + delta)``.
    """
    rows, single = _as_rows(x, model.spec.input_dim)
    labels = np.atleast_1d(np.asarray(y, dtype=np.int64))
    if labels.shape[0] != rows.shape[0]:
        raise ShapeError(f"{rows.shape[0]} inputs but {labels.shape[0]} labels")
    gen = _resolve_rng(config, rng)
    delta = np.zeros_like(rows)
    if gen is not None:
        delta = _project_delta(_random_in_ball(gen, rows.shape, config), config)
    for _ in range(config.steps):
        current = _clamp(rows + delta, config)
        grad = _ce_grad_x(model, current, labels)
        if config.norm == "linf":
            step = config.step_size * np.sign(grad)
        else:
            norms = np.sqrt((grad * grad).sum(axis=-1, keepdims=True))
            unit = np.zeros_like(grad)
            np.divide(grad, norms, out=unit, where=norms > 0.0)
            step = config.step_size * unit
        delta = _project_delta(delta + step, config)
    out = _clamp(rows + delta, config)
    return out[0] if single else out


def fgsm(model: ModelState, x, y, config: AttackConfig):
    """Single signed-gradient step of size epsilon, then domain clamping."""
    if config.norm != "linf":
        raise ConfigError("fgsm is defined for the linf norm only")
    rows, single = _as_rows(x, model.spec.input_dim)
    labels = np.atleast_1d(np.asarray(y, dtype=np.int64))
    grad = _ce_grad_x(model, rows, labels)
    out = _clamp(rows + config.epsilon * np.sign(grad), config)
    return out[0] if single else out


@dataclass(frozen=True)
class AdversarialBatch:
    originals: np.ndarray
    perturbed: np.ndarray
    labels: np.ndarray
    config: AttackConfig

    def __post_init__(self):
        object.__setattr__(self, "originals", as_f64(self.originals))
        object.__setattr__(self, "perturbed", as_f64(self.perturbed))
        object.__setattr__(self, "labels", np.asarray(self.labels, dtype=np.int64))
        if self.originals.shape != self.perturbed.shape:
            raise ShapeError("originals and perturbed must have identical shapes")
        if self.originals.shape[0] != self.labels.shape[0]:
            raise ShapeError("labels must align with the batch")
        if not np.isfinite(self.perturbed).all():
            raise NumericError("adversarial batch contains non-finite values")
        dist = perturbation_norm(self.perturbed, self.originals, self.config.norm)
        if dist.size and dist.max() > self.config.epsilon + 1e-9:
            raise NumericError(
                f"perturbation norm {dist.max():.3e} exceeds epsilon {self.config.epsilon}"
            )
        if self.config.domain_clamp is not None:
            lo, hi = self.config.domain_clamp
            if self.perturbed.min() < lo or self.perturbed.max() > hi:
                raise NumericError("adversarial batch leaves the domain box")

    def __len__(self):
        return self.originals.shape[0]


def generate_batch(model: ModelState, batch: Batch, config: AttackConfig,
                   rng=None) -> AdversarialBatch:
    """Attack every example of a batch at once (rows are independent)."""
    if len(batch) == 0:
        raise ShapeError("cannot attack an empty batch")
    if config.kind == "fgsm":
        perturbed = fgsm(model, batch.inputs, batch.labels, config)
    else:
        perturbed = pgd(model, batch.inputs, batch.labels, config, rng=rng)
    return AdversarialBatch(batch.inputs, perturbed, batch.labels, config)
