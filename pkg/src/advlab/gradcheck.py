"""Finite-difference verification of every gradient path.

Each randomized case builds a small model and batch, computes the reverse-mode
gradient and a central-difference oracle over the flattened parameters (or the
inputs), and reports the worst relative error. Cases are resampled when any
relu pre-activation or logit spread sits within the guard margin of a
non-differentiable point, since finite differences are meaningless across a
kink.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .attack import AttackConfig, generate_batch
from .autodiff import ce_rows_value, finite_diff_grad, row_std_value
from .data import Batch
from .errors import ConfigError
from .netcore import (
    ModelSpec,
    ModelState,
    finite_diff_param_grad,
    forward_logits,
    grad_input,
    grad_params,
    init_model,
)
from .objective import ce_mean_graph, grad_certainty_frozen, robust_loss_graph, ObjectiveKind

KINK_MARGIN = 1e-3
DEFAULT_TOLERANCE = 1e-4


@dataclass(frozen=True)
class GradCheckResult:
    name: str
    cases: int
    max_rel_err: float

    def ok(self, tolerance=DEFAULT_TOLERANCE) -> bool:
        return self.max_rel_err < tolerance


def rel_err(approx, exact) -> float:
    """Worst component error scaled by the oracle's largest magnitude."""
    approx = np.asarray(approx, dtype=np.float64)
    exact = np.asarray(exact, dtype=np.float64)
    denom = max(float(np.abs(exact).max(initial=0.0)), 1e-6)
    return float(np.abs(approx - exact).max(initial=0.0)) / denom


def _pre_activations(model: ModelState, x):
    """Hidden-layer pre-activation values, used to veto kink-adjacent cases."""
    z = np.atleast_2d(np.asarray(x, dtype=np.float64))
    out = []
    last = len(model.spec.layer_widths) - 1
    for i in range(last):
        z = z @ model.params[f"w{i}"] + model.params[f"b{i}"]
        out.append(z)
        z = np.maximum(z, 0.0) if model.spec.activation == "relu" else np.tanh(z)
    return out


def _clear_of_kinks(model: ModelState, x) -> bool:
    if model.spec.activation == "relu":
        for pre in _pre_activations(model, x):
            if np.abs(pre).min(initial=np.inf) < KINK_MARGIN:
                return False
    spread = row_std_value(np.atleast_2d(forward_logits(model, x)))
    return spread.min(initial=np.inf) >= KINK_MARGIN


def _random_case(rng, max_tries=50):
    """A small random model and batch, clear of relu kinks and zero spread."""
    for _ in range(max_tries):
        n = int(rng.integers(2, 6))
        hidden = tuple(int(rng.integers(2, 7)) for _ in range(int(rng.integers(1, 3))))
        k = int(rng.integers(2, 5))
        activation = "relu" if rng.random() < 0.5 else "tanh"
        spec = ModelSpec(n, hidden + (k,), activation, int(rng.integers(0, 2**31)))
        model = init_model(spec)
        b = int(rng.integers(1, 5))
        x = rng.normal(0.0, 1.5, size=(b, n))
        y = rng.integers(0, k, size=b)
        if _clear_of_kinks(model, x):
            return model, Batch(x, np.asarray(y, dtype=np.int64))
    raise RuntimeError("could not sample a kink-free gradient-check case")


def _ce_loss_of_params(spec, batch):
    def loss(params):
        logits = forward_logits(ModelState(spec, params), batch.inputs)
        return float(ce_rows_value(logits, batch.labels).mean())
    return loss


def check_grad_params(cases=100, h=1e-5, seed=0, fault=0.0) -> GradCheckResult:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(cases):
        model, batch = _random_case(rng)
        g = grad_params(lambda dm, b: ce_mean_graph(dm, b.inputs, b.labels), model, batch)
        fd = finite_diff_param_grad(_ce_loss_of_params(model.spec, batch), model.params, h)
        worst = max(worst, rel_err(g.flatten() + fault, fd.flatten()))
    return GradCheckResult("grad_params", cases, worst)


def check_grad_params_trades(cases=25, h=1e-5, seed=1, fault=0.0) -> GradCheckResult:
    rng = np.random.default_rng(seed)
    objective = ObjectiveKind("trades", trades_beta=2.0)
    worst = 0.0
    for _ in range(cases):
        model, batch = _random_case(rng)
        perturbed = batch.inputs + rng.normal(0.0, 0.05, size=batch.inputs.shape)
        if not _clear_of_kinks(model, perturbed):
            continue
        adv = _FrozenAdv(batch.inputs, perturbed, batch.labels)
        g = grad_params(lambda dm, a: robust_loss_graph(dm, a, objective), model, adv)

        def loss(params, adv=adv):
            from .objective import robust_loss
            return robust_loss(ModelState(model.spec, params), adv, objective)

        fd = finite_diff_param_grad(loss, model.params, h)
        worst = max(worst, rel_err(g.flatten() + fault, fd.flatten()))
    return GradCheckResult("grad_params_trades", cases, worst)


class _FrozenAdv:
    """Pre-perturbed stand-in for an attack batch (no feasibility coupling)."""

    def __init__(self, originals, perturbed, labels):
        self.originals = np.asarray(originals, dtype=np.float64)
        self.perturbed = np.asarray(perturbed, dtype=np.float64)
        self.labels = np.asarray(labels, dtype=np.int64)


def check_grad_input(cases=100, h=1e-5, seed=2, fault=0.0) -> GradCheckResult:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(cases):
        model, batch = _random_case(rng)
        x, y = batch.inputs[0], int(batch.labels[0])

        def loss_graph(dm, xv, yy):
            return ce_mean_graph(dm, xv, np.array([yy]))

        g = grad_input(loss_graph, model, x, y)

        def loss_of_x(xx):
            return float(ce_rows_value(forward_logits(model, xx[None, :]), np.array([y]))[0])

        fd = finite_diff_grad(loss_of_x, x, h)
        worst = max(worst, rel_err(g + fault, fd))
    return GradCheckResult("grad_input", cases, worst)


def check_grad_certainty(cases=100, h=1e-5, seed=3, fault=0.0,
                         attack: AttackConfig | None = None) -> GradCheckResult:
    """Certainty gradient with the attack outputs frozen as constants."""
    rng = np.random.default_rng(seed)
    attack = attack or AttackConfig(norm="linf", epsilon=0.05, step_size=0.02, steps=3)
    worst = 0.0
    done = 0
    while done < cases:
        model, batch = _random_case(rng)
        adv = generate_batch(model, batch, attack, rng=rng)
        frozen = adv.perturbed.copy()
        if not _clear_of_kinks(model, frozen):
            continue
        g = grad_certainty_frozen(model, frozen)

        def loss(params):
            logits = forward_logits(ModelState(model.spec, params), frozen)
            return float(row_std_value(logits).mean())

        fd = finite_diff_param_grad(loss, model.params, h)
        worst = max(worst, rel_err(g.flatten() + fault, fd.flatten()))
        done += 1
    return GradCheckResult("grad_certainty_frozen", cases, worst)


def run_all(cases=100, h=1e-5, fault=0.0, attack=None):
    """The full gradient gate; ``fault`` perturbs the reverse-mode side to
    exercise the failure path."""
    if not h > 0:
        raise ConfigError(f"finite-difference step must be positive, got {h}")
    return [
        check_grad_params(cases=cases, h=h, fault=fault),
        check_grad_params_trades(cases=max(5, cases // 4), h=h, fault=fault),
        check_grad_input(cases=cases, h=h, fault=fault),
        check_grad_certainty(cases=cases, h=h, fault=fault, attack=attack),
    ]
