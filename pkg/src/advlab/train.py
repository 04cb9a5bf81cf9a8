"""Optimizers and training loops.

Three per-batch update rules share one SGD core:

* ``at_update``: attack the batch at the current weights, take one momentum
  SGD step on the surrogate loss over the attacked inputs.
* ``edac_update``: first take a plain (momentum-free) descent step on the
  batch certainty with the attacks held frozen, regenerate the attacks at the
  half-step weights, then take the usual robustness step from there. The
  momentum buffer only ever sees the robustness gradient.
* ``edac_reg_update``: a single step on ``robust loss + lambda * certainty``
  with one shared frozen attack batch.

With a zero certainty step size (or zero lambda) the two variants execute the
identical code path as ``at_update``, so their trajectories match bitwise.

All randomness is derived statelessly from (config.seed, step index, stream
tag), which makes checkpoint resumption reproduce an uninterrupted run
bit for bit.
"""

from __future__ import annotations

import json
import logging
import struct
import time
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .attack import AttackConfig, generate_batch
from .data import Batch, Dataset, batches
from .diagnostics import MetricsRecord, split_metrics
from .errors import (
    AdvlabError,
    CheckpointError,
    ConfigError,
    NumericError,
    ShapeError,
    TrainingAborted,
)
from .netcore import DiffModel, ModelSpec, ModelState, ParamVector, init_model
from .autodiff import backward
from .objective import (
    ObjectiveKind,
    certainty_graph,
    certainty_value,
    grad_certainty_frozen,
    robust_loss_graph,
)
from . import autodiff

log = logging.getLogger(__name__)

METHODS = ("at", "edac", "edac_reg")

# stream tags for stateless seed derivation
STREAM_AC = 0
STREAM_ROB = 1
STREAM_EVAL = 2
STREAM_SHUFFLE = 3

_U64 = (1 << 64) - 1


def child_seed(*parts) -> int:
    """Stable 32-bit seed derived from integer parts via SeedSequence."""
    entropy = [int(p) & _U64 for p in parts]
    return int(np.random.SeedSequence(entropy).generate_state(1)[0])


@dataclass(frozen=True)
class TrainConfig:
    epochs: int
    batch_size: int
    lr: float
    train_attack: AttackConfig
    eval_attack: AttackConfig
    momentum: float = 0.9
    lr_decay_epochs: tuple = ()
    lr_decay_factor: float = 0.1
    edac_eta: float = 0.1
    edac_reg_lambda: float = 0.5
    objective: ObjectiveKind = ObjectiveKind("at_ce")
    seed: int = 0
    method: str = "at"

    def __post_init__(self):
        object.__setattr__(self, "lr_decay_epochs",
                           tuple(int(e) for e in self.lr_decay_epochs))
        if self.epochs < 1:
            raise ConfigError(f"epochs must be at least 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be at least 1, got {self.batch_size}")
        if not self.lr > 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError(f"momentum must lie in [0, 1), got {self.momentum}")
        if not 0.0 < self.lr_decay_factor <= 1.0:
            raise ConfigError(f"lr_decay_factor must lie in (0, 1], got {self.lr_decay_factor}")
        if self.edac_eta < 0:
            raise ConfigError(f"edac_eta must be non-negative, got {self.edac_eta}")
        if self.edac_reg_lambda < 0:
            raise ConfigError(f"edac_reg_lambda must be non-negative, got {self.edac_reg_lambda}")
        if self.method not in METHODS:
            raise ConfigError(f"method must be one of {METHODS}, got {self.method!r}")


@dataclass(frozen=True)
class OptState:
    """Optimizer state: momentum buffer plus the deterministic step cursor."""

    momentum: ParamVector
    epoch: int = 0
    step: int = 0


@dataclass(frozen=True)
class HalfStepReport:
    """Batch certainty before the half step and after attack regeneration."""

    ac_before: float
    ac_after: float
    eta: float


@dataclass(frozen=True)
class Checkpoint:
    model: ModelState
    epoch: int
    optimizer_momentum: ParamVector
    rng_state: dict
    metrics_row: MetricsRecord


def sgd_step(params: ParamVector, grad: ParamVector, lr, momentum, momentum_buffer):
    """Classical momentum update: v <- m*v + g, theta <- theta - lr*v."""
    v = momentum_buffer * momentum + grad
    return params - v * lr, v


def lr_at_epoch(config: TrainConfig, epoch) -> float:
    """Base rate times the decay factor once per decay epoch reached."""
    if epoch < 0:
        raise ConfigError(f"epoch must be non-negative, got {epoch}")
    n = sum(1 for d in config.lr_decay_epochs if d <= epoch)
    return config.lr * config.lr_decay_factor ** n


def _train_rng(config: TrainConfig, opt: OptState, stream):
    if not config.train_attack.random_start:
        return None
    return np.random.default_rng(child_seed(config.seed, opt.step, stream))


def _apply_sgd(model: ModelState, grad: ParamVector, config: TrainConfig, opt: OptState):
    lr = lr_at_epoch(config, opt.epoch)
    new_params, new_buf = sgd_step(model.params, grad, lr, config.momentum, opt.momentum)
    if not new_params.allfinite():
        raise NumericError(f"non-finite parameters after update at epoch {opt.epoch}")
    return ModelState(model.spec, new_params), OptState(new_buf, opt.epoch, opt.step + 1)


def _robust_grad(model: ModelState, adv, config: TrainConfig) -> ParamVector:
    dm = DiffModel(model)
    backward(robust_loss_graph(dm, adv, config.objective))
    return dm.param_grads(model.params)


def at_update(model: ModelState, batch: Batch, config: TrainConfig, opt_state: OptState):
    """Attack at the current weights, one SGD step on the robust surrogate."""
    adv = generate_batch(model, batch, config.train_attack,
                         rng=_train_rng(config, opt_state, STREAM_ROB))
    return _apply_sgd(model, _robust_grad(model, adv, config), config, opt_state)


def edac_update(model: ModelState, batch: Batch, config: TrainConfig, opt_state: OptState):
    """Two-step update: certainty descent, then robustness from the half step.

    The half step is plain gradient descent with the freshly generated
    attacks frozen; the attacks are regenerated against the half-step weights
    before the robustness step, and the momentum buffer is updated only by
    the robustness gradient. A zero ``edac_eta`` takes the exact
    ``at_update`` path, so the reduction is bitwise.
    """
    eta = config.edac_eta
    if eta == 0.0:
        adv = generate_batch(model, batch, config.train_attack,
                             rng=_train_rng(config, opt_state, STREAM_ROB))
        new_model, new_opt = _apply_sgd(model, _robust_grad(model, adv, config),
                                        config, opt_state)
        ac = certainty_value(model, adv.perturbed)
        return new_model, new_opt, HalfStepReport(ac, ac, 0.0)

    adv0 = generate_batch(model, batch, config.train_attack,
                          rng=_train_rng(config, opt_state, STREAM_AC))
    ac_before = certainty_value(model, adv0.perturbed)
    g_ac = grad_certainty_frozen(model, adv0.perturbed)
    half_params = model.params - g_ac * eta
    if not half_params.allfinite():
        raise NumericError("non-finite parameters after the certainty half step")
    half_model = ModelState(model.spec, half_params)
    adv1 = generate_batch(half_model, batch, config.train_attack,
                          rng=_train_rng(config, opt_state, STREAM_ROB))
    ac_after = certainty_value(half_model, adv1.perturbed)
    new_model, new_opt = _apply_sgd(half_model, _robust_grad(half_model, adv1, config),
                                    config, opt_state)
    return new_model, new_opt, HalfStepReport(ac_before, ac_after, eta)


def edac_reg_update(model: ModelState, batch: Batch, config: TrainConfig,
                    opt_state: OptState):
    """One SGD step on robust loss plus lambda times the frozen certainty."""
    adv = generate_batch(model, batch, config.train_attack,
                         rng=_train_rng(config, opt_state, STREAM_ROB))
    lam = config.edac_reg_lambda
    dm = DiffModel(model)
    loss = robust_loss_graph(dm, adv, config.objective)
    if lam != 0.0:
        loss = autodiff.add(loss, autodiff.scale(certainty_graph(dm, adv.perturbed), lam))
    backward(loss)
    return _apply_sgd(model, dm.param_grads(model.params), config, opt_state)


def apply_update(model, batch, config, opt_state):
    """Dispatch on ``config.method``; always returns (model, opt, report|None)."""
    if config.method == "at":
        m, o = at_update(model, batch, config, opt_state)
        return m, o, None
    if config.method == "edac":
        return edac_update(model, batch, config, opt_state)
    m, o = edac_reg_update(model, batch, config, opt_state)
    return m, o, None


def certainty_descent_probe(model: ModelState, batch: Batch, attack_config: AttackConfig,
                            eta0=0.1, max_halvings=20, seed=0):
    """Search a step size whose half step strictly lowers the regenerated
    batch certainty, halving from ``eta0`` at most ``max_halvings`` times.

    Both certainty evaluations regenerate attacks from the same seed so that
    a random start, if configured, is identical on both sides. Returns
    (eta or None, certainty before, certainty after the last try).
    """
    def attacked(m):
        rng = np.random.default_rng(seed) if attack_config.random_start else None
        return generate_batch(m, batch, attack_config, rng=rng)

    adv0 = attacked(model)
    ac0 = certainty_value(model, adv0.perturbed)
    g = grad_certainty_frozen(model, adv0.perturbed)
    eta = float(eta0)
    ac1 = float("nan")
    for _ in range(max_halvings + 1):
        half_params = model.params - g * eta
        if half_params.allfinite():
            half_model = ModelState(model.spec, half_params)
            ac1 = certainty_value(half_model, attacked(half_model).perturbed)
            if ac1 < ac0:
                return eta, ac0, ac1
        eta /= 2.0
    return None, ac0, ac1


def epoch_batches(train_set: Dataset, config: TrainConfig, epoch):
    """The deterministic batch order used by epoch ``epoch``."""
    return batches(train_set, config.batch_size, child_seed(config.seed, epoch, STREAM_SHUFFLE))


def batches_per_epoch(train_set: Dataset, config: TrainConfig) -> int:
    return -(-len(train_set) // config.batch_size)


def _eval_rng(config: TrainConfig, epoch, split_idx):
    if not config.eval_attack.random_start:
        return None
    return np.random.default_rng(child_seed(config.seed, epoch, STREAM_EVAL, split_idx))


def evaluate_epoch(model: ModelState, train_set: Dataset, test_set: Dataset,
                   config: TrainConfig, epoch, wall_time_s=0.0) -> MetricsRecord:
    clean_tr, rob_tr, ac_tr = split_metrics(model, train_set, config.eval_attack,
                                            _eval_rng(config, epoch, 0))
    clean_te, rob_te, ac_te = split_metrics(model, test_set, config.eval_attack,
                                            _eval_rng(config, epoch, 1))
    return MetricsRecord(
        epoch=epoch, method=config.method, lr=lr_at_epoch(config, epoch),
        clean_acc_train=clean_tr, clean_acc_test=clean_te,
        robust_acc_train=rob_tr, robust_acc_test=rob_te,
        ac_train=ac_tr, ac_test=ac_te, wall_time_s=wall_time_s,
    )


def _rng_record(config: TrainConfig, next_epoch) -> dict:
    return {"base_seed": int(config.seed), "next_epoch": int(next_epoch)}


def train_run(config: TrainConfig, data, model, resume_from: Optional[Checkpoint] = None):
    """Full training loop; returns (final, best, history).

    ``data`` is a (train, test) dataset pair and ``model`` a ModelSpec (fresh
    initialisation) or an explicit ModelState. Per epoch the loop shuffles
    with a seeded permutation, applies the configured per-batch update, then
    measures both splits under the evaluation attack. The best checkpoint is
    the earliest one maximising held-out robust accuracy. With
    ``resume_from``, training continues after that checkpoint's epoch and
    reproduces the uninterrupted run bitwise; the resumed checkpoint starts
    as the incumbent best.
    """
    train_set, test_set = data
    if isinstance(model, ModelSpec):
        model = init_model(model)
    if model.spec.input_dim != train_set.dim or model.spec.num_classes < train_set.num_classes:
        raise ConfigError("model spec does not fit the dataset dimensions")
    opt = OptState(model.params.zeros_like(), 0, 0)
    start_epoch = 0
    best: Optional[Checkpoint] = None
    last: Optional[Checkpoint] = None
    if resume_from is not None:
        model = resume_from.model
        start_epoch = resume_from.epoch + 1
        opt = OptState(resume_from.optimizer_momentum, start_epoch, 0)
        best = last = resume_from
    if start_epoch >= config.epochs:
        raise ConfigError(
            f"resume epoch {start_epoch} is already past the configured {config.epochs} epochs"
        )
    nb = batches_per_epoch(train_set, config)
    history = []
    for epoch in range(start_epoch, config.epochs):
        t0 = time.perf_counter()
        opt = OptState(opt.momentum, epoch, epoch * nb)
        try:
            for batch in epoch_batches(train_set, config, epoch):
                model, opt, _ = apply_update(model, batch, config, opt)
            row = evaluate_epoch(model, train_set, test_set, config, epoch,
                                 wall_time_s=time.perf_counter() - t0)
        except (AdvlabError, ArithmeticError) as exc:
            raise TrainingAborted(
                f"training failed during epoch {epoch}: {exc}",
                checkpoint=last,
            ) from exc
        history.append(row)
        last = Checkpoint(model, epoch, opt.momentum, _rng_record(config, epoch + 1), row)
        if best is None or row.robust_acc_test > best.metrics_row.robust_acc_test:
            best = last
        log.info(
            "epoch %d [%s] lr=%g clean=%.4f/%.4f robust=%.4f/%.4f ac=%.4f/%.4f (%.2fs)",
            epoch, config.method, row.lr, row.clean_acc_train, row.clean_acc_test,
            row.robust_acc_train, row.robust_acc_test, row.ac_train, row.ac_test,
            row.wall_time_s,
        )
    return last, best, history


def continue_one_epoch(checkpoint: Checkpoint, train_set: Dataset, config: TrainConfig):
    """Run exactly one more epoch from a checkpoint; returns the new model.

    Uses the same shuffle and step seeding as ``train_run`` would for that
    epoch, so a zero certainty step size reproduces a plain continuation.
    """
    nb = batches_per_epoch(train_set, config)
    epoch = checkpoint.epoch + 1
    model = checkpoint.model
    opt = OptState(checkpoint.optimizer_momentum, epoch, epoch * nb)
    for batch in epoch_batches(train_set, config, epoch):
        model, opt, _ = apply_update(model, batch, config, opt)
    return model


# ---------------------------------------------------------------------------
# checkpoint persistence (byte layout documented in docs/formats.md)

CKPT_MAGIC = b"ADVCKPT1"


def save_checkpoint(checkpoint: Checkpoint, path) -> None:
    spec = checkpoint.model.spec
    header = {
        "version": 1,
        "spec": {
            "input_dim": spec.input_dim,
            "layer_widths": list(spec.layer_widths),
            "activation": spec.activation,
            "init_seed": int(spec.init_seed),
        },
        "epoch": int(checkpoint.epoch),
        "rng": {k: int(v) for k, v in checkpoint.rng_state.items()},
        "metrics": checkpoint.metrics_row.to_dict(include_wall_time=False),
        "segments": [[name, list(arr.shape)] for name, arr in checkpoint.model.params.items()],
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    params = checkpoint.model.params.flatten().astype("<f8")
    buf = checkpoint.optimizer_momentum.flatten().astype("<f8")
    with open(path, "wb") as f:
        f.write(CKPT_MAGIC)
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        f.write(params.tobytes())
        f.write(buf.tobytes())


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < len(CKPT_MAGIC) + 4 or raw[: len(CKPT_MAGIC)] != CKPT_MAGIC:
        raise CheckpointError(f"{path}: missing checkpoint magic {CKPT_MAGIC!r}")
    (hlen,) = struct.unpack("<I", raw[len(CKPT_MAGIC) : len(CKPT_MAGIC) + 4])
    start = len(CKPT_MAGIC) + 4
    if len(raw) < start + hlen:
        raise CheckpointError(f"{path}: truncated header (wanted {hlen} bytes)")
    try:
        header = json.loads(raw[start : start + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: unreadable header: {exc}") from exc
    if header.get("version") != 1:
        raise CheckpointError(f"{path}: unsupported checkpoint version {header.get('version')}")
    try:
        spec = ModelSpec(
            input_dim=int(header["spec"]["input_dim"]),
            layer_widths=tuple(header["spec"]["layer_widths"]),
            activation=str(header["spec"]["activation"]),
            init_seed=int(header["spec"]["init_seed"]),
        )
        segments = [(str(n), tuple(int(d) for d in shape)) for n, shape in header["segments"]]
        metrics = MetricsRecord.from_dict(header["metrics"])
        epoch = int(header["epoch"])
        rng_state = {str(k): int(v) for k, v in header["rng"].items()}
    except (KeyError, TypeError, ValueError, ConfigError, NumericError) as exc:
        raise CheckpointError(f"{path}: malformed header fields: {exc}") from exc
    count = sum(int(np.prod(shape)) for _, shape in segments)
    body = raw[start + hlen :]
    if len(body) != 2 * 8 * count:
        raise CheckpointError(
            f"{path}: expected {2 * 8 * count} payload bytes, found {len(body)}"
        )
    flat = np.frombuffer(body, dtype="<f8")
    template = ParamVector(
        (name, np.zeros(shape)) for name, shape in segments
    )
    params = template.unflatten(flat[:count])
    buf = template.unflatten(flat[count:])
    try:
        model = ModelState(spec, params)
    except ShapeError as exc:
        raise CheckpointError(f"{path}: parameters do not match spec: {exc}") from exc
    return Checkpoint(model, epoch, buf, rng_state, metrics)
