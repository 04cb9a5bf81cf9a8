"""Small dense MLP classifiers with exact parameter and input gradients.

Arrays are 64-bit floats throughout; model parameters are immutable once
constructed, so states can be shared freely between threads and attacks.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff
from .autodiff import Var, as_f64, backward, finite_diff_grad  # noqa: F401 (re-exported)
from .errors import CapabilityError, ConfigError, NumericError, ShapeError

ACTIVATIONS = ("relu", "tanh")


class ParamVector:
    """Ordered, named collection of parameter arrays (weights/biases per layer).

    Two vectors with the same layout support elementwise ``+``/``-`` and
    scalar ``*``; ``flatten``/``unflatten`` round-trip exactly.
    """

    __slots__ = ("_names", "_arrays")

    def __init__(self, segments):
        names = []
        arrays = {}
        for name, arr in segments:
            if name in arrays:
                raise ConfigError(f"duplicate parameter segment {name!r}")
            a = as_f64(arr).copy()
            a.setflags(write=False)
            names.append(name)
            arrays[name] = a
        self._names = tuple(names)
        self._arrays = arrays

    @property
    def names(self):
        return self._names

    def items(self):
        for name in self._names:
            yield name, self._arrays[name]

    def __getitem__(self, name):
        return self._arrays[name]

    def __len__(self):
        return len(self._names)

    def size(self) -> int:
        return sum(a.size for a in self._arrays.values())

    def layout(self):
        return tuple((n, self._arrays[n].shape) for n in self._names)

    def _check_layout(self, other: "ParamVector"):
        if self.layout() != other.layout():
            raise ShapeError("parameter vectors have different layouts")

    def __add__(self, other):
        self._check_layout(other)
        return ParamVector((n, self._arrays[n] + other._arrays[n]) for n in self._names)

    def __sub__(self, other):
        self._check_layout(other)
        return ParamVector((n, self._arrays[n] - other._arrays[n]) for n in self._names)

    def __mul__(self, c):
        c = float(c)
        return ParamVector((n, self._arrays[n] * c) for n in self._names)

    __rmul__ = __mul__

    def zeros_like(self):
        return ParamVector((n, np.zeros_like(a)) for n, a in self.items())

    def flatten(self) -> np.ndarray:
        if not self._names:
            return np.zeros(0)
        return np.concatenate([self._arrays[n].reshape(-1) for n in self._names])

    def unflatten(self, flat) -> "ParamVector":
        """Rebuild a vector with this layout from a flat array."""
        flat = as_f64(flat).reshape(-1)
        if flat.size != self.size():
            raise ShapeError(f"expected {self.size()} values, got {flat.size}")
        out = []
        pos = 0
        for name, arr in self.items():
            out.append((name, flat[pos : pos + arr.size].reshape(arr.shape)))
            pos += arr.size
        return ParamVector(out)

    def allfinite(self) -> bool:
        return all(np.isfinite(a).all() for a in self._arrays.values())

    def equals(self, other: "ParamVector") -> bool:
        """Bitwise equality of all segments."""
        if self.layout() != other.layout():
            return False
        return all(np.array_equal(self._arrays[n], other._arrays[n]) for n in self._names)

    def max_abs(self) -> float:
        return max((float(np.abs(a).max()) for a in self._arrays.values() if a.size), default=0.0)

    def __repr__(self):
        return f"ParamVector({self.layout()})"


@dataclass(frozen=True)
class ModelSpec:
    """Architecture of a feed-forward classifier.

    ``layer_widths`` lists every layer width including the final-class count,
    e.g. ``(64, 64, 4)`` is two hidden layers of 64 units and 4 classes.
    """

    input_dim: int
    layer_widths: tuple
    activation: str = "relu"
    init_seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "layer_widths", tuple(int(w) for w in self.layer_widths))
        if self.input_dim < 1:
            raise ConfigError(f"input_dim must be positive, got {self.input_dim}")
        if not self.layer_widths:
            raise ConfigError("layer_widths must not be empty")
        if any(w < 1 for w in self.layer_widths):
            raise ConfigError(f"layer widths must be positive, got {self.layer_widths}")
        if self.layer_widths[-1] < 2:
            raise ConfigError("final layer width (class count) must be at least 2")
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"activation must be one of {ACTIVATIONS}, got {self.activation!r}")

    @property
    def num_classes(self) -> int:
        return self.layer_widths[-1]

    def layer_dims(self):
        """(fan_in, fan_out) per layer, in order."""
        fan_ins = (self.input_dim,) + self.layer_widths[:-1]
        return tuple(zip(fan_ins, self.layer_widths))

    def param_names(self):
        names = []
        for i in range(len(self.layer_widths)):
            names.extend((f"w{i}", f"b{i}"))
        return tuple(names)


@dataclass(frozen=True)
class ModelState:
    spec: ModelSpec
    params: ParamVector

    def __post_init__(self):
        expected = tuple(
            (name, shape)
            for i, (fi, fo) in enumerate(self.spec.layer_dims())
            for name, shape in ((f"w{i}", (fi, fo)), (f"b{i}", (fo,)))
        )
        if self.params.layout() != expected:
            raise ShapeError(
                f"parameter layout {self.params.layout()} does not match spec {expected}"
            )


def init_model(spec: ModelSpec) -> ModelState:
    """Initialise a model deterministically from its spec.

    Every weight and bias of a layer with fan-in f is drawn uniformly from
    [-1/sqrt(f), +1/sqrt(f)] using a PCG64 generator seeded with
    ``spec.init_seed``, so the same (spec, seed) pair always produces a
    bitwise-identical parameter vector.
    """
    rng = np.random.default_rng(int(spec.init_seed) & ((1 << 64) - 1))
    segments = []
    for i, (fan_in, fan_out) in enumerate(spec.layer_dims()):
        bound = 1.0 / np.sqrt(fan_in)
        segments.append((f"w{i}", rng.uniform(-bound, bound, size=(fan_in, fan_out))))
        segments.append((f"b{i}", rng.uniform(-bound, bound, size=fan_out)))
    return ModelState(spec, ParamVector(segments))


def init_bound(fan_in: int) -> float:
    """The documented half-width of the uniform init for a given fan-in."""
    return 1.0 / np.sqrt(fan_in)


def _as_rows(x, input_dim: int):
    """Promote a single input to a one-row batch; report whether it was single."""
    x = as_f64(x)
    if x.ndim == 1:
        if x.shape[0] != input_dim:
            raise ShapeError(f"input has dim {x.shape[0]}, model expects {input_dim}")
        return x[None, :], True
    if x.ndim == 2:
        if x.shape[1] != input_dim:
            raise ShapeError(f"input has dim {x.shape[1]}, model expects {input_dim}")
        return x, False
    raise ShapeError(f"input must be 1-D or 2-D, got shape {x.shape}")


def forward_logits(model: ModelState, x) -> np.ndarray:
    """Logits of ``x`` under ``model``; accepts a single input or a row batch."""
    rows, single = _as_rows(x, model.spec.input_dim)
    use_relu = model.spec.activation == "relu"
    z = rows
    last = len(model.spec.layer_widths) - 1
    for i in range(last + 1):
        z = z @ model.params[f"w{i}"] + model.params[f"b{i}"]
        if i < last:
            z = np.maximum(z, 0.0) if use_relu else np.tanh(z)
    if not np.isfinite(z).all():
        raise NumericError("forward pass produced non-finite logits")
    return z[0] if single else z


def predict_label(model: ModelState, x):
    """Argmax class of the logits; ties resolve to the lowest class index."""
    logits = forward_logits(model, x)
    return int(np.argmax(logits)) if logits.ndim == 1 else np.argmax(logits, axis=-1)


class DiffModel:
    """Differentiable view of a ModelState: parameters wrapped as graph leaves.

    ``logits`` may be called several times on one instance (e.g. clean and
    perturbed inputs); gradients accumulate across calls.
    """

    def __init__(self, model: ModelState, track_params: bool = True):
        self.spec = model.spec
        self.pvars = {name: Var(arr, track=track_params) for name, arr in model.params.items()}

    def logits(self, x) -> Var:
        v = x if isinstance(x, Var) else Var(x, track=False)
        if v.value.ndim != 2 or v.value.shape[1] != self.spec.input_dim:
            raise ShapeError(
                f"logits expects a (B, {self.spec.input_dim}) batch, got {v.value.shape}"
            )
        z = v
        last = len(self.spec.layer_widths) - 1
        for i in range(last + 1):
            z = autodiff.affine(z, self.pvars[f"w{i}"], self.pvars[f"b{i}"])
            if i < last:
                z = autodiff.relu(z) if self.spec.activation == "relu" else autodiff.tanh(z)
        return z

    def param_grads(self, template: ParamVector) -> ParamVector:
        """Collected gradients in template order; untouched segments are zero."""
        out = []
        for name, arr in template.items():
            g = self.pvars[name].grad
            out.append((name, np.zeros_like(arr) if g is None else g))
        return ParamVector(out)


def _run_loss(loss_fn, *args) -> Var:
    try:
        out = loss_fn(*args)
    except (TypeError, AttributeError) as exc:
        raise CapabilityError(f"loss used an unsupported operation: {exc}") from exc
    if not isinstance(out, Var):
        raise CapabilityError("loss must return a Var built from supported primitives")
    if out.value.ndim != 0:
        raise CapabilityError(f"loss must be scalar, got shape {out.value.shape}")
    return out


def value_and_grad_params(loss_fn, model: ModelState, *args):
    """Loss value and its exact gradient with respect to every parameter.

    ``loss_fn(diff_model, *args)`` must build a scalar Var from the supported
    primitives.
    """
    dm = DiffModel(model)
    out = _run_loss(loss_fn, dm, *args)
    backward(out)
    return float(out.value), dm.param_grads(model.params)


def grad_params(loss_fn, model: ModelState, *args) -> ParamVector:
    return value_and_grad_params(loss_fn, model, *args)[1]


def grad_input(loss_fn, model: ModelState, x, y) -> np.ndarray:
    """Gradient of the loss with respect to the input, parameters held fixed.

    ``loss_fn(diff_model, x_var, y)`` must build a scalar Var; ``x`` may be a
    single input or a row batch.
    """
    rows, single = _as_rows(x, model.spec.input_dim)
    dm = DiffModel(model, track_params=False)
    xv = Var(rows)
    out = _run_loss(loss_fn, dm, xv, y)
    backward(out)
    g = np.zeros_like(rows) if xv.grad is None else xv.grad
    return g[0] if single else g


def finite_diff_param_grad(loss_of_params, params: ParamVector, h=1e-5) -> ParamVector:
    """Central-difference gradient over a flattened parameter vector.

    ``loss_of_params(ParamVector) -> float`` is the independent evaluation
    path used by the gradient-check oracles.
    """
    flat = finite_diff_grad(lambda v: loss_of_params(params.unflatten(v)), params.flatten(), h)
    return params.unflatten(flat)
