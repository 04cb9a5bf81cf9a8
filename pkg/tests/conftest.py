import numpy as np
import pytest

from advlab.netcore import ModelSpec, ModelState, ParamVector


def model_from_arrays(input_dim, layers, activation="relu"):
    """Build a ModelState from explicit [(W, b), ...] layer arrays."""
    widths = tuple(np.asarray(w).shape[1] for w, _ in layers)
    spec = ModelSpec(input_dim, widths, activation, init_seed=0)
    segments = []
    for i, (w, b) in enumerate(layers):
        segments.append((f"w{i}", np.asarray(w, dtype=np.float64)))
        segments.append((f"b{i}", np.asarray(b, dtype=np.float64)))
    return ModelState(spec, ParamVector(segments))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def linear_2d_model():
    """Single affine layer: logits = x @ W + b with W=[[1,0],[0,1]], b=0."""
    return model_from_arrays(2, [(np.eye(2), np.zeros(2))])
