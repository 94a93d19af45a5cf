import numpy as np
import pytest

from sparsetrails.nn import Layer, LayerSpec, MaskedTensor, init_layer
from sparsetrails.rng import Stream
from sparsetrails.sparsity import allocate, init_masks


def max_relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-2) -> float:
    """Elementwise |a - b| / max(|a|, |b|, floor); the floor turns the
    comparison into an absolute tolerance for near-zero gradients."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom)) if a.size else 0.0


def make_linear(values, mask=None, bias=None) -> Layer:
    values = np.asarray(values, dtype=np.float32)
    out_dim, in_dim = values.shape
    spec = LayerSpec.linear(in_dim, out_dim, has_bias=bias is not None)
    if mask is None:
        mask = np.ones_like(values, dtype=np.uint8)
    layer = Layer(spec=spec, weight=MaskedTensor(values=values,
                                                 mask=np.asarray(mask, dtype=np.uint8)))
    if bias is not None:
        layer.bias = np.asarray(bias, dtype=np.float32)
    return layer


def random_stack(stream: Stream, kind: str = "mlp", sparsity: float = 0.0):
    """Small random layer stack + matching input, for gradient checks."""
    if kind == "mlp":
        dims = [2 + stream.randbelow(4) for _ in range(4)]
        specs = []
        for a, b in zip(dims, dims[1:]):
            specs.append(LayerSpec.linear(a, b, has_bias=stream.random() < 0.7))
            specs.append(LayerSpec.relu())
        specs.append(LayerSpec.linear(dims[-1], 3))
        in_shape = (dims[0],)
    else:
        c = 1 + stream.randbelow(2)
        h = w = 5 + stream.randbelow(3)
        mid = 2 + stream.randbelow(2)
        k = 2 + stream.randbelow(2)
        pad = "same" if stream.random() < 0.5 else "valid"
        specs = [LayerSpec.conv2d(c, mid, k, k, padding=pad), LayerSpec.relu()]
        from sparsetrails.model import activation_shape
        shape = activation_shape(specs[0], (c, h, w))
        specs.append(LayerSpec.linear(int(np.prod(shape)), 3))
        in_shape = (c, h, w)

    plan = allocate(specs, sparsity, "uniform") if sparsity > 0 else None
    masks = {}
    if plan is not None:
        masks = init_masks(plan, specs, [stream.child("m", i)
                                         for i in plan.layer_indices])
    layers = [init_layer(s, stream.child("w", i), mask=masks.get(i))
              for i, s in enumerate(specs)]
    batch = 1 + stream.randbelow(3)
    x = np.asarray([[stream.normal() for _ in range(int(np.prod(in_shape)))]
                    for _ in range(batch)], dtype=np.float32).reshape(batch, *in_shape)
    targets = np.asarray([stream.randbelow(3) for _ in range(batch)], dtype=np.int64)
    return layers, x, targets


def relu_kink_margin(layers, x) -> float:
    """Smallest |pre-activation| feeding a relu; finite differences are only
    a valid oracle when perturbations cannot cross the kink at zero."""
    from sparsetrails.nn import stack_forward
    _, tape = stack_forward(layers, x, record=True)
    margins = [np.abs(tape[i]).min() for i, l in enumerate(layers)
               if l.spec.kind == "relu" and tape[i].size]
    return float(min(margins)) if margins else np.inf


def gradcheck_stack(seed_stream, kind, sparsity, min_margin=1e-3):
    """Random stack + input resampled until clear of relu kinks."""
    for attempt in range(50):
        layers, x, targets = random_stack(seed_stream.child(attempt), kind, sparsity)
        if relu_kink_margin(layers, x) > min_margin:
            return layers, x, targets
    raise AssertionError("could not sample a kink-free model")


@pytest.fixture
def stream():
    return Stream(2024)
