"""Forward/backward engine over dense float32 arrays with mask-aware weights.

Supported layers: linear, conv2d (stride 1, "valid"/"same" zero padding)
and relu. A weight tensor always travels with a binary mask of the same
shape (`MaskedTensor`); positions with mask 0 hold the exact value 0.0 and
stay that way through every forward, backward and optimizer step. Biases
are dense and never masked.

The math is dtype-following: arrays produced by a layer keep the dtype of
its inputs, which lets the finite-difference oracle run the same code in
float64 while training runs in float32.
"""

import copy
import math
from dataclasses import dataclass, field

import numpy as np

from .rng import Stream


@dataclass
class LayerSpec:
    """Shape-level description of one layer; carries no parameter values."""

    kind: str
    in_dim: int = 0
    out_dim: int = 0
    in_channels: int = 0
    out_channels: int = 0
    kernel_h: int = 0
    kernel_w: int = 0
    padding: str = "valid"
    has_bias: bool = True

    @classmethod
    def linear(cls, in_dim: int, out_dim: int, has_bias: bool = True) -> "LayerSpec":
        if in_dim <= 0 or out_dim <= 0:
            raise ValueError(f"linear dims must be positive, got {in_dim}x{out_dim}")
        return cls(kind="linear", in_dim=in_dim, out_dim=out_dim, has_bias=has_bias)

    @classmethod
    def conv2d(cls, in_channels: int, out_channels: int, kernel_h: int,
               kernel_w: int, padding: str = "valid", has_bias: bool = True) -> "LayerSpec":
        if min(in_channels, out_channels, kernel_h, kernel_w) <= 0:
            raise ValueError("conv2d dims must be positive")
        if padding not in ("valid", "same"):
            raise ValueError(f"padding must be 'valid' or 'same', got {padding!r}")
        return cls(kind="conv2d", in_channels=in_channels, out_channels=out_channels,
                   kernel_h=kernel_h, kernel_w=kernel_w, padding=padding, has_bias=has_bias)

    @classmethod
    def relu(cls) -> "LayerSpec":
        return cls(kind="relu", has_bias=False)

    @property
    def weight_shape(self) -> tuple[int, ...] | None:
        if self.kind == "linear":
            return (self.out_dim, self.in_dim)
        if self.kind == "conv2d":
            return (self.out_channels, self.in_channels, self.kernel_h, self.kernel_w)
        return None

    @property
    def weight_size(self) -> int:
        shape = self.weight_shape
        return 0 if shape is None else int(np.prod(shape))

    @property
    def fan_in(self) -> int:
        if self.kind == "linear":
            return self.in_dim
        if self.kind == "conv2d":
            return self.in_channels * self.kernel_h * self.kernel_w
        return 0


@dataclass
class MaskedTensor:
    """A weight array paired with a same-shape binary mask."""

    values: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        if self.values.shape != self.mask.shape:
            raise ValueError(
                f"mask shape {self.mask.shape} != values shape {self.values.shape}")
        if not np.isin(self.mask, (0, 1)).all():
            raise ValueError("mask entries must be 0 or 1")
        self.mask = self.mask.astype(np.uint8)
        self.values = self.values * self.mask  # enforce mask-zero invariant

    def active_count(self) -> int:
        return int(self.mask.sum())

    def effective(self) -> np.ndarray:
        return self.values * self.mask


@dataclass
class Layer:
    spec: LayerSpec
    weight: MaskedTensor | None = None
    bias: np.ndarray | None = None


@dataclass
class LayerGrads:
    weight: np.ndarray | None = None        # active view: zero at masked positions
    bias: np.ndarray | None = None
    weight_dense: np.ndarray | None = None  # raw grads, finite at masked positions


@dataclass
class GradientSet:
    layers: list[LayerGrads] = field(default_factory=list)
    dense: bool = False


def init_layer(spec: LayerSpec, stream: Stream, mask: np.ndarray | None = None) -> Layer:
    """Kaiming-uniform fan-in init (drawn dense), then the mask zeroes inactive slots."""
    if spec.kind == "relu":
        return Layer(spec=spec)
    shape = spec.weight_shape
    bound = math.sqrt(6.0 / spec.fan_in)
    flat = stream.uniforms(int(np.prod(shape)))
    values = ((flat * 2.0 - 1.0) * bound).astype(np.float32).reshape(shape)
    if mask is None:
        mask = np.ones(shape, dtype=np.uint8)
    weight = MaskedTensor(values=values, mask=mask.reshape(shape))
    bias = None
    if spec.has_bias:
        out = spec.out_dim if spec.kind == "linear" else spec.out_channels
        b_bound = 1.0 / math.sqrt(spec.fan_in)
        bias = ((stream.uniforms(out) * 2.0 - 1.0) * b_bound).astype(np.float32)
    return Layer(spec=spec, weight=weight, bias=bias)


# ---------------------------------------------------------------------------
# forward
# ---------------------------------------------------------------------------

def _conv_padding(spec: LayerSpec) -> tuple[int, int, int, int]:
    if spec.padding == "valid":
        return 0, 0, 0, 0
    ph, pw = spec.kernel_h - 1, spec.kernel_w - 1
    return ph // 2, ph - ph // 2, pw // 2, pw - pw // 2


def conv_output_hw(spec: LayerSpec, h: int, w: int) -> tuple[int, int]:
    top, bottom, left, right = _conv_padding(spec)
    oh = h + top + bottom - spec.kernel_h + 1
    ow = w + left + right - spec.kernel_w + 1
    if oh <= 0 or ow <= 0:
        raise ValueError(
            f"conv2d kernel {spec.kernel_h}x{spec.kernel_w} too large for input {h}x{w}")
    return oh, ow


def _im2col(padded: np.ndarray, kh: int, kw: int, oh: int, ow: int) -> np.ndarray:
    b, c = padded.shape[:2]
    cols = np.empty((b, c, kh, kw, oh, ow), dtype=padded.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = padded[:, :, i:i + oh, j:j + ow]
    return cols.reshape(b, c * kh * kw, oh * ow)


def layer_forward(layer: Layer, x: np.ndarray) -> np.ndarray:
    spec = layer.spec
    if spec.kind == "relu":
        return np.maximum(x, 0)

    if spec.kind == "linear":
        x2 = x.reshape(x.shape[0], -1) if x.ndim > 2 else x
        if x2.ndim != 2 or x2.shape[1] != spec.in_dim:
            raise ValueError(
                f"linear layer expects {spec.in_dim} input features, "
                f"got input shape {x.shape}")
        y = x2 @ layer.weight.effective().T
        if layer.bias is not None:
            y = y + layer.bias
        return y

    if spec.kind == "conv2d":
        if x.ndim != 4 or x.shape[1] != spec.in_channels:
            raise ValueError(
                f"conv2d layer expects (B, {spec.in_channels}, H, W), "
                f"got input shape {x.shape}")
        b, _, h, w = x.shape
        oh, ow = conv_output_hw(spec, h, w)
        top, bottom, left, right = _conv_padding(spec)
        padded = np.pad(x, ((0, 0), (0, 0), (top, bottom), (left, right)))
        cols = _im2col(padded, spec.kernel_h, spec.kernel_w, oh, ow)
        w2 = layer.weight.effective().reshape(spec.out_channels, -1)
        y = np.einsum("bkp,ok->bop", cols, w2, optimize=True)
        if layer.bias is not None:
            y = y + layer.bias[None, :, None]
        return y.reshape(b, spec.out_channels, oh, ow)

    raise ValueError(f"unknown layer kind {spec.kind!r}")


def stack_forward(layers: list[Layer], x: np.ndarray,
                  record: bool = False) -> tuple[np.ndarray, list[np.ndarray] | None]:
    """Run a layer sequence; with record=True also return per-layer inputs."""
    tape = [] if record else None
    for layer in layers:
        if record:
            tape.append(x)
        x = layer_forward(layer, x)
    return x, tape


# ---------------------------------------------------------------------------
# loss
# ---------------------------------------------------------------------------

def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def loss_forward(logits: np.ndarray, targets: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean cross-entropy over the batch; returns (loss, per-row softmax probs)."""
    if logits.ndim != 2:
        raise ValueError(f"logits must be 2-D (batch, classes), got shape {logits.shape}")
    targets = np.asarray(targets)
    if targets.shape != (logits.shape[0],):
        raise ValueError(
            f"targets shape {targets.shape} does not match batch size {logits.shape[0]}")
    if targets.size and (targets.min() < 0 or targets.max() >= logits.shape[1]):
        raise ValueError(
            f"target out of range [0, {logits.shape[1]}): min={targets.min()}, "
            f"max={targets.max()}")
    probs = softmax(logits)
    # loss reduction in float64 so the scalar is accurate even when a
    # float32 probability rounds to 1
    shifted = (logits - logits.max(axis=1, keepdims=True)).astype(np.float64)
    log_z = np.log(np.exp(shifted).sum(axis=1))
    log_p = shifted[np.arange(len(targets)), targets] - log_z
    return float(-log_p.mean()), probs


def loss_backward(probs: np.ndarray, targets: np.ndarray, scale: float = 1.0) -> np.ndarray:
    """Gradient of scale * mean-CE with respect to the logits."""
    d = probs.astype(probs.dtype, copy=True)
    d[np.arange(len(targets)), targets] -= 1
    return d * np.asarray(scale / len(targets), dtype=probs.dtype)


# ---------------------------------------------------------------------------
# backward
# ---------------------------------------------------------------------------

def _layer_backward(layer: Layer, x: np.ndarray, d_out: np.ndarray,
                    dense: bool) -> tuple[LayerGrads, np.ndarray]:
    spec = layer.spec
    if spec.kind == "relu":
        return LayerGrads(), d_out * (x > 0)

    if spec.kind == "linear":
        orig_shape = x.shape
        x2 = x.reshape(x.shape[0], -1) if x.ndim > 2 else x
        dw_dense = d_out.T @ x2
        db = d_out.sum(axis=0) if layer.bias is not None else None
        dx = d_out @ layer.weight.effective()
        grads = LayerGrads(weight=dw_dense * layer.weight.mask, bias=db,
                           weight_dense=dw_dense if dense else None)
        return grads, dx.reshape(orig_shape)

    if spec.kind == "conv2d":
        b, _, h, w = x.shape
        oh, ow = conv_output_hw(spec, h, w)
        top, bottom, left, right = _conv_padding(spec)
        padded = np.pad(x, ((0, 0), (0, 0), (top, bottom), (left, right)))
        cols = _im2col(padded, spec.kernel_h, spec.kernel_w, oh, ow)
        d2 = d_out.reshape(b, spec.out_channels, oh * ow)
        dw_dense = np.einsum("bop,bkp->ok", d2, cols, optimize=True).reshape(
            layer.weight.values.shape)
        db = d2.sum(axis=(0, 2)) if layer.bias is not None else None
        w2 = layer.weight.effective().reshape(spec.out_channels, -1)
        dcols = np.einsum("bop,ok->bkp", d2, w2, optimize=True).reshape(
            b, spec.in_channels, spec.kernel_h, spec.kernel_w, oh, ow)
        dpadded = np.zeros_like(padded)
        for i in range(spec.kernel_h):
            for j in range(spec.kernel_w):
                dpadded[:, :, i:i + oh, j:j + ow] += dcols[:, :, i, j]
        dx = dpadded[:, :, top:top + h, left:left + w]
        grads = LayerGrads(weight=dw_dense * layer.weight.mask, bias=db,
                           weight_dense=dw_dense if dense else None)
        return grads, dx

    raise ValueError(f"unknown layer kind {spec.kind!r}")


def stack_backward(layers: list[Layer], tape: list[np.ndarray] | None,
                   d_out: np.ndarray, dense: bool = False) -> tuple[GradientSet, np.ndarray]:
    """Backprop through a recorded stack_forward pass.

    Returns per-layer gradients plus the gradient with respect to the stack
    input. With dense=True, raw weight gradients (finite at masked-out
    positions) are materialized alongside the masked active view.
    """
    if tape is None:
        raise ValueError("backward requires a recorded forward pass (record=True)")
    if len(tape) != len(layers):
        raise ValueError(f"tape length {len(tape)} != layer count {len(layers)}")
    grads = [None] * len(layers)
    for i in range(len(layers) - 1, -1, -1):
        grads[i], d_out = _layer_backward(layers[i], tape[i], d_out, dense)
    return GradientSet(layers=grads, dense=dense), d_out


# ---------------------------------------------------------------------------
# finite differences (testing oracle)
# ---------------------------------------------------------------------------

def stack_astype(layers: list[Layer], dtype) -> list[Layer]:
    out = []
    for layer in layers:
        clone = Layer(spec=copy.deepcopy(layer.spec))
        if layer.weight is not None:
            clone.weight = MaskedTensor(values=layer.weight.values.astype(dtype),
                                        mask=layer.weight.mask.copy())
        if layer.bias is not None:
            clone.bias = layer.bias.astype(dtype)
        out.append(clone)
    return out


def finite_difference_gradient(loss_fn, params: list[tuple[np.ndarray, np.ndarray | None]],
                               eps: float = 1e-3) -> list[np.ndarray]:
    """Central differences of loss_fn over each (array, mask) parameter.

    Perturbs the live arrays in place (restoring them afterwards), so
    loss_fn must read those same arrays. Only active positions (mask 1,
    or everything for mask=None) are probed; the rest stay zero.
    """
    if eps <= 0:
        raise ValueError(f"eps must be positive, got {eps}")
    out = []
    for arr, mask in params:
        grad = np.zeros(arr.shape, dtype=np.float64)
        flat = arr.reshape(-1)
        active = range(flat.size) if mask is None else np.flatnonzero(mask.reshape(-1))
        for i in active:
            orig = flat[i]
            flat[i] = orig + eps
            up = loss_fn()
            flat[i] = orig - eps
            down = loss_fn()
            flat[i] = orig
            grad.reshape(-1)[i] = (up - down) / (2.0 * eps)
        out.append(grad)
    return out


def stack_finite_difference(layers: list[Layer], x: np.ndarray, targets: np.ndarray,
                            eps: float = 1e-3) -> GradientSet:
    """Finite-difference gradient of the stack's mean-CE loss (float64 copy)."""
    shadow = stack_astype(layers, np.float64)
    x64 = np.asarray(x, dtype=np.float64)

    def loss_fn() -> float:
        logits, _ = stack_forward(shadow, x64)
        loss, _ = loss_forward(logits, targets)
        return loss

    params, owners = [], []
    for layer in shadow:
        if layer.weight is not None:
            params.append((layer.weight.values, layer.weight.mask))
            owners.append((layer, "weight"))
        if layer.bias is not None:
            params.append((layer.bias, None))
            owners.append((layer, "bias"))
    flat_grads = finite_difference_gradient(loss_fn, params, eps)

    by_layer = {id(layer): LayerGrads() for layer in shadow}
    for (layer, slot), grad in zip(owners, flat_grads):
        if slot == "weight":
            by_layer[id(layer)].weight = grad
        else:
            by_layer[id(layer)].bias = grad
    return GradientSet(layers=[by_layer[id(layer)] for layer in shadow], dense=False)
