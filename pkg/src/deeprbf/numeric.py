"""Deterministic float64 tensor math: layers, forward/backward, optimizers.

Tensors are plain ``numpy.ndarray`` objects of dtype float64. Batches are laid
out NCHW for images and N x d for vectors. Every layer is a small value object
that knows its output shape, how to initialise its parameters and how to run
forward and backward passes; a :class:`Network` is an ordered list of layers
bound to an input shape.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import as_strided

from .errors import InputError, NumericError, ShapeError, StateError

DTYPE = np.float64


# ---------------------------------------------------------------------------
# convolution primitives


def _conv_out(size: int, k: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - k) // stride + 1


def _im2col(x, kh, kw, stride, pad):
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    n, c, h, w = x.shape
    ho = (h - kh) // stride + 1
    wo = (w - kw) // stride + 1
    s0, s1, s2, s3 = x.strides
    win = as_strided(
        x,
        shape=(n, ho, wo, c, kh, kw),
        strides=(s0, s2 * stride, s3 * stride, s1, s2, s3),
        writeable=False,
    )
    return np.ascontiguousarray(win).reshape(n * ho * wo, c * kh * kw), ho, wo


def _check_conv(x, kernels, stride, pad):
    if x.ndim != 4:
        raise ShapeError(f"conv2d expects N x C x H x W input, got shape {x.shape}")
    if kernels.ndim != 4:
        raise ShapeError(f"kernels must be O x C x Kh x Kw, got {kernels.shape}")
    if x.shape[1] != kernels.shape[1]:
        raise ShapeError(
            f"input has {x.shape[1]} channels but kernels expect {kernels.shape[1]}"
        )
    if stride < 1 or pad < 0:
        raise ShapeError(f"invalid stride={stride} / pad={pad}")
    _, _, h, w = x.shape
    if h + 2 * pad < kernels.shape[2] or w + 2 * pad < kernels.shape[3]:
        raise ShapeError(f"kernel {kernels.shape[2:]} larger than padded input {(h, w)}")


def conv2d_forward(x, kernels, bias, stride=1, pad=0):
    """Batched cross-correlation. Returns ``(output, cols)``; ``cols`` feeds the backward pass."""
    _check_conv(x, kernels, stride, pad)
    n = x.shape[0]
    o, _, kh, kw = kernels.shape
    cols, ho, wo = _im2col(x, kh, kw, stride, pad)
    out = cols @ kernels.reshape(o, -1).T
    out += bias
    out = out.reshape(n, ho, wo, o).transpose(0, 3, 1, 2)
    return np.ascontiguousarray(out), cols


def conv2d_backward(x_shape, kernels, cols, dout, stride=1, pad=0):
    """Gradients ``(d_input, d_kernels, d_bias)`` for :func:`conv2d_forward`."""
    n, c, h, w = x_shape
    o, _, kh, kw = kernels.shape
    _, _, ho, wo = dout.shape
    dmat = dout.transpose(0, 2, 3, 1).reshape(-1, o)
    dk = (dmat.T @ cols).reshape(kernels.shape)
    db = dmat.sum(axis=0)
    # channel-major layout keeps every scatter-add below contiguous in (ho, wo)
    dcols = (kernels.reshape(o, -1).T @ dmat.T).reshape(c, kh, kw, n, ho, wo)
    dx = np.zeros((c, n, h + 2 * pad, w + 2 * pad), dtype=DTYPE)
    for i in range(kh):
        for j in range(kw):
            dx[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += dcols[:, i, j]
    if pad:
        dx = dx[:, :, pad:-pad, pad:-pad]
    return np.ascontiguousarray(dx.transpose(1, 0, 2, 3)), dk, db


def conv2d(x, kernels, bias, stride: int = 1, pad: int = 0) -> np.ndarray:
    """Cross-correlate ``x`` (C x H x W, or batched N x C x H x W) with ``kernels``.

    Output spatial size is ``floor((H + 2*pad - Kh) / stride) + 1``. Padding is
    zero padding; there is no dilation.
    """
    x = np.asarray(x, dtype=DTYPE)
    kernels = np.asarray(kernels, dtype=DTYPE)
    bias = np.asarray(bias, dtype=DTYPE)
    single = x.ndim == 3
    if single:
        x = x[None]
    if bias.shape != (kernels.shape[0],):
        raise ShapeError(f"bias shape {bias.shape} does not match {kernels.shape[0]} kernels")
    out, _ = conv2d_forward(x, kernels, bias, stride, pad)
    return out[0] if single else out


def _glorot(rng, shape, fan_in, fan_out):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(DTYPE)


# ---------------------------------------------------------------------------
# layers


@dataclass(frozen=True)
class Conv2D:
    out_channels: int
    kernel: int = 3
    stride: int = 1
    pad: int = 0
    kind: str = field(default="conv2d", init=False)

    def output_shape(self, in_shape):
        if len(in_shape) != 3:
            raise ShapeError(f"conv2d needs a C x H x W input, got {in_shape}")
        c, h, w = in_shape
        if h + 2 * self.pad < self.kernel or w + 2 * self.pad < self.kernel:
            raise ShapeError(f"conv2d kernel {self.kernel} too large for {in_shape}")
        return (
            self.out_channels,
            _conv_out(h, self.kernel, self.stride, self.pad),
            _conv_out(w, self.kernel, self.stride, self.pad),
        )

    def init(self, in_shape, rng):
        c = in_shape[0]
        k2 = self.kernel * self.kernel
        shape = (self.out_channels, c, self.kernel, self.kernel)
        return {
            "w": _glorot(rng, shape, c * k2, self.out_channels * k2),
            "b": np.zeros(self.out_channels, dtype=DTYPE),
        }

    def forward(self, params, x):
        y, cols = conv2d_forward(x, params["w"], params["b"], self.stride, self.pad)
        return y, (x.shape, cols)

    def backward(self, params, cache, dy):
        x_shape, cols = cache
        dx, dw, db = conv2d_backward(x_shape, params["w"], cols, dy, self.stride, self.pad)
        return {"w": dw, "b": db}, dx


@dataclass(frozen=True)
class Dense:
    units: int
    kind: str = field(default="dense", init=False)

    def output_shape(self, in_shape):
        if len(in_shape) != 1:
            raise ShapeError(f"dense needs a flat input, got {in_shape}; add a flatten layer")
        return (self.units,)

    def init(self, in_shape, rng):
        d = in_shape[0]
        return {
            "w": _glorot(rng, (d, self.units), d, self.units),
            "b": np.zeros(self.units, dtype=DTYPE),
        }

    def forward(self, params, x):
        return x @ params["w"] + params["b"], x

    def backward(self, params, cache, dy):
        x = cache
        return {"w": x.T @ dy, "b": dy.sum(axis=0)}, dy @ params["w"].T


@dataclass(frozen=True)
class Tanh:
    kind: str = field(default="tanh", init=False)

    def output_shape(self, in_shape):
        return tuple(in_shape)

    def init(self, in_shape, rng):
        return {}

    def forward(self, params, x):
        y = np.tanh(x)
        return y, y

    def backward(self, params, cache, dy):
        return {}, dy * (1.0 - cache * cache)


@dataclass(frozen=True)
class ReLU:
    kind: str = field(default="relu", init=False)

    def output_shape(self, in_shape):
        return tuple(in_shape)

    def init(self, in_shape, rng):
        return {}

    def forward(self, params, x):
        mask = x > 0
        return x * mask, mask

    def backward(self, params, cache, dy):
        return {}, dy * cache


@dataclass(frozen=True)
class Flatten:
    kind: str = field(default="flatten", init=False)

    def output_shape(self, in_shape):
        return (int(np.prod(in_shape)),)

    def init(self, in_shape, rng):
        return {}

    def forward(self, params, x):
        return x.reshape(x.shape[0], -1), x.shape

    def backward(self, params, cache, dy):
        return {}, dy.reshape(cache)


@dataclass(frozen=True)
class ResidualBlock:
    """Two 3x3 convolutions plus a skip path, followed by ReLU.

    The skip is the identity when shape is preserved and a strided 1x1
    projection otherwise.
    """

    out_channels: int
    stride: int = 1
    kind: str = field(default="residual-block", init=False)

    def _needs_proj(self, in_shape):
        return in_shape[0] != self.out_channels or self.stride != 1

    def output_shape(self, in_shape):
        if len(in_shape) != 3:
            raise ShapeError(f"residual-block needs a C x H x W input, got {in_shape}")
        _, h, w = in_shape
        return (self.out_channels, _conv_out(h, 3, self.stride, 1), _conv_out(w, 3, self.stride, 1))

    def init(self, in_shape, rng):
        c = in_shape[0]
        o = self.out_channels
        params = {
            "w1": _glorot(rng, (o, c, 3, 3), c * 9, o * 9),
            "b1": np.zeros(o, dtype=DTYPE),
            "w2": _glorot(rng, (o, o, 3, 3), o * 9, o * 9),
            "b2": np.zeros(o, dtype=DTYPE),
        }
        if self._needs_proj(in_shape):
            params["wp"] = _glorot(rng, (o, c, 1, 1), c, o)
            params["bp"] = np.zeros(o, dtype=DTYPE)
        return params

    def forward(self, params, x):
        h1, cols1 = conv2d_forward(x, params["w1"], params["b1"], self.stride, 1)
        m1 = h1 > 0
        a1 = h1 * m1
        h2, cols2 = conv2d_forward(a1, params["w2"], params["b2"], 1, 1)
        if "wp" in params:
            skip, colsp = conv2d_forward(x, params["wp"], params["bp"], self.stride, 0)
        else:
            skip, colsp = x, None
        z = h2 + skip
        m2 = z > 0
        return z * m2, (x.shape, cols1, m1, a1.shape, cols2, colsp, m2)

    def backward(self, params, cache, dy):
        x_shape, cols1, m1, a1_shape, cols2, colsp, m2 = cache
        dz = dy * m2
        da1, dw2, db2 = conv2d_backward(a1_shape, params["w2"], cols2, dz, 1, 1)
        dh1 = da1 * m1
        dx, dw1, db1 = conv2d_backward(x_shape, params["w1"], cols1, dh1, self.stride, 1)
        grads = {"w1": dw1, "b1": db1, "w2": dw2, "b2": db2}
        if colsp is not None:
            dxp, dwp, dbp = conv2d_backward(x_shape, params["wp"], colsp, dz, self.stride, 0)
            grads["wp"], grads["bp"] = dwp, dbp
            dx = dx + dxp
        else:
            dx = dx + dz
        return grads, dx


LAYER_KINDS = {
    "conv2d": Conv2D,
    "dense": Dense,
    "tanh": Tanh,
    "relu": ReLU,
    "flatten": Flatten,
    "residual-block": ResidualBlock,
}

Layer = Conv2D | Dense | Tanh | ReLU | Flatten | ResidualBlock


def layer_to_dict(layer) -> dict:
    return asdict(layer)


def layer_from_dict(spec: dict):
    spec = dict(spec)
    kind = spec.pop("kind", None)
    if kind not in LAYER_KINDS:
        raise InputError(f"unknown layer kind {kind!r}")
    try:
        return LAYER_KINDS[kind](**spec)
    except TypeError as exc:
        raise InputError(f"bad hyperparameters for {kind}: {exc}") from None


# ---------------------------------------------------------------------------
# network


class Network:
    """An ordered stack of layers bound to a fixed per-sample input shape."""

    def __init__(self, layers: Sequence, input_shape: Sequence[int], params=None):
        self.layers = list(layers)
        self.input_shape = tuple(int(s) for s in input_shape)
        self.shapes = [self.input_shape]
        for layer in self.layers:
            self.shapes.append(tuple(layer.output_shape(self.shapes[-1])))
        if params is None:
            params = [{} for _ in self.layers]
        if len(params) != len(self.layers):
            raise ShapeError("one parameter dict per layer is required")
        self.params = params

    @property
    def output_shape(self):
        return self.shapes[-1]

    def describe(self) -> dict:
        return {
            "input_shape": list(self.input_shape),
            "layers": [layer_to_dict(layer) for layer in self.layers],
        }

    @classmethod
    def from_description(cls, desc: dict) -> "Network":
        return cls([layer_from_dict(d) for d in desc["layers"]], desc["input_shape"])

    def named_parameters(self):
        for i, p in enumerate(self.params):
            for name in sorted(p):
                yield f"backbone.{i}.{name}", p[name]

    def parameter_count(self) -> int:
        return sum(a.size for _, a in self.named_parameters())


def init_parameters(network: Network, seed: int) -> list[dict]:
    """Glorot-uniform weights and zero biases; bit-identical for equal seeds."""
    rng = np.random.default_rng(seed)
    return [
        layer.init(shape, rng) for layer, shape in zip(network.layers, network.shapes[:-1])
    ]


@dataclass
class ForwardRecord:
    """Result of :func:`forward`: every activation (input first) plus layer caches."""

    network_id: int
    activations: list
    caches: list

    @property
    def output(self):
        return self.activations[-1]


def forward(network: Network, batch) -> ForwardRecord:
    x = np.asarray(batch, dtype=DTYPE)
    if x.shape[1:] != network.input_shape:
        raise ShapeError(
            f"batch of shape {x.shape[1:]} does not match network input {network.input_shape}"
        )
    activations = [x]
    caches = []
    for i, (layer, params) in enumerate(zip(network.layers, network.params)):
        x, cache = layer.forward(params, x)
        if not np.isfinite(x).all():
            raise NumericError(f"non-finite activation in layer {i} ({layer.kind})")
        activations.append(x)
        caches.append(cache)
    return ForwardRecord(id(network), activations, caches)


def backward(network: Network, record: ForwardRecord, upstream_grad):
    """Reverse-mode pass. Returns ``(per-layer parameter grads, input grad)``."""
    if record.network_id != id(network) or len(record.caches) != len(network.layers):
        raise StateError("activation record was not produced by this network")
    grad = np.asarray(upstream_grad, dtype=DTYPE)
    if grad.shape != record.output.shape:
        raise StateError(
            f"upstream gradient shape {grad.shape} != output shape {record.output.shape}"
        )
    grads = [None] * len(network.layers)
    for i in range(len(network.layers) - 1, -1, -1):
        layer = network.layers[i]
        grads[i], grad = layer.backward(network.params[i], record.caches[i], grad)
    return grads, grad


# ---------------------------------------------------------------------------
# gradient oracle


def _leaves(params):
    if isinstance(params, np.ndarray):
        return [params]
    if isinstance(params, dict):
        return [params[k] for k in sorted(params)]
    out = []
    for p in params:
        out.extend(_leaves(p))
    return out


def _rebuild(params, flat_grads):
    it = iter(flat_grads)

    def build(p):
        if isinstance(p, np.ndarray):
            return next(it)
        if isinstance(p, dict):
            built = {k: build(p[k]) for k in sorted(p)}
            return {k: built[k] for k in p}
        return [build(q) for q in p]

    return build(params)


def finite_difference_gradient(loss_fn: Callable, params, epsilon: float = 1e-5):
    """Central-difference gradient of ``loss_fn(params)``.

    ``params`` may be an array, a dict of arrays or a (nested) list of those.
    Each coordinate is perturbed in place and restored exactly afterwards. The
    returned gradient mirrors the structure of ``params``.
    """
    if not 1e-7 <= epsilon <= 1e-3:
        raise InputError(f"epsilon {epsilon} outside [1e-7, 1e-3]")
    out = []
    for leaf in _leaves(params):
        g = np.zeros(leaf.shape, dtype=DTYPE)
        flat = leaf.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + epsilon
            up = float(loss_fn(params))
            flat[i] = orig - epsilon
            down = float(loss_fn(params))
            flat[i] = orig
            if not (np.isfinite(up) and np.isfinite(down)):
                raise NumericError(f"non-finite loss while probing coordinate {i}")
            gflat[i] = (up - down) / (2.0 * epsilon)
        out.append(g)
    return _rebuild(params, out)


# ---------------------------------------------------------------------------
# optimizers


@dataclass
class OptimizerState:
    kind: str = "adam"
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list | None = None
    v: list | None = None

    def __post_init__(self):
        if self.kind not in ("adam", "sgd"):
            raise InputError(f"unknown optimizer {self.kind!r}")


def _check_pairs(params, grads):
    if len(params) != len(grads):
        raise ShapeError("parameter and gradient lists differ in length")
    for p, g in zip(params, grads):
        if p.shape != g.shape:
            raise ShapeError(f"gradient shape {g.shape} != parameter shape {p.shape}")


def adam_update(params: list, grads: list, state: OptimizerState):
    """One bias-corrected Adam step. Returns new ``(params, state)``; inputs are not mutated."""
    _check_pairs(params, grads)
    m = state.m if state.m is not None else [np.zeros_like(p) for p in params]
    v = state.v if state.v is not None else [np.zeros_like(p) for p in params]
    step = state.step + 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**step
    c2 = 1.0 - b2**step
    new_p, new_m, new_v = [], [], []
    for p, g, mi, vi in zip(params, grads, m, v):
        mi = b1 * mi + (1.0 - b1) * g
        vi = b2 * vi + (1.0 - b2) * (g * g)
        new_p.append(p - state.lr * (mi / c1) / (np.sqrt(vi / c2) + state.eps))
        new_m.append(mi)
        new_v.append(vi)
    new_state = OptimizerState(
        state.kind, state.lr, b1, b2, state.eps, step, new_m, new_v
    )
    return new_p, new_state


def sgd_update(params: list, grads: list, state: OptimizerState):
    _check_pairs(params, grads)
    new_p = [p - state.lr * g for p, g in zip(params, grads)]
    return new_p, OptimizerState(
        state.kind, state.lr, state.beta1, state.beta2, state.eps, state.step + 1
    )


def optimizer_step(params, grads, state: OptimizerState):
    if state.kind == "adam":
        return adam_update(params, grads, state)
    return sgd_update(params, grads, state)
