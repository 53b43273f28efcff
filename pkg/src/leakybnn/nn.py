"""Dense / convolutional networks with a Leaky-ReLU slope and exact backprop.

Everything is float64 numpy.  Parameters live in a flat list
``[W0, b0, W1, b1, ...]`` so point networks, gradients, Adam moments and
variational posteriors all share one layout.

Every layer except the last is hidden: dense hidden layers are followed by
the activation, conv layers by the activation and a 2x2 max-pool.  The last
layer is a linear dense map to the logits.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ShapeMismatch


# ---------------------------------------------------------------- activation

def leaky_relu(x, alpha: float):
    x = np.asarray(x, dtype=np.float64)
    return np.where(x > 0, x, alpha * x)


def leaky_relu_grad(x, alpha: float):
    # subgradient at exactly 0 is alpha
    x = np.asarray(x, dtype=np.float64)
    return np.where(x > 0, 1.0, alpha)


# ---------------------------------------------------------------- primitives

def conv2d_forward(x, K, b):
    """Valid cross-correlation, stride 1.  x: (n, C, H, W), K: (O, C, kh, kw)."""
    if x.ndim != 4 or K.ndim != 4 or x.shape[1] != K.shape[1]:
        raise ShapeMismatch(f"conv input {x.shape} vs kernel {K.shape}")
    kh, kw = K.shape[2:]
    if x.shape[2] < kh or x.shape[3] < kw:
        raise ShapeMismatch(f"conv input {x.shape} smaller than kernel {K.shape}")
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))  # (n, C, Ho, Wo, kh, kw)
    out = np.tensordot(win, K, axes=([1, 4, 5], [1, 2, 3]))  # (n, Ho, Wo, O)
    return out.transpose(0, 3, 1, 2) + b[None, :, None, None]


def conv2d_backward(x, K, dout):
    """Returns (dx, dK, db) for ``conv2d_forward``."""
    kh, kw = K.shape[2:]
    Ho, Wo = dout.shape[2:]
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))
    dK = np.tensordot(dout, win, axes=([0, 2, 3], [0, 2, 3]))  # (O, C, kh, kw)
    db = dout.sum(axis=(0, 2, 3))
    dx = np.zeros_like(x)
    for p in range(kh):
        for q in range(kw):
            dx[:, :, p:p + Ho, q:q + Wo] += np.tensordot(dout, K[:, :, p, q], axes=([1], [0])).transpose(0, 3, 1, 2)
    return dx, dK, db


def maxpool2x2_forward(x):
    """2x2 / stride-2 max-pool; odd trailing rows/cols are dropped.

    Returns the pooled map and the argmax inside each window (row-major,
    first maximum wins).
    """
    n, c, h, w = x.shape
    h2, w2 = h // 2, w // 2
    if h2 == 0 or w2 == 0:
        raise ShapeMismatch(f"cannot pool a {h}x{w} map")
    blocks = x[:, :, :2 * h2, :2 * w2].reshape(n, c, h2, 2, w2, 2).transpose(0, 1, 2, 4, 3, 5)
    blocks = blocks.reshape(n, c, h2, w2, 4)
    idx = np.argmax(blocks, axis=-1)
    return np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0], idx


def maxpool2x2_backward(dout, idx, in_shape):
    n, c, h, w = in_shape
    h2, w2 = dout.shape[2:]
    blocks = np.zeros((n, c, h2, w2, 4))
    np.put_along_axis(blocks, idx[..., None], dout[..., None], axis=-1)
    blocks = blocks.reshape(n, c, h2, w2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, 2 * h2, 2 * w2)
    dx = np.zeros(in_shape)
    dx[:, :, :2 * h2, :2 * w2] = blocks
    return dx


# ---------------------------------------------------------------- architecture

@dataclass(frozen=True)
class LayerSpec:
    kind: str  # "dense" | "conv"
    weight_shape: tuple[int, ...]

    @property
    def bias_len(self) -> int:
        return self.weight_shape[0]


@dataclass(frozen=True)
class Architecture:
    input_shape: tuple[int, ...]
    layers: tuple[LayerSpec, ...]

    def __post_init__(self):
        if not self.layers:
            raise ShapeMismatch("architecture has no layers")
        if self.layers[-1].kind != "dense":
            raise ShapeMismatch("the output layer must be dense")
        shape = tuple(self.input_shape)
        for i, spec in enumerate(self.layers):
            shape = _layer_out_shape(spec, shape, hidden=i < len(self.layers) - 1, index=i)

    @property
    def n_out(self) -> int:
        return self.layers[-1].weight_shape[0]

    def param_shapes(self) -> list[tuple[int, ...]]:
        out = []
        for spec in self.layers:
            out += [tuple(spec.weight_shape), (spec.bias_len,)]
        return out

    def is_hidden(self, layer: int) -> bool:
        return layer < len(self.layers) - 1


def _layer_out_shape(spec, shape, hidden, index):
    if spec.kind == "dense":
        fan_in = int(np.prod(shape))
        if spec.weight_shape[1] != fan_in:
            raise ShapeMismatch(f"layer {index}: dense expects {spec.weight_shape[1]} inputs, gets {fan_in}")
        return (spec.weight_shape[0],)
    if spec.kind == "conv":
        if len(shape) == 2:
            shape = (1,) + tuple(shape)
        o, c, kh, kw = spec.weight_shape
        if len(shape) != 3 or shape[0] != c:
            raise ShapeMismatch(f"layer {index}: conv expects {c} channels, gets shape {shape}")
        h, w = shape[1] - kh + 1, shape[2] - kw + 1
        if h < 1 or w < 1:
            raise ShapeMismatch(f"layer {index}: map {shape} smaller than kernel")
        if hidden:
            h, w = h // 2, w // 2
            if h < 1 or w < 1:
                raise ShapeMismatch(f"layer {index}: map too small to pool")
        return (o, h, w)
    raise ShapeMismatch(f"layer {index}: unknown kind {spec.kind!r}")


def mlp(hidden=(64, 64), input_shape=(28, 28), n_out: int = 10) -> Architecture:
    sizes = [int(np.prod(input_shape)), *hidden, n_out]
    return Architecture(tuple(input_shape), tuple(LayerSpec("dense", (o, i)) for i, o in zip(sizes[:-1], sizes[1:])))


def convnet(channels=(8, 16), kernel: int = 3, input_shape=(28, 28), n_out: int = 10) -> Architecture:
    layers = []
    shape = tuple(input_shape) if len(input_shape) == 3 else (1,) + tuple(input_shape)
    for c_out in channels:
        spec = LayerSpec("conv", (c_out, shape[0], kernel, kernel))
        shape = _layer_out_shape(spec, shape, True, len(layers))
        layers.append(spec)
    layers.append(LayerSpec("dense", (n_out, int(np.prod(shape)))))
    return Architecture(tuple(input_shape), tuple(layers))


def init_params(arch: Architecture, rng: np.random.Generator) -> list[np.ndarray]:
    """He-normal weights (variance 2 / fan_in), zero biases."""
    params = []
    for spec in arch.layers:
        fan_in = int(np.prod(spec.weight_shape[1:]))
        params.append(rng.normal(0.0, np.sqrt(2.0 / fan_in), size=spec.weight_shape))
        params.append(np.zeros(spec.bias_len))
    return params


@dataclass
class PointNetwork:
    arch: Architecture
    params: list[np.ndarray]
    alpha: float = 0.0

    def __post_init__(self):
        check_params(self.arch, self.params)
        if not -1.0 <= self.alpha <= 1.0:
            raise ValueError(f"activation slope {self.alpha} outside [-1, 1]")

    def copy(self) -> "PointNetwork":
        return PointNetwork(self.arch, [p.copy() for p in self.params], self.alpha)

    @property
    def n_params(self) -> int:
        return sum(p.size for p in self.params)

    def weight(self, layer: int) -> np.ndarray:
        return self.params[2 * layer]

    def bias(self, layer: int) -> np.ndarray:
        return self.params[2 * layer + 1]


def check_params(arch: Architecture, params) -> None:
    shapes = arch.param_shapes()
    if len(params) != len(shapes):
        raise ShapeMismatch(f"expected {len(shapes)} parameter tensors, got {len(params)}")
    for k, (p, s) in enumerate(zip(params, shapes)):
        if tuple(p.shape) != s:
            raise ShapeMismatch(f"parameter {k}: shape {p.shape}, expected {s}")


# ---------------------------------------------------------------- forward / backward

@dataclass
class LayerCache:
    h: np.ndarray  # layer input, shaped as the layer consumes it
    a: np.ndarray  # pre-activation
    z: np.ndarray | None = None  # post-activation (hidden layers)
    pool_idx: np.ndarray | None = None


def _as_layer_input(spec: LayerSpec, h):
    n = h.shape[0]
    if spec.kind == "dense":
        return h.reshape(n, -1)
    if h.ndim == 3:
        return h[:, None]
    return h


def forward_arrays(arch: Architecture, params, alpha: float, x, start: int = 0):
    """Run layers ``start..end`` on ``x`` (the input of layer ``start``)."""
    h = np.asarray(x, dtype=np.float64)
    if start == 0 and tuple(h.shape[1:]) != tuple(arch.input_shape):
        raise ShapeMismatch(f"batch shape {h.shape[1:]} does not match input {arch.input_shape}")
    caches = []
    last = len(arch.layers) - 1
    for i in range(start, len(arch.layers)):
        spec = arch.layers[i]
        W, b = params[2 * i], params[2 * i + 1]
        h = _as_layer_input(spec, h)
        if spec.kind == "dense":
            a = h @ W.T + b
        else:
            a = conv2d_forward(h, W, b)
        c = LayerCache(h=h, a=a)
        if i == last:
            caches.append(c)
            return a, caches
        c.z = leaky_relu(a, alpha)
        out = c.z
        if spec.kind == "conv":
            out, c.pool_idx = maxpool2x2_forward(c.z)
        caches.append(c)
        h = out
    raise AssertionError("unreachable")


def forward(net: PointNetwork, batch):
    """Logits plus the per-layer cache of inputs, pre- and post-activations."""
    return forward_arrays(net.arch, net.params, net.alpha, batch)


def log_softmax(logits):
    m = logits.max(axis=1, keepdims=True)
    shifted = logits - m
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def softmax(logits):
    return np.exp(log_softmax(logits))


def nll_and_dlogits(logits, labels):
    labels = np.asarray(labels)
    n = logits.shape[0]
    if labels.shape != (n,):
        raise ShapeMismatch(f"{labels.shape[0] if labels.ndim else 0} labels for {n} rows")
    if n and (labels.min() < 0 or labels.max() >= logits.shape[1]):
        raise ShapeMismatch(f"labels must lie in [0, {logits.shape[1]})")
    logp = log_softmax(logits)
    nll = -logp[np.arange(n), labels]
    d = np.exp(logp)
    d[np.arange(n), labels] -= 1.0
    return nll.mean(), d / n


def backward_arrays(arch: Architecture, params, alpha: float, caches, dlogits, start: int = 0):
    """Reverse pass; returns gradients for layers ``start..end`` (None elsewhere)."""
    grads = [None] * len(params)
    g = dlogits
    for i in range(len(arch.layers) - 1, start - 1, -1):
        spec, c = arch.layers[i], caches[i - start]
        W = params[2 * i]
        if i < len(arch.layers) - 1:
            if spec.kind == "conv":
                g = maxpool2x2_backward(g.reshape(c.pool_idx.shape), c.pool_idx, c.z.shape)
            g = g.reshape(c.a.shape) * leaky_relu_grad(c.a, alpha)
        if spec.kind == "dense":
            grads[2 * i] = g.T @ c.h
            grads[2 * i + 1] = g.sum(axis=0)
            if i > start:
                g = g @ W
        else:
            dx, dK, db = conv2d_backward(c.h, W, g)
            grads[2 * i], grads[2 * i + 1] = dK, db
            g = dx
    return grads


def loss_and_grads(net: PointNetwork, batch, labels):
    """Mean softmax cross-entropy and its exact gradient for every parameter."""
    logits, caches = forward(net, batch)
    nll, d = nll_and_dlogits(logits, labels)
    return nll, backward_arrays(net.arch, net.params, net.alpha, caches, d)


def predict_proba(net: PointNetwork, batch, chunk: int = 2048):
    out = []
    for s in range(0, len(batch), chunk):
        logits, _ = forward(net, batch[s:s + chunk])
        out.append(softmax(logits))
    return np.concatenate(out) if out else np.zeros((0, net.arch.n_out))
