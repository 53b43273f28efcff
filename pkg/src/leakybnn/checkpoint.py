"""Binary checkpoints for point networks and variational posteriors.

Layout, all integers u32 and all reals f64, little-endian::

    magic          8 bytes  b"LBNNCKPT"
    version        u32      1
    payload kind   u32      0 = point network, 1 = variational posterior
    alpha          f64      activation slope
    n_in           u32      number of input dims, then n_in x u32 dims
    n_layers       u32
    per layer:     u32 kind (0 = dense, 1 = conv), u32 ndim, ndim x u32 weight dims
    payload        f64 values, C order, tensors in order W0, b0, W1, b1, ...;
                   a posterior stores all mu tensors followed by all rho tensors

The file must end exactly after the payload.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import CheckpointError
from .nn import Architecture, LayerSpec, PointNetwork
from .training import VariationalPosterior

MAGIC = b"LBNNCKPT"
VERSION = 1
KIND_POINT, KIND_POSTERIOR = 0, 1
_LAYER_KINDS = {"dense": 0, "conv": 1}
_LAYER_NAMES = {v: k for k, v in _LAYER_KINDS.items()}


def _header(arch: Architecture, alpha: float, kind: int) -> bytes:
    out = [MAGIC, struct.pack("<IId", VERSION, kind, alpha)]
    out.append(struct.pack(f"<I{len(arch.input_shape)}I", len(arch.input_shape), *arch.input_shape))
    out.append(struct.pack("<I", len(arch.layers)))
    for spec in arch.layers:
        ws = spec.weight_shape
        out.append(struct.pack(f"<II{len(ws)}I", _LAYER_KINDS[spec.kind], len(ws), *ws))
    return b"".join(out)


def _payload(tensors) -> bytes:
    return b"".join(np.ascontiguousarray(t, dtype="<f8").tobytes() for t in tensors)


def dumps(model) -> bytes:
    if isinstance(model, PointNetwork):
        return _header(model.arch, model.alpha, KIND_POINT) + _payload(model.params)
    if isinstance(model, VariationalPosterior):
        return _header(model.arch, model.alpha, KIND_POSTERIOR) + _payload(model.mu) + _payload(model.rho)
    raise TypeError(f"cannot checkpoint {type(model).__name__}")


def save(path, model) -> None:
    Path(path).write_bytes(dumps(model))


class _Reader:
    def __init__(self, raw: bytes, name: str):
        self.raw, self.pos, self.name = raw, 0, name

    def take(self, fmt: str):
        size = struct.calcsize(fmt)
        if self.pos + size > len(self.raw):
            raise CheckpointError(f"{self.name}: truncated at byte {self.pos}")
        vals = struct.unpack_from(fmt, self.raw, self.pos)
        self.pos += size
        return vals

    def tensor(self, shape):
        n = int(np.prod(shape))
        if self.pos + 8 * n > len(self.raw):
            raise CheckpointError(f"{self.name}: truncated payload")
        vals = np.frombuffer(self.raw, dtype="<f8", count=n, offset=self.pos)
        self.pos += 8 * n
        return vals.astype(np.float64).reshape(shape)


def loads(raw: bytes, name: str = "<bytes>"):
    r = _Reader(raw, name)
    if raw[:8] != MAGIC:
        raise CheckpointError(f"{name}: not a checkpoint (bad magic)")
    r.pos = 8
    version, kind, alpha = r.take("<IId")
    if version != VERSION:
        raise CheckpointError(f"{name}: unsupported checkpoint version {version}")
    (n_in,) = r.take("<I")
    input_shape = r.take(f"<{n_in}I")
    (n_layers,) = r.take("<I")
    layers = []
    for _ in range(n_layers):
        lk, nd = r.take("<II")
        if lk not in _LAYER_NAMES:
            raise CheckpointError(f"{name}: unknown layer kind {lk}")
        layers.append(LayerSpec(_LAYER_NAMES[lk], tuple(r.take(f"<{nd}I"))))
    arch = Architecture(tuple(input_shape), tuple(layers))
    shapes = arch.param_shapes()
    if kind == KIND_POINT:
        model = PointNetwork(arch, [r.tensor(s) for s in shapes], alpha)
    elif kind == KIND_POSTERIOR:
        mu = [r.tensor(s) for s in shapes]
        rho = [r.tensor(s) for s in shapes]
        model = VariationalPosterior(arch, mu, rho, alpha)
    else:
        raise CheckpointError(f"{name}: unknown payload kind {kind}")
    if r.pos != len(raw):
        raise CheckpointError(f"{name}: {len(raw) - r.pos} trailing bytes")
    return model


def load(path):
    path = Path(path)
    return loads(path.read_bytes(), str(path))
