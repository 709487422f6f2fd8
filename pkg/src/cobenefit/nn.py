"""Small CNN toolkit in float64 with exact backward passes.

Tensors are ``(N, C, H, W)`` for the spatial layers and ``(N, F)`` after
flattening. Convolution and pooling use valid padding. Each layer keeps
what it needs from the last ``forward`` call, so ``backward`` must follow
the matching ``forward``.
"""
from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ShapeError(ValueError):
    pass


def out_size(n: int, kernel: int, stride: int) -> int:
    if kernel > n:
        raise ShapeError(f"kernel {kernel} larger than input {n}")
    return (n - kernel) // stride + 1


def _windows(x, kernel, stride):
    # (N, C, Ho, Wo, k, k) view
    v = sliding_window_view(x, (kernel, kernel), axis=(2, 3))
    return v[:, :, ::stride, ::stride]


def he_init(shape, fan_in: int, rng) -> np.ndarray:
    """Normal(0, 2/fan_in) weights; ``rng`` may be a seed or a Generator."""
    if fan_in < 1:
        raise ValueError("fan_in must be >= 1")
    rng = np.random.default_rng(rng)
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)


class Layer:
    name = "layer"

    def __init__(self):
        self.params = {}
        self.grads = {}
        self.buffers = {}

    def forward(self, x, train=False, rng=None):
        raise NotImplementedError

    def backward(self, dout):
        raise NotImplementedError

    def output_shape(self, shape):
        return shape


class Conv2D(Layer):
    def __init__(self, in_channels, filters, kernel, stride=1, rng=None, name="conv"):
        super().__init__()
        if kernel < 1 or stride < 1:
            raise ValueError("kernel and stride must be >= 1")
        self.name = name
        self.kernel, self.stride = int(kernel), int(stride)
        fan_in = in_channels * kernel * kernel
        self.params["W"] = he_init((filters, in_channels, kernel, kernel), fan_in, rng)
        self.params["b"] = np.zeros(filters)

    def output_shape(self, shape):
        c, h, w = shape
        return (self.params["W"].shape[0], out_size(h, self.kernel, self.stride),
                out_size(w, self.kernel, self.stride))

    def forward(self, x, train=False, rng=None):
        k, s = self.kernel, self.stride
        n, c, h, w = x.shape
        ho, wo = out_size(h, k, s), out_size(w, k, s)
        cols = _windows(x, k, s).transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * k * k)
        W = self.params["W"]
        out = cols @ W.reshape(W.shape[0], -1).T + self.params["b"]
        self._cache = (x.shape, cols, ho, wo)
        return out.reshape(n, ho, wo, -1).transpose(0, 3, 1, 2)

    def backward(self, dout):
        (n, c, h, w), cols, ho, wo = self._cache
        k, s = self.kernel, self.stride
        W = self.params["W"]
        f = W.shape[0]
        dcols_out = dout.transpose(0, 2, 3, 1).reshape(-1, f)
        self.grads["W"] = (dcols_out.T @ cols).reshape(W.shape)
        self.grads["b"] = dcols_out.sum(axis=0)
        dcols = (dcols_out @ W.reshape(f, -1)).reshape(n, ho, wo, c, k, k)
        dx = np.zeros((n, c, h, w))
        for i in range(k):
            for j in range(k):
                dx[:, :, i:i + s * (ho - 1) + 1:s, j:j + s * (wo - 1) + 1:s] += \
                    dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        return dx


class MaxPool2D(Layer):
    """Max pooling; ties go to the first maximal element in row-major order."""

    def __init__(self, kernel, stride=None, name="pool"):
        super().__init__()
        self.name = name
        self.kernel = int(kernel)
        self.stride = int(stride or kernel)
        if self.kernel < 1 or self.stride < 1:
            raise ValueError("kernel and stride must be >= 1")

    def output_shape(self, shape):
        c, h, w = shape
        return (c, out_size(h, self.kernel, self.stride), out_size(w, self.kernel, self.stride))

    def forward(self, x, train=False, rng=None):
        k, s = self.kernel, self.stride
        n, c, h, w = x.shape
        ho, wo = out_size(h, k, s), out_size(w, k, s)
        flat = _windows(x, k, s).reshape(n, c, ho, wo, k * k)
        arg = flat.argmax(axis=-1)
        self._cache = (x.shape, arg, ho, wo)
        return np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def backward(self, dout):
        shape, arg, ho, wo = self._cache
        k, s = self.kernel, self.stride
        dx = np.zeros(shape)
        for i in range(k):
            for j in range(k):
                hit = arg == i * k + j
                if hit.any():
                    dx[:, :, i:i + s * (ho - 1) + 1:s, j:j + s * (wo - 1) + 1:s] += dout * hit
        return dx


class BatchNorm2D(Layer):
    """Per-channel batch normalization over (N, H, W).

    Running statistics follow ``running = momentum * running + (1 - momentum) * batch``.
    """

    def __init__(self, channels, momentum=0.9, eps=1e-5, name="bn"):
        super().__init__()
        self.name = name
        self.momentum, self.eps = momentum, eps
        self.params["gamma"] = np.ones(channels)
        self.params["beta"] = np.zeros(channels)
        self.buffers["running_mean"] = np.zeros(channels)
        self.buffers["running_var"] = np.ones(channels)

    def forward(self, x, train=False, rng=None):
        gamma = self.params["gamma"][None, :, None, None]
        beta = self.params["beta"][None, :, None, None]
        if train:
            if x.shape[0] < 2:
                raise ValueError(f"{self.name}: batch normalization needs a batch of at least 2 in train mode")
            mu = x.mean(axis=(0, 2, 3))
            var = x.var(axis=(0, 2, 3))
            m = self.momentum
            self.buffers["running_mean"] = m * self.buffers["running_mean"] + (1 - m) * mu
            self.buffers["running_var"] = m * self.buffers["running_var"] + (1 - m) * var
        else:
            mu = self.buffers["running_mean"]
            var = self.buffers["running_var"]
        inv = 1.0 / np.sqrt(var + self.eps)
        xhat = (x - mu[None, :, None, None]) * inv[None, :, None, None]
        self._cache = (xhat, inv, train)
        return gamma * xhat + beta

    def backward(self, dout):
        xhat, inv, train = self._cache
        self.grads["gamma"] = (dout * xhat).sum(axis=(0, 2, 3))
        self.grads["beta"] = dout.sum(axis=(0, 2, 3))
        dxhat = dout * self.params["gamma"][None, :, None, None]
        if not train:
            return dxhat * inv[None, :, None, None]
        mean_d = dxhat.mean(axis=(0, 2, 3), keepdims=True)
        mean_dx = (dxhat * xhat).mean(axis=(0, 2, 3), keepdims=True)
        return (dxhat - mean_d - xhat * mean_dx) * inv[None, :, None, None]


class Dropout(Layer):
    """Inverted dropout: survivors scaled by 1/(1-rate) in train mode."""

    def __init__(self, rate, name="dropout"):
        super().__init__()
        if not 0.0 <= rate < 1.0:
            raise ValueError("dropout rate must be in [0, 1)")
        self.name = name
        self.rate = float(rate)

    def forward(self, x, train=False, rng=None):
        if not train or self.rate == 0.0:
            self._mask = None
            return x
        rng = np.random.default_rng(rng)
        self._mask = (rng.random(x.shape) >= self.rate) / (1.0 - self.rate)
        return x * self._mask

    def backward(self, dout):
        return dout if self._mask is None else dout * self._mask


class ReLU(Layer):
    name = "relu"

    def forward(self, x, train=False, rng=None):
        self._pos = x > 0
        return np.where(self._pos, x, 0.0)

    def backward(self, dout):
        return dout * self._pos


class Flatten(Layer):
    name = "flatten"

    def output_shape(self, shape):
        return (int(np.prod(shape)),)

    def forward(self, x, train=False, rng=None):
        self._shape = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, dout):
        return dout.reshape(self._shape)


class Dense(Layer):
    def __init__(self, in_features, out_features, rng=None, name="dense"):
        super().__init__()
        self.name = name
        self.params["W"] = he_init((in_features, out_features), in_features, rng)
        self.params["b"] = np.zeros(out_features)

    def output_shape(self, shape):
        return (self.params["W"].shape[1],)

    def forward(self, x, train=False, rng=None):
        self._x = x
        return x @ self.params["W"] + self.params["b"]

    def backward(self, dout):
        self.grads["W"] = self._x.T @ dout
        self.grads["b"] = dout.sum(axis=0)
        return dout @ self.params["W"].T


# --- optimizer ---------------------------------------------------------------

@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict, grads: dict, state: AdamState) -> None:
    """One bias-corrected Adam update, in place on ``params``.

    ``params`` and ``grads`` map names (``"layer.param"``) to arrays.
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient in {name}")
        if g.shape != params[name].shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {name} {params[name].shape}")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    for name, g in grads.items():
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(g)
            state.v[name] = np.zeros_like(g)
        v = state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        mhat = m / (1 - b1 ** t)
        vhat = v / (1 - b2 ** t)
        params[name] -= state.lr * mhat / (np.sqrt(vhat) + state.eps)


# --- gradient checking -------------------------------------------------------

def rel_err(a, b, floor=1e-12):
    a, b = float(a), float(b)
    scale = max(abs(a), abs(b))
    if scale < floor:
        return 0.0
    return abs(a - b) / scale


def finite_diff_check(f, grad, point, direction=None, step=1e-5):
    """Compare an analytic gradient with a central difference.

    Parameters
    ----------
    f : callable
        Scalar function of an array shaped like ``point``.
    grad : array
        Analytic gradient of ``f`` at ``point``.
    direction : array, optional
        Probe direction; defaults to a single unit coordinate at index 0.
        Scale it to the natural size of the inputs.

    Returns
    -------
    (analytic, numeric, rel_err)
    """
    point = np.asarray(point, dtype=float)
    if direction is None:
        direction = np.zeros_like(point)
        direction.flat[0] = 1.0
    direction = np.asarray(direction, dtype=float)
    analytic = float(np.sum(np.asarray(grad) * direction))
    numeric = (f(point + step * direction) - f(point - step * direction)) / (2 * step)
    return analytic, float(numeric), rel_err(analytic, numeric)


# --- checkpoints -------------------------------------------------------------

MAGIC = b"CBCKPT01"
VERSION = 1


def save_checkpoint(path, tensors) -> None:
    """Write named float64 tensors.

    Layout (little-endian): 8-byte magic, u32 version, u32 tensor count;
    per tensor u16 name length, utf-8 name, u32 ndim, ndim x u32 dims,
    row-major float64 values; finally u32 CRC32 of everything before it.
    """
    buf = bytearray(MAGIC)
    buf += struct.pack("<II", VERSION, len(tensors))
    for name, arr in tensors:
        arr = np.require(np.asarray(arr, dtype="<f8"), requirements="C")
        raw = name.encode("utf-8")
        buf += struct.pack("<H", len(raw)) + raw
        buf += struct.pack("<I", arr.ndim)
        buf += struct.pack(f"<{arr.ndim}I", *arr.shape)
        buf += arr.tobytes()
    buf += struct.pack("<I", zlib.crc32(bytes(buf)) & 0xFFFFFFFF)
    with open(path, "wb") as fh:
        fh.write(bytes(buf))


class CheckpointError(ValueError):
    pass


def load_checkpoint(path) -> list:
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < len(MAGIC) + 12 or data[:len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    if zlib.crc32(body) & 0xFFFFFFFF != crc:
        raise CheckpointError(f"{path}: CRC mismatch")
    pos = len(MAGIC)
    version, count = struct.unpack_from("<II", body, pos)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    pos += 8
    tensors = []
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", body, pos)
        pos += 2
        name = body[pos:pos + nlen].decode("utf-8")
        pos += nlen
        (ndim,) = struct.unpack_from("<I", body, pos)
        pos += 4
        shape = struct.unpack_from(f"<{ndim}I", body, pos)
        pos += 4 * ndim
        size = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(body, dtype="<f8", count=size, offset=pos).reshape(shape).astype(float)
        pos += 8 * size
        tensors.append((name, arr))
    if pos != len(body):
        raise CheckpointError(f"{path}: trailing bytes")
    return tensors
