"""Hybrid CNN + linear regression of station concentrations.

The CNN branch reads the per-window standardized tensor; the linear branch
reads the raw channel means of the window, standardized with training-set
statistics. The prediction is the sum of the two branches.
"""
from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass

import numpy as np

from . import nn
from .grid import EMISSION_CHANNELS, K, GridStack, normalize_batch


class BuildError(ValueError):
    """Raised when a hyperparameter combination has no valid shape algebra."""


# Dimension order here is also the lexicographic order used by grid search.
SEARCH_SPACE = {
    "iterations": [100, 300, 500],
    "batch_size": [20, 50, 100, 200],
    "conv_layers": [1, 2, 3, 4, 5],
    "filters": [20, 50, 80, 100],
    "conv_kernel": [2, 3, 4, 5, 6],
    "conv_stride": [1, 2],
    "pool_kernel": [2, 3, 4, 5, 6],
    "pool_stride": [1, 2],
    "dropout": [True, False],
    "dropout_rate": [0.0, 0.1, 0.2, 0.5],
    "batchnorm": [True, False],
    "fc_layers": [1, 2, 3],
    "fc_width": [50, 100, 200],
    "augmentation": [True, False],
    "aug_variance": [0.05, 0.1, 0.2],
}

PRUNED_SPACE = {
    "iterations": [500],
    "batch_size": [200],
    "conv_layers": [1, 2],
    "filters": [20, 50, 80],
    "conv_kernel": [2, 3],
    "conv_stride": [2],
    "pool_kernel": [2],
    "pool_stride": [2],
    "dropout": [True, False],
    "dropout_rate": [0.1],
    "batchnorm": [True, False],
    "fc_layers": [1, 2],
    "fc_width": [200],
    "augmentation": [True, False],
    "aug_variance": [0.05, 0.1],
}

LEARNING_RATES = [1e-2, 1e-3, 1e-4]


@dataclass(frozen=True)
class HyperParams:
    iterations: int = 500
    batch_size: int = 200
    conv_layers: int = 1
    filters: int = 20
    conv_kernel: int = 2
    conv_stride: int = 2
    pool_kernel: int = 2
    pool_stride: int = 2
    dropout: bool = False
    dropout_rate: float = 0.1
    batchnorm: bool = False
    fc_layers: int = 1
    fc_width: int = 200
    augmentation: bool = False
    aug_variance: float = 0.05
    learning_rate: float = 1e-3
    half_extent: int = 30

    @property
    def window(self):
        return 2 * self.half_extent + 1

    def replace(self, **kw):
        return dataclasses.replace(self, **kw)

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d):
        names = {f.name: f.type for f in dataclasses.fields(cls)}
        unknown = set(d) - set(names)
        if unknown:
            raise ValueError(f"unknown hyperparameters: {sorted(unknown)}")
        out = {}
        for key, value in d.items():
            default = getattr(cls, key)
            if isinstance(default, bool):
                if isinstance(value, str):
                    value = value.strip().lower() in ("1", "true", "yes")
                out[key] = bool(value)
            elif isinstance(default, int):
                out[key] = int(value)
            else:
                out[key] = float(value)
        return cls(**out)

    def out_of_space(self, space=SEARCH_SPACE):
        """Names of fields whose value is not in ``space``."""
        return [k for k, vals in space.items() if getattr(self, k) not in vals]


@dataclass(frozen=True)
class Prediction:
    station_id: str
    y_hat: float
    f_c: float
    f_l: float


def _build_layers(hyper: HyperParams, input_shape, rng):
    layers = []
    shape = tuple(input_shape)

    def add(layer):
        nonlocal shape
        try:
            shape = layer.output_shape(shape)
        except nn.ShapeError as exc:
            raise BuildError(f"{layer.name}: {exc} (input {shape})") from None
        layers.append(layer)

    for i in range(hyper.conv_layers):
        add(nn.Conv2D(shape[0], hyper.filters, hyper.conv_kernel, hyper.conv_stride, rng, name=f"conv{i + 1}"))
        if hyper.batchnorm:
            add(nn.BatchNorm2D(shape[0], name=f"bn{i + 1}"))
        add(nn.ReLU())
        add(nn.MaxPool2D(hyper.pool_kernel, hyper.pool_stride, name=f"pool{i + 1}"))
        if hyper.dropout:
            add(nn.Dropout(hyper.dropout_rate, name=f"dropout{i + 1}"))
    add(nn.Flatten())
    for i in range(hyper.fc_layers):
        add(nn.Dense(shape[0], hyper.fc_width, rng, name=f"fc{i + 1}"))
        add(nn.ReLU())
        if hyper.dropout:
            add(nn.Dropout(hyper.dropout_rate, name=f"fc_dropout{i + 1}"))
    add(nn.Dense(shape[0], 1, rng, name="head"))
    return layers


class ResCNN:
    """CNN branch + linear branch.

    ``f_c = y_scale * cnn(z)`` and ``f_l = y_scale * (w . u + b)`` where
    ``u = (mean - mean_center) / mean_scale``. The output scale and the
    standardization constants come from :meth:`set_stats`; they are fixed,
    not trained.
    """

    def __init__(self, hyper: HyperParams, seed=0, n_channels=K):
        self.hyper = hyper
        self.input_shape = (n_channels, hyper.window, hyper.window)
        rng = np.random.default_rng(seed)
        self.layers = _build_layers(hyper, self.input_shape, rng)
        self.linear_w = np.zeros(n_channels)
        self.linear_b = np.zeros(1)
        self.mean_center = None
        self.mean_scale = None
        self.y_scale = None

    # -- parameters

    def parameters(self) -> dict:
        params = {}
        for i, layer in enumerate(self.layers):
            for key, arr in layer.params.items():
                params[f"{i}.{layer.name}.{key}"] = arr
        params["linear.w"] = self.linear_w
        params["linear.b"] = self.linear_b
        return params

    def gradients(self) -> dict:
        grads = {}
        for i, layer in enumerate(self.layers):
            for key, arr in layer.grads.items():
                grads[f"{i}.{layer.name}.{key}"] = arr
        grads["linear.w"] = self._grad_w
        grads["linear.b"] = self._grad_b
        return grads

    def buffers(self) -> dict:
        out = {}
        for i, layer in enumerate(self.layers):
            for key, arr in layer.buffers.items():
                out[f"{i}.{layer.name}.{key}"] = arr
        return out

    @property
    def has_stats(self):
        return self.y_scale is not None

    def set_stats(self, train_means, train_y, weights=None):
        """Fix the linear-branch standardization and the output scale from
        the training set, and start the intercept at the weighted mean."""
        train_means = np.asarray(train_means, dtype=float)
        train_y = np.asarray(train_y, dtype=float)
        w = np.ones(len(train_y)) if weights is None else np.asarray(weights, dtype=float)
        w = w / w.sum()
        center = w @ train_means
        scale = np.sqrt(w @ (train_means - center) ** 2)
        scale = np.where(scale > 1e-12 * np.maximum(1.0, np.abs(center)), scale, 1.0)
        y_mean = float(w @ train_y)
        y_std = float(np.sqrt(w @ (train_y - y_mean) ** 2))
        self.mean_center = center
        self.mean_scale = scale
        self.y_scale = y_std if y_std > 0 else 1.0
        self.linear_b[:] = y_mean / self.y_scale

    # -- forward / backward

    def forward(self, z, means, train=False, rng=None):
        """Batch forward. Returns ``(y_hat, f_c, f_l)``, each of shape (N,)."""
        if not self.has_stats:
            raise ValueError("model has no standardization statistics; call set_stats first")
        h = z
        for layer in self.layers:
            h = layer.forward(h, train=train, rng=rng)
        f_c = self.y_scale * h[:, 0]
        u = (means - self.mean_center) / self.mean_scale
        self._u = u
        f_l = self.y_scale * (u @ self.linear_w + self.linear_b[0])
        return f_c + f_l, f_c, f_l

    def backward(self, dy):
        """Backpropagate ``dL/dy_hat`` (N,). Fills parameter gradients and
        returns ``(dL/dz, dL/dmeans)``."""
        g = self.y_scale * dy
        self._grad_w = self._u.T @ g
        self._grad_b = np.array([g.sum()])
        dmeans = np.outer(g, self.linear_w / self.mean_scale)
        d = g[:, None]
        for layer in reversed(self.layers):
            d = layer.backward(d)
        return d, dmeans

    # -- raw-window helpers

    def predict_raw(self, raw):
        """Eval-mode ``(y_hat, f_c, f_l)`` for raw windows ``(N, K, H, W)``."""
        z, mean, _, _ = normalize_batch(raw)
        return self.forward(z, mean, train=False)

    def input_gradients(self, raw):
        """d y_hat / d raw for raw windows ``(N, K, H, W)``, eval mode.

        Includes the Jacobian of the per-window standardization: the mean
        and standard deviation of each channel depend on every cell.
        """
        raw = np.asarray(raw, dtype=float)
        z, mean, std, degenerate = normalize_batch(raw)
        self.forward(z, mean, train=False)
        dz, dmeans = self.backward(np.ones(len(raw)))
        cells = raw.shape[2] * raw.shape[3]
        gz_mean = dz.mean(axis=(2, 3), keepdims=True)
        gzz_mean = (dz * z).mean(axis=(2, 3), keepdims=True)
        safe = np.where(degenerate, 1.0, std)[..., None, None]
        dx = (dz - gz_mean - z * gzz_mean) / safe
        dx[degenerate] = 0.0
        return dx + dmeans[..., None, None] / cells


def build_model(hyper: HyperParams, seed=0, n_channels=K) -> ResCNN:
    """He-initialized model; raises :class:`BuildError` on shape underflow."""
    return ResCNN(hyper, seed=seed, n_channels=n_channels)


def predict(model: ResCNN, stack: GridStack, mode="eval", rng=None) -> Prediction:
    if stack.normalized is None or stack.mean is None:
        raise ValueError(f"stack for {stack.station_id} is not normalized")
    y, f_c, f_l = model.forward(stack.normalized[None], stack.mean[None], train=(mode == "train"), rng=rng)
    return Prediction(stack.station_id, float(y[0]), float(f_c[0]), float(f_l[0]))


def input_gradient(model: ResCNN, stack: GridStack) -> np.ndarray:
    """d y_hat / d raw window, shape ``(K, H, W)``, in concentration units
    per input unit."""
    return model.input_gradients(stack.raw[None])[0]


def emission_gradient(grad):
    """Restrict a gradient window to the emission channels; geography
    gradients are computed but not used for damage accounting."""
    return grad[..., list(EMISSION_CHANNELS), :, :]


# --- augmentation ----------------------------------------------------------

TRANSFORMS = ("identity", "rot90", "rot180", "rot270", "flip_h", "flip_v")


def apply_transform(x, name):
    """Apply a spatial symmetry to the last two axes of ``x``."""
    if name == "identity":
        return x.copy()
    if name == "rot90":
        return np.rot90(x, 1, axes=(-2, -1)).copy()
    if name == "rot180":
        return np.rot90(x, 2, axes=(-2, -1)).copy()
    if name == "rot270":
        return np.rot90(x, 3, axes=(-2, -1)).copy()
    if name == "flip_h":
        return x[..., :, ::-1].copy()
    if name == "flip_v":
        return x[..., ::-1, :].copy()
    raise ValueError(f"unknown transform {name!r}")


def augment(z, rng, variance):
    """Random symmetry plus Gaussian noise of the given variance.

    ``z`` is one normalized window ``(K, H, W)`` or a batch ``(N, K, H, W)``;
    in a batch each sample gets its own transform. Targets are untouched.
    """
    rng = np.random.default_rng(rng)
    if z.ndim == 3:
        out = apply_transform(z, TRANSFORMS[rng.integers(len(TRANSFORMS))])
    else:
        picks = rng.integers(len(TRANSFORMS), size=len(z))
        out = np.stack([apply_transform(x, TRANSFORMS[p]) for x, p in zip(z, picks)])
    if variance > 0:
        out += rng.normal(0.0, np.sqrt(variance), size=out.shape)
    return out


# --- bundle -----------------------------------------------------------------

def save_model(model: ResCNN, directory) -> list:
    """Write ``model.ckpt`` (weights and batchnorm buffers) and
    ``model.json`` (hyperparameters and standardization statistics)."""
    os.makedirs(directory, exist_ok=True)
    tensors = list(model.parameters().items()) + list(model.buffers().items())
    ckpt = os.path.join(directory, "model.ckpt")
    nn.save_checkpoint(ckpt, tensors)
    sidecar = os.path.join(directory, "model.json")
    meta = {
        "hyperparams": model.hyper.to_dict(),
        "n_channels": model.input_shape[0],
        "mean_center": [float(x) for x in model.mean_center],
        "mean_scale": [float(x) for x in model.mean_scale],
        "y_scale": float(model.y_scale),
    }
    with open(sidecar, "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return [ckpt, sidecar]


def load_model(directory) -> ResCNN:
    with open(os.path.join(directory, "model.json")) as fh:
        meta = json.load(fh)
    model = ResCNN(HyperParams.from_dict(meta["hyperparams"]), seed=0, n_channels=meta["n_channels"])
    model.mean_center = np.array(meta["mean_center"], dtype=float)
    model.mean_scale = np.array(meta["mean_scale"], dtype=float)
    model.y_scale = float(meta["y_scale"])
    params = model.parameters()
    buffers = {}
    for i, layer in enumerate(model.layers):
        for key in layer.buffers:
            buffers[f"{i}.{layer.name}.{key}"] = (layer, key)
    for name, arr in nn.load_checkpoint(os.path.join(directory, "model.ckpt")):
        if name in params:
            if params[name].shape != arr.shape:
                raise nn.CheckpointError(f"shape mismatch for {name}")
            params[name][...] = arr
        elif name in buffers:
            layer, key = buffers[name]
            layer.buffers[key] = arr
        else:
            raise nn.CheckpointError(f"unexpected tensor {name}")
    return model
