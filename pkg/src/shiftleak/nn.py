"""Minimal numpy neural-network core: dense/conv layers, manual backprop, Adam.

All arithmetic is float64. Parameters of a model live in one flat
:class:`ParamVector` whose segments follow layer order, so FedAvg, the attacker
metrics and the optimizer can all treat a model as a single vector.
"""
from __future__ import annotations

import io
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import EmptyDataError, InputShapeError, LabelError, LayoutError

logger = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1

LAYER_KINDS = ("dense", "conv2d", "maxpool2d", "flatten")
ACTIVATIONS = ("relu", "softmax", "none")


# --------------------------------------------------------------------------- #
# Parameter storage
# --------------------------------------------------------------------------- #

@dataclass(frozen=True)
class Segment:
    """Slice of a flat parameter vector owned by one layer (weights then bias)."""
    layer: int
    offset: int
    length: int


@dataclass(frozen=True, eq=False)
class ParamVector:
    """Flat float64 values plus the per-layer layout table."""
    values: np.ndarray
    layout: tuple[Segment, ...]

    def __post_init__(self):
        values = np.ascontiguousarray(self.values, dtype=np.float64)
        if values.ndim != 1:
            raise LayoutError("ParamVector values must be one-dimensional")
        end = self.layout[-1].offset + self.layout[-1].length if self.layout else 0
        if end != values.size:
            raise LayoutError(f"layout covers {end} values, vector has {values.size}")
        object.__setattr__(self, "values", values)

    def __len__(self) -> int:
        return self.values.size

    def segment(self, layer: int) -> np.ndarray:
        for seg in self.layout:
            if seg.layer == layer:
                return self.values[seg.offset:seg.offset + seg.length]
        raise KeyError(f"layer {layer} has no parameters")

    def segments(self) -> list[np.ndarray]:
        return [self.values[s.offset:s.offset + s.length] for s in self.layout]

    def with_values(self, values: np.ndarray) -> "ParamVector":
        return ParamVector(np.asarray(values, dtype=np.float64), self.layout)

    def copy(self) -> "ParamVector":
        return ParamVector(self.values.copy(), self.layout)

    def same_layout(self, other: "ParamVector") -> bool:
        return self.layout == other.layout

    def check_layout(self, *others: "ParamVector") -> None:
        for other in others:
            if not self.same_layout(other):
                raise LayoutError("parameter vectors have different layouts")


# --------------------------------------------------------------------------- #
# Architecture description
# --------------------------------------------------------------------------- #

@dataclass(frozen=True)
class LayerSpec:
    kind: str
    out_features: Optional[int] = None
    out_channels: Optional[int] = None
    kernel_size: Optional[int] = None
    stride: int = 1
    activation: str = "none"

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.kind == "dense" and not self.out_features:
            raise ValueError("dense layer needs out_features")
        if self.kind == "conv2d" and not (self.out_channels and self.kernel_size):
            raise ValueError("conv2d layer needs out_channels and kernel_size")
        if self.kind == "maxpool2d" and not self.kernel_size:
            raise ValueError("maxpool2d layer needs kernel_size")

    @property
    def has_params(self) -> bool:
        return self.kind in ("dense", "conv2d")

    def to_dict(self) -> dict:
        return {k: v for k, v in self.__dict__.items() if v is not None}


def dense(out_features: int, activation: str = "relu") -> LayerSpec:
    return LayerSpec("dense", out_features=out_features, activation=activation)


def conv2d(out_channels: int, kernel_size: int, stride: int = 1,
           activation: str = "relu") -> LayerSpec:
    return LayerSpec("conv2d", out_channels=out_channels, kernel_size=kernel_size,
                     stride=stride, activation=activation)


def maxpool2d(size: int = 2) -> LayerSpec:
    return LayerSpec("maxpool2d", kernel_size=size, stride=size)


def flatten() -> LayerSpec:
    return LayerSpec("flatten")


def image_net_layers(num_classes: int = 10) -> list[LayerSpec]:
    """Conv net for 28x28 grayscale images (1,199,882 parameters for 10 classes).

    The 2x2 max-pool between the second convolution and the flatten is what
    brings the parameter count to 1.2M; without it the first dense layer alone
    would hold 4.7M weights.
    """
    return [
        conv2d(32, 3, 1),
        conv2d(64, 3, 1),
        maxpool2d(2),
        flatten(),
        dense(128),
        dense(num_classes, activation="softmax"),
    ]


def tabular_net_layers(num_classes: int = 2) -> list[LayerSpec]:
    """Five-layer fully connected net: 64-32-16-8-classes."""
    return [dense(64), dense(32), dense(16), dense(8),
            dense(num_classes, activation="softmax")]


def _validate_layers(layers: Sequence[LayerSpec]) -> None:
    if not layers:
        raise ValueError("model needs at least one layer")
    for i, spec in enumerate(layers):
        if spec.activation == "softmax" and i != len(layers) - 1:
            raise ValueError("softmax is only allowed on the final layer")
    seen_flat = False
    for spec in layers:
        if spec.kind == "flatten":
            seen_flat = True
        elif spec.kind in ("conv2d", "maxpool2d") and seen_flat:
            raise ValueError("spatial layers must precede flatten")


def _infer_shapes(input_shape: tuple[int, ...], layers: Sequence[LayerSpec]):
    """Per-layer (in_shape, out_shape, param_shapes), sample dimension excluded."""
    out = []
    shape = tuple(input_shape)
    for i, spec in enumerate(layers):
        if spec.kind == "dense":
            if len(shape) != 1:
                raise InputShapeError(f"layer {i}: dense expects flat input, got {shape}")
            params = [(shape[0], spec.out_features), (spec.out_features,)]
            new = (spec.out_features,)
        elif spec.kind == "conv2d":
            if len(shape) != 3:
                raise InputShapeError(f"layer {i}: conv2d expects (C, H, W), got {shape}")
            c, h, w = shape
            k, s = spec.kernel_size, spec.stride
            if h < k or w < k:
                raise InputShapeError(f"layer {i}: input {shape} smaller than kernel {k}")
            params = [(spec.out_channels, c, k, k), (spec.out_channels,)]
            new = (spec.out_channels, (h - k) // s + 1, (w - k) // s + 1)
        elif spec.kind == "maxpool2d":
            if len(shape) != 3:
                raise InputShapeError(f"layer {i}: maxpool2d expects (C, H, W), got {shape}")
            c, h, w = shape
            p = spec.kernel_size
            params = []
            new = (c, h // p, w // p)
        else:
            params = []
            new = (int(np.prod(shape)),)
        out.append((shape, new, params))
        shape = new
    return out


def _build_layout(shapes) -> tuple[Segment, ...]:
    layout = []
    offset = 0
    for i, (_, _, params) in enumerate(shapes):
        n = sum(int(np.prod(p)) for p in params)
        if n:
            layout.append(Segment(i, offset, n))
            offset += n
    return tuple(layout)


class Model:
    """An architecture plus its current parameter vector.

    Instances are treated as immutable; training returns a new model.
    """

    def __init__(self, input_shape: Sequence[int], layers: Sequence[LayerSpec],
                 params: ParamVector, rng_seed: int = 0):
        self.input_shape = tuple(int(d) for d in input_shape)
        self.layers = tuple(layers)
        _validate_layers(self.layers)
        self._shapes = _infer_shapes(self.input_shape, self.layers)
        layout = _build_layout(self._shapes)
        if params.layout != layout:
            raise LayoutError("parameter layout does not match architecture")
        self.params = params
        self.rng_seed = rng_seed

    @property
    def num_classes(self) -> int:
        return self._shapes[-1][1][0]

    @property
    def num_params(self) -> int:
        return len(self.params)

    @property
    def output_shapes(self) -> list[tuple[int, ...]]:
        return [s[1] for s in self._shapes]

    def with_params(self, params: ParamVector | np.ndarray) -> "Model":
        if isinstance(params, np.ndarray):
            params = self.params.with_values(params)
        return Model(self.input_shape, self.layers, params, self.rng_seed)

    def layer_params(self, layer: int, params: Optional[ParamVector] = None):
        """Views ``(W, b)`` into the flat vector for a parametrised layer."""
        pv = self.params if params is None else params
        flat = pv.segment(layer)
        w_shape, b_shape = self._shapes[layer][2]
        nw = int(np.prod(w_shape))
        return flat[:nw].reshape(w_shape), flat[nw:].reshape(b_shape)

    def __repr__(self) -> str:
        kinds = ", ".join(s.kind for s in self.layers)
        return f"Model(input={self.input_shape}, layers=[{kinds}], params={self.num_params})"


def init_model(input_shape: Sequence[int], layers: Sequence[LayerSpec], seed: int = 0) -> Model:
    """Seeded Kaiming-uniform init for ReLU layers, Xavier-uniform otherwise; zero biases."""
    layers = tuple(layers)
    _validate_layers(layers)
    shapes = _infer_shapes(tuple(input_shape), layers)
    layout = _build_layout(shapes)
    rng = np.random.default_rng(seed)
    chunks = []
    for spec, (_, _, params) in zip(layers, shapes):
        if not params:
            continue
        w_shape, b_shape = params
        if spec.kind == "dense":
            fan_in, fan_out = w_shape
        else:
            rf = w_shape[2] * w_shape[3]
            fan_in, fan_out = w_shape[1] * rf, w_shape[0] * rf
        if spec.activation == "relu":
            bound = np.sqrt(6.0 / fan_in)
        else:
            bound = np.sqrt(6.0 / (fan_in + fan_out))
        chunks.append(rng.uniform(-bound, bound, size=int(np.prod(w_shape))))
        chunks.append(np.zeros(int(np.prod(b_shape))))
    values = np.concatenate(chunks) if chunks else np.zeros(0)
    return Model(input_shape, layers, ParamVector(values, layout), rng_seed=seed)


# --------------------------------------------------------------------------- #
# Forward / backward
# --------------------------------------------------------------------------- #

def softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def log_softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def _conv_cols(x: np.ndarray, k: int, s: int) -> np.ndarray:
    n, c = x.shape[:2]
    win = sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::s, ::s]
    ho, wo = win.shape[2], win.shape[3]
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * k * k), ho, wo


def _apply_activation(z: np.ndarray, activation: str) -> np.ndarray:
    if activation == "relu":
        return np.maximum(z, 0.0)
    if activation == "softmax":
        return softmax(z)
    return z


def _check_batch(model: Model, batch: np.ndarray) -> np.ndarray:
    batch = np.asarray(batch, dtype=np.float64)
    if batch.ndim != len(model.input_shape) + 1 or batch.shape[1:] != model.input_shape:
        raise InputShapeError(
            f"batch shape {batch.shape} does not match model input {model.input_shape}")
    return batch


def _forward_cached(model: Model, x: np.ndarray, params: ParamVector):
    """Run the net, returning logits, post-activations and per-layer caches."""
    acts = []
    caches = []
    z = None
    for i, spec in enumerate(model.layers):
        if spec.kind == "dense":
            w, b = model.layer_params(i, params)
            z = x @ w + b
            cache = (x,)
        elif spec.kind == "conv2d":
            w, b = model.layer_params(i, params)
            cols, ho, wo = _conv_cols(x, spec.kernel_size, spec.stride)
            out = cols @ w.reshape(w.shape[0], -1).T + b
            z = out.reshape(x.shape[0], ho, wo, w.shape[0]).transpose(0, 3, 1, 2)
            cache = (x.shape, cols, ho, wo)
        elif spec.kind == "maxpool2d":
            p = spec.kernel_size
            n, c, h, w_ = x.shape
            ho, wo = h // p, w_ // p
            blocks = (x[:, :, :ho * p, :wo * p]
                      .reshape(n, c, ho, p, wo, p)
                      .transpose(0, 1, 2, 4, 3, 5)
                      .reshape(n, c, ho, wo, p * p))
            idx = blocks.argmax(axis=-1)
            z = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]
            cache = (x.shape, idx)
        else:
            z = x.reshape(x.shape[0], -1)
            cache = (x.shape,)
        a = _apply_activation(z, spec.activation)
        caches.append((z, cache))
        acts.append(a)
        x = a
    return z, acts, caches


def forward(model: Model, batch: np.ndarray, capture_activations: bool = False):
    """Logits (final pre-activation) and optionally every layer's post-activation output."""
    x = _check_batch(model, batch)
    logits, acts, _ = _forward_cached(model, x, model.params)
    return logits, (acts if capture_activations else None)


def predict_proba(model: Model, batch: np.ndarray, chunk: int = 1024) -> np.ndarray:
    x = _check_batch(model, batch)
    out = [softmax(forward(model, x[i:i + chunk])[0]) for i in range(0, len(x), chunk)]
    return np.concatenate(out) if out else np.zeros((0, model.num_classes))


def cross_entropy(logits: np.ndarray, labels: np.ndarray) -> float:
    return float(-log_softmax(logits)[np.arange(len(labels)), labels].mean())


def _check_labels(model: Model, labels, n: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.shape != (n,):
        raise LabelError(f"expected {n} labels, got shape {labels.shape}")
    if not np.issubdtype(labels.dtype, np.integer):
        raise LabelError("labels must be integer class indices")
    if n and (labels.min() < 0 or labels.max() >= model.num_classes):
        raise LabelError(f"labels must lie in [0, {model.num_classes})")
    return labels.astype(np.int64)


def backward(model: Model, batch: np.ndarray, labels, params: Optional[ParamVector] = None):
    """Mean cross-entropy over the batch and its gradient w.r.t. every parameter.

    The loss is always softmax cross-entropy on the final layer's pre-activation,
    whether or not that layer declares a softmax activation.
    """
    x = _check_batch(model, batch)
    labels = _check_labels(model, labels, x.shape[0])
    params = model.params if params is None else params
    logits, acts, caches = _forward_cached(model, x, params)
    n = x.shape[0]
    loss = cross_entropy(logits, labels)

    grad = np.zeros_like(params.values)
    gview = params.with_values(grad)

    # d loss / d logits
    delta = softmax(logits)
    delta[np.arange(n), labels] -= 1.0
    delta /= n

    for i in range(len(model.layers) - 1, -1, -1):
        spec = model.layers[i]
        z, cache = caches[i]
        if i != len(model.layers) - 1 and spec.activation == "relu":
            delta = delta * (z > 0)
        if spec.kind == "dense":
            (x_in,) = cache
            w, _ = model.layer_params(i, params)
            gw, gb = model.layer_params(i, gview)
            gw[...] = x_in.T @ delta
            gb[...] = delta.sum(axis=0)
            if i:
                delta = delta @ w.T
        elif spec.kind == "conv2d":
            in_shape, cols, ho, wo = cache
            w, _ = model.layer_params(i, params)
            gw, gb = model.layer_params(i, gview)
            o, c, k, _ = w.shape
            d2 = delta.transpose(0, 2, 3, 1).reshape(-1, o)
            gw[...] = (d2.T @ cols).reshape(w.shape)
            gb[...] = d2.sum(axis=0)
            if i:
                s = spec.stride
                dcols = (d2 @ w.reshape(o, -1)).reshape(in_shape[0], ho, wo, c, k, k)
                dx = np.zeros(in_shape)
                for a in range(k):
                    for b in range(k):
                        dx[:, :, a:a + s * (ho - 1) + 1:s, b:b + s * (wo - 1) + 1:s] += \
                            dcols[:, :, :, :, a, b].transpose(0, 3, 1, 2)
                delta = dx
        elif spec.kind == "maxpool2d":
            in_shape, idx = cache
            p = spec.kernel_size
            nb, c, h, w_ = in_shape
            ho, wo = h // p, w_ // p
            blocks = np.zeros((nb, c, ho, wo, p * p))
            np.put_along_axis(blocks, idx[..., None], delta[..., None], axis=-1)
            dx = np.zeros(in_shape)
            dx[:, :, :ho * p, :wo * p] = (blocks.reshape(nb, c, ho, wo, p, p)
                                          .transpose(0, 1, 2, 4, 3, 5)
                                          .reshape(nb, c, ho * p, wo * p))
            delta = dx
        else:
            (in_shape,) = cache
            delta = delta.reshape(in_shape)
    return loss, gview


# --------------------------------------------------------------------------- #
# Optimizer
# --------------------------------------------------------------------------- #

@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    layout: tuple[Segment, ...]
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params: ParamVector, **kw) -> "AdamState":
        return cls(np.zeros_like(params.values), np.zeros_like(params.values), params.layout, **kw)

    def copy(self) -> "AdamState":
        return AdamState(self.m.copy(), self.v.copy(), self.layout, self.t,
                         self.beta1, self.beta2, self.eps)


def adam_step(params: ParamVector, grads: ParamVector, state: AdamState, lr: float) -> ParamVector:
    """One bias-corrected Adam update. ``state`` is advanced in place."""
    if params.layout != grads.layout or params.layout != state.layout:
        raise LayoutError("params, grads and optimizer state must share a layout")
    g = grads.values
    state.t += 1
    state.m *= state.beta1
    state.m += (1.0 - state.beta1) * g
    state.v *= state.beta2
    state.v += (1.0 - state.beta2) * g * g
    m_hat = state.m / (1.0 - state.beta1 ** state.t)
    v_hat = state.v / (1.0 - state.beta2 ** state.t)
    return params.with_values(params.values - lr * m_hat / (np.sqrt(v_hat) + state.eps))


# --------------------------------------------------------------------------- #
# Training
# --------------------------------------------------------------------------- #

@dataclass
class TrainState:
    """Optimizer moments and the data-order RNG carried across calls."""
    adam: AdamState
    order_rng: np.random.Generator
    history: list = field(default_factory=list)

    @classmethod
    def fresh(cls, model: Model, order_seed: int) -> "TrainState":
        return cls(AdamState.zeros_like(model.params), np.random.default_rng(order_seed))


def train_epochs(model: Model, dataset, epochs: int, batch_size: int = 64, lr: float = 1e-4,
                 *, order_seed: int = 0, state: Optional[TrainState] = None) -> Model:
    """Train for ``epochs`` passes of shuffled, dropped-remainder mini-batches.

    Pass a :class:`TrainState` to continue an optimizer/data-order stream across
    calls; it is advanced in place. Without one, a fresh state seeded by
    ``order_seed`` is used, so repeated calls are reproducible.
    """
    x, y = dataset.features, dataset.labels
    if len(y) == 0:
        raise EmptyDataError("cannot train on an empty dataset")
    if epochs <= 0:
        return model
    x = _check_batch(model, x)
    y = _check_labels(model, y, x.shape[0])
    if state is None:
        state = TrainState.fresh(model, order_seed)
    params = model.params
    n = len(y)
    n_batches = max(1, n // batch_size)
    for _ in range(epochs):
        perm = state.order_rng.permutation(n)
        total = 0.0
        for b in range(n_batches):
            idx = perm[b * batch_size:(b + 1) * batch_size]
            loss, grads = backward(model, x[idx], y[idx], params)
            params = adam_step(params, grads, state.adam, lr)
            total += loss
        state.history.append(total / n_batches)
        logger.debug("epoch loss %.6f", state.history[-1])
    return model.with_params(params)


def evaluate(model: Model, dataset, chunk: int = 1024) -> tuple[float, float]:
    """Mean cross-entropy and accuracy over a dataset."""
    x = _check_batch(model, dataset.features)
    y = _check_labels(model, dataset.labels, x.shape[0])
    if len(y) == 0:
        raise EmptyDataError("cannot evaluate on an empty dataset")
    loss_sum = 0.0
    correct = 0
    for i in range(0, len(y), chunk):
        logits, _ = forward(model, x[i:i + chunk])
        yy = y[i:i + chunk]
        loss_sum += -log_softmax(logits)[np.arange(len(yy)), yy].sum()
        correct += int((logits.argmax(axis=1) == yy).sum())
    return loss_sum / len(y), correct / len(y)


# --------------------------------------------------------------------------- #
# Checkpoints
# --------------------------------------------------------------------------- #

def save_checkpoint(path, model: Model, adam: Optional[AdamState] = None) -> None:
    """Write an ``.npz`` container holding architecture, parameters and optimizer state."""
    header = {
        "version": CHECKPOINT_VERSION,
        "input_shape": list(model.input_shape),
        "layers": [s.to_dict() for s in model.layers],
        "rng_seed": model.rng_seed,
    }
    arrays = {"params": model.params.values}
    if adam is not None:
        header["adam"] = {"t": adam.t, "beta1": adam.beta1, "beta2": adam.beta2, "eps": adam.eps}
        arrays["adam_m"] = adam.m
        arrays["adam_v"] = adam.v
    buf = io.BytesIO()
    np.savez(buf, header=np.frombuffer(json.dumps(header).encode(), dtype=np.uint8), **arrays)
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(buf.getvalue())
    tmp.replace(path)


def load_checkpoint(path) -> tuple[Model, Optional[AdamState]]:
    with np.load(Path(path), allow_pickle=False) as z:
        header = json.loads(z["header"].tobytes().decode())
        if header.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {header.get('version')}")
        layers = [LayerSpec(**d) for d in header["layers"]]
        shapes = _infer_shapes(tuple(header["input_shape"]), layers)
        params = ParamVector(z["params"].copy(), _build_layout(shapes))
        model = Model(header["input_shape"], layers, params, header["rng_seed"])
        adam = None
        if "adam" in header:
            a = header["adam"]
            adam = AdamState(z["adam_m"].copy(), z["adam_v"].copy(), params.layout,
                             a["t"], a["beta1"], a["beta2"], a["eps"])
    return model, adam
