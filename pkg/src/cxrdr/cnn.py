"""A small numpy convolutional classifier with hand-written backpropagation.

Architecture: ``[conv3x3 -> ReLU -> maxpool2]`` blocks, then a ReLU dense
layer and a single sigmoid output unit. Convolutions use zero "same" padding.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np

from .curves import TrainingCurve
from .imaging import resize_image

log = logging.getLogger(__name__)

PROB_CLAMP = 1e-7
MAX_LAYERS = 10


@dataclass
class CnnConfig:
    input_side: int = 256
    conv_blocks: list[tuple[int, int, int]] = field(default_factory=lambda: [(8, 3, 2), (16, 3, 2)])
    dense_units: int = 32
    learning_rate: float = 0.03
    batch_size: int = 8
    seed: int = 0
    dtype: str = "float32"

    def __post_init__(self):
        self.conv_blocks = [tuple(int(v) for v in b) for b in self.conv_blocks]
        for filters, kernel, pool in self.conv_blocks:
            if filters <= 0 or kernel <= 0 or kernel % 2 == 0:
                raise ValueError(f"conv block needs positive filters and an odd kernel: {(filters, kernel)}")
            if pool != 2:
                raise ValueError("only 2x2 pooling is supported")
        # conv + pool per block, dense hidden, dense output
        if 2 * len(self.conv_blocks) + 2 > MAX_LAYERS:
            raise ValueError(f"network would exceed {MAX_LAYERS} layers")
        if self.input_side % (2 ** len(self.conv_blocks)):
            raise ValueError("input_side must be divisible by 2**(number of conv blocks)")
        if self.dense_units <= 0 or self.batch_size <= 0 or self.learning_rate <= 0:
            raise ValueError("dense_units, batch_size and learning_rate must be positive")
        if self.dtype not in ("float32", "float64"):
            raise ValueError("dtype must be float32 or float64")

    @property
    def feature_side(self) -> int:
        return self.input_side // 2 ** len(self.conv_blocks)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["conv_blocks"] = [list(b) for b in self.conv_blocks]
        return d

    @classmethod
    def from_dict(cls, data: dict) -> "CnnConfig":
        return cls(**data)


@dataclass
class Network:
    config: CnnConfig
    params: dict[str, np.ndarray]

    def copy(self) -> "Network":
        return Network(self.config, {k: v.copy() for k, v in self.params.items()})

    @property
    def n_conv(self) -> int:
        return len(self.config.conv_blocks)


@dataclass
class Batch:
    images: np.ndarray  # (N, side, side) floats in [0, 1]
    labels: np.ndarray  # (N,) of {0, 1}

    def __post_init__(self):
        self.images = np.asarray(self.images)
        if self.images.dtype not in (np.float32, np.float64):
            self.images = self.images.astype(np.float64)
        self.labels = np.asarray(self.labels, dtype=np.float64)
        if self.images.ndim != 3 or self.images.shape[1] != self.images.shape[2]:
            raise ValueError("images must be an (N, side, side) stack")
        if len(self.images) != len(self.labels):
            raise ValueError("image and label counts differ")

    def __len__(self):
        return len(self.labels)

    def subset(self, idx) -> "Batch":
        return Batch(self.images[idx], self.labels[idx])


def _glorot(rng, shape, fan_in, fan_out):
    s = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-s, s, size=shape)


def build_network(config: CnnConfig) -> Network:
    rng = np.random.default_rng(config.seed)
    params = {}
    channels = 1
    for i, (filters, k, _) in enumerate(config.conv_blocks):
        params[f"conv{i}.w"] = _glorot(rng, (k, k, channels, filters), channels * k * k, filters * k * k)
        params[f"conv{i}.b"] = np.zeros(filters)
        channels = filters
    flat = channels * config.feature_side ** 2
    params["dense.w"] = _glorot(rng, (flat, config.dense_units), flat, config.dense_units)
    params["dense.b"] = np.zeros(config.dense_units)
    params["out.w"] = _glorot(rng, (config.dense_units, 1), config.dense_units, 1)
    params["out.b"] = np.zeros(1)
    return Network(config, {k: v.astype(config.dtype) for k, v in params.items()})


# ---------------------------------------------------------------------------
# layers
# ---------------------------------------------------------------------------


# Activations are channels-last (N, H, W, C); kernels are (k, k, C_in, C_out).


def _im2col(x, k):
    """(N, H, W, C) -> (N*H*W, k*k*C) patches under zero "same" padding."""
    n, h, w, c = x.shape
    p = k // 2
    xp = np.pad(x, ((0, 0), (p, p), (p, p), (0, 0)))
    cols = np.empty((n, h, w, k, k, c), dtype=x.dtype)
    for i in range(k):
        for j in range(k):
            cols[:, :, :, i, j, :] = xp[:, i : i + h, j : j + w, :]
    return cols.reshape(n * h * w, k * k * c)


def _col2im(dcols, shape, k):
    n, h, w, c = shape
    p = k // 2
    dcols = dcols.reshape(n, h, w, k, k, c)
    dxp = np.zeros((n, h + 2 * p, w + 2 * p, c), dtype=dcols.dtype)
    for i in range(k):
        for j in range(k):
            dxp[:, i : i + h, j : j + w, :] += dcols[:, :, :, i, j, :]
    return dxp[:, p : p + h, p : p + w, :]


def conv_forward(x, w, b):
    n, h, wd, _ = x.shape
    k, _, _, f = w.shape
    cols = _im2col(x, k)
    out = (cols @ w.reshape(-1, f) + b).reshape(n, h, wd, f)
    return out, (x.shape, w, cols)


def conv_backward(dout, cache, need_dx=True):
    shape, w, cols = cache
    k, _, _, f = w.shape
    dflat = dout.reshape(-1, f)
    dw = (cols.T @ dflat).reshape(w.shape)
    db = dflat.sum(axis=0)
    dx = _col2im(dflat @ w.reshape(-1, f).T, shape, k) if need_dx else None
    return dx, dw, db


_QUADS = ((0, 0), (0, 1), (1, 0), (1, 1))


def maxpool_forward(x):
    """2x2 stride-2 max pooling over (N, H, W, C)."""
    out = x[:, 0::2, 0::2]
    for r, c in _QUADS[1:]:
        out = np.maximum(out, x[:, r::2, c::2])
    return out, (x, out)


def maxpool_backward(dout, cache):
    # ties route the whole gradient to the first maximal position in the window
    x, out = cache
    dx = np.zeros_like(x)
    taken = np.zeros(out.shape, dtype=bool)
    for r, c in _QUADS:
        hit = (x[:, r::2, c::2] == out) & ~taken
        dx[:, r::2, c::2] = np.where(hit, dout, 0.0)
        taken |= hit
    return dx


def sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


# ---------------------------------------------------------------------------
# forward / loss / backward
# ---------------------------------------------------------------------------


def _as_input(net: Network, images) -> np.ndarray:
    x = np.asarray(images.images if isinstance(images, Batch) else images, dtype=net.config.dtype)
    side = net.config.input_side
    if x.ndim != 3 or x.shape[1:] != (side, side):
        raise ValueError(f"expected (N, {side}, {side}) input, got {x.shape}")
    return x[:, :, :, None]


def _forward(net: Network, images):
    x = _as_input(net, images)
    caches = []
    for i in range(net.n_conv):
        z, conv_cache = conv_forward(x, net.params[f"conv{i}.w"], net.params[f"conv{i}.b"])
        a = np.maximum(z, 0.0)
        x, pool_cache = maxpool_forward(a)
        caches.append((conv_cache, z, pool_cache))
    flat = x.reshape(len(x), -1)
    hz = flat @ net.params["dense.w"] + net.params["dense.b"]
    h = np.maximum(hz, 0.0)
    logits = (h @ net.params["out.w"] + net.params["out.b"])[:, 0].astype(np.float64)
    return sigmoid(logits), (caches, x.shape, flat, hz, h)


def forward(net: Network, images) -> np.ndarray:
    """Per-sample nodule probabilities."""
    return _forward(net, images)[0]


def bce_loss(probs, labels) -> float:
    p = np.clip(np.asarray(probs, dtype=np.float64), PROB_CLAMP, 1.0 - PROB_CLAMP)
    y = np.asarray(labels, dtype=np.float64)
    return float(np.mean(-(y * np.log(p) + (1.0 - y) * np.log(1.0 - p))))


def accuracy(probs, labels) -> float:
    pred = np.asarray(probs) >= 0.5
    return float(np.mean(pred == (np.asarray(labels) >= 0.5)))


def backward(net: Network, batch: Batch) -> tuple[float, dict[str, np.ndarray]]:
    """Loss and exact gradients of the mean clamped BCE w.r.t. every parameter."""
    probs, (caches, pooled_shape, flat, hz, h) = _forward(net, batch)
    y = batch.labels
    n = len(y)
    loss = bce_loss(probs, y)
    inside = (probs > PROB_CLAMP) & (probs < 1.0 - PROB_CLAMP)
    dlogits = (np.where(inside, probs - y, 0.0) / n).astype(net.config.dtype)

    grads = {}
    grads["out.w"] = h.T @ dlogits[:, None]
    grads["out.b"] = np.array([dlogits.sum()])
    dh = dlogits[:, None] @ net.params["out.w"].T
    dhz = dh * (hz > 0)
    grads["dense.w"] = flat.T @ dhz
    grads["dense.b"] = dhz.sum(axis=0)
    dx = (dhz @ net.params["dense.w"].T).reshape(pooled_shape)
    for i in reversed(range(net.n_conv)):
        conv_cache, z, pool_cache = caches[i]
        da = maxpool_backward(dx, pool_cache)
        dz = da * (z > 0)
        dx, grads[f"conv{i}.w"], grads[f"conv{i}.b"] = conv_backward(dz, conv_cache, need_dx=i > 0)
    return loss, grads


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


def evaluate(net: Network, batch: Batch, chunk: int = 64) -> tuple[float, float]:
    """(accuracy, loss) over a whole set, evaluated in chunks."""
    probs = np.concatenate([forward(net, batch.images[i : i + chunk]) for i in range(0, len(batch), chunk)])
    return accuracy(probs, batch.labels), bce_loss(probs, batch.labels)


def sgd_step(net: Network, grads: dict[str, np.ndarray], learning_rate: float) -> None:
    for name, g in grads.items():
        net.params[name] -= learning_rate * g


def train(
    net: Network,
    train_set: Batch,
    val_set: Batch,
    epochs: int,
    run_id: str = "run",
    shuffle_seed: Optional[int] = None,
) -> TrainingCurve:
    """Minibatch SGD; records accuracy/loss on both sets after every epoch.

    ``net`` is updated in place. Shuffling draws from ``shuffle_seed``
    (defaults to the network config seed).
    """
    if len(train_set) == 0 or len(val_set) == 0:
        raise ValueError("training and validation sets must be non-empty")
    cfg = net.config
    rng = np.random.default_rng(cfg.seed if shuffle_seed is None else shuffle_seed)
    curve = TrainingCurve(run_id)
    for epoch in range(epochs):
        order = rng.permutation(len(train_set))
        for start in range(0, len(order), cfg.batch_size):
            _, grads = backward(net, train_set.subset(order[start : start + cfg.batch_size]))
            sgd_step(net, grads, cfg.learning_rate)
        tr_acc, tr_loss = evaluate(net, train_set)
        va_acc, va_loss = evaluate(net, val_set)
        curve.append(tr_acc, va_acc, tr_loss, va_loss)
        log.debug("%s epoch %d: train %.3f/%.4f val %.3f/%.4f", run_id, epoch, tr_acc, tr_loss, va_acc, va_loss)
    return curve


def samples_to_batch(samples: Sequence, input_side: Optional[int] = None, dtype="float32") -> Batch:
    """Stack preprocessed samples into a normalised batch, box-downscaling if needed."""
    images, labels = [], []
    for s in samples:
        img = s.image
        if input_side is not None and img.shape != (input_side, input_side):
            img = resize_image(img, input_side, input_side)
        images.append(img.pixels.astype(np.float64) / img.max_value)
        labels.append(1.0 if s.label == "nodule" else 0.0)
    return Batch(np.stack(images).astype(dtype), np.array(labels))
