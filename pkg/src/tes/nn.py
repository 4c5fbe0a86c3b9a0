"""One-hidden-layer softmax classifier, trained from scratch with mini-batch SGD.

784 inputs, 64 ReLU hidden units, 10-way softmax output. Everything is plain
numpy so training results are bit-reproducible from a seed.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import FormatError

N_IN = 784
N_HIDDEN = 64
N_OUT = 10
PARAM_COUNT = N_IN * N_HIDDEN + N_HIDDEN + N_HIDDEN * N_OUT + N_OUT  # 50890

CHECKPOINT_MAGIC = b"TESM"
CHECKPOINT_VERSION = 1
_HEADER = struct.Struct("<4sIII")  # magic, version, param count, reserved

_P_FLOOR = 1e-300  # keeps log() finite for pathologically confident models


@dataclass
class Model:
    w1: np.ndarray  # (784, 64)
    b1: np.ndarray  # (64,)
    w2: np.ndarray  # (64, 10)
    b2: np.ndarray  # (10,)

    def copy(self) -> "Model":
        return Model(self.w1.copy(), self.b1.copy(), self.w2.copy(), self.b2.copy())

    def params(self) -> tuple[np.ndarray, ...]:
        return (self.w1, self.b1, self.w2, self.b2)

    def all_finite(self) -> bool:
        return all(np.isfinite(p).all() for p in self.params())


@dataclass
class Gradient:
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray

    def params(self) -> tuple[np.ndarray, ...]:
        return (self.w1, self.b1, self.w2, self.b2)


def init_model(seed: int) -> Model:
    """Uniform fan-based init (+-sqrt(6/(fan_in+fan_out))), zero biases."""
    rng = np.random.default_rng(seed)
    lim1 = np.sqrt(6.0 / (N_IN + N_HIDDEN))
    lim2 = np.sqrt(6.0 / (N_HIDDEN + N_OUT))
    return Model(
        w1=rng.uniform(-lim1, lim1, size=(N_IN, N_HIDDEN)),
        b1=np.zeros(N_HIDDEN),
        w2=rng.uniform(-lim2, lim2, size=(N_HIDDEN, N_OUT)),
        b2=np.zeros(N_OUT),
    )


def _as_batch(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.ndim == 3:  # (m, 28, 28) images
        x = x.reshape(x.shape[0], -1)
    elif x.ndim == 1:
        x = x.reshape(1, -1)
    return x


def _hidden(model: Model, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    pre = x @ model.w1 + model.b1
    return pre, np.maximum(pre, 0.0)


def _softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def forward(model: Model, batch: np.ndarray) -> np.ndarray:
    """Class probabilities, one softmax row per sample."""
    x = _as_batch(batch)
    _, h = _hidden(model, x)
    return _softmax(h @ model.w2 + model.b2)


def loss_and_grad(model: Model, batch: np.ndarray, labels: np.ndarray) -> tuple[float, Gradient]:
    """Mean cross-entropy over the batch and its gradient by backprop."""
    x = _as_batch(batch)
    y = np.asarray(labels, dtype=int)
    if x.shape[0] == 0:
        raise ValueError("batch must be non-empty")
    m = x.shape[0]
    pre, h = _hidden(model, x)
    probs = _softmax(h @ model.w2 + model.b2)
    loss = float(-np.mean(np.log(np.maximum(probs[np.arange(m), y], _P_FLOOR))))

    delta = probs.copy()
    delta[np.arange(m), y] -= 1.0
    delta /= m
    g_w2 = h.T @ delta
    g_b2 = delta.sum(axis=0)
    d_h = delta @ model.w2.T
    d_h[pre <= 0.0] = 0.0
    g_w1 = x.T @ d_h
    g_b1 = d_h.sum(axis=0)
    return loss, Gradient(g_w1, g_b1, g_w2, g_b2)


def sgd_step(model: Model, grad: Gradient, lr: float) -> Model:
    """One gradient step, theta <- theta - lr * g. Returns a new Model."""
    if lr < 0:
        raise ValueError(f"learning rate must be non-negative, got {lr}")
    for g in grad.params():
        if not np.isfinite(g).all():
            raise FloatingPointError("non-finite gradient; aborting run")
    return Model(
        w1=model.w1 - lr * grad.w1,
        b1=model.b1 - lr * grad.b1,
        w2=model.w2 - lr * grad.w2,
        b2=model.b2 - lr * grad.b2,
    )


def evaluate(model: Model, ds) -> float:
    """Fraction of argmax predictions that match the labels.

    Argmax ties resolve to the lowest class index, so evaluation is
    deterministic. Accepts anything with `images` and `labels` arrays.
    """
    preds = predict(model, ds.images)
    return float(np.mean(preds == np.asarray(ds.labels)))


def predict(model: Model, images: np.ndarray, chunk: int = 4096) -> np.ndarray:
    """Argmax class per image, evaluated in chunks to bound memory."""
    x = _as_batch(images)
    out = np.empty(x.shape[0], dtype=int)
    for lo in range(0, x.shape[0], chunk):
        out[lo : lo + chunk] = np.argmax(forward(model, x[lo : lo + chunk]), axis=1)
    return out


def per_sample_loss(model: Model, images: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Elementwise -log p[label]; its mean equals the batch loss."""
    x = _as_batch(images)
    y = np.asarray(labels, dtype=int)
    probs = forward(model, x)
    return -np.log(np.maximum(probs[np.arange(x.shape[0]), y], _P_FLOOR))


def uncertainty(probs: np.ndarray) -> float:
    """1 - max probability: 0 for a one-hot result, 0.9 for a uniform one."""
    p = np.asarray(probs, dtype=float)
    return float(1.0 - p.max())


def train_sgd(
    model: Model,
    images: np.ndarray,
    labels: np.ndarray,
    *,
    epochs: int,
    batch_size: int,
    lr: float,
    rng,
) -> Model:
    """Seeded-shuffle mini-batch SGD for a fixed number of epochs.

    `rng` is an RngStream; its generator drives the per-epoch shuffles so the
    result is a pure function of (model, data, hyperparameters, stream key).
    """
    x = _as_batch(images)
    y = np.asarray(labels, dtype=int)
    n = x.shape[0]
    out = model.copy()
    for _ in range(epochs):
        order = rng.generator.permutation(n)
        for lo in range(0, n, batch_size):
            idx = order[lo : lo + batch_size]
            _, grad = loss_and_grad(out, x[idx], y[idx])
            out = sgd_step(out, grad, lr)
    return out


def save_model(path, model: Model) -> None:
    """Flat little-endian float64 checkpoint: w1 row-major, b1, w2 row-major, b2."""
    flat = np.concatenate([p.reshape(-1) for p in model.params()]).astype("<f8")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, flat.size, 0))
        fh.write(flat.tobytes())


def load_model(path) -> Model:
    with open(path, "rb") as fh:
        header = fh.read(_HEADER.size)
        if len(header) < _HEADER.size:
            raise FormatError("truncated checkpoint header", offset=len(header))
        magic, version, count, _ = _HEADER.unpack(header)
        if magic != CHECKPOINT_MAGIC:
            raise FormatError(f"bad checkpoint magic {magic!r}", offset=0)
        if version != CHECKPOINT_VERSION:
            raise FormatError(f"unsupported checkpoint version {version}", offset=4)
        if count != PARAM_COUNT:
            raise FormatError(f"expected {PARAM_COUNT} parameters, header says {count}", offset=8)
        body = fh.read(count * 8)
    if len(body) != count * 8:
        raise FormatError("truncated checkpoint body", offset=_HEADER.size + len(body))
    flat = np.frombuffer(body, dtype="<f8").astype(float)
    w1, rest = flat[: N_IN * N_HIDDEN], flat[N_IN * N_HIDDEN :]
    b1, rest = rest[:N_HIDDEN], rest[N_HIDDEN:]
    w2, b2 = rest[: N_HIDDEN * N_OUT], rest[N_HIDDEN * N_OUT :]
    return Model(
        w1=w1.reshape(N_IN, N_HIDDEN),
        b1=b1.copy(),
        w2=w2.reshape(N_HIDDEN, N_OUT),
        b2=b2.copy(),
    )
