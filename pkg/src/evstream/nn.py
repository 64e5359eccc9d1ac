"""Dense-network core: layers, batch norm, Adam, losses, serialization.

The model is four shared-weight MLP blocks:

* ``mlp1`` — per-event local feature from the 3-real input (x, y, p
  normalized to [-1, 1]); its output is also the local feature consumed by
  the event-wise head.
* ``mlp2`` — lifts the local feature to the K-channel vector, final
  activation tanh so every channel magnitude is strictly below 1.
* ``mlp3`` — global head on the 2K-real aggregate.
* ``mlp4`` — event-wise head on [local feature ‖ 2K-real aggregate].

Batch norm sits on every layer except the final layers of mlp3 and mlp4.
Training runs in float64.
"""

from __future__ import annotations

import io
import json
import struct
import zlib
from dataclasses import dataclass, field, asdict
from typing import Optional, Sequence

import numpy as np

from .events import SensorGeometry

_WEIGHTS_MAGIC = b"ENWT"
_WEIGHTS_VERSION = 1

_ACTIVATIONS = ("linear", "relu", "tanh")
BN_EPS = 1e-5


class TrainingDivergedError(RuntimeError):
    """Raised when the training loss stops being finite."""


# ---------------------------------------------------------------------------
# Layers
# ---------------------------------------------------------------------------

class DenseLayer:
    """Fully connected layer, weights stored row-major as (out, in)."""

    def __init__(self, weights: np.ndarray, bias: np.ndarray):
        self.weights = np.asarray(weights, dtype=np.float64)
        self.bias = np.asarray(bias, dtype=np.float64)
        if self.weights.ndim != 2 or self.bias.shape != (self.weights.shape[0],):
            raise ValueError("weights must be (out, in) with matching bias")

    @property
    def in_dim(self) -> int:
        return self.weights.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weights.shape[0]


class BatchNormState:
    """Per-unit batch normalization parameters and running statistics."""

    def __init__(self, dim: int, momentum: float = 0.9):
        self.gamma = np.ones(dim, dtype=np.float64)
        self.beta = np.zeros(dim, dtype=np.float64)
        self.running_mean = np.zeros(dim, dtype=np.float64)
        self.running_var = np.ones(dim, dtype=np.float64)
        self.momentum = float(momentum)

    @property
    def dim(self) -> int:
        return self.gamma.shape[0]


class Layer:
    """Dense layer with optional batch norm and an activation tag."""

    def __init__(self, dense: DenseLayer, bn: Optional[BatchNormState], activation: str):
        if activation not in _ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}")
        self.dense = dense
        self.bn = bn
        self.activation = activation


def _init_dense(in_dim: int, out_dim: int, activation: str, rng) -> DenseLayer:
    # He scaling for ReLU layers, 1/fan_in otherwise.
    scale = np.sqrt(2.0 / in_dim) if activation == "relu" else np.sqrt(1.0 / in_dim)
    w = rng.standard_normal((out_dim, in_dim)) * scale
    b = np.zeros(out_dim)
    return DenseLayer(w, b)


def make_block(in_dim: int, widths: Sequence[int], rng,
               final_activation: str = "relu",
               final_bn: bool = True) -> list:
    """Stack of Layer objects; hidden layers are BN + ReLU."""
    layers = []
    d = in_dim
    for i, width in enumerate(widths):
        last = i == len(widths) - 1
        act = final_activation if last else "relu"
        bn = BatchNormState(width) if (final_bn or not last) else None
        layers.append(Layer(_init_dense(d, width, act, rng), bn, act))
        d = width
    return layers


# ---------------------------------------------------------------------------
# Forward / backward
# ---------------------------------------------------------------------------

def _activate(pre: np.ndarray, kind: str) -> np.ndarray:
    if kind == "relu":
        return np.maximum(pre, 0.0)
    if kind == "tanh":
        return np.tanh(pre)
    return pre


def forward_block(layers: Sequence[Layer], x: np.ndarray, training: bool):
    """Run a block; returns ``(output, caches)``.

    Training mode normalizes with batch statistics (cached for backward and
    for the deferred running-statistics update); inference mode uses running
    statistics and caches nothing.
    """
    if x.ndim != 2:
        raise ValueError("input must be 2-D (batch, features)")
    caches = []
    out = x
    for layer in layers:
        if out.shape[1] != layer.dense.in_dim:
            raise ValueError(
                f"input width {out.shape[1]} does not match layer width {layer.dense.in_dim}")
        x_in = out
        pre = x_in @ layer.dense.weights.T + layer.dense.bias
        bn_cache = None
        if layer.bn is not None:
            bn = layer.bn
            if training:
                mean = pre.mean(axis=0)
                var = pre.var(axis=0)
                inv_std = 1.0 / np.sqrt(var + BN_EPS)
                xhat = (pre - mean) * inv_std
                bn_cache = (xhat, inv_std, mean, var)
            else:
                inv_std = 1.0 / np.sqrt(bn.running_var + BN_EPS)
                xhat = (pre - bn.running_mean) * inv_std
            normed = xhat * bn.gamma + bn.beta
        else:
            normed = pre
        out = _activate(normed, layer.activation)
        caches.append((x_in, pre, bn_cache, normed, out))
    return out, caches


def backward_block(layers: Sequence[Layer], caches, d_out: np.ndarray):
    """Backpropagate through a block run in training mode.

    Returns ``(d_input, grads)`` where ``grads`` is a list per layer of
    ``(dW, db, dgamma, dbeta)`` (None entries for layers without BN).
    """
    grads = [None] * len(layers)
    grad = d_out
    for i in range(len(layers) - 1, -1, -1):
        layer = layers[i]
        x_in, pre, bn_cache, normed, out = caches[i]
        if layer.activation == "relu":
            grad = grad * (normed > 0)
        elif layer.activation == "tanh":
            grad = grad * (1.0 - out * out)
        if layer.bn is not None:
            xhat, inv_std, _, _ = bn_cache
            n = xhat.shape[0]
            dgamma = np.sum(grad * xhat, axis=0)
            dbeta = np.sum(grad, axis=0)
            dxhat = grad * layer.bn.gamma
            grad = (inv_std / n) * (
                n * dxhat - np.sum(dxhat, axis=0) - xhat * np.sum(dxhat * xhat, axis=0))
        else:
            dgamma = dbeta = None
        dw = grad.T @ x_in
        db = np.sum(grad, axis=0)
        grads[i] = (dw, db, dgamma, dbeta)
        grad = grad @ layer.dense.weights
    return grad, grads


def update_running_stats(layers: Sequence[Layer], caches, momentum: float) -> None:
    """Fold the cached batch statistics into the running estimates."""
    for layer, cache in zip(layers, caches):
        if layer.bn is None or cache[2] is None:
            continue
        _, _, mean, var = cache[2]
        bn = layer.bn
        bn.momentum = momentum
        bn.running_mean = momentum * bn.running_mean + (1.0 - momentum) * mean
        bn.running_var = momentum * bn.running_var + (1.0 - momentum) * var


def fold_block(layers: Sequence[Layer]) -> list:
    """Fold inference-mode batch norm into the preceding dense layer.

    Fails on degenerate running variance (< 1e-12).
    """
    folded = []
    for layer in layers:
        if layer.bn is None:
            folded.append(Layer(DenseLayer(layer.dense.weights.copy(),
                                           layer.dense.bias.copy()),
                                None, layer.activation))
            continue
        bn = layer.bn
        if np.any(bn.running_var < 1e-12):
            raise ValueError("degenerate batch-norm running variance; cannot fold")
        a = bn.gamma / np.sqrt(bn.running_var + BN_EPS)
        w = layer.dense.weights * a[:, None]
        b = a * (layer.dense.bias - bn.running_mean) + bn.beta
        folded.append(Layer(DenseLayer(w, b), None, layer.activation))
    return folded


# ---------------------------------------------------------------------------
# Model
# ---------------------------------------------------------------------------

DEFAULT_SIZES = {
    "mlp1": (64, 64),
    "mlp2": (64, 128, None),   # None -> K
    "mlp3": (512, 256, None),  # None -> regression/classification width
    "mlp4": (512, 256, 128, None),
}


class MlpModel:
    """The four MLP blocks plus the feature width K.

    ``pointnet=True`` builds the batch baseline variant: the per-event
    feature network takes a fourth input (elapsed time over tau) and the
    heads consume K reals instead of 2K.
    """

    def __init__(self, mlp1, mlp2, mlp3, mlp4, k: int,
                 n_classes: int, reg_out: int, pointnet: bool = False):
        self.mlp1 = mlp1
        self.mlp2 = mlp2
        self.mlp3 = mlp3
        self.mlp4 = mlp4
        self.k = k
        self.n_classes = n_classes
        self.reg_out = reg_out
        self.pointnet = pointnet
        if mlp2[-1].activation != "tanh":
            raise ValueError("mlp2 must end in tanh")

    @property
    def local_dim(self) -> int:
        return self.mlp1[-1].dense.out_dim

    @property
    def global_dim(self) -> int:
        return self.k if self.pointnet else 2 * self.k

    @property
    def input_dim(self) -> int:
        return self.mlp1[0].dense.in_dim

    @staticmethod
    def create(k: int = 1024, n_classes: int = 2, reg_out: int = 2,
               sizes: Optional[dict] = None, pointnet: bool = False,
               seed: int = 0) -> "MlpModel":
        rng = np.random.default_rng(seed)
        sizes = dict(DEFAULT_SIZES if sizes is None else sizes)
        fill = lambda tpl, last: tuple(last if v is None else v for v in tpl)
        in_dim = 4 if pointnet else 3
        m1 = make_block(in_dim, fill(sizes["mlp1"], None), rng)
        local = sizes["mlp1"][-1]
        m2 = make_block(local, fill(sizes["mlp2"], k), rng, final_activation="tanh")
        gdim = k if pointnet else 2 * k
        m3 = make_block(gdim, fill(sizes["mlp3"], reg_out), rng,
                        final_activation="linear", final_bn=False)
        m4 = make_block(local + gdim, fill(sizes["mlp4"], n_classes), rng,
                        final_activation="linear", final_bn=False)
        return MlpModel(m1, m2, m3, m4, k, n_classes, reg_out, pointnet)

    def blocks(self):
        return (("mlp1", self.mlp1), ("mlp2", self.mlp2),
                ("mlp3", self.mlp3), ("mlp4", self.mlp4))

    def parameters(self) -> list:
        """Flat list of trainable arrays in a stable order."""
        params = []
        for _, block in self.blocks():
            for layer in block:
                params.append(layer.dense.weights)
                params.append(layer.dense.bias)
                if layer.bn is not None:
                    params.append(layer.bn.gamma)
                    params.append(layer.bn.beta)
        return params

    def set_parameters(self, values: Sequence[np.ndarray]) -> None:
        it = iter(values)
        for _, block in self.blocks():
            for layer in block:
                layer.dense.weights = next(it).reshape(layer.dense.weights.shape)
                layer.dense.bias = next(it).reshape(layer.dense.bias.shape)
                if layer.bn is not None:
                    layer.bn.gamma = next(it).reshape(layer.bn.gamma.shape)
                    layer.bn.beta = next(it).reshape(layer.bn.beta.shape)


def encode_event_inputs(x, y, p, geometry: SensorGeometry,
                        dt_frac: Optional[np.ndarray] = None) -> np.ndarray:
    """Per-event network input: coordinates scaled to [-1, 1], polarity as
    +-1, optionally a fourth column of elapsed-time fractions."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    xn = 2.0 * x / (geometry.width - 1) - 1.0 if geometry.width > 1 else np.zeros_like(x)
    yn = 2.0 * y / (geometry.height - 1) - 1.0 if geometry.height > 1 else np.zeros_like(y)
    cols = [xn, yn, np.asarray(p, dtype=np.float64)]
    if dt_frac is not None:
        cols.append(np.asarray(dt_frac, dtype=np.float64))
    return np.stack(cols, axis=1)


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------

class AdamState:
    """Adam with bias correction; defaults beta1=0.9, beta2=0.999, eps=1e-8."""

    def __init__(self, params: Sequence[np.ndarray],
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]


def adam_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray],
              state: AdamState, lr: float) -> None:
    """In-place Adam update."""
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------

def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray):
    """Mean cross-entropy over rows; returns ``(loss, dlogits)``."""
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() >= logits.shape[1]):
        raise ValueError("label out of range")
    shifted = logits - logits.max(axis=1, keepdims=True)
    lse = np.log(np.sum(np.exp(shifted), axis=1))
    n = logits.shape[0]
    loss = float(np.mean(lse - shifted[np.arange(n), labels]))
    probs = np.exp(shifted)
    probs /= probs.sum(axis=1, keepdims=True)
    probs[np.arange(n), labels] -= 1.0
    return loss, probs / n


def squared_error(pred: np.ndarray, target: np.ndarray):
    """Mean squared L2 distance over rows; returns ``(loss, dpred)``."""
    if pred.shape != target.shape:
        raise ValueError("shape mismatch")
    diff = pred - target
    n = pred.shape[0]
    loss = float(np.sum(diff * diff) / n)
    return loss, 2.0 * diff / n


def loss(output: np.ndarray, target: np.ndarray, kind: str):
    """Dispatch: ``kind`` is 'cross_entropy' or 'l2'."""
    if kind == "cross_entropy":
        return softmax_cross_entropy(output, target)
    if kind == "l2":
        return squared_error(output, target)
    raise ValueError(f"unknown loss kind {kind!r}")


# ---------------------------------------------------------------------------
# Training configuration
# ---------------------------------------------------------------------------

@dataclass
class TrainConfig:
    """Optimization protocol; defaults follow the reference recipe
    (lr 2e-4 halved every 20 epochs until 100, BN decay ramp 0.5 -> 0.99)."""

    k: int = 1024
    n_classes: int = 2
    reg_out: int = 2
    epochs: int = 500
    streams_per_epoch: int = 8000
    batch_size: int = 16
    tau_us: int = 32000
    learning_rate: float = 2e-4
    lr_halve_every: int = 20
    lr_halve_until: int = 100
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    bn_momentum_start: float = 0.5
    bn_momentum_end: float = 0.99
    heads: tuple = ("global", "eventwise")
    mode: str = "full"
    crop: Optional[tuple] = None
    sizes: Optional[dict] = None
    seed: int = 0

    def lr_at(self, epoch: int) -> float:
        halvings = min(epoch, self.lr_halve_until) // self.lr_halve_every
        return self.learning_rate / (2.0 ** halvings)

    def bn_momentum_at(self, epoch: int) -> float:
        if self.epochs <= 1:
            return self.bn_momentum_end
        frac = epoch / (self.epochs - 1)
        return self.bn_momentum_start + (self.bn_momentum_end - self.bn_momentum_start) * frac

    def to_json(self) -> str:
        d = asdict(self)
        d["heads"] = list(self.heads)
        if self.sizes is not None:
            d["sizes"] = {k: list(v) for k, v in self.sizes.items()}
        return json.dumps(d, indent=2)

    @staticmethod
    def from_json(text: str) -> "TrainConfig":
        d = json.loads(text)
        if "heads" in d:
            d["heads"] = tuple(d["heads"])
        if d.get("crop") is not None:
            d["crop"] = tuple(d["crop"])
        if d.get("sizes") is not None:
            d["sizes"] = {k: tuple(None if x is None else x for x in v)
                          for k, v in d["sizes"].items()}
        return TrainConfig(**d)


def save_config(config: TrainConfig, path) -> None:
    with open(path, "w") as f:
        f.write(config.to_json() + "\n")


def load_config(path) -> TrainConfig:
    with open(path) as f:
        return TrainConfig.from_json(f.read())


# ---------------------------------------------------------------------------
# Weight serialization
# ---------------------------------------------------------------------------

def _serialize_weights(model: MlpModel) -> bytes:
    buf = io.BytesIO()
    buf.write(struct.pack("<4sHIIIB3x", _WEIGHTS_MAGIC, _WEIGHTS_VERSION,
                          model.k, model.n_classes, model.reg_out,
                          1 if model.pointnet else 0))
    for _, block in model.blocks():
        buf.write(struct.pack("<H", len(block)))
        for layer in block:
            act = _ACTIVATIONS.index(layer.activation)
            buf.write(struct.pack("<IIBB", layer.dense.in_dim, layer.dense.out_dim,
                                  act, 1 if layer.bn is not None else 0))
            buf.write(layer.dense.weights.astype("<f8").tobytes())
            buf.write(layer.dense.bias.astype("<f8").tobytes())
            if layer.bn is not None:
                bn = layer.bn
                buf.write(struct.pack("<d", bn.momentum))
                for arr in (bn.gamma, bn.beta, bn.running_mean, bn.running_var):
                    buf.write(arr.astype("<f8").tobytes())
    return buf.getvalue()


def weights_checksum(model: MlpModel) -> int:
    """CRC32 of the canonical weight serialization; pairs models with LUTs."""
    return zlib.crc32(_serialize_weights(model)) & 0xFFFFFFFF


def save_weights(model: MlpModel, path) -> int:
    """Write the canonical binary weights file; returns its checksum."""
    blob = _serialize_weights(model)
    with open(path, "wb") as f:
        f.write(blob)
    return zlib.crc32(blob) & 0xFFFFFFFF


def load_weights(path) -> MlpModel:
    with open(path, "rb") as f:
        blob = f.read()
    buf = io.BytesIO(blob)
    head = buf.read(struct.calcsize("<4sHIIIB3x"))
    magic, version, k, n_classes, reg_out, pointnet = struct.unpack("<4sHIIIB3x", head)
    if magic != _WEIGHTS_MAGIC:
        raise ValueError(f"bad weights magic {magic!r}")
    if version != _WEIGHTS_VERSION:
        raise ValueError(f"unsupported weights version {version}")

    def read_arr(n):
        return np.frombuffer(buf.read(8 * n), dtype="<f8").astype(np.float64)

    blocks = []
    for _ in range(4):
        (n_layers,) = struct.unpack("<H", buf.read(2))
        layers = []
        for _ in range(n_layers):
            in_dim, out_dim, act, has_bn = struct.unpack("<IIBB", buf.read(10))
            w = read_arr(in_dim * out_dim).reshape(out_dim, in_dim)
            b = read_arr(out_dim)
            bn = None
            if has_bn:
                (momentum,) = struct.unpack("<d", buf.read(8))
                bn = BatchNormState(out_dim, momentum)
                bn.gamma = read_arr(out_dim)
                bn.beta = read_arr(out_dim)
                bn.running_mean = read_arr(out_dim)
                bn.running_var = read_arr(out_dim)
            layers.append(Layer(DenseLayer(w, b), bn, _ACTIVATIONS[act]))
        blocks.append(layers)
    return MlpModel(*blocks, k=k, n_classes=n_classes, reg_out=reg_out,
                    pointnet=bool(pointnet))
