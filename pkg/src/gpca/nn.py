"""A small numpy CNN classifier with a pluggable channel-attention slot.

Layers keep what their backward pass needs from the last forward call, so
one model instance handles one batch at a time. Everything is float64.
"""

import enum
import json
import logging
import math
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .attention import (PROBIT_LAMBDA, KernelParams, Variant, VariantSpec, gpca_forward)
from .grad import gpca_backward
from .numerics import sigmoid

log = logging.getLogger(__name__)


class ConfigError(ValueError):
    """Invalid model, optimizer or dataset configuration."""


class DivergenceError(RuntimeError):
    def __init__(self, epoch, loss):
        super().__init__(f"training diverged in epoch {epoch}: loss = {loss}")
        self.epoch = epoch
        self.loss = loss


class NoAttentionSlotError(ValueError):
    pass


class Slot(enum.Enum):
    NONE = "None"
    GPCA_FULL = "GPCA_Full"
    GPCA_LOCAL = "GPCA_Local"
    GPCA_MHA = "GPCA_MHA"
    GPCA_NOPRIOR = "GPCA_NoPrior"
    GPCA_FIXEDTHETA = "GPCA_FixedTheta"

    @classmethod
    def parse(cls, value):
        if isinstance(value, cls):
            return value
        if value is None:
            return cls.NONE
        for member in cls:
            if str(value).lower() in (member.value.lower(), member.name.lower()):
                return member
        raise ConfigError(f"unknown attention slot {value!r}; choose from {[m.value for m in cls]}")


# theta_1 values the fixed-parameter ablation may use: 2^n for n = -2..6 (1 included)
FIXED_THETA1_CHOICES = tuple(2.0 ** n for n in range(-2, 7))


@dataclass
class TinyCnnConfig:
    conv_layers: tuple = ((8, 3, 1), (16, 3, 1), (16, 3, 2))
    attention_slot: Slot = Slot.NONE
    num_classes: int = 10
    input_shape: tuple = (1, 28, 28)
    # attention options
    theta_tilde_init: tuple = (0.0, 0.0, 0.0, 0.0)
    delta: float = 1e6
    group_size: int = 4
    gamma: float = 2.0
    b: float = 1.0
    fixed_theta1: float = 64.0
    noprior_scale: float = 1.0

    def __post_init__(self):
        self.attention_slot = Slot.parse(self.attention_slot)
        try:
            self.conv_layers = tuple(tuple(int(v) for v in layer) for layer in self.conv_layers)
            self.input_shape = tuple(int(v) for v in self.input_shape)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"malformed layer or shape spec: {exc}") from exc
        if not self.conv_layers:
            raise ConfigError("need at least one conv layer")
        for layer in self.conv_layers:
            if len(layer) != 3 or min(layer) < 1:
                raise ConfigError(f"conv layer must be (out_channels, kernel, stride) >= 1, got {layer}")
        if len(self.input_shape) != 3 or min(self.input_shape) < 1:
            raise ConfigError(f"input_shape must be (channels, height, width), got {self.input_shape}")
        if self.num_classes < 2:
            raise ConfigError("need at least two classes")
        if self.attention_slot is not Slot.NONE and self.conv_layers[-1][0] < 2:
            raise ConfigError("attention needs at least two channels after the last conv")
        if self.attention_slot is Slot.GPCA_FIXEDTHETA and self.fixed_theta1 not in FIXED_THETA1_CHOICES:
            raise ConfigError(f"fixed_theta1 must be one of {FIXED_THETA1_CHOICES}")
        if len(self.theta_tilde_init) != 4:
            raise ConfigError("theta_tilde_init needs four entries")
        if not self.noprior_scale > 0:
            raise ConfigError("noprior_scale must be positive")

    def to_dict(self):
        d = asdict(self)
        d["attention_slot"] = self.attention_slot.value
        return d


@dataclass
class SgdConfig:
    learning_rate: float = 0.02
    momentum: float = 0.9
    weight_decay: float = 5e-4
    epochs: int = 8
    batch_size: int = 32
    lr_decay_epochs: tuple = (6, 7)
    lr_decay_factor: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if not self.learning_rate >= 0:
            raise ConfigError("learning_rate must be non-negative")
        if not 0 <= self.momentum < 1:
            raise ConfigError("momentum must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be non-negative")
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigError("epochs must be >= 0 and batch_size >= 1")
        self.lr_decay_epochs = tuple(int(e) for e in self.lr_decay_epochs)

    def lr_at(self, epoch):
        """Learning rate for 1-based ``epoch`` after step decays."""
        drops = sum(1 for e in self.lr_decay_epochs if epoch > e)
        return self.learning_rate * self.lr_decay_factor ** drops


# ---------------------------------------------------------------------------
# layers


class Conv2d:
    """Square-kernel convolution with 'same' zero padding, via im2col.

    Columns are laid out channels-first, (C k k, N Ho Wo), so both GEMMs
    and the col2im scatter touch contiguous memory.
    """

    def __init__(self, in_ch, out_ch, k, stride, rng, input_grad=True):
        fan_in = in_ch * k * k
        self.k, self.stride = k, stride
        self.input_grad = input_grad
        self.params = {
            "weight": rng.normal(0.0, math.sqrt(2.0 / fan_in), size=(out_ch, in_ch, k, k)),
            "bias": np.zeros(out_ch),
        }
        self.grads = {}

    def forward(self, x, train=True):
        k, s = self.k, self.stride
        p = k // 2
        N, C, H, W = x.shape
        xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
        win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::s, ::s]
        Ho, Wo = win.shape[2], win.shape[3]
        cols = win.transpose(1, 4, 5, 0, 2, 3).reshape(C * k * k, N * Ho * Wo)
        w = self.params["weight"]
        out = w.reshape(w.shape[0], -1) @ cols
        out += self.params["bias"][:, None]
        if train:
            self._cache = (cols, x.shape, Ho, Wo)
        return out.reshape(-1, N, Ho, Wo).transpose(1, 0, 2, 3)

    def backward(self, dout):
        cols, shape, Ho, Wo = self._cache
        k, s = self.k, self.stride
        p = k // 2
        N, C, H, W = shape
        w = self.params["weight"]
        wmat = w.reshape(w.shape[0], -1)
        d2 = dout.transpose(1, 0, 2, 3).reshape(w.shape[0], -1)
        self.grads["weight"] = (d2 @ cols.T).reshape(w.shape)
        self.grads["bias"] = d2.sum(axis=1)
        if not self.input_grad:
            return None
        dcols = (wmat.T @ d2).reshape(C, k, k, N, Ho, Wo)
        dxp = np.zeros((C, N, H + 2 * p, W + 2 * p))
        for i in range(k):
            for j in range(k):
                dxp[:, :, i:i + s * Ho:s, j:j + s * Wo:s] += dcols[:, i, j]
        return dxp[:, :, p:p + H, p:p + W].transpose(1, 0, 2, 3)


class ReLU:
    params = {}
    grads = {}

    def forward(self, x, train=True):
        if train:
            self._mask = x > 0
        return np.maximum(x, 0.0)

    def backward(self, dout):
        return dout * self._mask


class GlobalAvgPool:
    params = {}
    grads = {}

    def forward(self, x, train=True):
        if train:
            self._shape = x.shape
        return x.mean(axis=(2, 3))

    def backward(self, dout):
        N, C, H, W = self._shape
        return np.broadcast_to(dout[:, :, None, None] / (H * W), self._shape).copy()


class Linear:
    def __init__(self, n_in, n_out, rng):
        self.params = {
            "weight": rng.normal(0.0, math.sqrt(1.0 / n_in), size=(n_out, n_in)),
            "bias": np.zeros(n_out),
        }
        self.grads = {}

    def forward(self, x, train=True):
        if train:
            self._x = x
        return x @ self.params["weight"].T + self.params["bias"]

    def backward(self, dout):
        self.grads["weight"] = dout.T @ self._x
        self.grads["bias"] = dout.sum(axis=0)
        return dout @ self.params["weight"]


class GpcaSlot:
    """GP channel attention on (N, C, H, W) activations.

    ``trainable=False`` severs the theta gradient (fixed-parameter
    ablation). With ``threads > 1`` samples are split into chunks run on a
    thread pool; per-sample theta gradients are summed in sample order, so
    the result does not depend on the thread count.
    """

    def __init__(self, variant: VariantSpec, theta_tilde, delta, trainable=True):
        self.variant = variant
        self.delta = delta
        self.trainable = trainable
        tt = np.array(theta_tilde, dtype=float)
        if trainable:
            self.params = {"theta_tilde": tt}
        else:
            self.params = {}
            self._fixed = tt
        self.grads = {}
        self.threads = 1
        self.last_masks = None

    @property
    def kernel_params(self):
        tt = self.params["theta_tilde"] if self.trainable else self._fixed
        return KernelParams(tuple(tt), self.delta)

    def _chunks(self, n):
        parts = min(self.threads, n)
        return np.array_split(np.arange(n), parts)

    def _map(self, fn, items):
        if self.threads > 1 and len(items) > 1:
            with ThreadPoolExecutor(max_workers=self.threads) as pool:
                return list(pool.map(fn, items))
        return [fn(item) for item in items]

    def forward(self, x, train=True):
        N, C, H, W = x.shape
        flat = x.reshape(N, C, H * W)
        params = self.kernel_params
        chunks = self._chunks(N)
        results = self._map(lambda idx: gpca_forward(flat[idx], params, self.variant), chunks)
        y = np.concatenate([r[0] for r in results]).reshape(x.shape)
        self.last_masks = np.concatenate([r[1].V for r in results])
        if train:
            self._caches = [r[1] for r in results]
            self._chunk_idx = chunks
        return y

    def backward(self, dout):
        N, C, H, W = dout.shape
        flat = dout.reshape(N, C, H * W)
        pairs = list(zip(self._caches, self._chunk_idx))
        grads = self._map(
            lambda pair: gpca_backward(pair[0], flat[pair[1]], through_params=self.trainable,
                                       reduce=False), pairs)
        dx = np.concatenate([g.d_input for g in grads]).reshape(dout.shape)
        if self.trainable:
            per_sample = np.concatenate([g.d_theta_tilde for g in grads])
            self.grads["theta_tilde"] = per_sample.sum(axis=0)
        return dx


class NoPriorSlot:
    """Masks from free per-channel (mu, sigma_tilde); no Gram matrix.

    V_c = sigmoid(mu_c / sqrt(1 + s exp(sigma_tilde_c) / lambda^2)), the
    same expectation formula the GP slot uses, with its inputs learned
    directly.
    """

    def __init__(self, channels, scale=1.0, probit_lambda=PROBIT_LAMBDA):
        self.params = {"mu": np.zeros(channels), "sigma_tilde": np.zeros(channels)}
        self.grads = {}
        self.scale = scale
        self.lam2 = probit_lambda ** 2
        self.threads = 1
        self.last_masks = None

    def masks(self):
        var = self.scale * np.exp(self.params["sigma_tilde"])
        denom = np.sqrt(1.0 + var / self.lam2)
        return sigmoid(self.params["mu"] / denom), var, denom

    def forward(self, x, train=True):
        V, var, denom = self.masks()
        self.last_masks = np.broadcast_to(V, x.shape[:2]).copy()
        if train:
            self._cache = (x, V, var, denom)
        return V[None, :, None, None] * x

    def backward(self, dout):
        x, V, var, denom = self._cache
        dV = np.einsum("nchw,nchw->c", dout, x)
        dt = dV * V * (1.0 - V)
        self.grads["mu"] = dt / denom
        # d/d sigma_tilde of mu / sqrt(1 + var / lam2), with d var = var
        self.grads["sigma_tilde"] = -0.5 * dt * self.params["mu"] * var / (self.lam2 * denom ** 3)
        return V[None, :, None, None] * dout


def build_ablation(kind, channels, config: TinyCnnConfig = None):
    """Attention layer for slot ``kind`` acting on ``channels`` channels."""
    kind = Slot.parse(kind)
    config = config or TinyCnnConfig(attention_slot=kind)
    if kind is Slot.NONE:
        return None
    if kind is Slot.GPCA_NOPRIOR:
        return NoPriorSlot(channels, config.noprior_scale)
    if kind is Slot.GPCA_FIXEDTHETA:
        theta = (1.0, config.fixed_theta1, 0.0, 1.0)
        return GpcaSlot(VariantSpec(Variant.FULL), KernelParams.from_theta(theta).theta_tilde,
                        config.delta, trainable=False)
    variant = {
        Slot.GPCA_FULL: VariantSpec(Variant.FULL),
        Slot.GPCA_LOCAL: VariantSpec(Variant.LOCAL, gamma=config.gamma, b=config.b),
        Slot.GPCA_MHA: VariantSpec(Variant.MHA, group_size=config.group_size),
    }[kind]
    return GpcaSlot(variant, config.theta_tilde_init, config.delta)


# ---------------------------------------------------------------------------
# model


class Model:
    def __init__(self, config: TinyCnnConfig, layers, names, attention):
        self.config = config
        self.layers = layers
        self.names = names
        self.attention = attention

    def forward(self, x, train=True):
        for layer in self.layers:
            x = layer.forward(x, train)
        return x

    def backward(self, dlogits):
        d = dlogits
        for layer in reversed(self.layers):
            d = layer.backward(d)
        return d  # None: the first conv skips its input gradient

    def parameters(self):
        """Ordered (name, array) pairs; arrays are the live parameter buffers."""
        out = []
        for name, layer in zip(self.names, self.layers):
            for key in sorted(layer.params):
                out.append((f"{name}.{key}", layer.params[key]))
        return out

    def gradients(self):
        out = []
        for name, layer in zip(self.names, self.layers):
            for key in sorted(layer.params):
                out.append((f"{name}.{key}", layer.grads[key]))
        return out

    def set_threads(self, n):
        if self.attention is not None:
            self.attention.threads = max(1, int(n))

    def loss_and_grad(self, x, labels):
        """Mean cross-entropy over the batch; fills every layer's grads."""
        logits = self.forward(x, train=True)
        loss, dlogits, _ = softmax_cross_entropy(logits, labels)
        self.backward(dlogits)
        return loss, logits

    def predict(self, x, batch_size=256):
        preds = []
        for start in range(0, len(x), batch_size):
            preds.append(np.argmax(self.forward(x[start:start + batch_size], train=False), axis=1))
        return np.concatenate(preds) if preds else np.zeros(0, dtype=int)

    def save(self, path):
        arrays = {name: value for name, value in self.parameters()}
        arrays["__config__"] = np.array(json.dumps(self.config.to_dict()))
        with open(path, "wb") as fh:
            np.savez(fh, **arrays)


def build_model(config: TinyCnnConfig, seed) -> Model:
    """He-initialized conv stack, optional attention, global pool, linear head."""
    if not isinstance(config, TinyCnnConfig):
        raise ConfigError("config must be a TinyCnnConfig")
    rng = np.random.default_rng(seed)
    layers, names = [], []
    in_ch = config.input_shape[0]
    for i, (out_ch, k, stride) in enumerate(config.conv_layers, start=1):
        layers += [Conv2d(in_ch, out_ch, k, stride, rng, input_grad=i > 1), ReLU()]
        names += [f"conv{i}", f"relu{i}"]
        in_ch = out_ch
    attention = build_ablation(config.attention_slot, in_ch, config)
    if attention is not None:
        layers.append(attention)
        names.append("attn")
    layers += [GlobalAvgPool(), Linear(in_ch, config.num_classes, rng)]
    names += ["pool", "fc"]
    return Model(config, layers, names, attention)


def load_model(path) -> Model:
    with np.load(path) as data:
        cfg = json.loads(str(data["__config__"]))
        config = TinyCnnConfig(**cfg)
        model = build_model(config, 0)
        for name, value in model.parameters():
            value[...] = data[name]
    return model


def softmax_cross_entropy(logits, labels):
    """(mean loss, dloss/dlogits, probabilities)."""
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    n = logits.shape[0]
    loss = -float(logp[np.arange(n), labels].mean())
    probs = np.exp(logp)
    d = probs.copy()
    d[np.arange(n), labels] -= 1.0
    return loss, d / n, probs


def cross_entropy_shift(logits, labels, reference):
    """Mean cross-entropy at ``logits`` minus its value at ``reference``.

    Evaluated through log1p/expm1 of the logit difference, so the result
    carries rounding error relative to the (small) difference rather than
    to the loss itself. Central differences of this function resolve much
    smaller gradients than differences of the raw loss.
    """
    n = logits.shape[0]
    rows = np.arange(n)
    z0 = reference - reference.max(axis=1, keepdims=True)
    p0 = np.exp(z0)
    p0 /= p0.sum(axis=1, keepdims=True)
    delta = logits - reference
    lse_change = np.log1p(np.sum(p0 * np.expm1(delta), axis=1))
    return float(np.mean(lse_change - delta[rows, labels]))


# ---------------------------------------------------------------------------
# data


@dataclass
class Dataset:
    images: np.ndarray  # (N, C, H, W) float64 in [0, 1]
    labels: np.ndarray  # (N,) int
    num_classes: int

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=float)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4 or len(self.images) != len(self.labels):
            raise ConfigError("images must be (N, C, H, W) with one label each")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ConfigError("labels must lie in [0, num_classes)")

    def __len__(self):
        return len(self.labels)


def normalize_images(images):
    """Rescale every image channel to span [0, 1] (constant channels map to 0)."""
    lo = images.min(axis=(-2, -1), keepdims=True)
    span = images.max(axis=(-2, -1), keepdims=True) - lo
    return np.where(span > 0, (images - lo) / np.where(span > 0, span, 1.0), 0.0)


SYNTHETIC_CLASSES = ("horizontal", "vertical", "diagonal", "antidiagonal", "checker",
                     "disk", "ring", "square", "cross", "blobs")


def _synthetic_image(label, rng, size, noise):
    yy, xx = np.mgrid[0:size, 0:size].astype(float)
    period = rng.uniform(4.0, 8.0)
    phase = rng.uniform(0.0, 2 * np.pi)
    w = 2 * np.pi / period
    cy, cx = rng.uniform(size * 0.3, size * 0.7, size=2)
    r = rng.uniform(size * 0.15, size * 0.3)
    dy, dx = yy - cy, xx - cx
    if label == 0:
        img = np.sin(w * yy + phase)
    elif label == 1:
        img = np.sin(w * xx + phase)
    elif label == 2:
        img = np.sin(w * (xx + yy) / np.sqrt(2) + phase)
    elif label == 3:
        img = np.sin(w * (xx - yy) / np.sqrt(2) + phase)
    elif label == 4:
        img = np.sin(w * xx + phase) * np.sin(w * yy + phase)
    elif label == 5:
        img = (dx ** 2 + dy ** 2 < r ** 2).astype(float)
    elif label == 6:
        d = np.sqrt(dx ** 2 + dy ** 2)
        img = (np.abs(d - r) < 1.5).astype(float)
    elif label == 7:
        img = ((np.abs(dx) < r * 0.9) & (np.abs(dy) < r * 0.9)).astype(float)
    elif label == 8:
        arm = rng.uniform(1.0, 2.5)
        img = (((np.abs(dx) < arm) & (np.abs(dy) < r)) | ((np.abs(dy) < arm) & (np.abs(dx) < r))).astype(float)
    else:
        img = np.zeros((size, size))
        for _ in range(rng.integers(3, 7)):
            by, bx = rng.uniform(0, size, size=2)
            s = rng.uniform(1.5, 3.0)
            img += np.exp(-((yy - by) ** 2 + (xx - bx) ** 2) / (2 * s * s))
    img = img * rng.uniform(0.5, 1.0) + noise * rng.normal(size=img.shape)
    return img


def make_synthetic(train_per_class=500, test_per_class=100, seed=0, size=28, noise=0.6):
    """Procedural 10-class shape/texture set, returned as (train, test).

    The two splits come from independent generator streams.
    """
    n_classes = len(SYNTHETIC_CLASSES)
    streams = np.random.default_rng(seed).spawn(2)
    out = []
    for rng, per_class in zip(streams, (train_per_class, test_per_class)):
        labels = np.repeat(np.arange(n_classes), per_class)
        rng.shuffle(labels)
        images = np.zeros((0, size, size))
        if len(labels):
            images = np.stack([_synthetic_image(int(lab), rng, size, noise) for lab in labels])
        out.append(Dataset(normalize_images(images[:, None]), labels, n_classes))
    return out[0], out[1]


DS_MAGIC = b"GPCA-DS1"


def write_dataset(path, ds: Dataset):
    N, C, H, W = ds.images.shape
    with open(path, "wb") as fh:
        fh.write(DS_MAGIC)
        fh.write(struct.pack("<5I", N, C, H, W, ds.num_classes))
        fh.write(ds.images.astype("<f4").tobytes())
        fh.write(ds.labels.astype("<u2").tobytes())


def read_dataset(path) -> Dataset:
    """Load the binary dataset format; pixels are rescaled to [0, 1] per channel."""
    raw = Path(path).read_bytes()
    head = len(DS_MAGIC) + 20
    if len(raw) < head or raw[:len(DS_MAGIC)] != DS_MAGIC:
        raise ConfigError(f"{path}: not a GPCA-DS1 dataset")
    N, C, H, W, k = struct.unpack("<5I", raw[len(DS_MAGIC):head])
    n_pix = N * C * H * W
    expected = head + 4 * n_pix + 2 * N
    if len(raw) != expected:
        raise ConfigError(f"{path}: expected {expected} bytes, found {len(raw)}")
    pixels = np.frombuffer(raw, dtype="<f4", count=n_pix, offset=head).astype(float)
    labels = np.frombuffer(raw, dtype="<u2", count=N, offset=head + 4 * n_pix).astype(np.int64)
    return Dataset(normalize_images(pixels.reshape(N, C, H, W)), labels, k)


# ---------------------------------------------------------------------------
# training


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    train_loss: float
    train_acc: float
    test_acc: float


REPORT_COLUMNS = ("epoch", "lr", "train_loss", "train_acc", "test_acc")


@dataclass
class TrainReport:
    records: list = field(default_factory=list)

    @property
    def final_test_acc(self):
        return self.records[-1].test_acc if self.records else float("nan")

    def rows(self):
        return [asdict(r) for r in self.records]


def evaluate(model: Model, ds: Dataset) -> float:
    if len(ds) == 0:
        return float("nan")
    return float(np.mean(model.predict(ds.images) == ds.labels))


def _is_decayed(name):
    # weight decay applies to conv and linear weights only
    return name.endswith(".weight")


def train(model: Model, dataset: Dataset, sgd: SgdConfig, test: Dataset = None) -> TrainReport:
    """Minibatch SGD with momentum, weight decay and step learning-rate decay.

    The shuffle order of every epoch comes from ``sgd.seed``. Raises
    :class:`DivergenceError` on a non-finite loss.
    """
    if len(dataset) == 0:
        raise ConfigError("training set is empty")
    rng = np.random.default_rng(sgd.seed)
    params = model.parameters()
    velocity = {name: np.zeros_like(p) for name, p in params}
    report = TrainReport()
    n = len(dataset)
    for epoch in range(1, sgd.epochs + 1):
        lr = sgd.lr_at(epoch)
        order = rng.permutation(n)
        total_loss = 0.0
        correct = 0
        for start in range(0, n, sgd.batch_size):
            idx = order[start:start + sgd.batch_size]
            loss, logits = model.loss_and_grad(dataset.images[idx], dataset.labels[idx])
            if not math.isfinite(loss):
                raise DivergenceError(epoch, loss)
            total_loss += loss * len(idx)
            correct += int(np.sum(np.argmax(logits, axis=1) == dataset.labels[idx]))
            for (name, p), (_, g) in zip(params, model.gradients()):
                step = g + sgd.weight_decay * p if _is_decayed(name) else g
                v = velocity[name]
                v *= sgd.momentum
                v += step
                p -= lr * v
        rec = EpochRecord(epoch, lr, total_loss / n, correct / n,
                          evaluate(model, test) if test is not None else float("nan"))
        log.info("epoch %d lr %.4g loss %.4f train %.4f test %.4f", rec.epoch, rec.lr,
                 rec.train_loss, rec.train_acc, rec.test_acc)
        report.records.append(rec)
    return report


# ---------------------------------------------------------------------------
# mask statistics


@dataclass
class MaskStatistics:
    channel_mean: np.ndarray
    channel_std: np.ndarray
    class_means: np.ndarray  # (num_classes, C); NaN rows for absent classes
    histogram_edges: np.ndarray
    histogram_counts: np.ndarray
    dispersion: float  # std over channels of the mean mask
    count: int  # number of mask values in the histogram (samples x channels)


def collect_masks(model: Model, images, batch_size=256):
    if model.attention is None:
        raise NoAttentionSlotError("model has no attention slot")
    out = []
    for start in range(0, len(images), batch_size):
        model.forward(images[start:start + batch_size], train=False)
        out.append(model.attention.last_masks)
    return np.concatenate(out)


def mask_statistics(model: Model, ds: Dataset, bins: int = 20) -> MaskStatistics:
    V = collect_masks(model, ds.images)
    class_means = np.full((ds.num_classes, V.shape[1]), np.nan)
    for k in range(ds.num_classes):
        sel = ds.labels == k
        if np.any(sel):
            class_means[k] = V[sel].mean(axis=0)
    counts, edges = np.histogram(V, bins=bins, range=(0.0, 1.0))
    mean = V.mean(axis=0)
    return MaskStatistics(mean, V.std(axis=0), class_means, edges, counts,
                          float(np.std(mean)), int(V.size))
