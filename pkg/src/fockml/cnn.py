"""Two-block convolutional classifier for 32x32 correlation features, in plain numpy.

Architecture (NHWC tensors)::

    32x32x1 -> [conv3x3(64) -> BN -> ReLU] x2 -> maxpool2 -> 16x16x64
            -> [conv3x3(64) -> BN -> ReLU] x2 -> maxpool2 -> 8x8x64
            -> global average pool -> 64 -> dense(512) + ReLU -> dense(4) -> softmax

Training uses per-batch batch-norm statistics and updates running averages;
inference uses the running averages, so it is deterministic per sample.
"""

from __future__ import annotations

import hashlib
import json
import logging
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .correlator import FEATURE_DIM, CorrelationMap, InvalidMapError, preprocess
from .theory import PhotonClass

log = logging.getLogger(__name__)

WEIGHTS_MAGIC = b"FLNN"
WEIGHTS_VERSION = 1
_WEIGHTS_HEADER = struct.Struct("<4sH32s")


class CorruptModelError(ValueError):
    pass


class ConfigMismatchError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    input_dim: int = FEATURE_DIM
    channels: int = 64
    blocks: int = 2
    convs_per_block: int = 2
    kernel: int = 3
    hidden: int = 512
    classes: int = 4
    bn_momentum: float = 0.99
    bn_eps: float = 1e-3

    def __post_init__(self):
        if self.input_dim % (2**self.blocks):
            raise ValueError("input_dim must be divisible by 2**blocks")
        if self.kernel % 2 != 1:
            raise ValueError("kernel size must be odd for same-padding")

    def digest(self) -> bytes:
        return hashlib.sha256(json.dumps(asdict(self), sort_keys=True).encode()).digest()

    @property
    def conv_names(self) -> list[str]:
        return [f"conv{i + 1}" for i in range(self.blocks * self.convs_per_block)]

    def tensor_shapes(self) -> dict[str, tuple[int, ...]]:
        shapes = {}
        cin = 1
        for i, name in enumerate(self.conv_names):
            shapes[f"{name}.kernel"] = (self.kernel, self.kernel, cin, self.channels)
            shapes[f"{name}.bias"] = (self.channels,)
            bn = f"bn{i + 1}"
            for suffix in ("gamma", "beta", "moving_mean", "moving_var"):
                shapes[f"{bn}.{suffix}"] = (self.channels,)
            cin = self.channels
        shapes["dense1.kernel"] = (self.channels, self.hidden)
        shapes["dense1.bias"] = (self.hidden,)
        shapes["dense2.kernel"] = (self.hidden, self.classes)
        shapes["dense2.bias"] = (self.classes,)
        return shapes

    @staticmethod
    def is_trainable(name: str) -> bool:
        return not name.endswith(("moving_mean", "moving_var"))


@dataclass
class ModelParams:
    config: ModelConfig
    tensors: dict[str, np.ndarray]

    @property
    def parameter_count(self) -> int:
        return sum(t.size for name, t in self.tensors.items() if self.config.is_trainable(name))

    @property
    def trainable(self) -> list[str]:
        return [name for name in self.tensors if self.config.is_trainable(name)]

    def astype(self, dtype) -> "ModelParams":
        return ModelParams(self.config, {k: v.astype(dtype) for k, v in self.tensors.items()})

    def copy(self) -> "ModelParams":
        return ModelParams(self.config, {k: v.copy() for k, v in self.tensors.items()})

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]


def init(config: ModelConfig = ModelConfig(), seed: int = 0) -> ModelParams:
    """Variance-scaled uniform kernels (limit sqrt(3 / fan_in)), zero biases, identity batch-norm."""
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, shape in config.tensor_shapes().items():
        if name.endswith("kernel"):
            fan_in = int(np.prod(shape[:-1]))
            limit = np.sqrt(3.0 / fan_in)
            tensors[name] = rng.uniform(-limit, limit, size=shape).astype(np.float32)
        elif name.endswith(("gamma", "moving_var")):
            tensors[name] = np.ones(shape, dtype=np.float32)
        else:
            tensors[name] = np.zeros(shape, dtype=np.float32)
    return ModelParams(config, tensors)


# -- layers -----------------------------------------------------------------

def _conv_forward(x, kernel, bias):
    n, h, w, c = x.shape
    k = kernel.shape[0]
    pad = k // 2
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    cols = sliding_window_view(xp, (k, k), axis=(1, 2)).reshape(n * h * w, c * k * k)
    wmat = kernel.transpose(2, 0, 1, 3).reshape(c * k * k, -1)
    out = cols @ wmat + bias
    return out.reshape(n, h, w, -1), cols


def _conv_backward(dout, cols, x_shape, kernel, need_dx=True):
    n, h, w, c = x_shape
    k = kernel.shape[0]
    f = kernel.shape[-1]
    d = dout.reshape(-1, f)
    dkernel = (cols.T @ d).reshape(c, k, k, f).transpose(1, 2, 0, 3)
    dbias = d.sum(axis=0)
    if not need_dx:
        return None, dkernel, dbias
    wmat = kernel.transpose(2, 0, 1, 3).reshape(c * k * k, f)
    dcols = (d @ wmat.T).reshape(n, h, w, c, k, k)
    pad = k // 2
    dxp = np.zeros((n, h + 2 * pad, w + 2 * pad, c), dtype=dout.dtype)
    for i in range(k):
        for j in range(k):
            dxp[:, i:i + h, j:j + w, :] += dcols[..., i, j]
    return dxp[:, pad:pad + h, pad:pad + w, :], dkernel, dbias


def _bn_forward(x, gamma, beta, mean, var, eps):
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x - mean) * inv_std
    return gamma * xhat + beta, xhat, inv_std


def _bn_backward(dy, xhat, inv_std, gamma, batch_stats: bool):
    dgamma = (dy * xhat).sum(axis=(0, 1, 2))
    dbeta = dy.sum(axis=(0, 1, 2))
    dxhat = dy * gamma
    if not batch_stats:
        return dxhat * inv_std, dgamma, dbeta
    m = dy.shape[0] * dy.shape[1] * dy.shape[2]
    dx = (inv_std / m) * (
        m * dxhat - dxhat.sum(axis=(0, 1, 2)) - xhat * (dxhat * xhat).sum(axis=(0, 1, 2))
    )
    return dx, dgamma, dbeta


def _pool_forward(x):
    n, h, w, c = x.shape
    windows = x.reshape(n, h // 2, 2, w // 2, 2, c).transpose(0, 1, 3, 5, 2, 4).reshape(
        n, h // 2, w // 2, c, 4
    )
    idx = windows.argmax(axis=-1)
    out = np.take_along_axis(windows, idx[..., None], axis=-1)[..., 0]
    return out, idx


def _pool_backward(dout, idx, x_shape):
    n, h, w, c = x_shape
    dwin = np.zeros(dout.shape + (4,), dtype=dout.dtype)
    np.put_along_axis(dwin, idx[..., None], dout[..., None], axis=-1)
    dwin = dwin.reshape(n, h // 2, w // 2, c, 2, 2).transpose(0, 1, 4, 2, 5, 3)
    return dwin.reshape(n, h, w, c)


def _softmax(logits):
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _as_batch(features, dtype, dim):
    x = np.asarray(features, dtype=dtype)
    if x.ndim == 2:
        x = x[None]
    if x.ndim == 4 and x.shape[-1] == 1:
        x = x[..., 0]
    if x.ndim != 3 or x.shape[1:] != (dim, dim):
        raise ValueError(f"expected features of shape ({dim}, {dim}) or (N, {dim}, {dim}), got {np.shape(features)}")
    return x[..., None]


def _forward(params: ModelParams, x, batch_stats: bool, cache: dict | None = None, trace=None):
    """Return logits for an NHWC batch.

    With ``batch_stats`` the batch-norm layers normalize by batch moments and
    the moments are stored in ``cache["bn_stats"]``.
    """
    cfg = params.config
    t = params.tensors
    if trace is not None:
        trace.append(("input", x.shape[1:]))
    h = x
    for i, name in enumerate(cfg.conv_names):
        bn = f"bn{i + 1}"
        conv_in_shape = h.shape
        z, cols = _conv_forward(h, t[f"{name}.kernel"], t[f"{name}.bias"])
        if batch_stats:
            mean, var = z.mean(axis=(0, 1, 2)), z.var(axis=(0, 1, 2))
        else:
            mean, var = t[f"{bn}.moving_mean"], t[f"{bn}.moving_var"]
        y, xhat, inv_std = _bn_forward(z, t[f"{bn}.gamma"], t[f"{bn}.beta"], mean, var, cfg.bn_eps)
        a = np.maximum(y, 0)
        if trace is not None:
            trace.append((name, a.shape[1:]))
        if cache is not None:
            cache[name] = (cols, conv_in_shape, xhat, inv_std, y)
            if batch_stats:
                cache.setdefault("bn_stats", {})[bn] = (mean, var)
        h = a
        if (i + 1) % cfg.convs_per_block == 0:
            block = (i + 1) // cfg.convs_per_block
            pooled, idx = _pool_forward(h)
            if cache is not None:
                cache[f"pool{block}"] = (idx, h.shape)
            h = pooled
            if trace is not None:
                trace.append((f"pool{block}", h.shape[1:]))
    gap_shape = h.shape
    g = h.mean(axis=(1, 2))
    if trace is not None:
        trace.append(("gap", g.shape[1:]))
    z1 = g @ t["dense1.kernel"] + t["dense1.bias"]
    a1 = np.maximum(z1, 0)
    if trace is not None:
        trace.append(("dense1", a1.shape[1:]))
    logits = a1 @ t["dense2.kernel"] + t["dense2.bias"]
    if trace is not None:
        trace.append(("dense2", logits.shape[1:]))
    if cache is not None:
        cache["head"] = (gap_shape, g, z1, a1)
    return logits


def _backward(params: ModelParams, dlogits, cache: dict, batch_stats: bool) -> dict[str, np.ndarray]:
    cfg = params.config
    t = params.tensors
    grads = {}
    gap_shape, g, z1, a1 = cache["head"]
    grads["dense2.kernel"] = a1.T @ dlogits
    grads["dense2.bias"] = dlogits.sum(axis=0)
    dz1 = (dlogits @ t["dense2.kernel"].T) * (z1 > 0)
    grads["dense1.kernel"] = g.T @ dz1
    grads["dense1.bias"] = dz1.sum(axis=0)
    dg = dz1 @ t["dense1.kernel"].T
    _, hh, ww, _ = gap_shape
    dh = np.broadcast_to(dg[:, None, None, :] / (hh * ww), gap_shape)
    names = cfg.conv_names
    for i in reversed(range(len(names))):
        name = names[i]
        bn = f"bn{i + 1}"
        if (i + 1) % cfg.convs_per_block == 0:
            idx, pre_shape = cache[f"pool{(i + 1) // cfg.convs_per_block}"]
            dh = _pool_backward(dh, idx, pre_shape)
        cols, in_shape, xhat, inv_std, y = cache[name]
        dy = dh * (y > 0)
        dz, grads[f"{bn}.gamma"], grads[f"{bn}.beta"] = _bn_backward(
            dy, xhat, inv_std, t[f"{bn}.gamma"], batch_stats
        )
        dh, grads[f"{name}.kernel"], grads[f"{name}.bias"] = _conv_backward(
            dz, cols, in_shape, t[f"{name}.kernel"], need_dx=i > 0
        )
    return grads


def layer_shapes(params: ModelParams) -> list[tuple[str, tuple[int, ...]]]:
    """Per-layer output shapes (without batch axis) for one input."""
    trace = []
    dim = params.config.input_dim
    _forward(params, np.zeros((1, dim, dim, 1), dtype=np.float32), batch_stats=False, trace=trace)
    return trace


def forward(params: ModelParams, features, training: bool = False) -> np.ndarray:
    """Class probabilities (coherent, fock1, fock2, fock3) for one matrix or a batch."""
    single = np.ndim(features) == 2
    x = _as_batch(features, params.tensors["dense2.kernel"].dtype, params.config.input_dim)
    probs = _softmax(_forward(params, x, batch_stats=training))
    return probs[0] if single else probs


def loss_and_grads(params: ModelParams, features, labels, batch_stats: bool = True):
    """Mean categorical cross-entropy and its gradient for every trainable tensor.

    Returns ``(loss, grads, bn_stats)``; ``bn_stats`` is empty in fixed-statistics mode.
    """
    x = _as_batch(features, params.tensors["dense2.kernel"].dtype, params.config.input_dim)
    labels = np.asarray(labels, dtype=np.int64)
    cache = {}
    logits = _forward(params, x, batch_stats=batch_stats, cache=cache)
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    n = x.shape[0]
    loss = float(-logp[np.arange(n), labels].mean())
    dlogits = np.exp(logp)
    dlogits[np.arange(n), labels] -= 1
    dlogits /= n
    grads = _backward(params, dlogits.astype(logits.dtype), cache, batch_stats)
    return loss, grads, cache.get("bn_stats", {})


# -- training ---------------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 32
    epochs: int = 1
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-7


@dataclass
class TrainHistory:
    steps: list[int] = field(default_factory=list)
    losses: list[float] = field(default_factory=list)
    val_accuracy: dict[int, float] = field(default_factory=dict)  # step -> accuracy at epoch end

    def write_tsv(self, path) -> None:
        with open(path, "w") as fh:
            fh.write("step\tloss\tval_accuracy\n")
            for step, loss in zip(self.steps, self.losses):
                acc = self.val_accuracy.get(step)
                fh.write(f"{step}\t{loss:.6f}\t{'' if acc is None else f'{acc:.6f}'}\n")


class Adam:
    def __init__(self, params: ModelParams, hyper: TrainConfig):
        self.hyper = hyper
        self.t = 0
        self.m = {k: np.zeros_like(params[k]) for k in params.trainable}
        self.v = {k: np.zeros_like(params[k]) for k in params.trainable}

    def step(self, params: ModelParams, grads: dict[str, np.ndarray]) -> None:
        h = self.hyper
        self.t += 1
        c1 = 1 - h.beta1**self.t
        c2 = 1 - h.beta2**self.t
        for k, g in grads.items():
            m, v = self.m[k], self.v[k]
            m *= h.beta1
            m += (1 - h.beta1) * g
            v *= h.beta2
            v += (1 - h.beta2) * g * g
            update = h.learning_rate * (m / c1) / (np.sqrt(v / c2) + h.epsilon)
            params.tensors[k] -= update.astype(params.tensors[k].dtype)


class RunningStats:
    """Bias-corrected exponential averages of batch-norm moments.

    Accumulators start at zero and are divided by ``1 - momentum**t``, so the
    running statistics carry no weight from their initial values even after
    few steps.
    """

    def __init__(self, params: ModelParams):
        self.momentum = params.config.bn_momentum
        self.t = 0
        self.acc = {
            k: np.zeros_like(v) for k, v in params.tensors.items() if k.endswith(("moving_mean", "moving_var"))
        }

    def update(self, params: ModelParams, bn_stats: dict) -> None:
        mom = self.momentum
        self.t += 1
        correction = 1 - mom**self.t
        for bn, (mean, var) in bn_stats.items():
            for suffix, batch in (("moving_mean", mean), ("moving_var", var)):
                key = f"{bn}.{suffix}"
                acc = self.acc[key]
                acc *= mom
                acc += (1 - mom) * batch
                params.tensors[key] = (acc / correction).astype(params.tensors[key].dtype)


def train_step(params: ModelParams, optimizer: Adam, stats: RunningStats, features, labels) -> float:
    loss, grads, bn_stats = loss_and_grads(params, features, labels, batch_stats=True)
    optimizer.step(params, grads)
    stats.update(params, bn_stats)
    return loss


def train(
    train_set,
    val_set=None,
    hyper: TrainConfig = TrainConfig(),
    seed: int = 0,
    config: ModelConfig = ModelConfig(),
    params: ModelParams | None = None,
) -> tuple[ModelParams, TrainHistory]:
    """Mini-batch Adam on cross-entropy.

    ``train_set``/``val_set`` expose ``features`` (N, 32, 32) and ``labels`` (N,).
    Data order is shuffled per epoch by a generator seeded from ``seed``.
    """
    features = np.asarray(train_set.features)
    labels = np.asarray(train_set.labels, dtype=np.int64)
    if features.shape[0] == 0:
        raise ValueError("training set is empty")
    rng = np.random.default_rng([seed, 1])
    if params is None:
        params = init(config, seed)
    else:
        params = params.copy()
    opt = Adam(params, hyper)
    stats = RunningStats(params)
    history = TrainHistory()
    step = 0
    for epoch in range(hyper.epochs):
        order = rng.permutation(features.shape[0])
        for start in range(0, len(order), hyper.batch_size):
            batch = order[start:start + hyper.batch_size]
            loss = train_step(params, opt, stats, features[batch], labels[batch])
            step += 1
            history.steps.append(step)
            history.losses.append(loss)
            if step % 50 == 0:
                log.info("epoch %d step %d loss %.4f", epoch + 1, step, loss)
        if val_set is not None and len(val_set.labels):
            pred = predict_batch(params, val_set.features).argmax(axis=1)
            acc = float(np.mean(pred == np.asarray(val_set.labels)))
            history.val_accuracy[step] = acc
            log.info("epoch %d validation accuracy %.4f", epoch + 1, acc)
    return params, history


def predict_batch(params: ModelParams, features, batch_size: int = 256) -> np.ndarray:
    """Inference-mode probabilities for an (N, 32, 32) array, evaluated in chunks."""
    features = np.asarray(features)
    out = [forward(params, features[i:i + batch_size]) for i in range(0, features.shape[0], batch_size)]
    if not out:
        return np.zeros((0, params.config.classes))
    return np.concatenate(out)


def argmax_class(scores) -> PhotonClass:
    # np.argmax keeps the first maximum, i.e. the lower class index on ties
    return PhotonClass(int(np.argmax(scores)))


def predict(params: ModelParams, cmap: CorrelationMap) -> tuple[PhotonClass, np.ndarray]:
    if not cmap.valid:
        raise InvalidMapError("cannot classify a map with zero normalization")
    scores = forward(params, preprocess(cmap))
    return argmax_class(scores), scores


# -- persistence ------------------------------------------------------------

def save(params: ModelParams, path) -> None:
    """Write tensors as float32 records; float32 parameters round-trip bit-exactly."""
    with open(path, "wb") as fh:
        fh.write(_WEIGHTS_HEADER.pack(WEIGHTS_MAGIC, WEIGHTS_VERSION, params.config.digest()))
        for name, tensor in params.tensors.items():
            raw = name.encode()
            fh.write(struct.pack("<H", len(raw)) + raw)
            fh.write(struct.pack("<B", tensor.ndim))
            fh.write(struct.pack(f"<{tensor.ndim}I", *tensor.shape))
            fh.write(np.ascontiguousarray(tensor, dtype="<f4").tobytes())


def load(path, config: ModelConfig | None = None) -> ModelParams:
    config = config or ModelConfig()
    path = Path(path)
    data = path.read_bytes()
    if len(data) < _WEIGHTS_HEADER.size:
        raise CorruptModelError(f"{path}: truncated weights header")
    magic, version, digest = _WEIGHTS_HEADER.unpack_from(data)
    if magic != WEIGHTS_MAGIC:
        raise CorruptModelError(f"{path}: not a weights file (magic {magic!r})")
    if version != WEIGHTS_VERSION:
        raise CorruptModelError(f"{path}: unsupported weights version {version}")
    if digest != config.digest():
        raise ConfigMismatchError(f"{path}: weights were saved for a different model configuration")
    tensors = {}
    pos = _WEIGHTS_HEADER.size
    try:
        while pos < len(data):
            (name_len,) = struct.unpack_from("<H", data, pos)
            pos += 2
            name = data[pos:pos + name_len].decode()
            pos += name_len
            (rank,) = struct.unpack_from("<B", data, pos)
            pos += 1
            dims = struct.unpack_from(f"<{rank}I", data, pos)
            pos += 4 * rank
            count = int(np.prod(dims, dtype=np.int64))
            if pos + 4 * count > len(data):
                raise CorruptModelError(f"{path}: tensor {name!r} is truncated")
            tensors[name] = np.frombuffer(data, dtype="<f4", count=count, offset=pos).reshape(dims).astype(np.float32)
            pos += 4 * count
    except (struct.error, UnicodeDecodeError) as exc:
        raise CorruptModelError(f"{path}: malformed tensor record ({exc})") from None
    expected = config.tensor_shapes()
    if set(tensors) != set(expected):
        raise CorruptModelError(f"{path}: tensor set does not match the model configuration")
    for name, shape in expected.items():
        if tensors[name].shape != shape:
            raise CorruptModelError(f"{path}: tensor {name!r} has shape {tensors[name].shape}, expected {shape}")
    return ModelParams(config, {name: tensors[name] for name in expected})
