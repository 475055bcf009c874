"""1D convolutional autoencoder over MOTS features, in plain numpy.

Encoder: three valid kernel-3 convolutions (C -> c1 -> c2 -> c3), then two
dense layers down to the code size ``e``. The decoder mirrors it with two
dense layers and three transposed convolutions back to ``C x w``. ReLU
follows every layer except the code layer and the reconstruction layer
(``literal_relu=True`` puts ReLU after those as well).

Computation runs in the parameters' dtype: float64 for gradient checks,
float32 for the pipeline (which is also what the model file stores).
"""

from __future__ import annotations

import logging
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from motsmos.errors import ConfigError, FormatError, NumericError

log = logging.getLogger(__name__)

KERNEL = 3
MODEL_MAGIC = b"MAE1"
_HEADER = struct.Struct("<8IQ")

ENCODER = ("conv1", "conv2", "conv3", "fc1", "fc2")
DECODER = ("fc3", "fc4", "deconv1", "deconv2", "deconv3")
LAYERS = ENCODER + DECODER


def default_channels(channels: int) -> tuple[int, int, int]:
    return (64, 32, 16) if channels >= 125 else (32, 16, 16)


@dataclass(frozen=True)
class AeArchitecture:
    channels: int
    window: int
    conv_channels: tuple[int, int, int] | None = None
    fc_hidden: int = 64
    code_size: int = 32
    literal_relu: bool = False

    def __post_init__(self):
        if self.conv_channels is None:
            object.__setattr__(self, "conv_channels", default_channels(self.channels))
        object.__setattr__(self, "conv_channels", tuple(int(c) for c in self.conv_channels))
        if self.window < 2 * KERNEL + 1:
            raise ConfigError(f"window must be >= 7 for three valid kernel-3 convolutions, got {self.window}")
        if len(self.conv_channels) != 3 or min(self.conv_channels) < 1:
            raise ConfigError(f"conv_channels must be three positive ints, got {self.conv_channels}")
        if self.channels < 1 or self.fc_hidden < 1 or self.code_size < 1:
            raise ConfigError("channels, fc_hidden and code_size must be positive")

    @property
    def bottleneck_length(self) -> int:
        return self.window - 3 * (KERNEL - 1)

    @property
    def flat_size(self) -> int:
        return self.conv_channels[2] * self.bottleneck_length

    def shapes(self) -> dict[str, tuple[tuple[int, ...], tuple[int, ...]]]:
        """(weight shape, bias shape) per layer.

        Conv weights are (out, in, k); transposed-conv weights are (in, out, k);
        dense weights are (out, in).
        """
        C = self.channels
        c1, c2, c3 = self.conv_channels
        h, e, flat = self.fc_hidden, self.code_size, self.flat_size
        return {
            "conv1": ((c1, C, KERNEL), (c1,)),
            "conv2": ((c2, c1, KERNEL), (c2,)),
            "conv3": ((c3, c2, KERNEL), (c3,)),
            "fc1": ((h, flat), (h,)),
            "fc2": ((e, h), (e,)),
            "fc3": ((h, e), (h,)),
            "fc4": ((flat, h), (flat,)),
            "deconv1": ((c3, c2, KERNEL), (c2,)),
            "deconv2": ((c2, c1, KERNEL), (c1,)),
            "deconv3": ((c1, C, KERNEL), (C,)),
        }

    def fan_in(self, layer: str) -> int:
        wshape = self.shapes()[layer][0]
        if layer.startswith("fc"):
            return wshape[1]
        if layer.startswith("deconv"):
            return wshape[0] * wshape[2]
        return wshape[1] * wshape[2]

    def relu_after(self, layer: str) -> bool:
        if layer in ("fc2", "deconv3"):
            return self.literal_relu
        return True


@dataclass
class AeParameters:
    arch: AeArchitecture
    weights: dict[str, np.ndarray]
    seed: int = 0

    def names(self) -> list[str]:
        """Parameter names in file/layer order."""
        return [f"{layer}.{kind}" for layer in LAYERS for kind in ("weight", "bias")]

    def __getitem__(self, name):
        return self.weights[name]

    def copy(self) -> "AeParameters":
        return AeParameters(self.arch, {k: v.copy() for k, v in self.weights.items()}, self.seed)

    @property
    def dtype(self):
        return self.weights["conv1.weight"].dtype

    def astype(self, dtype) -> "AeParameters":
        return AeParameters(self.arch, {k: v.astype(dtype) for k, v in self.weights.items()}, self.seed)

    def num_parameters(self) -> int:
        return sum(v.size for v in self.weights.values())


def init(arch: AeArchitecture, seed: int = 0, dtype=np.float64) -> AeParameters:
    """He-uniform weights (bound ``sqrt(6 / fan_in)``), zero biases."""
    rng = np.random.default_rng(seed)
    weights = {}
    for layer, (wshape, bshape) in arch.shapes().items():
        bound = np.sqrt(6.0 / arch.fan_in(layer))
        weights[f"{layer}.weight"] = rng.uniform(-bound, bound, size=wshape)
        weights[f"{layer}.bias"] = np.zeros(bshape)
    return AeParameters(arch, weights, seed).astype(dtype)


# -- layer primitives --------------------------------------------------------
#
# Activations are channels-last, (B, L, channels), so every convolution is a
# single GEMM over an im2col matrix. Weight layouts are as in shapes().


def _windows(x, K, L):
    """im2col: (B, L_in, I) -> (B, L, K*I), tap-major."""
    return np.concatenate([x[:, k : k + L, :] for k in range(K)], axis=2)


def conv1d(x, weight, bias):
    """Valid cross-correlation. x (B, L, I), weight (O, I, K) -> (B, L-K+1, O)."""
    O, I, K = weight.shape
    L = x.shape[1] - K + 1
    cols = _windows(x, K, L)
    wmat = weight.transpose(2, 1, 0).reshape(K * I, O)
    return cols @ wmat + bias, cols


def conv1d_backward(dy, cols, x_shape, weight):
    O, I, K = weight.shape
    B, L, _ = dy.shape
    dy2 = dy.reshape(-1, O)
    wmat = weight.transpose(2, 1, 0).reshape(K * I, O)
    dw = (cols.reshape(-1, K * I).T @ dy2).reshape(K, I, O).transpose(2, 1, 0)
    dcols = (dy2 @ wmat.T).reshape(B, L, K, I)
    dx = np.zeros(x_shape, dtype=dy.dtype)
    for k in range(K):
        dx[:, k : k + L, :] += dcols[:, :, k, :]
    return dx, dw, dy2.sum(axis=0)


def conv_transpose1d(x, weight, bias):
    """Stride-1 transposed convolution. x (B, L, I), weight (I, O, K) -> (B, L+K-1, O)."""
    I, O, K = weight.shape
    B, L, _ = x.shape
    taps = (x.reshape(-1, I) @ weight.reshape(I, O * K)).reshape(B, L, O, K)
    y = np.zeros((B, L + K - 1, O), dtype=taps.dtype)
    for k in range(K):
        y[:, k : k + L, :] += taps[:, :, :, k]
    return y + bias, None


def conv_transpose1d_backward(dy, _cols, x, weight):
    I, O, K = weight.shape
    B, L, _ = x.shape
    # gather dy windows into (B, L, O, K) matching the (I, O*K) weight view
    dcols = np.stack([dy[:, k : k + L, :] for k in range(K)], axis=3).reshape(-1, O * K)
    wflat = weight.reshape(I, O * K)
    dx = (dcols @ wflat.T).reshape(B, L, I)
    dw = (x.reshape(-1, I).T @ dcols).reshape(I, O, K)
    return dx, dw, dy.sum(axis=(0, 1))


def _apply(layer, x, params):
    w, b = params[f"{layer}.weight"], params[f"{layer}.bias"]
    if layer.startswith("conv"):
        return conv1d(x, w, b)
    if layer.startswith("deconv"):
        return conv_transpose1d(x, w, b)
    return x @ w.T + b, None


def _apply_backward(layer, dy, x, aux, params):
    w = params[f"{layer}.weight"]
    if layer.startswith("conv"):
        return conv1d_backward(dy, aux, x.shape, w)
    if layer.startswith("deconv"):
        return conv_transpose1d_backward(dy, aux, x, w)
    return dy @ w, dy.T @ x, dy.sum(axis=0)


# -- forward / backward ------------------------------------------------------


def _as_batch(params: AeParameters, x) -> np.ndarray:
    x = np.asarray(x)
    if x.ndim == 2:
        x = x[None]
    expected = (params.arch.channels, params.arch.window)
    if x.ndim != 3 or x.shape[1:] != expected:
        raise ConfigError(f"expected input of shape (..., {expected[0]}, {expected[1]}), got {x.shape}")
    return x.astype(params.dtype, copy=False)


def _forward(params: AeParameters, h: np.ndarray, layers, cache: list | None = None):
    """Run ``layers`` on ``h``; conv activations stay channels-last in between."""
    arch = params.arch
    for layer in layers:
        if layer == "conv1":
            h = h.transpose(0, 2, 1)
        if layer == "fc1":
            # flatten channel-major, i.e. as (c3, L) per sample
            h = h.transpose(0, 2, 1).reshape(len(h), -1)
        if layer == "deconv1":
            h = h.reshape(len(h), arch.conv_channels[2], arch.bottleneck_length).transpose(0, 2, 1)
        inp = h
        h, aux = _apply(layer, h, params)
        if arch.relu_after(layer):
            h = np.maximum(h, 0.0)
        if cache is not None:
            cache.append((layer, inp, aux, h))
    if layers[-1] == "deconv3":
        h = h.transpose(0, 2, 1)
    return h


def encode_batch(params: AeParameters, x) -> np.ndarray:
    """Codes for a stack of features, shape (B, e)."""
    return _forward(params, _as_batch(params, x), ENCODER)


def encode(params: AeParameters, x) -> np.ndarray:
    """Code of a single (C, w) feature."""
    x = np.asarray(x)
    if x.ndim != 2:
        raise ConfigError(f"expected a single (C, w) feature, got shape {x.shape}")
    return encode_batch(params, x)[0]


def decode_batch(params: AeParameters, z) -> np.ndarray:
    z = np.asarray(z, dtype=params.dtype)
    if z.ndim == 1:
        z = z[None]
    if z.shape[-1] != params.arch.code_size:
        raise ConfigError(f"expected codes of length {params.arch.code_size}, got {z.shape[-1]}")
    return _forward(params, z, DECODER)


def decode(params: AeParameters, z) -> np.ndarray:
    return decode_batch(params, z)[0]


def reconstruct(params: AeParameters, x) -> np.ndarray:
    return _forward(params, _as_batch(params, x), LAYERS)


def loss(x, x_hat) -> float:
    """Mean squared error over all entries."""
    x = np.asarray(x, dtype=np.float64)
    x_hat = np.asarray(x_hat, dtype=np.float64)
    if x.shape != x_hat.shape:
        raise ConfigError(f"shape mismatch: {x.shape} vs {x_hat.shape}")
    return float(np.mean((x_hat - x) ** 2))


def loss_and_gradients(params: AeParameters, x) -> tuple[float, dict[str, np.ndarray]]:
    """Minibatch MSE and its exact gradient for every parameter."""
    x = _as_batch(params, x)
    cache: list = []
    x_hat = _forward(params, x, LAYERS, cache)
    diff = x_hat - x
    value = float(np.mean(diff.astype(np.float64) ** 2))
    if not np.isfinite(value):
        bad = next((layer for layer, _, _, out in cache if not np.isfinite(out).all()), "loss")
        raise NumericError(f"non-finite loss; first non-finite activation in layer {bad}")

    grads = {}
    dy = (2.0 / diff.size) * diff.transpose(0, 2, 1)
    arch = params.arch
    for layer, inp, aux, out in reversed(cache):
        if arch.relu_after(layer):
            dy = dy * (out > 0)
        dx, dw, db = _apply_backward(layer, dy, inp, aux, params)
        grads[f"{layer}.weight"] = dw
        grads[f"{layer}.bias"] = db
        if layer == "fc1":
            dx = dx.reshape(len(dx), arch.conv_channels[2], arch.bottleneck_length).transpose(0, 2, 1)
        if layer == "deconv1":
            dx = dx.transpose(0, 2, 1).reshape(len(dx), -1)
        dy = dx
    return value, grads


def gradients(params: AeParameters, x) -> dict[str, np.ndarray]:
    return loss_and_gradients(params, x)[1]


# -- optimizer ---------------------------------------------------------------


@dataclass
class AdamState:
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def update(self, params: AeParameters, grads: dict[str, np.ndarray]) -> None:
        """One in-place Adam step with bias correction."""
        self.step += 1
        c1 = 1.0 - self.beta1**self.step
        c2 = 1.0 - self.beta2**self.step
        for name, g in grads.items():
            if name not in self.m:
                self.m[name] = np.zeros_like(g)
                self.v[name] = np.zeros_like(g)
            m, v = self.m[name], self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            params.weights[name] -= self.learning_rate * (m / c1) / (np.sqrt(v / c2) + self.eps)


@dataclass
class TrainConfig:
    batch_size: int = 1024
    learning_rate: float = 1e-4
    epochs: int = 2
    seed: int = 0
    log_every: int = 10
    max_steps: int | None = None
    dtype: type = np.float64


def _stack_features(features) -> np.ndarray:
    if isinstance(features, np.ndarray):
        return features
    parts = [getattr(b, "features", b) for b in features]
    parts = [p for p in parts if len(p)]
    if not parts:
        raise ConfigError("no training features")
    return np.concatenate(parts)


def train(
    features,
    arch: AeArchitecture,
    hyper: TrainConfig | None = None,
    params: AeParameters | None = None,
    progress=None,
) -> tuple[AeParameters, list[tuple[int, float]]]:
    """Fit the autoencoder with Adam over shuffled minibatches.

    ``features`` is an (N, C, w) array or an iterable of batches/arrays.
    Returns the parameters and the loss curve as ``(step, mean loss)`` pairs,
    one per ``log_every`` steps (plus a final partial interval).
    """
    hyper = hyper or TrainConfig()
    data = _stack_features(features)
    if len(data) == 0:
        raise ConfigError("no training features")
    params = params.copy() if params is not None else init(arch, hyper.seed, hyper.dtype)
    adam = AdamState(hyper.learning_rate)
    rng = np.random.default_rng(hyper.seed)
    curve: list[tuple[int, float]] = []
    pending: list[float] = []
    step = 0
    for epoch in range(hyper.epochs):
        order = rng.permutation(len(data))
        for lo in range(0, len(data), hyper.batch_size):
            batch = data[order[lo : lo + hyper.batch_size]]
            try:
                value, grads = loss_and_gradients(params, batch)
            except NumericError as exc:
                raise NumericError(f"step {step} (epoch {epoch}): {exc}") from exc
            adam.update(params, grads)
            step += 1
            bad = next((n for n in params.names() if not np.isfinite(params[n]).all()), None)
            if bad is not None:
                raise NumericError(f"step {step}: non-finite parameters in {bad}")
            pending.append(value)
            if step % hyper.log_every == 0:
                curve.append((step, float(np.mean(pending))))
                pending = []
                if progress is not None:
                    progress(step, curve[-1][1])
            if hyper.max_steps is not None and step >= hyper.max_steps:
                break
        if hyper.max_steps is not None and step >= hyper.max_steps:
            break
    if pending:
        curve.append((step, float(np.mean(pending))))
    log.info("trained %d steps, final loss %.6f", step, curve[-1][1] if curve else float("nan"))
    return params, curve


# -- persistence -------------------------------------------------------------


def save_model(path: str | os.PathLike, params: AeParameters) -> None:
    """``b"MAE1"``, uint32 LE C, w, c1, c2, c3, fc_hidden, e, flags, uint64 seed,
    then every weight and bias as float32 LE in layer order."""
    a = params.arch
    flags = 1 if a.literal_relu else 0
    parts = [MODEL_MAGIC, _HEADER.pack(a.channels, a.window, *a.conv_channels, a.fc_hidden, a.code_size, flags, params.seed)]
    parts += [params[name].astype("<f4").tobytes() for name in params.names()]
    Path(path).write_bytes(b"".join(parts))


def load_model(path: str | os.PathLike, dtype=np.float64) -> AeParameters:
    blob = Path(path).read_bytes()
    if blob[:4] != MODEL_MAGIC:
        raise FormatError(f"{path}: not an autoencoder model file")
    C, w, c1, c2, c3, h, e, flags, seed = _HEADER.unpack_from(blob, 4)
    arch = AeArchitecture(C, w, (c1, c2, c3), h, e, bool(flags & 1))
    offset = 4 + _HEADER.size
    weights = {}
    for layer, (wshape, bshape) in arch.shapes().items():
        for kind, shape in (("weight", wshape), ("bias", bshape)):
            n = int(np.prod(shape))
            if offset + 4 * n > len(blob):
                raise FormatError(f"{path}: truncated at {layer}.{kind}")
            weights[f"{layer}.{kind}"] = np.frombuffer(blob, "<f4", n, offset).astype(dtype).reshape(shape)
            offset += 4 * n
    if offset != len(blob):
        raise FormatError(f"{path}: {len(blob) - offset} unexpected trailing bytes")
    return AeParameters(arch, weights, seed)


def write_loss_curve(path, curve: Iterable[tuple[int, float]]) -> None:
    with open(path, "w") as fh:
        for step, value in curve:
            fh.write(f"{step} {value:.8g}\n")
