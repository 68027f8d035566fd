"""Dense layer primitives with explicit forward/backward passes.

Every forward function returns ``(out, cache)``; the matching backward takes
the upstream gradient and that cache. Arrays are float64 numpy arrays laid
out channels-first: ``(batch, channels, time)``.

The ``Layer`` classes at the bottom wrap these functions with parameter and
gradient storage so models can be assembled as plain lists of layers.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

DTYPE = np.float64
BN_EPS = 1e-5
BN_MOMENTUM = 0.99


class NonFiniteError(FloatingPointError):
    """Raised when an op produces NaN or Inf."""


class ShapeError(ValueError):
    pass


def check_finite(x: np.ndarray, where: str) -> np.ndarray:
    if not np.all(np.isfinite(x)):
        raise NonFiniteError(f"non-finite values in {where}")
    return x


def as_tensor(x) -> np.ndarray:
    return np.ascontiguousarray(x, dtype=DTYPE)


# ----------------------------------------------------------------------------
# convolution / dense
# ----------------------------------------------------------------------------

def conv1d_forward(x, kernel, bias):
    """Stride-1 1-D convolution with 'same' zero padding.

    out[b, o, t] = bias[o] + sum_{i, tau} kernel[o, i, tau] * xpad[b, i, t + tau - k//2]
    """
    if x.ndim != 3 or kernel.ndim != 3:
        raise ShapeError(f"conv1d expects 3-d input and kernel, got {x.shape}, {kernel.shape}")
    c_out, c_in, k = kernel.shape
    if x.shape[1] != c_in:
        raise ShapeError(f"kernel expects {c_in} input channels, input has {x.shape[1]}")
    if k % 2 != 1:
        raise ShapeError(f"kernel size must be odd for same padding, got {k}")
    if bias.shape != (c_out,):
        raise ShapeError(f"bias shape {bias.shape} != ({c_out},)")
    pad = k // 2
    length = x.shape[2]
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad))) if pad else x
    out = np.empty((x.shape[0], c_out, length), dtype=DTYPE)
    out[:] = bias[None, :, None]
    for tau in range(k):
        out += np.einsum("oi,bit->bot", kernel[:, :, tau], xp[:, :, tau:tau + length], optimize=True)
    return out, (xp, kernel, pad)


def conv1d_backward(dout, cache):
    if cache is None:
        raise RuntimeError("conv1d_backward called without a forward cache")
    xp, kernel, pad = cache
    k = kernel.shape[2]
    length = dout.shape[2]
    dbias = dout.sum(axis=(0, 2))
    dkernel = np.empty_like(kernel)
    dxp = np.zeros_like(xp)
    for tau in range(k):
        window = xp[:, :, tau:tau + length]
        dkernel[:, :, tau] = np.einsum("bot,bit->oi", dout, window, optimize=True)
        dxp[:, :, tau:tau + length] += np.einsum("oi,bot->bit", kernel[:, :, tau], dout, optimize=True)
    dx = dxp[:, :, pad:pad + length] if pad else dxp
    return dx, dkernel, dbias


def dense_forward(x, weight, bias):
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"dense: input {x.shape} incompatible with weight {weight.shape}")
    if bias.shape != (weight.shape[0],):
        raise ShapeError(f"dense: bias {bias.shape} != ({weight.shape[0]},)")
    return x @ weight.T + bias, (x, weight)


def dense_backward(dout, cache):
    x, weight = cache
    return dout @ weight, dout.T @ x, dout.sum(axis=0)


# ----------------------------------------------------------------------------
# activations
# ----------------------------------------------------------------------------

def leaky_relu_forward(x, leak=0.1):
    if not 0.0 <= leak < 1.0:
        raise ValueError(f"leak must lie in [0, 1), got {leak}")
    pos = x >= 0
    return np.where(pos, x, leak * x), (pos, leak)


def leaky_relu_backward(dout, cache):
    # slope at exactly 0 is taken as 1
    pos, leak = cache
    return np.where(pos, dout, leak * dout)


def row_softmax_forward(x):
    """Softmax over the last (time) axis, independently for every row."""
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)
    return out, out


def row_softmax_backward(dout, cache):
    s = cache
    return s * (dout - (dout * s).sum(axis=-1, keepdims=True))


# ----------------------------------------------------------------------------
# normalization / regularization / pooling
# ----------------------------------------------------------------------------

def batchnorm_forward(x, gamma, beta, running_mean, running_var, train,
                      eps=BN_EPS, momentum=BN_MOMENTUM):
    """Per-channel batch normalization over the (batch, time) axes.

    ``running_mean`` and ``running_var`` are updated in place in train mode.
    """
    if train:
        n = x.shape[0] * x.shape[2]
        if n < 2:
            raise ValueError("batch normalization in train mode needs batch*time > 1")
        mu = x.mean(axis=(0, 2))
        var = x.var(axis=(0, 2))
        running_mean *= momentum
        running_mean += (1.0 - momentum) * mu
        running_var *= momentum
        running_var += (1.0 - momentum) * var
    else:
        mu, var = running_mean, running_var
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x - mu[None, :, None]) * inv_std[None, :, None]
    out = gamma[None, :, None] * xhat + beta[None, :, None]
    return out, (xhat, inv_std, gamma, train)


def batchnorm_backward(dout, cache):
    xhat, inv_std, gamma, train = cache
    dgamma = (dout * xhat).sum(axis=(0, 2))
    dbeta = dout.sum(axis=(0, 2))
    dxhat = dout * gamma[None, :, None]
    if not train:
        return dxhat * inv_std[None, :, None], dgamma, dbeta
    n = dout.shape[0] * dout.shape[2]
    dx = (inv_std[None, :, None] / n) * (
        n * dxhat
        - dxhat.sum(axis=(0, 2))[None, :, None]
        - xhat * (dxhat * xhat).sum(axis=(0, 2))[None, :, None]
    )
    return dx, dgamma, dbeta


def dropout_forward(x, rate, train, rng):
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must lie in [0, 1), got {rate}")
    if not train or rate == 0.0:
        return x, None
    mask = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return x * mask, mask


def dropout_backward(dout, cache):
    return dout if cache is None else dout * cache


def maxpool1d_forward(x, pool=2):
    b, c, length = x.shape
    if length < pool:
        raise ShapeError(f"cannot pool length {length} with pool size {pool}")
    n = length // pool
    windows = x[:, :, :n * pool].reshape(b, c, n, pool)
    # argmax returns the first maximal index on ties
    idx = windows.argmax(axis=-1)
    out = np.take_along_axis(windows, idx[..., None], axis=-1)[..., 0]
    return out, (idx, length, pool)


def maxpool1d_backward(dout, cache):
    idx, length, pool = cache
    b, c, n = dout.shape
    dwin = np.zeros((b, c, n, pool), dtype=DTYPE)
    np.put_along_axis(dwin, idx[..., None], dout[..., None], axis=-1)
    dx = np.zeros((b, c, length), dtype=DTYPE)
    dx[:, :, :n * pool] = dwin.reshape(b, c, n * pool)
    return dx


# ----------------------------------------------------------------------------
# loss
# ----------------------------------------------------------------------------

def mse_forward(pred, target):
    """Batch mean of squared Euclidean norms (sum over outputs)."""
    if pred.shape != target.shape:
        raise ShapeError(f"mse: pred {pred.shape} vs target {target.shape}")
    diff = pred - target
    return float((diff ** 2).sum() / pred.shape[0]), diff


def mse_backward(cache, scale=1.0):
    diff = cache
    return scale * 2.0 * diff / diff.shape[0]


# ----------------------------------------------------------------------------
# layer wrappers
# ----------------------------------------------------------------------------

@dataclass
class ActivationSpec:
    kind: str = "leaky-relu"  # leaky-relu | linear | row-softmax
    leak: float = 0.1

    def __post_init__(self):
        if self.kind not in ("leaky-relu", "linear", "row-softmax"):
            raise ValueError(f"unknown activation kind {self.kind!r}")
        if not 0.0 <= self.leak < 1.0:
            raise ValueError(f"leak must lie in [0, 1), got {self.leak}")


class Layer:
    """Base layer: named parameters, same-shaped gradients, cached forward state."""

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self.buffers: dict[str, np.ndarray] = {}
        self._cache = None

    def _add_param(self, name, value):
        self.params[name] = as_tensor(value)
        self.grads[name] = np.zeros_like(self.params[name])

    def zero_grad(self):
        for g in self.grads.values():
            g.fill(0.0)

    def forward(self, x, train=False, rng=None):
        raise NotImplementedError

    def backward(self, dout):
        raise NotImplementedError


class Conv1D(Layer):
    def __init__(self, c_in, c_out, k):
        super().__init__()
        self._add_param("kernel", np.zeros((c_out, c_in, k)))
        self._add_param("bias", np.zeros(c_out))

    def forward(self, x, train=False, rng=None):
        out, self._cache = conv1d_forward(x, self.params["kernel"], self.params["bias"])
        return out

    def backward(self, dout):
        dx, dk, db = conv1d_backward(dout, self._cache)
        self.grads["kernel"] += dk
        self.grads["bias"] += db
        return dx


class Dense(Layer):
    def __init__(self, n_in, n_out):
        super().__init__()
        self._add_param("weight", np.zeros((n_out, n_in)))
        self._add_param("bias", np.zeros(n_out))

    def forward(self, x, train=False, rng=None):
        out, self._cache = dense_forward(x, self.params["weight"], self.params["bias"])
        return out

    def backward(self, dout):
        dx, dw, db = dense_backward(dout, self._cache)
        self.grads["weight"] += dw
        self.grads["bias"] += db
        return dx


class BatchNorm(Layer):
    def __init__(self, channels):
        super().__init__()
        self._add_param("gamma", np.ones(channels))
        self._add_param("beta", np.zeros(channels))
        self.buffers["running_mean"] = np.zeros(channels)
        self.buffers["running_var"] = np.ones(channels)

    def forward(self, x, train=False, rng=None):
        out, self._cache = batchnorm_forward(
            x, self.params["gamma"], self.params["beta"],
            self.buffers["running_mean"], self.buffers["running_var"], train)
        return out

    def backward(self, dout):
        dx, dg, db = batchnorm_backward(dout, self._cache)
        self.grads["gamma"] += dg
        self.grads["beta"] += db
        return dx


class LeakyReLU(Layer):
    def __init__(self, leak=0.1):
        super().__init__()
        self.leak = leak

    def forward(self, x, train=False, rng=None):
        out, self._cache = leaky_relu_forward(x, self.leak)
        return out

    def backward(self, dout):
        return leaky_relu_backward(dout, self._cache)


class Dropout(Layer):
    def __init__(self, rate):
        super().__init__()
        self.rate = rate

    def forward(self, x, train=False, rng=None):
        out, self._cache = dropout_forward(x, self.rate, train, rng)
        return out

    def backward(self, dout):
        return dropout_backward(dout, self._cache)


class MaxPool1D(Layer):
    def __init__(self, pool=2):
        super().__init__()
        self.pool = pool

    def forward(self, x, train=False, rng=None):
        out, self._cache = maxpool1d_forward(x, self.pool)
        return out

    def backward(self, dout):
        return maxpool1d_backward(dout, self._cache)


class Flatten(Layer):
    def forward(self, x, train=False, rng=None):
        self._cache = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, dout):
        return dout.reshape(self._cache)


class Sequential:
    """Ordered stack of layers with namespaced parameter access."""

    def __init__(self, layers, name="seq"):
        self.layers = list(layers)
        self.name = name

    def forward(self, x, train=False, rng=None):
        for layer in self.layers:
            x = layer.forward(x, train=train, rng=rng)
        return x

    def backward(self, dout):
        for layer in reversed(self.layers):
            dout = layer.backward(dout)
        return dout

    def _named(self, attr):
        out = {}
        for i, layer in enumerate(self.layers):
            for key, arr in getattr(layer, attr).items():
                out[f"{self.name}.{i}.{key}"] = arr
        return out

    def named_params(self):
        return self._named("params")

    def named_grads(self):
        return self._named("grads")

    def named_buffers(self):
        return self._named("buffers")
