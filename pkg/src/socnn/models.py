"""SOCNN, the plain CNN baseline and the closed-form VAR baseline."""

from __future__ import annotations

import json
import os
import struct
import tempfile
from dataclasses import asdict, dataclass, fields

import numpy as np

from .ndcore import (
    BatchNorm,
    Conv1D,
    Dense,
    Dropout,
    Flatten,
    LeakyReLU,
    MaxPool1D,
    Sequential,
    ShapeError,
    check_finite,
    mse_backward,
    mse_forward,
    row_softmax_backward,
    row_softmax_forward,
)
from .train import glorot_init


@dataclass
class LossBundle:
    l2: float
    l_aux: float
    total: float


def kernel_sizes(pattern, depth):
    """Kernel size per layer: '3,1' alternates starting with 3, '3' is constant."""
    sizes = [int(s) for s in str(pattern).replace("(", "").replace(")", "").split(",") if s.strip()]
    if not sizes or any(k not in (1, 3) for k in sizes):
        raise ValueError(f"kernel pattern must use sizes 1 and 3, got {pattern!r}")
    return [sizes[i % len(sizes)] for i in range(depth)]


def _conv_block(c_in, c_out, k, batchnorm, leak, dropout):
    layers = [Conv1D(c_in, c_out, k)]
    if batchnorm:
        layers.append(BatchNorm(c_out))
    layers.append(LeakyReLU(leak))
    if dropout > 0:
        layers.append(Dropout(dropout))
    return layers


def _glorot_all(seq, rng):
    for layer in seq.layers:
        if isinstance(layer, Conv1D):
            layer.params["kernel"][...] = glorot_init(layer.params["kernel"].shape, rng)
        elif isinstance(layer, Dense):
            layer.params["weight"][...] = glorot_init(layer.params["weight"].shape, rng)


# ----------------------------------------------------------------------------
# SOCNN
# ----------------------------------------------------------------------------

@dataclass
class SOCNNConfig:
    d: int
    target_index: list  # input column feeding each output row (x^I)
    M: int = 60
    significance_depth: int = 10
    significance_filters: int = 8
    significance_kernels: str = "3,1"
    offset_depth: int = 1
    offset_filters: int = 8
    alpha: float = 0.01
    dropout_rate: float = 0.0
    use_batchnorm: bool = True
    leak: float = 0.1

    def __post_init__(self):
        self.target_index = [int(i) for i in self.target_index]
        if not self.target_index:
            raise ValueError("at least one target coordinate is required")
        if any(not 0 <= i < self.d for i in self.target_index):
            raise ValueError(f"target_index {self.target_index} outside 0..{self.d - 1}")
        if self.M < 1 or self.alpha < 0:
            raise ValueError("M >= 1 and alpha >= 0 are required")
        if self.significance_depth < 1 or self.offset_depth < 1:
            raise ValueError("network depths must be >= 1")

    @property
    def d_I(self):
        return len(self.target_index)


class SOCNNModel:
    """Significance-offset network.

    ``y_hat[b, i] = sum_t W[i, t] * (off(x_t) + x_t[I_i]) * softmax_t(S(x))[b, i, t]``
    with the time axis ordered oldest to newest (lag m sits at position M - m).
    """

    kind = "socnn"

    def __init__(self, config: SOCNNConfig, rng=None):
        self.config = c = config
        ks = kernel_sizes(c.significance_kernels, c.significance_depth)
        layers, ch = [], c.d
        for i in range(c.significance_depth - 1):
            layers += _conv_block(ch, c.significance_filters, ks[i], c.use_batchnorm, c.leak, c.dropout_rate)
            ch = c.significance_filters
        layers.append(Conv1D(ch, c.d_I, 1))
        self.significance = Sequential(layers, "sig")

        layers, ch = [], c.d
        for _ in range(c.offset_depth - 1):
            layers += _conv_block(ch, c.offset_filters, 1, c.use_batchnorm, c.leak, c.dropout_rate)
            ch = c.offset_filters
        layers.append(Conv1D(ch, c.d_I, 1))
        self.offset = Sequential(layers, "off")

        self.W = np.zeros((c.d_I, c.M))
        self.dW = np.zeros_like(self.W)
        self._collect()
        if rng is not None:
            self.initialize(rng)

    def _collect(self):
        self.params = {"W": self.W, **self.significance.named_params(), **self.offset.named_params()}
        self.grads = {"W": self.dW, **self.significance.named_grads(), **self.offset.named_grads()}
        self.buffers = {**self.significance.named_buffers(), **self.offset.named_buffers()}

    def initialize(self, rng):
        _glorot_all(self.significance, rng)
        _glorot_all(self.offset, rng)
        self.W[...] = glorot_init(self.W.shape, rng)

    def n_params(self):
        return int(sum(p.size for p in self.params.values()))

    def zero_grad(self):
        for g in self.grads.values():
            g.fill(0.0)

    def forward(self, window, train=False, rng=None):
        """Return ``(y_hat, significance, offsets)``; all three are [batch, d_I, ...]."""
        c = self.config
        if window.ndim != 3 or window.shape[1] != c.d or window.shape[2] != c.M:
            raise ShapeError(f"window shape {window.shape} != (batch, {c.d}, {c.M})")
        S = self.significance.forward(window, train, rng)
        sig, sm_cache = row_softmax_forward(S)
        offsets = self.offset.forward(window, train, rng) + window[:, c.target_index, :]
        y_hat = (self.W[None] * offsets * sig).sum(axis=-1)
        check_finite(y_hat, "SOCNN output")
        self._cache = (sig, offsets, sm_cache)
        return y_hat, sig, offsets

    def backward(self, dy, doffsets=None):
        """Accumulate parameter gradients; returns the gradient w.r.t. the window."""
        sig, offsets, sm_cache = self._cache
        self.dW += np.einsum("bi,bit->it", dy, offsets * sig)
        d_off = dy[:, :, None] * self.W[None] * sig
        if doffsets is not None:
            d_off = d_off + doffsets
        d_sig = dy[:, :, None] * self.W[None] * offsets
        dx = self.significance.backward(row_softmax_backward(d_sig, sm_cache))
        dx = dx + self.offset.backward(d_off)
        np.add.at(dx, (slice(None), self.config.target_index), d_off)
        return dx

    def train_batch(self, X, Y, rng):
        y_hat, _, offsets = self.forward(X, train=True, rng=rng)
        bundle = socnn_loss(y_hat, offsets, Y, self.config.alpha)
        self.backward(*socnn_loss_backward(y_hat, offsets, Y, self.config.alpha))
        return bundle

    def predict(self, X):
        return self.forward(X, train=False)[0]

    def evaluate(self, X, Y, batch_size=1024):
        l2 = aux = 0.0
        for lo in range(0, len(X), batch_size):
            y_hat, _, off = self.forward(X[lo:lo + batch_size])
            b = socnn_loss(y_hat, off, Y[lo:lo + batch_size], self.config.alpha)
            l2 += b.l2 * len(y_hat)
            aux += b.l_aux * len(y_hat)
        l2 /= len(X)
        aux /= len(X)
        return LossBundle(l2, aux, l2 + self.config.alpha * aux)


def socnn_forward(model, window):
    return model.forward(window)


def socnn_loss(y_hat, offsets, target, alpha):
    """L2 of the prediction plus ``alpha`` times the mean per-lag offset error."""
    l2, _ = mse_forward(y_hat, target)
    if offsets.shape[:2] != target.shape:
        raise ShapeError(f"offsets {offsets.shape} do not match target {target.shape}")
    diff = offsets - target[:, :, None]
    l_aux = float((diff ** 2).sum() / (offsets.shape[0] * offsets.shape[2]))
    return LossBundle(l2, l_aux, l2 + alpha * l_aux)


def socnn_loss_backward(y_hat, offsets, target, alpha):
    dy = mse_backward(y_hat - target)
    if alpha == 0:
        return dy, None
    diff = offsets - target[:, :, None]
    return dy, alpha * 2.0 * diff / (offsets.shape[0] * offsets.shape[2])


# ----------------------------------------------------------------------------
# CNN baseline
# ----------------------------------------------------------------------------

@dataclass
class CNNConfig:
    d: int
    d_I: int
    M: int = 60
    n_conv: int = 7
    filters: int = 16
    kernels: str = "3,1"
    pool_every: int = 2
    dropout_rate: float = 0.0
    use_batchnorm: bool = True
    leak: float = 0.1

    def __post_init__(self):
        if self.M < 8:
            raise ValueError("CNN needs M >= 8 to pool three times")


class CNNModel:
    """Conv stack with a 2-pool after every second conv, then one dense layer."""

    kind = "cnn"

    def __init__(self, config: CNNConfig, rng=None):
        self.config = c = config
        ks = kernel_sizes(c.kernels, c.n_conv)
        layers, ch, length, since_pool = [], c.d, c.M, 0
        for i in range(c.n_conv):
            layers += _conv_block(ch, c.filters, ks[i], c.use_batchnorm, c.leak, c.dropout_rate)
            ch = c.filters
            since_pool += 1
            if since_pool == c.pool_every and length // 2 >= 1:
                layers.append(MaxPool1D(2))
                length //= 2
                since_pool = 0
        layers += [Flatten(), Dense(ch * length, c.d_I)]
        self.net = Sequential(layers, "cnn")
        self.params = self.net.named_params()
        self.grads = self.net.named_grads()
        self.buffers = self.net.named_buffers()
        if rng is not None:
            _glorot_all(self.net, rng)

    def n_params(self):
        return int(sum(p.size for p in self.params.values()))

    def zero_grad(self):
        for g in self.grads.values():
            g.fill(0.0)

    def forward(self, window, train=False, rng=None):
        c = self.config
        if window.ndim != 3 or window.shape[1:] != (c.d, c.M):
            raise ShapeError(f"window shape {window.shape} != (batch, {c.d}, {c.M})")
        return check_finite(self.net.forward(window, train, rng), "CNN output")

    def backward(self, dy):
        return self.net.backward(dy)

    def train_batch(self, X, Y, rng):
        y_hat = self.forward(X, train=True, rng=rng)
        l2, cache = mse_forward(y_hat, Y)
        self.backward(mse_backward(cache))
        return LossBundle(l2, 0.0, l2)

    def predict(self, X):
        return self.forward(X)

    def evaluate(self, X, Y, batch_size=1024):
        l2 = sum(mse_forward(self.predict(X[lo:lo + batch_size]), Y[lo:lo + batch_size])[0]
                 * len(X[lo:lo + batch_size]) for lo in range(0, len(X), batch_size))
        l2 /= len(X)
        return LossBundle(l2, 0.0, l2)


def cnn_forward(model, window):
    return model.predict(window)


# ----------------------------------------------------------------------------
# VAR baseline
# ----------------------------------------------------------------------------

@dataclass
class VARConfig:
    d: int
    d_I: int
    M: int = 60
    ridge: float = 1e-6


class VARModel:
    """y = A vec(window) + c, fit by ridge-regularized normal equations."""

    kind = "var"

    def __init__(self, config: VARConfig):
        self.config = config
        self.coef = np.zeros((config.d_I, config.d * config.M))
        self.intercept = np.zeros(config.d_I)
        self.params = {"coef": self.coef, "intercept": self.intercept}
        self.buffers = {}

    def predict(self, X):
        return X.reshape(len(X), -1) @ self.coef.T + self.intercept

    def evaluate(self, X, Y):
        l2, _ = mse_forward(self.predict(X), Y)
        return LossBundle(l2, 0.0, l2)


def var_fit(X, Y, ridge=1e-6):
    """Closed-form fit; the intercept is left unpenalized (data are centered)."""
    n, d, m = X.shape
    model = VARModel(VARConfig(d=d, d_I=Y.shape[1], M=m, ridge=ridge))
    F = X.reshape(n, -1)
    f_mean = F.mean(axis=0)
    y_mean = Y.mean(axis=0)
    Fc = F - f_mean
    gram = Fc.T @ Fc
    if ridge > 0:
        gram[np.diag_indices_from(gram)] += ridge
    try:
        A = np.linalg.solve(gram, Fc.T @ (Y - y_mean)).T
    except np.linalg.LinAlgError as exc:
        raise np.linalg.LinAlgError("singular VAR system; pass ridge > 0") from exc
    model.coef[...] = A
    model.intercept[...] = y_mean - A @ f_mean
    return model


def var_predict(model, window):
    return model.predict(window)


# ----------------------------------------------------------------------------
# checkpoints
# ----------------------------------------------------------------------------

MAGIC = b"SOCNNCKP"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


_CONFIGS = {"socnn": SOCNNConfig, "cnn": CNNConfig, "var": VARConfig}


def build_model(kind, config, rng=None):
    if kind == "socnn":
        return SOCNNModel(config, rng)
    if kind == "cnn":
        return CNNModel(config, rng)
    if kind == "var":
        return VARModel(config)
    raise ValueError(f"unknown model kind {kind!r}")


def _state(model):
    out = {f"param:{k}": v for k, v in model.params.items()}
    out.update({f"buffer:{k}": v for k, v in model.buffers.items()})
    return out


def checkpoint_save(model, path, extra=None):
    """Write ``model`` as a JSON header followed by little-endian float64 data.

    ``extra`` is stored verbatim in the header (e.g. the windowing settings).
    """
    tensors, blobs, offset = [], [], 0
    for name, arr in _state(model).items():
        raw = np.ascontiguousarray(arr, dtype="<f8").tobytes()
        tensors.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = {
        "format": "socnn-checkpoint",
        "version": CHECKPOINT_VERSION,
        "endianness": "little",
        "dtype": "float64",
        "model": model.kind,
        "config": asdict(model.config),
        "tensors": tensors,
        "extra": extra or {},
    }
    hbytes = json.dumps(header, sort_keys=True).encode()
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".ckpt-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(MAGIC)
            fh.write(struct.pack("<Q", len(hbytes)))
            fh.write(hbytes)
            for raw in blobs:
                fh.write(raw)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def read_checkpoint_header(path):
    with open(path, "rb") as fh:
        if fh.read(len(MAGIC)) != MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint file")
        (hlen,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(hlen))
        return header, fh.tell()


def checkpoint_load(path, config=None):
    """Rebuild a model from ``path``; ``config`` (if given) must match tensor shapes."""
    header, data_start = read_checkpoint_header(path)
    if header.get("version") != CHECKPOINT_VERSION or header.get("endianness") != "little":
        raise CheckpointError(f"unsupported checkpoint version/layout: {header.get('version')}")
    kind = header["model"]
    if config is None:
        cls = _CONFIGS[kind]
        names = {f.name for f in fields(cls)}
        config = cls(**{k: v for k, v in header["config"].items() if k in names})
    model = build_model(kind, config)
    state = _state(model)
    stored = {t["name"]: t for t in header["tensors"]}
    problems = []
    for name, arr in state.items():
        t = stored.get(name)
        if t is None:
            problems.append(f"{name}: missing from checkpoint")
        elif tuple(t["shape"]) != arr.shape:
            problems.append(f"{name}: checkpoint {tuple(t['shape'])} vs model {arr.shape}")
    problems += [f"{n}: unexpected tensor" for n in stored if n not in state]
    if problems:
        raise ShapeError("checkpoint/config shape mismatch: " + "; ".join(problems))
    with open(path, "rb") as fh:
        fh.seek(data_start)
        blob = fh.read()
    for name, arr in state.items():
        t = stored[name]
        arr[...] = np.frombuffer(blob, dtype="<f8", count=arr.size, offset=t["offset"]).reshape(arr.shape)
    return model
