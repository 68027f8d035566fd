"""Central finite-difference oracle, independent of the analytic backward code,
plus the shared gradient cases used by the unit and acceptance tests."""

import numpy as np

from socnn import ndcore as nd
from socnn.models import SOCNNConfig, SOCNNModel, socnn_loss, socnn_loss_backward

STEP = 1e-5


def numeric_grad(f, x, step=STEP):
    """d f / d x for scalar ``f()``; ``x`` is perturbed in place and restored."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + step
        fp = f()
        x[i] = old - step
        fm = f()
        x[i] = old
        g[i] = (fp - fm) / (2 * step)
    return g


def rel_error(a, b, floor=1e-6):
    """Norm-wise relative error, robust to individual near-zero entries.

    ``floor`` bounds the denominator so that an identically-zero gradient
    (e.g. a bias feeding a shift-invariant softmax) is not judged on noise.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    denom = max(np.linalg.norm(a) + np.linalg.norm(b), floor)
    return float(np.linalg.norm(a - b) / denom)


def scalarize(out, weights):
    return float((out * weights).sum())


def op_gradient_cases(seed):
    """Every differentiable op on one random small shape, as (f, [(analytic, var)])."""
    r = np.random.default_rng(seed)
    B, C, T = r.integers(1, 4), r.integers(1, 4), r.integers(2, 7)
    x = r.standard_normal((B, C, T))
    cases = []

    k = r.standard_normal((2, C, 3)); b = r.standard_normal(2)
    R = r.standard_normal((B, 2, T))
    f = lambda: scalarize(nd.conv1d_forward(x, k, b)[0], R)
    dx, dk, db = nd.conv1d_backward(R, nd.conv1d_forward(x, k, b)[1])
    cases.append((f, [(dx, x), (dk, k), (db, b)]))

    x2 = x.reshape(B, -1); w = r.standard_normal((3, x2.shape[1])); b2 = r.standard_normal(3)
    R2 = r.standard_normal((B, 3))
    f = lambda: scalarize(nd.dense_forward(x2, w, b2)[0], R2)
    g = nd.dense_backward(R2, nd.dense_forward(x2, w, b2)[1])
    cases.append((f, list(zip(g, (x2, w, b2)))))

    xl = x + np.sign(x) * 0.05  # keep away from the kink
    R3 = r.standard_normal(x.shape)
    f = lambda: scalarize(nd.leaky_relu_forward(xl, 0.1)[0], R3)
    cases.append((f, [(nd.leaky_relu_backward(R3, nd.leaky_relu_forward(xl, 0.1)[1]), xl)]))

    if B * T > 1:
        gam, bet = r.uniform(0.5, 1.5, C), r.standard_normal(C)
        f = lambda: scalarize(nd.batchnorm_forward(x, gam, bet, np.zeros(C), np.ones(C), True)[0], R3)
        g = nd.batchnorm_backward(R3, nd.batchnorm_forward(x, gam, bet, np.zeros(C), np.ones(C), True)[1])
        cases.append((f, list(zip(g, (x, gam, bet)))))

    f = lambda: scalarize(nd.row_softmax_forward(x)[0], R3)
    cases.append((f, [(nd.row_softmax_backward(R3, nd.row_softmax_forward(x)[1]), x)]))

    Rp = r.standard_normal((B, C, T // 2))
    f = lambda: scalarize(nd.maxpool1d_forward(x)[0], Rp)
    cases.append((f, [(nd.maxpool1d_backward(Rp, nd.maxpool1d_forward(x)[1]), x)]))

    mask_rng = np.random.default_rng(seed)
    out, mask = nd.dropout_forward(x, 0.4, True, mask_rng)
    f = lambda: scalarize(x * mask, R3)
    cases.append((f, [(nd.dropout_backward(R3, mask), x)]))

    t = r.standard_normal(x2.shape)
    f = lambda: nd.mse_forward(x2, t)[0]
    cases.append((f, [(nd.mse_backward(nd.mse_forward(x2, t)[1]), x2)]))
    return cases


def small_socnn(seed=0, **kw):
    cfg = dict(d=4, target_index=[2], M=8, significance_depth=2, significance_filters=3,
               offset_depth=1, alpha=0.1)
    cfg.update(kw)
    return SOCNNModel(SOCNNConfig(**cfg), np.random.default_rng(seed))


def linear_ar(window, W, target_index):
    """Directly coded AR(M): y_i = sum_t W[i, t] * x[target_i, t]."""
    B, _, M = window.shape
    out = np.zeros((B, len(target_index)))
    for b in range(B):
        for i, c in enumerate(target_index):
            for t in range(M):
                out[b, i] += W[i, t] * window[b, c, t]
    return out


def socnn_objective(model, X, Y):
    """Eval-mode total loss: deterministic scalar for finite differences."""
    y_hat, _, off = model.forward(X)
    return socnn_loss(y_hat, off, Y, model.config.alpha).total


def check_model_gradients(model, X, Y, tol=1e-4):
    model.zero_grad()
    y_hat, _, off = model.forward(X)
    model.backward(*socnn_loss_backward(y_hat, off, Y, model.config.alpha))
    worst = 0.0
    for name, p in model.params.items():
        num = numeric_grad(lambda: socnn_objective(model, X, Y), p)
        worst = max(worst, rel_error(model.grads[name], num))
    assert worst < tol, worst
    return worst
