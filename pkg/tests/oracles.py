"""Independent reference computations used by the tests."""

import numpy as np


def central_difference(f, params, eps=1e-5):
    """Gradient of scalar ``f(params)`` by central differences, one entry at a time."""
    grads = []
    for p in params:
        g = np.zeros_like(p)
        it = np.nditer(p, flags=["multi_index"])
        for _ in it:
            i = it.multi_index
            old = p[i]
            p[i] = old + eps
            up = f(params)
            p[i] = old - eps
            down = f(params)
            p[i] = old
            g[i] = (up - down) / (2 * eps)
        grads.append(g)
    return grads


def max_rel_err(a, b, floor=1e-5):
    """Largest elementwise |a - b| / max(|a|, |b|, floor).

    The floor keeps near-zero gradients from being judged by roundoff in the
    finite difference (about 1e-16 / eps).
    """
    worst = 0.0
    for x, y in zip(a, b):
        den = np.maximum(np.maximum(np.abs(x), np.abs(y)), floor)
        worst = max(worst, float(np.max(np.abs(x - y) / den)))
    return worst


def reference_relu_mlp(params, x):
    h = x.reshape(len(x), -1)
    n_layers = len(params) // 2
    for k in range(n_layers):
        W, b = params[2 * k], params[2 * k + 1]
        h = h @ W.T + b
        if k < n_layers - 1:
            h = np.maximum(h, 0.0)
    return h


def softmax_nll(logits, labels):
    m = logits.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(logits - m).sum(axis=1))
    return float(np.mean(lse - logits[np.arange(len(labels)), labels]))
