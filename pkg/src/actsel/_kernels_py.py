"""Pure-numpy versions of the compiled kernels in ``_kernels.pyx``.

``sample_sequential`` reproduces the compiled arithmetic exactly (left-to-right
running sums), so both backends return identical indices for identical inputs.
"""

import numpy as np


def sample_sequential(weights, k, uniforms):
    weights = np.asarray(weights, dtype=np.float64)
    n = weights.shape[0]
    if k > n:
        raise ValueError(f"cannot draw {k} items from {n}")
    if len(uniforms) < k:
        raise ValueError("need one uniform per draw")
    live = weights.copy()
    alive = np.ones(n, dtype=bool)
    out = np.empty(k, dtype=np.int64)
    for draw in range(k):
        acc = np.cumsum(live)
        total = acc[-1]
        target = uniforms[draw] * total
        pick = int(np.searchsorted(acc, target, side="right"))
        if pick >= n or not alive[pick]:
            # rounding pushed the target past the last live weight
            pick = int(np.flatnonzero(alive)[-1])
        out[draw] = pick
        alive[pick] = False
        live[pick] = 0.0
    return out


def softmax_xent_rows(logits, labels, smoothing):
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    n, k = logits.shape
    if n and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"label out of range for {k} classes")
    m = logits.max(axis=1, keepdims=True)
    lse = m + np.log(np.exp(logits - m).sum(axis=1, keepdims=True))
    logp = logits - lse
    target = np.full((n, k), smoothing / k)
    target[np.arange(n), labels] = 1.0 - smoothing + smoothing / k
    losses = -(target * logp).sum(axis=1)
    grad = np.exp(logp) - target
    return losses, grad
