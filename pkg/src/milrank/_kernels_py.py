"""Pure-numpy implementation of the batched forward/backward kernels.

This is the fallback backend used when the compiled extension is not built.
Both backends share the same call signatures and semantics; see
``milrank.backend`` for selection.

Conventions: instances are rows of X (N, d); weight matrices are (out, in);
``drop1``/``drop2`` are per-activation multipliers (0 for dropped units,
1/(1-rate) for kept ones) or None in eval mode. All arrays are float64.
"""

from __future__ import annotations

import numpy as np

ACT_RELU = 0
ACT_TANH = 1


def sigmoid(z: np.ndarray) -> np.ndarray:
    """Numerically stable logistic function."""
    z = np.asarray(z, dtype=np.float64)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _act(z, code):
    if code == ACT_RELU:
        return np.maximum(z, 0.0)
    if code == ACT_TANH:
        return np.tanh(z)
    raise ValueError(f"unknown activation code {code}")


def _act_grad(z, code):
    # rectifier subgradient at exactly 0 is 0
    if code == ACT_RELU:
        return (z > 0.0).astype(np.float64)
    if code == ACT_TANH:
        t = np.tanh(z)
        return 1.0 - t * t
    raise ValueError(f"unknown activation code {code}")


def forward_batch(X, W1, b1, W2, b2, W3, b3, act1, act2, drop1=None, drop2=None):
    """Scores a batch of instances through the 3-layer net.

    Returns (scores, Z1, A1, Z2, A2) where Z* are pre-activations and A* the
    post-activation (and post-dropout) values needed by backward_batch.
    """
    Z1 = X @ W1.T + b1
    A1 = _act(Z1, act1)
    if drop1 is not None:
        A1 = A1 * drop1
    Z2 = A1 @ W2.T + b2
    A2 = _act(Z2, act2)
    if drop2 is not None:
        A2 = A2 * drop2
    z3 = A2 @ W3[0] + b3[0]
    scores = sigmoid(z3)
    return scores, Z1, A1, Z2, A2


def backward_batch(X, W1, W2, W3, act1, act2, Z1, A1, Z2, A2, scores, d_scores,
                   drop1=None, drop2=None):
    """Accumulates parameter gradients for a batch scored by forward_batch.

    ``d_scores`` holds d(objective)/d(score_i); gradients with respect to the
    inputs are not computed (never needed in training).
    """
    dz3 = d_scores * scores * (1.0 - scores)
    dW3 = (dz3 @ A2)[None, :]
    db3 = np.array([dz3.sum()])

    dA2 = np.outer(dz3, W3[0])
    if drop2 is not None:
        dA2 *= drop2
    dZ2 = dA2 * _act_grad(Z2, act2)
    dW2 = dZ2.T @ A1
    db2 = dZ2.sum(axis=0)

    dA1 = dZ2 @ W2
    if drop1 is not None:
        dA1 *= drop1
    dZ1 = dA1 * _act_grad(Z1, act1)
    dW1 = dZ1.T @ X
    db1 = dZ1.sum(axis=0)

    return dW1, db1, dW2, db2, dW3, db3
