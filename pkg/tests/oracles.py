"""Independent reference implementations used as test oracles.

Deliberately written with plain numpy and textbook formulas, no imports
from the package under test.
"""

import numpy as np


def kalman_filter(F, Q, H, R, x0, P0, ys):
    """Closed-form linear-Gaussian filter.

    ys is an iterable of observation column vectors; returns the lists of
    posterior means and covariances after each measurement update.
    """
    F, Q, H, R = (np.asarray(a, dtype=np.float64) for a in (F, Q, H, R))
    x = np.asarray(x0, dtype=np.float64).reshape(-1, 1)
    P = np.asarray(P0, dtype=np.float64)
    means, covs = [], []
    for y in ys:
        y = np.asarray(y, dtype=np.float64).reshape(-1, 1)
        x = F @ x
        P = F @ P @ F.T + Q
        S = H @ P @ H.T + R
        K = P @ H.T @ np.linalg.inv(S)
        x = x + K @ (y - H @ x)
        P = (np.eye(P.shape[0]) - K @ H) @ P
        means.append(x.copy())
        covs.append(P.copy())
    return means, covs


def masked_attention_reference(X, Y_list, Q, enabled, mode="exclusive"):
    """Scalar-by-scalar evaluation of the masked attention correction.

    Builds every score, mask entry, and softmax weight with explicit loops,
    then mixes the raw values. Returns (output, weights).
    """
    d_x, E = X.shape
    sources = [X] + list(Y_list)
    V = np.vstack(sources)
    rows = V.shape[0]
    K = np.empty_like(V)
    for r in range(rows):
        K[r] = V[r] - V[r].mean()
    scores = np.empty((d_x, rows))
    for i in range(d_x):
        for r in range(rows):
            acc = 0.0
            for e in range(E):
                acc += Q[i, e] * K[r, e]
            scores[i, r] = acc / np.sqrt(E)
    allowed = np.zeros((d_x, rows), dtype=bool)
    for i in range(d_x):
        allowed[i, i] = True
        for m, on in enumerate(enabled):
            if on:
                allowed[i, (m + 1) * d_x + i] = True
    weights = np.empty_like(scores)
    for i in range(d_x):
        logits = np.empty(rows)
        for r in range(rows):
            if mode == "exclusive":
                logits[r] = scores[i, r] + (0.0 if allowed[i, r] else -1e9)
            else:
                logits[r] = scores[i, r] * (1.0 if allowed[i, r] else 0.0)
        logits -= logits.max()
        expo = np.exp(logits)
        weights[i] = expo / expo.sum()
    out = np.empty_like(X)
    for i in range(d_x):
        for e in range(E):
            acc = 0.0
            for r in range(rows):
                acc += weights[i, r] * V[r, e]
            out[i, e] = acc
    return out, weights
