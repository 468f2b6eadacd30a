"""Pure numpy implementations of the row-wise kernels.

Every function takes and returns 2-D float64 arrays (rows x columns); callers
reshape higher-rank tensors to that layout. Must stay numerically identical in
meaning to ``_kernels.pyx``.
"""

import numpy as np


def masked_softmax(x, mask=None):
    if mask is None:
        shifted = x - x.max(axis=1, keepdims=True)
        e = np.exp(shifted)
    else:
        keep = mask.astype(bool)
        big = np.where(keep, x, -np.inf).max(axis=1, keepdims=True)
        big = np.where(np.isfinite(big), big, 0.0)
        e = np.where(keep, np.exp(np.where(keep, x, big) - big), 0.0)
    total = e.sum(axis=1, keepdims=True)
    total[total == 0.0] = 1.0
    return e / total


def softmax_backward(y, g):
    return y * (g - (g * y).sum(axis=1, keepdims=True))


def layer_norm_forward(x, eps):
    mean = x.mean(axis=1, keepdims=True)
    centered = x - mean
    var = (centered * centered).mean(axis=1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    return centered * inv_std, inv_std[:, 0].copy()


def layer_norm_backward(xhat, inv_std, g):
    # g is the gradient w.r.t. the normalized (pre-affine) output
    mean_g = g.mean(axis=1, keepdims=True)
    mean_gx = (g * xhat).mean(axis=1, keepdims=True)
    return (g - mean_g - xhat * mean_gx) * inv_std[:, None]


def sample_categorical(probs, u):
    """Inverse-CDF draw per row; ``u`` holds one uniform in [0, 1) per row."""
    cdf = np.cumsum(probs, axis=1)
    cdf /= cdf[:, -1:]
    return (cdf > u[:, None]).argmax(axis=1).astype(np.int64)
