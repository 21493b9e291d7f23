"""Numpy reference implementations of the hot kernels.

These are the fallback backend and the ground truth the compiled kernels
are tested against. All arrays are float64; integer arrays are int64.
"""

import numpy as np


def nearest_codes(latents: np.ndarray, codes: np.ndarray) -> np.ndarray:
    """Index of the nearest code vector (squared Euclidean) per latent row.

    Ties break to the lowest index. Distances are computed from explicit
    differences, never the |x|^2+|c|^2-2xc expansion, so adding the same
    constant vector to latents and codes cannot change the result.
    """
    if latents.ndim != 2 or codes.ndim != 2 or latents.shape[1] != codes.shape[1]:
        raise ValueError(f"latents {latents.shape} vs codes {codes.shape}")
    if codes.shape[0] == 0:
        raise ValueError("empty codebook")
    diffs = latents[:, None, :] - codes[None, :, :]
    d2 = np.einsum("nkd,nkd->nk", diffs, diffs)
    return np.argmin(d2, axis=1).astype(np.int64)


def softmax_xent(logits: np.ndarray, targets: np.ndarray):
    """Row-wise stable softmax cross-entropy.

    Returns (losses (N,), probs (N,V)); probs are kept for the backward pass.
    """
    if logits.ndim != 2 or targets.ndim != 1 or logits.shape[0] != targets.shape[0]:
        raise ValueError(f"logits {logits.shape} vs targets {targets.shape}")
    shifted = logits - logits.max(axis=1, keepdims=True)
    expd = np.exp(shifted)
    denom = expd.sum(axis=1)
    probs = expd / denom[:, None]
    rows = np.arange(logits.shape[0])
    losses = np.log(denom) - shifted[rows, targets]
    return losses, probs


def softmax_xent_grad(probs: np.ndarray, targets: np.ndarray, upstream: np.ndarray) -> np.ndarray:
    """d(losses)/d(logits) contracted with per-row upstream gradients."""
    grad = probs * upstream[:, None]
    rows = np.arange(probs.shape[0])
    grad[rows, targets] -= upstream
    return grad


def adam_update(
    param: np.ndarray,
    grad: np.ndarray,
    m: np.ndarray,
    v: np.ndarray,
    step: int,
    lr: float,
    beta1: float,
    beta2: float,
    eps: float,
) -> None:
    """One bias-corrected Adam update, in place on param, m and v.

    `step` is the 1-based step count after this update.
    """
    m *= beta1
    m += (1.0 - beta1) * grad
    v *= beta2
    v += (1.0 - beta2) * grad * grad
    m_hat = m / (1.0 - beta1**step)
    v_hat = v / (1.0 - beta2**step)
    param -= lr * m_hat / (np.sqrt(v_hat) + eps)


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu_fwd(x: np.ndarray):
    """tanh-approximation GELU; returns (y, tanh cache for the backward)."""
    inner = x * x * x
    inner *= 0.044715
    inner += x
    inner *= _GELU_C
    t = np.tanh(inner)
    y = t + 1.0
    y *= x
    y *= 0.5
    return y, t


def gelu_bwd(g: np.ndarray, x: np.ndarray, t: np.ndarray) -> np.ndarray:
    d = 1.0 - t * t
    d *= _GELU_C * (1.0 + 0.134145 * (x * x))
    d *= x
    d += 1.0 + t
    d *= 0.5
    d *= g
    return d


def softmax_rows(x: np.ndarray) -> np.ndarray:
    """Row-wise stable softmax for a 2-D array."""
    y = x - x.max(axis=1, keepdims=True)
    np.exp(y, out=y)
    y /= y.sum(axis=1, keepdims=True)
    return y


def softmax_rows_grad(g: np.ndarray, y: np.ndarray) -> np.ndarray:
    inner = (g * y).sum(axis=1, keepdims=True)
    out = g - inner
    out *= y
    return out


def layer_norm_fwd(x: np.ndarray, gain: np.ndarray, bias: np.ndarray, eps: float):
    """Rows of x normalized; returns (y, xhat, inv_std) with per-row caches."""
    mu = x.mean(axis=1, keepdims=True)
    xhat = x - mu
    var = (xhat * xhat).mean(axis=1)
    inv = 1.0 / np.sqrt(var + eps)
    xhat *= inv[:, None]
    y = gain * xhat + bias
    return y, xhat, inv


def layer_norm_bwd(g: np.ndarray, xhat: np.ndarray, inv: np.ndarray, gain: np.ndarray):
    dgain = (g * xhat).sum(axis=0)
    dbias = g.sum(axis=0)
    gx = g * gain
    dx = gx - gx.mean(axis=1, keepdims=True)
    dx -= xhat * (gx * xhat).mean(axis=1, keepdims=True)
    dx *= inv[:, None]
    return dx, dgain, dbias
