"""Hot-kernel backend selection.

The compiled extension (cxrlm.kernels._fastcore, Cython) is preferred when
importable; otherwise the numpy reference implementations serve. Override
with CXRLM_KERNELS=python|compiled (compiled raises if unavailable).

Routing is per kernel, not all-or-nothing: fusion-bound kernels (layer
norm, softmax/GELU backwards, nearest-code search, Adam) go to the
compiled core, while exp/tanh-bound forwards stay on numpy, whose SIMD
transcendentals beat scalar libm loops. benchmarks/bench_kernels.py
reproduces the measurements behind that split.

Results are deterministic within one backend; the two backends may differ
in final ulps because their summation orders differ.
"""

import os

import numpy as np

from . import reference

_choice = os.environ.get("CXRLM_KERNELS", "auto").lower()
_fast = None
if _choice in ("auto", "compiled"):
    try:
        from . import _fastcore as _fast
    except ImportError:
        if _choice == "compiled":
            raise ImportError(
                "CXRLM_KERNELS=compiled but cxrlm.kernels._fastcore is not built; "
                "run `python setup.py build_ext --inplace` or reinstall"
            )
elif _choice != "python":
    raise ValueError(f"CXRLM_KERNELS must be auto, compiled or python, got {_choice!r}")

BACKEND = "compiled" if _fast is not None else "python"


def _f8(a):
    return np.ascontiguousarray(a, dtype=np.float64)


def _i8(a):
    return np.ascontiguousarray(a, dtype=np.int64)


def nearest_codes(latents, codes):
    """Nearest codebook row per latent row; ties break to the lowest index."""
    if _fast is None:
        return reference.nearest_codes(_f8(latents), _f8(codes))
    return _fast.nearest_codes(_f8(latents), _f8(codes))


def softmax_xent(logits, targets):
    """Row-wise stable softmax cross-entropy -> (losses, probs).

    exp-bound: numpy's SIMD exp beats the scalar compiled loop, so this
    one always routes to the reference implementation.
    """
    return reference.softmax_xent(_f8(logits), _i8(targets))


def softmax_xent_grad(probs, targets, upstream):
    """Backward of softmax_xent given per-row upstream gradients."""
    if _fast is None:
        return reference.softmax_xent_grad(_f8(probs), _i8(targets), _f8(upstream))
    return _fast.softmax_xent_grad(_f8(probs), _i8(targets), _f8(upstream))


def adam_update(param, grad, m, v, step, lr, beta1, beta2, eps):
    """Fused in-place Adam update on param, m and v (any shape, f8)."""
    if param.shape != grad.shape or param.shape != m.shape or param.shape != v.shape:
        raise ValueError(
            f"shape mismatch: param {param.shape}, grad {grad.shape}, m {m.shape}, v {v.shape}"
        )
    if _fast is None:
        reference.adam_update(param, grad, m, v, step, lr, beta1, beta2, eps)
    else:
        _fast.adam_update(
            param.reshape(-1), _f8(grad).reshape(-1), m.reshape(-1), v.reshape(-1),
            step, lr, beta1, beta2, eps,
        )


def gelu_fwd(x):
    """tanh-GELU forward on any shape; returns (y, tanh cache).

    tanh-bound: numpy SIMD wins, always the reference path.
    """
    return reference.gelu_fwd(x)


def gelu_bwd(g, x, t):
    if _fast is None:
        return reference.gelu_bwd(g, x, t)
    return _fast.gelu_bwd(_f8(g).reshape(-1), _f8(x).reshape(-1), _f8(t).reshape(-1)).reshape(x.shape)


def softmax_rows(x):
    """Stable softmax over the last axis of a 2-D array.

    exp-bound: numpy SIMD wins, always the reference path.
    """
    return reference.softmax_rows(x)


def softmax_rows_grad(g, y):
    if _fast is None:
        return reference.softmax_rows_grad(g, y)
    return _fast.softmax_rows_grad(_f8(g), _f8(y))


def layer_norm_fwd(x, gain, bias, eps):
    """Row layer norm; returns (y, xhat, inv_std)."""
    if _fast is None:
        return reference.layer_norm_fwd(x, gain, bias, eps)
    return _fast.layer_norm_fwd(_f8(x), _f8(gain), _f8(bias), eps)


def layer_norm_bwd(g, xhat, inv, gain):
    if _fast is None:
        return reference.layer_norm_bwd(g, xhat, inv, gain)
    return _fast.layer_norm_bwd(_f8(g), _f8(xhat), _f8(inv), _f8(gain))
