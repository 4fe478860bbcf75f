"""Hot numeric kernels with a numba fast path and a pure-numpy fallback.

The matrix products that dominate the training loop stay on numpy (BLAS);
what lives here are the elementwise / per-row loops that numpy cannot fuse:
activations, the Adam update, row-wise reductions, and the feature
perturbation step.

Backend selection happens once at import time: set ``FAIRCDA_NUMBA=0`` to
force the numpy path, otherwise numba is used when importable.  Both
backends implement identical math; ``benchmarks/bench_kernels.py`` compares
them.
"""

from __future__ import annotations

import os

import numpy as np

__all__ = [
    "backend",
    "have_numba",
    "sigmoid",
    "relu",
    "adam_update",
    "row_dot",
    "perturb_delta",
    "NUMPY_IMPL",
    "NUMBA_IMPL",
]


# ---------------------------------------------------------------------------
# numpy reference implementations
# ---------------------------------------------------------------------------

def _np_sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0.0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _np_relu(x):
    return np.maximum(x, 0.0)


def _np_adam_update(p, g, m, v, t, lr, beta1, beta2, eps):
    # in-place on p, m, v; t is the 1-based step count
    m *= beta1
    m += (1.0 - beta1) * g
    v *= beta2
    v += (1.0 - beta2) * g * g
    mhat = m / (1.0 - beta1 ** t)
    vhat = v / (1.0 - beta2 ** t)
    p -= lr * mhat / (np.sqrt(vhat) + eps)


def _np_row_dot(a, b):
    return np.einsum("ij,ij->i", a, b)


def _np_perturb_delta(grad, alpha, guard):
    # alpha_i * grad_i / ||grad_i||, zero row when the norm is under guard
    norms = np.sqrt(np.einsum("ij,ij->i", grad, grad))
    safe = np.where(norms >= guard, norms, 1.0)
    scale = np.where(norms >= guard, alpha / safe, 0.0)
    return grad * scale[:, None]


NUMPY_IMPL = {
    "sigmoid": _np_sigmoid,
    "relu": _np_relu,
    "adam_update": _np_adam_update,
    "row_dot": _np_row_dot,
    "perturb_delta": _np_perturb_delta,
}


# ---------------------------------------------------------------------------
# numba implementations
# ---------------------------------------------------------------------------

_want_numba = os.environ.get("FAIRCDA_NUMBA", "1").lower() not in ("0", "false", "off")

NUMBA_IMPL = None
if _want_numba:
    try:
        from numba import njit
    except ImportError:
        njit = None
else:
    njit = None

if njit is not None:

    @njit(cache=True)
    def _nb_sigmoid_flat(x, out):
        for i in range(x.size):
            xi = x[i]
            if xi >= 0.0:
                out[i] = 1.0 / (1.0 + np.exp(-xi))
            else:
                e = np.exp(xi)
                out[i] = e / (1.0 + e)

    @njit(cache=True)
    def _nb_relu_flat(x, out):
        for i in range(x.size):
            xi = x[i]
            out[i] = xi if xi > 0.0 else 0.0

    @njit(cache=True)
    def _nb_adam_update_flat(p, g, m, v, t, lr, beta1, beta2, eps):
        c1 = 1.0 - beta1 ** t
        c2 = 1.0 - beta2 ** t
        for i in range(p.size):
            gi = g[i]
            mi = beta1 * m[i] + (1.0 - beta1) * gi
            vi = beta2 * v[i] + (1.0 - beta2) * gi * gi
            m[i] = mi
            v[i] = vi
            p[i] -= lr * (mi / c1) / (np.sqrt(vi / c2) + eps)

    @njit(cache=True)
    def _nb_row_dot(a, b, out):
        for i in range(a.shape[0]):
            s = 0.0
            for j in range(a.shape[1]):
                s += a[i, j] * b[i, j]
            out[i] = s

    @njit(cache=True)
    def _nb_perturb_delta(grad, alpha, guard, out):
        for i in range(grad.shape[0]):
            s = 0.0
            for j in range(grad.shape[1]):
                s += grad[i, j] * grad[i, j]
            norm = np.sqrt(s)
            if norm >= guard:
                f = alpha[i] / norm
                for j in range(grad.shape[1]):
                    out[i, j] = grad[i, j] * f
            else:
                for j in range(grad.shape[1]):
                    out[i, j] = 0.0

    def _numba_sigmoid(x):
        flat = np.ascontiguousarray(x, dtype=np.float64).ravel()
        out = np.empty_like(flat)
        _nb_sigmoid_flat(flat, out)
        return out.reshape(x.shape)

    def _numba_relu(x):
        flat = np.ascontiguousarray(x, dtype=np.float64).ravel()
        out = np.empty_like(flat)
        _nb_relu_flat(flat, out)
        return out.reshape(x.shape)

    def _numba_adam_update(p, g, m, v, t, lr, beta1, beta2, eps):
        _nb_adam_update_flat(
            p.ravel(), np.ascontiguousarray(g, dtype=np.float64).ravel(),
            m.ravel(), v.ravel(), t, lr, beta1, beta2, eps,
        )

    def _numba_row_dot(a, b):
        a = np.ascontiguousarray(a, dtype=np.float64)
        b = np.ascontiguousarray(b, dtype=np.float64)
        out = np.empty(a.shape[0])
        _nb_row_dot(a, b, out)
        return out

    def _numba_perturb_delta(grad, alpha, guard):
        grad = np.ascontiguousarray(grad, dtype=np.float64)
        alpha = np.ascontiguousarray(alpha, dtype=np.float64)
        out = np.empty_like(grad)
        _nb_perturb_delta(grad, alpha, guard, out)
        return out

    NUMBA_IMPL = {
        "sigmoid": _numba_sigmoid,
        "relu": _numba_relu,
        "adam_update": _numba_adam_update,
        "row_dot": _numba_row_dot,
        "perturb_delta": _numba_perturb_delta,
    }

_ACTIVE = NUMBA_IMPL if NUMBA_IMPL is not None else NUMPY_IMPL

sigmoid = _ACTIVE["sigmoid"]
relu = _ACTIVE["relu"]
adam_update = _ACTIVE["adam_update"]
row_dot = _ACTIVE["row_dot"]
perturb_delta = _ACTIVE["perturb_delta"]


def backend() -> str:
    """Name of the active kernel backend, ``"numba"`` or ``"numpy"``."""
    return "numba" if _ACTIVE is NUMBA_IMPL else "numpy"


def have_numba() -> bool:
    return NUMBA_IMPL is not None
