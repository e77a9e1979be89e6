"""Real FFTs and the mode-truncated spectral convolution with its adjoint.

Spectra use the Hermitian half layout: full frequency range on every axis
but the last, which holds ``J_last // 2 + 1`` non-negative frequencies.
Retained modes are ``|k_i| < m_i`` on full axes (both wings, ``2 m_i - 1``
values) and ``0 <= k < m_last`` on the last axis.
"""
from __future__ import annotations

import numpy as np

from .exceptions import ModeOverflow


def rfft_nd(x, ndim: int | None = None) -> np.ndarray:
    """Unnormalized real FFT over the trailing ``ndim`` axes (default: all)."""
    x = np.asarray(x, dtype=float)
    ndim = x.ndim if ndim is None else ndim
    return np.fft.rfftn(x, axes=tuple(range(x.ndim - ndim, x.ndim)))


def irfft_nd(X, dims) -> np.ndarray:
    """Inverse of :func:`rfft_nd` (``1/J`` normalized) onto spatial ``dims``."""
    X = np.asarray(X)
    nd = len(dims)
    return np.fft.irfftn(X, s=tuple(dims), axes=tuple(range(X.ndim - nd, X.ndim)))


def check_modes(shape, modes) -> None:
    if len(modes) != len(shape):
        raise ModeOverflow(f"{len(modes)} mode counts for a {len(shape)}-d grid")
    for i, (J, m) in enumerate(zip(shape, modes)):
        if m < 1:
            raise ModeOverflow("mode counts must be >= 1")
        last = i == len(shape) - 1
        if (last and m > J // 2 + 1) or (not last and 2 * m - 1 > J):
            raise ModeOverflow(f"{m} modes do not fit axis {i} of length {J}")


def mode_shape(modes) -> tuple:
    return tuple(2 * m - 1 for m in modes[:-1]) + (modes[-1],)


def _full_axis_index(J, m):
    return np.r_[0:m, J - m + 1:J]


def hermitian_weights(shape, modes) -> np.ndarray:
    """Multiplicity of each retained mode in the full spectrum (1 or 2)."""
    J = shape[-1]
    w = np.full(modes[-1], 2.0)
    w[0] = 1.0
    if J % 2 == 0 and modes[-1] > J // 2:
        w[J // 2] = 1.0
    return w


def forward_modes(a, modes) -> np.ndarray:
    """Retained modes of ``rfft_nd`` over the trailing ``len(modes)`` axes.

    Transforms one axis at a time and truncates as early as possible, so
    only the retained slab is ever transformed along the full axes.
    """
    d = len(modes)
    shape = a.shape[-d:]
    check_modes(shape, modes)
    X = np.fft.rfft(a, axis=-1)[..., : modes[-1]]
    for i in range(d - 1):
        ax = a.ndim - d + i
        X = np.fft.fft(X, axis=ax)
        X = np.take(X, _full_axis_index(shape[i], modes[i]), axis=ax)
    return X


def inverse_modes(Xk, shape, modes) -> np.ndarray:
    """Zero-pad retained modes to the full half spectrum and invert."""
    d = len(modes)
    X = Xk
    for i in reversed(range(d - 1)):
        ax = X.ndim - d + i
        full = list(X.shape)
        full[ax] = shape[i]
        Y = np.zeros(full, dtype=complex)
        idx = [slice(None)] * X.ndim
        idx[ax] = _full_axis_index(shape[i], modes[i])
        Y[tuple(idx)] = X
        X = np.fft.ifft(Y, axis=ax)
    return np.fft.irfft(X, n=shape[-1], axis=-1)


def _mix(A, B, sub):
    """Per-mode channel products, batched over the flattened mode axis.

    ``sub`` selects the contraction: ``"oi,bi->bo"`` (apply),
    ``"bo,bi->oi"`` (weight gradient) or ``"oi,bo->bi"`` (adjoint apply).
    """
    K = A.shape[2:]
    a = A.reshape(A.shape[:2] + (-1,)).transpose(2, 0, 1)
    b = B.reshape(B.shape[:2] + (-1,)).transpose(2, 0, 1)
    if sub == "oi,bi->bo":
        out = np.matmul(b, a.transpose(0, 2, 1))        # (k, b, o)
    elif sub == "bo,bi->oi":
        out = np.matmul(a.transpose(0, 2, 1), b)        # (k, o, i)
    else:
        out = np.matmul(b, np.conj(a))                   # (k, b, i)
    return np.ascontiguousarray(out.transpose(1, 2, 0)).reshape(out.shape[1:] + K)


def spectral_conv(a, R, modes):
    """Apply complex weights ``R[o, i, *k]`` to the retained modes of ``a``.

    ``a`` has shape ``(batch, C_in, *spatial)``; returns ``(y, a_hat)`` with
    ``y`` of shape ``(batch, C_out, *spatial)``.
    """
    shape = a.shape[2:]
    a_hat = forward_modes(a, modes)
    y_hat = _mix(R, a_hat, "oi,bi->bo")
    return inverse_modes(y_hat, shape, modes), a_hat


def spectral_conv_backward(g, R, a_hat, modes):
    """Gradients of ``<g, spectral_conv(a, R)>`` w.r.t. ``a`` and ``R``.

    Complex gradients follow the ``d/dRe + i d/dIm`` convention.
    """
    shape = g.shape[2:]
    J = float(np.prod(shape))
    w = hermitian_weights(shape, modes)
    g_hat = forward_modes(g, modes) * (w / J)
    grad_R = _mix(g_hat, np.conj(a_hat), "bo,bi->oi")
    ga_hat = _mix(R, g_hat, "oi,bo->bi")
    grad_a = J * inverse_modes(ga_hat / w, shape, modes)
    return grad_a, grad_R
