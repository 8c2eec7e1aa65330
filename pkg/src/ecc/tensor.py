"""Channel-structured helpers over 4-D weight tensors.

Weights are plain ``float64`` numpy arrays laid out as ``(d, c, rh, rw)``:
output channels, input channels, kernel height, kernel width. A
fully-connected layer is a tensor with ``rh = rw = 1``.
"""
import numpy as np


def as_tensor4(w):
    """Return ``w`` as a C-contiguous float64 array of rank 4."""
    w = np.ascontiguousarray(w, dtype=np.float64)
    if w.ndim != 4:
        raise ValueError(f"expected a rank-4 weight tensor, got shape {w.shape}")
    if not np.all(np.isfinite(w)):
        raise ValueError("weight tensor contains non-finite entries")
    return w


def check_preconditioner(B, shape, eps=0.0):
    """Validate a diagonal preconditioner stored elementwise.

    Parameters
    ----------
    B : array_like
        Positive weights, one per tensor element.
    shape : tuple
        Shape of the tensor ``B`` preconditions.
    eps : float
        Lower bound every entry must respect (strictly positive when 0).
    """
    B = np.asarray(B, dtype=np.float64)
    if B.shape != tuple(shape):
        raise ValueError(f"preconditioner shape {B.shape} does not match {tuple(shape)}")
    if eps > 0:
        ok = B >= eps
    else:
        ok = B > 0
    if not np.all(ok):
        raise ValueError("preconditioner entries must be positive")
    return B


def _check_channel(w, i):
    c = w.shape[1]
    if not 0 <= i < c:
        raise IndexError(f"input channel {i} out of range for c={c}")


def channel_norms_sq(w, B=None):
    """B-weighted squared norm of every input-channel slice ``w[:, i, :, :]``."""
    w = np.asarray(w, dtype=np.float64)
    sq = w * w if B is None else B * w * w
    return sq.sum(axis=(0, 2, 3))


def channel_slice_norm_sq(w, i, B=None):
    """Squared B-norm of input channel ``i``: ``sum(B * w[:, i]**2)``.

    ``B=None`` means the identity preconditioner.
    """
    w = np.asarray(w, dtype=np.float64)
    if w.ndim != 4:
        raise ValueError(f"expected a rank-4 weight tensor, got shape {w.shape}")
    _check_channel(w, i)
    sl = w[:, i]
    if B is None:
        return float(np.sum(sl * sl))
    B = check_preconditioner(B, w.shape)
    return float(np.sum(B[:, i] * sl * sl))


def layer_sparsity(w, zero_tol=0.0):
    """Number of input channels whose slice norm exceeds ``zero_tol``.

    With ``zero_tol=0`` this counts the slices that are not exactly zero.
    """
    if zero_tol < 0:
        raise ValueError("zero_tol must be nonnegative")
    w = np.asarray(w, dtype=np.float64)
    if w.ndim != 4:
        raise ValueError(f"expected a rank-4 weight tensor, got shape {w.shape}")
    return int(np.count_nonzero(nonzero_channels(w, zero_tol)))


def zero_channel(w, i):
    """Copy of ``w`` with input channel ``i`` set to exactly zero."""
    w = np.asarray(w, dtype=np.float64)
    _check_channel(w, i)
    out = w.copy()
    out[:, i] = 0.0
    return out


def nonzero_channels(w, zero_tol=0.0):
    """Boolean vector marking the input channels counted by :func:`layer_sparsity`."""
    w = np.asarray(w, dtype=np.float64)
    if zero_tol == 0:
        # exact test; squared norms of tiny slices can underflow to zero
        return np.any(w != 0.0, axis=(0, 2, 3))
    return np.sqrt(channel_norms_sq(w)) > zero_tol
