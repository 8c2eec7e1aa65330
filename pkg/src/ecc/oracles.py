"""Slow, obviously-correct reference computations.

These are used to audit the fast paths: exhaustive search for the
channel-pruning proximal step and central finite differences.
"""
import itertools
from dataclasses import dataclass

import numpy as np

from .tensor import channel_norms_sq, layer_sparsity

MAX_BRUTE_FORCE_CHANNELS = 12


@dataclass
class ProxInstance:
    """One layer's proximal subproblem."""

    w_bar: np.ndarray
    B: np.ndarray
    s: float
    y: float
    alpha: float
    rho1: float

    def __post_init__(self):
        self.w_bar = np.asarray(self.w_bar, dtype=np.float64)
        self.B = np.asarray(self.B, dtype=np.float64)
        if self.w_bar.ndim != 4 or self.B.shape != self.w_bar.shape:
            raise ValueError("w_bar must be rank 4 and B must match its shape")

    @property
    def c(self):
        return self.w_bar.shape[1]

    def to_dict(self):
        return {"w_bar": self.w_bar.tolist(), "B": self.B.tolist(), "s": self.s,
                "y": self.y, "alpha": self.alpha, "rho1": self.rho1}

    @classmethod
    def from_dict(cls, d):
        return cls(d["w_bar"], d["B"], float(d["s"]), float(d["y"]), float(d["alpha"]),
                   float(d["rho1"]))


def sparsity_penalty(phi, s, y, rho1):
    """Single-layer sparsity term ``rho1/2 [phi - s]_+^2 + y (phi - s)``."""
    gap = phi - s
    return 0.5 * rho1 * max(gap, 0.0) ** 2 + y * gap


def prox_objective(w, inst):
    """``1/2 ||w - w_bar||_B^2 + alpha * penalty(phi(w))``."""
    diff = w - inst.w_bar
    fit = 0.5 * float(np.sum(inst.B * diff * diff))
    return fit + inst.alpha * sparsity_penalty(layer_sparsity(w), inst.s, inst.y, inst.rho1)


def brute_force_prox(inst):
    """Exhaustive minimiser over all ``2**c`` keep/zero channel patterns.

    For a fixed pattern the best kept slices are the ``w_bar`` slices, so
    each pattern has a single candidate. Ties keep the first pattern found
    in ``itertools.product`` order (all-zero first).

    Returns
    -------
    w : ndarray
    objective : float
    keep : ndarray of bool
    """
    c = inst.c
    if c > MAX_BRUTE_FORCE_CHANNELS:
        raise ValueError(f"brute force limited to c <= {MAX_BRUTE_FORCE_CHANNELS}, got {c}")
    best = None
    for pattern in itertools.product((False, True), repeat=c):
        keep = np.array(pattern)
        w = inst.w_bar * keep[None, :, None, None]
        obj = prox_objective(w, inst)
        if best is None or obj < best[1]:
            best = (w, obj, keep)
    return best


def random_prox_instance(rng, c, alpha=None, y=None, s=None, rho1=1.0, d=None, kernel=None):
    """Random instance with Adam-like positive preconditioner entries."""
    d = d if d is not None else int(rng.integers(1, 4))
    kh, kw = kernel if kernel is not None else [(1, 1), (3, 3)][int(rng.integers(0, 2))]
    scales = rng.uniform(0.0, 1.5, size=c)
    w_bar = rng.standard_normal((d, c, kh, kw)) * scales[None, :, None, None]
    B = rng.uniform(0.05, 2.0, size=w_bar.shape)
    alpha = alpha if alpha is not None else float(rng.choice([1e-3, 1e-1, 1.0]))
    y = y if y is not None else float(rng.choice([0.0, 0.5, 5.0]))
    s = s if s is not None else float(rng.integers(1, c + 1))
    return ProxInstance(w_bar, B, s, y, alpha, rho1)


def finite_diff_grad(f, x, h=1e-5):
    """Central differences ``(f(x + h e_j) - f(x - h e_j)) / 2h`` for every ``j``."""
    if not h > 0:
        raise ValueError("step h must be positive")
    x = np.array(x, dtype=np.float64)
    g = np.empty(x.size)
    flat = x.reshape(-1)
    for j in range(flat.size):
        orig = flat[j]
        flat[j] = orig + h
        fp = float(f(x))
        flat[j] = orig - h
        fm = float(f(x))
        flat[j] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise FloatingPointError(f"non-finite function value near coordinate {j}")
        g[j] = (fp - fm) / (2.0 * h)
    return g.reshape(x.shape)


def channel_energies(inst):
    return channel_norms_sq(inst.w_bar, inst.B)
