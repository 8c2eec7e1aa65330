"""Energy-constrained compression by an ADMM-style primal/dual loop.

Each iteration

1. takes an Adam step on the weights and passes the result through the
   channel-pruning proximal operator (pruning and fine-tuning at once),
2. takes a clamped gradient step on the per-layer width bounds ``s``,
3. takes projected ascent steps on the duals ``y`` (per layer) and ``z``
   (energy), with the two stabilising adjustments described on
   :func:`dual_step`.

Width vectors ``s`` carry ``U + 1`` entries; the last one is the network's
output size and never changes.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from .network import KDConfig, Network, check_mask, forward, loss_and_grad, mask_from_network
from .tensor import channel_norms_sq

TRACE_VERSION = 1


class InfeasibleBudgetError(ValueError):
    """The budget is below the estimated energy at the width lower bounds."""

    def __init__(self, message, min_energy, budget):
        super().__init__(message)
        self.min_energy = min_energy
        self.budget = budget


class IterationLimitError(RuntimeError):
    """The solver hit ``max_iter`` before both constraints held."""

    def __init__(self, message, trace):
        super().__init__(message)
        self.trace = trace


@dataclass
class SolverConfig:
    budget: float
    alpha: float = 1e-3
    beta: float | None = None  # None: calibrate automatically
    rho1: float = 100.0
    rho2: float = 1e4
    epsilon: float = 1e-3
    max_iter: int = 3000
    lower_bounds: list | None = None
    lower_bound_fraction: float | None = None
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    beta_target_fraction: float = 0.8
    kd_weight: float = 0.5
    kd_temperature: float = 4.0
    grace_iters: int = 0

    def __post_init__(self):
        for name in ("alpha", "rho1", "rho2", "epsilon", "adam_eps"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.beta is not None and not self.beta > 0:
            raise ValueError("beta must be positive")
        if self.max_iter < 1:
            raise ValueError("max_iter must be >= 1")
        if not 0 < self.beta_target_fraction <= 1:
            raise ValueError("beta_target_fraction must lie in (0, 1]")
        if self.lower_bounds is not None and min(self.lower_bounds) < 1:
            raise ValueError("width lower bounds must be >= 1")

    def resolve_lower_bounds(self, widths):
        widths = np.asarray(widths, dtype=np.float64)
        if self.lower_bounds is not None:
            lb = np.asarray(self.lower_bounds, dtype=np.float64)
            if lb.shape != widths.shape:
                raise ValueError(f"need {widths.size} lower bounds, got {lb.size}")
        elif self.lower_bound_fraction is not None:
            lb = np.maximum(1.0, np.ceil(self.lower_bound_fraction * widths))
        else:
            lb = np.ones_like(widths)
        if np.any(lb > widths):
            raise ValueError("a lower bound exceeds its layer width")
        return lb

    def to_dict(self):
        return asdict(self)


@dataclass
class DualState:
    y: np.ndarray
    z: float = 0.0

    @classmethod
    def zeros(cls, n_layers):
        return cls(np.zeros(n_layers), 0.0)


class AdamState:
    """Adam moments for every weight tensor and bias of a network."""

    def __init__(self, net, beta1=0.9, beta2=0.999, eps=1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = [np.zeros_like(p) for p in _params(net)]
        self.v = [np.zeros_like(p) for p in _params(net)]
        self.t = 0

    @classmethod
    def from_config(cls, net, config):
        return cls(net, config.adam_beta1, config.adam_beta2, config.adam_eps)

    def update(self, grads):
        """Advance the moments; return bias-corrected ``(m_hat, B)`` per parameter.

        ``B = sqrt(v_hat) + eps`` is the diagonal preconditioner.
        """
        flat = [g for pair in grads for g in pair]
        if len(flat) != len(self.m):
            raise ValueError("gradient list does not match the Adam state")
        self.t += 1
        c1 = 1 - self.beta1 ** self.t
        c2 = 1 - self.beta2 ** self.t
        out = []
        for m, v, g in zip(self.m, self.v, flat):
            if g.shape != m.shape:
                raise ValueError("gradient shape does not match the Adam state")
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            out.append((m / c1, np.sqrt(v / c2) + self.eps))
        return out


def _params(net):
    return [p for pair in zip(net.weights, net.biases) for p in pair]


def adam_step(net, grads, adam, lr):
    """Plain Adam update; returns a new network."""
    steps = adam.update(grads)
    new = [p - lr * mhat / B for p, (mhat, B) in zip(_params(net), steps)]
    return Network(net.layers, new[0::2], new[1::2], net.input_shape)


# -- Lagrangian pieces ---------------------------------------------------


def _phi(W):
    if isinstance(W, Network):
        return W.sparsity().astype(np.float64)
    W = list(W)
    if W and np.ndim(W[0]) == 4:
        return np.array([np.count_nonzero(channel_norms_sq(w)) for w in W], dtype=np.float64)
    return np.asarray(W, dtype=np.float64)


def lagrangian_l1(W, s, y, rho1):
    """``rho1/2 sum [phi_u - s_u]_+^2 + sum y_u (phi_u - s_u)``.

    ``W`` may be a network, a list of weight tensors, or the widths ``phi``.
    ``s`` may include the trailing output size.
    """
    phi = _phi(W)
    gap = phi - np.asarray(s, dtype=np.float64)[: phi.size]
    return float(0.5 * rho1 * np.sum(np.maximum(gap, 0.0) ** 2) + np.dot(y, gap))


def lagrangian_l2(s, z, rho2, model, budget):
    """``rho2/2 [E(s) - budget]_+^2 + z (E(s) - budget)``."""
    gap = model.energy(s) - budget
    return float(0.5 * rho2 * max(gap, 0.0) ** 2 + z * gap)


# -- proximal operator ---------------------------------------------------


def prox_thresholds(c, s, y, alpha, rho1):
    """Keep-threshold for the channel of every rank ``r = 1..c``."""
    r = np.arange(1, c + 1, dtype=np.float64)
    over = np.maximum(r - s, 0.0) ** 2 - np.maximum(r - 1 - s, 0.0) ** 2
    return rho1 * alpha * over + 2.0 * alpha * y


def prox_layer(w_bar, B, s, y, alpha, rho1):
    """Channel-pruning prox for one layer; returns ``(w, keep)``.

    Channels are ranked by their B-weighted squared norm (largest first, ties
    by lower index). A channel survives unchanged when its norm beats the
    threshold for its rank, otherwise its slice becomes exactly zero.
    """
    a = channel_norms_sq(w_bar, B)
    order = np.argsort(-a, kind="stable")
    ranks = np.empty(a.size, dtype=np.intp)
    ranks[order] = np.arange(a.size)
    keep = a > prox_thresholds(a.size, s, y, alpha, rho1)[ranks]
    w = w_bar.copy()
    w[:, ~keep] = 0.0
    return w, keep


def prox_l1(W_bar, s, y, alpha, rho1, B):
    """Apply :func:`prox_layer` to every layer; returns the new weight list."""
    W_bar = list(W_bar)
    if len(B) != len(W_bar) or len(y) != len(W_bar):
        raise ValueError("W_bar, B and y need one entry per layer")
    out = []
    for u, (wb, b) in enumerate(zip(W_bar, B)):
        if np.shape(b) != np.shape(wb):
            raise ValueError(f"preconditioner shape mismatch in layer {u}")
        out.append(prox_layer(wb, b, float(s[u]), float(y[u]), alpha, rho1)[0])
    return out


# -- the three updates ---------------------------------------------------


@dataclass
class PrimalStep:
    network: Network
    loss: float
    channel_energy: list  # B-weighted channel norms of the pre-prox candidate


def primal_w_step(net, X, labels, s, y, config, adam, kd=None):
    """Proximal Adam step on the weights.

    The Adam candidate ``W_bar = W - alpha * m_hat / B`` is pruned by
    :func:`prox_l1`; biases take the plain Adam step. With slack constraints
    the prox keeps every channel and the result equals :func:`adam_step`.
    """
    loss, grads = loss_and_grad(net, X, labels, kd=kd)
    steps = adam.update(grads)
    alpha = config.alpha
    weights, biases, energies = [], [], []
    for u, (w, b) in enumerate(zip(net.weights, net.biases)):
        (mw, Bw), (mb, Bb) = steps[2 * u], steps[2 * u + 1]
        w_bar = w - alpha * mw / Bw
        if not np.all(np.isfinite(w_bar)):
            raise FloatingPointError(f"non-finite weight candidate in layer {u}")
        new_w, _ = prox_layer(w_bar, Bw, float(s[u]), float(y[u]), alpha, config.rho1)
        weights.append(new_w)
        biases.append(b - alpha * mb / Bb)
        energies.append(channel_norms_sq(w_bar, Bw))
    return PrimalStep(Network(net.layers, weights, biases, net.input_shape), loss, energies)


def _s_gradient_parts(s, phi, y, z, model, config):
    """Affine pieces of the s-gradient: ``g = base + (penalty + z) * slope``."""
    n = phi.size
    gap = model.energy(s) - config.budget
    base = -config.rho1 * np.maximum(phi - s[:n], 0.0) - y
    slope = model.grad(s)
    return base, config.rho2 * max(gap, 0.0), slope


def s_gradient(s, phi, y, z, model, config):
    """Clamped (nonnegative) gradient of the Lagrangian w.r.t. the layer widths."""
    base, penalty, slope = _s_gradient_parts(s, phi, y, z, model, config)
    return np.maximum(base + (penalty + z) * slope, 0.0)


def sparsity_step(s, phi, y, z, model, config, lower_bounds, beta):
    """``s' = max(lower_bounds, s - beta * g)`` with ``g`` from :func:`s_gradient`."""
    s = np.asarray(s, dtype=np.float64)
    phi = _phi(phi)
    g = s_gradient(s, phi, y, z, model, config)
    out = s.copy()
    out[: phi.size] = np.maximum(lower_bounds, s[: phi.size] - beta * g)
    return out


def trim_cap(channel_energy, s_u, alpha):
    """Largest ``y`` for which the prox keeps at least ``floor(s_u)`` channels.

    Ranks up to ``floor(s_u)`` only face the ``2 alpha y`` part of the
    threshold, so the cap is set by the ``floor(s_u)``-th largest norm.
    """
    a = np.sort(np.asarray(channel_energy, dtype=np.float64))[::-1]
    k = int(math.floor(s_u))
    if k < 1:
        return math.inf
    if k > a.size:
        return 0.0
    ak = float(a[k - 1])
    if ak <= 0.0:
        return 0.0
    cap = ak / (2.0 * alpha)
    while cap > 0.0 and not ak > 2.0 * alpha * cap:
        cap = math.nextafter(cap, 0.0)
    return cap


def min_progress_z(s, phi, y, model, config, lower_bounds):
    """Smallest ``z`` making the largest s-gradient entry of a movable layer reach epsilon.

    Returns 0 when no layer can move or no layer's energy depends on ``s``.
    """
    base, penalty, slope = _s_gradient_parts(s, phi, y, 0.0, model, config)
    movable = (s[: phi.size] > lower_bounds) & (slope > 0)
    if not np.any(movable):
        return 0.0
    need = (config.epsilon - base[movable]) / slope[movable] - penalty
    return max(float(np.min(need)), 0.0)


def dual_step(phi, s, duals, model, config, channel_energy=None, lower_bounds=None):
    """Projected ascent on the duals plus the two stabilising adjustments.

    * ``y_u`` is capped so the prox would still keep ``floor(s_u)`` channels
      of the latest candidate (see :func:`trim_cap`); skipped when
      ``channel_energy`` is None.
    * While the energy estimate is over budget, ``z`` is raised to the
      smallest value giving some movable layer an s-gradient of at least
      ``epsilon``.
    """
    phi = _phi(phi)
    s = np.asarray(s, dtype=np.float64)
    n = phi.size
    y = np.maximum(duals.y + config.rho1 * (phi - s[:n]), 0.0)
    if channel_energy is not None:
        caps = np.array([trim_cap(a, s[u], config.alpha) for u, a in enumerate(channel_energy)])
        y = np.minimum(y, caps)
    energy = model.energy(s)
    z = max(duals.z + config.rho2 * (energy - config.budget), 0.0)
    if energy > config.budget:
        if lower_bounds is None:
            lower_bounds = np.ones(n)
        z = max(z, min_progress_z(s, phi, y, model, config, lower_bounds))
    return DualState(y, z)


# -- step-size calibration -----------------------------------------------


def _dry_run(beta, model, s0, lower_bounds, config, limit):
    """Iterations the width/energy dynamics alone need to reach the budget."""
    s = s0.copy()
    duals = DualState.zeros(lower_bounds.size)
    phi = s0[:-1].copy()
    for it in range(limit):
        if model.energy(s) <= config.budget:
            return it
        s = sparsity_step(s, phi, duals.y, duals.z, model, config, lower_bounds, beta)
        phi = np.minimum(phi, s[:-1])
        duals = dual_step(phi, s, duals, model, config, None, lower_bounds)
    return limit + 1


def calibrate_beta(model, s0, lower_bounds, config):
    """Pick ``beta`` so the energy gap closes after ``beta_target_fraction * max_iter`` steps.

    Bisection in log-space on the iteration count of a weight-free dry run
    of the width and dual updates.
    """
    target = max(1, int(config.beta_target_fraction * config.max_iter))
    lo, hi = -12.0, 12.0
    if _dry_run(10.0 ** hi, model, s0, lower_bounds, config, target) > target:
        return 10.0 ** hi
    for _ in range(40):
        mid = 0.5 * (lo + hi)
        if _dry_run(10.0 ** mid, model, s0, lower_bounds, config, target) > target:
            lo = mid
        else:
            hi = mid
    return 10.0 ** hi


# -- the loop ------------------------------------------------------------


@dataclass
class TraceRow:
    iteration: int
    loss: float
    energy: float
    max_violation: float
    max_y: float
    z: float
    s: list
    phi: list


@dataclass
class CompressResult:
    network: Network
    s: np.ndarray
    duals: DualState
    trace: list
    beta: float
    iterations: int
    converged: bool = True
    info: dict = field(default_factory=dict)


def full_widths(phi, n_out):
    return np.append(np.asarray(phi, dtype=np.float64), float(n_out))


def min_energy(model, lower_bounds, n_out):
    return model.energy(full_widths(lower_bounds, n_out))


def compress(net_dense, model, config, stream, callback=None):
    """Prune ``net_dense`` until its estimated energy fits ``config.budget``.

    Parameters
    ----------
    net_dense : Network
    model : BilinearEnergyModel
        Fitted energy estimate for this architecture.
    config : SolverConfig
    stream : iterator of (X, labels)
        Training minibatches.
    callback : callable, optional
        Called with every :class:`TraceRow`.

    Raises
    ------
    InfeasibleBudgetError
        Before any iteration, when even the width lower bounds exceed the budget.
    IterationLimitError
        When ``config.max_iter`` iterations pass without both constraints holding.
    """
    n_layers = len(net_dense.layers)
    if model.n_layers != n_layers:
        raise ValueError(f"energy model has {model.n_layers} layers, network has {n_layers}")
    lb = config.resolve_lower_bounds(net_dense.widths)
    e_min = min_energy(model, lb, net_dense.n_out)
    if e_min > config.budget:
        raise InfeasibleBudgetError(
            f"budget {config.budget:.6g} J is below the {e_min:.6g} J estimated at the lower bounds",
            e_min, config.budget)

    net = net_dense.copy()
    teacher = net_dense.copy()
    phi = net.sparsity().astype(np.float64)
    if np.any(phi < lb):
        raise ValueError("dense network is already narrower than the width lower bounds")
    s = full_widths(phi, net.n_out)
    duals = DualState.zeros(n_layers)
    beta = config.beta if config.beta is not None else calibrate_beta(model, s, lb, config)
    adam = AdamState.from_config(net, config)
    trace = [_trace_row(0, float("nan"), model, s, phi, duals)]
    if callback:
        callback(trace[0])

    it = 0
    while model.energy(s) > config.budget or np.any(phi > s[:-1]):
        if it >= config.max_iter:
            raise IterationLimitError(
                f"constraints still violated after {config.max_iter} iterations", trace)
        it += 1
        X, labels = next(stream)
        kd = _kd(teacher, X, config)
        step = primal_w_step(net, X, labels, s, duals.y, config, adam, kd)
        net = step.network
        phi = net.sparsity().astype(np.float64)
        s = sparsity_step(s, phi, duals.y, duals.z, model, config, lb, beta)
        duals = dual_step(phi, s, duals, model, config, step.channel_energy, lb)
        row = _trace_row(it, step.loss, model, s, phi, duals)
        trace.append(row)
        if callback:
            callback(row)

    if config.grace_iters:
        mask = mask_from_network(net)
        for _ in range(config.grace_iters):
            X, labels = next(stream)
            net = masked_adam_step(net, X, labels, mask, adam, config.alpha, _kd(teacher, X, config))
    return CompressResult(net, s, duals, trace, beta, it)


def _kd(teacher, X, config):
    if not config.kd_weight:
        return None
    return KDConfig(forward(teacher, X), config.kd_weight, config.kd_temperature)


def _trace_row(it, loss, model, s, phi, duals):
    return TraceRow(
        iteration=it,
        loss=float(loss),
        energy=model.energy(s),
        max_violation=float(np.max(np.maximum(phi - s[:-1], 0.0))),
        max_y=float(np.max(duals.y)),
        z=float(duals.z),
        s=[float(v) for v in s[:-1]],
        phi=[int(v) for v in phi],
    )


# -- fine-tuning ---------------------------------------------------------


def masked_adam_step(net, X, labels, mask, adam, lr, kd=None):
    _, grads = loss_and_grad(net, X, labels, kd=kd, mask=mask)
    new = adam_step(net, grads, adam, lr)
    weights = [w * m[None, :, None, None] for w, m in zip(new.weights, mask)]
    return Network(new.layers, weights, new.biases, new.input_shape)


def finetune(net, mask, stream, iterations, lr=1e-3, teacher=None, kd_weight=0.5,
             kd_temperature=4.0, adam_betas=(0.9, 0.999), adam_eps=1e-8, history=None,
             lr_schedule="constant"):
    """Adam training that keeps every masked-out channel exactly zero.

    Raises ``ValueError`` when a masked-out channel is not already zero.
    ``history``, if a list, receives the loss of every step.
    ``lr_schedule`` is ``"constant"`` or ``"cosine"`` (decay to zero over
    ``iterations``).
    """
    if lr_schedule not in ("constant", "cosine"):
        raise ValueError(f"unknown lr_schedule {lr_schedule!r}")
    mask = check_mask(net, mask)
    for u, (w, m) in enumerate(zip(net.weights, mask)):
        if np.any(w[:, ~m] != 0.0):
            raise ValueError(f"layer {u} has nonzero weights in masked-out channels")
    adam = AdamState(net, *adam_betas, eps=adam_eps)
    net = net.copy()
    n = int(iterations)
    for t in range(n):
        step_lr = lr if lr_schedule == "constant" else 0.5 * lr * (1.0 + math.cos(math.pi * t / n))
        X, labels = next(stream)
        kd = None
        if teacher is not None and kd_weight:
            kd = KDConfig(forward(teacher, X), kd_weight, kd_temperature)
        if history is not None:
            history.append(loss_and_grad(net, X, labels, kd=kd)[0])
        net = masked_adam_step(net, X, labels, mask, adam, step_lr, kd)
    return net


# -- trace file ----------------------------------------------------------


def write_trace(path, trace, layer_names=None, metadata=None):
    """Tab-separated iteration log, one row per iteration."""
    import json

    n = len(trace[0].s) if trace else 0
    names = list(layer_names) if layer_names else [f"layer{u + 1}" for u in range(n)]
    with open(path, "w") as fh:
        fh.write(f"# ecc-trace v{TRACE_VERSION}\n")
        fh.write("# metadata " + json.dumps(metadata or {}, sort_keys=True) + "\n")
        cols = ["iter", "loss", "energy", "max_violation", "max_y", "z"]
        cols += [f"s_{nm}" for nm in names] + [f"phi_{nm}" for nm in names]
        fh.write("\t".join(cols) + "\n")
        for row in trace:
            cells = [str(row.iteration), repr(row.loss), repr(row.energy),
                     repr(row.max_violation), repr(row.max_y), repr(row.z)]
            cells += [repr(v) for v in row.s] + [str(v) for v in row.phi]
            fh.write("\t".join(cells) + "\n")


def read_trace(path):
    rows = []
    with open(path) as fh:
        lines = [ln.rstrip("\n") for ln in fh if ln.strip() and not ln.startswith("#")]
    header = lines[0].split("\t")
    n = (len(header) - 6) // 2
    for line in lines[1:]:
        c = line.split("\t")
        rows.append(TraceRow(int(c[0]), float(c[1]), float(c[2]), float(c[3]), float(c[4]),
                             float(c[5]), [float(v) for v in c[6 : 6 + n]],
                             [int(v) for v in c[6 + n :]]))
    return rows


# -- estimator front end ---------------------------------------------------


class EnergyConstrainedCompressor(ClassifierMixin, BaseEstimator):
    """Scikit-learn style wrapper around :func:`compress`.

    ``fit(X, y)`` prunes a copy of ``network`` on minibatches drawn from
    ``(X, y)``; ``predict`` and ``score`` then use the compressed network.
    """

    def __init__(self, network=None, energy_model=None, budget=None, alpha=1e-3, beta=None,
                 rho1=100.0, rho2=1e4, epsilon=1e-3, max_iter=3000, lower_bounds=None,
                 lower_bound_fraction=None, kd_weight=0.5, kd_temperature=4.0,
                 finetune_iters=0, finetune_lr=1e-3, batch_size=64, random_state=0):
        self.network = network
        self.energy_model = energy_model
        self.budget = budget
        self.alpha = alpha
        self.beta = beta
        self.rho1 = rho1
        self.rho2 = rho2
        self.epsilon = epsilon
        self.max_iter = max_iter
        self.lower_bounds = lower_bounds
        self.lower_bound_fraction = lower_bound_fraction
        self.kd_weight = kd_weight
        self.kd_temperature = kd_temperature
        self.finetune_iters = finetune_iters
        self.finetune_lr = finetune_lr
        self.batch_size = batch_size
        self.random_state = random_state

    def solver_config(self):
        return SolverConfig(
            budget=self.budget, alpha=self.alpha, beta=self.beta, rho1=self.rho1,
            rho2=self.rho2, epsilon=self.epsilon, max_iter=self.max_iter,
            lower_bounds=self.lower_bounds, lower_bound_fraction=self.lower_bound_fraction,
            kd_weight=self.kd_weight, kd_temperature=self.kd_temperature)

    def fit(self, X, y):
        from .data import BatchStream

        if self.network is None or self.energy_model is None or self.budget is None:
            raise ValueError("network, energy_model and budget are required")
        X = np.asarray(X, dtype=np.float64)
        y = np.asarray(y)
        self.classes_ = np.arange(self.network.n_out)
        stream = BatchStream(X, y, self.batch_size, self.random_state)
        result = compress(self.network, self.energy_model, self.solver_config(), stream)
        net = result.network
        if self.finetune_iters:
            net = finetune(net, mask_from_network(net), stream, self.finetune_iters,
                           lr=self.finetune_lr, teacher=self.network, kd_weight=self.kd_weight,
                           kd_temperature=self.kd_temperature)
        self.network_ = net
        self.s_ = result.s
        self.duals_ = result.duals
        self.trace_ = result.trace
        self.beta_ = result.beta
        self.n_iter_ = result.iterations
        return self

    def predict(self, X):
        check_is_fitted(self, "network_")
        return self.network_.predict(np.asarray(X, dtype=np.float64))

    def energy(self):
        """Estimated energy of the compressed network at its widths bounds."""
        check_is_fitted(self, "network_")
        return self.energy_model.energy(self.s_)
