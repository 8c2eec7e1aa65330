"""Energy oracles, profiling, and the bilinear energy model.

A sparsity vector here always has ``U + 1`` entries: the kept input
channels of each of the ``U`` layers followed by the (fixed) output
dimensionality of the network. The bilinear model predicts

    E(s) = a_0 + sum_j a_j * s_j * s_{j+1}

with every coefficient nonnegative.
"""
from __future__ import annotations

import json
import math
import os
import shlex
import subprocess
import tempfile
import threading
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .network import architecture_from_dicts, architecture_to_dicts, output_spatial

PROFILE_VERSION = 1
MODEL_VERSION = 1
EXCHANGE_VERSION = 1


class OracleError(RuntimeError):
    """Energy measurement failed."""

    def __init__(self, message, s=None):
        super().__init__(message)
        self.s = None if s is None else [float(v) for v in s]


class CommandFailedError(OracleError):
    def __init__(self, message, returncode, s=None):
        super().__init__(message, s)
        self.returncode = returncode


class UnparseableOutputError(OracleError):
    pass


class MeasurementTimeoutError(OracleError):
    pass


# -- pure polynomial -----------------------------------------------------


def bilinear_features(S):
    """Pairwise products ``s_j * s_{j+1}`` for each row of ``S`` (shape ``(n, U+1)``)."""
    S = np.asarray(S, dtype=np.float64)
    return S[..., :-1] * S[..., 1:]


def bilinear_energy(a0, a, s):
    """Evaluate ``a0 + sum_j a[j] * s[j] * s[j+1]``."""
    a = np.asarray(a, dtype=np.float64)
    s = np.asarray(s, dtype=np.float64)
    if s.shape != (a.size + 1,):
        raise ValueError(f"sparsity vector must have {a.size + 1} entries, got shape {s.shape}")
    return float(a0 + np.dot(a, s[:-1] * s[1:]))


def bilinear_grad(a, s):
    """Gradient of the bilinear energy w.r.t. the first ``U`` entries of ``s``.

    ``d/ds_j = a_j s_{j+1} + a_{j-1} s_{j-1}``; the output dimensionality is
    fixed and gets no component.
    """
    a = np.asarray(a, dtype=np.float64)
    s = np.asarray(s, dtype=np.float64)
    if s.shape != (a.size + 1,):
        raise ValueError(f"sparsity vector must have {a.size + 1} entries, got shape {s.shape}")
    g = a * s[1:]
    g[1:] += a[:-1] * s[:-2]
    return g


# -- sampling and measurement --------------------------------------------


def sample_sparsities(widths, n_out, n, seed=0):
    """Draw ``n`` vectors with ``s_u ~ unif{1, ..., c_u}``; last column is ``n_out``."""
    widths = np.asarray(widths, dtype=np.int64)
    if n < 1:
        raise ValueError("need at least one sample")
    if np.any(widths < 1):
        raise ValueError("layer widths must be positive")
    rng = np.random.default_rng(seed)
    S = rng.integers(1, widths + 1, size=(n, widths.size))
    return np.column_stack([S, np.full(n, int(n_out))])


@dataclass(frozen=True)
class EnergySample:
    s: tuple
    energy: float
    trials: int
    stdev: float

    def __post_init__(self):
        if self.trials < 1:
            raise ValueError("trials must be >= 1")
        if not self.energy > 0:
            raise ValueError(f"measured energy must be positive, got {self.energy}")


class EnergyOracle:
    """Anything that can measure the energy of the network built at ``s``."""

    def measure(self, s, trial_seed=0):
        raise NotImplementedError


def _seed_words(seed, trial_seed, s):
    # SeedSequence wants nonnegative integers
    return [int(seed) & 0xFFFFFFFF, int(trial_seed) & 0xFFFFFFFF] + [int(v) for v in s]


class SimulatedDevice(EnergyOracle):
    """Software stand-in for a power-measured device.

    Parameters
    ----------
    intercept : float
        Static energy per inference (joules).
    coefficients : array_like
        Hidden per-layer cost of one (input channel, output channel) pair.
    mode : {"bilinear", "saturating", "overhead"}
        ``"saturating"`` adds ``amplitude * a_j * kappa * (1 - exp(-p_j / kappa))``
        per layer with ``p_j = s_j s_{j+1}``; ``"overhead"`` adds a fixed cost
        per layer.
    noise : float
        Standard deviation of the multiplicative Gaussian noise.
    seed : int
        Combined with the trial seed and ``s`` to seed each measurement.
    """

    def __init__(self, intercept, coefficients, mode="bilinear", noise=0.0, seed=0,
                 saturation_amplitude=0.5, saturation_scale=16.0, layer_overhead=1e-4):
        if mode not in ("bilinear", "saturating", "overhead"):
            raise ValueError(f"unknown simulation mode {mode!r}")
        if noise < 0:
            raise ValueError("noise must be nonnegative")
        self.intercept = float(intercept)
        self.coefficients = np.asarray(coefficients, dtype=np.float64)
        self.mode = mode
        self.noise = float(noise)
        self.seed = int(seed)
        self.saturation_amplitude = float(saturation_amplitude)
        self.saturation_scale = float(saturation_scale)
        self.layer_overhead = float(layer_overhead)

    @classmethod
    def from_architecture(cls, layers, input_shape, joules_per_mac=1e-6,
                          joules_per_weight=2e-5, static_joules=5e-3, **kwargs):
        """Coefficients derived from multiply-accumulate and weight counts per channel pair."""
        sizes = output_spatial(layers, input_shape)
        coef = [joules_per_mac * spec.rh * spec.rw * h * w + joules_per_weight * spec.rh * spec.rw
                for spec, (h, w) in zip(layers, sizes)]
        return cls(static_joules, coef, **kwargs)

    def true_energy(self, s):
        s = np.floor(np.asarray(s, dtype=np.float64))
        base = bilinear_energy(self.intercept, self.coefficients, s)
        if self.mode == "saturating":
            p = s[:-1] * s[1:]
            k = self.saturation_scale
            base += self.saturation_amplitude * float(
                np.sum(self.coefficients * k * (1.0 - np.exp(-p / k))))
        elif self.mode == "overhead":
            base += self.layer_overhead * self.coefficients.size
        return base

    def measure(self, s, trial_seed=0):
        s = np.asarray(s, dtype=np.float64)
        if s.shape != (self.coefficients.size + 1,) or np.any(s < 1):
            raise OracleError(f"invalid sparsity vector {s.tolist()}", s)
        energy = self.true_energy(s)
        if self.noise > 0:
            rng = np.random.default_rng(_seed_words(self.seed, trial_seed, np.floor(s)))
            energy *= 1.0 + self.noise * rng.standard_normal()
        return float(energy)

    def to_config(self):
        return {
            "intercept": self.intercept,
            "coefficients": self.coefficients.tolist(),
            "mode": self.mode,
            "noise": self.noise,
            "seed": self.seed,
            "saturation_amplitude": self.saturation_amplitude,
            "saturation_scale": self.saturation_scale,
            "layer_overhead": self.layer_overhead,
        }

    @classmethod
    def from_config(cls, cfg):
        return cls(**cfg)


def write_exchange(path, layers, input_shape, s, trial_seed=0):
    """Describe one measurement request for an external command (JSON)."""
    doc = {
        "format_version": EXCHANGE_VERSION,
        "architecture": architecture_to_dicts(layers),
        "input_shape": list(input_shape),
        "s": [int(math.floor(v)) for v in s],
        "trial_seed": int(trial_seed),
    }
    with open(path, "w") as fh:
        json.dump(doc, fh, sort_keys=True)
        fh.write("\n")


def read_exchange(path):
    with open(path) as fh:
        doc = json.load(fh)
    if doc.get("format_version") != EXCHANGE_VERSION:
        raise ValueError(f"unsupported exchange format version {doc.get('format_version')}")
    doc["architecture"] = architecture_from_dicts(doc["architecture"])
    return doc


class ExternalCommandDevice(EnergyOracle):
    """Measure energy by running a user command.

    The command gets the path of an exchange file (see :func:`write_exchange`)
    in place of every ``{exchange}`` token, or appended as the last argument
    when no token is present. Its last nonempty stdout line must be a single
    number of joules. Only one measurement runs at a time.
    """

    def __init__(self, command, layers, input_shape, timeout=60.0):
        self.command = shlex.split(command) if isinstance(command, str) else list(command)
        if not self.command:
            raise ValueError("empty measurement command")
        self.layers = list(layers)
        self.input_shape = tuple(input_shape)
        self.timeout = timeout
        self._lock = threading.Lock()

    def _argv(self, exchange):
        if any("{exchange}" in a for a in self.command):
            return [a.replace("{exchange}", exchange) for a in self.command]
        return self.command + [exchange]

    def measure(self, s, trial_seed=0):
        with self._lock, tempfile.TemporaryDirectory() as tmp:
            exchange = os.path.join(tmp, "request.json")
            write_exchange(exchange, self.layers, self.input_shape, s, trial_seed)
            try:
                proc = subprocess.run(self._argv(exchange), capture_output=True, text=True,
                                      timeout=self.timeout)
            except subprocess.TimeoutExpired:
                raise MeasurementTimeoutError(
                    f"measurement command timed out after {self.timeout}s", s) from None
            except OSError as exc:
                raise CommandFailedError(f"cannot run measurement command: {exc}", None, s) from exc
        if proc.returncode != 0:
            raise CommandFailedError(
                f"measurement command exited with status {proc.returncode}: {proc.stderr.strip()}",
                proc.returncode, s)
        lines = [ln.strip() for ln in proc.stdout.splitlines() if ln.strip()]
        try:
            value = float(lines[-1])
        except (IndexError, ValueError):
            raise UnparseableOutputError(
                f"could not parse joules from command output {proc.stdout!r}", s) from None
        if not math.isfinite(value):
            raise UnparseableOutputError(f"command reported non-finite energy {value}", s)
        return value


def collect(oracle, samples, trials=1, start_index=0):
    """Measure every sample ``trials`` times; keep mean and sample stdev.

    Trial seeds depend only on the sample's position, so a profile resumed
    at ``start_index`` reproduces an uninterrupted run.
    """
    if trials < 1:
        raise ValueError("trials must be >= 1")
    out = []
    for k, s in enumerate(samples, start=start_index):
        values = []
        for t in range(trials):
            try:
                values.append(oracle.measure(s, trial_seed=k * trials + t))
            except OracleError as exc:
                if exc.s is None:
                    exc.s = [float(v) for v in s]
                exc.sample_index = k
                raise
        values = np.asarray(values)
        stdev = float(values.std(ddof=1)) if trials > 1 else 0.0
        out.append(EnergySample(tuple(int(v) for v in s), float(values.mean()), trials, stdev))
    return out


def samples_to_arrays(samples):
    S = np.array([smp.s for smp in samples], dtype=np.float64)
    E = np.array([smp.energy for smp in samples], dtype=np.float64)
    return S, E


def split_indices(n, test_fraction=0.2, seed=0):
    """Seeded shuffle split; returns ``(train_idx, test_idx)``."""
    idx = np.random.default_rng(seed).permutation(n)
    n_test = int(round(n * test_fraction))
    return np.sort(idx[n_test:]), np.sort(idx[:n_test])


def relative_test_error(model, S, E):
    """Mean of ``|E_hat(s) - E(s)| / E(s)`` over the given samples."""
    E = np.asarray(E, dtype=np.float64)
    if E.size == 0:
        raise ValueError("empty test set")
    if np.any(E <= 0):
        raise ValueError("measured energies must be positive")
    pred = model.predict(S) if hasattr(model, "predict") else np.asarray(model, dtype=np.float64)
    return float(np.mean(np.abs(pred - E) / E))


# -- the estimator -------------------------------------------------------


class BilinearEnergyModel(RegressorMixin, BaseEstimator):
    """Nonnegative bilinear regression of energy on layer widths.

    Trained with full-batch Adam on features divided by their training mean
    and targets divided by the mean energy; coefficients are clamped at zero
    after every step and mapped back to joules at the end.

    Parameters
    ----------
    n_iter : int
        Adam iterations over the full training set.
    learning_rate, beta1, beta2, eps : float
        Adam hyperparameters (defaults are Adam's usual ones).
    weight_decay : float
        L2 coefficient added to the gradient on the standardized scale.
    log_every : int
        Record train/test relative error every this many iterations.

    Attributes
    ----------
    intercept_ : float
        ``a_0`` in joules.
    coef_ : ndarray
        ``a_1 ... a_U``.
    feature_scale_, target_scale_ :
        Standardization constants used during fitting.
    history_ : list of tuple
        ``(iteration, train_error, test_error)``; ``test_error`` is NaN
        without an ``eval_set``.
    """

    def __init__(self, n_iter=10000, learning_rate=1e-3, beta1=0.9, beta2=0.999, eps=1e-8,
                 weight_decay=0.0, log_every=100):
        self.n_iter = n_iter
        self.learning_rate = learning_rate
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.weight_decay = weight_decay
        self.log_every = log_every

    @classmethod
    def from_coefficients(cls, intercept, coef, **params):
        model = cls(**params)
        model.intercept_ = float(intercept)
        model.coef_ = np.asarray(coef, dtype=np.float64).copy()
        model.n_features_in_ = model.coef_.size + 1
        model.feature_scale_ = np.ones(model.coef_.size)
        model.target_scale_ = 1.0
        model.history_ = []
        return model

    def _validate_S(self, S, reset=False):
        S = check_array(S, dtype=np.float64)
        if S.shape[1] < 2:
            raise ValueError("sparsity vectors need at least one layer plus the output size")
        if not reset and S.shape[1] != self.n_features_in_:
            raise ValueError(f"expected sparsity vectors of length {self.n_features_in_}, got {S.shape[1]}")
        return S

    def fit(self, S, E, eval_set=None):
        S = self._validate_S(S, reset=True)
        E = np.asarray(E, dtype=np.float64).ravel()
        if S.shape[0] != E.size:
            raise ValueError("S and E have different numbers of samples")
        if S.shape[0] < 2:
            raise ValueError("need at least two samples to fit")
        if np.any(E <= 0):
            raise ValueError("measured energies must be positive")
        self.n_features_in_ = S.shape[1]
        F = bilinear_features(S)
        fscale = F.mean(axis=0)
        yscale = E.mean()
        X = np.column_stack([np.ones(len(E)), F / fscale])
        y = E / yscale
        if eval_set is not None:
            S_te, E_te = eval_set
            S_te = self._validate_S(S_te)
            E_te = np.asarray(E_te, dtype=np.float64).ravel()
            X_te = np.column_stack([np.ones(len(E_te)), bilinear_features(S_te) / fscale])
            y_te = E_te / yscale

        theta = np.zeros(X.shape[1])
        theta[0] = 1.0  # a_0 starts at the mean training energy
        m = np.zeros_like(theta)
        v = np.zeros_like(theta)
        b1, b2 = self.beta1, self.beta2
        n = len(y)
        history = []
        for t in range(1, self.n_iter + 1):
            r = X @ theta - y
            g = (2.0 / n) * (X.T @ r)
            if self.weight_decay:
                g = g + self.weight_decay * theta
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            mhat = m / (1 - b1 ** t)
            vhat = v / (1 - b2 ** t)
            theta = np.maximum(theta - self.learning_rate * mhat / (np.sqrt(vhat) + self.eps), 0.0)
            if self.log_every and (t % self.log_every == 0 or t == self.n_iter):
                tr = float(np.mean(np.abs(X @ theta - y) / y))
                te = float(np.mean(np.abs(X_te @ theta - y_te) / y_te)) if eval_set is not None else float("nan")
                history.append((t, tr, te))

        self.intercept_ = float(theta[0] * yscale)
        self.coef_ = theta[1:] * yscale / fscale
        self.feature_scale_ = fscale
        self.target_scale_ = float(yscale)
        self.history_ = history
        return self

    def predict(self, S):
        check_is_fitted(self, "coef_")
        S = self._validate_S(S)
        return self.intercept_ + bilinear_features(S) @ self.coef_

    def energy(self, s):
        """Estimated energy of a single sparsity vector."""
        check_is_fitted(self, "coef_")
        return bilinear_energy(self.intercept_, self.coef_, s)

    def grad(self, s):
        """Gradient of :meth:`energy` w.r.t. the per-layer entries of ``s``."""
        check_is_fitted(self, "coef_")
        return bilinear_grad(self.coef_, s)

    @property
    def n_layers(self):
        return self.coef_.size


def fit_energy_model(samples, test_fraction=0.2, seed=0, **params):
    """Split ``samples`` and fit; returns ``(model, train_idx, test_idx)``."""
    if len(samples) < 2:
        raise ValueError("need at least two samples to fit")
    S, E = samples_to_arrays(samples)
    if np.all(S == S[0]):
        raise ValueError("degenerate profile: every sample has the same sparsity vector")
    tr, te = split_indices(len(E), test_fraction, seed)
    eval_set = (S[te], E[te]) if te.size else None
    model = BilinearEnergyModel(**params).fit(S[tr], E[tr], eval_set=eval_set)
    return model, tr, te


# -- files ---------------------------------------------------------------


def save_profile(path, samples, layer_names, metadata=None):
    """Tab-separated profile table.

    Comment lines (``#``) carry the format version and a JSON metadata
    object; then a header row ``<layer names...> output energy trials stdev``;
    then one row per sample.
    """
    with open(path, "w") as fh:
        write_profile_head(fh, layer_names, metadata)
        append_profile_rows(fh, samples)


def write_profile_head(fh, layer_names, metadata):
    fh.write(f"# ecc-profile v{PROFILE_VERSION}\n")
    fh.write("# metadata " + json.dumps(metadata or {}, sort_keys=True) + "\n")
    fh.write("\t".join(list(layer_names) + ["output", "energy", "trials", "stdev"]) + "\n")


def append_profile_rows(fh, samples):
    for smp in samples:
        cells = [str(int(v)) for v in smp.s] + [repr(smp.energy), str(smp.trials), repr(smp.stdev)]
        fh.write("\t".join(cells) + "\n")
    fh.flush()


def load_profile(path):
    """Return ``(samples, layer_names, metadata)``."""
    metadata = {}
    header = None
    samples = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            if line.startswith("# metadata "):
                metadata = json.loads(line[len("# metadata "):])
                continue
            if line.startswith("#"):
                if line.startswith("# ecc-profile") and line.split()[-1] != f"v{PROFILE_VERSION}":
                    raise ValueError(f"{path}: unsupported profile version")
                continue
            cells = line.split("\t")
            if header is None:
                header = cells
                continue
            if len(cells) != len(header):
                raise ValueError(f"{path}:{lineno}: expected {len(header)} columns, got {len(cells)}")
            k = len(header) - 3
            samples.append(EnergySample(tuple(int(v) for v in cells[:k]), float(cells[k]),
                                        int(cells[k + 1]), float(cells[k + 2])))
    if header is None:
        raise ValueError(f"{path}: missing header row")
    return samples, header[:-4], metadata


def save_energy_model(path, model, metadata=None):
    doc = {
        "format_version": MODEL_VERSION,
        "n_layers": int(model.coef_.size),
        "intercept": float(model.intercept_),
        "coefficients": [float(v) for v in model.coef_],
        "feature_scale": [float(v) for v in model.feature_scale_],
        "target_scale": float(model.target_scale_),
        "params": model.get_params(),
        "metadata": metadata or {},
    }
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_energy_model(path):
    """Return ``(model, metadata)``."""
    with open(path) as fh:
        doc = json.load(fh)
    if doc.get("format_version") != MODEL_VERSION:
        raise ValueError(f"unsupported energy model version {doc.get('format_version')}")
    model = BilinearEnergyModel.from_coefficients(doc["intercept"], doc["coefficients"], **doc["params"])
    if model.coef_.size != doc["n_layers"]:
        raise ValueError("energy model file is inconsistent")
    model.feature_scale_ = np.asarray(doc["feature_scale"], dtype=np.float64)
    model.target_scale_ = float(doc["target_scale"])
    return model, doc.get("metadata", {})
