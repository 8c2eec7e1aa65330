"""A small channel-structured network with hand-written backprop.

Layers are 2-D convolutions or fully-connected maps, each optionally
followed by a ReLU. Every weight is a ``(d, c, rh, rw)`` tensor; a
fully-connected layer uses ``rh = rw = 1``. When a fully-connected layer
receives a spatial activation it first averages over the spatial axes, so
its input channels are exactly the previous layer's output channels.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, replace

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import as_tensor4, layer_sparsity, nonzero_channels

CHECKPOINT_MAGIC = b"ECC-CHECKPOINT\n"
CHECKPOINT_VERSION = 1


class NonFiniteError(FloatingPointError):
    """A forward or backward quantity became NaN or infinite."""

    def __init__(self, message, layer=None):
        super().__init__(message)
        self.layer = layer


@dataclass(frozen=True)
class LayerSpec:
    kind: str  # "conv" or "fc"
    d: int
    c: int
    rh: int = 1
    rw: int = 1
    activation: str = "relu"
    stride: int = 1
    padding: int = 0
    name: str = ""

    def __post_init__(self):
        if self.kind not in ("conv", "fc"):
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.activation not in ("relu", "none"):
            raise ValueError(f"unknown activation {self.activation!r}")
        if min(self.d, self.c, self.rh, self.rw, self.stride) < 1 or self.padding < 0:
            raise ValueError(f"invalid layer dimensions: {self}")
        if self.kind == "fc" and (self.rh != 1 or self.rw != 1):
            raise ValueError("fully-connected layers must have rh = rw = 1")

    @property
    def shape(self):
        return (self.d, self.c, self.rh, self.rw)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, data):
        return cls(**data)


def check_architecture(layers, input_shape=None):
    """Raise ``ValueError`` unless consecutive layers are dimension-compatible."""
    layers = list(layers)
    if not layers:
        raise ValueError("architecture has no layers")
    for j in range(len(layers) - 1):
        a, b = layers[j], layers[j + 1]
        if a.d != b.c:
            raise ValueError(
                f"layer {j} has {a.d} output channels but layer {j + 1} expects {b.c} inputs"
            )
        if a.kind == "fc" and b.kind == "conv":
            raise ValueError("a convolution cannot follow a fully-connected layer")
    if input_shape is not None:
        input_shape = tuple(input_shape)
        first = layers[0]
        if input_shape[0] != first.c:
            raise ValueError(f"input has {input_shape[0]} channels, first layer expects {first.c}")
        if first.kind == "conv" and len(input_shape) != 3:
            raise ValueError("a convolutional first layer needs a (c, h, w) input shape")
    return layers


def output_spatial(layers, input_shape):
    """Spatial output size ``(h, w)`` of every layer (``(1, 1)`` for fc layers)."""
    sizes = []
    if len(input_shape) == 3:
        h, w = input_shape[1:]
    else:
        h = w = 1
    for spec in layers:
        if spec.kind == "conv":
            h = (h + 2 * spec.padding - spec.rh) // spec.stride + 1
            w = (w + 2 * spec.padding - spec.rw) // spec.stride + 1
            if h < 1 or w < 1:
                raise ValueError(f"layer {spec.name or spec} produces an empty feature map")
        else:
            h = w = 1
        sizes.append((h, w))
    return sizes


def _he_init(spec, rng):
    fan_in = spec.c * spec.rh * spec.rw
    return rng.standard_normal(spec.shape) * np.sqrt(2.0 / fan_in)


class Network:
    """Ordered layers with their weights and biases.

    Parameters
    ----------
    layers : list of LayerSpec
    weights : list of ndarray
        One ``(d, c, rh, rw)`` tensor per layer.
    biases : list of ndarray
        One length-``d`` vector per layer.
    input_shape : tuple
        ``(c, h, w)`` for image inputs or ``(c,)`` for vectors.
    """

    def __init__(self, layers, weights, biases, input_shape):
        self.layers = check_architecture(layers, input_shape)
        self.input_shape = tuple(int(v) for v in input_shape)
        if len(weights) != len(self.layers) or len(biases) != len(self.layers):
            raise ValueError("need exactly one weight tensor and bias per layer")
        self.weights = []
        self.biases = []
        for spec, w, b in zip(self.layers, weights, biases):
            w = as_tensor4(w)
            b = np.ascontiguousarray(b, dtype=np.float64)
            if w.shape != spec.shape:
                raise ValueError(f"weight shape {w.shape} does not match layer {spec.shape}")
            if b.shape != (spec.d,):
                raise ValueError(f"bias shape {b.shape} does not match d={spec.d}")
            self.weights.append(w)
            self.biases.append(b)
        output_spatial(self.layers, self.input_shape)

    @classmethod
    def init(cls, layers, input_shape, seed=0):
        """He-initialised network with zero biases, deterministic in ``seed``."""
        layers = check_architecture(layers, input_shape)
        rng = np.random.default_rng(seed)
        weights = [_he_init(spec, rng) for spec in layers]
        biases = [np.zeros(spec.d) for spec in layers]
        return cls(layers, weights, biases, input_shape)

    @property
    def n_out(self):
        return self.layers[-1].d

    @property
    def widths(self):
        """Full input-channel counts ``c`` of every layer."""
        return np.array([spec.c for spec in self.layers])

    def sparsity(self, zero_tol=0.0):
        """Per-layer count of nonzero input channels."""
        return np.array([layer_sparsity(w, zero_tol) for w in self.weights])

    def copy(self):
        return Network(
            self.layers,
            [w.copy() for w in self.weights],
            [b.copy() for b in self.biases],
            self.input_shape,
        )

    def forward(self, X):
        return forward(self, X)

    def predict(self, X):
        return np.argmax(forward(self, X), axis=1)

    def __repr__(self):
        body = ", ".join(f"{s.kind}({s.c}->{s.d})" for s in self.layers)
        return f"Network([{body}], input_shape={self.input_shape})"


def _check_batch(net, X):
    X = np.asarray(X, dtype=np.float64)
    if X.shape[1:] != net.input_shape:
        raise ValueError(f"batch shape {X.shape[1:]} does not match input shape {net.input_shape}")
    return X


def _conv_windows(x, spec):
    p = spec.padding
    if p:
        x = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    win = sliding_window_view(x, (spec.rh, spec.rw), axis=(2, 3))
    return win[:, :, :: spec.stride, :: spec.stride]


def _layer_forward(spec, w, b, x):
    """Pre-activation output of one layer plus whatever backward needs."""
    if spec.kind == "conv":
        win = _conv_windows(x, spec)
        z = np.einsum("nchwij,dcij->ndhw", win, w, optimize=True)
        z += b[None, :, None, None]
        return z, (x.shape, win)
    pooled = None
    if x.ndim == 4:
        pooled = x.shape
        x = x.mean(axis=(2, 3))
    z = x @ w[:, :, 0, 0].T + b
    return z, (pooled, x)


def _run_forward(net, X):
    acts = []
    x = X
    for u, (spec, w, b) in enumerate(zip(net.layers, net.weights, net.biases)):
        z, cache = _layer_forward(spec, w, b, x)
        out = np.maximum(z, 0.0) if spec.activation == "relu" else z
        if not np.all(np.isfinite(out)):
            raise NonFiniteError(f"non-finite activation in layer {u}", layer=u)
        acts.append((z, cache))
        x = out
    return x, acts


def forward(net, X):
    """Logits of shape ``(batch, n_out)``."""
    X = _check_batch(net, X)
    logits, _ = _run_forward(net, X)
    return logits


def log_softmax(z):
    z = z - z.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


@dataclass(frozen=True)
class KDConfig:
    """Distillation term: ``weight * T**2 * KL(teacher_T || student_T)``."""

    teacher_logits: np.ndarray
    weight: float = 0.5
    temperature: float = 4.0


def _loss_and_dlogits(logits, labels, kd):
    n, k = logits.shape
    labels = np.asarray(labels)
    if labels.shape != (n,):
        raise ValueError(f"expected {n} labels, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"labels must lie in [0, {k})")
    labels = labels.astype(np.intp)
    logp = log_softmax(logits)
    loss = -logp[np.arange(n), labels].mean()
    dz = np.exp(logp)
    dz[np.arange(n), labels] -= 1.0
    dz /= n
    if kd is not None and kd.weight != 0.0:
        teacher = np.asarray(kd.teacher_logits, dtype=np.float64)
        if teacher.shape != logits.shape:
            raise ValueError(f"teacher logits shape {teacher.shape} != {logits.shape}")
        T = float(kd.temperature)
        log_ps = log_softmax(logits / T)
        log_pt = log_softmax(teacher / T)
        pt = np.exp(log_pt)
        kl = np.sum(pt * (log_pt - log_ps), axis=1).mean()
        loss += kd.weight * T * T * kl
        dz += kd.weight * T * (np.exp(log_ps) - pt) / n
    return float(loss), dz


def loss_and_grad(net, X, labels, kd=None, mask=None):
    """Loss and exact gradients for every layer.

    The loss is the mean cross-entropy plus, when ``kd`` is given, the
    temperature-softened distillation term from :class:`KDConfig`.

    Returns
    -------
    loss : float
    grads : list of (ndarray, ndarray)
        ``(dW, db)`` per layer. When ``mask`` is given, the gradient of every
        masked-out input channel is exactly zero.
    """
    X = _check_batch(net, X)
    logits, acts = _run_forward(net, X)
    loss, g = _loss_and_dlogits(logits, labels, kd)
    if not np.isfinite(loss):
        raise NonFiniteError("non-finite loss", layer=len(net.layers) - 1)
    grads = [None] * len(net.layers)
    for u in range(len(net.layers) - 1, -1, -1):
        spec, w = net.layers[u], net.weights[u]
        z, cache = acts[u]
        if spec.activation == "relu":
            g = g * (z > 0)
        db = g.sum(axis=tuple(i for i in range(g.ndim) if i != 1))
        if spec.kind == "conv":
            in_shape, win = cache
            dW = np.einsum("ndhw,nchwij->dcij", g, win, optimize=True)
            if u > 0:
                g = _conv_input_grad(spec, w, g, in_shape)
        else:
            pooled, x = cache
            dW = (g.T @ x)[:, :, None, None]
            if u > 0:
                g = g @ w[:, :, 0, 0]
                if pooled is not None:
                    h, wd = pooled[2:]
                    g = np.broadcast_to(g[:, :, None, None] / (h * wd), pooled).copy()
        if not (np.all(np.isfinite(dW)) and np.all(np.isfinite(db))):
            raise NonFiniteError(f"non-finite gradient in layer {u}", layer=u)
        if mask is not None:
            dW = dW * np.asarray(mask[u], dtype=np.float64)[None, :, None, None]
        grads[u] = (dW, db)
    return loss, grads


def _conv_input_grad(spec, w, g, in_shape):
    n, c, h, wd = in_shape
    p, st = spec.padding, spec.stride
    dxp = np.zeros((n, c, h + 2 * p, wd + 2 * p))
    ho, wo = g.shape[2:]
    for i in range(spec.rh):
        for j in range(spec.rw):
            dxp[:, :, i : i + st * ho : st, j : j + st * wo : st] += np.einsum(
                "ndhw,dc->nchw", g, w[:, :, i, j], optimize=True
            )
    return dxp[:, :, p : p + h, p : p + wd]


# -- channel masks -------------------------------------------------------


def mask_from_network(net, zero_tol=0.0):
    """Mask marking the currently nonzero input channels of every layer."""
    return [nonzero_channels(w, zero_tol) for w in net.weights]


def full_mask(net):
    return [np.ones(spec.c, dtype=bool) for spec in net.layers]


def check_mask(net, mask):
    if len(mask) != len(net.layers):
        raise ValueError(f"mask has {len(mask)} layers, network has {len(net.layers)}")
    out = []
    for spec, m in zip(net.layers, mask):
        m = np.asarray(m, dtype=bool)
        if m.shape != (spec.c,):
            raise ValueError(f"mask of shape {m.shape} does not match c={spec.c}")
        out.append(m)
    return out


def apply_mask(net, mask):
    """Copy of ``net`` with every masked-out input channel set to zero."""
    mask = check_mask(net, mask)
    weights = [w * m[None, :, None, None] for w, m in zip(net.weights, mask)]
    return Network(net.layers, weights, [b.copy() for b in net.biases], net.input_shape)


# -- pruned instantiation ------------------------------------------------


def pruned_architecture(layers, s):
    """Layer specs keeping ``floor(s[u])`` input channels in every layer.

    Keeping ``k`` inputs of layer ``u + 1`` removes the matching output
    channels of layer ``u``; the last layer keeps its full output width.
    """
    layers = list(layers)
    s = np.asarray(s, dtype=np.float64)
    if s.shape != (len(layers),):
        raise ValueError(f"expected {len(layers)} sparsity values, got shape {s.shape}")
    keep = np.floor(s).astype(int)
    widths = np.array([spec.c for spec in layers])
    if np.any(s < 1) or np.any(keep > widths):
        raise ValueError(f"sparsity {s.tolist()} outside [1, c] for widths {widths.tolist()}")
    out = []
    for u, spec in enumerate(layers):
        d = keep[u + 1] if u + 1 < len(layers) else spec.d
        out.append(replace(spec, c=int(keep[u]), d=int(d)))
    return out


def instantiate_pruned(layers, s, input_shape, seed=0):
    """Freshly initialised network whose layer ``u`` has ``floor(s[u])`` input channels.

    Channels are removed structurally, so the result is a genuinely smaller
    computation. The surviving channels are the lowest-indexed ones.
    """
    arch = pruned_architecture(layers, s)
    shape = (int(arch[0].c),) + tuple(input_shape)[1:]
    return Network.init(arch, shape, seed)


# -- checkpoints ---------------------------------------------------------


def save_checkpoint(net, path, metadata=None):
    """Write ``net`` as a JSON header followed by little-endian float64 arrays.

    Layout::

        ECC-CHECKPOINT\\n
        <header JSON on one line>\\n
        for each layer: weights (d*c*rh*rw doubles, (d, c, rh, rw) row-major)
                        then bias (d doubles)
    """
    header = {
        "format_version": CHECKPOINT_VERSION,
        "input_shape": list(net.input_shape),
        "layers": [spec.to_dict() for spec in net.layers],
        "n_out": net.n_out,
        "metadata": metadata or {},
    }
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(json.dumps(header, sort_keys=True).encode("utf-8") + b"\n")
        for w, b in zip(net.weights, net.biases):
            fh.write(w.astype("<f8").tobytes(order="C"))
            fh.write(b.astype("<f8").tobytes(order="C"))


def load_checkpoint(path):
    """Inverse of :func:`save_checkpoint`; returns ``(network, metadata)``."""
    with open(path, "rb") as fh:
        magic = fh.readline()
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"{path} is not a checkpoint file")
        header = json.loads(fh.readline().decode("utf-8"))
        if header.get("format_version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {header.get('format_version')}")
        layers = [LayerSpec.from_dict(d) for d in header["layers"]]
        weights, biases = [], []
        for spec in layers:
            n = spec.d * spec.c * spec.rh * spec.rw
            weights.append(_read_doubles(fh, n).reshape(spec.shape))
            biases.append(_read_doubles(fh, spec.d))
        if fh.read(1):
            raise ValueError(f"{path} has trailing bytes")
    net = Network(layers, weights, biases, header["input_shape"])
    if net.n_out != header["n_out"]:
        raise ValueError("checkpoint n_out does not match its last layer")
    return net, header.get("metadata", {})


def _read_doubles(fh, n):
    raw = fh.read(8 * n)
    if len(raw) != 8 * n:
        raise ValueError("checkpoint is truncated")
    return np.frombuffer(raw, dtype="<f8").astype(np.float64)


def architecture_to_dicts(layers):
    return [spec.to_dict() for spec in layers]


def architecture_from_dicts(items):
    return [LayerSpec.from_dict(dict(d)) for d in items]


__all__ = [
    "KDConfig",
    "LayerSpec",
    "Network",
    "NonFiniteError",
    "apply_mask",
    "check_architecture",
    "check_mask",
    "forward",
    "full_mask",
    "instantiate_pruned",
    "load_checkpoint",
    "loss_and_grad",
    "mask_from_network",
    "output_spatial",
    "pruned_architecture",
    "save_checkpoint",
]
