"""Datasets: the built-in synthetic toy task and two on-disk formats.

Columnar text
    One sample per line: integer label, then the flattened features,
    separated by whitespace or commas. ``#`` starts a comment line.

Raster binary
    ``b"ECCR"``, then five little-endian uint32 values ``n, c, h, w, n_classes``,
    then ``n`` uint8 labels, then ``n*c*h*w`` uint8 pixels in row-major
    ``(n, c, h, w)`` order. Pixels are scaled to ``[0, 1]`` on load.
"""
import numpy as np

from .network import LayerSpec

RASTER_MAGIC = b"ECCR"


def toy_architecture(n_classes=10, in_channels=1):
    """Two convolutions followed by two fully-connected layers."""
    return [
        LayerSpec("conv", 16, in_channels, 3, 3, "relu", stride=1, padding=1, name="conv1"),
        LayerSpec("conv", 32, 16, 3, 3, "relu", stride=2, padding=1, name="conv2"),
        LayerSpec("fc", 32, 32, activation="relu", name="fc1"),
        LayerSpec("fc", n_classes, 32, activation="none", name="fc2"),
    ]


TOY_INPUT_SHAPE = (1, 8, 8)


def make_toy_dataset(n, seed=0, n_classes=10, size=8, noise=1.25):
    """Grayscale oriented gratings with random phase plus Gaussian noise.

    Class ``k`` has orientation ``pi * (k // 2) / ceil(n_classes / 2)`` and
    one of two spatial frequencies, so a convolution followed by spatial
    averaging can tell the classes apart. ``seed`` only drives the samples.
    """
    n_angles = -(-n_classes // 2)
    angles = np.pi * (np.arange(n_classes) // 2) / n_angles
    freqs = np.where(np.arange(n_classes) % 2 == 0, 0.15, 0.3)

    rng = np.random.default_rng(seed)
    labels = rng.integers(0, n_classes, size=n)
    phase = rng.uniform(0.0, 2 * np.pi, size=n)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    proj = (xx[None] * np.cos(angles[labels])[:, None, None]
            + yy[None] * np.sin(angles[labels])[:, None, None])
    wave = np.cos(2 * np.pi * freqs[labels][:, None, None] * proj + phase[:, None, None])
    X = wave[:, None] + noise * rng.standard_normal((n, 1, size, size))
    return X, labels


def train_val_split(X, y, val_fraction=0.2, seed=0):
    idx = np.random.default_rng(seed).permutation(len(y))
    n_val = int(round(len(y) * val_fraction))
    val, tr = idx[:n_val], idx[n_val:]
    return X[tr], y[tr], X[val], y[val]


class BatchStream:
    """Endless seeded minibatches; reshuffles at every epoch boundary."""

    def __init__(self, X, y, batch_size=64, seed=0):
        self.X = np.asarray(X, dtype=np.float64)
        self.y = np.asarray(y)
        if len(self.X) != len(self.y) or len(self.y) == 0:
            raise ValueError("X and y must be nonempty and of equal length")
        self.batch_size = min(int(batch_size), len(self.y))
        self._rng = np.random.default_rng(seed)
        self._order = self._rng.permutation(len(self.y))
        self._pos = 0

    def __iter__(self):
        return self

    def __next__(self):
        if self._pos + self.batch_size > len(self._order):
            self._order = self._rng.permutation(len(self.y))
            self._pos = 0
        idx = self._order[self._pos : self._pos + self.batch_size]
        self._pos += self.batch_size
        return self.X[idx], self.y[idx]


def accuracy(net, X, y, batch_size=512):
    correct = 0
    for i in range(0, len(y), batch_size):
        correct += int(np.sum(net.predict(X[i : i + batch_size]) == y[i : i + batch_size]))
    return correct / len(y)


# -- columnar text -------------------------------------------------------


def save_columnar(path, X, y):
    X = np.asarray(X, dtype=np.float64).reshape(len(y), -1)
    with open(path, "w") as fh:
        for label, row in zip(y, X):
            fh.write(" ".join([str(int(label))] + [repr(float(v)) for v in row]) + "\n")


def load_columnar(path, input_shape=None):
    labels, rows = [], []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.replace(",", " ").split()
            try:
                labels.append(int(parts[0]))
                rows.append([float(v) for v in parts[1:]])
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from None
    if not rows:
        raise ValueError(f"{path} holds no samples")
    widths = {len(r) for r in rows}
    if len(widths) != 1:
        raise ValueError(f"{path}: rows have differing feature counts {sorted(widths)}")
    X = np.array(rows, dtype=np.float64)
    if input_shape is not None:
        X = X.reshape((len(rows),) + tuple(input_shape))
    return X, np.array(labels, dtype=np.int64)


# -- raster binary -------------------------------------------------------


def save_raster(path, X, y, n_classes=None):
    """Quantise ``X`` (values in ``[0, 1]``) to bytes and write a raster file."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 4:
        raise ValueError("raster data must be (n, c, h, w)")
    y = np.asarray(y)
    if n_classes is None:
        n_classes = int(y.max()) + 1
    pixels = np.clip(np.rint(X * 255.0), 0, 255).astype(np.uint8)
    n, c, h, w = X.shape
    with open(path, "wb") as fh:
        fh.write(RASTER_MAGIC)
        fh.write(np.array([n, c, h, w, n_classes], dtype="<u4").tobytes())
        fh.write(y.astype(np.uint8).tobytes())
        fh.write(pixels.tobytes(order="C"))


def load_raster(path):
    with open(path, "rb") as fh:
        if fh.read(4) != RASTER_MAGIC:
            raise ValueError(f"{path} is not a raster file")
        n, c, h, w, n_classes = (int(v) for v in np.frombuffer(fh.read(20), dtype="<u4"))
        labels = np.frombuffer(fh.read(n), dtype=np.uint8).astype(np.int64)
        raw = fh.read(n * c * h * w)
        if len(labels) != n or len(raw) != n * c * h * w:
            raise ValueError(f"{path} is truncated")
    if labels.size and labels.max() >= n_classes:
        raise ValueError(f"{path}: label {labels.max()} >= n_classes {n_classes}")
    X = np.frombuffer(raw, dtype=np.uint8).reshape(n, c, h, w).astype(np.float64) / 255.0
    return X, labels
