"""Datasets: synthetic generators and loaders for MNIST / CIFAR-10 files."""

import gzip
import itertools
import math
import os
import struct
from dataclasses import dataclass

import numpy as np

from ._atomic import atomic_write_text
from .errors import DimensionError, DomainError, FormatError

__all__ = [
    "Dataset",
    "PeriodicTarget",
    "FIG2_TARGETS",
    "gen_spirals",
    "gen_periodic",
    "gen_determinant",
    "permanent",
    "load_mnist",
    "load_cifar10",
    "dataset_to_csv",
    "dataset_from_csv",
]


@dataclass
class Dataset:
    """Examples with targets.

    ``inputs`` is ``(N, p)``. For ``kind == "classification"`` ``targets`` is
    an integer vector of class indices below ``n_classes``; for
    ``"regression"`` it is ``(N, h)``.
    """

    inputs: np.ndarray
    targets: np.ndarray
    kind: str
    n_classes: int = 0

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        if self.inputs.ndim != 2 or self.inputs.shape[0] == 0:
            raise DimensionError(f"inputs must be a non-empty (N, p) array, got {self.inputs.shape}")
        N = self.inputs.shape[0]
        if self.kind == "classification":
            self.targets = np.asarray(self.targets, dtype=np.int64)
            if self.targets.shape != (N,):
                raise DimensionError(f"labels must have shape ({N},), got {self.targets.shape}")
            if not self.n_classes:
                self.n_classes = int(self.targets.max()) + 1
            if self.targets.min() < 0 or self.targets.max() >= self.n_classes:
                raise DomainError("labels out of range")
        elif self.kind == "regression":
            t = np.asarray(self.targets, dtype=np.float64)
            if t.ndim == 1:
                t = t[:, None]
            if t.ndim != 2 or t.shape[0] != N:
                raise DimensionError(f"targets must have shape ({N}, h), got {t.shape}")
            self.targets = t
        else:
            raise ValueError(f"unknown dataset kind {self.kind!r}")

    def __len__(self):
        return self.inputs.shape[0]

    @property
    def n_features(self):
        return self.inputs.shape[1]

    @property
    def n_outputs(self):
        return self.n_classes if self.kind == "classification" else self.targets.shape[1]

    def subset(self, idx):
        return Dataset(self.inputs[idx], self.targets[idx], self.kind, self.n_classes)


# -- synthetic tasks -------------------------------------------------------

def gen_spirals(n_points=2000, noise=0.5, seed=0):
    """Two interleaved spiral arms in roughly ``[-10, 10]^2``.

    Arm ``i`` samples ``theta`` uniformly in ``[pi/2, 7pi/2]`` and places the
    point at radius ``10 theta / (7pi/2)`` and angle ``theta + i pi``. Each
    coordinate gets uniform noise in ``[-noise, noise]``.
    """
    if n_points % 2:
        raise ValueError("n_points must be even")
    rng = np.random.default_rng(seed)
    half = n_points // 2
    lo, hi = 0.5 * np.pi, 3.5 * np.pi
    xs, ys = [], []
    for arm in (0, 1):
        theta = rng.uniform(lo, hi, size=half)
        r = 10.0 * theta / hi
        pts = np.stack([r * np.cos(theta + arm * np.pi), r * np.sin(theta + arm * np.pi)], axis=1)
        pts += rng.uniform(-noise, noise, size=pts.shape)
        xs.append(pts)
        ys.append(np.full(half, arm))
    return Dataset(np.concatenate(xs), np.concatenate(ys), "classification", 2)


@dataclass(frozen=True)
class PeriodicTarget:
    """``A1 cos(2 pi k1 x + psi1) + A2 cos(2 pi k2 x + psi2)``."""

    k1: int
    k2: int
    A1: float
    A2: float
    psi1: float
    psi2: float

    def __call__(self, x):
        x = np.asarray(x, dtype=np.float64)
        return (self.A1 * np.cos(2 * np.pi * self.k1 * x + self.psi1)
                + self.A2 * np.cos(2 * np.pi * self.k2 * x + self.psi2))

    def describe(self):
        return (f"{self.A1:.2f} cos({2 * self.k1}πx+{self.psi1:.2f}) + "
                f"{self.A2:.2f} cos({2 * self.k2}πx+{self.psi2:.2f})")

    def power(self):
        """Mean square of the signal over a full period."""
        return 0.5 * (self.A1 ** 2 + self.A2 ** 2) if self.k1 != self.k2 else float("nan")


# The three functions plotted in the periodic-extrapolation figure.
FIG2_TARGETS = (
    PeriodicTarget(3, 4, 1.42, 6.29, 0.84, 0.76),
    PeriodicTarget(4, 7, 1.55, 5.07, 0.26, 0.81),
    PeriodicTarget(6, 8, 1.60, 6.92, 0.59, 0.44),
)


def random_periodic_target(rng):
    k1, k2 = sorted(rng.choice(np.arange(3, 10), size=2, replace=False).tolist())
    return PeriodicTarget(
        int(k1), int(k2),
        float(rng.uniform(1.0, 2.0)), float(rng.uniform(5.0, 10.0)),
        float(rng.uniform(0.0, np.pi / 3)), float(rng.uniform(0.0, np.pi / 3)),
    )


def _grid(a, b, spacing):
    steps = int(round((b - a) / spacing))
    return np.linspace(a, b, steps + 1)


def gen_periodic(seed=0, spacing=1e-3, noise=1e-4, target=None):
    """Sum-of-two-cosines regression task.

    Train on a grid over ``[0, 2]`` with Gaussian target noise, test on a
    noise-free grid over ``[2, 6]``. When ``target`` is None a random one is
    drawn from ``seed``. Returns ``(train, test, target)``.
    """
    rng = np.random.default_rng(seed)
    if target is None:
        target = random_periodic_target(rng)
    x_train = _grid(0.0, 2.0, spacing)
    x_test = _grid(2.0, 6.0, spacing)
    y_train = target(x_train) + rng.normal(0.0, noise, size=x_train.shape)
    train = Dataset(x_train[:, None], y_train, "regression")
    test = Dataset(x_test[:, None], target(x_test), "regression")
    return train, test, target


def permanent(A):
    """Permanent of each square matrix in ``A`` (..., k, k) by summing over
    all permutations. Fine for k <= 6."""
    A = np.asarray(A, dtype=np.float64)
    k = A.shape[-1]
    total = np.zeros(A.shape[:-2])
    rows = np.arange(k)
    for perm in itertools.permutations(range(k)):
        total = total + np.prod(A[..., rows, list(perm)], axis=-1)
    return total


def gen_determinant(matrix_size, n_examples, seed=0, mode="determinant"):
    """Random ``k x k`` matrices with entries uniform in ``[-1, 1]``.

    Inputs are the row-major flattened matrices (``p = k^2``); the target is
    the determinant (LU) or, with ``mode="permanent"``, the permanent.
    """
    k = int(matrix_size)
    if not 2 <= k <= 6:
        raise ValueError("matrix_size must be between 2 and 6")
    if n_examples < 1:
        raise ValueError("n_examples must be positive")
    rng = np.random.default_rng(seed)
    mats = rng.uniform(-1.0, 1.0, size=(n_examples, k, k))
    if mode == "determinant":
        y = np.linalg.det(mats)
    elif mode == "permanent":
        y = permanent(mats)
    else:
        raise ValueError(f"unknown mode {mode!r}")
    return Dataset(mats.reshape(n_examples, k * k), y, "regression")


# -- image datasets --------------------------------------------------------

def _read_bytes(path):
    opener = gzip.open if str(path).endswith(".gz") else open
    with opener(path, "rb") as fh:
        return fh.read()


def _find(directory, stem):
    for name in (stem, stem + ".gz", stem.replace("-idx", ".idx"), stem.replace("-idx", ".idx") + ".gz"):
        candidate = os.path.join(directory, name)
        if os.path.exists(candidate):
            return candidate
    raise FileNotFoundError(os.path.join(directory, stem))


def read_idx(path, expected_magic):
    """Parse one IDX file and return a uint8 array with the header's shape."""
    raw = _read_bytes(path)
    if len(raw) < 4:
        raise FormatError("file too short for IDX header", path, 0)
    magic = struct.unpack(">I", raw[:4])[0]
    if magic != expected_magic:
        raise FormatError(f"bad magic 0x{magic:08x}, expected 0x{expected_magic:08x}", path, 0)
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise FormatError("truncated IDX header", path, len(raw))
    shape = struct.unpack(">" + "I" * ndim, raw[4:header])
    count = math.prod(shape)
    if len(raw) - header < count:
        raise FormatError(f"truncated data: need {count} bytes after header, have {len(raw) - header}",
                          path, len(raw))
    if len(raw) - header > count:
        raise FormatError("trailing bytes after IDX data", path, header + count)
    return np.frombuffer(raw, dtype=np.uint8, count=count, offset=header).reshape(shape)


def _mnist_split(directory, prefix):
    images = read_idx(_find(directory, f"{prefix}-images-idx3-ubyte"), 0x00000803)
    labels = read_idx(_find(directory, f"{prefix}-labels-idx1-ubyte"), 0x00000801)
    if images.shape[0] != labels.shape[0]:
        raise FormatError(f"{images.shape[0]} images but {labels.shape[0]} labels", directory, 4)
    x = images.reshape(images.shape[0], -1).astype(np.float64) / 255.0
    return Dataset(x, labels.astype(np.int64), "classification", 10)


def load_mnist(path):
    """Read MNIST IDX files (optionally gzipped) from ``path``.

    Returns ``(train, test)`` with pixels scaled to ``[0, 1]`` and ``p = 784``.
    """
    return _mnist_split(path, "train"), _mnist_split(path, "t10k")


CIFAR_RECORD = 1 + 3072


def read_cifar_batch(path):
    raw = _read_bytes(path)
    if len(raw) == 0 or len(raw) % CIFAR_RECORD:
        whole = len(raw) - len(raw) % CIFAR_RECORD
        raise FormatError(f"size {len(raw)} is not a multiple of {CIFAR_RECORD}", path, whole)
    rec = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    labels = rec[:, 0].astype(np.int64)
    bad = np.nonzero(labels > 9)[0]
    if bad.size:
        raise FormatError(f"label {labels[bad[0]]} out of range", path, int(bad[0]) * CIFAR_RECORD)
    return rec[:, 1:].astype(np.float64) / 255.0, labels


def load_cifar10(path):
    """Read the CIFAR-10 binary batches from ``path``.

    Accepts either the extracted ``cifar-10-batches-bin`` directory or its
    parent. Pixels stay in the file's channel-major order, scaled to
    ``[0, 1]`` (``p = 3072``).
    """
    if os.path.isdir(os.path.join(path, "cifar-10-batches-bin")):
        path = os.path.join(path, "cifar-10-batches-bin")
    xs, ys = [], []
    for i in range(1, 6):
        x, y = read_cifar_batch(os.path.join(path, f"data_batch_{i}.bin"))
        xs.append(x)
        ys.append(y)
    train = Dataset(np.concatenate(xs), np.concatenate(ys), "classification", 10)
    x, y = read_cifar_batch(os.path.join(path, "test_batch.bin"))
    return train, Dataset(x, y, "classification", 10)


# -- CSV interchange -------------------------------------------------------

def dataset_to_csv(dataset, path=None):
    """Header row, then one example per line: inputs then targets.

    Returns the text; also writes it to ``path`` if given.
    """
    p = dataset.n_features
    cols = [f"x{i}" for i in range(p)]
    if dataset.kind == "classification":
        cols.append("label")
        tail = [[str(int(v))] for v in dataset.targets]
    else:
        cols += [f"y{i}" for i in range(dataset.targets.shape[1])]
        tail = [[format(float(v), ".17g") for v in row] for row in dataset.targets]
    lines = [",".join(cols)]
    for row, t in zip(dataset.inputs, tail):
        lines.append(",".join([format(float(v), ".17g") for v in row] + t))
    text = "\n".join(lines) + "\n"
    if path is not None:
        atomic_write_text(path, text)
    return text


def dataset_from_csv(path, n_classes=0):
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().strip().split(",")
        try:
            body = np.loadtxt(fh, delimiter=",", dtype=np.float64, ndmin=2)
        except ValueError as exc:
            raise FormatError(f"unreadable CSV body: {exc}", path) from exc
    if body.shape[0] == 0:
        raise FormatError("CSV has no data rows", path)
    if body.shape[1] != len(header):
        raise FormatError(f"{body.shape[1]} columns but {len(header)} header fields", path)
    p = sum(1 for c in header if c.startswith("x"))
    if header[-1] == "label":
        return Dataset(body[:, :p], body[:, p].astype(np.int64), "classification", n_classes)
    return Dataset(body[:, :p], body[:, p:], "regression")
