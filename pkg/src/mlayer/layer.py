"""The M-layer model.

An input ``x`` of length ``p`` is embedded affinely into ``d`` latent
features ``phi = U x + u0``. The features weight ``d`` generator matrices,
``M = B + sum_a phi_a T_a``, and the output is an affine readout of the
matrix exponential, ``out_m = V_m + sum_jk S_mjk exp(M)_jk``.

Every function accepts one example ``x`` of shape ``(p,)`` or a batch of
shape ``(N, p)``. Batched gradients are summed over examples.
"""

import json
from dataclasses import dataclass, fields
from typing import NamedTuple

import numpy as np

from .errors import DimensionError, DomainError, FormatError
from .linexp import expm, expm_vjp

__all__ = [
    "Dims",
    "MLayerParams",
    "Gradients",
    "ForwardCache",
    "param_count",
    "embed",
    "build_matrix",
    "forward",
    "backward",
    "init_standard",
    "init_periodic",
    "reparameterize",
    "to_json",
    "from_json",
    "save_model",
    "load_model",
]

TENSOR_NAMES = ("U", "u0", "T", "B", "S", "V")


@dataclass(frozen=True)
class Dims:
    """Input size ``p``, embedding size ``d``, matrix size ``n``, output size ``h``."""

    p: int
    d: int
    n: int
    h: int

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, bool) or not isinstance(v, (int, np.integer)) or v < 1:
                raise DimensionError(f"{f.name} must be a positive integer, got {v!r}")
            object.__setattr__(self, f.name, int(v))

    def shapes(self):
        p, d, n, h = self.p, self.d, self.n, self.h
        return {
            "U": (d, p),
            "u0": (d,),
            "T": (d, n, n),
            "B": (n, n),
            "S": (h, n, n),
            "V": (h,),
        }


def param_count(dims):
    """Number of trainable scalars: ``dp + d + dn^2 + n^2 + n^2 h + h``."""
    p, d, n, h = dims.p, dims.d, dims.n, dims.h
    return d * p + d + d * n * n + n * n + n * n * h + h


@dataclass
class MLayerParams:
    """The six parameter tensors of an M-layer.

    ``U`` (d, p) and ``u0`` (d,) form the affine embedding, ``T`` (d, n, n)
    holds the generator matrices, ``B`` (n, n) the bias matrix, ``S``
    (h, n, n) the readout and ``V`` (h,) the output bias.
    """

    U: np.ndarray
    u0: np.ndarray
    T: np.ndarray
    B: np.ndarray
    S: np.ndarray
    V: np.ndarray

    def __post_init__(self):
        for name in TENSOR_NAMES:
            arr = np.array(getattr(self, name), dtype=np.float64)
            setattr(self, name, arr)
        U, T, S = self.U, self.T, self.S
        if U.ndim != 2 or T.ndim != 3 or S.ndim != 3:
            raise DimensionError("U must be 2-D, T and S 3-D")
        d, p = U.shape
        _, n, _ = T.shape
        h = S.shape[0]
        expected = Dims(p, d, n, h).shapes()
        for name in TENSOR_NAMES:
            got = getattr(self, name).shape
            if got != expected[name]:
                raise DimensionError(f"{name} has shape {got}, expected {expected[name]}")
        for name in TENSOR_NAMES:
            if not np.all(np.isfinite(getattr(self, name))):
                raise DomainError(f"{name} has non-finite entries")

    @property
    def dims(self):
        return Dims(self.U.shape[1], self.U.shape[0], self.T.shape[1], self.S.shape[0])

    def tensors(self):
        return {name: getattr(self, name) for name in TENSOR_NAMES}

    def copy(self):
        return MLayerParams(**{k: v.copy() for k, v in self.tensors().items()})

    def size(self):
        return sum(v.size for v in self.tensors().values())

    @classmethod
    def zeros(cls, dims):
        return cls(**{k: np.zeros(s) for k, s in dims.shapes().items()})


# Gradients have exactly the parameter layout.
Gradients = MLayerParams


class ForwardCache(NamedTuple):
    x: np.ndarray
    phi: np.ndarray
    M: np.ndarray
    expM: np.ndarray


def _as_input(params, x):
    x = np.asarray(x, dtype=np.float64)
    p = params.U.shape[1]
    if x.ndim not in (1, 2) or x.shape[-1] != p:
        raise DimensionError(f"input must have trailing length {p}, got shape {x.shape}")
    return x


def embed(params, x):
    """Latent features ``phi = U x + u0``."""
    x = _as_input(params, x)
    return x @ params.U.T + params.u0


def _matrix_from_phi(params, phi):
    return params.B + np.tensordot(phi, params.T, axes=(-1, 0))


def build_matrix(params, x):
    """The matrix to exponentiate, ``B + sum_a phi_a T_a``."""
    return _matrix_from_phi(params, embed(params, x))


def forward(params, x, return_cache=False):
    """Evaluate the layer.

    With ``return_cache=True`` also returns a :class:`ForwardCache` holding
    ``phi``, ``M`` and ``exp(M)`` for reuse by :func:`backward`.
    """
    x = _as_input(params, x)
    phi = embed(params, x)
    M = _matrix_from_phi(params, phi)
    E = expm(M)
    n = params.B.shape[0]
    S_flat = params.S.reshape(params.S.shape[0], n * n)
    out = E.reshape(E.shape[:-2] + (n * n,)) @ S_flat.T + params.V
    if return_cache:
        return out, ForwardCache(x, phi, M, E)
    return out


def backward(params, x, g_out, cache=None, g_expm=None):
    """Gradient of ``<g_out, forward(params, x)>`` with respect to every tensor.

    ``g_expm`` is an optional extra upstream gradient with respect to
    ``exp(M)`` (same shape as ``M``); the activity regularizer enters here.
    For a batch, ``g_out`` has shape ``(N, h)`` and gradients are summed.
    """
    if cache is None:
        _, cache = forward(params, x, return_cache=True)
    x, phi, M, E = cache
    single = x.ndim == 1
    g_out = np.asarray(g_out, dtype=np.float64)
    h, n = params.S.shape[0], params.B.shape[0]
    if g_out.shape != (x.shape[:-1] + (h,)):
        raise DimensionError(f"g_out has shape {g_out.shape}, expected {x.shape[:-1] + (h,)}")
    if single:
        x, phi, M, E = x[None], phi[None], M[None], E[None]
        g_out = g_out[None]
        if g_expm is not None:
            g_expm = np.asarray(g_expm, dtype=np.float64)[None]
    N = x.shape[0]

    E_flat = E.reshape(N, n * n)
    dV = g_out.sum(axis=0)
    dS = (g_out.T @ E_flat).reshape(h, n, n)
    G = (g_out @ params.S.reshape(h, n * n)).reshape(N, n, n)
    if g_expm is not None:
        if g_expm.shape != G.shape:
            raise DimensionError(f"g_expm has shape {g_expm.shape}, expected {G.shape}")
        G = G + g_expm
    Gh = expm_vjp(M, G).reshape(N, n * n)
    dB = Gh.sum(axis=0).reshape(n, n)
    dT = (phi.T @ Gh).reshape(-1, n, n)
    dphi = Gh @ params.T.reshape(-1, n * n).T
    dU = dphi.T @ x
    du0 = dphi.sum(axis=0)
    return Gradients(U=dU, u0=du0, T=dT, B=dB, S=dS, V=dV)


def init_standard(dims, seed, sigma=0.05):
    """All tensors i.i.d. normal with mean 0 and standard deviation ``sigma``."""
    rng = np.random.default_rng(seed)
    return MLayerParams(**{
        name: rng.normal(0.0, sigma, size=shape)
        for name, shape in dims.shapes().items()
    })


def _diag_heavy(rng, shape, diag_mean, sigma):
    A = rng.normal(0.0, sigma, size=shape)
    idx = np.arange(shape[-1])
    A[..., idx, idx] += diag_mean
    return A


def init_periodic(dims, seed):
    """Initialization that keeps ``exp(M)`` small at the start.

    ``B`` and every ``T_a`` get diagonal entries around -10 and off-diagonal
    entries around 0 (sigma 0.01); the embedding starts around 0.1
    (sigma 0.05); ``S`` and ``V`` follow :func:`init_standard`.
    """
    rng = np.random.default_rng(seed)
    shapes = dims.shapes()
    return MLayerParams(
        U=rng.normal(0.1, 0.05, size=shapes["U"]),
        u0=rng.normal(0.1, 0.05, size=shapes["u0"]),
        T=_diag_heavy(rng, shapes["T"], -10.0, 0.01),
        B=_diag_heavy(rng, shapes["B"], -10.0, 0.01),
        S=rng.normal(0.0, 0.05, size=shapes["S"]),
        V=rng.normal(0.0, 0.05, size=shapes["V"]),
    )


def _checked_inverse(A, name):
    A = np.asarray(A, dtype=np.float64)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise DimensionError(f"{name} must be square, got shape {A.shape}")
    if np.linalg.cond(A) > 1e12:
        raise DomainError(f"{name} is singular or too ill-conditioned")
    try:
        return np.linalg.solve(A, np.eye(A.shape[0]))
    except np.linalg.LinAlgError as exc:
        raise DomainError(f"{name} is singular") from exc


def reparameterize(params, P, Q):
    """Equivalent parameters under a change of basis.

    ``P`` (d x d) acts on the embedding and ``Q`` (n x n) conjugates the
    matrix: ``phi' = P phi`` and ``M' = Q M Q^-1``. The readout is adjusted so
    ``<S'_m, exp(M')> = <S_m, exp(M)>``, hence the computed function is
    unchanged.
    """
    d, n = params.U.shape[0], params.B.shape[0]
    P = np.asarray(P, dtype=np.float64)
    Q = np.asarray(Q, dtype=np.float64)
    if P.shape != (d, d) or Q.shape != (n, n):
        raise DimensionError(f"P must be {(d, d)} and Q {(n, n)}")
    Pinv = _checked_inverse(P, "P")
    Qinv = _checked_inverse(Q, "Q")
    conj_T = Q @ params.T @ Qinv
    T_new = np.tensordot(Pinv.T, conj_T, axes=(1, 0))
    return MLayerParams(
        U=P @ params.U,
        u0=P @ params.u0,
        T=T_new,
        B=Q @ params.B @ Qinv,
        S=Qinv.T @ params.S @ Q.T,
        V=params.V.copy(),
    )


# -- serialization ---------------------------------------------------------

FORMAT_VERSION = 1


def _fmt_floats(arr):
    return "[" + ",".join(format(float(v), ".17g") for v in np.ravel(arr)) + "]"


def to_json(params, extra=None):
    """Versioned JSON text. Floats carry 17 significant digits."""
    dims = params.dims
    parts = [
        f'"version":{FORMAT_VERSION}',
        '"dims":' + json.dumps({"p": dims.p, "d": dims.d, "n": dims.n, "h": dims.h}),
    ]
    tensors = []
    for name, arr in params.tensors().items():
        tensors.append(
            f'"{name}":{{"shape":{json.dumps(list(arr.shape))},"data":{_fmt_floats(arr)}}}'
        )
    parts.append('"tensors":{' + ",".join(tensors) + "}")
    if extra:
        for key in sorted(extra):
            parts.append(f"{json.dumps(key)}:{json.dumps(extra[key], sort_keys=True)}")
    return "{" + ",".join(parts) + "}\n"


def from_json(text):
    """Inverse of :func:`to_json`; returns ``(params, extra)``."""
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as exc:
        raise FormatError(f"model file is not valid JSON: {exc.msg}", offset=exc.pos) from exc
    if obj.get("version") != FORMAT_VERSION:
        raise FormatError(f"unsupported model format version {obj.get('version')!r}")
    try:
        dims = Dims(**obj["dims"])
        arrays = {}
        for name, shape in dims.shapes().items():
            entry = obj["tensors"][name]
            if tuple(entry["shape"]) != shape:
                raise FormatError(f"tensor {name} has shape {entry['shape']}, expected {list(shape)}")
            arrays[name] = np.array(entry["data"], dtype=np.float64).reshape(shape)
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, FormatError):
            raise
        raise FormatError(f"malformed model file: {exc}") from exc
    extra = {k: v for k, v in obj.items() if k not in ("version", "dims", "tensors")}
    return MLayerParams(**arrays), extra


def save_model(path, params, extra=None):
    from ._atomic import atomic_write_text

    atomic_write_text(path, to_json(params, extra))


def load_model(path):
    with open(path, encoding="utf-8") as fh:
        return from_json(fh.read())
