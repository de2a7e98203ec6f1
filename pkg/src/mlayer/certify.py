"""Closed-form robustness certificates for a trained M-layer.

For an input perturbation ``xt`` the matrix moves by ``M' = W xt`` with
``W`` the combined embedding/generator map, so ``||M'||_2 <= delta_in
||xt||_inf``. Chaining ``||S||_2``, the Frobenius/2-norm comparison and the
exponential perturbation bound gives

    ||delta_out||_2 <= sqrt(n) ||S||_2 delta_in eps exp(delta_in eps) exp(||M||_2)

for ``||xt||_inf <= eps``. A class flip needs two outputs to move a total of
``margin``, and ``|d_i - d_j| <= sqrt(2) ||d||_2``, so the certified radius
is the largest ``eps`` whose bound stays at or below ``margin / sqrt(2)``.
"""

import csv
import io
import math
from dataclasses import asdict, dataclass

import numpy as np

from ._atomic import atomic_write_text
from .errors import DomainError
from .layer import build_matrix, forward
from .linexp import spectral_norm

__all__ = [
    "RobustnessCertificate",
    "input_matrix_map",
    "delta_in",
    "readout_norm",
    "output_deviation_bound",
    "certified_radius",
    "lipschitz_bound",
    "attack_audit",
    "certify_examples",
    "certificates_to_csv",
    "radius_histogram",
]


@dataclass
class RobustnessCertificate:
    example_id: int
    margin: float
    delta_in: float
    s_norm: float
    m_norm: float
    radius: float
    correct: bool = True


def input_matrix_map(params):
    """``W`` with ``W[(j,k), q] = sum_a T[a,j,k] U[a,q]``, shape (n*n, p)."""
    d, n = params.T.shape[0], params.T.shape[1]
    return params.T.reshape(d, n * n).T @ params.U


def delta_in(params):
    """Constant with ``||M'||_2 <= delta_in ||xt||_inf``.

    Uses the infinity-to-Frobenius bound: the 2-norm of the vector of row
    absolute sums of ``W``. Valid but possibly loose.
    """
    W = input_matrix_map(params)
    return float(np.sqrt(np.sum(np.abs(W).sum(axis=1) ** 2)))


def readout_norm(params):
    """Spectral norm of ``S`` viewed as an ``h x n^2`` matrix."""
    h = params.S.shape[0]
    return spectral_norm(params.S.reshape(h, -1))


def _deviation(sqrt_n, s_norm, d_in, m_norm, eps):
    if eps == 0.0:
        return 0.0
    return sqrt_n * s_norm * d_in * eps * math.exp(d_in * eps) * math.exp(m_norm)


def output_deviation_bound(params, x, eps, constants=None):
    """Upper bound on ``||forward(x + xt) - forward(x)||_2`` over
    ``||xt||_inf <= eps``.

    ``constants`` may pass precomputed ``(delta_in, s_norm)``.
    """
    if eps < 0:
        raise ValueError("eps must be non-negative")
    d_in, s_norm = constants if constants is not None else (delta_in(params), readout_norm(params))
    m_norm = spectral_norm(build_matrix(params, x))
    return _deviation(math.sqrt(params.B.shape[0]), s_norm, d_in, m_norm, eps)


def _solve_radius(f, target, rtol=1e-6):
    """Largest eps with f(eps) <= target for increasing f with f(0) = 0."""
    hi = 1.0
    while f(hi) <= target:
        hi *= 2.0
        if hi > 1e300:
            return math.inf
    lo = 0.0
    while hi - lo > rtol * hi:
        mid = 0.5 * (lo + hi)
        if f(mid) <= target:
            lo = mid
        else:
            hi = mid
    return lo


def certified_radius(params, x, label, example_id=0, constants=None):
    """Certificate for one example.

    If the prediction differs from ``label`` the certificate is flagged
    (``correct=False``) with radius 0.
    """
    d_in, s_norm = constants if constants is not None else (delta_in(params), readout_norm(params))
    out = forward(params, x)
    order = np.argsort(out)[::-1]
    pred = int(order[0])
    others = np.delete(out, label)
    margin = float(out[label] - others.max()) if others.size else math.inf
    m_norm = spectral_norm(build_matrix(params, x))
    correct = pred == label and margin > 0
    if not correct:
        return RobustnessCertificate(example_id, max(margin, 0.0), d_in, s_norm, m_norm, 0.0, False)
    sqrt_n = math.sqrt(params.B.shape[0])
    if sqrt_n * s_norm * d_in == 0.0:
        radius = math.inf
    else:
        target = margin / math.sqrt(2.0)
        radius = _solve_radius(lambda e: _deviation(sqrt_n, s_norm, d_in, m_norm, e), target)
    return RobustnessCertificate(example_id, margin, d_in, s_norm, m_norm, radius, True)


def lipschitz_bound(params, x_inf_cap):
    """Global constant ``L`` with ``||o(x1) - o(x2)||_2 <= L ||x1 - x2||_inf``
    for inputs with ``||x||_inf <= x_inf_cap``.

    ``||M||_2`` is capped over the box by ``||B_eff||_2 + delta_in x_inf_cap``
    where ``B_eff = B + sum_a u0_a T_a`` is the matrix at ``x = 0``.
    """
    d_in = delta_in(params)
    s_norm = readout_norm(params)
    B_eff = params.B + np.tensordot(params.u0, params.T, axes=(0, 0))
    m_cap = spectral_norm(B_eff) + d_in * x_inf_cap
    n = params.B.shape[0]
    return math.sqrt(n) * s_norm * d_in * math.exp(d_in * x_inf_cap) * math.exp(m_cap)


def attack_audit(params, x, radius, trials=1000, seed=0, label=None, shrink=0.99, batch=250):
    """Random sign-pattern attack at ``||xt||_inf = shrink * radius``.

    Returns True when no trial changes the predicted class. An infinite
    radius is probed at 1.
    """
    if radius == 0.0:
        return True
    x = np.asarray(x, dtype=np.float64)
    if label is None:
        label = int(np.argmax(forward(params, x)))
    if not math.isfinite(radius):
        radius = 1.0
    rng = np.random.default_rng(seed)
    step = shrink * radius
    done = 0
    while done < trials:
        k = min(batch, trials - done)
        signs = rng.choice((-1.0, 1.0), size=(k, x.size))
        try:
            with np.errstate(over="ignore", invalid="ignore"):
                out = forward(params, x + step * signs)
        except DomainError:
            return False
        # an overflowed output counts as a flip
        if np.any(~np.isfinite(out)) or np.any(out.argmax(axis=1) != label):
            return False
        done += k
    return True


def certify_examples(params, inputs, labels, ids=None):
    """Certificates for a set of examples, sharing the per-model constants."""
    constants = (delta_in(params), readout_norm(params))
    ids = range(len(labels)) if ids is None else ids
    return [certified_radius(params, x, int(y), int(i), constants)
            for x, y, i in zip(inputs, labels, ids)]


def certificates_to_csv(certs, path=None):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    cols = ["example_id", "margin", "delta_in", "s_norm", "m_norm", "radius"]
    w.writerow(cols)
    for c in certs:
        row = asdict(c)
        w.writerow([row["example_id"]] + [format(row[k], ".17g") for k in cols[1:]])
    text = buf.getvalue()
    if path is not None:
        atomic_write_text(path, text)
    return text


def radius_histogram(radii, bins_per_decade=4):
    """Counts of positive finite radii in log10-spaced bins.

    Returns ``(edges, counts)`` ready for plotting.
    """
    r = np.asarray([v for v in radii if v > 0 and math.isfinite(v)], dtype=np.float64)
    if r.size == 0:
        return np.array([]), np.array([], dtype=np.int64)
    lo = math.floor(np.log10(r.min()))
    hi = math.ceil(np.log10(r.max()))
    if hi == lo:
        hi = lo + 1
    edges = np.logspace(lo, hi, (hi - lo) * bins_per_decade + 1)
    counts, _ = np.histogram(r, bins=edges)
    return edges, counts
