"""Matrix exponential, its Frechet derivative, and the norms used by the
robustness bounds.

All routines work in float64. ``expm``, ``expm_frechet`` and ``expm_vjp``
accept either a single ``(n, n)`` matrix or a stack ``(..., n, n)``; the
batched form is what the training loop uses.

The Pade path follows the scaling-and-squaring scheme of Higham (2005),
"The scaling and squaring method for the matrix exponential revisited".
``expm_taylor_oracle`` is a deliberately separate, slow implementation kept
for cross-checking.
"""

import math

import numpy as np

from .errors import ConvergenceError, DimensionError, DomainError

__all__ = [
    "expm",
    "expm_taylor_oracle",
    "expm_frechet",
    "expm_vjp",
    "frobenius_norm",
    "spectral_norm",
]

# Pade numerator coefficients b_0..b_m for degrees 3, 5, 7, 9, 13.
_PADE_COEFFS = {
    3: (120.0, 60.0, 12.0, 1.0),
    5: (30240.0, 15120.0, 3360.0, 420.0, 30.0, 1.0),
    7: (17297280.0, 8648640.0, 1995840.0, 277200.0, 25200.0, 1512.0, 56.0, 1.0),
    9: (17643225600.0, 8821612800.0, 2075673600.0, 302702400.0, 30270240.0,
        2162160.0, 110880.0, 3960.0, 90.0, 1.0),
    13: (64764752532480000.0, 32382376266240000.0, 7771770303897600.0,
         1187353796428800.0, 129060195264000.0, 10559470521600.0,
         670442572800.0, 33522128640.0, 1323241920.0, 40840800.0, 960960.0,
         16380.0, 182.0, 1.0),
}

# Largest 1-norm for which the degree-m approximant is accurate to unit
# roundoff in double precision (Higham 2005, Table 2.3).
_THETA = (
    (3, 1.495585217958292e-2),
    (5, 2.539398330063230e-1),
    (7, 9.504178996162932e-1),
    (9, 2.097847961257068e0),
)
_THETA13 = 5.371920351148152e0


def _square_stack(M, name="M"):
    A = np.asarray(M, dtype=np.float64)
    if A.ndim < 2 or A.shape[-1] != A.shape[-2]:
        raise DimensionError(f"{name} must be square, got shape {A.shape}")
    if not np.all(np.isfinite(A)):
        raise DomainError(f"{name} has non-finite entries")
    return A


def _pade_low(A, m, eye):
    b = _PADE_COEFFS[m]
    A2 = A @ A
    U = b[1] * eye
    V = b[0] * eye
    P = eye
    for k in range(1, m // 2 + 1):
        P = P @ A2 if k > 1 else A2
        U = U + b[2 * k + 1] * P
        V = V + b[2 * k] * P
    U = A @ U
    return U, V


def _pade13(A, eye):
    b = _PADE_COEFFS[13]
    A2 = A @ A
    A4 = A2 @ A2
    A6 = A2 @ A4
    U = A @ (A6 @ (b[13] * A6 + b[11] * A4 + b[9] * A2)
             + b[7] * A6 + b[5] * A4 + b[3] * A2 + b[1] * eye)
    V = (A6 @ (b[12] * A6 + b[10] * A4 + b[8] * A2)
         + b[6] * A6 + b[4] * A4 + b[2] * A2 + b[0] * eye)
    return U, V


def _expm_stack(A):
    """Scaling and squaring on a (k, n, n) stack, already validated."""
    n = A.shape[-1]
    eye = np.eye(n)
    norms = np.abs(A).sum(axis=-2).max(axis=-1)
    nmax = float(norms.max()) if norms.size else 0.0

    for m, theta in _THETA:
        if nmax <= theta:
            U, V = _pade_low(A, m, eye)
            return np.linalg.solve(V - U, V + U)

    # Each matrix gets its own scaling exponent; squarings are masked.
    with np.errstate(divide="ignore"):
        s = np.ceil(np.log2(norms / _THETA13))
    s = np.maximum(s, 0).astype(np.int64)
    # ldexp avoids forming 2**s, which overflows for s > 1023
    As = np.ldexp(A, -s[:, None, None])
    U, V = _pade13(As, eye)
    R = np.linalg.solve(V - U, V + U)
    smax = int(s.max())
    if smax and np.all(s == smax):
        for _ in range(smax):
            R = R @ R
    else:
        for k in range(smax):
            idx = np.nonzero(s > k)[0]
            R[idx] = R[idx] @ R[idx]
    return R


def expm(M):
    """Matrix exponential by scaling and squaring with a Pade approximant.

    Parameters
    ----------
    M : array_like, shape (n, n) or (..., n, n)
        Real square matrix or stack of matrices.

    Returns
    -------
    ndarray
        ``exp(M)`` with the same shape as ``M``.
    """
    A = _square_stack(M)
    shape = A.shape
    n = shape[-1]
    out = _expm_stack(A.reshape(-1, n, n))
    return out.reshape(shape)


def expm_taylor_oracle(M, tol=1e-20):
    """Reference exponential from the truncated power series.

    The matrix is scaled by ``2**-s`` until its Frobenius norm is at most 0.5,
    the series is summed until the last added term has Frobenius norm below
    ``tol``, and the result is squared ``s`` times. Slow but shares nothing
    with :func:`expm`.
    """
    A = np.array(M, dtype=np.float64)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise DimensionError(f"M must be a square matrix, got shape {A.shape}")
    if tol <= 0:
        raise DomainError("tol must be positive")
    n = A.shape[0]
    fro = math.sqrt(float(np.sum(A * A)))
    s = 0
    while fro > 0.5:
        fro /= 2.0
        s += 1
    A = A * (0.5 ** s)

    total = np.identity(n)
    term = np.identity(n)
    k = 0
    while True:
        k += 1
        term = np.dot(term, A) / k
        total = total + term
        if math.sqrt(float(np.sum(term * term))) < tol:
            break
    for _ in range(s):
        total = np.dot(total, total)
    return total


def expm_frechet(M, E):
    """Exponential and its Frechet derivative in direction ``E``.

    Uses the block identity
    ``exp([[M, E], [0, M]]) = [[exp(M), L(M, E)], [0, exp(M)]]``.
    ``E`` is rescaled to the size of ``M`` before exponentiating so it does
    not drive extra squarings; ``L`` is linear in ``E`` so the scale is
    undone afterwards.

    Returns
    -------
    (expM, L) : tuple of ndarray
    """
    A = _square_stack(M)
    D = _square_stack(E, "E")
    if A.shape != D.shape:
        raise DimensionError(f"shape mismatch: M {A.shape} vs E {D.shape}")
    shape = A.shape
    n = shape[-1]
    A = A.reshape(-1, n, n)
    D = D.reshape(-1, n, n)

    a_norm = np.abs(A).sum(axis=-2).max(axis=-1)
    e_norm = np.abs(D).sum(axis=-2).max(axis=-1)
    target = np.where(a_norm > 0, a_norm, 1.0)
    scale = np.where(e_norm > 0, target / np.where(e_norm > 0, e_norm, 1.0), 1.0)

    block = np.zeros((A.shape[0], 2 * n, 2 * n))
    block[:, :n, :n] = A
    block[:, n:, n:] = A
    block[:, :n, n:] = D * scale[:, None, None]
    X = _expm_stack(block)
    expM = X[:, :n, :n].reshape(shape)
    L = (X[:, :n, n:] / scale[:, None, None]).reshape(shape)
    return expM, L


def expm_vjp(M, G):
    """Gradient of ``<G, exp(M)>`` with respect to ``M``.

    This is the adjoint of the Frechet derivative, ``L(M^T, G)``.
    """
    A = _square_stack(M)
    Gm = _square_stack(G, "G")
    if A.shape != Gm.shape:
        raise DimensionError(f"shape mismatch: M {A.shape} vs G {Gm.shape}")
    return expm_frechet(np.swapaxes(A, -1, -2), Gm)[1]


def frobenius_norm(A):
    """Square root of the sum of squared entries."""
    A = np.asarray(A, dtype=np.float64)
    if not np.all(np.isfinite(A)):
        raise DomainError("matrix has non-finite entries")
    return float(np.sqrt(np.sum(A * A)))


def spectral_norm(A, rtol=1e-9, max_iter=10000):
    """Largest singular value by power iteration on the Gram matrix.

    Works for rectangular ``A``; iterates on whichever of ``A^T A`` and
    ``A A^T`` is smaller. The start vector is a fixed constant so results are
    reproducible. Stops when the Rayleigh quotient changes by less than
    ``rtol`` relative.

    Raises
    ------
    ConvergenceError
        If ``max_iter`` iterations do not reach ``rtol``; the exception
        carries the last singular-value estimate.
    """
    A = np.asarray(A, dtype=np.float64)
    if A.ndim != 2:
        raise DimensionError(f"expected a 2-D array, got shape {A.shape}")
    if not np.all(np.isfinite(A)):
        raise DomainError("matrix has non-finite entries")
    if A.size == 0 or not np.any(A):
        return 0.0
    K = A.T @ A if A.shape[1] <= A.shape[0] else A @ A.T
    m = K.shape[0]

    v = np.ones(m) / math.sqrt(m)
    w = K @ v
    if not np.any(w):
        # The constant vector lies in the null space; any fixed vector with
        # generic entries avoids that.
        v = np.random.default_rng(0).standard_normal(m)
        v /= np.linalg.norm(v)
        w = K @ v
    lam = float(v @ w)
    for it in range(1, max_iter + 1):
        nw = np.linalg.norm(w)
        if nw == 0.0:
            return 0.0
        v = w / nw
        w = K @ v
        new = float(v @ w)
        if abs(new - lam) <= rtol * abs(new):
            return math.sqrt(max(new, 0.0))
        lam = new
    raise ConvergenceError(
        f"power iteration did not converge in {max_iter} iterations",
        last_iterate=math.sqrt(max(lam, 0.0)),
        iterations=max_iter,
    )
