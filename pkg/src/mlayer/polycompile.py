"""Exact M-layer weights for multivariate polynomials.

A monomial of degree ``g`` becomes a ``(g+1) x (g+1)`` block with the
monomial's factors on the first superdiagonal. The block is nilpotent, so
``exp`` of it is a finite sum and its top-right entry is the monomial divided
by ``g!``. A polynomial is the block-diagonal stack of its monomials, with the
readout ``S`` undoing the factorials and the constant term going to ``V``.

Also contains the two hand-built gadgets: the 7x7 feature-cross matrix and
the 8x8 matrix whose exponential holds a 3x3 determinant (or permanent).
"""

import itertools
import math
import re
from dataclasses import dataclass, field

import numpy as np

from .errors import DomainError
from .layer import MLayerParams

__all__ = [
    "Polynomial",
    "PolynomialSyntaxError",
    "MonomialBlock",
    "CompiledModel",
    "parse_polynomial",
    "determinant_polynomial",
    "permanent_polynomial",
    "compile_monomial",
    "compile_polynomial",
    "feature_cross_gadget",
    "det3_gadget",
]


@dataclass
class Polynomial:
    """Sparse polynomial: a list of ``(coefficient, exponents)`` terms.

    Use :meth:`from_terms` to merge duplicate exponent vectors and drop zero
    coefficients; the constructor rejects both.
    """

    n_vars: int
    terms: list = field(default_factory=list)

    def __post_init__(self):
        seen = set()
        clean = []
        for coef, exps in self.terms:
            exps = tuple(int(e) for e in exps)
            if len(exps) != self.n_vars or any(e < 0 for e in exps):
                raise ValueError(f"bad exponent vector {exps} for {self.n_vars} variables")
            if exps in seen:
                raise ValueError(f"duplicate exponent vector {exps}")
            if coef == 0:
                raise ValueError("zero coefficients are not stored")
            seen.add(exps)
            clean.append((float(coef), exps))
        self.terms = clean

    @classmethod
    def from_terms(cls, n_vars, terms):
        acc = {}
        for coef, exps in terms:
            key = tuple(int(e) for e in exps)
            acc[key] = acc.get(key, 0.0) + float(coef)
        return cls(n_vars, [(c, e) for e, c in acc.items() if c != 0.0])

    @property
    def degree(self):
        return max((sum(e) for _, e in self.terms), default=0)

    def __call__(self, x):
        x = np.asarray(x, dtype=np.float64)
        total = np.zeros(x.shape[:-1])
        for coef, exps in self.terms:
            term = np.full(x.shape[:-1], coef)
            for var, e in enumerate(exps):
                if e:
                    term = term * x[..., var] ** e
            total = total + term
        return total

    def __str__(self):
        if not self.terms:
            return "0"
        out = ""
        for k, (coef, exps) in enumerate(self.terms):
            factors = []
            for var, e in enumerate(exps):
                if e == 1:
                    factors.append(f"x{var}")
                elif e > 1:
                    factors.append(f"x{var}^{e}")
            body = "*".join([repr(abs(coef))] + factors)
            if k == 0:
                out = ("-" if coef < 0 else "") + body
            else:
                out += (" - " if coef < 0 else " + ") + body
        return out


class PolynomialSyntaxError(ValueError):
    def __init__(self, message, text, column):
        super().__init__(f"{message} at column {column}")
        self.text = text
        self.column = column

    def pointer(self):
        return f"{self.text}\n{' ' * self.column}^"


_TOKEN = re.compile(r"(?P<num>\d+\.?\d*(?:[eE][+-]?\d+)?|\.\d+(?:[eE][+-]?\d+)?)"
                    r"|(?P<var>x(?P<idx>\d+))|(?P<op>[-+*^])")


def _tokenize(text):
    tokens = []
    pos = 0
    while pos < len(text):
        if text[pos].isspace():
            pos += 1
            continue
        m = _TOKEN.match(text, pos)
        if m is None:
            raise PolynomialSyntaxError(f"unexpected character {text[pos]!r}", text, pos)
        if m.group("num") is not None:
            tokens.append(("num", float(m.group("num")), pos))
        elif m.group("var") is not None:
            tokens.append(("var", int(m.group("idx")), pos))
        else:
            tokens.append(("op", m.group("op"), pos))
        pos = m.end()
    return tokens


def _parse_term(tokens, i, text):
    """One product of numbers and powered variables starting at ``tokens[i]``."""
    coef = 1.0
    powers = {}
    while True:
        if i >= len(tokens):
            raise PolynomialSyntaxError("expected a number or variable", text, len(text))
        kind, val, col = tokens[i]
        if kind == "op":
            raise PolynomialSyntaxError(f"unexpected {val!r}", text, col)
        i += 1
        if kind == "num":
            coef *= val
        else:
            exp = 1
            if i < len(tokens) and tokens[i][:2] == ("op", "^"):
                if i + 1 >= len(tokens):
                    raise PolynomialSyntaxError("missing exponent", text, len(text))
                ekind, eval_, ecol = tokens[i + 1]
                if ekind != "num" or not float(eval_).is_integer():
                    raise PolynomialSyntaxError("exponent must be a non-negative integer", text, ecol)
                exp = int(eval_)
                i += 2
            powers[val] = powers.get(val, 0) + exp
        if i < len(tokens) and tokens[i][:2] == ("op", "*"):
            i += 1
            continue
        return coef, powers, i


def parse_polynomial(text, n_vars=None):
    """Parse text such as ``"3.5*x0^2*x1 - x2 + 4"``.

    Terms are products of numbers and variables ``x<i>`` (optionally raised
    to a non-negative integer power with ``^``), joined by ``+`` and ``-``.
    Whitespace is ignored. ``n_vars`` defaults to one more than the largest
    variable index. Errors carry the offending column.
    """
    tokens = _tokenize(text)
    if not tokens:
        raise PolynomialSyntaxError("empty polynomial", text, 0)
    terms = []
    i = 0
    while i < len(tokens):
        sign = 1.0
        kind, val, col = tokens[i]
        if kind == "op" and val in "+-":
            sign = -1.0 if val == "-" else 1.0
            i += 1
        elif terms:
            raise PolynomialSyntaxError("expected '+' or '-'", text, col)
        coef, powers, i = _parse_term(tokens, i, text)
        terms.append((sign * coef, powers))

    max_var = max((v for _, pw in terms for v in pw), default=-1)
    if n_vars is None:
        n_vars = max_var + 1
    elif max_var >= n_vars:
        raise ValueError(f"variable x{max_var} exceeds n_vars={n_vars}")
    vec_terms = []
    for coef, pw in terms:
        exps = [0] * n_vars
        for v, e in pw.items():
            exps[v] += e
        vec_terms.append((coef, exps))
    return Polynomial.from_terms(n_vars, vec_terms)


def _perm_sign(perm):
    sign = 1
    seen = [False] * len(perm)
    for i in range(len(perm)):
        if seen[i]:
            continue
        j, length = i, 0
        while not seen[j]:
            seen[j] = True
            j = perm[j]
            length += 1
        if length % 2 == 0:
            sign = -sign
    return sign


def _leibniz(k, signed):
    terms = []
    for perm in itertools.permutations(range(k)):
        exps = [0] * (k * k)
        for row, col in enumerate(perm):
            exps[row * k + col] = 1
        terms.append((float(_perm_sign(perm)) if signed else 1.0, exps))
    return Polynomial(k * k, terms)


def determinant_polynomial(k):
    """Leibniz expansion over the row-major entries ``x0 .. x{k*k-1}``."""
    return _leibniz(k, True)


def permanent_polynomial(k):
    return _leibniz(k, False)


@dataclass
class MonomialBlock:
    """Template for one monomial.

    ``entries`` lists ``(row, col, var)``: variable ``var`` sits at
    ``(row, col)`` of a ``size x size`` block. ``exp`` of the block holds
    ``monomial / factorial`` at ``cell``; multiplying by ``scale``
    (``coef * degree!``) recovers the term.
    """

    size: int
    entries: list
    cell: tuple
    scale: float
    factorial: int


def compile_monomial(coef, exponents):
    exps = [int(e) for e in exponents]
    degree = sum(exps)
    if degree < 1:
        raise DomainError("degree-0 terms belong in the output bias, not a matrix block")
    factors = [var for var, e in enumerate(exps) for _ in range(e)]
    entries = [(r, r + 1, var) for r, var in enumerate(factors)]
    fact = math.factorial(degree)
    return MonomialBlock(degree + 1, entries, (0, degree), float(coef) * fact, fact)


@dataclass
class CompiledModel:
    """Weights plus where each term is read from.

    ``term_cells`` holds ``(block_offset, row, col)`` with ``row``/``col``
    absolute indices into ``exp(M)``; ``scale_factors`` the factorial each
    cell is divided by.
    """

    params: MLayerParams
    term_cells: list
    scale_factors: list

    @property
    def matrix_size(self):
        return self.params.B.shape[0]

    def annotation(self):
        return {
            "term_cells": [list(map(int, c)) for c in self.term_cells],
            "scale_factors": [int(s) for s in self.scale_factors],
        }


def compile_polynomial(poly):
    """Block-diagonal, strictly upper-triangular M-layer computing ``poly``.

    Embedding is the identity (``d = p = n_vars``), ``B = 0`` and ``h = 1``.
    """
    blocks = []
    constant = 0.0
    for coef, exps in poly.terms:
        if sum(exps) == 0:
            constant += coef
        else:
            blocks.append(compile_monomial(coef, exps))
    if not blocks:
        raise DomainError("polynomial needs at least one term of degree >= 1")
    p = poly.n_vars
    n = sum(b.size for b in blocks)
    T = np.zeros((p, n, n))
    S = np.zeros((1, n, n))
    cells, scales = [], []
    off = 0
    for b in blocks:
        for r, c, var in b.entries:
            T[var, off + r, off + c] = 1.0
        row, col = off + b.cell[0], off + b.cell[1]
        S[0, row, col] = b.scale
        cells.append((off, row, col))
        scales.append(b.factorial)
        off += b.size
    params = MLayerParams(
        U=np.eye(p), u0=np.zeros(p), T=T, B=np.zeros((n, n)), S=S,
        V=np.array([constant]),
    )
    return CompiledModel(params, cells, scales)


def feature_cross_gadget(readout=((0, 4), (0, 6))):
    """The 7x7 three-feature example.

    ``exp(M)``'s leading row is ``(1, f0, f1, f2, f0 f1, f1 f2, f1 f2^2)``.
    The default readout returns ``(f0 f1, f1 f2^2)``.
    """
    n = 7
    T = np.zeros((3, n, n))
    T[0, 0, 1] = T[1, 0, 2] = T[2, 0, 3] = 1.0
    T[0, 2, 4] = T[2, 2, 5] = 2.0
    T[2, 5, 6] = 3.0
    S = np.zeros((len(readout), n, n))
    for m, (r, c) in enumerate(readout):
        S[m, r, c] = 1.0
    params = MLayerParams(U=np.eye(3), u0=np.zeros(3), T=T, B=np.zeros((n, n)),
                          S=S, V=np.zeros(len(readout)))
    return CompiledModel(params, [(0, r, c) for r, c in readout], [1] * len(readout))


# (row, col, variable, coefficient) of the 8x8 determinant matrix; variables
# a..i are the row-major entries x0..x8 of the 3x3 input.
_DET3_ENTRIES = (
    (0, 2, 8, 1.0), (0, 3, 5, 1.0),
    (1, 2, 7, 1.0), (1, 3, 4, 1.0),
    (2, 4, 3, 2.0), (2, 5, 5, -2.0),
    (3, 4, 6, -2.0), (3, 5, 8, 2.0),
    (4, 6, 2, 3.0), (4, 7, 1, -3.0),
    (5, 6, 0, 3.0),
)


def det3_gadget(mode="determinant"):
    """8x8 M-layer with ``exp(M)[0, 7] + exp(M)[1, 6] = det`` of the 3x3
    input. ``mode="permanent"`` drops every minus sign."""
    if mode not in ("determinant", "permanent"):
        raise ValueError(f"unknown mode {mode!r}")
    n = 8
    T = np.zeros((9, n, n))
    for r, c, var, coef in _DET3_ENTRIES:
        T[var, r, c] = abs(coef) if mode == "permanent" else coef
    S = np.zeros((1, n, n))
    S[0, 0, 7] = S[0, 1, 6] = 1.0
    params = MLayerParams(U=np.eye(9), u0=np.zeros(9), T=T, B=np.zeros((n, n)),
                          S=S, V=np.zeros(1))
    return CompiledModel(params, [(0, 0, 7), (0, 1, 6)], [1, 1])
