"""Exact polynomials from nilpotent matrices: feature crosses and determinants."""

# %%
import numpy as np

from mlayer.layer import build_matrix, forward
from mlayer.linexp import expm
from mlayer.polycompile import (compile_polynomial, det3_gadget, determinant_polynomial,
                                feature_cross_gadget, parse_polynomial)

# %% Three features, one 7x7 matrix. The first row of exp(M) holds the crosses.
gadget = feature_cross_gadget()
phi = np.array([1.0, 2.0, 3.0])
M = build_matrix(gadget.params, phi)
print("M^4 == 0:", np.all(np.linalg.matrix_power(M, 4) == 0))
print("leading row of exp(M):", expm(M)[0])
print("readout (f0 f1, f1 f2^2):", forward(gadget.params, phi))

# %% Any polynomial compiles into block-diagonal superdiagonal chains
poly = parse_polynomial("3.5*x0^2*x1 - x2 + 4")
model = compile_polynomial(poly)
x = np.array([0.5, -1.5, 2.0])
print(poly, "->", model.matrix_size, "x", model.matrix_size, "matrix")
print("poly(x) =", poly(x), " model(x) =", forward(model.params, x)[0])

# %% The 3x3 determinant: 6 blocks of size 4 in the generic compiler ...
generic = compile_polynomial(determinant_polynomial(3))
X = np.random.default_rng(1).uniform(-1, 1, size=(1000, 9))
err = np.abs(forward(generic.params, X)[:, 0] - np.linalg.det(X.reshape(-1, 3, 3))).max()
print("generic size", generic.matrix_size, "max error", err)

# %% ... or a hand-built 8x8 gadget reading exp(M)[0,7] + exp(M)[1,6]
det = det3_gadget()
A = np.array([[1.0, 2, 3], [4, 5, 6], [7, 8, 10]])
print("gadget:", forward(det.params, A.ravel())[0], " numpy:", np.linalg.det(A))
perm = det3_gadget("permanent")
print("permanent of ones(3,3):", forward(perm.params, np.ones(9))[0])
