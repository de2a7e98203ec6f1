"""Matrix exponential, its derivative and the norms used for certificates."""

# %%
import numpy as np

from mlayer.linexp import expm, expm_frechet, expm_taylor_oracle, expm_vjp, spectral_norm

rng = np.random.default_rng(0)

# %% Pade scaling-and-squaring against a plain Taylor series
M = rng.standard_normal((8, 8))
M *= 5.0 / np.linalg.norm(M)
E = expm(M)
R = expm_taylor_oracle(M)
print("relative difference vs series:", np.linalg.norm(E - R) / np.linalg.norm(R))

# %% A rotation generator: exp is periodic with period 2 pi / w
w = 3.0
gen = np.array([[0.0, -w], [w, 0.0]])
for t in (0.0, np.pi / (2 * w), 2 * np.pi / w):
    print(f"t={t:.3f}", np.round(expm(t * gen), 12).tolist())

# %% Nilpotent matrices: the series stops, products of entries appear in the corner
chain = np.diag([1.0, 2.0, 3.0, 4.0], k=1)
print("exp(chain)[0, 4] = 1*2*3*4/4! =", expm(chain)[0, 4])

# %% Directional derivative and its adjoint (the backprop rule)
D = rng.standard_normal((8, 8))
_, L = expm_frechet(M, D)
h = 1e-6
fd = (expm(M + h * D) - expm(M - h * D)) / (2 * h)
print("Frechet vs finite difference:", np.linalg.norm(L - fd) / np.linalg.norm(fd))

G = rng.standard_normal((8, 8))
print("<G, L(M, D)> =", np.sum(G * L), " <vjp(M, G), D> =", np.sum(expm_vjp(M, G) * D))

# %% Spectral norm by power iteration (works on rectangular matrices)
A = rng.standard_normal((10, 100))
print("power iteration:", spectral_norm(A), " svd:", np.linalg.norm(A, 2))
