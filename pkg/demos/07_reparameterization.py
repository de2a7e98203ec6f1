"""Different weights, same function: changes of basis in the embedding and matrix."""

# %%
import numpy as np

from mlayer.layer import Dims, forward, init_standard, reparameterize

rng = np.random.default_rng(0)
params = init_standard(Dims(5, 4, 6, 3), 0, sigma=0.3)
X = rng.standard_normal((100, 5))

# %% phi -> P phi and M -> Q M Q^-1, with the readout adjusted to match
P = np.eye(4) + 0.3 * rng.standard_normal((4, 4))
Q = np.eye(6) + 0.3 * rng.standard_normal((6, 6))
other = reparameterize(params, P, Q)
print("largest weight change:", max(np.abs(a - b).max() for a, b in
                                    zip(params.tensors().values(), other.tensors().values())))
print("largest output change:", np.abs(forward(params, X) - forward(other, X)).max())
