"""Certified L-infinity radii and a random-attack audit."""

# %%
import numpy as np

from mlayer import certify
from mlayer.layer import Dims, forward, init_standard
from mlayer.tasks import gen_spirals
from mlayer.train import RMSprop, TrainConfig, fit

data = gen_spirals(seed=0)
cfg = TrainConfig(RMSprop(), learning_rate=1e-3, max_epochs=30, loss="spiral_xent",
                  activity_lambda=1e-4)
params, _ = fit(init_standard(Dims(2, 10, 6, 2), 0), data, cfg)

# %% Model constants: ||M'||_2 <= delta_in ||x~||_inf and ||S||_2
print("delta_in:", certify.delta_in(params), " ||S||_2:", certify.readout_norm(params))

# %% Certificates for correctly classified points
pred = forward(params, data.inputs).argmax(axis=1)
ok = np.nonzero(pred == data.targets)[0][:200]
certs = certify.certify_examples(params, data.inputs[ok], data.targets[ok], ok)
radii = np.array([c.radius for c in certs])
print("median radius:", np.median(radii), " range:", radii.min(), radii.max())
edges, counts = certify.radius_histogram(radii)
for lo, hi, c in zip(edges[:-1], edges[1:], counts):
    print(f"  [{lo:.1e}, {hi:.1e})  {'#' * int(c)}")

# %% No random sign attack inside a radius changes the class ...
sound = all(certify.attack_audit(params, data.inputs[c.example_id], c.radius, trials=1000,
                                 seed=c.example_id) for c in certs[:50])
print("audit inside radii passed:", sound)

# %% ... while blowing the radii up by a large factor does find flips
flips = sum(not certify.attack_audit(params, data.inputs[c.example_id], c.radius * 1e4, trials=200)
            for c in certs[:50])
print("examples flipped at 10^4 x radius:", flips, "of 50")

# %% A global constant for inputs in the box |x|_inf <= 10.5
print("Lipschitz bound:", certify.lipschitz_bound(params, 10.5))
