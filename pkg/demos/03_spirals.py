"""Double spiral classification and the shape of the decision boundary."""

# %%
import numpy as np

from mlayer.errors import TrainingDiverged
from mlayer.layer import Dims, forward, init_standard, param_count
from mlayer.tasks import gen_spirals
from mlayer.train import RMSprop, TrainConfig, fit

data = gen_spirals(seed=0)
cfg = TrainConfig(RMSprop(), learning_rate=1e-3, batch_size=32, max_epochs=100, loss="spiral_xent",
                  activity_lambda=1e-4)


def accuracy(params):
    return float(np.mean(forward(params, data.inputs).argmax(axis=1) == data.targets))


# %% With a 1x1 matrix the class scores are V + S exp(m(x)) with m affine in x,
# so the prediction thresholds one linear form and the boundary is a line.
# The optimizer keeps steepening m until exp overflows.
for n in (1, 10):
    dims = Dims(2, 10, n, 2)
    seen = []
    try:
        best, _ = fit(init_standard(dims, 0), data, cfg,
                      callback=lambda rec, p: seen.append(accuracy(p)))
        note = ""
    except TrainingDiverged as exc:
        best, note = None, f"  ({exc})"
    print(f"n={n:2d}  parameters={param_count(dims):5d}  best training accuracy={max(seen):.3f}{note}")

# %% How the wide model labels points outside the training square
angles = np.linspace(0, 2 * np.pi, 12, endpoint=False)
ring = 15.0 * np.stack([np.cos(angles), np.sin(angles)], axis=1)
print("predicted classes on a ring of radius 15:", forward(best, ring).argmax(axis=1))
