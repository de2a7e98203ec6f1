"""Learning the 3x3 determinant from random matrices."""

# %%
import numpy as np

from mlayer.layer import Dims, init_standard, param_count
from mlayer.tasks import gen_determinant
from mlayer.train import Plateau, RMSprop, TrainConfig, evaluate, fit

# %% Guessing 0 scores E[det^2] = 3!/3^3 = 2/9
test = gen_determinant(3, 100000, seed=1)
print("zero-predictor mse:", float(np.mean(test.targets ** 2)))

# %% 2^14 training matrices plus a quarter more for validation. A full run
# takes several minutes; lower max_epochs for a quick look.
n_train = 2 ** 14
data = gen_determinant(3, n_train + n_train // 4, seed=0)
cfg = TrainConfig(RMSprop(decay=1e-6), learning_rate=1e-3, batch_size=32, max_epochs=256,
                  plateau=Plateau(10), early_stop_patience=30, loss="mse", activity_lambda=1e-4,
                  validation_fraction=0.2)
dims = Dims(9, 9, 8, 1)


def progress(rec, _):
    if rec.epoch % 16 == 0:
        print(f"epoch {rec.epoch:3d}  val mse {rec.val_loss:.5f}  lr {rec.lr:.2e}")


best, metrics = fit(init_standard(dims, 0, sigma=0.1), data, cfg, callback=progress)
print("parameters:", param_count(dims), " best epoch:", metrics.best_epoch)
print("test mse:", evaluate(best, test, "mse")["mse"])
