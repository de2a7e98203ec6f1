"""Losses, optimizers and the minibatch training loop."""

import csv
import io
import math
import time
from dataclasses import dataclass, field

import numpy as np

from ._atomic import atomic_write_text
from .errors import ConfigError, DimensionError, DomainError, TrainingDiverged
from .layer import MLayerParams, TENSOR_NAMES, backward, forward

__all__ = [
    "SGD",
    "RMSprop",
    "Plateau",
    "TrainConfig",
    "OptState",
    "EpochRecord",
    "Metrics",
    "loss_softmax_xent",
    "loss_mse",
    "loss_periodic",
    "sgd_step",
    "rmsprop_step",
    "init_state",
    "optimizer_step",
    "predict",
    "evaluate",
    "fit",
]

LOSSES = ("softmax_xent", "spiral_xent", "mse", "periodic_penalty")


# -- losses ----------------------------------------------------------------

def loss_softmax_xent(logits, label):
    """Cross-entropy of ``softmax(logits)`` against a class index.

    Works on one example (``logits`` of shape ``(h,)``) or a batch
    ``(N, h)`` with integer labels ``(N,)``. Returns ``(loss, grad)`` where
    ``grad = softmax(logits) - onehot(label)``.
    """
    z = np.asarray(logits, dtype=np.float64)
    lab = np.asarray(label)
    h = z.shape[-1]
    if np.any(lab < 0) or np.any(lab >= h):
        raise DomainError(f"label out of range for {h} classes")
    zmax = z.max(axis=-1, keepdims=True)
    shifted = z - zmax
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    logp = shifted - lse
    onehot = np.zeros_like(z)
    np.put_along_axis(onehot, lab.reshape(lab.shape + (1,)).astype(np.int64), 1.0, axis=-1)
    loss = -(logp * onehot).sum(axis=-1)
    grad = np.exp(logp) - onehot
    if z.ndim == 1:
        loss = float(loss)
    return loss, grad


def loss_mse(pred, target):
    """Squared error averaged over output coordinates; returns ``(loss, grad)``."""
    pred = np.asarray(pred, dtype=np.float64)
    diff = pred - np.asarray(target, dtype=np.float64)
    h = pred.shape[-1]
    loss = (diff * diff).mean(axis=-1)
    return loss, 2.0 * diff / h


def loss_periodic(f_x, y, f_shift, cap=100.0):
    """``(f(x) - y)^2 + max(0, |f(2x + 6)| - cap)^2``.

    The caller evaluates the model at ``2x + 6`` and passes it as
    ``f_shift``. Returns ``(loss, d_loss/d_f_x, d_loss/d_f_shift)``; at
    ``|f_shift| == cap`` the subgradient 0 is used.
    """
    f_x = np.asarray(f_x, dtype=np.float64)
    f_shift = np.asarray(f_shift, dtype=np.float64)
    diff = f_x - y
    excess = np.maximum(0.0, np.abs(f_shift) - cap)
    loss = diff * diff + excess * excess
    g_x = 2.0 * diff
    g_shift = 2.0 * excess * np.sign(f_shift)
    if loss.ndim == 0:
        return float(loss), float(g_x), float(g_shift)
    return loss, g_x, g_shift


# -- configuration ---------------------------------------------------------

@dataclass
class SGD:
    """Momentum SGD: ``v <- mu v + g``, ``theta <- theta - lr v``."""

    momentum: float = 0.0
    decay: float = 0.0


@dataclass
class RMSprop:
    """``a <- rho a + (1 - rho) g^2``, ``theta <- theta - lr g / sqrt(a + eps)``."""

    decay: float = 0.0
    rho: float = 0.9
    eps: float = 1e-7


@dataclass
class Plateau:
    """Multiply the learning rate by ``factor`` after ``patience_epochs``
    epochs without improvement of the monitored metric."""

    patience_epochs: int
    factor: float = 0.2


@dataclass
class TrainConfig:
    optimizer: object = field(default_factory=RMSprop)
    learning_rate: float = 1e-3
    batch_size: int = 32
    max_epochs: int = 100
    plateau: Plateau = None
    early_stop_patience: int = None
    loss: str = "mse"
    activity_lambda: float = 0.0
    seed: int = 0
    validation_fraction: float = 0.0
    # "accuracy" or "loss"; None picks accuracy for classification data.
    monitor: str = None

    def __post_init__(self):
        if not isinstance(self.optimizer, (SGD, RMSprop)):
            raise ConfigError("optimizer must be SGD or RMSprop", "optimizer")
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be positive", "learning_rate")
        if int(self.batch_size) < 1:
            raise ConfigError("batch_size must be at least 1", "batch_size")
        if int(self.max_epochs) < 0:
            raise ConfigError("max_epochs must be non-negative", "max_epochs")
        if self.loss not in LOSSES:
            raise ConfigError(f"loss must be one of {LOSSES}", "loss")
        if self.activity_lambda < 0:
            raise ConfigError("activity_lambda must be non-negative", "activity_lambda")
        if not 0.0 <= self.validation_fraction < 1.0:
            raise ConfigError("validation_fraction must be in [0, 1)", "validation_fraction")
        if self.plateau is not None:
            if not 0.0 < self.plateau.factor < 1.0:
                raise ConfigError("plateau factor must be in (0, 1)", "plateau_factor")
            if self.plateau.patience_epochs < 1:
                raise ConfigError("plateau patience must be positive", "plateau_patience")
        if self.early_stop_patience is not None and self.early_stop_patience < 1:
            raise ConfigError("early_stop_patience must be positive", "early_stop_patience")
        if self.monitor not in (None, "accuracy", "loss"):
            raise ConfigError("monitor must be 'accuracy' or 'loss'", "monitor")
        if isinstance(self.optimizer, SGD) and self.optimizer.momentum < 0:
            raise ConfigError("momentum must be non-negative", "momentum")
        if isinstance(self.optimizer, RMSprop) and not 0.0 <= self.optimizer.rho < 1.0:
            raise ConfigError("rho must be in [0, 1)", "rho")
        self.batch_size = int(self.batch_size)
        self.max_epochs = int(self.max_epochs)


# -- optimizers ------------------------------------------------------------

@dataclass
class OptState:
    """Optimizer slots (momentum or square accumulator, shaped like the
    parameters), the number of steps taken, and the plateau multiplier."""

    slots: MLayerParams
    t: int = 0
    lr_scale: float = 1.0


def init_state(params):
    return OptState(MLayerParams.zeros(params.dims))


def _check_like(params, grads):
    for name in TENSOR_NAMES:
        if getattr(params, name).shape != getattr(grads, name).shape:
            raise DimensionError(f"gradient for {name} has the wrong shape")


def current_lr(state, config):
    return config.learning_rate * state.lr_scale / (1.0 + config.optimizer.decay * state.t)


def sgd_step(params, grads, state, config):
    _check_like(params, grads)
    lr = current_lr(state, config)
    mu = config.optimizer.momentum
    new_p, new_v = {}, {}
    for name in TENSOR_NAMES:
        v = mu * getattr(state.slots, name) + getattr(grads, name)
        new_v[name] = v
        new_p[name] = getattr(params, name) - lr * v
    return MLayerParams(**new_p), OptState(MLayerParams(**new_v), state.t + 1, state.lr_scale)


def rmsprop_step(params, grads, state, config):
    _check_like(params, grads)
    lr = current_lr(state, config)
    opt = config.optimizer
    new_p, new_a = {}, {}
    for name in TENSOR_NAMES:
        g = getattr(grads, name)
        a = opt.rho * getattr(state.slots, name) + (1.0 - opt.rho) * g * g
        new_a[name] = a
        new_p[name] = getattr(params, name) - lr * g / np.sqrt(a + opt.eps)
    return MLayerParams(**new_p), OptState(MLayerParams(**new_a), state.t + 1, state.lr_scale)


def optimizer_step(params, grads, state, config):
    if isinstance(config.optimizer, SGD):
        return sgd_step(params, grads, state, config)
    return rmsprop_step(params, grads, state, config)


# -- metrics ---------------------------------------------------------------

@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    val_acc: float
    lr: float
    seconds: float


@dataclass
class Metrics:
    records: list = field(default_factory=list)
    best_epoch: int = -1

    def __len__(self):
        return len(self.records)

    def to_csv(self, path=None):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epoch", "train_loss", "val_loss", "val_acc", "lr", "seconds"])
        for r in self.records:
            w.writerow([r.epoch, repr(r.train_loss), repr(r.val_loss), repr(r.val_acc),
                        repr(r.lr), f"{r.seconds:.3f}"])
        text = buf.getvalue()
        if path is not None:
            atomic_write_text(path, text)
        return text


# -- evaluation ------------------------------------------------------------

def predict(params, inputs, batch_size=1024):
    """Model outputs for many examples, evaluated in chunks."""
    X = np.asarray(inputs, dtype=np.float64)
    outs = [forward(params, X[i:i + batch_size]) for i in range(0, X.shape[0], batch_size)]
    return np.concatenate(outs, axis=0)


def _example_losses(params, X, y, loss, out=None):
    if out is None:
        out = predict(params, X)
    if loss in ("softmax_xent", "spiral_xent"):
        return loss_softmax_xent(out, y)[0], out
    if loss == "mse":
        return loss_mse(out, y)[0], out
    shifted = predict(params, 2.0 * X + 6.0)
    return loss_periodic(out[:, 0], y[:, 0], shifted[:, 0])[0], out


def evaluate(params, dataset, loss="mse"):
    """Mean loss and (for classification) accuracy; returns a dict."""
    losses, out = _example_losses(params, dataset.inputs, dataset.targets, loss)
    result = {"loss": float(np.mean(losses))}
    if dataset.kind == "classification":
        result["accuracy"] = float(np.mean(out.argmax(axis=1) == dataset.targets))
    else:
        result["mse"] = float(np.mean((out - dataset.targets) ** 2))
    return result


def _batch_grads(params, X, y, config):
    """Mean loss and gradients over one minibatch."""
    nb = X.shape[0]
    lam = config.activity_lambda
    if config.loss == "periodic_penalty":
        both = np.concatenate([X, 2.0 * X + 6.0], axis=0)
        out, cache = forward(params, both, return_cache=True)
        losses, g_x, g_s = loss_periodic(out[:nb, 0], y[:, 0], out[nb:, 0])
        g_out = np.concatenate([g_x, g_s])[:, None] / nb
        E = cache.expM[:nb]
    else:
        out, cache = forward(params, X, return_cache=True)
        if config.loss == "mse":
            losses, g = loss_mse(out, y)
        else:
            losses, g = loss_softmax_xent(out, y)
        g_out = g / nb
        E = cache.expM
    g_expm = None
    if lam > 0:
        reg = lam * np.einsum("njk,njk->n", E, E)
        losses = losses + reg
        g_expm = np.zeros_like(cache.expM)
        g_expm[:nb] = (2.0 * lam / nb) * E
    grads = backward(params, cache.x, g_out, cache=cache, g_expm=g_expm)
    return float(np.mean(losses)), grads


# -- training loop ---------------------------------------------------------

def fit(params, dataset, config, callback=None):
    """Train with minibatches and return ``(best_params, metrics)``.

    The monitored metric is validation accuracy (classification) or
    validation loss (regression). Without a validation split the training set
    is re-evaluated at the end of each epoch instead. The plateau schedule
    and early stopping count whole epochs since the last strict improvement.

    Raises
    ------
    TrainingDiverged
        If a batch loss is not finite; carries epoch and batch indices.
    """
    rng = np.random.default_rng(config.seed)
    N = len(dataset)
    if config.validation_fraction > 0:
        perm = rng.permutation(N)
        n_val = max(1, int(round(N * config.validation_fraction)))
        val_set = dataset.subset(perm[:n_val])
        train_set = dataset.subset(perm[n_val:])
    else:
        val_set = None
        train_set = dataset
    monitor = config.monitor or ("accuracy" if dataset.kind == "classification" else "loss")
    sign = 1.0 if monitor == "accuracy" else -1.0

    state = init_state(params)
    best = params.copy()
    best_score = -math.inf
    since_best = 0
    plateau_wait = 0
    metrics = Metrics()
    X, Y = train_set.inputs, train_set.targets
    n_train = X.shape[0]

    for epoch in range(config.max_epochs):
        t0 = time.perf_counter()
        order = rng.permutation(n_train)
        total = 0.0
        for b, start in enumerate(range(0, n_train, config.batch_size)):
            idx = order[start:start + config.batch_size]
            try:
                with np.errstate(over="ignore", invalid="ignore"):
                    loss, grads = _batch_grads(params, X[idx], Y[idx], config)
                if not math.isfinite(loss):
                    raise TrainingDiverged(epoch, b, loss)
                params, state = optimizer_step(params, grads, state, config)
            except DomainError as exc:
                # exp(M) or an update overflowed
                raise TrainingDiverged(epoch, b, math.nan) from exc
            total += loss * idx.size
        train_loss = total / n_train

        scored = val_set if val_set is not None else train_set
        ev = evaluate(params, scored, config.loss)
        val_acc = ev.get("accuracy", math.nan)
        score = sign * (val_acc if monitor == "accuracy" else ev["loss"])
        if not math.isfinite(ev["loss"]):
            raise TrainingDiverged(epoch, -1, ev["loss"])

        if score > best_score:
            best_score = score
            best = params.copy()
            metrics.best_epoch = epoch
            since_best = 0
            plateau_wait = 0
        else:
            since_best += 1
            plateau_wait += 1
            if config.plateau is not None and plateau_wait >= config.plateau.patience_epochs:
                state.lr_scale *= config.plateau.factor
                plateau_wait = 0

        rec = EpochRecord(epoch, train_loss, ev["loss"] if val_set is not None else math.nan,
                          val_acc if val_set is not None else math.nan,
                          current_lr(state, config), time.perf_counter() - t0)
        metrics.records.append(rec)
        if callback is not None:
            callback(rec, params)
        if config.early_stop_patience is not None and since_best >= config.early_stop_patience:
            break
    return best, metrics
