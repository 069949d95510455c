"""Dense-layer arithmetic, losses, optimizers, and a finite-difference oracle.

Everything trains in float32 by default; gradient-check tests rebuild the
same computations in float64 so central differences are tight. All public
operations verify their outputs stay finite and raise NumericError
otherwise, which is what aborts a diverged trial.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DimensionError, NumericError

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8
PLATEAU_FACTOR = 0.5
PLATEAU_EMA = 0.9


def check_finite(x, context="operation"):
    """Raise NumericError if x contains NaN/Inf; returns x unchanged."""
    if not np.all(np.isfinite(x)):
        raise NumericError("non-finite values in %s" % context)
    return x


def affine(x, w, b):
    """y = x @ w + b with b broadcast over rows."""
    if x.ndim != 2 or w.ndim != 2:
        raise DimensionError("affine expects 2-d operands")
    if x.shape[1] != w.shape[0]:
        raise DimensionError(
            "affine: x has %d cols, w has %d rows" % (x.shape[1], w.shape[0]))
    if b.shape[-1] != w.shape[1]:
        raise DimensionError(
            "affine: bias length %d != %d output cols" % (b.shape[-1], w.shape[1]))
    return check_finite(x @ w + b, "affine output")


def affine_backward(x, w, dy):
    """Gradients of affine: (dw, db, dx) for upstream dy."""
    return x.T @ dy, dy.sum(axis=0), dy @ w.T


def relu(x):
    return np.maximum(x, 0.0)


def relu_backward(pre_activation, dy):
    """Upstream gradient masked by the sign of the pre-activation."""
    return dy * (pre_activation > 0)


def softmax(logits):
    """Row softmax with max-subtraction."""
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def log_softmax(logits):
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def softmax_cross_entropy(logits, labels):
    """Mean cross-entropy and its gradient w.r.t. the logits.

    Returns (loss, grad) with grad[i] = (softmax(logits[i]) - onehot(y_i)) / B.
    """
    check_finite(logits, "logits")
    b, c = logits.shape
    labels = np.asarray(labels)
    if labels.shape != (b,):
        raise DimensionError("labels shape %s != (%d,)" % (labels.shape, b))
    if labels.min() < 0 or labels.max() >= c:
        raise IndexError("label out of range for %d classes" % c)
    logp = log_softmax(logits)
    loss = float(-logp[np.arange(b), labels].mean())
    grad = np.exp(logp)
    grad[np.arange(b), labels] -= 1.0
    grad /= b
    return loss, grad.astype(logits.dtype, copy=False)


# -- optimizers ---------------------------------------------------------


@dataclass
class OptimizerState:
    """Per-parameter-list optimizer state for Adam or SGD with momentum.

    ``slots`` mirrors the parameter list: (m, v) pairs for Adam, a single
    velocity buffer for SGD. SGD additionally runs a reduce-on-plateau
    schedule over an exponential moving average of the training loss.
    """

    kind: str
    lr: float
    weight_decay: float = 0.0
    beta1: float = ADAM_BETA1
    beta2: float = ADAM_BETA2
    eps: float = ADAM_EPS
    momentum: float = 0.0
    plateau_patience: int = 0
    plateau_factor: float = PLATEAU_FACTOR
    step_count: int = 0
    loss_ema: float | None = None
    best_loss: float = math.inf
    plateau_wait: int = 0
    slots: list = field(default_factory=list)

    def __post_init__(self):
        if self.kind not in ("adam", "sgd"):
            raise ConfigError("unknown optimizer kind %r" % self.kind)
        if self.lr <= 0:
            raise ConfigError("lr must be strictly positive")

    def _ensure_slots(self, params):
        if self.slots:
            if len(self.slots) != len(params):
                raise DimensionError("optimizer slots do not match parameter list")
            return
        for p in params:
            if self.kind == "adam":
                self.slots.append((np.zeros_like(p), np.zeros_like(p)))
            else:
                self.slots.append(np.zeros_like(p))

    def reset_moments(self):
        """Drop accumulated moments/velocities (used at penalty anneal)."""
        self.slots = []
        self.step_count = 0


def adam_step(params, grads, state):
    """One in-place Adam update with bias correction.

    Weight decay is added to the gradient before the moment updates, so
    the decay interacts with the adaptive scaling exactly like classic
    L2 regularization.
    """
    if state.kind != "adam":
        raise ConfigError("adam_step requires an adam state")
    _check_param_grads(params, grads)
    state._ensure_slots(params)
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    correction = math.sqrt(1.0 - b2 ** t) / (1.0 - b1 ** t)
    step_size = state.lr * correction
    for p, g, (m, v) in zip(params, grads, state.slots):
        if state.weight_decay:
            g = g + state.weight_decay * p
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * np.square(g)
        p -= step_size * m / (np.sqrt(v) + state.eps)
    return params, state


def sgd_momentum_step(params, grads, state, loss=None):
    """One in-place SGD+momentum update, with plateau LR decay.

    v <- momentum*v + g + wd*p ; p <- p - lr*v. When ``loss`` is given,
    an EMA (factor 0.9) of it is tracked; ``plateau_patience`` steps
    without a new best EMA halve the learning rate (times
    ``plateau_factor``) and reset the wait counter.
    """
    if state.kind != "sgd":
        raise ConfigError("sgd_momentum_step requires an sgd state")
    _check_param_grads(params, grads)
    state._ensure_slots(params)
    state.step_count += 1
    for p, g, v in zip(params, grads, state.slots):
        if state.weight_decay:
            g = g + state.weight_decay * p
        v *= state.momentum
        v += g
        p -= state.lr * v
    if loss is not None and state.plateau_patience:
        ema = loss if state.loss_ema is None else (
            PLATEAU_EMA * state.loss_ema + (1.0 - PLATEAU_EMA) * loss)
        state.loss_ema = ema
        if ema < state.best_loss:
            state.best_loss = ema
            state.plateau_wait = 0
        else:
            state.plateau_wait += 1
            if state.plateau_wait >= state.plateau_patience:
                state.lr *= state.plateau_factor
                state.plateau_wait = 0
    return params, state


def optimizer_step(params, grads, state, loss=None):
    if state.kind == "adam":
        return adam_step(params, grads, state)
    return sgd_momentum_step(params, grads, state, loss=loss)


def _check_param_grads(params, grads):
    if len(params) != len(grads):
        raise DimensionError("parameter/gradient list length mismatch")
    for p, g in zip(params, grads):
        if p.shape != g.shape:
            raise DimensionError(
                "parameter shape %s != gradient shape %s" % (p.shape, g.shape))


# -- finite differences -------------------------------------------------


def finite_difference_gradient(f, x, eps=1e-5):
    """Central-difference gradient of scalar f at 1-d float64 point x."""
    x = np.asarray(x, dtype=np.float64)
    grad = np.empty_like(x)
    for i in range(x.size):
        xp = x.copy()
        xm = x.copy()
        xp[i] += eps
        xm[i] -= eps
        fp, fm = f(xp), f(xm)
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NumericError("non-finite objective in finite differences")
        grad[i] = (fp - fm) / (2.0 * eps)
    return grad


def finite_difference_at(f, arrays, coords, eps=1e-5):
    """Central differences of f(arrays) at selected (array, flat-index) coords.

    ``f`` takes the list of arrays and returns a scalar; arrays are
    perturbed in place and restored. Returns one estimate per coord.
    """
    out = []
    for ai, flat in coords:
        a = arrays[ai]
        orig = a.flat[flat]
        a.flat[flat] = orig + eps
        fp = f(arrays)
        a.flat[flat] = orig - eps
        fm = f(arrays)
        a.flat[flat] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NumericError("non-finite objective in finite differences")
        out.append((fp - fm) / (2.0 * eps))
    return np.array(out)


def relative_error(a, b, floor=1.0):
    """|a-b| / max(|a|, |b|, floor), elementwise max over arrays."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom))
