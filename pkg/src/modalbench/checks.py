"""Finite-difference verification suites, runnable from the CLI.

Central differences in float64 are the independent oracle for every
analytic gradient: the individual layer operations, the full learner
backward pass, and the closed-form invariant-risk penalty gradient.
"""

import numpy as np

from .algorithms import irm_penalty
from .learner import forward_loss_backward, init_learner
from .numerics import (affine, affine_backward, finite_difference_at,
                       relative_error, relu, relu_backward,
                       softmax_cross_entropy)
from .rng import Rng

EPS = 1e-5


def _as_float(f):
    return lambda arrays: float(f(arrays))


def gradcheck_affine(seed, cases=10):
    rng = Rng.from_key("gradcheck/affine", seed)
    worst = 0.0
    for _ in range(cases):
        b = 1 + rng.integers(6)
        i = 1 + rng.integers(8)
        o = 1 + rng.integers(8)
        x = rng.normal((b, i))
        w = rng.normal((i, o))
        bias = rng.normal(o)
        proj = rng.normal((b, o))
        dw, db, dx = affine_backward(x, w, proj)
        arrays = [x, w, bias]
        coords = [(ai, j) for ai, a in enumerate(arrays)
                  for j in range(a.size)]
        fd = finite_difference_at(
            _as_float(lambda arr: (affine(arr[0], arr[1], arr[2]) * proj).sum()),
            arrays, coords, eps=EPS)
        analytic = np.concatenate([dx.ravel(), dw.ravel(), db.ravel()])
        worst = max(worst, relative_error(analytic, fd))
    return worst


def gradcheck_relu(seed, cases=10):
    rng = Rng.from_key("gradcheck/relu", seed)
    worst = 0.0
    for _ in range(cases):
        n = 2 + rng.integers(40)
        # keep values away from the kink so differences are exact
        x = rng.normal(n)
        x = np.where(np.abs(x) < 1e-3, x + 0.01, x)
        proj = rng.normal(n)
        analytic = relu_backward(x, proj)
        fd = finite_difference_at(
            _as_float(lambda arr: (relu(arr[0]) * proj).sum()),
            [x], [(0, j) for j in range(n)], eps=EPS)
        worst = max(worst, relative_error(analytic, fd))
    return worst


def gradcheck_softmax_ce(seed, cases=10):
    rng = Rng.from_key("gradcheck/softmax", seed)
    worst = 0.0
    for _ in range(cases):
        b = 1 + rng.integers(6)
        c = 2 + rng.integers(6)
        logits = rng.normal((b, c)) * 3.0
        labels = rng.integers(c, b)
        _, grad = softmax_cross_entropy(logits, labels)
        fd = finite_difference_at(
            _as_float(lambda arr: softmax_cross_entropy(arr[0], labels)[0]),
            [logits], [(0, j) for j in range(logits.size)], eps=EPS)
        worst = max(worst, relative_error(grad.ravel(), fd))
    return worst


def gradcheck_learner(seed, cases=10, input_dim=16, num_classes=5, batch=4,
                      coords_per_array=4):
    """Full featurizer+classifier+CE backward vs sampled central differences."""
    worst = 0.0
    for case in range(cases):
        rng = Rng.from_key("gradcheck/learner/%d" % case, seed)
        params = init_learner(rng, input_dim, num_classes, dtype=np.float64)
        x = rng.normal((batch, input_dim))
        labels = rng.integers(num_classes, batch)
        _, grads, _ = forward_loss_backward(params, x, labels)
        arrays = params.arrays()
        coords = []
        for ai, a in enumerate(arrays):
            for _ in range(coords_per_array):
                coords.append((ai, rng.integers(a.size)))

        def loss_fn(_arrays):
            loss, _, _ = forward_loss_backward(params, x, labels)
            return loss

        fd = finite_difference_at(loss_fn, arrays, coords, eps=EPS)
        analytic = np.array([grads[ai][np.unravel_index(j, grads[ai].shape)]
                             for ai, j in coords])
        worst = max(worst, relative_error(analytic, fd))
    return worst


def gradcheck_irm(seed, cases=10):
    """Closed-form penalty gradient vs full central differences."""
    rng = Rng.from_key("gradcheck/irm", seed)
    worst = 0.0
    for _ in range(cases):
        b = 1 + rng.integers(6)
        c = 2 + rng.integers(5)
        logits = rng.normal((b, c)) * 2.0
        labels = rng.integers(c, b)
        _, grad = irm_penalty(logits, labels)
        fd = finite_difference_at(
            _as_float(lambda arr: irm_penalty(arr[0], labels)[0]),
            [logits], [(0, j) for j in range(logits.size)], eps=EPS)
        worst = max(worst, relative_error(grad.ravel(), fd))
    return worst


SUITES = (
    ("affine", gradcheck_affine, 1e-5),
    ("relu", gradcheck_relu, 1e-5),
    ("softmax-cross-entropy", gradcheck_softmax_ce, 1e-5),
    ("learner-backward", gradcheck_learner, 1e-5),
    ("irm-penalty", gradcheck_irm, 1e-4),
)


def run_gradcheck(seed=0, emit=print):
    """Run all suites; returns True when every one meets its tolerance."""
    all_ok = True
    for name, fn, tolerance in SUITES:
        err = fn(seed)
        ok = err <= tolerance
        all_ok = all_ok and ok
        emit("%s %s: max rel err %.3e (tolerance %.0e)"
             % ("PASS" if ok else "FAIL", name, err, tolerance))
    return all_ok
