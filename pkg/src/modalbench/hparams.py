"""Hyperparameter registry: defaults and random-search distributions.

Each entry is (default, sampler). Trial 0 of every sweep takes the
default column verbatim; trials 1..8 draw each entry independently from
its distribution, on a stream keyed by (kind, entry, trial, sweep seed)
so adding an entry never perturbs the draws of another.
"""

from .algorithms import ALGORITHM_KINDS, algorithm_family
from .errors import ConfigError
from .rng import Rng


def _log_uniform(lo, hi):
    lo, hi = min(lo, hi), max(lo, hi)
    return lambda r: 10.0 ** r.uniform_range(lo, hi)


def _pow2_int(lo, hi):
    return lambda r: int(2.0 ** r.uniform_range(lo, hi))


def _uniform(lo, hi):
    return lambda r: r.uniform_range(lo, hi)


def _uniform_int(lo, hi):
    return lambda r: int(round(r.uniform_range(lo, hi)))


def _log_uniform_int(lo, hi):
    return lambda r: int(round(10.0 ** r.uniform_range(lo, hi)))


def _choice(options):
    return lambda r: r.choice(options)


def hparam_registry(kind):
    """Ordered {entry: (default, sampler)} for one algorithm kind."""
    if kind not in ALGORITHM_KINDS:
        raise ConfigError("unknown algorithm kind %r" % kind)
    family = algorithm_family(kind)
    hp = {}
    hp["batch_size"] = (32, _pow2_int(3, 5.5))
    if family == "mml":
        hp["lr"] = (0.001, _log_uniform(-4.5, -2.5))
        hp["momentum"] = (0.9, _uniform(0.85, 0.95))
        hp["weight_decay"] = (0.0001, _log_uniform(-3.5, -4.5))
        hp["patience"] = (70, _uniform_int(60, 80))
    else:
        hp["lr"] = (0.00005, _log_uniform(-5, -3.5))
        hp["weight_decay"] = (0.0, lambda r: 0.0)

    if kind == "OGM":
        hp["ogm_alpha"] = (0.1, _uniform(0.1, 0.3))
    elif kind == "DLMG":
        # gate weight on the gap term; not part of the search table
        hp["dlmg_lambda"] = (1.0, lambda r: 1.0)
    elif kind == "IRM":
        hp["irm_lambda"] = (100.0, _log_uniform(-1, 5))
        hp["irm_anneal_iters"] = (500, _log_uniform_int(0, 4))
    elif kind == "Mixup":
        hp["mixup_alpha"] = (0.2, _log_uniform(-1, 1))
    elif kind == "CDANN":
        hp["cdann_lambda"] = (1.0, _log_uniform(-2, -2))
        hp["disc_weight_decay"] = (0.0, _log_uniform(-6, -2))
        hp["disc_steps"] = (1, _pow2_int(0, 3))
        hp["grad_penalty"] = (0.0, _log_uniform(-2, 1))
        hp["disc_beta1"] = (0.5, _choice([0.0, 0.5]))
    elif kind == "SagNet":
        hp["sag_w_adv"] = (0.1, _log_uniform(-2, 1))
    elif kind == "IB_ERM":
        hp["ib_lambda"] = (100.0, _log_uniform(-1, 5))
        hp["ib_anneal_iters"] = (500, _log_uniform_int(0, 4))
    elif kind == "CondCAD":
        hp["ccad_lambda"] = (0.1, _choice([1e-4, 1e-3, 1e-2, 0.1, 1.0,
                                           10.0, 100.0]))
        hp["temperature"] = (0.1, _choice([0.05, 0.1]))
    elif kind == "EQRM":
        hp["lr"] = (0.000001, _log_uniform(-7, -5))
        hp["quantile"] = (0.75, _uniform(0.5, 0.99))
        hp["burnin_iters"] = (2500, _log_uniform_int(2.5, 3.5))
    elif kind == "ERM++":
        hp["lr"] = (0.00005, _log_uniform(-5, -3.5))
    elif kind == "URM":
        hp["urm_lambda"] = (0.1, _uniform(0.0, 0.2))
    return hp


def default_hparams(kind):
    return {name: default for name, (default, _) in hparam_registry(kind).items()}


def sample_trial_config(kind, trial_index, sweep_seed):
    """Hyperparameters for one trial; trial 0 is the default column."""
    if not 0 <= trial_index < 9:
        raise ConfigError("trial index %d outside [0, 9)" % trial_index)
    registry = hparam_registry(kind)
    if trial_index == 0:
        return {name: default for name, (default, _) in registry.items()}
    out = {}
    for name, (_, sampler) in registry.items():
        rng = Rng.from_key("hparam/%s/%s/%d" % (kind, name, trial_index),
                           sweep_seed)
        out[name] = sampler(rng)
    return out
