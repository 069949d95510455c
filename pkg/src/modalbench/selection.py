"""Model selection over completed trial records.

Three protocols pick one trial per seed for every (algorithm,
test-modality) cell: validation on the training modalities, leave-one-
modality-out cross-validation, and validation on the held-back slice of
the test modality (the oracle). All of them look only at final-
checkpoint accuracies, so the protocols differ purely in which
validation signal they trust.
"""

import numpy as np

from .errors import ConfigError, IncompleteTrialError, SelectionError
from .learner import predict

SELECTION_METHODS = ("training_modality", "leave_one_out", "oracle")


def evaluate(params, matrix, indices):
    """Accuracy percent of the learner on the given rows of one modality."""
    indices = np.asarray(indices)
    if indices.size == 0:
        raise ConfigError("evaluate needs a non-empty index set")
    x = matrix.embeddings[indices]
    y = matrix.labels[indices]
    pred = predict(params, x)
    return 100.0 * float(np.mean(pred == y))


def _ok_records(records):
    out = [r for r in records if r.get("status") == "ok"]
    if not out:
        raise SelectionError("no successful trials to select from")
    return out


def _argmax_per_seed(records, score_fn):
    """{seed_index: trial_index} maximizing score; ties pick the lowest trial."""
    chosen = {}
    best = {}
    for rec in sorted(records, key=lambda r: (r["seed_index"], r["trial_index"])):
        seed = rec["seed_index"]
        score = score_fn(rec)
        if seed not in chosen or score > best[seed]:
            chosen[seed] = rec["trial_index"]
            best[seed] = score
    return chosen


def select_training_modality(records):
    """Argmax of the mean in-modality validation accuracy, per seed."""
    records = _ok_records(records)

    def score(rec):
        vals = rec["accuracies"]["train_val"]
        return float(np.mean(list(vals.values())))

    return _argmax_per_seed(records, score)


def select_loo(records, subruns, num_train_modalities):
    """Argmax of the mean held-out-modality accuracy, per seed.

    Requires exactly one sub-run per held-out training modality for
    every (trial, seed); the returned directive points at the retrained
    full-modality model, which is the trial's main record.
    """
    records = _ok_records(records)
    by_key = {}
    for sub in subruns:
        if sub.get("status") != "ok":
            continue
        key = (sub["trial_index"], sub["seed_index"])
        by_key.setdefault(key, {})[sub["held_out_modality"]] = (
            sub["heldout_accuracy"])

    def score(rec):
        key = (rec["trial_index"], rec["seed_index"])
        accs = by_key.get(key, {})
        if len(accs) != num_train_modalities:
            raise IncompleteTrialError(
                "trial %d seed %d has %d/%d leave-one-out sub-runs"
                % (key[0], key[1], len(accs), num_train_modalities))
        return float(np.mean(list(accs.values())))

    chosen = _argmax_per_seed(records, score)
    directives = {}
    for rec in records:
        seed = rec["seed_index"]
        if chosen.get(seed) == rec["trial_index"]:
            directives[seed] = {"trial_index": rec["trial_index"],
                                "hparams": rec["hparams"],
                                "retrain_on": "all-training-modalities"}
    return chosen, directives


def select_oracle(records):
    """Argmax of the test-modality validation accuracy, per seed."""
    records = _ok_records(records)
    return _argmax_per_seed(records, lambda r: float(r["accuracies"]["test_val"]))


def selected_test_accuracies(records, chosen):
    """{seed: test accuracy} of the chosen trial per seed."""
    out = {}
    for rec in records:
        if rec.get("status") != "ok":
            continue
        seed = rec["seed_index"]
        if chosen.get(seed) == rec["trial_index"]:
            out[seed] = float(rec["accuracies"]["test"])
    return out


def run_selection(method, records, subruns=None, num_train_modalities=None):
    """Dispatch one protocol; returns ({seed: trial}, {seed: test acc})."""
    if method == "training_modality":
        chosen = select_training_modality(records)
    elif method == "leave_one_out":
        if num_train_modalities is None:
            raise ConfigError("leave_one_out needs the training modality count")
        chosen, _ = select_loo(records, subruns or [], num_train_modalities)
    elif method == "oracle":
        chosen = select_oracle(records)
    else:
        raise ConfigError("unknown selection method %r" % method)
    return chosen, selected_test_accuracies(records, chosen)
