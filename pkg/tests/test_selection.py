import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from modalbench import selection as S
from modalbench.data import ModalityMatrix
from modalbench.errors import (ConfigError, IncompleteTrialError,
                               SelectionError)
from modalbench.learner import init_learner
from modalbench.rng import Rng


def trial_record(trial, seed, train_val, test_val, test, status="ok"):
    return {
        "type": "trial", "status": status, "trial_index": trial,
        "seed_index": seed, "hparams": {"lr": 1e-4},
        "accuracies": {"train_val": train_val, "test_val": test_val,
                       "test": test},
    }


def subrun_record(trial, seed, held_out, acc, status="ok"):
    return {"type": "loo_subrun", "status": status, "trial_index": trial,
            "seed_index": seed, "held_out_modality": held_out,
            "heldout_accuracy": acc}


class TestTrainingModalitySelection:
    def test_argmax(self):
        records = [trial_record(t, 0, {"a": v, "b": v}, 0, 0)
                   for t, v in enumerate([30.0, 50.0, 40.0])]
        assert S.select_training_modality(records) == {0: 1}

    def test_tie_breaks_to_lowest_trial(self):
        records = [trial_record(t, 0, {"a": 50.0}, 0, 0) for t in (0, 1, 2)]
        assert S.select_training_modality(records) == {0: 0}

    def test_mean_over_training_modalities(self):
        records = [
            trial_record(0, 0, {"a": 80.0, "b": 0.0}, 0, 0),   # mean 40
            trial_record(1, 0, {"a": 45.0, "b": 45.0}, 0, 0),  # mean 45
        ]
        assert S.select_training_modality(records) == {0: 1}

    @given(st.lists(st.floats(min_value=0, max_value=100), min_size=2,
                    max_size=9, unique=True))
    @settings(max_examples=30, deadline=None)
    def test_invariant_to_monotone_transform(self, scores):
        records = [trial_record(t, 0, {"a": v}, 0, 0)
                   for t, v in enumerate(scores)]
        squashed = [trial_record(t, 0, {"a": 100.0 / (1 + np.exp(-v / 25))},
                                 0, 0)
                    for t, v in enumerate(scores)]
        assert (S.select_training_modality(records)
                == S.select_training_modality(squashed))

    def test_no_ok_records(self):
        with pytest.raises(SelectionError):
            S.select_training_modality(
                [trial_record(0, 0, {"a": 1}, 0, 0, status="failed")])

    def test_failed_trials_excluded(self):
        records = [trial_record(0, 0, {"a": 99.0}, 0, 0, status="failed"),
                   trial_record(1, 0, {"a": 10.0}, 0, 0)]
        assert S.select_training_modality(records) == {0: 1}


class TestLooSelection:
    def test_mean_of_heldout(self):
        records = [trial_record(t, 0, {"a": 0, "b": 0}, 0, 0)
                   for t in (0, 1)]
        subruns = (
            [subrun_record(0, 0, "a", 10.0), subrun_record(0, 0, "b", 20.0)]
            + [subrun_record(1, 0, "a", 30.0), subrun_record(1, 0, "b", 10.0)]
        )
        chosen, directives = S.select_loo(records, subruns, 2)
        assert chosen == {0: 1}  # mean 20 beats mean 15
        assert directives[0]["retrain_on"] == "all-training-modalities"

    def test_missing_subrun_raises(self):
        records = [trial_record(0, 0, {"a": 0, "b": 0}, 0, 0)]
        subruns = [subrun_record(0, 0, "a", 10.0)]
        with pytest.raises(IncompleteTrialError):
            S.select_loo(records, subruns, 2)

    def test_hand_mean(self):
        records = [trial_record(0, 0, {"a": 0, "b": 0, "c": 0}, 0, 0)]
        subruns = [subrun_record(0, 0, m, v)
                   for m, v in (("a", 10.0), ("b", 20.0), ("c", 30.0))]
        chosen, _ = S.select_loo(records, subruns, 3)
        assert chosen == {0: 0}


class TestOracleSelection:
    def test_argmax(self):
        records = [trial_record(t, 0, {"a": 0}, v, v)
                   for t, v in enumerate([30.0, 50.0, 40.0])]
        assert S.select_oracle(records) == {0: 1}

    def test_chosen_has_max_test_val(self):
        rng = Rng(3)
        records = []
        for seed in range(3):
            for t in range(9):
                records.append(trial_record(t, seed, {"a": 0},
                                            float(rng.uniform() * 100),
                                            float(rng.uniform() * 100)))
        chosen = S.select_oracle(records)
        for seed, trial in chosen.items():
            best = max(r["accuracies"]["test_val"] for r in records
                       if r["seed_index"] == seed)
            got = [r["accuracies"]["test_val"] for r in records
                   if r["seed_index"] == seed and r["trial_index"] == trial]
            assert got[0] == best

    def test_singleton_agrees_with_tm(self):
        records = [trial_record(0, 0, {"a": 42.0}, 13.0, 11.0)]
        assert S.select_oracle(records) == S.select_training_modality(records)

    def test_oracle_dominates_tm_on_test_val(self):
        rng = Rng(5)
        records = []
        for seed in range(3):
            for t in range(9):
                records.append(trial_record(
                    t, seed, {"a": float(rng.uniform() * 100)},
                    float(rng.uniform() * 100), float(rng.uniform() * 100)))
        oracle = S.select_oracle(records)
        tm = S.select_training_modality(records)

        def test_val(seed, trial):
            return next(r["accuracies"]["test_val"] for r in records
                        if r["seed_index"] == seed
                        and r["trial_index"] == trial)

        for seed in oracle:
            assert test_val(seed, oracle[seed]) >= test_val(seed, tm[seed])


class TestEvaluate:
    def _matrix(self, n=200, classes=4):
        rng = Rng(1)
        return ModalityMatrix(
            embeddings=rng.normal((n, 8)).astype(np.float32),
            labels=rng.integers(classes, n))

    def test_perfect_predictor(self, monkeypatch):
        m = self._matrix()
        params = init_learner(0, 8, 4)
        monkeypatch.setattr(S, "predict",
                            lambda p, x, batch=4096: m.labels.copy())
        acc = S.evaluate(params, m, np.arange(m.num_rows))
        assert acc == 100.0

    def test_constant_predictor_near_chance_on_balanced_labels(self):
        n, classes = 2000, 20
        labels = np.tile(np.arange(classes), n // classes)
        m = ModalityMatrix(
            embeddings=np.zeros((n, 8), dtype=np.float32), labels=labels)
        params = init_learner(0, 8, classes)
        acc = S.evaluate(params, m, np.arange(n))
        assert acc == pytest.approx(100.0 / classes, abs=1e-9)

    def test_shuffled_labels_within_binomial_interval(self):
        from scipy import stats
        rng = Rng(9)
        n, classes = 2000, 10
        m = ModalityMatrix(embeddings=rng.normal((n, 8)).astype(np.float32),
                           labels=rng.integers(classes, n))
        params = init_learner(3, 8, classes)
        acc = S.evaluate(params, m, np.arange(n)) / 100.0
        lo = stats.binom.ppf(0.005, n, 1.0 / classes) / n
        hi = stats.binom.ppf(0.995, n, 1.0 / classes) / n
        assert lo <= acc <= hi

    def test_empty_indices_rejected(self):
        with pytest.raises(ConfigError):
            S.evaluate(init_learner(0, 8, 4), self._matrix(), np.array([]))


def test_run_selection_dispatch():
    records = [trial_record(t, 0, {"a": v}, v, v)
               for t, v in enumerate([10.0, 20.0])]
    chosen, accs = S.run_selection("oracle", records)
    assert chosen == {0: 1} and accs == {0: 20.0}
    with pytest.raises(ConfigError):
        S.run_selection("nope", records)
