"""Trial execution: plans, deterministic training runs, and the results store.

A run plan fixes one dataset, one held-out test modality, and a set of
algorithms; the sweep executes trials x seeds jobs per algorithm (plus
leave-one-out sub-runs when enabled) over a process pool. Every job is a
pure function of (plan hash, algorithm, trial, seed), so records are
byte-identical across re-runs and worker counts, and a failed job
produces a failed record instead of stopping the sweep.
"""

import concurrent.futures
import fcntl
import functools
import hashlib
import json
import os
from dataclasses import dataclass, field

import numpy as np

from .algorithms import AlgorithmConfig, algorithm_family, build_algorithm
from .data import load_dataset, make_splits, sample_minibatch
from .errors import ConfigError, ModalbenchError
from .hparams import sample_trial_config
from .learner import init_learner
from .rng import Rng
from .selection import evaluate

SCHEMA_VERSION = 1
METRIC_CADENCE = 100
LARGE_DATASET_THRESHOLD = 20000
STEPS_SMALL = 5000
STEPS_LARGE = 10000


def resolve_steps(num_instances):
    """Default step budget by dataset size."""
    return STEPS_LARGE if num_instances > LARGE_DATASET_THRESHOLD else STEPS_SMALL


@dataclass
class RunPlan:
    """One sweep: dataset, held-out modality, algorithms, and budgets."""

    dataset: str
    test_modality: str
    regime: str
    algorithms: list
    trials: int = 9
    seeds: int = 3
    steps: int | None = None
    eval_batch: int = 4096
    loo: bool = False
    sweep_seed: int = 0
    holdout_fraction: float = 0.2
    metric_cadence: int = METRIC_CADENCE

    def to_json(self):
        return {
            "dataset": self.dataset,
            "test_modality": self.test_modality,
            "regime": self.regime,
            "algorithms": list(self.algorithms),
            "trials": self.trials,
            "seeds": self.seeds,
            "steps": self.steps,
            "eval_batch": self.eval_batch,
            "loo": self.loo,
            "sweep_seed": self.sweep_seed,
            "holdout_fraction": self.holdout_fraction,
            "metric_cadence": self.metric_cadence,
        }

    @property
    def plan_hash(self):
        blob = json.dumps(self.to_json(), sort_keys=True).encode("utf-8")
        return hashlib.sha256(blob).hexdigest()[:16]

    @classmethod
    def from_json(cls, raw):
        known = {f for f in cls.__dataclass_fields__}
        return cls(**{k: v for k, v in raw.items() if k in known})

    @classmethod
    def load(cls, path):
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_json(json.load(fh))


class ResultsStore:
    """Append-only JSONL store; one atomic write per record."""

    def __init__(self, path):
        self.path = path

    def append(self, record):
        line = json.dumps(_pyify(record), sort_keys=True) + "\n"
        data = line.encode("utf-8")
        fd = os.open(self.path, os.O_WRONLY | os.O_CREAT | os.O_APPEND, 0o644)
        try:
            fcntl.flock(fd, fcntl.LOCK_EX)
            os.write(fd, data)
        finally:
            os.close(fd)

    def read_all(self):
        records = []
        if not os.path.exists(self.path):
            return records
        with open(self.path, "r", encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if line:
                    records.append(json.loads(line))
        return records


def _pyify(value):
    if isinstance(value, dict):
        return {k: _pyify(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_pyify(v) for v in value]
    if isinstance(value, (np.floating,)):
        return float(value)
    if isinstance(value, (np.integer,)):
        return int(value)
    if isinstance(value, np.ndarray):
        return [_pyify(v) for v in value.tolist()]
    if isinstance(value, np.bool_):
        return bool(value)
    return value


@functools.lru_cache(maxsize=4)
def _cached_dataset(manifest_path):
    return load_dataset(manifest_path)


def _train_once(manifest, matrices, plan, kind, hparams, steps, token,
                train_modalities, split_seed, metric_sink=None):
    """Train one learner; returns the algorithm with final parameters.

    All randomness is derived from ``token``, which encodes the plan
    hash, algorithm, trial, and seed, so identical invocations replay
    identical float trajectories.
    """
    dims = {matrices[m].dim for m in train_modalities}
    if len(dims) != 1:
        raise ConfigError("training modalities disagree on embedding dim")
    input_dim = dims.pop()

    family = algorithm_family(kind)
    mode = "aligned" if family == "mml" else "independent"
    batch = int(hparams["batch_size"])

    train_idx, _ = make_splits(manifest.num_instances, plan.holdout_fraction,
                               seed=split_seed)
    train_mats = {
        m: _SlicedMatrix(matrices[m].embeddings[train_idx],
                         matrices[m].labels[train_idx])
        for m in train_modalities}
    batch = min(batch, train_idx.size)

    learner = init_learner(Rng.from_key(token + "#init", 0), input_dim,
                           manifest.num_classes)
    config = AlgorithmConfig(kind=kind, hparams=hparams, steps_budget=steps)
    algorithm = build_algorithm(config, learner, len(train_modalities),
                                Rng.from_key(token + "#alg", 0))
    batch_rng = Rng.from_key(token + "#batch", 0)

    for step in range(steps):
        drawn = sample_minibatch(batch_rng, train_mats, batch, mode)
        batches = [drawn[m] for m in train_modalities]
        metrics = algorithm.update(batches, mode)
        if metric_sink is not None and (step + 1) % plan.metric_cadence == 0:
            metric_sink(step + 1, metrics)
    return algorithm


class _SlicedMatrix:
    """Minimal ModalityMatrix view over pre-sliced rows."""

    def __init__(self, embeddings, labels):
        self.embeddings = embeddings
        self.labels = labels
        self.num_rows = embeddings.shape[0]
        self.dim = embeddings.shape[1]


def _split_seed(plan, seed_index):
    from .rng import derive_key
    return derive_key("split/%s/%s" % (plan.plan_hash, seed_index), 0)


def _job_token(plan, kind, trial, seed, held_out=None):
    token = "%s/%s/%s/trial%d/seed%d" % (plan.plan_hash, kind,
                                         plan.test_modality, trial, seed)
    if held_out is not None:
        token += "/loo-%s" % held_out
    return token


def _provenance(plan, kind, trial, seed):
    return {
        "schema_version": SCHEMA_VERSION,
        "plan_hash": plan.plan_hash,
        "dataset": None,  # filled from the manifest
        "algorithm": kind,
        "test_modality": plan.test_modality,
        "regime": plan.regime,
        "trial_index": trial,
        "seed_index": seed,
    }


def run_trial(plan, kind, trial, seed, held_out=None, metric_records=None):
    """Execute one training job; returns its record dict.

    ``held_out`` selects a leave-one-out sub-run that trains without the
    named training modality and reports accuracy on it. Numeric failures
    yield a record with status 'failed' rather than raising.
    """
    manifest, matrices = _cached_dataset(plan.dataset)
    record = _provenance(plan, kind, trial, seed)
    record["dataset"] = manifest.name
    hparams = sample_trial_config(kind, trial, plan.sweep_seed)
    steps = plan.steps if plan.steps is not None else resolve_steps(
        manifest.num_instances)
    record["steps"] = steps
    record["hparams"] = hparams

    if plan.regime != manifest.regime(plan.test_modality):
        raise ConfigError(
            "plan says %r but manifest implies %r for %s"
            % (plan.regime, manifest.regime(plan.test_modality),
               plan.test_modality))

    all_train = [m for m in manifest.modality_names()
                 if m != plan.test_modality]
    if plan.test_modality not in manifest.modality_names():
        raise ConfigError("unknown test modality %r" % plan.test_modality)
    spaces = sorted({manifest.modality(m).space_id for m in all_train})
    record["perceptor"] = spaces[0] if len(spaces) == 1 else "+".join(spaces)

    token = _job_token(plan, kind, trial, seed, held_out)
    split_seed = _split_seed(plan, str(seed))
    train_idx, val_idx = make_splits(manifest.num_instances,
                                     plan.holdout_fraction, seed=split_seed)

    def sink(step, metrics):
        if metric_records is None:
            return
        entry = {"type": "metrics", "plan_hash": plan.plan_hash,
                 "algorithm": kind, "test_modality": plan.test_modality,
                 "trial_index": trial, "seed_index": seed, "step": step}
        if held_out is not None:
            entry["held_out_modality"] = held_out
        for key in ("loss", "ce", "penalty", "lr"):
            if key in metrics:
                entry[key] = float(metrics[key])
        metric_records.append(entry)

    try:
        if held_out is None:
            record["type"] = "trial"
            algorithm = _train_once(manifest, matrices, plan, kind, hparams,
                                    steps, token, all_train, split_seed,
                                    metric_sink=sink)
            params = algorithm.eval_params()
            record["accuracies"] = {
                "train_val": {m: evaluate(params, matrices[m], val_idx)
                              for m in all_train},
                "test_val": evaluate(params, matrices[plan.test_modality],
                                     val_idx),
                "test": evaluate(params, matrices[plan.test_modality],
                                 train_idx),
            }
        else:
            if held_out not in all_train:
                raise ConfigError("held-out %r is not a training modality"
                                  % held_out)
            record["type"] = "loo_subrun"
            record["held_out_modality"] = held_out
            sub_train = [m for m in all_train if m != held_out]
            algorithm = _train_once(manifest, matrices, plan, kind, hparams,
                                    steps, token, sub_train, split_seed,
                                    metric_sink=sink)
            params = algorithm.eval_params()
            record["heldout_accuracy"] = evaluate(
                params, matrices[held_out], train_idx)
        record["status"] = "ok"
    except ModalbenchError as exc:
        record["status"] = "failed"
        record["error"] = "%s: %s" % (exc.code, exc)
    return record


def _execute_job(job):
    """Worker entry point; job is a plain JSON-able dict."""
    plan = RunPlan.from_json(job["plan"])
    metric_records = []
    record = run_trial(plan, job["kind"], job["trial"], job["seed"],
                       held_out=job.get("held_out"),
                       metric_records=metric_records)
    return record, metric_records


def enumerate_jobs(plan):
    """Deterministic job list for one plan."""
    manifest, _ = _cached_dataset(plan.dataset)
    train_modalities = [m for m in manifest.modality_names()
                        if m != plan.test_modality]
    jobs = []
    for kind in plan.algorithms:
        for trial in range(plan.trials):
            for seed in range(plan.seeds):
                if plan.loo:
                    for held in train_modalities:
                        jobs.append({"plan": plan.to_json(), "kind": kind,
                                     "trial": trial, "seed": seed,
                                     "held_out": held})
                jobs.append({"plan": plan.to_json(), "kind": kind,
                             "trial": trial, "seed": seed})
    return jobs


def run_sweep(plan, store, workers=1, emit_metrics=True, progress=None):
    """Run all jobs of a plan, appending records to the store.

    Job order never influences record contents; only the appender is
    serialized. A crashed worker marks its job failed and the sweep
    continues.
    """
    if workers < 1:
        raise ConfigError("workers must be >= 1")
    jobs = enumerate_jobs(plan)
    done = 0

    def consume(result):
        nonlocal done
        record, metric_records = result
        if emit_metrics:
            for entry in metric_records:
                store.append(entry)
        store.append(record)
        done += 1
        if progress:
            progress(done, len(jobs), record)

    if workers == 1:
        for job in jobs:
            consume(_execute_job(job))
        return store

    pool = concurrent.futures.ProcessPoolExecutor(max_workers=workers)
    futures = {pool.submit(_execute_job, job): job for job in jobs}
    consumed = set()

    def consume_future(fut):
        consumed.add(fut)
        job = futures[fut]
        try:
            consume(fut.result())
        except Exception as exc:  # worker crash: record and continue
            plan_obj = RunPlan.from_json(job["plan"])
            record = _provenance(plan_obj, job["kind"], job["trial"],
                                 job["seed"])
            record["type"] = "loo_subrun" if job.get("held_out") else "trial"
            if job.get("held_out"):
                record["held_out_modality"] = job["held_out"]
            record["status"] = "failed"
            record["error"] = "worker-crashed: %s" % exc
            consume((record, []))

    try:
        for fut in concurrent.futures.as_completed(futures):
            consume_future(fut)
    except KeyboardInterrupt:
        # drop the queue, drain in-flight jobs, keep the store consistent
        pool.shutdown(wait=True, cancel_futures=True)
        for fut in futures:
            if fut.done() and not fut.cancelled() and fut not in consumed:
                consume_future(fut)
        raise
    pool.shutdown(wait=True)
    return store
