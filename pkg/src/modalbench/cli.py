"""Command-line surface: dataset generation, validation, training, sweeps,
selection, reports, and gradient checks.

Failures print one machine-parsable line ``error code=<code> message=...``
on stderr and exit 1; usage errors exit 2. All randomness flows from
``--seed`` (or the plan's sweep seed).
"""

import argparse
import json
import os
import sys

from .checks import run_gradcheck
from .data import load_dataset
from .errors import ConfigError, ModalbenchError
from .report import aggregate_report, render_csv, render_text
from .selection import run_selection
from .sweep import ResultsStore, RunPlan, run_sweep, run_trial
from .synthetic import SyntheticSpec, generate_synthetic


def _fail(exc):
    code = exc.code if isinstance(exc, ModalbenchError) else "error"
    sys.stderr.write("error code=%s message=%s\n" % (code, exc))
    return 1


def _cmd_gen_synthetic(args):
    spec = SyntheticSpec.from_json(args.spec)
    manifest_path = generate_synthetic(spec, args.seed, args.out)
    print("wrote %s" % manifest_path)
    return 0


def _cmd_validate(args):
    manifest, matrices = load_dataset(args.manifest)
    print("ok name=%s instances=%d classes=%d modalities=%s"
          % (manifest.name, manifest.num_instances, manifest.num_classes,
             ",".join(manifest.modality_names())))
    for name, m in matrices.items():
        info = manifest.modality(name)
        print("  %s dim=%d space=%s" % (name, m.dim, info.space_id))
    return 0


def _plan_from_args(args):
    manifest, _ = load_dataset(args.manifest)
    regime = args.regime or manifest.regime(args.test_modality)
    return RunPlan(dataset=os.path.abspath(args.manifest),
                   test_modality=args.test_modality,
                   regime=regime,
                   algorithms=[args.algorithm],
                   trials=1, seeds=1,
                   steps=args.steps,
                   sweep_seed=args.seed)


def _cmd_train(args):
    plan = _plan_from_args(args)
    metrics = []
    record = run_trial(plan, args.algorithm, args.trial, 0,
                       metric_records=metrics)
    payload = {"record": record, "metrics": metrics}
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            json.dump(payload, fh, indent=2, sort_keys=True)
            fh.write("\n")
    print(json.dumps(record, sort_keys=True))
    return 0 if record["status"] == "ok" else 1


def _cmd_sweep(args):
    plan = RunPlan.load(args.plan)
    store = ResultsStore(args.out)
    done = run_sweep(plan, store, workers=args.workers,
                     progress=lambda done, total, rec: print(
                         "[%d/%d] %s trial=%s seed=%s status=%s"
                         % (done, total, rec["algorithm"], rec["trial_index"],
                            rec["seed_index"], rec["status"])))
    print("store: %s" % done.path)
    return 0


def _cmd_select(args):
    store = ResultsStore(args.store)
    records = store.read_all()
    trials = [r for r in records if r.get("type") == "trial"]
    subruns = [r for r in records if r.get("type") == "loo_subrun"]
    if not trials:
        raise ConfigError("store has no trial records")
    groups = {}
    for rec in trials:
        key = (rec["dataset"], rec["algorithm"], rec["test_modality"])
        groups.setdefault(key, []).append(rec)
    out = {}
    for (dataset, algorithm, modality), recs in sorted(groups.items()):
        ok = [r for r in recs if r["status"] == "ok"]
        k_train = len(ok[0]["accuracies"]["train_val"]) if ok else 0
        subs = [s for s in subruns
                if (s["dataset"], s["algorithm"], s["test_modality"])
                == (dataset, algorithm, modality)]
        chosen, accs = run_selection(args.method, recs, subruns=subs,
                                     num_train_modalities=k_train)
        out["%s/%s/%s" % (dataset, algorithm, modality)] = {
            "chosen_trial_per_seed": {str(k): v for k, v in chosen.items()},
            "test_accuracy_per_seed": {str(k): v for k, v in accs.items()},
        }
    print(json.dumps(out, indent=2, sort_keys=True))
    return 0


def _cmd_report(args):
    store = ResultsStore(args.store)
    report = aggregate_report(store.read_all())
    text = render_text(report)
    csv = render_csv(report)
    if args.out_prefix:
        with open(args.out_prefix + ".txt", "w", encoding="utf-8") as fh:
            fh.write(text)
        with open(args.out_prefix + ".csv", "w", encoding="utf-8") as fh:
            fh.write(csv)
    print(text, end="")
    return 0


def _cmd_gradcheck(args):
    return 0 if run_gradcheck(seed=args.seed) else 1


def build_parser():
    parser = argparse.ArgumentParser(
        prog="modalbench",
        description="Benchmark harness for modality-generalization training,"
                    " sweeps, and model selection over frozen embeddings.")
    sub = parser.add_subparsers(dest="verb", required=True)

    p = sub.add_parser("gen-synthetic", help="generate a synthetic dataset")
    p.add_argument("--spec", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=_cmd_gen_synthetic)

    p = sub.add_parser("validate", help="validate a dataset manifest")
    p.add_argument("--manifest", required=True)
    p.set_defaults(fn=_cmd_validate)

    p = sub.add_parser("train", help="run one training job")
    p.add_argument("--manifest", required=True)
    p.add_argument("--algorithm", required=True)
    p.add_argument("--test-modality", required=True)
    p.add_argument("--regime", choices=["weak", "strong"])
    p.add_argument("--steps", type=int)
    p.add_argument("--trial", type=int, default=0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(fn=_cmd_train)

    p = sub.add_parser("sweep", help="run a full hyperparameter sweep")
    p.add_argument("--plan", required=True)
    p.add_argument("--workers", type=int,
                   default=int(os.environ.get("MODALBENCH_WORKERS", "1")))
    p.add_argument("--out", required=True)
    p.set_defaults(fn=_cmd_sweep)

    p = sub.add_parser("select", help="apply one selection method to a store")
    p.add_argument("--store", required=True)
    p.add_argument("--method", required=True,
                   choices=["training_modality", "leave_one_out", "oracle"])
    p.set_defaults(fn=_cmd_select)

    p = sub.add_parser("report", help="render tables from a results store")
    p.add_argument("--store", required=True)
    p.add_argument("--out-prefix")
    p.set_defaults(fn=_cmd_report)

    p = sub.add_parser("gradcheck", help="run finite-difference oracles")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=_cmd_gradcheck)

    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except ModalbenchError as exc:
        return _fail(exc)
    except OSError as exc:
        return _fail(exc)


if __name__ == "__main__":
    sys.exit(main())
