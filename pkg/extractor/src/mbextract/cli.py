"""CLI: train SSL perceptors and extract embedding datasets."""

import argparse
import json
import sys

import torch

from .extract import ExtractorJob, extract_dataset, load_dataset_job
from .perceptors import build_perceptor
from .raw import read_modality
from . import ssl as ssl_mod


def _cmd_extract(args):
    name, num_classes, out_dir, jobs = load_dataset_job(args.job)
    manifest = extract_dataset(name, num_classes, jobs, out_dir)
    print("wrote %s" % manifest)
    return 0


def _cmd_train_ssl(args):
    with open(args.job, "r", encoding="utf-8") as fh:
        raw = json.load(fh)
    job = ExtractorJob.from_json(raw)
    torch.manual_seed(args.seed)
    perceptor = build_perceptor(job.perceptor, out_dim=job.embed_dim,
                                **job.perceptor_options)
    instances, dropped = read_modality(job.dataset_path, job.modality_kind)
    if dropped:
        print("dropped %d undecodable instances" % len(dropped),
              file=sys.stderr)
    losses = ssl_mod.train_ssl(perceptor, instances, steps=args.steps,
                               seed=args.seed,
                               mask_ratio=raw.get("mask_ratio", 0.3))
    ssl_mod.save_checkpoint(perceptor, args.out,
                            metadata={"perceptor": job.perceptor,
                                      "steps": args.steps,
                                      "final_loss": losses[-1]})
    print("checkpoint %s (final loss %.4f)" % (args.out, losses[-1]))
    return 0


def build_parser():
    parser = argparse.ArgumentParser(
        prog="mbx",
        description="Embedding extraction over frozen perceptors into the"
                    " benchmark manifest + MBED dataset contract.")
    sub = parser.add_subparsers(dest="verb", required=True)

    p = sub.add_parser("extract", help="extract a full dataset")
    p.add_argument("--job", required=True,
                   help="dataset job JSON: {name, num_classes, out,"
                        " modalities: [per-modality jobs]}")
    p.set_defaults(fn=_cmd_extract)

    p = sub.add_parser("train-ssl", help="train an SSL perceptor")
    p.add_argument("--job", required=True, help="modality job JSON")
    p.add_argument("--steps", type=int, default=200)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="checkpoint path")
    p.set_defaults(fn=_cmd_train_ssl)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except Exception as exc:  # surface a single machine-parsable line
        sys.stderr.write("error code=%s message=%s\n"
                         % (type(exc).__name__, exc))
        return 1


if __name__ == "__main__":
    sys.exit(main())
