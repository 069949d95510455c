"""Batched embedding extraction into the manifest + MBED contract.

One job covers one modality; a dataset assembly runs every job, keeps
the instances whose ids decode in every modality (so rows stay aligned),
and writes the manifest. A job fails outright when more than 1% of its
instances fail to decode.
"""

import json
import logging
import os
from dataclasses import dataclass, field

import numpy as np
import torch

from .mbed import (instance_alignment_digest, sha256_file, write_manifest,
                   write_mbed)
from .perceptors import (DEFAULT_EMBED_DIM, build_perceptor,
                         default_space_id)
from .raw import read_modality
from . import ssl as ssl_mod

log = logging.getLogger(__name__)

MAX_DROP_FRACTION = 0.01


class ExtractionError(RuntimeError):
    pass


@dataclass
class ExtractorJob:
    """One modality extraction task."""

    dataset_path: str
    modality_name: str
    perceptor: str
    output_dir: str
    modality_kind: str = "matrix"  # "matrix" | "text"
    device: str = "cpu"
    space_id: str | None = None
    checkpoint: str | None = None
    batch_size: int = 32
    embed_dim: int = DEFAULT_EMBED_DIM
    perceptor_options: dict = field(default_factory=dict)

    @classmethod
    def from_json(cls, raw):
        known = {f for f in cls.__dataclass_fields__}
        return cls(**{k: v for k, v in raw.items() if k in known})

    def resolved_space_id(self):
        return self.space_id or default_space_id(self.perceptor,
                                                 self.modality_name)


def _build_job_perceptor(job):
    perceptor = build_perceptor(job.perceptor, out_dim=job.embed_dim,
                                **job.perceptor_options)
    if job.checkpoint:
        ssl_mod.load_checkpoint(perceptor, job.checkpoint)
    perceptor.eval()
    return perceptor.to(job.device)


def extract_modality(job, perceptor=None):
    """Run one job; returns (ids, vectors, labels, alignment digest)."""
    instances, dropped = read_modality(job.dataset_path, job.modality_kind)
    total = len(instances) + len(dropped)
    for item in dropped:
        log.warning("%s: dropped instance %s", job.modality_name, item)
    if total == 0:
        raise ExtractionError("%s: empty dataset" % job.modality_name)
    if len(dropped) > MAX_DROP_FRACTION * total:
        raise ExtractionError(
            "%s: %d/%d instances undecodable, above the %.0f%% budget"
            % (job.modality_name, len(dropped), total,
               100 * MAX_DROP_FRACTION))
    if perceptor is None:
        perceptor = _build_job_perceptor(job)
    instances.sort(key=lambda inst: inst.instance_id)
    vectors = []
    with torch.no_grad():
        for start in range(0, len(instances), job.batch_size):
            chunk = instances[start:start + job.batch_size]
            out = perceptor.encode_payloads([inst.payload for inst in chunk])
            vectors.append(out.cpu().numpy().astype(np.float32))
    ids = [inst.instance_id for inst in instances]
    labels = np.array([inst.label for inst in instances], dtype=np.int64)
    return ids, np.concatenate(vectors), labels, instance_alignment_digest(ids)


def extract_dataset(name, num_classes, jobs, out_dir, perceptors=None):
    """Run all modality jobs and emit the aligned manifest + MBED files.

    Instances surviving decode in every modality are kept, sorted by id;
    labels must agree across modalities for the shared ids.
    """
    os.makedirs(out_dir, exist_ok=True)
    results = {}
    for job in jobs:
        perceptor = (perceptors or {}).get(job.modality_name)
        results[job.modality_name] = (job, extract_modality(job, perceptor))

    shared = None
    for _, (_, (ids, _, _, _)) in results.items():
        shared = set(ids) if shared is None else shared & set(ids)
    if not shared:
        raise ExtractionError("no instance ids shared across modalities")
    shared = sorted(shared)
    index = {iid: pos for pos, iid in enumerate(shared)}

    modalities = []
    reference_labels = None
    for modality_name, (job, (ids, vectors, labels, _)) in results.items():
        rows = np.full(len(shared), -1, dtype=np.int64)
        for pos, iid in enumerate(ids):
            if iid in index:
                rows[index[iid]] = pos
        aligned_vecs = vectors[rows]
        aligned_labels = labels[rows]
        if reference_labels is None:
            reference_labels = aligned_labels
        elif not np.array_equal(reference_labels, aligned_labels):
            raise ExtractionError("labels disagree across modalities")
        fname = "%s.mbed" % modality_name
        path = os.path.join(out_dir, fname)
        write_mbed(path, aligned_vecs, aligned_labels)
        modalities.append({"name": modality_name, "file": fname,
                           "dim": int(aligned_vecs.shape[1]),
                           "space_id": job.resolved_space_id(),
                           "sha256": sha256_file(path)})
    manifest_path = os.path.join(out_dir, "manifest.json")
    write_manifest(manifest_path, name, num_classes, len(shared), modalities)
    log.info("wrote %s with %d aligned instances", manifest_path, len(shared))
    return manifest_path


def load_dataset_job(path):
    """Dataset-level job file: name, classes, out dir, modality jobs."""
    with open(path, "r", encoding="utf-8") as fh:
        raw = json.load(fh)
    jobs = [ExtractorJob.from_json(j) for j in raw["modalities"]]
    return raw["name"], int(raw["num_classes"]), raw["out"], jobs
