"""Embedding dataset formats, validation, splits, and minibatch sampling.

A dataset is a JSON manifest plus one binary MBED file per modality.
Rows are instance-aligned across modalities: row i of every modality
refers to the same underlying instance and carries the same label, which
is what aligned (paired) minibatch sampling relies on.

MBED layout, little-endian: magic "MBED", version u16, rows u32, dim
u32, rows*dim float32 values (row-major), then rows u32 labels.
"""

import hashlib
import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import (AlignmentError, ConfigError, DigestError, FormatError,
                     LabelRangeError, RowCountError)

MBED_MAGIC = b"MBED"
MBED_VERSION = 1
MANIFEST_VERSION = 1
DEFAULT_HOLDOUT_FRACTION = 0.2


@dataclass
class ModalityMatrix:
    """One modality's embeddings [N x D] and instance labels [N]."""

    embeddings: np.ndarray
    labels: np.ndarray

    @property
    def num_rows(self):
        return self.embeddings.shape[0]

    @property
    def dim(self):
        return self.embeddings.shape[1]


@dataclass
class ModalityInfo:
    name: str
    file: str
    dim: int
    space_id: str
    sha256: str


@dataclass
class DatasetManifest:
    name: str
    num_classes: int
    num_instances: int
    modalities: list = field(default_factory=list)

    def modality_names(self):
        return [m.name for m in self.modalities]

    def modality(self, name):
        for m in self.modalities:
            if m.name == name:
                return m
        raise ConfigError("unknown modality %r" % name)

    def regime(self, test_modality):
        """'weak' when the test modality shares the training embedding space."""
        train_spaces = {m.space_id for m in self.modalities
                        if m.name != test_modality}
        test_space = self.modality(test_modality).space_id
        return "weak" if train_spaces == {test_space} else "strong"

    def to_json(self):
        return {
            "schema_version": MANIFEST_VERSION,
            "name": self.name,
            "num_classes": self.num_classes,
            "num_instances": self.num_instances,
            "modalities": [
                {"name": m.name, "file": m.file, "dim": m.dim,
                 "space_id": m.space_id, "sha256": m.sha256}
                for m in self.modalities
            ],
        }


def sha256_file(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_mbed(path, embeddings, labels):
    """Write one modality to the MBED binary format."""
    embeddings = np.ascontiguousarray(embeddings, dtype="<f4")
    labels = np.ascontiguousarray(labels, dtype="<u4")
    rows, dim = embeddings.shape
    if labels.shape != (rows,):
        raise RowCountError("labels length %d != %d rows" % (labels.shape[0], rows))
    with open(path, "wb") as fh:
        fh.write(MBED_MAGIC)
        fh.write(struct.pack("<HII", MBED_VERSION, rows, dim))
        fh.write(embeddings.tobytes())
        fh.write(labels.tobytes())


def read_mbed(path):
    """Read one MBED file into a ModalityMatrix."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != MBED_MAGIC:
        raise FormatError("bad MBED magic in %s" % path, code="format-magic")
    if len(blob) < 14:
        raise FormatError("truncated MBED header in %s" % path,
                          code="format-truncated")
    version, rows, dim = struct.unpack_from("<HII", blob, 4)
    if version != MBED_VERSION:
        raise FormatError("unsupported MBED version %d" % version,
                          code="format-version")
    need = 14 + 4 * rows * dim + 4 * rows
    if len(blob) != need:
        raise RowCountError(
            "%s: %d bytes, expected %d for %d rows" % (path, len(blob), need, rows))
    data = np.frombuffer(blob, dtype="<f4", count=rows * dim, offset=14)
    labels = np.frombuffer(blob, dtype="<u4", count=rows, offset=14 + 4 * rows * dim)
    return ModalityMatrix(embeddings=data.reshape(rows, dim).copy(),
                          labels=labels.astype(np.int64))


def write_manifest(manifest, path):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(manifest.to_json(), fh, indent=2, sort_keys=True)
        fh.write("\n")


def _parse_manifest(path):
    with open(path, "r", encoding="utf-8") as fh:
        raw = json.load(fh)
    try:
        manifest = DatasetManifest(
            name=raw["name"],
            num_classes=int(raw["num_classes"]),
            num_instances=int(raw["num_instances"]),
            modalities=[ModalityInfo(name=m["name"], file=m["file"],
                                     dim=int(m["dim"]), space_id=m["space_id"],
                                     sha256=m["sha256"])
                        for m in raw["modalities"]],
        )
    except (KeyError, TypeError) as exc:
        raise FormatError("manifest missing field: %s" % exc,
                          code="manifest-schema")
    if not manifest.modalities:
        raise FormatError("manifest lists no modalities", code="manifest-schema")
    return manifest


def load_dataset(manifest_path, verify_digests=True):
    """Load and validate a dataset; returns (manifest, {name: matrix}).

    Raises with a distinct error code per failure: digest-mismatch,
    row-count-mismatch, label-range, label-alignment, dimension issues.
    """
    import os

    manifest = _parse_manifest(manifest_path)
    base = os.path.dirname(os.path.abspath(manifest_path))
    matrices = {}
    reference_labels = None
    for info in manifest.modalities:
        path = info.file
        if not os.path.isabs(path):
            path = os.path.join(base, path)
        if verify_digests:
            digest = sha256_file(path)
            if digest != info.sha256:
                raise DigestError("digest mismatch for %s" % info.name)
        matrix = read_mbed(path)
        if matrix.num_rows != manifest.num_instances:
            raise RowCountError(
                "%s has %d rows, manifest says %d"
                % (info.name, matrix.num_rows, manifest.num_instances))
        if matrix.dim != info.dim:
            raise FormatError(
                "%s has dim %d, manifest says %d" % (info.name, matrix.dim, info.dim),
                code="dim-mismatch")
        if matrix.labels.size and matrix.labels.max() >= manifest.num_classes:
            raise LabelRangeError(
                "%s contains label >= %d" % (info.name, manifest.num_classes))
        if reference_labels is None:
            reference_labels = matrix.labels
        elif not np.array_equal(reference_labels, matrix.labels):
            raise AlignmentError("label vectors differ between modalities")
        matrices[info.name] = matrix
    return manifest, matrices


def make_splits(num_rows, holdout_fraction=DEFAULT_HOLDOUT_FRACTION, seed=0):
    """Deterministic shuffle-then-cut; returns (train_idx, val_idx)."""
    from .rng import Rng

    if not 0.0 < holdout_fraction < 1.0:
        raise ConfigError("holdout fraction must be in (0, 1)")
    rng = Rng.from_key("split", seed)
    perm = rng.permutation(num_rows)
    n_val = max(1, int(num_rows * holdout_fraction))
    if n_val >= num_rows:
        raise ConfigError("holdout fraction leaves no training rows")
    return np.sort(perm[n_val:]), np.sort(perm[:n_val])


def sample_minibatch(rng, matrices, batch, mode):
    """Draw per-modality batches without replacement.

    mode 'aligned' shares one index set across modalities (paired
    instances, identical labels); 'independent' draws fresh indices per
    modality. ``matrices`` is an ordered dict of ModalityMatrix.
    """
    if mode not in ("aligned", "independent"):
        raise ConfigError("unknown batch mode %r" % mode)
    names = list(matrices)
    out = {}
    if mode == "aligned":
        n = matrices[names[0]].num_rows
        idx = rng.sample_without_replacement(n, batch)
        for name in names:
            m = matrices[name]
            if m.num_rows != n:
                raise RowCountError("aligned sampling requires equal row counts")
            out[name] = (m.embeddings[idx], m.labels[idx])
    else:
        for name in names:
            m = matrices[name]
            idx = rng.sample_without_replacement(m.num_rows, batch)
            out[name] = (m.embeddings[idx], m.labels[idx])
    return out
