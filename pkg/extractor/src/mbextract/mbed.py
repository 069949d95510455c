"""Writers for the benchmark harness's dataset contract.

Implemented independently from the harness so this package depends only
on the documented formats: manifest JSON plus per-modality MBED binaries
(magic "MBED", version u16, rows u32, dim u32, little-endian float32
row-major values, then rows u32 labels), rows instance-aligned.
"""

import hashlib
import json
import struct

import numpy as np

MBED_MAGIC = b"MBED"
MBED_VERSION = 1
MANIFEST_VERSION = 1


def sha256_file(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_mbed(path, embeddings, labels):
    embeddings = np.ascontiguousarray(embeddings, dtype="<f4")
    labels = np.ascontiguousarray(labels, dtype="<u4")
    rows, dim = embeddings.shape
    if labels.shape != (rows,):
        raise ValueError("labels length %d != %d rows" % (labels.shape[0], rows))
    with open(path, "wb") as fh:
        fh.write(MBED_MAGIC)
        fh.write(struct.pack("<HII", MBED_VERSION, rows, dim))
        fh.write(embeddings.tobytes())
        fh.write(labels.tobytes())


def write_manifest(path, name, num_classes, num_instances, modalities):
    """modalities: list of dicts {name, file, dim, space_id, sha256}."""
    payload = {
        "schema_version": MANIFEST_VERSION,
        "name": name,
        "num_classes": int(num_classes),
        "num_instances": int(num_instances),
        "modalities": modalities,
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


def instance_alignment_digest(ids):
    """Order-sensitive hash of instance ids, for alignment spot checks."""
    h = hashlib.sha256()
    for value in ids:
        h.update(str(value).encode("utf-8"))
        h.update(b"\x1f")
    return h.hexdigest()
