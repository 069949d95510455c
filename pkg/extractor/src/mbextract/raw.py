"""Raw dataset readers with per-instance decode guards.

Two layouts are supported per modality:

- matrix modalities: an .npz with ``data`` (float array [N, H, W] for
  single-frame inputs or [N, T, H, W] for frame sequences), ``labels``
  (int [N]) and ``ids`` (int [N]). Frames of a sequence are encoded
  separately and mean-pooled downstream.
- text modalities: a JSONL file, one object per instance with ``id``,
  ``label``, and ``text`` fields.

Decoding yields (id, payload, label) per instance; instances that fail
to decode are reported to the caller, which drops and logs them.
"""

import json

import numpy as np


class DecodeError(Exception):
    pass


class RawInstance:
    __slots__ = ("instance_id", "payload", "label")

    def __init__(self, instance_id, payload, label):
        self.instance_id = instance_id
        self.payload = payload
        self.label = label


def iter_matrix_instances(path):
    """Yield (ok, instance-or-error) over an .npz matrix modality."""
    archive = np.load(path, allow_pickle=False)
    for key in ("data", "labels", "ids"):
        if key not in archive:
            raise DecodeError("%s: missing array %r" % (path, key))
    data, labels, ids = archive["data"], archive["labels"], archive["ids"]
    if not len(data) == len(labels) == len(ids):
        raise DecodeError("%s: data/labels/ids lengths differ" % path)
    for i in range(len(data)):
        payload = np.asarray(data[i], dtype=np.float32)
        if payload.ndim not in (2, 3) or not np.all(np.isfinite(payload)):
            yield False, (int(ids[i]), "undecodable matrix instance")
            continue
        yield True, RawInstance(int(ids[i]), payload, int(labels[i]))


def iter_text_instances(path):
    """Yield (ok, instance-or-error) over a JSONL text modality."""
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh):
            line = line.strip()
            if not line:
                continue
            try:
                raw = json.loads(line)
                text = raw["text"]
                if not isinstance(text, str) or not text.strip():
                    raise KeyError("empty text")
                yield True, RawInstance(int(raw["id"]), text,
                                        int(raw["label"]))
            except (ValueError, KeyError, TypeError) as exc:
                yield False, (line_no, "undecodable text line: %s" % exc)


def read_modality(path, kind):
    """Collect decodable instances; returns (instances, dropped)."""
    iterator = (iter_text_instances(path) if kind == "text"
                else iter_matrix_instances(path))
    instances, dropped = [], []
    for ok, item in iterator:
        if ok:
            instances.append(item)
        else:
            dropped.append(item)
    return instances, dropped
