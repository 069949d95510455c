import json

import numpy as np

TINY_VIT = dict(image_size=16, patch_size=4, num_channels=1, hidden_size=32,
                num_hidden_layers=2, num_attention_heads=2,
                intermediate_size=64)
TINY_T5 = dict(vocab_size=512, d_model=32, d_kv=8, d_ff=64, num_layers=2,
               num_heads=2)

WORDS = ("drum", "violin", "rain", "engine", "voice", "bell", "wave",
         "crowd", "wind", "hum")


def write_matrix_modality(path, n=100, classes=4, frames=None, seed=0,
                          corrupt_ids=()):
    """Tiny class-structured 16x16 'frames' with labels and ids."""
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, classes, n)
    base = rng.normal(size=(classes, 16, 16)).astype(np.float32)
    shape = (n, frames, 16, 16) if frames else (n, 16, 16)
    data = rng.normal(scale=0.3, size=shape).astype(np.float32)
    if frames:
        data += base[labels][:, None]
    else:
        data += base[labels]
    for iid in corrupt_ids:
        data[iid] = np.nan
    np.savez(path, data=data, labels=labels, ids=np.arange(n))
    return labels


def write_text_modality(path, labels, seed=0, corrupt_ids=()):
    rng = np.random.default_rng(seed)
    with open(path, "w", encoding="utf-8") as fh:
        for iid, label in enumerate(labels):
            if iid in corrupt_ids:
                fh.write(json.dumps({"id": iid, "label": int(label)}) + "\n")
                continue
            words = [WORDS[label]] * 3 + [WORDS[rng.integers(0, len(WORDS))]
                                          for _ in range(4)]
            rng.shuffle(words)
            fh.write(json.dumps({"id": iid, "label": int(label),
                                 "text": " ".join(words)}) + "\n")
