"""Masked two-view contrastive training for the SSL perceptors.

Each instance yields two views by independently zeroing 30% of its
elements (pixels for matrix inputs, token ids for text); the in-batch
InfoNCE objective pulls the two views of an instance together against
the rest of the batch. Only the LoRA adapters and the projection head
train; the pretrained encoder stays frozen. Labels are never touched.
"""

import logging
import warnings

import numpy as np
import torch
from torch import nn

from .lora import trainable_parameters

log = logging.getLogger(__name__)

MASK_RATIO = 0.3
TEXT_BATCH = 128
OTHER_BATCH = 64


def default_batch_size(modality_kind):
    return TEXT_BATCH if modality_kind == "text" else OTHER_BATCH


def info_nce(z1, z2, temperature=0.1):
    z1 = nn.functional.normalize(z1, dim=1)
    z2 = nn.functional.normalize(z2, dim=1)
    logits = z1 @ z2.T / temperature
    targets = torch.arange(z1.shape[0], device=z1.device)
    return 0.5 * (nn.functional.cross_entropy(logits, targets)
                  + nn.functional.cross_entropy(logits.T, targets))


def _mask_matrix(payload, generator, ratio):
    mask = (torch.rand(payload.shape, generator=generator)
            >= ratio).numpy().astype(payload.dtype)
    return payload * mask


def _mask_text_ids(ids, attention_mask, generator, ratio):
    keep = (torch.rand(ids.shape, generator=generator) >= ratio).long()
    return ids * keep, attention_mask


def contrastive_views(perceptor, payloads, generator, ratio=MASK_RATIO):
    """Embed two masked views of every payload in one forward each."""
    if perceptor.modality_kind == "text":
        ids, mask = perceptor.tokenize(payloads)
        ids1, mask1 = _mask_text_ids(ids, mask, generator, ratio)
        ids2, mask2 = _mask_text_ids(ids, mask, generator, ratio)
        return perceptor(ids1, mask1), perceptor(ids2, mask2)
    v1 = [_mask_matrix(p, generator, ratio) for p in payloads]
    v2 = [_mask_matrix(p, generator, ratio) for p in payloads]
    return perceptor.encode_payloads(v1), perceptor.encode_payloads(v2)


def train_ssl(perceptor, instances, steps=100, batch_size=None, lr=1e-3,
              temperature=0.1, mask_ratio=MASK_RATIO, seed=0):
    """Fit LoRA adapters + head; returns the per-step loss history.

    Out-of-memory errors halve the batch with a warning and retry, down
    to a floor of 2 (a contrastive batch needs at least one negative).
    """
    if batch_size is None:
        batch_size = default_batch_size(perceptor.modality_kind)
    batch_size = min(batch_size, len(instances))
    if batch_size < 2:
        raise ValueError("contrastive training needs at least 2 instances")
    generator = torch.Generator().manual_seed(seed)
    params = trainable_parameters(perceptor)
    optimizer = torch.optim.Adam(params, lr=lr)
    losses = []
    step = 0
    while step < steps:
        idx = torch.randperm(len(instances), generator=generator)[:batch_size]
        payloads = [instances[i].payload for i in idx.tolist()]
        try:
            z1, z2 = contrastive_views(perceptor, payloads, generator,
                                       mask_ratio)
            loss = info_nce(z1, z2, temperature)
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
        except RuntimeError as exc:
            if "out of memory" in str(exc).lower() and batch_size > 2:
                batch_size = max(2, batch_size // 2)
                warnings.warn("out of memory; reducing ssl batch to %d"
                              % batch_size)
                continue
            raise
        losses.append(loss.item())
        step += 1
    return losses


def save_checkpoint(perceptor, path, metadata=None):
    """Persist only the trainable tensors (LoRA + head) plus metadata."""
    trained = {name: p.detach().cpu()
               for name, p in perceptor.named_parameters() if p.requires_grad}
    torch.save({"trained": trained, "metadata": metadata or {}}, path)


def load_checkpoint(perceptor, path):
    blob = torch.load(path, map_location="cpu", weights_only=True)
    state = dict(perceptor.state_dict())
    for name, tensor in blob["trained"].items():
        if name not in state:
            raise KeyError("checkpoint tensor %r not in perceptor" % name)
        state[name] = tensor
    perceptor.load_state_dict(state)
    return blob["metadata"]
