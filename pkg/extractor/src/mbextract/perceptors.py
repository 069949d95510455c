"""Perceptor registry: modality-binding encoders and SSL encoders.

Binding perceptors (imagebind, languagebind, unibind) map every modality
into one shared space and require their upstream packages; they raise a
clean error when those are absent. The SSL perceptors wrap a frozen
transformer (ViT for matrix-like inputs, T5 for text) with LoRA adapters
and a linear head to the benchmark's embedding width, and are trained by
the masked-contrastive recipe in ssl.py.
"""

import hashlib

import numpy as np
import torch
from torch import nn

from .lora import apply_lora

DEFAULT_EMBED_DIM = 1024
BINDING_PERCEPTORS = ("imagebind", "languagebind", "unibind")
SSL_PERCEPTORS = ("ssl-t5", "ssl-vit")
PERCEPTOR_NAMES = BINDING_PERCEPTORS + SSL_PERCEPTORS


class PerceptorUnavailableError(RuntimeError):
    pass


def _hash_token_ids(text, vocab_size, max_len):
    """Tokenizer-free fallback: stable hashed ids per whitespace token."""
    ids = []
    for token in text.split()[:max_len]:
        digest = hashlib.blake2b(token.lower().encode("utf-8"),
                                 digest_size=4).digest()
        ids.append(2 + int.from_bytes(digest, "little") % (vocab_size - 2))
    return ids or [2]


class SslT5Perceptor(nn.Module):
    """Frozen T5 encoder + LoRA + linear head over mean-pooled states."""

    name = "ssl-t5"
    modality_kind = "text"

    def __init__(self, model_name=None, tiny_config=None,
                 out_dim=DEFAULT_EMBED_DIM, lora_rank=4, max_len=64,
                 tokenizer=None):
        super().__init__()
        from transformers import T5Config, T5EncoderModel
        if tiny_config is not None:
            self.encoder = T5EncoderModel(T5Config(**tiny_config))
        elif model_name:
            self.encoder = T5EncoderModel.from_pretrained(model_name)
        else:
            raise ValueError("need model_name or tiny_config")
        self.tokenizer = tokenizer
        self.max_len = max_len
        self.vocab_size = self.encoder.config.vocab_size
        self.lora_modules = apply_lora(self.encoder, rank=lora_rank)
        self.head = nn.Linear(self.encoder.config.d_model, out_dim)

    def tokenize(self, texts):
        if self.tokenizer is not None:
            enc = self.tokenizer(list(texts), padding=True, truncation=True,
                                 max_length=self.max_len, return_tensors="pt")
            return enc["input_ids"], enc["attention_mask"]
        batches = [_hash_token_ids(t, self.vocab_size, self.max_len)
                   for t in texts]
        width = max(len(b) for b in batches)
        ids = torch.zeros(len(batches), width, dtype=torch.long)
        mask = torch.zeros(len(batches), width, dtype=torch.long)
        for i, b in enumerate(batches):
            ids[i, :len(b)] = torch.tensor(b)
            mask[i, :len(b)] = 1
        return ids, mask

    def forward(self, input_ids, attention_mask):
        states = self.encoder(input_ids=input_ids,
                              attention_mask=attention_mask).last_hidden_state
        mask = attention_mask.unsqueeze(-1).to(states.dtype)
        pooled = (states * mask).sum(1) / mask.sum(1).clamp(min=1.0)
        return self.head(pooled)

    def encode_payloads(self, payloads):
        ids, mask = self.tokenize(payloads)
        return self(ids, mask)


class SslVitPerceptor(nn.Module):
    """Frozen ViT + LoRA + linear head; frame sequences are mean-pooled."""

    name = "ssl-vit"
    modality_kind = "matrix"

    def __init__(self, model_name=None, tiny_config=None,
                 out_dim=DEFAULT_EMBED_DIM, lora_rank=4):
        super().__init__()
        from transformers import ViTConfig, ViTModel
        if tiny_config is not None:
            self.encoder = ViTModel(ViTConfig(**tiny_config),
                                    add_pooling_layer=False)
        elif model_name:
            self.encoder = ViTModel.from_pretrained(model_name,
                                                    add_pooling_layer=False)
        else:
            raise ValueError("need model_name or tiny_config")
        self.image_size = self.encoder.config.image_size
        self.channels = self.encoder.config.num_channels
        self.lora_modules = apply_lora(self.encoder, rank=lora_rank)
        self.head = nn.Linear(self.encoder.config.hidden_size, out_dim)

    def _to_pixels(self, frames):
        """[B, H, W] float arrays -> [B, C, S, S] pixel tensors."""
        x = torch.as_tensor(np.asarray(frames), dtype=torch.float32)
        if x.ndim != 3:
            raise ValueError("expected a batch of single-channel frames")
        x = x.unsqueeze(1).expand(-1, self.channels, -1, -1)
        if x.shape[-1] != self.image_size or x.shape[-2] != self.image_size:
            x = torch.nn.functional.interpolate(
                x, size=(self.image_size, self.image_size), mode="bilinear",
                align_corners=False)
        return x

    def forward(self, pixels):
        states = self.encoder(pixel_values=pixels).last_hidden_state
        return self.head(states.mean(dim=1))

    def encode_payloads(self, payloads):
        """Instances are [H, W] frames or [T, H, W] frame stacks."""
        flat, spans = [], []
        for payload in payloads:
            frames = payload[None] if payload.ndim == 2 else payload
            spans.append(frames.shape[0])
            flat.extend(frames)
        out = self(self._to_pixels(flat))
        # mean-pool the per-frame embeddings of each instance
        pooled, offset = [], 0
        for span in spans:
            pooled.append(out[offset:offset + span].mean(dim=0))
            offset += span
        return torch.stack(pooled)


def _binding_stub(name, packages):
    def build(**kwargs):
        raise PerceptorUnavailableError(
            "perceptor %r needs the optional package(s) %s, which are not"
            " installed in this environment" % (name, ", ".join(packages)))
    return build


PERCEPTOR_BUILDERS = {
    "imagebind": _binding_stub("imagebind", ["imagebind"]),
    "languagebind": _binding_stub("languagebind", ["languagebind"]),
    "unibind": _binding_stub("unibind", ["unibind"]),
    "ssl-t5": SslT5Perceptor,
    "ssl-vit": SslVitPerceptor,
}


def build_perceptor(name, **kwargs):
    if name not in PERCEPTOR_BUILDERS:
        raise ValueError("unknown perceptor %r (choose from %s)"
                         % (name, ", ".join(PERCEPTOR_NAMES)))
    return PERCEPTOR_BUILDERS[name](**kwargs)


def default_space_id(perceptor_name, modality=None, tag=None):
    """Binding families share a space; SSL perceptors get unique ids."""
    if perceptor_name in BINDING_PERCEPTORS:
        return perceptor_name
    suffix = tag or modality or "solo"
    return "%s-%s" % (perceptor_name, suffix)
