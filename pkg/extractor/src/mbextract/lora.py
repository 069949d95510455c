"""Minimal LoRA adapters for frozen transformer encoders.

A LoRALinear wraps an existing nn.Linear, freezes its weight, and adds a
rank-r update scaled by alpha/r. Only the adapter matrices (and whatever
head the caller attaches) receive gradients.
"""

import re

import torch
from torch import nn

DEFAULT_TARGETS = (r"\.query$", r"\.key$", r"\.value$", r"\.q$", r"\.k$",
                   r"\.v$", r"\.o$", r"\.[qkvo]_proj$",
                   r"attention\.output\.dense$")


class LoRALinear(nn.Module):
    def __init__(self, base, rank=4, alpha=8.0):
        super().__init__()
        if not isinstance(base, nn.Linear):
            raise TypeError("LoRALinear wraps nn.Linear only")
        self.base = base
        for p in self.base.parameters():
            p.requires_grad_(False)
        self.rank = rank
        self.scaling = alpha / rank
        self.lora_a = nn.Parameter(torch.randn(base.in_features, rank) * 0.01)
        self.lora_b = nn.Parameter(torch.zeros(rank, base.out_features))

    def forward(self, x):
        return self.base(x) + (x @ self.lora_a @ self.lora_b) * self.scaling


def apply_lora(model, rank=4, alpha=8.0, target_patterns=DEFAULT_TARGETS):
    """Wrap matching nn.Linear modules; freezes everything else.

    Returns the names that were wrapped (possibly empty for unusual
    architectures, in which case only the projection head trains).
    """
    for p in model.parameters():
        p.requires_grad_(False)
    patterns = [re.compile(p) for p in target_patterns]
    wrapped = []
    for name, module in list(model.named_modules()):
        for child_name, child in list(module.named_children()):
            full = "%s.%s" % (name, child_name) if name else child_name
            if isinstance(child, nn.Linear) and any(
                    p.search(full) for p in patterns):
                setattr(module, child_name, LoRALinear(child, rank, alpha))
                wrapped.append(full)
    return wrapped


def trainable_parameters(model):
    return [p for p in model.parameters() if p.requires_grad]
