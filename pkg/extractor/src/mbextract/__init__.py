"""mbextract: embedding extraction over frozen perceptors.

Runs modality-binding perceptors (when their packages are installed) or
self-supervised LoRA-adapted encoders over raw datasets and emits the
benchmark harness's manifest + MBED files, which are the only contract
between the two packages.
"""

__version__ = "0.1.0"
