"""modalbench: a benchmark harness for modality generalization.

Trains a fixed MLP learner on frozen per-modality embeddings under 13
multi-modal-learning and domain-generalization algorithms, runs seeded
random hyperparameter sweeps, applies three model-selection protocols,
and emits per-modality accuracy reports for weak (shared embedding
space) and strong (isolated test space) regimes.
"""

__version__ = "0.1.0"
