"""Synthetic multi-modality scenario generation and a toy contrastive perceptor.

The generator produces instance-aligned embedding matrices for K
training modalities plus one held-out modality. Labels are uniform; an
invariant block (shared class templates plus per-modality noise, or a
class-radius code with random directions) carries cross-modality signal;
a spurious block correlates with label parity at a per-modality strength
that can differ or flip between modalities; remaining dims are pure
noise. Setting the rotation flag multiplies the held-out modality by a
random orthogonal matrix and stamps it with its own space id, which is
the desk-scale stand-in for an isolated embedding space.
"""

import json
import os
from dataclasses import dataclass

import numpy as np

from .data import (DatasetManifest, ModalityInfo, sha256_file,
                   write_manifest, write_mbed)
from .errors import ConfigError
from .numerics import softmax_cross_entropy
from .rng import Rng

DEFAULT_MASK_RATIO = 0.3


@dataclass
class SyntheticSpec:
    """Parameters of one generated scenario.

    ``spurious_corr`` lists one correlation in [-1, 1] per modality,
    training modalities first, held-out modality last (K+1 entries).
    ``radial_radii`` switches the invariant block to a class-radius code
    (one radius per class, directions uniform on the sphere), which is
    the only class signal that survives an orthogonal rotation.
    """

    name: str
    num_train_modalities: int
    dim: int
    num_classes: int
    num_instances: int
    invariant_dim: int
    spurious_dim: int
    spurious_corr: list
    noise_scale: float = 1.0
    rotate_test: bool = False
    radial_radii: list | None = None
    shuffle_labels: bool = False

    def validate(self):
        k = self.num_train_modalities
        if k < 1:
            raise ConfigError("need at least one training modality")
        if self.invariant_dim + self.spurious_dim > self.dim:
            raise ConfigError("invariant+spurious dims exceed total dim")
        if len(self.spurious_corr) != k + 1:
            raise ConfigError("spurious_corr needs %d entries" % (k + 1))
        for rho in self.spurious_corr:
            if not -1.0 <= rho <= 1.0:
                raise ConfigError("spurious correlation %r out of [-1, 1]" % rho)
        if self.radial_radii is not None and len(self.radial_radii) != self.num_classes:
            raise ConfigError("radial_radii needs one radius per class")

    @classmethod
    def from_json(cls, path):
        with open(path, "r", encoding="utf-8") as fh:
            raw = json.load(fh)
        spec = cls(**raw)
        spec.validate()
        return spec


def modality_names(spec):
    return ["mod%d" % i for i in range(spec.num_train_modalities + 1)]


def orthogonal_matrix(rng, dim):
    """Haar-ish random orthogonal matrix via QR with sign fixing."""
    g = rng.normal((dim, dim)).astype(np.float64)
    q, r = np.linalg.qr(g)
    return q * np.sign(np.diag(r))


def _class_parity(labels):
    return np.where(labels % 2 == 1, 1.0, -1.0)


def generate_synthetic(spec, seed, out_dir):
    """Write manifest + MBED files for the scenario; returns manifest path.

    Identical (spec, seed) pairs produce identical bytes. The rotation,
    when enabled, is drawn from its own stream after all base data, so a
    rotated scenario shares every training matrix with its unrotated
    twin bit for bit.
    """
    spec.validate()
    os.makedirs(out_dir, exist_ok=True)
    n, d, c = spec.num_instances, spec.dim, spec.num_classes
    d_inv, d_sp = spec.invariant_dim, spec.spurious_dim
    names = modality_names(spec)

    labels = Rng.from_key("synthetic/labels", seed).integers(c, n)
    templates = None
    if spec.radial_radii is None and d_inv:
        t_rng = Rng.from_key("synthetic/templates", seed)
        templates = t_rng.normal((c, d_inv))
        templates /= np.linalg.norm(templates, axis=1, keepdims=True)
    parity = _class_parity(labels)

    matrices = {}
    for m_idx, name in enumerate(names):
        rng = Rng.from_key("synthetic/%s" % name, seed)
        x = np.zeros((n, d), dtype=np.float64)
        if d_inv:
            noise = rng.normal((n, d_inv))
            if spec.radial_radii is not None:
                direction = rng.normal((n, d_inv))
                direction /= np.linalg.norm(direction, axis=1, keepdims=True)
                radii = np.asarray(spec.radial_radii, dtype=np.float64)[labels]
                x[:, :d_inv] = radii[:, None] * direction + spec.noise_scale * noise
            else:
                x[:, :d_inv] = templates[labels] + spec.noise_scale * noise
        if d_sp:
            rho = float(spec.spurious_corr[m_idx])
            eps = rng.normal((n, d_sp))
            x[:, d_inv:d_inv + d_sp] = (rho * parity[:, None]
                                        + np.sqrt(1.0 - rho * rho) * eps)
        if d - d_inv - d_sp:
            x[:, d_inv + d_sp:] = rng.normal((n, d - d_inv - d_sp))
        matrices[name] = x

    shared_space = "%s-joint" % spec.name
    spaces = {name: shared_space for name in names}
    if spec.rotate_test:
        rot = orthogonal_matrix(Rng.from_key("synthetic/rotation", seed), d)
        matrices[names[-1]] = matrices[names[-1]] @ rot
        spaces[names[-1]] = "%s-isolated-%d" % (spec.name, seed)

    emit_labels = labels
    if spec.shuffle_labels:
        perm = Rng.from_key("synthetic/label-shuffle", seed).permutation(n)
        emit_labels = labels[perm]

    infos = []
    for name in names:
        fname = "%s.mbed" % name
        path = os.path.join(out_dir, fname)
        write_mbed(path, matrices[name].astype(np.float32), emit_labels)
        infos.append(ModalityInfo(name=name, file=fname, dim=d,
                                  space_id=spaces[name],
                                  sha256=sha256_file(path)))
    manifest = DatasetManifest(name=spec.name, num_classes=c,
                               num_instances=n, modalities=infos)
    manifest_path = os.path.join(out_dir, "manifest.json")
    write_manifest(manifest, manifest_path)
    return manifest_path


# -- toy masked-contrastive perceptor ------------------------------------


@dataclass
class ToyPerceptor:
    """Linear projection trained by masking + in-batch contrast."""

    projection: np.ndarray
    mask_ratio: float = DEFAULT_MASK_RATIO
    temperature: float = 0.1
    batch_size: int = 64

    def encode(self, raw):
        return np.asarray(raw, dtype=np.float64) @ self.projection


def _normalize_rows(v):
    norms = np.maximum(np.linalg.norm(v, axis=1, keepdims=True), 1e-12)
    return v / norms, norms


def _normalize_backward(v, normalized, norms, dnormalized):
    inner = (normalized * dnormalized).sum(axis=1, keepdims=True)
    return (dnormalized - normalized * inner) / norms


def masked_views(rng, batch, mask_ratio):
    """Two views per row with elements zeroed independently at mask_ratio."""
    m1 = (rng.uniform(batch.shape) >= mask_ratio).astype(batch.dtype)
    m2 = (rng.uniform(batch.shape) >= mask_ratio).astype(batch.dtype)
    return batch * m1, batch * m2, m1, m2


def info_nce(z1, z2, temperature):
    """Symmetric in-batch InfoNCE loss and gradients w.r.t. both views."""
    n1, norms1 = _normalize_rows(z1)
    n2, norms2 = _normalize_rows(z2)
    sims = (n1 @ n2.T) / temperature
    targets = np.arange(z1.shape[0])
    loss_a, grad_a = softmax_cross_entropy(sims, targets)
    loss_b, grad_b = softmax_cross_entropy(sims.T, targets)
    dsims = 0.5 * (grad_a + grad_b.T) / temperature
    dn1 = dsims @ n2
    dn2 = dsims.T @ n1
    dz1 = _normalize_backward(z1, n1, norms1, dn1)
    dz2 = _normalize_backward(z2, n2, norms2, dn2)
    return 0.5 * (loss_a + loss_b), dz1, dz2


def train_toy_perceptor(raw, out_dim, mask_ratio=DEFAULT_MASK_RATIO,
                        temperature=0.1, steps=200, batch_size=64,
                        lr=0.05, seed=0):
    """Fit the linear projection with masked two-view contrast.

    Positives are the two masked views of the same row; every other row
    in the batch is a negative. steps=0 returns the initialization.
    """
    raw = np.asarray(raw, dtype=np.float64)
    if raw.shape[1] < 2:
        raise ConfigError("raw dimensionality must be >= 2")
    if not 0.0 < mask_ratio < 1.0:
        raise ConfigError("mask ratio must be in (0, 1)")
    batch_size = min(batch_size, raw.shape[0])
    if batch_size < 2:
        raise ConfigError("contrastive training needs batches of at least 2")
    rng = Rng.from_key("toy-perceptor", seed)
    proj = rng.normal((raw.shape[1], out_dim)) / np.sqrt(raw.shape[1])
    for _ in range(steps):
        idx = rng.sample_without_replacement(raw.shape[0], batch_size)
        batch = raw[idx]
        v1, v2, _, _ = masked_views(rng, batch, mask_ratio)
        z1 = v1 @ proj
        z2 = v2 @ proj
        _, dz1, dz2 = info_nce(z1, z2, temperature)
        dproj = v1.T @ dz1 + v2.T @ dz2
        proj -= lr * dproj
    return ToyPerceptor(projection=proj, mask_ratio=mask_ratio,
                        temperature=temperature, batch_size=batch_size)
