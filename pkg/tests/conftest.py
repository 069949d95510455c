import numpy as np
import pytest

from modalbench.data import load_dataset
from modalbench.synthetic import SyntheticSpec, generate_synthetic


def make_dataset(tmp_path, name="synth", k=2, dim=16, classes=3, n=400,
                 invariant_dim=6, spurious_dim=2, corr=None, noise=0.5,
                 rotate=False, seed=7, radial=None, shuffle_labels=False):
    spec = SyntheticSpec(
        name=name, num_train_modalities=k, dim=dim, num_classes=classes,
        num_instances=n, invariant_dim=invariant_dim,
        spurious_dim=spurious_dim,
        spurious_corr=corr if corr is not None else [0.3] * (k + 1),
        noise_scale=noise, rotate_test=rotate, radial_radii=radial,
        shuffle_labels=shuffle_labels)
    out = tmp_path / ("%s-data" % name)
    manifest_path = generate_synthetic(spec, seed, str(out))
    return manifest_path


@pytest.fixture
def small_dataset(tmp_path):
    path = make_dataset(tmp_path)
    manifest, matrices = load_dataset(path)
    return path, manifest, matrices


def max_param_deviation(arrays_a, arrays_b):
    return max(float(np.max(np.abs(a - b))) for a, b in zip(arrays_a, arrays_b))
