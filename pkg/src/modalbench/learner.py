"""The shared learner: a fixed 4-layer MLP featurizer plus linear classifier.

The featurizer maps D_in -> 512 -> 256 -> 512 -> 1024 with ReLU between
layers and no trailing nonlinearity, so features may be negative. The
classifier is a single affine 1024 -> C. Only D_in and C vary; the
interior widths are part of the benchmark definition.
"""

import struct
from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, FormatError
from .numerics import (affine, affine_backward, relu, relu_backward,
                       softmax_cross_entropy)

HIDDEN_DIMS = (512, 256, 512, 1024)
FEATURE_DIM = HIDDEN_DIMS[-1]

CHECKPOINT_MAGIC = b"MBLP"
CHECKPOINT_VERSION = 1


@dataclass
class LearnerParams:
    """Featurizer + classifier weights; value-semantic."""

    featurizer: list  # [(w, b), ...] for the 4 affine layers
    classifier: tuple  # (w, b)

    @property
    def input_dim(self):
        return self.featurizer[0][0].shape[0]

    @property
    def num_classes(self):
        return self.classifier[0].shape[1]

    @property
    def dtype(self):
        return self.featurizer[0][0].dtype

    def arrays(self):
        """Flat parameter list: featurizer W,b pairs then classifier W,b."""
        out = []
        for w, b in self.featurizer:
            out.extend((w, b))
        out.extend(self.classifier)
        return out

    @classmethod
    def from_arrays(cls, arrays):
        if len(arrays) != 2 * len(HIDDEN_DIMS) + 2:
            raise DimensionError("expected %d arrays" % (2 * len(HIDDEN_DIMS) + 2))
        feat = [(arrays[2 * i], arrays[2 * i + 1]) for i in range(len(HIDDEN_DIMS))]
        return cls(featurizer=feat, classifier=(arrays[-2], arrays[-1]))

    def copy(self):
        return LearnerParams.from_arrays([a.copy() for a in self.arrays()])

    def astype(self, dtype):
        return LearnerParams.from_arrays(
            [a.astype(dtype) for a in self.arrays()])


def zeros_like_arrays(arrays):
    return [np.zeros_like(a) for a in arrays]


def init_learner(seed_or_rng, input_dim, num_classes, dtype=np.float32):
    """Deterministic fan-in uniform initialization, zero biases.

    Hidden layers that feed a ReLU use the sqrt(2) gain; the final
    featurizer layer uses gain 1; the classifier uses the smaller
    1/sqrt(fan_in) bound so initial logits stay near zero and the loss
    on random labels starts near ln(C).
    """
    from .rng import Rng
    rng = seed_or_rng if isinstance(seed_or_rng, Rng) else Rng(seed_or_rng)
    if input_dim < 1 or num_classes < 1:
        raise DimensionError("input_dim and num_classes must be >= 1")
    dims = (input_dim,) + HIDDEN_DIMS
    featurizer = []
    for i in range(len(HIDDEN_DIMS)):
        fan_in, fan_out = dims[i], dims[i + 1]
        gain = np.sqrt(2.0) if i < len(HIDDEN_DIMS) - 1 else 1.0
        bound = gain * np.sqrt(3.0 / fan_in)
        w = rng.uniform_range(-bound, bound, (fan_in, fan_out)).astype(dtype)
        featurizer.append((w, np.zeros(fan_out, dtype=dtype)))
    bound = 1.0 / np.sqrt(FEATURE_DIM)
    wc = rng.uniform_range(-bound, bound, (FEATURE_DIM, num_classes)).astype(dtype)
    return LearnerParams(featurizer=featurizer,
                         classifier=(wc, np.zeros(num_classes, dtype=dtype)))


def featurize(params, x):
    """Forward through the featurizer; returns (features, cache)."""
    if x.shape[1] != params.input_dim:
        raise DimensionError(
            "input has %d cols, learner expects %d" % (x.shape[1], params.input_dim))
    cache = []
    h = x
    last = len(params.featurizer) - 1
    for i, (w, b) in enumerate(params.featurizer):
        z = affine(h, w, b)
        cache.append((h, z))
        h = relu(z) if i < last else z
    return h, cache


def featurize_backward(params, cache, dfeatures):
    """Featurizer gradients and input gradient for upstream dfeatures."""
    grads = [None] * (2 * len(params.featurizer))
    d = dfeatures
    last = len(params.featurizer) - 1
    for i in range(last, -1, -1):
        h_in, z = cache[i]
        if i < last:
            d = relu_backward(z, d)
        w, _ = params.featurizer[i]
        dw, db, d = affine_backward(h_in, w, d)
        grads[2 * i] = dw
        grads[2 * i + 1] = db
    return grads, d


def classify(params, features):
    w, b = params.classifier
    return affine(features, w, b)


def classify_backward(params, features, dlogits):
    """Classifier gradients plus the gradient flowing into the features."""
    w, _ = params.classifier
    dw, db, dfeatures = affine_backward(features, w, dlogits)
    return [dw, db], dfeatures


def forward(params, x):
    features, cache = featurize(params, x)
    return classify(params, features), features, cache


def forward_loss_backward(params, x, labels):
    """Cross-entropy loss, flat gradient list, and logits for one batch."""
    logits, features, cache = forward(params, x)
    loss, dlogits = softmax_cross_entropy(logits, labels)
    clf_grads, dfeatures = classify_backward(params, features, dlogits)
    feat_grads, _ = featurize_backward(params, cache, dfeatures)
    return loss, feat_grads + clf_grads, logits


def predict(params, x, batch=4096):
    """Argmax class per row; ties resolve to the lowest class index."""
    out = np.empty(x.shape[0], dtype=np.int64)
    for start in range(0, x.shape[0], batch):
        chunk = x[start:start + batch]
        logits, _, _ = forward(params, chunk)
        out[start:start + chunk.shape[0]] = np.argmax(logits, axis=1)
    return out


def average_params(params_list, weights=None):
    """Convex combination of parameter sets with identical shapes."""
    if not params_list:
        raise DimensionError("average_params needs at least one parameter set")
    n = len(params_list)
    if weights is None:
        weights = [1.0 / n] * n
    if len(weights) != n:
        raise DimensionError("weights length != params length")
    if abs(sum(weights) - 1.0) > 1e-6:
        raise DimensionError("weights must sum to 1")
    base = params_list[0].arrays()
    acc = [np.zeros_like(a, dtype=np.float64) for a in base]
    for p, wgt in zip(params_list, weights):
        arrays = p.arrays()
        if len(arrays) != len(base):
            raise DimensionError("parameter structure mismatch")
        for a, b in zip(acc, arrays):
            if a.shape != b.shape:
                raise DimensionError("parameter shape mismatch")
            a += wgt * b.astype(np.float64)
    dtype = params_list[0].dtype
    return LearnerParams.from_arrays([a.astype(dtype) for a in acc])


# -- checkpoint io -------------------------------------------------------


def save_checkpoint(params, path):
    """Write the MBLP container: per-layer rows, cols, weights, bias."""
    layers = list(params.featurizer) + [params.classifier]
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<HH", CHECKPOINT_VERSION, len(layers)))
        for w, b in layers:
            fh.write(struct.pack("<II", w.shape[0], w.shape[1]))
            fh.write(np.ascontiguousarray(w, dtype="<f4").tobytes())
            fh.write(np.ascontiguousarray(b, dtype="<f4").tobytes())


def load_checkpoint(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != CHECKPOINT_MAGIC:
        raise FormatError("bad checkpoint magic", code="format-magic")
    version, n_layers = struct.unpack_from("<HH", blob, 4)
    if version != CHECKPOINT_VERSION:
        raise FormatError("unsupported checkpoint version %d" % version,
                          code="format-version")
    off = 8
    layers = []
    for _ in range(n_layers):
        if off + 8 > len(blob):
            raise FormatError("truncated checkpoint", code="format-truncated")
        rows, cols = struct.unpack_from("<II", blob, off)
        off += 8
        need = 4 * (rows * cols + cols)
        if off + need > len(blob):
            raise FormatError("truncated checkpoint", code="format-truncated")
        w = np.frombuffer(blob, dtype="<f4", count=rows * cols, offset=off)
        off += 4 * rows * cols
        b = np.frombuffer(blob, dtype="<f4", count=cols, offset=off)
        off += 4 * cols
        layers.append((w.reshape(rows, cols).copy(), b.copy()))
    if len(layers) != len(HIDDEN_DIMS) + 1:
        raise FormatError("unexpected layer count %d" % len(layers),
                          code="format-layers")
    return LearnerParams(featurizer=layers[:-1], classifier=layers[-1])
