"""The 13 training algorithms behind one update interface.

Multi-modal-learning kinds (Concat, OGM, DLMG) consume instance-aligned
per-modality batches and train with SGD+momentum; domain-generalization
kinds treat each modality as a domain, accept aligned or independent
batches, and train with Adam. Every update takes exactly one optimizer
step on the learner plus whatever auxiliary steps the kind configures,
and all gradients are computed in closed form against the learner's
manual backward pass.
"""

import math

import numpy as np

from .errors import ConfigError, NumericError
from .learner import (classify, classify_backward, featurize,
                      featurize_backward, forward, zeros_like_arrays)
from .numerics import (OptimizerState, affine, affine_backward,
                       log_softmax, optimizer_step, relu, relu_backward,
                       softmax, softmax_cross_entropy)

MML_KINDS = ("Concat", "OGM", "DLMG")
DG_KINDS = ("ERM", "IRM", "Mixup", "CDANN", "SagNet", "IB_ERM", "CondCAD",
            "EQRM", "ERM++", "URM")
ALGORITHM_KINDS = MML_KINDS + DG_KINDS

DISCRIMINATOR_WIDTH = 256
STYLE_STD_FLOOR = 1e-6


class AlgorithmConfig:
    """Kind, sampled hyperparameters, and the step budget of one run."""

    def __init__(self, kind, hparams, steps_budget, optimizer=None):
        if kind not in ALGORITHM_KINDS:
            raise ConfigError("unknown algorithm kind %r" % kind)
        self.kind = kind
        self.hparams = dict(hparams)
        self.steps_budget = int(steps_budget)
        self.optimizer = optimizer


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-np.clip(x, -60.0, 60.0)))


def _softplus(x):
    return np.logaddexp(0.0, x)


def _onehot(labels, num_classes, dtype):
    out = np.zeros((labels.shape[0], num_classes), dtype=dtype)
    out[np.arange(labels.shape[0]), labels] = 1.0
    return out


# -- standalone penalty/fusion operations --------------------------------


def irm_penalty(logits, labels):
    """Squared risk-gradient penalty for one environment, closed form.

    g is the derivative of CE(w * logits, labels) at the scalar w = 1;
    the penalty is g**2 and the returned gradient is its exact
    derivative with respect to the logits (through the softmax).
    """
    b = logits.shape[0]
    p = softmax(logits)
    y = _onehot(labels, logits.shape[1], p.dtype)
    g = float(((p - y) * logits).sum() / b)
    inner = (p * logits).sum(axis=1, keepdims=True)
    dg = ((p - y) + p * (logits - inner)) / b
    return g * g, (2.0 * g) * dg


def ib_penalty(features):
    """Mean per-dimension population variance of a feature batch."""
    mu = features.mean(axis=0, keepdims=True)
    return float(np.mean((features - mu) ** 2))


def ib_penalty_backward(features):
    b, d = features.shape
    mu = features.mean(axis=0, keepdims=True)
    return (2.0 / (b * d)) * (features - mu)


def mixup_batch(rng, batch_a, batch_b, alpha):
    """Interpolated inputs and the (y_a, y_b, lam) soft-label triple."""
    x_a, y_a = batch_a
    x_b, y_b = batch_b
    if x_a.shape != x_b.shape:
        raise ConfigError("mixup requires equal batch shapes")
    if alpha <= 0:
        raise ConfigError("mixup alpha must be positive")
    lam = rng.beta(alpha, alpha)
    return lam * x_a + (1.0 - lam) * x_b, (y_a, y_b, lam)


def fuse_concat(features_list):
    """Dimension-preserving fusion: elementwise mean across modalities."""
    if len(features_list) == 1:
        return features_list[0]
    return np.mean(features_list, axis=0)


def ogm_coefficients(scores, alpha):
    """Per-modality gradient scales from batch-mean true-class scores."""
    scores = np.asarray(scores, dtype=np.float64)
    k = scores.shape[0]
    coeffs = np.ones(k)
    if k < 2 or not np.all(np.isfinite(scores)):
        return coeffs
    for m in range(k):
        others = np.delete(scores, m).mean()
        if others <= 1e-12:
            continue
        rho = scores[m] / others
        if rho > 1.0:
            # tanh saturates to 1.0 in floats; keep the scale positive
            coeffs[m] = max(1.0 - math.tanh(alpha * (rho - 1.0)), 1e-12)
    return coeffs


def cond_cad_loss(features, labels, modality_ids, temperature):
    """Modality-identifiability bottleneck and its feature gradient.

    For each anchor, attention (softmax of cosine similarity / tau) over
    same-label samples scores the probability mass landing on the
    anchor's own modality; the returned value is the mean log of that
    mass, which training minimizes to make modalities indistinguishable.
    Anchors whose label group is a singleton, or holds no same-modality
    partner, contribute nothing.
    """
    n = features.shape[0]
    norms = np.maximum(np.linalg.norm(features, axis=1, keepdims=True), 1e-12)
    unit = features / norms
    sims = (unit @ unit.T) / temperature
    dsims = np.zeros_like(sims)
    total = 0.0
    valid = 0
    for i in range(n):
        mask = labels == labels[i]
        mask[i] = False
        idx = np.flatnonzero(mask)
        if idx.size == 0:
            continue
        same = (modality_ids[idx] == modality_ids[i]).astype(np.float64)
        if not same.any():
            continue
        row = sims[i, idx]
        row = row - row.max()
        w = np.exp(row)
        w /= w.sum()
        q = max(float((w * same).sum()), 1e-300)
        total += math.log(q)
        dsims[i, idx] = w * (same - q) / q
        valid += 1
    if valid == 0:
        return 0.0, np.zeros_like(features)
    total /= valid
    dsims /= valid
    dunit = (dsims @ unit + dsims.T @ unit) / temperature
    inner = (unit * dunit).sum(axis=1, keepdims=True)
    dfeatures = (dunit - unit * inner) / norms
    return total, dfeatures


def uniformity_gap(disc, features):
    """Generator-side uniformity term and its feature gradient.

    Value is half the mean softplus of the discriminator logit on the
    tanh-squashed features (its loss share on the feature side); the
    learner descends the negated value to pull features toward the
    uniform reference.
    """
    squashed = np.tanh(features)
    logits, cache = _mlp2_forward(disc, squashed)
    value = 0.5 * float(np.mean(_softplus(logits)))
    dlogit = 0.5 * _sigmoid(logits) / squashed.shape[0]
    _, dsquash = _mlp2_backward(disc, cache, dlogit)
    return value, dsquash * (1.0 - squashed * squashed)


def dlmg_gap_and_grads(features_list, labels, offsets):
    """Offset-corrected class-centroid gap with feature/offset gradients.

    Aligned batches share one label vector. Returns the mean squared
    centroid distance over (class, modality pair) terms plus the raw
    gradients of that mean w.r.t. each modality's features and offsets.
    """
    k = len(features_list)
    dfeat = [np.zeros_like(f) for f in features_list]
    doff = [np.zeros_like(o) for o in offsets]
    if k < 2:
        return 0.0, dfeat, doff
    classes = np.unique(labels)
    pairs = [(m, mp) for m in range(k) for mp in range(m + 1, k)]
    count = len(classes) * len(pairs)
    gap = 0.0
    for c in classes:
        mask = labels == c
        n_c = int(mask.sum())
        cents = [features_list[m][mask].mean(axis=0) - offsets[m]
                 for m in range(k)]
        dcent = [np.zeros_like(cents[0]) for _ in range(k)]
        for m, mp in pairs:
            diff = cents[m] - cents[mp]
            gap += float(diff @ diff)
            dcent[m] += 2.0 * diff
            dcent[mp] -= 2.0 * diff
        for m in range(k):
            dfeat[m][mask] += dcent[m] / (count * n_c)
            doff[m] -= dcent[m] / count
    return gap / count, dfeat, doff


def modality_gap(features_list, labels_list, offsets=None):
    """Mean squared distance between per-class centroids across modalities.

    Terms with a class missing from either batch are skipped. Optional
    per-modality offsets are subtracted from centroids before comparing.
    """
    k = len(features_list)
    gap = 0.0
    count = 0
    classes = set()
    for y in labels_list:
        classes.update(int(v) for v in np.unique(y))
    for c in sorted(classes):
        cents = []
        for m in range(k):
            mask = labels_list[m] == c
            if not mask.any():
                cents.append(None)
                continue
            cent = features_list[m][mask].mean(axis=0)
            if offsets is not None:
                cent = cent - offsets[m]
            cents.append(cent)
        for m in range(k):
            for mp in range(m + 1, k):
                if cents[m] is None or cents[mp] is None:
                    continue
                diff = cents[m] - cents[mp]
                gap += float(diff @ diff)
                count += 1
    return gap / count if count else 0.0


def quantile_risk(risks, q, bandwidth_floor=1e-6, bandwidth=None):
    """Smoothed empirical quantile of per-environment risks.

    A Gaussian KDE with Silverman bandwidth (floored) is placed on the
    risks; the result is the smallest r with CDF(r) >= q, by bisection.
    """
    value, _ = quantile_risk_weights(risks, q, bandwidth_floor, bandwidth)
    return value


def quantile_risk_weights(risks, q, bandwidth_floor=1e-6, bandwidth=None):
    """Quantile value plus d(quantile)/d(risk_k) weights (sum to 1).

    The weights come from implicit differentiation of the KDE CDF with
    the bandwidth held fixed; pass ``bandwidth`` to pin it externally
    (the Silverman choice otherwise re-estimates from the risks).
    """
    risks = np.asarray(risks, dtype=np.float64)
    k = risks.shape[0]
    if k < 1:
        raise ConfigError("quantile_risk needs at least one risk")
    if not 0.0 < q < 1.0:
        raise ConfigError("quantile must lie in (0, 1)")
    if bandwidth is not None:
        h = bandwidth
    elif k == 1:
        h = bandwidth_floor
    else:
        sigma = float(np.std(risks, ddof=1))
        h = max(0.9 * sigma * k ** (-0.2), bandwidth_floor)

    def cdf(r):
        zs = (r - risks) / h
        return float(np.mean([0.5 * (1.0 + math.erf(z / math.sqrt(2.0)))
                              for z in zs]))

    lo = float(risks.min()) - 8.0 * h
    hi = float(risks.max()) + 8.0 * h
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if cdf(mid) >= q:
            hi = mid
        else:
            lo = mid
        if hi - lo <= 1e-13 * max(1.0, abs(hi)):
            break
    value = 0.5 * (lo + hi)
    kernel = np.exp(-0.5 * ((value - risks) / h) ** 2)
    total = kernel.sum()
    weights = kernel / total if total > 0 else np.full(k, 1.0 / k)
    return value, weights


def style_randomize(features, rng):
    """Style- and content-randomized views of a feature batch.

    Per-sample style is the (mean, std) over feature dimensions. The
    style view keeps each sample's normalized shape but interpolates its
    stats toward a permuted partner's; the content view keeps the
    sample's own stats around an interpolated shape.
    """
    n = features.shape[0]
    if n < 2:
        raise ConfigError("style randomization needs a batch of at least 2")
    perm = rng.permutation(n)
    u = rng.uniform(n)[:, None]
    view_s, view_c, _ = style_apply(features, perm, u)
    return view_s, view_c


def _style_stats(features):
    mu = features.mean(axis=1, keepdims=True)
    var = ((features - mu) ** 2).mean(axis=1, keepdims=True)
    sigma = np.sqrt(var)
    floored = sigma < STYLE_STD_FLOOR
    sigma = np.maximum(sigma, STYLE_STD_FLOOR)
    return mu, sigma, floored


def style_apply(features, perm, u):
    """Deterministic core of style_randomize given the drawn (perm, u)."""
    mu, sigma, floored = _style_stats(features)
    z = (features - mu) / sigma
    mu_mix = u * mu + (1.0 - u) * mu[perm]
    sigma_mix = u * sigma + (1.0 - u) * sigma[perm]
    z_mix = u * z + (1.0 - u) * z[perm]
    view_style = z * sigma_mix + mu_mix
    view_content = z_mix * sigma + mu
    cache = dict(perm=perm, u=u, mu=mu, sigma=sigma, floored=floored, z=z,
                 z_mix=z_mix, sigma_mix=sigma_mix, features=features)
    return view_style, view_content, cache


def _style_randomize_forward(features, rng):
    n = features.shape[0]
    if n < 2:
        raise ConfigError("style randomization needs a batch of at least 2")
    perm = rng.permutation(n)
    u = rng.uniform(n)[:, None]
    return style_apply(features, perm, u)


def _style_randomize_backward(cache, d_style, d_content):
    """Gradient w.r.t. the input features for upstream view gradients."""
    perm, u = cache["perm"], cache["u"]
    mu, sigma, z = cache["mu"], cache["sigma"], cache["z"]
    d = z.shape[1]
    dz = np.zeros_like(z)
    dmu = np.zeros_like(mu)
    dsigma = np.zeros_like(sigma)
    if d_style is not None:
        dz += d_style * cache["sigma_mix"]
        ds_mix = (d_style * z).sum(axis=1, keepdims=True)
        dm_mix = d_style.sum(axis=1, keepdims=True)
        dsigma += u * ds_mix
        np.add.at(dsigma, perm, (1.0 - u) * ds_mix)
        dmu += u * dm_mix
        np.add.at(dmu, perm, (1.0 - u) * dm_mix)
    if d_content is not None:
        dsigma += (d_content * cache["z_mix"]).sum(axis=1, keepdims=True)
        dmu += d_content.sum(axis=1, keepdims=True)
        dz_mix = d_content * sigma
        dz += u * dz_mix
        np.add.at(dz, perm, (1.0 - u) * dz_mix)
    # z = (f - mu)/sigma with mu, sigma themselves functions of f
    dmu_total = dmu - dz.sum(axis=1, keepdims=True) / sigma
    dsigma_total = dsigma - (dz * z).sum(axis=1, keepdims=True) / sigma
    dsigma_total = np.where(cache["floored"], 0.0, dsigma_total)
    df = dz / sigma
    df += dmu_total / d
    df += dsigma_total * (cache["features"] - mu) / (d * sigma)
    return df


# -- two-layer auxiliary networks ----------------------------------------


def _init_mlp2(rng, in_dim, out_dim, dtype=np.float32):
    b1 = math.sqrt(2.0) * math.sqrt(3.0 / in_dim)
    w1 = rng.uniform_range(-b1, b1, (in_dim, DISCRIMINATOR_WIDTH)).astype(dtype)
    b2 = 1.0 / math.sqrt(DISCRIMINATOR_WIDTH)
    w2 = rng.uniform_range(-b2, b2, (DISCRIMINATOR_WIDTH, out_dim)).astype(dtype)
    return [w1, np.zeros(DISCRIMINATOR_WIDTH, dtype=dtype),
            w2, np.zeros(out_dim, dtype=dtype)]


def _mlp2_forward(params, x):
    w1, b1, w2, b2 = params
    z1 = affine(x, w1, b1)
    h = relu(z1)
    return affine(h, w2, b2), (x, z1, h)


def _mlp2_backward(params, cache, dout):
    w1, _, w2, _ = params
    x, z1, h = cache
    dw2, db2, dh = affine_backward(h, w2, dout)
    dz1 = relu_backward(z1, dh)
    dw1, db1, dx = affine_backward(x, w1, dz1)
    return [dw1, db1, dw2, db2], dx


# -- algorithm classes ----------------------------------------------------


class Algorithm:
    """Base: owns the learner, its optimizer, and a private rng stream."""

    family = "dg"

    def __init__(self, config, learner, num_modalities, rng):
        self.cfg = config
        self.hp = config.hparams
        self.learner = learner
        self.num_modalities = num_modalities
        self.rng = rng
        self.step_count = 0
        self.opt = self._make_optimizer(self.hp)
        self.opt_params = self._optimizer_params()

    def _optimizer_params(self):
        return self.learner.arrays()

    def _make_optimizer(self, hp, lr=None, beta1=None, weight_decay=None):
        kind = self.cfg.optimizer or ("sgd" if self.family == "mml" else "adam")
        if kind == "adam":
            return OptimizerState(
                kind="adam",
                lr=lr if lr is not None else hp["lr"],
                weight_decay=weight_decay if weight_decay is not None
                else hp.get("weight_decay", 0.0),
                beta1=beta1 if beta1 is not None else 0.9,
            )
        return OptimizerState(
            kind="sgd",
            lr=lr if lr is not None else hp["lr"],
            weight_decay=weight_decay if weight_decay is not None
            else hp.get("weight_decay", 0.0),
            momentum=hp.get("momentum", 0.9),
            plateau_patience=int(hp.get("patience", 0)),
        )

    def _check_mode(self, mode):
        if mode not in ("aligned", "independent"):
            raise ConfigError("unknown batch mode %r" % mode)
        if self.family == "mml" and mode != "aligned":
            raise ConfigError(
                "%s requires aligned (instance-paired) batches" % self.cfg.kind)

    def _step(self, grads, loss):
        if not math.isfinite(loss):
            raise NumericError("training loss became non-finite")
        optimizer_step(self.opt_params, grads, self.opt, loss=loss)
        self.step_count += 1

    def _ce_accumulate(self, batches, grads, scale=None,
                       extra_dlogits=None, extra_dfeatures=None):
        """Mean-over-modalities CE with optional fused extra gradients.

        extra_dlogits/extra_dfeatures map env index -> additional
        gradient added before the shared backward pass, so a disabled
        penalty leaves the float path identical to plain ERM.
        """
        k = len(batches)
        scale = scale if scale is not None else [1.0 / k] * k
        loss = 0.0
        for env, (x, y) in enumerate(batches):
            logits, features, cache = forward(self.learner, x)
            ce, dlogits = softmax_cross_entropy(logits, y)
            loss += scale[env] * ce
            dlogits = dlogits * scale[env]
            if extra_dlogits is not None and extra_dlogits[env] is not None:
                dlogits = dlogits + extra_dlogits[env]
            clf_g, dfeat = classify_backward(self.learner, features, dlogits)
            if extra_dfeatures is not None and extra_dfeatures[env] is not None:
                dfeat = dfeat + extra_dfeatures[env]
            feat_g, _ = featurize_backward(self.learner, cache, dfeat)
            for acc, g in zip(grads, feat_g + clf_g):
                acc += g
        return loss

    def update(self, batches, mode):
        raise NotImplementedError

    def eval_params(self):
        return self.learner

    def _metrics(self, **kw):
        out = {"lr": self.opt.lr}
        out.update(kw)
        for v in out.values():
            if isinstance(v, float) and not math.isfinite(v):
                raise NumericError("non-finite metric emitted")
        return out


class ERM(Algorithm):
    """Mean cross-entropy over per-modality batches."""

    def update(self, batches, mode):
        self._check_mode(mode)
        grads = zeros_like_arrays(self.opt_params)
        loss = self._ce_accumulate(batches, grads)
        self._step(grads, loss)
        return self._metrics(loss=loss, ce=loss, penalty=0.0)


class _AnnealedPenalty(Algorithm):
    """Shared ramp: weight 1 until the anneal step, sampled weight after,
    with optimizer moments reset once at the switch."""

    lambda_key = "lambda"
    anneal_key = "anneal_iters"

    def __init__(self, *args, **kw):
        super().__init__(*args, **kw)
        self._annealed = False

    def _penalty_weight(self):
        anneal = int(self.hp[self.anneal_key])
        lam = float(self.hp[self.lambda_key])
        if self.step_count >= anneal:
            if anneal > 0 and not self._annealed:
                self.opt.reset_moments()
            self._annealed = True
            return lam
        return 1.0


class IRM(_AnnealedPenalty):
    """Invariant risk penalty from the closed-form risk-gradient square."""

    lambda_key = "irm_lambda"
    anneal_key = "irm_anneal_iters"

    def update(self, batches, mode):
        self._check_mode(mode)
        lam = self._penalty_weight()
        k = len(batches)
        grads = zeros_like_arrays(self.opt_params)
        extra = [None] * k
        penalty = 0.0
        if lam != 0.0:
            for env, (x, y) in enumerate(batches):
                logits, _, _ = forward(self.learner, x)
                pen, dpen = irm_penalty(logits, y)
                penalty += pen / k
                extra[env] = (lam / k) * dpen
        ce = self._ce_accumulate(batches, grads, extra_dlogits=extra)
        loss = ce + lam * penalty
        self._step(grads, loss)
        return self._metrics(loss=loss, ce=ce, penalty=penalty,
                             penalty_weight=lam)


class IBERM(_AnnealedPenalty):
    """Feature-variance bottleneck added to the pooled risk."""

    lambda_key = "ib_lambda"
    anneal_key = "ib_anneal_iters"

    def update(self, batches, mode):
        self._check_mode(mode)
        lam = self._penalty_weight()
        k = len(batches)
        grads = zeros_like_arrays(self.opt_params)
        extra = [None] * k
        penalty = 0.0
        if lam != 0.0:
            for env, (x, y) in enumerate(batches):
                features, _ = featurize(self.learner, x)
                penalty += ib_penalty(features) / k
                extra[env] = (lam / k) * ib_penalty_backward(features)
        ce = self._ce_accumulate(batches, grads, extra_dfeatures=extra)
        loss = ce + lam * penalty
        self._step(grads, loss)
        return self._metrics(loss=loss, ce=ce, penalty=penalty,
                             penalty_weight=lam)


class Mixup(Algorithm):
    """Inter-modality input interpolation with Beta-mixed targets."""

    def update(self, batches, mode):
        self._check_mode(mode)
        k = len(batches)
        perm = self.rng.permutation(k)
        grads = zeros_like_arrays(self.opt_params)
        alpha = float(self.hp["mixup_alpha"])
        loss = 0.0
        for slot in range(k):
            a = batches[int(perm[slot])]
            b = batches[int(perm[(slot + 1) % k])]
            x, (y_a, y_b, lam) = mixup_batch(self.rng, a, b, alpha)
            logits, features, cache = forward(self.learner, x.astype(a[0].dtype))
            ce_a, g_a = softmax_cross_entropy(logits, y_a)
            ce_b, g_b = softmax_cross_entropy(logits, y_b)
            loss += (lam * ce_a + (1.0 - lam) * ce_b) / k
            dlogits = (lam * g_a + (1.0 - lam) * g_b) / k
            clf_g, dfeat = classify_backward(self.learner, features, dlogits)
            feat_g, _ = featurize_backward(self.learner, cache, dfeat)
            for acc, g in zip(grads, feat_g + clf_g):
                acc += g
        self._step(grads, loss)
        return self._metrics(loss=loss, ce=loss, penalty=0.0)


class CDANN(Algorithm):
    """Class-conditional modality discriminator, alternating sign-flip.

    The discriminator sees [feature, onehot(label)] and predicts which
    modality produced it; it takes its own Adam steps (with optional
    input-gradient penalty), then the learner descends CE minus lambda
    times the discriminator loss.
    """

    def __init__(self, config, learner, num_modalities, rng):
        super().__init__(config, learner, num_modalities, rng)
        if num_modalities < 2:
            raise ConfigError("CDANN needs at least two training modalities")
        in_dim = learner.classifier[0].shape[0] + learner.num_classes
        self.disc = _init_mlp2(self.rng, in_dim, num_modalities,
                               dtype=learner.dtype)
        self.disc_opt = OptimizerState(
            kind="adam", lr=self.hp["lr"],
            weight_decay=self.hp["disc_weight_decay"],
            beta1=self.hp["disc_beta1"])

    def _disc_loss_and_grads(self, disc_in, domains, want_param_grads=True):
        logits, cache = _mlp2_forward(self.disc, disc_in)
        loss, dlogits = softmax_cross_entropy(logits, domains)
        if not want_param_grads:
            _, dx = _mlp2_backward(self.disc, cache, dlogits)
            return loss, None, dx
        grads, dx = _mlp2_backward(self.disc, cache, dlogits)
        return loss, grads, dx

    def _grad_penalty_grads(self, disc_in, domains):
        """Parameter gradient of mean ||d CE_i / d input_i||^2.

        Uses a symmetric finite difference along the input gradients,
        which equals the exact Hessian-vector product up to O(eps^2).
        """
        logits, cache = _mlp2_forward(self.disc, disc_in)
        _, dlogits = softmax_cross_entropy(logits, domains)
        # per-sample input gradients of the per-sample CE
        _, dx = _mlp2_backward(self.disc, cache,
                               dlogits * disc_in.shape[0])
        gp_value = float(np.mean(np.sum(dx * dx, axis=1)))
        rms = math.sqrt(max(gp_value, 1e-30))
        eps = 3e-4 / max(rms, 1e-8)

        def param_grads(shift):
            logits_s, cache_s = _mlp2_forward(self.disc, disc_in + shift * dx)
            _, dl = softmax_cross_entropy(logits_s, domains)
            g, _ = _mlp2_backward(self.disc, cache_s, dl)
            return g

        plus = param_grads(eps)
        minus = param_grads(-eps)
        gp_grads = [(p - m) / eps for p, m in zip(plus, minus)]
        return gp_value, gp_grads

    def update(self, batches, mode):
        self._check_mode(mode)
        k = len(batches)
        lam = float(self.hp["cdann_lambda"])
        gp_weight = float(self.hp["grad_penalty"])
        num_classes = self.learner.num_classes

        packs = [forward(self.learner, x) for x, _ in batches]
        features = [p[1] for p in packs]
        disc_in = np.concatenate([
            np.concatenate([f, _onehot(y, num_classes, f.dtype)], axis=1)
            for f, (_, y) in zip(features, batches)])
        domains = np.concatenate([
            np.full(batches[env][0].shape[0], env, dtype=np.int64)
            for env in range(k)])

        disc_loss = 0.0
        for _ in range(int(self.hp["disc_steps"])):
            disc_loss, disc_grads, _ = self._disc_loss_and_grads(
                disc_in, domains)
            if gp_weight != 0.0:
                gp, gp_grads = self._grad_penalty_grads(disc_in, domains)
                disc_loss = disc_loss + gp_weight * gp
                disc_grads = [g + gp_weight * gg
                              for g, gg in zip(disc_grads, gp_grads)]
            optimizer_step(self.disc, disc_grads, self.disc_opt)

        grads = zeros_like_arrays(self.opt_params)
        extra = [None] * k
        adv_loss = 0.0
        if lam != 0.0:
            adv_loss, _, dx = self._disc_loss_and_grads(
                disc_in, domains, want_param_grads=False)
            dfeat_adv = -lam * dx[:, :features[0].shape[1]]
            offset = 0
            for env in range(k):
                b = features[env].shape[0]
                extra[env] = dfeat_adv[offset:offset + b]
                offset += b
        ce = self._ce_accumulate(batches, grads, extra_dfeatures=extra)
        loss = ce - lam * adv_loss
        self._step(grads, loss)
        return self._metrics(loss=loss, ce=ce, penalty=adv_loss,
                             disc_loss=disc_loss)

    def discriminator_accuracy(self, batches):
        """Fraction of pooled samples whose modality the disc identifies."""
        k = len(batches)
        num_classes = self.learner.num_classes
        parts, domains = [], []
        for env, (x, y) in enumerate(batches):
            f, _ = featurize(self.learner, x)
            parts.append(np.concatenate([f, _onehot(y, num_classes, f.dtype)],
                                        axis=1))
            domains.append(np.full(x.shape[0], env, dtype=np.int64))
        logits, _ = _mlp2_forward(self.disc, np.concatenate(parts))
        return float(np.mean(np.argmax(logits, axis=1)
                             == np.concatenate(domains)))


class SagNet(Algorithm):
    """Style/content split on features with an adversarial style head.

    With a zero adversarial weight the whole style machinery is skipped
    and the update is exactly ERM, which keeps the documented
    penalty-off equivalence bit-tight.
    """

    def __init__(self, config, learner, num_modalities, rng):
        super().__init__(config, learner, num_modalities, rng)
        feature_dim = learner.classifier[0].shape[0]
        bound = 1.0 / math.sqrt(feature_dim)
        self.style_head = [
            self.rng.uniform_range(-bound, bound,
                                   (feature_dim, learner.num_classes)
                                   ).astype(learner.dtype),
            np.zeros(learner.num_classes, dtype=learner.dtype)]
        self.style_opt = OptimizerState(kind="adam", lr=self.hp["lr"])

    def update(self, batches, mode):
        self._check_mode(mode)
        w_adv = float(self.hp["sag_w_adv"])
        if w_adv == 0.0:
            grads = zeros_like_arrays(self.opt_params)
            loss = self._ce_accumulate(batches, grads)
            self._step(grads, loss)
            return self._metrics(loss=loss, ce=loss, penalty=0.0)

        k = len(batches)
        packs = [featurize(self.learner, x) for x, _ in batches]
        features = np.concatenate([p[0] for p in packs])
        labels = np.concatenate([y for _, y in batches])
        n = features.shape[0]
        view_style, view_content, sr_cache = _style_randomize_forward(
            features, self.rng)

        # content path: classify style-randomized features
        logits = classify(self.learner, view_style)
        ce, dlogits = softmax_cross_entropy(logits, labels)
        clf_grads, d_style = classify_backward(self.learner, view_style,
                                               dlogits)

        # adversarial path: push the style head toward uniform outputs,
        # d(-mean logp)/dlogits = (softmax - 1/C) / n
        ws, bs = self.style_head
        style_logits = affine(view_content, ws, bs)
        logp = log_softmax(style_logits)
        adv_loss = float(-logp.mean())
        dstyle_logits = (softmax(style_logits) - 1.0 / logp.shape[1]) / n
        d_content = w_adv * (dstyle_logits @ ws.T)

        dfeatures = _style_randomize_backward(sr_cache, d_style, d_content)

        grads = zeros_like_arrays(self.opt_params)
        offset = 0
        for env in range(k):
            b = batches[env][0].shape[0]
            feat_g, _ = featurize_backward(self.learner, packs[env][1],
                                           dfeatures[offset:offset + b])
            offset += b
            for acc, g in zip(grads, feat_g):
                acc += g
        for acc, g in zip(grads[-2:], clf_grads):
            acc += g

        # style head trains on detached content-randomized features
        head_ce, dhead_logits = softmax_cross_entropy(style_logits, labels)
        dws, dbs, _ = affine_backward(view_content, ws, dhead_logits)
        optimizer_step(self.style_head, [dws, dbs], self.style_opt)

        loss = ce + w_adv * adv_loss
        self._step(grads, loss)
        return self._metrics(loss=loss, ce=ce, penalty=adv_loss,
                             style_head_ce=head_ce)


class CondCAD(Algorithm):
    """Contrastive conditional alignment bottleneck.

    Within each label group, attention over cosine similarities scores
    how identifiable the anchor's modality is; the mean log-probability
    of the anchor's own modality is weighted by lambda and minimized
    alongside the classification loss.
    """

    def update(self, batches, mode):
        self._check_mode(mode)
        k = len(batches)
        lam = float(self.hp["ccad_lambda"])
        grads = zeros_like_arrays(self.opt_params)
        extra = [None] * k
        bottleneck = 0.0
        if lam != 0.0:
            packs = [featurize(self.learner, x) for x, _ in batches]
            features = np.concatenate([p[0] for p in packs])
            labels = np.concatenate([y for _, y in batches])
            modalities = np.concatenate([
                np.full(batches[env][0].shape[0], env, dtype=np.int64)
                for env in range(k)])
            bottleneck, dfeat = cond_cad_loss(
                features, labels, modalities, float(self.hp["temperature"]))
            offset = 0
            for env in range(k):
                b = batches[env][0].shape[0]
                extra[env] = lam * dfeat[offset:offset + b].astype(
                    packs[env][0].dtype)
                offset += b
        ce = self._ce_accumulate(batches, grads, extra_dfeatures=extra)
        loss = ce + lam * bottleneck
        self._step(grads, loss)
        return self._metrics(loss=loss, ce=ce, penalty=bottleneck)


class EQRM(Algorithm):
    """Quantile risk over environments after a mean-risk burn-in."""

    def __init__(self, config, learner, num_modalities, rng):
        super().__init__(config, learner, num_modalities, rng)
        self._switched = False

    def update(self, batches, mode):
        self._check_mode(mode)
        k = len(batches)
        burnin = int(self.hp["burnin_iters"])
        quantile_phase = self.step_count >= burnin
        if quantile_phase and burnin > 0 and not self._switched:
            self.opt.reset_moments()
            self._switched = True

        packs = [forward(self.learner, x) for x, _ in batches]
        risks = []
        dlogit_list = []
        for (x, y), (logits, _, _) in zip(batches, packs):
            ce, dlogits = softmax_cross_entropy(logits, y)
            risks.append(ce)
            dlogit_list.append(dlogits)
        if quantile_phase:
            objective, weights = quantile_risk_weights(
                risks, float(self.hp["quantile"]))
        else:
            objective = float(np.mean(risks))
            weights = np.full(k, 1.0 / k)

        grads = zeros_like_arrays(self.opt_params)
        for env in range(k):
            _, features, cache = packs[env]
            dlogits = weights[env] * dlogit_list[env]
            clf_g, dfeat = classify_backward(self.learner, features, dlogits)
            feat_g, _ = featurize_backward(self.learner, cache, dfeat)
            for acc, g in zip(grads, feat_g + clf_g):
                acc += g
        self._step(grads, objective)
        return self._metrics(loss=objective, ce=float(np.mean(risks)),
                             penalty=0.0,
                             phase="quantile" if quantile_phase else "mean")


class ERMPlusPlus(Algorithm):
    """ERM plus a simple moving average of the learner from mid-budget."""

    def __init__(self, config, learner, num_modalities, rng):
        super().__init__(config, learner, num_modalities, rng)
        self.average_start = config.steps_budget // 2
        self._avg = None
        self._avg_count = 0

    def update(self, batches, mode):
        self._check_mode(mode)
        grads = zeros_like_arrays(self.opt_params)
        loss = self._ce_accumulate(batches, grads)
        self._step(grads, loss)
        if self.step_count >= max(self.average_start, 1):
            arrays = self.learner.arrays()
            if self._avg is None:
                self._avg = [a.astype(np.float64) for a in arrays]
                self._avg_count = 1
            else:
                self._avg_count += 1
                for acc, a in zip(self._avg, arrays):
                    acc += (a - acc) / self._avg_count
        return self._metrics(loss=loss, ce=loss, penalty=0.0,
                             averaging=self._avg_count > 0)

    def eval_params(self):
        if self._avg is None:
            return self.learner
        from .learner import LearnerParams
        return LearnerParams.from_arrays(
            [a.astype(self.learner.dtype) for a in self._avg])


class URM(Algorithm):
    """Push tanh-squashed features toward uniform on [-1, 1]^d via a GAN.

    A binary discriminator separates squashed features from uniform
    noise; the learner receives the lambda-weighted sign-flipped
    discriminator loss on the feature side.
    """

    def __init__(self, config, learner, num_modalities, rng):
        super().__init__(config, learner, num_modalities, rng)
        feature_dim = learner.classifier[0].shape[0]
        self.disc = _init_mlp2(self.rng, feature_dim, 1, dtype=learner.dtype)
        self.disc_opt = OptimizerState(kind="adam", lr=self.hp["lr"])

    def update(self, batches, mode):
        self._check_mode(mode)
        k = len(batches)
        lam = float(self.hp["urm_lambda"])

        packs = [featurize(self.learner, x) for x, _ in batches]
        features = np.concatenate([p[0] for p in packs])
        squashed = np.tanh(features)
        noise = self.rng.uniform_range(-1.0, 1.0, squashed.shape).astype(
            squashed.dtype)

        # discriminator: uniform noise labeled real, features labeled fake
        logits_fake, cache_fake = _mlp2_forward(self.disc, squashed)
        logits_real, cache_real = _mlp2_forward(self.disc, noise)
        n = squashed.shape[0]
        disc_loss = 0.5 * float(np.mean(_softplus(logits_fake))
                                + np.mean(_softplus(-logits_real)))
        d_fake = 0.5 * _sigmoid(logits_fake) / n
        d_real = -0.5 * _sigmoid(-logits_real) / n
        g_fake, _ = _mlp2_backward(self.disc, cache_fake, d_fake)
        g_real, _ = _mlp2_backward(self.disc, cache_real, d_real)
        optimizer_step(self.disc, [a + b for a, b in zip(g_fake, g_real)],
                       self.disc_opt)

        grads = zeros_like_arrays(self.opt_params)
        extra = [None] * k
        gen_term = 0.0
        if lam != 0.0:
            gen_term, dfeat_gen = uniformity_gap(self.disc, features)
            dfeat = -lam * dfeat_gen
            offset = 0
            for env in range(k):
                b = packs[env][0].shape[0]
                extra[env] = dfeat[offset:offset + b]
                offset += b
        ce = self._ce_accumulate(batches, grads, extra_dfeatures=extra)
        loss = ce - lam * gen_term
        self._step(grads, loss)
        return self._metrics(loss=loss, ce=ce, penalty=gen_term,
                             disc_loss=disc_loss)


class Concat(Algorithm):
    """Mean-fused multi-modal features into the shared classifier."""

    family = "mml"

    def _fused_ce(self, batches):
        packs = [featurize(self.learner, x) for x, _ in batches]
        features = [p[0] for p in packs]
        fused = fuse_concat(features)
        labels = batches[0][1]
        logits = classify(self.learner, fused)
        ce, dlogits = softmax_cross_entropy(logits, labels)
        clf_g, dfused = classify_backward(self.learner, fused, dlogits)
        return packs, features, ce, clf_g, dfused

    def update(self, batches, mode):
        self._check_mode(mode)
        k = len(batches)
        packs, _, ce, clf_g, dfused = self._fused_ce(batches)
        grads = zeros_like_arrays(self.opt_params)
        for env in range(k):
            feat_g, _ = featurize_backward(self.learner, packs[env][1],
                                           dfused / k)
            for acc, g in zip(grads, feat_g):
                acc += g
        for acc, g in zip(grads[-2:], clf_g):
            acc += g
        self._step(grads, ce)
        return self._metrics(loss=ce, ce=ce, penalty=0.0)


class OGM(Concat):
    """Concat fusion with per-modality gradient modulation.

    Modality score = batch-mean softmax probability of the true class
    from that modality's features alone; dominant modalities get their
    feature-path gradients scaled down before the optimizer step.
    """

    family = "mml"

    def update(self, batches, mode):
        self._check_mode(mode)
        k = len(batches)
        packs, features, ce, clf_g, dfused = self._fused_ce(batches)
        labels = batches[0][1]
        scores = []
        for env in range(k):
            p = softmax(classify(self.learner, features[env]))
            scores.append(float(p[np.arange(labels.shape[0]), labels].mean()))
        coeffs = ogm_coefficients(scores, float(self.hp["ogm_alpha"]))
        grads = zeros_like_arrays(self.opt_params)
        for env in range(k):
            feat_g, _ = featurize_backward(self.learner, packs[env][1],
                                           (coeffs[env] / k) * dfused)
            for acc, g in zip(grads, feat_g):
                acc += g
        for acc, g in zip(grads[-2:], clf_g):
            acc += g
        self._step(grads, ce)
        return self._metrics(loss=ce, ce=ce, penalty=0.0,
                             min_coeff=float(coeffs.min()))


class DLMG(Algorithm):
    """Concat fusion plus a learned, sigmoid-gated modality-gap penalty.

    Per-modality offset vectors absorb systematic feature shifts inside
    the gap measurement only, and a scalar gate weight w (through a
    sigmoid) scales the gap; offsets, gate, and learner share one
    optimizer. The formulation follows the one-line characterization of
    the method and is interpretive, which the metrics flag.
    """

    family = "mml"

    def __init__(self, config, learner, num_modalities, rng):
        self._aux_built = False
        super().__init__(config, learner, num_modalities, rng)

    def _optimizer_params(self):
        feature_dim = self.learner.classifier[0].shape[0]
        self.offsets = [np.zeros(feature_dim, dtype=self.learner.dtype)
                        for _ in range(self.num_modalities)]
        self.gate = np.zeros((), dtype=np.float64)
        self._aux_built = True
        return self.learner.arrays() + self.offsets + [self.gate]

    def update(self, batches, mode):
        self._check_mode(mode)
        k = len(batches)
        lam = float(self.hp.get("dlmg_lambda", 1.0))
        packs = [featurize(self.learner, x) for x, _ in batches]
        features = [p[0] for p in packs]
        fused = fuse_concat(features)
        labels = batches[0][1]
        logits = classify(self.learner, fused)
        ce, dlogits = softmax_cross_entropy(logits, labels)
        clf_g, dfused = classify_backward(self.learner, fused, dlogits)

        grads = zeros_like_arrays(self.opt_params)
        n_learner = len(self.learner.arrays())
        gap = 0.0
        gate_sig = float(_sigmoid(self.gate))
        dfeat_extra = [None] * k
        if lam != 0.0 and k >= 2:
            gap, dgap_feat, dgap_off = dlmg_gap_and_grads(
                features, labels, self.offsets)
            scale = lam * gate_sig
            dfeat_extra = [scale * d for d in dgap_feat]
            for m in range(k):
                grads[n_learner + m] += scale * dgap_off[m]
            # gate gradient: d/dw of lam * sigmoid(w) * gap
            grads[-1] += lam * gate_sig * (1.0 - gate_sig) * gap

        for env in range(k):
            dfeat = dfused / k
            if dfeat_extra[env] is not None:
                dfeat = dfeat + dfeat_extra[env]
            feat_g, _ = featurize_backward(self.learner, packs[env][1], dfeat)
            for acc, g in zip(grads[:n_learner], feat_g):
                acc += g
        for acc, g in zip(grads[n_learner - 2:n_learner], clf_g):
            acc += g
        loss = ce + lam * gate_sig * gap
        self._step(grads, loss)
        return self._metrics(loss=loss, ce=ce, penalty=gap,
                             gate=gate_sig, interpretive=True)


ALGORITHMS = {
    "Concat": Concat,
    "OGM": OGM,
    "DLMG": DLMG,
    "ERM": ERM,
    "IRM": IRM,
    "Mixup": Mixup,
    "CDANN": CDANN,
    "SagNet": SagNet,
    "IB_ERM": IBERM,
    "CondCAD": CondCAD,
    "EQRM": EQRM,
    "ERM++": ERMPlusPlus,
    "URM": URM,
}


def algorithm_family(kind):
    if kind in MML_KINDS:
        return "mml"
    if kind in DG_KINDS:
        return "dg"
    raise ConfigError("unknown algorithm kind %r" % kind)


def build_algorithm(config, learner, num_modalities, rng):
    cls = ALGORITHMS.get(config.kind)
    if cls is None:
        raise ConfigError("unknown algorithm kind %r" % config.kind)
    return cls(config, learner, num_modalities, rng)
