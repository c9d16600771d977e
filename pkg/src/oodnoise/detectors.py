"""The 20 post-hoc OOD scoring methods as fit/score pairs over bundles.

Every method follows the convention "higher score = more in-distribution";
methods that are natively oriented the other way are negated here at the
boundary. Six methods consume class labels while fitting (MDS, RMDS,
MDSEnsemble, GRAM, OpenMax, SHE); the ``label_source`` switch decides
whether those six fit on the (possibly noisy) training set or the clean
validation set. Every other method is label-free apart from TempScaling,
which always calibrates on validation labels.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensorio
from .mlp import ClassifierModel, input_gradient
from .numerics import (GaussianStats, fit_gaussian_stats, logsumexp,
                       mahalanobis_sq, percentile, softmax,
                       top_singular_triplet, weibull_mle, weibull_power)

CLASS_STAT_DETECTORS = ("mds", "rmds", "mdsens", "gram", "openmax", "she")

# the 20 benchmarked methods; odin_notemp / odin_nopert are ablation variants
DEFAULT_DETECTORS = (
    "msp", "tempscale", "odin", "gen", "mls", "ebo", "react", "rankfeat",
    "dice", "ash", "mds", "mdsens", "rmds", "klm", "openmax", "she", "gram",
    "knn", "vim", "gradnorm",
)

LABEL_SOURCE_TRAIN = "train"
LABEL_SOURCE_VAL = "val"

ODIN_M_GRID = (0.0, 0.0005, 0.001, 0.0014, 0.002, 0.005)
ODIN_T_GRID = (1.0, 10.0, 100.0, 1000.0)
ODIN_DEFAULT_T = 1000.0
ODIN_DEFAULT_M = 0.0014

_TINY = 1e-12


class DetectorError(ValueError):
    """A detector cannot be fitted or scored with the inputs at hand."""


@dataclass
class FitContext:
    """Everything a detector may consume while fitting."""

    id_train: tensorio.TensorBundle
    id_val: tensorio.TensorBundle
    ood_val: tensorio.TensorBundle | None = None
    model: ClassifierModel | None = None
    label_source: str = LABEL_SOURCE_TRAIN

    def __post_init__(self):
        if self.label_source not in (LABEL_SOURCE_TRAIN, LABEL_SOURCE_VAL):
            raise DetectorError(f"unknown label_source {self.label_source!r}")
        if self.label_source == LABEL_SOURCE_VAL and not self.id_val.has_labels:
            raise DetectorError("label_source='val' requires validation labels")

    @property
    def fit_bundle(self) -> tensorio.TensorBundle:
        """The bundle class-statistic methods fit on."""
        return self.id_train if self.label_source == LABEL_SOURCE_TRAIN else self.id_val


@dataclass
class DetectorState:
    """Fitted parameters of one detector; immutable once constructed."""

    method: str
    params: dict = field(default_factory=dict)

    def hyper_summary(self) -> dict:
        """Scalar hyperparameters, echoed into run reports."""
        out = {}
        for key, value in self.params.items():
            if isinstance(value, (bool, int, float, str)):
                out[key] = value
        return out


def _require_model(model, method):
    if model is None:
        raise DetectorError(f"detector {method!r} requires a classifier model")
    return model


def _floats(bundle, key):
    return np.asarray(bundle.tensors[key], dtype=np.float64) if key in bundle.tensors \
        else _missing(bundle, key)


def _missing(bundle, key):
    raise DetectorError(f"bundle {bundle.name!r} lacks tensor {key!r}")


def _logits(bundle):
    return _floats(bundle, tensorio.KEY_LOGITS)


def _feats(bundle):
    return _floats(bundle, tensorio.KEY_FEATURES)


def _recompute_logits(feats, model):
    w, b = model.last_layer
    return feats @ w.T + b


# ---------------------------------------------------------------------------
# softmax- and logit-space scores
# ---------------------------------------------------------------------------

def score_msp(logits) -> np.ndarray:
    """Maximum softmax probability at temperature 1."""
    return softmax(logits, 1.0).max(axis=-1)


def score_tempscale(logits, temperature: float) -> np.ndarray:
    return softmax(logits, temperature).max(axis=-1)


def score_mls(logits) -> np.ndarray:
    return np.asarray(logits, dtype=np.float64).max(axis=-1)


def score_ebo(logits, temperature: float = 1.0) -> np.ndarray:
    return logsumexp(logits, temperature)


def score_gen(logits, gamma: float = 0.1, top_m: int | None = None) -> np.ndarray:
    """Generalized entropy of the top-M probabilities, negated so that
    one-hot predictions attain the maximum score of 0."""
    p = softmax(logits, 1.0)
    c = p.shape[-1]
    m = min(c, 10) if top_m is None else min(top_m, c)
    top = np.sort(p, axis=-1)[..., ::-1][..., :m]
    return -(top ** gamma * (1.0 - top) ** gamma).sum(axis=-1)


def score_gradnorm(feats, logits, temperature: float = 1.0) -> np.ndarray:
    """Closed form of the L1 norm of d KL(uniform || softmax) / d W for the
    last linear layer: ||p - u||_1 * ||f||_1."""
    p = softmax(logits, temperature)
    c = p.shape[-1]
    pu = np.abs(p - 1.0 / c).sum(axis=-1)
    fn = np.abs(np.asarray(feats, dtype=np.float64)).sum(axis=-1)
    return pu * fn


def _nll(logits, labels, temperature):
    p = softmax(logits, temperature)
    return float(-np.log(p[np.arange(len(labels)), labels] + 1e-300).mean())


def fit_temperature(val_logits, val_labels, lo: float = 0.01, hi: float = 100.0,
                    tol: float = 1e-4) -> float:
    """Golden-section search on log T minimizing validation NLL; never
    returns a temperature worse than T=1."""
    labels = np.asarray(val_labels)
    a, b = math.log(lo), math.log(hi)
    invphi = (math.sqrt(5.0) - 1.0) / 2.0
    x1 = b - invphi * (b - a)
    x2 = a + invphi * (b - a)
    f1 = _nll(val_logits, labels, math.exp(x1))
    f2 = _nll(val_logits, labels, math.exp(x2))
    while b - a > tol:
        if f1 <= f2:
            b, x2, f2 = x2, x1, f1
            x1 = b - invphi * (b - a)
            f1 = _nll(val_logits, labels, math.exp(x1))
        else:
            a, x1, f1 = x1, x2, f2
            x2 = a + invphi * (b - a)
            f2 = _nll(val_logits, labels, math.exp(x2))
    t = math.exp((a + b) / 2.0)
    if _nll(val_logits, labels, t) > _nll(val_logits, labels, 1.0):
        return 1.0
    return t


# ---------------------------------------------------------------------------
# activation-shaping scores (need the model's last layer)
# ---------------------------------------------------------------------------

def score_react(feats, model, clip: float | None) -> np.ndarray:
    """Clip penultimate activations at an upper bound, recompute logits,
    return the energy. clip=None (percentile 100) disables clipping."""
    feats = np.asarray(feats, dtype=np.float64)
    if clip is not None:
        feats = np.minimum(feats, clip)
    return logsumexp(_recompute_logits(feats, model), 1.0)


def largest_divisor_leq_sqrt(d: int) -> int:
    r = 1
    for cand in range(1, math.isqrt(d) + 1):
        if d % cand == 0:
            r = cand
    return r


def score_rankfeat(feats, model) -> np.ndarray:
    """Subtract the leading rank-1 component of each sample's reshaped
    feature matrix before recomputing the energy.

    Samples whose spectrum is too degenerate for power iteration to settle
    fall back to an exact SVD instead of failing the whole batch.
    """
    feats = np.atleast_2d(np.asarray(feats, dtype=np.float64))
    d = feats.shape[1]
    r = largest_divisor_leq_sqrt(d)
    shaved = np.empty_like(feats)
    for i, row in enumerate(feats):
        m = row.reshape(r, d // r)
        try:
            sigma, u, v = top_singular_triplet(m)
        except RuntimeError:
            uu, ss, vt = np.linalg.svd(m, full_matrices=False)
            sigma, u, v = float(ss[0]), uu[:, 0], vt[0]
        shaved[i] = (m - sigma * np.outer(u, v)).ravel()
    return logsumexp(_recompute_logits(shaved, model), 1.0)


def dice_mask(model, mean_feats, sparsity: float) -> np.ndarray:
    """Per-class boolean mask keeping the ceil((1-p/100)*d) strongest
    entries of the mean contribution matrix W * mean_f."""
    w, _ = model.last_layer
    contrib = w * np.asarray(mean_feats, dtype=np.float64)[None, :]
    d = contrib.shape[1]
    keep = math.ceil((1.0 - sparsity / 100.0) * d)
    mask = np.zeros_like(contrib, dtype=bool)
    if keep > 0:
        order = np.argsort(-contrib, axis=1, kind="mergesort")[:, :keep]
        np.put_along_axis(mask, order, True, axis=1)
    return mask


def score_dice(feats, model, mask) -> np.ndarray:
    w, b = model.last_layer
    logits = np.asarray(feats, dtype=np.float64) @ (w * mask).T + b
    return logsumexp(logits, 1.0)


def ash_shape(feats, prune_percent: float) -> np.ndarray:
    """Zero the floor(p*d/100) smallest entries per sample and rescale the
    survivors so the per-sample sum is preserved."""
    feats = np.atleast_2d(np.asarray(feats, dtype=np.float64)).copy()
    d = feats.shape[1]
    n_prune = int(math.floor(prune_percent * d / 100.0))
    if n_prune <= 0:
        return feats
    order = np.argsort(feats, axis=1, kind="mergesort")[:, :n_prune]
    before = feats.sum(axis=1)
    np.put_along_axis(feats, order, 0.0, axis=1)
    after = feats.sum(axis=1)
    ratio = np.where(after != 0.0, before / np.where(after != 0.0, after, 1.0), 1.0)
    return feats * ratio[:, None]


def score_ash(feats, model, prune_percent: float) -> np.ndarray:
    shaped = ash_shape(feats, prune_percent)
    return logsumexp(_recompute_logits(shaped, model), 1.0)


# ---------------------------------------------------------------------------
# distance-based scores
# ---------------------------------------------------------------------------

def _class_mahalanobis(feats, means, precision) -> np.ndarray:
    """N x C squared Mahalanobis distances to every class mean."""
    feats = np.atleast_2d(np.asarray(feats, dtype=np.float64))
    out = np.empty((feats.shape[0], means.shape[0]))
    for c in range(means.shape[0]):
        out[:, c] = mahalanobis_sq(feats, means[c], precision)
    return out


def score_mds(feats, stats: GaussianStats) -> np.ndarray:
    return -_class_mahalanobis(feats, stats.means, stats.precision).min(axis=1)


def score_rmds(feats, stats: GaussianStats) -> np.ndarray:
    d_class = _class_mahalanobis(feats, stats.means, stats.precision).min(axis=1)
    feats2 = np.atleast_2d(np.asarray(feats, dtype=np.float64))
    d_bg = mahalanobis_sq(feats2, stats.global_mean, stats.global_precision)
    return -(d_class - np.atleast_1d(d_bg))


def score_klm(logits, templates, template_eps: float = 1e-12) -> np.ndarray:
    """Negative smallest KL(test softmax || class template)."""
    p = softmax(logits, 1.0)
    p = np.atleast_2d(p)
    t = np.log(np.maximum(np.asarray(templates, dtype=np.float64), template_eps))
    entropy_term = np.where(p > 0.0, p * np.log(np.where(p > 0.0, p, 1.0)), 0.0).sum(axis=1)
    kl = entropy_term[:, None] - p @ t.T
    return -kl.min(axis=1)


def score_she(feats, logits, class_means) -> np.ndarray:
    feats = np.atleast_2d(np.asarray(feats, dtype=np.float64))
    pred = np.atleast_2d(np.asarray(logits, dtype=np.float64)).argmax(axis=1)
    return (feats * np.asarray(class_means, dtype=np.float64)[pred]).sum(axis=1)


def l2_normalize(feats, eps: float = 1e-12) -> np.ndarray:
    feats = np.asarray(feats, dtype=np.float64)
    norms = np.linalg.norm(feats, axis=-1, keepdims=True)
    return feats / np.maximum(norms, eps)


def score_knn(feats, reference, k: int, chunk: int = 1024) -> np.ndarray:
    """Negative Euclidean distance to the k-th nearest (L2-normalized)
    reference feature; exact full scan."""
    q = np.atleast_2d(l2_normalize(feats))
    ref = np.asarray(reference, dtype=np.float64)
    k = min(k, ref.shape[0])
    ref_sq = (ref * ref).sum(axis=1)
    out = np.empty(q.shape[0])
    for start in range(0, q.shape[0], chunk):
        block = q[start:start + chunk]
        d2 = (block * block).sum(axis=1)[:, None] + ref_sq[None, :] - 2.0 * block @ ref.T
        kth = np.partition(d2, k - 1, axis=1)[:, k - 1]
        out[start:start + chunk] = np.sqrt(np.maximum(kth, 0.0))
    return -out


def score_vim(feats, logits, mean, residual_basis, alpha: float) -> np.ndarray:
    """Energy minus alpha times the feature norm outside the principal
    subspace of the training features."""
    feats = np.atleast_2d(np.asarray(feats, dtype=np.float64))
    energy = logsumexp(logits, 1.0)
    if residual_basis.shape[1] == 0:
        return np.atleast_1d(energy)
    resid = np.linalg.norm((feats - mean) @ residual_basis, axis=1)
    return np.atleast_1d(energy) - alpha * resid


# ---------------------------------------------------------------------------
# OpenMax
# ---------------------------------------------------------------------------

def openmax_unknown_mass(logits, mean_logits, has_class, shapes, scales,
                         alpha_revise: int) -> np.ndarray:
    """Probability mass removed from the top-alpha classes by Weibull
    recalibration; the removed mass is the synthetic unknown class."""
    z = np.atleast_2d(np.asarray(logits, dtype=np.float64))
    p = softmax(z, 1.0)
    n, c = z.shape
    alpha = min(alpha_revise, c)
    ranked = np.argsort(-z, axis=1, kind="mergesort")
    unknown = np.zeros(n)
    rows = np.arange(n)
    for i in range(alpha):
        cls = ranked[:, i]
        dist = np.linalg.norm(z - mean_logits[cls], axis=1)
        zz = np.maximum(dist, 0.0) / scales[cls]
        cdf = -np.expm1(-weibull_power(zz, shapes[cls]))
        omega = ((alpha - i) / alpha) * cdf * has_class[cls]
        unknown += p[rows, cls] * omega
    return unknown


def score_openmax(logits, mean_logits, has_class, shapes, scales,
                  alpha_revise: int) -> np.ndarray:
    return 1.0 - openmax_unknown_mass(logits, mean_logits, has_class, shapes,
                                      scales, alpha_revise)


# ---------------------------------------------------------------------------
# GRAM
# ---------------------------------------------------------------------------

GRAM_ORDERS = (1, 2, 3, 4, 5)


def gram_features(acts, orders=GRAM_ORDERS) -> np.ndarray:
    """Per-sample upper-triangle Gram entries for each power order.

    Each activation row is reshaped to r x (d/r) like RankFeat; returns an
    (N, n_orders, n_entries) array.
    """
    acts = np.atleast_2d(np.asarray(acts, dtype=np.float64))
    n, d = acts.shape
    r = largest_divisor_leq_sqrt(d)
    mats = acts.reshape(n, r, d // r)
    iu = np.triu_indices(r)
    out = np.empty((n, len(orders), iu[0].size))
    for oi, p in enumerate(orders):
        ap = mats ** p
        g = ap @ ap.transpose(0, 2, 1)
        out[:, oi, :] = g[:, iu[0], iu[1]]
    return out


def gram_deviation(values, vmin, vmax) -> np.ndarray:
    """Sum of relative min/max bound violations per sample."""
    below = np.clip(vmin[None] - values, 0.0, None) / np.maximum(np.abs(vmin[None]), _TINY)
    above = np.clip(values - vmax[None], 0.0, None) / np.maximum(np.abs(vmax[None]), _TINY)
    return (below + above).reshape(values.shape[0], -1).sum(axis=1)


def _gram_layer_deviations(features, pred, bounds_min, bounds_max, class_mask,
                           pooled_min, pooled_max) -> np.ndarray:
    dev = np.empty(features.shape[0])
    for c in np.unique(pred):
        sel = pred == c
        if class_mask[c]:
            dev[sel] = gram_deviation(features[sel], bounds_min[c], bounds_max[c])
        else:
            dev[sel] = gram_deviation(features[sel], pooled_min, pooled_max)
    return dev


# ---------------------------------------------------------------------------
# small logistic regression for the MDSEnsemble layer weights
# ---------------------------------------------------------------------------

def _logistic_weights(x, y, l2: float = 1e-3, max_iter: int = 100,
                      tol: float = 1e-10) -> np.ndarray:
    """Newton logistic regression; returns the feature coefficients
    (intercept dropped). Features are standardized internally and the
    scaling is folded back into the returned weights."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    mu = x.mean(axis=0)
    sd = x.std(axis=0)
    sd = np.where(sd > 0, sd, 1.0)
    xs = np.hstack([(x - mu) / sd, np.ones((x.shape[0], 1))])
    w = np.zeros(xs.shape[1])
    for _ in range(max_iter):
        p = 0.5 * (1.0 + np.tanh((xs @ w) / 2.0))  # overflow-free sigmoid
        grad = xs.T @ (p - y) + l2 * w
        hess = (xs * (p * (1 - p))[:, None]).T @ xs + l2 * np.eye(len(w))
        step = np.linalg.solve(hess, grad)
        w -= step
        if np.abs(step).max() < tol:
            break
    return w[:-1] / sd


# ---------------------------------------------------------------------------
# fit functions
# ---------------------------------------------------------------------------

def _tuning_pool(ctx, require: bool, method: str):
    if ctx.ood_val is None:
        if require:
            raise DetectorError(f"detector {method!r}: missing ood_val for tuning")
        return None
    return ctx.ood_val


def _fit_trivial(ctx, overrides):
    return {}


def _fit_tempscale(ctx, overrides):
    if not ctx.id_val.has_labels:
        raise DetectorError("tempscale requires validation labels")
    t = fit_temperature(_logits(ctx.id_val), ctx.id_val.labels)
    return {"temperature": float(t)}


def _odin_scores(model, bundle, temperature, magnitude):
    x = _floats(bundle, tensorio.KEY_INPUT)
    if magnitude != 0.0:
        grad = input_gradient(model, x, temperature)
        x = x + magnitude * np.sign(grad)
    from .mlp import forward_trace
    logits = forward_trace(model, x).logits
    return softmax(logits, temperature).max(axis=-1)


def _fit_odin_family(ctx, overrides, t_grid, m_grid, default_t, default_m):
    from .metrics import auroc

    model = _require_model(ctx.model, "odin")
    tune = (overrides or {}).get("tune", "auto")
    if tune not in ("auto", "require", "off"):
        raise DetectorError(f"unknown tune mode {tune!r}")
    ood_val = _tuning_pool(ctx, tune == "require", "odin") if tune != "off" else None
    if ood_val is None:
        return {"temperature": default_t, "magnitude": default_m, "tuned": False}
    best = None
    for m in m_grid:
        for t in t_grid:
            s_id = _odin_scores(model, ctx.id_val, t, m)
            s_ood = _odin_scores(model, ood_val, t, m)
            a = auroc(s_id, s_ood)
            if best is None or a > best[0]:
                best = (a, t, m)
    return {"temperature": float(best[1]), "magnitude": float(best[2]), "tuned": True}


def _fit_odin(ctx, overrides):
    return _fit_odin_family(ctx, overrides, ODIN_T_GRID, ODIN_M_GRID,
                            ODIN_DEFAULT_T, ODIN_DEFAULT_M)


def _fit_odin_notemp(ctx, overrides):
    return _fit_odin_family(ctx, overrides, (1.0,), ODIN_M_GRID, 1.0, ODIN_DEFAULT_M)


def _fit_odin_nopert(ctx, overrides):
    return _fit_odin_family(ctx, overrides, ODIN_T_GRID, (0.0,), ODIN_DEFAULT_T, 0.0)


def _fit_gen(ctx, overrides):
    o = overrides or {}
    c = ctx.id_train.num_classes
    return {"gamma": float(o.get("gamma", 0.1)),
            "top_m": int(o.get("top_m", min(c, 10)))}


def _fit_ebo(ctx, overrides):
    return {"temperature": float((overrides or {}).get("temperature", 1.0))}


def _fit_react(ctx, overrides):
    _require_model(ctx.model, "react")
    p = float((overrides or {}).get("percentile", 90.0))
    clip = None if p >= 100.0 else percentile(_feats(ctx.id_train).ravel(), p)
    return {"percentile": p, "clip": clip}


def _fit_rankfeat(ctx, overrides):
    _require_model(ctx.model, "rankfeat")
    return {}


def _fit_dice(ctx, overrides):
    model = _require_model(ctx.model, "dice")
    p = float((overrides or {}).get("sparsity", 70.0))
    mask = dice_mask(model, _feats(ctx.id_train).mean(axis=0), p)
    return {"sparsity": p, "mask": mask}


def _fit_ash(ctx, overrides):
    _require_model(ctx.model, "ash")
    return {"percentile": float((overrides or {}).get("percentile", 90.0))}


def _fit_mds(ctx, overrides):
    fit = ctx.fit_bundle
    stats = fit_gaussian_stats(fit.features, fit.labels, fit.num_classes)
    return {"means": stats.means, "precision": stats.precision,
            "global_mean": stats.global_mean,
            "global_precision": stats.global_precision}


def _stats_from_params(params) -> GaussianStats:
    return GaussianStats(means=params["means"],
                         shared_covariance=np.zeros_like(params["precision"]),
                         precision=params["precision"],
                         global_mean=params["global_mean"],
                         global_precision=params["global_precision"])


def _layer_keys(bundle) -> list[str]:
    keys = bundle.activation_keys()
    return keys if keys else [tensorio.KEY_FEATURES]


def _fit_mdsens(ctx, overrides):
    fit = ctx.fit_bundle
    keys = _layer_keys(fit)
    layers = []
    for key in keys:
        stats = fit_gaussian_stats(_floats(fit, key), fit.labels, fit.num_classes)
        layers.append({"means": stats.means, "precision": stats.precision})
    weights = np.ones(len(keys))
    if ctx.ood_val is not None and len(keys) > 1:
        def layer_scores(bundle):
            cols = [score_mds_layer(_floats(bundle, k), lay["means"], lay["precision"])
                    for k, lay in zip(keys, layers)]
            return np.column_stack(cols)
        x = np.vstack([layer_scores(ctx.id_val), layer_scores(ctx.ood_val)])
        y = np.r_[np.ones(ctx.id_val.num_samples), np.zeros(ctx.ood_val.num_samples)]
        weights = _logistic_weights(x, y)
    return {"layer_keys": keys, "layers": layers, "weights": weights}


def score_mds_layer(feats, means, precision) -> np.ndarray:
    return -_class_mahalanobis(feats, means, precision).min(axis=1)


def _fit_klm(ctx, overrides):
    # templates are label-free: mean softmax per *predicted* class on the
    # training set, so scores are identical under either label_source
    logits = _logits(ctx.id_train)
    p = softmax(logits, 1.0)
    pred = logits.argmax(axis=1)
    templates, classes = [], []
    for c in range(ctx.id_train.num_classes):
        sel = pred == c
        if sel.any():
            templates.append(p[sel].mean(axis=0))
            classes.append(c)
    if not templates:
        raise DetectorError("klm: no predictions to build templates from")
    return {"templates": np.asarray(templates), "template_classes": np.asarray(classes)}


def _fit_openmax(ctx, overrides):
    o = overrides or {}
    fit = ctx.fit_bundle
    logits = _logits(fit)
    labels = np.asarray(fit.labels)
    c = fit.num_classes
    tail_size = int(o.get("tail_size", 20))
    alpha = int(o.get("alpha_revise", min(c, 10)))
    correct = logits.argmax(axis=1) == labels
    mean_logits = np.zeros((c, logits.shape[1]))
    shapes = np.full(c, 1.0)
    scales = np.full(c, 1.0)
    has_class = np.zeros(c, dtype=bool)
    for cls in range(c):
        sel = correct & (labels == cls)
        if not sel.any():
            continue
        has_class[cls] = True
        mean_logits[cls] = logits[sel].mean(axis=0)
        dist = np.linalg.norm(logits[sel] - mean_logits[cls], axis=1)
        positive = dist[dist > 0]
        if positive.size >= 2:
            fitted = weibull_mle(positive, min(tail_size, positive.size))
            shapes[cls], scales[cls] = fitted.shape, fitted.scale
        else:
            # all fit samples sit at the mean: any deviation is extreme
            shapes[cls], scales[cls] = 1e4, max(float(dist.max(initial=0.0)), 1e-8)
    if not has_class.any():
        raise DetectorError("openmax: no correctly classified fit samples")
    return {"alpha_revise": alpha, "tail_size": tail_size,
            "mean_logits": mean_logits, "has_class": has_class,
            "shapes": shapes, "scales": scales}


def _fit_she(ctx, overrides):
    fit = ctx.fit_bundle
    feats = _feats(fit)
    logits = _logits(fit)
    labels = np.asarray(fit.labels)
    c = fit.num_classes
    correct = logits.argmax(axis=1) == labels
    means = np.zeros((c, feats.shape[1]))
    for cls in range(c):
        sel = correct & (labels == cls)
        if sel.any():
            means[cls] = feats[sel].mean(axis=0)
        # classes with no correctly predicted samples keep a zero template
    return {"class_means": means}


def _fit_gram(ctx, overrides):
    o = overrides or {}
    # bound_percentile=None keeps exact min/max bounds; a value p uses the
    # [p, 100-p] percentiles instead (robust variant for noisy fits)
    bound_pct = o.get("bound_percentile")
    fit = ctx.fit_bundle
    keys = _layer_keys(fit)
    labels = np.asarray(fit.labels)
    c = fit.num_classes

    def bounds_of(values):
        if bound_pct is None:
            return values.min(axis=0), values.max(axis=0)
        return (np.percentile(values, bound_pct, axis=0),
                np.percentile(values, 100.0 - bound_pct, axis=0))

    layers = []
    for key in keys:
        features = gram_features(_floats(fit, key))
        n_orders, n_entries = features.shape[1], features.shape[2]
        bounds_min = np.zeros((c, n_orders, n_entries))
        bounds_max = np.zeros((c, n_orders, n_entries))
        class_mask = np.zeros(c, dtype=bool)
        for cls in range(c):
            sel = labels == cls
            if sel.any():
                class_mask[cls] = True
                bounds_min[cls], bounds_max[cls] = bounds_of(features[sel])
        pooled_min, pooled_max = bounds_of(features)
        layers.append({"bounds_min": bounds_min, "bounds_max": bounds_max,
                       "class_mask": class_mask,
                       "pooled_min": pooled_min,
                       "pooled_max": pooled_max})
    # expected deviations on the clean validation set normalize the layers
    val_pred = _logits(ctx.id_val).argmax(axis=1)
    normalizers = []
    for key, layer in zip(keys, layers):
        features = gram_features(_floats(ctx.id_val, key))
        dev = _gram_layer_deviations(features, val_pred, layer["bounds_min"],
                                     layer["bounds_max"], layer["class_mask"],
                                     layer["pooled_min"], layer["pooled_max"])
        mean_dev = float(dev.mean())
        normalizers.append(mean_dev if mean_dev > 0 else 1.0)
    return {"layer_keys": keys, "layers": layers,
            "normalizers": np.asarray(normalizers)}


def _fit_knn(ctx, overrides):
    k = int((overrides or {}).get("k", 50))
    ref = l2_normalize(_feats(ctx.id_train))
    return {"k": min(k, ref.shape[0]), "reference": ref}


def _fit_vim(ctx, overrides):
    feats = _feats(ctx.id_train)
    logits = _logits(ctx.id_train)
    d = feats.shape[1]
    dim = int((overrides or {}).get("dim", max(d // 2, 1)))
    dim = min(dim, d)
    mean = feats.mean(axis=0)
    centered = feats - mean
    cov = centered.T @ centered / feats.shape[0]
    _, eigvecs = np.linalg.eigh(cov)  # ascending eigenvalues
    residual_basis = eigvecs[:, :d - dim]
    if residual_basis.shape[1]:
        resid = np.linalg.norm(centered @ residual_basis, axis=1)
        denom = float(resid.sum())
        alpha = float(logits.max(axis=1).sum() / denom) if denom > 0 else 0.0
    else:
        alpha = 0.0
    return {"dim": dim, "mean": mean, "residual_basis": residual_basis,
            "alpha": alpha}


def _fit_gradnorm(ctx, overrides):
    return {"temperature": float((overrides or {}).get("temperature", 1.0))}


# ---------------------------------------------------------------------------
# score dispatch
# ---------------------------------------------------------------------------

def _score_msp(params, bundle, model):
    return score_msp(_logits(bundle))


def _score_tempscale(params, bundle, model):
    return score_tempscale(_logits(bundle), params["temperature"])


def _score_odin(params, bundle, model):
    model = _require_model(model, "odin")
    return _odin_scores(model, bundle, params["temperature"], params["magnitude"])


def _score_gen(params, bundle, model):
    return score_gen(_logits(bundle), params["gamma"], params["top_m"])


def _score_mls(params, bundle, model):
    return score_mls(_logits(bundle))


def _score_ebo(params, bundle, model):
    return score_ebo(_logits(bundle), params["temperature"])


def _score_react(params, bundle, model):
    return score_react(_feats(bundle), _require_model(model, "react"), params["clip"])


def _score_rankfeat(params, bundle, model):
    return score_rankfeat(_feats(bundle), _require_model(model, "rankfeat"))


def _score_dice(params, bundle, model):
    return score_dice(_feats(bundle), _require_model(model, "dice"), params["mask"])


def _score_ash(params, bundle, model):
    return score_ash(_feats(bundle), _require_model(model, "ash"), params["percentile"])


def _score_mds(params, bundle, model):
    return score_mds(_feats(bundle), _stats_from_params(params))


def _score_rmds(params, bundle, model):
    return score_rmds(_feats(bundle), _stats_from_params(params))


def _score_mdsens(params, bundle, model):
    total = None
    for key, layer, w in zip(params["layer_keys"], params["layers"], params["weights"]):
        s = w * score_mds_layer(_floats(bundle, key), layer["means"], layer["precision"])
        total = s if total is None else total + s
    return total


def _score_klm(params, bundle, model):
    return score_klm(_logits(bundle), params["templates"])


def _score_openmax(params, bundle, model):
    return score_openmax(_logits(bundle), params["mean_logits"], params["has_class"],
                         params["shapes"], params["scales"], params["alpha_revise"])


def _score_she(params, bundle, model):
    return score_she(_feats(bundle), _logits(bundle), params["class_means"])


def _score_gram(params, bundle, model):
    pred = _logits(bundle).argmax(axis=1)
    total = np.zeros(bundle.num_samples)
    for key, layer, norm in zip(params["layer_keys"], params["layers"],
                                params["normalizers"]):
        features = gram_features(_floats(bundle, key))
        dev = _gram_layer_deviations(features, pred, layer["bounds_min"],
                                     layer["bounds_max"], layer["class_mask"],
                                     layer["pooled_min"], layer["pooled_max"])
        total += dev / norm
    return -total


def _score_knn(params, bundle, model):
    return score_knn(_feats(bundle), params["reference"], params["k"])


def _score_vim(params, bundle, model):
    return score_vim(_feats(bundle), _logits(bundle), params["mean"],
                     params["residual_basis"], params["alpha"])


def _score_gradnorm(params, bundle, model):
    return score_gradnorm(_feats(bundle), _logits(bundle), params["temperature"])


@dataclass(frozen=True)
class DetectorDef:
    name: str
    fit: callable
    score: callable
    needs_model: bool = False
    class_stat: bool = False


DETECTORS: dict[str, DetectorDef] = {d.name: d for d in [
    DetectorDef("msp", _fit_trivial, _score_msp),
    DetectorDef("tempscale", _fit_tempscale, _score_tempscale),
    DetectorDef("odin", _fit_odin, _score_odin, needs_model=True),
    DetectorDef("odin_notemp", _fit_odin_notemp, _score_odin, needs_model=True),
    DetectorDef("odin_nopert", _fit_odin_nopert, _score_odin, needs_model=True),
    DetectorDef("gen", _fit_gen, _score_gen),
    DetectorDef("mls", _fit_trivial, _score_mls),
    DetectorDef("ebo", _fit_ebo, _score_ebo),
    DetectorDef("react", _fit_react, _score_react, needs_model=True),
    DetectorDef("rankfeat", _fit_rankfeat, _score_rankfeat, needs_model=True),
    DetectorDef("dice", _fit_dice, _score_dice, needs_model=True),
    DetectorDef("ash", _fit_ash, _score_ash, needs_model=True),
    DetectorDef("mds", _fit_mds, _score_mds, class_stat=True),
    DetectorDef("rmds", _fit_mds, _score_rmds, class_stat=True),
    DetectorDef("mdsens", _fit_mdsens, _score_mdsens, class_stat=True),
    DetectorDef("klm", _fit_klm, _score_klm),
    DetectorDef("openmax", _fit_openmax, _score_openmax, class_stat=True),
    DetectorDef("she", _fit_she, _score_she, class_stat=True),
    DetectorDef("gram", _fit_gram, _score_gram, class_stat=True),
    DetectorDef("knn", _fit_knn, _score_knn),
    DetectorDef("vim", _fit_vim, _score_vim),
    DetectorDef("gradnorm", _fit_gradnorm, _score_gradnorm),
]}


def fit_detector(method: str, ctx: FitContext,
                 overrides: dict | None = None) -> DetectorState:
    """Fit one detector on a context; deterministic given the context."""
    if method not in DETECTORS:
        raise DetectorError(f"unknown detector {method!r}")
    definition = DETECTORS[method]
    if definition.needs_model:
        _require_model(ctx.model, method)
    params = definition.fit(ctx, overrides)
    return DetectorState(method=method, params=params)


def score_bundle(state: DetectorState, bundle: tensorio.TensorBundle,
                 model: ClassifierModel | None = None) -> np.ndarray:
    """Score every sample of a bundle; higher = more in-distribution."""
    definition = DETECTORS[state.method]
    scores = definition.score(state.params, bundle, model)
    return np.asarray(scores, dtype=np.float64).ravel()


# ---------------------------------------------------------------------------
# state (de)serialization: bundle-style directory of tensors + JSON params
# ---------------------------------------------------------------------------

def _encode(value, path, tensors):
    if isinstance(value, np.ndarray):
        if value.dtype.kind == "b":
            tensors[path] = value.astype(np.int32)
            return {"__tensor__": path, "kind": "bool"}
        if value.dtype.kind in "iu":
            tensors[path] = value.astype(np.int32)
            return {"__tensor__": path, "kind": "int"}
        tensors[path] = value.astype(np.float32)
        return {"__tensor__": path, "kind": "float"}
    if isinstance(value, dict):
        return {k: _encode(v, f"{path}.{k}", tensors) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_encode(v, f"{path}.{i}", tensors) for i, v in enumerate(value)]
    if isinstance(value, (np.floating, np.integer, np.bool_)):
        return value.item()
    return value


def _decode(node, tensors):
    if isinstance(node, dict):
        if "__tensor__" in node:
            arr = tensors[node["__tensor__"]]
            if node["kind"] == "bool":
                return arr.astype(bool)
            if node["kind"] == "float":
                return np.asarray(arr, dtype=np.float64)
            return np.asarray(arr)
        return {k: _decode(v, tensors) for k, v in node.items()}
    if isinstance(node, list):
        return [_decode(v, tensors) for v in node]
    return node


def save_state(state: DetectorState, directory_path) -> None:
    """Serialize to a bundle directory; float arrays are stored as float32."""
    tensors = {}
    skeleton = _encode(state.params, "p", tensors)
    bundle = tensorio.TensorBundle(
        name=f"detector-{state.method}", tensors=tensors,
        meta={"method": state.method, "params": skeleton})
    tensorio.write_bundle(bundle, directory_path, validate=False)


def load_state(directory_path) -> DetectorState:
    bundle = tensorio.read_bundle(directory_path, validate=False)
    params = _decode(bundle.meta["params"], bundle.tensors)
    return DetectorState(method=bundle.meta["method"], params=params)
