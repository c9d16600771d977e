"""Shared fixtures: a hand-crafted separable classifier world.

The model is a 2-class MLP whose first layer is the identity, so the
designed feature clusters pass through ReLU untouched and the last layer
is fully controlled. ID classes sit at two tight nonnegative corners; the
OOD cluster sits near the origin, orthogonal to both class rows of the
output layer. A few deliberately ambiguous validation samples keep
likelihood-based temperature fitting away from the T -> 0 boundary.
"""

import numpy as np
import pytest

from oodnoise import detectors as det
from oodnoise import mlp, tensorio

MU0 = np.array([4.0, 0.5, 0.5, 3.0])
MU1 = np.array([0.5, 4.0, 3.0, 0.5])
W_OUT = np.array([[2.0, -2.0, -1.0, 1.0], [-2.0, 2.0, 1.0, -1.0]])
FEATURE_NOISE = 0.05
OOD_CENTER = np.full(4, 0.1)


def hand_model() -> mlp.ClassifierModel:
    spec = mlp.MlpSpec(input_dim=4, hidden_dims=(4,), num_classes=2, seed=0)
    return mlp.ClassifierModel(
        spec=spec,
        weights=[np.eye(4), W_OUT.copy()],
        biases=[np.zeros(4), np.zeros(2)])


def _draw_id(gen, n):
    labels = gen.integers(0, 2, n)
    means = np.stack([MU0, MU1])
    feats = means[labels] + FEATURE_NOISE * gen.standard_normal((n, 4))
    return np.maximum(feats, 0.0), labels


def _draw_ood(gen, n):
    return np.maximum(OOD_CENTER + 0.01 * gen.standard_normal((n, 4)), 0.0)


def _bundle(name, feats, labels=None):
    tensors = {"feat": feats.astype(np.float32)}
    if labels is not None:
        tensors["label"] = labels.astype(np.int32)
    return tensorio.TensorBundle(name, tensors)


def build_separable_world(seed=0, n_train=300, n_val=120, n_boundary=8,
                          n_test=100, n_ood=80):
    """Returns (model, FitContext, id_test trace, ood_test trace)."""
    gen = np.random.Generator(np.random.Philox(key=np.uint64(seed)))
    model = hand_model()

    tr_f, tr_y = _draw_id(gen, n_train)
    va_f, va_y = _draw_id(gen, n_val)
    # ambiguous validation points at the class midpoint (still clean labels)
    mid = (MU0 + MU1) / 2.0
    amb_f = mid + FEATURE_NOISE * gen.standard_normal((n_boundary, 4))
    amb_y = np.arange(n_boundary) % 2
    va_f = np.vstack([va_f, np.maximum(amb_f, 0.0)])
    va_y = np.concatenate([va_y, amb_y])
    te_f, te_y = _draw_id(gen, n_test)

    train = mlp.export_bundle(model, _bundle("train", tr_f, tr_y))
    val = mlp.export_bundle(model, _bundle("val", va_f, va_y))
    test = mlp.export_bundle(model, _bundle("test", te_f, te_y))
    ood_val = mlp.export_bundle(model, _bundle("oodval", _draw_ood(gen, n_ood)))
    ood_test = mlp.export_bundle(model, _bundle("oodtest", _draw_ood(gen, n_ood)))

    ctx = det.FitContext(id_train=train, id_val=val, ood_val=ood_val,
                         model=model, label_source="train")
    return model, ctx, test, ood_test


@pytest.fixture(scope="session")
def separable_world():
    return build_separable_world(seed=7)
