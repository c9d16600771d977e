"""Label-noise models: uniform (SU), class-conditional (SCC) and external
real (REAL) noisy label sets, plus empirical transition-matrix estimation.

All randomness comes from numpy's Philox counter-based generator keyed by
the caller's seed, so injected label sets are reproducible from (labels,
parameters, seed) alone.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

MODEL_SU = "su"
MODEL_SCC = "scc"
MODEL_REAL = "real"

_ROW_SUM_TOL = 1e-9


def _rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=np.uint64(seed)))


@dataclass
class TransitionMatrix:
    """Row-stochastic matrix; entry (i, j) = P(noisy=j | clean=i)."""

    matrix: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=np.float64)
        if m.ndim != 2 or m.shape[0] != m.shape[1]:
            raise ValueError("transition matrix must be square")
        if (m < 0).any():
            raise ValueError("transition matrix has negative entries")
        if np.abs(m.sum(axis=1) - 1.0).max() > _ROW_SUM_TOL:
            raise ValueError("transition matrix rows must sum to 1")
        self.matrix = m

    @property
    def num_classes(self) -> int:
        return int(self.matrix.shape[0])


@dataclass
class NoiseSpec:
    """How to corrupt a clean label set."""

    model: str
    rate: float = 0.0
    transition: TransitionMatrix | None = None
    noisy_labels: np.ndarray | None = None
    seed: int = 0
    exact: bool = True  # SU only: exact flip count vs per-sample Bernoulli

    def __post_init__(self):
        if self.model not in (MODEL_SU, MODEL_SCC, MODEL_REAL):
            raise ValueError(f"unknown noise model {self.model!r}")
        if not 0.0 <= self.rate <= 1.0:
            raise ValueError(f"noise rate {self.rate} outside [0, 1]")
        if self.model == MODEL_SCC and self.transition is None:
            raise ValueError("SCC noise requires a transition matrix")
        if self.model == MODEL_REAL and self.noisy_labels is None:
            raise ValueError("REAL noise requires an external noisy label tensor")

    def to_json(self) -> dict:
        out = {"model": self.model, "rate": float(self.rate), "seed": int(self.seed),
               "exact": bool(self.exact)}
        if self.transition is not None:
            out["transition"] = self.transition.matrix.tolist()
        return out


def inject_uniform(labels, num_classes: int, rate: float, seed: int,
                   exact: bool = True) -> np.ndarray:
    """Uniform (NCAR) noise: flip round(rate*N) labels chosen without
    replacement, each to a uniformly random *different* class."""
    labels = np.asarray(labels)
    if not 0.0 <= rate <= 1.0:
        raise ValueError(f"noise rate {rate} outside [0, 1]")
    if num_classes < 2:
        raise ValueError("need at least 2 classes")
    n = labels.shape[0]
    gen = _rng(seed)
    out = labels.copy()
    if exact:
        n_flip = int(round(rate * n))
        idx = gen.choice(n, size=n_flip, replace=False) if n_flip else np.empty(0, dtype=np.int64)
    else:
        idx = np.flatnonzero(gen.random(n) < rate)
    if idx.size:
        offsets = gen.integers(1, num_classes, size=idx.size)
        out[idx] = (labels[idx] + offsets) % num_classes
    return out


def inject_class_conditional(labels, transition: TransitionMatrix,
                             seed: int) -> np.ndarray:
    """Class-conditional (NAR) noise: sample each output label from the
    transition row of its clean label."""
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() >= transition.num_classes):
        raise ValueError("labels outside transition matrix range")
    cum = np.cumsum(transition.matrix, axis=1)
    cum[:, -1] = 1.0  # guard against rows summing to 1 - eps
    gen = _rng(seed)
    u = gen.random(labels.shape[0])
    rows = cum[labels]
    return (u[:, None] < rows).argmax(axis=1).astype(labels.dtype)


def estimate_transition(clean, noisy, num_classes: int):
    """Empirical transition matrix and overall noise rate from a
    (clean, noisy) label pair. Errors if any class is absent from clean."""
    clean = np.asarray(clean)
    noisy = np.asarray(noisy)
    if clean.shape != noisy.shape:
        raise ValueError("clean/noisy label arrays differ in length")
    for arr, tag in ((clean, "clean"), (noisy, "noisy")):
        if arr.min() < 0 or arr.max() >= num_classes:
            raise ValueError(f"{tag} labels outside [0, {num_classes})")
    counts = np.bincount(clean.astype(np.int64) * num_classes + noisy,
                         minlength=num_classes * num_classes)
    counts = counts.reshape(num_classes, num_classes).astype(np.float64)
    row_sums = counts.sum(axis=1)
    empty = np.flatnonzero(row_sums == 0)
    if empty.size:
        raise ValueError(f"class {int(empty[0])} absent from clean labels")
    rate = float(np.mean(clean != noisy))
    return TransitionMatrix(counts / row_sums[:, None]), rate


def apply_noise(spec: NoiseSpec, labels, num_classes: int) -> np.ndarray:
    """Dispatch a NoiseSpec over a clean label vector."""
    labels = np.asarray(labels)
    if spec.model == MODEL_SU:
        return inject_uniform(labels, num_classes, spec.rate, spec.seed,
                              exact=spec.exact)
    if spec.model == MODEL_SCC:
        return inject_class_conditional(labels, spec.transition, spec.seed)
    noisy = np.asarray(spec.noisy_labels)
    if noisy.shape[0] != labels.shape[0]:
        raise ValueError("external noisy labels do not match label count")
    if noisy.min() < 0 or noisy.max() >= num_classes:
        raise ValueError(f"external noisy labels outside [0, {num_classes})")
    return noisy.astype(labels.dtype)


def noisy_label_key(tag: str) -> str:
    return f"label.noisy.{tag}"


def attach_noisy_labels(bundle_dir, spec: NoiseSpec, tag: str,
                        num_classes: int | None = None) -> np.ndarray:
    """Inject noise on a bundle's clean labels and write the result back as
    a ``label.noisy.<tag>`` tensor with the spec recorded in the manifest."""
    from . import tensorio

    bundle = tensorio.read_bundle(bundle_dir, validate=False)
    labels = bundle.labels
    if num_classes is None:
        num_classes = int(bundle.logits.shape[1]) if tensorio.KEY_LOGITS in bundle.tensors \
            else int(labels.max()) + 1
    noisy = apply_noise(spec, labels, num_classes)
    tensorio.update_bundle_tensor(
        bundle_dir, noisy_label_key(tag), noisy, "int32",
        meta_update={f"noise.{tag}": spec.to_json()})
    return noisy
