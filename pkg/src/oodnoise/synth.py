"""Gaussian-mixture dataset families for desk-scale ID/OOD experiments.

The default geometry places 8 ID classes and 3 held-out OOD components on
mutually equidistant corners of a scaled 16-d hypercube (rows of a
Hadamard matrix), so Bayes behavior is analytically known: the optimal
classifier is nearest-mean.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensorio import SplitSet, TensorBundle


@dataclass
class OodComponent:
    """One named OOD source: explicit Gaussian components, a mean shift of
    the ID components, or the ``uniform`` box distribution tag."""

    name: str
    components: np.ndarray | None = None  # k x d means
    shift: np.ndarray | None = None       # applied to all ID means
    tag: str | None = None                # "uniform"

    def resolve(self, id_means: np.ndarray) -> np.ndarray | str:
        if self.components is not None:
            return np.asarray(self.components, dtype=np.float64)
        if self.shift is not None:
            return id_means + np.asarray(self.shift, dtype=np.float64)
        if self.tag == "uniform":
            return "uniform"
        raise ValueError(f"OOD spec {self.name!r} has no components/shift/tag")


@dataclass
class MixtureSpec:
    dims: int
    classes: int
    means: np.ndarray                    # C x d
    sigma: float
    n_train: int = 2000
    n_val: int = 500
    n_test: int = 1000
    n_ood: int = 500                     # per OOD set
    n_ood_val: int = 500                 # 0 disables the tuning split
    ood_specs: list[OodComponent] = field(default_factory=list)
    seed: int = 0
    name: str = "mixture"

    def __post_init__(self):
        self.means = np.asarray(self.means, dtype=np.float64)
        if self.classes < 2:
            raise ValueError("need at least 2 classes")
        if self.means.shape != (self.classes, self.dims):
            raise ValueError("means must be classes x dims")
        diffs = self.means[:, None, :] - self.means[None, :, :]
        dist = np.sqrt((diffs ** 2).sum(-1))
        if (dist + np.eye(self.classes)).min() <= 0:
            raise ValueError("class means must be pairwise distinct")


def _hadamard(order: int) -> np.ndarray:
    h = np.ones((1, 1))
    while h.shape[0] < order:
        h = np.block([[h, h], [h, -h]])
    return h


def default_mixture_spec(seed: int = 0) -> MixtureSpec:
    """d=16, C=8 corners plus 3 held-out corners as individual OOD sets.

    Calibrated once: corner scale 0.85 at sigma 1 puts the nearest-mean
    (Bayes) accuracy near 0.95, and the small validation split keeps the
    samples-per-feature-dimension ratio of class-statistic fitting in the
    regime of full-scale benchmarks (a few hundred samples against a
    feature width of tens).
    """
    h = _hadamard(16) * 0.85
    id_means = h[:8]
    ood = [OodComponent(name=f"ood{i}", components=h[8 + i:9 + i]) for i in range(3)]
    return MixtureSpec(dims=16, classes=8, means=id_means, sigma=1.0,
                       n_val=100, ood_specs=ood, seed=seed, name="hadamard16x8")


def _sample_mixture(means, sigma, n, gen) -> tuple[np.ndarray, np.ndarray]:
    labels = gen.integers(0, means.shape[0], size=n)
    feats = means[labels] + sigma * gen.standard_normal((n, means.shape[1]))
    return feats.astype(np.float32), labels.astype(np.int32)


def generate(spec: MixtureSpec) -> SplitSet:
    """Deterministic i.i.d. draws for every split, labels = component index."""
    streams = {}
    tags = ["train", "val", "test", "ood_val"] + [o.name for o in spec.ood_specs]
    for i, tag in enumerate(tags):
        ss = np.random.SeedSequence(entropy=spec.seed, spawn_key=(i,))
        streams[tag] = np.random.Generator(np.random.Philox(ss))

    def id_bundle(tag, n):
        feats, labels = _sample_mixture(spec.means, spec.sigma, n, streams[tag])
        return TensorBundle(name=f"{spec.name}-{tag}",
                            tensors={"feat": feats, "label": labels})

    def ood_feats(resolved, n, gen):
        if isinstance(resolved, str):  # uniform box over +-2 max |mean|
            half = 2.0 * float(np.abs(spec.means).max())
            return gen.uniform(-half, half, size=(n, spec.dims)).astype(np.float32)
        feats, _ = _sample_mixture(resolved, spec.sigma, n, gen)
        return feats

    ood_sets = {}
    all_components = []
    for comp in spec.ood_specs:
        resolved = comp.resolve(spec.means)
        feats = ood_feats(resolved, spec.n_ood, streams[comp.name])
        ood_sets[comp.name] = TensorBundle(name=f"{spec.name}-ood-{comp.name}",
                                           tensors={"feat": feats})
        if not isinstance(resolved, str):
            all_components.append(resolved)

    ood_val = None
    if spec.n_ood_val > 0 and spec.ood_specs:
        gen = streams["ood_val"]
        if all_components:  # draw the tuning split from the union of components
            union = np.concatenate(all_components, axis=0)
            feats = ood_feats(union, spec.n_ood_val, gen)
        else:
            feats = ood_feats("uniform", spec.n_ood_val, gen)
        ood_val = TensorBundle(name=f"{spec.name}-ood-val", tensors={"feat": feats})

    return SplitSet(
        train=id_bundle("train", spec.n_train),
        val=id_bundle("val", spec.n_val),
        test=id_bundle("test", spec.n_test),
        ood_sets=ood_sets,
        ood_val=ood_val,
    )


def bayes_accuracy(spec: MixtureSpec, n: int = 100_000, seed: int = 123):
    """Monte Carlo accuracy of the Bayes rule (nearest mean for equal-prior
    isotropic components); returns (accuracy, standard_error)."""
    gen = np.random.Generator(np.random.Philox(key=np.uint64(seed)))
    feats, labels = _sample_mixture(spec.means, spec.sigma, n, gen)
    feats = feats.astype(np.float64)
    d2 = ((feats[:, None, :] - spec.means[None, :, :]) ** 2).sum(-1)
    acc = float((d2.argmin(axis=1) == labels).mean())
    return acc, float(np.sqrt(acc * (1 - acc) / n))


def mixture_spec_from_json(obj: dict) -> MixtureSpec:
    ood = []
    for o in obj.get("ood_specs", []):
        ood.append(OodComponent(
            name=o["name"],
            components=np.asarray(o["components"], dtype=np.float64) if "components" in o else None,
            shift=np.asarray(o["shift"], dtype=np.float64) if "shift" in o else None,
            tag=o.get("tag")))
    return MixtureSpec(
        dims=obj["dims"], classes=obj["classes"],
        means=np.asarray(obj["means"], dtype=np.float64), sigma=obj["sigma"],
        n_train=obj.get("n_train", 2000), n_val=obj.get("n_val", 500),
        n_test=obj.get("n_test", 1000), n_ood=obj.get("n_ood", 500),
        n_ood_val=obj.get("n_ood_val", 500), ood_specs=ood,
        seed=obj.get("seed", 0), name=obj.get("name", "mixture"))


def mixture_spec_to_json(spec: MixtureSpec) -> dict:
    ood = []
    for o in spec.ood_specs:
        entry = {"name": o.name}
        if o.components is not None:
            entry["components"] = np.asarray(o.components).tolist()
        if o.shift is not None:
            entry["shift"] = np.asarray(o.shift).tolist()
        if o.tag is not None:
            entry["tag"] = o.tag
        ood.append(entry)
    return {"dims": spec.dims, "classes": spec.classes, "means": spec.means.tolist(),
            "sigma": spec.sigma, "n_train": spec.n_train, "n_val": spec.n_val,
            "n_test": spec.n_test, "n_ood": spec.n_ood, "n_ood_val": spec.n_ood_val,
            "ood_specs": ood, "seed": spec.seed, "name": spec.name}
