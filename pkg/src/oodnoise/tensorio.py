"""Self-describing on-disk tensor bundles.

A bundle is a directory containing ``manifest.json`` plus one raw binary
file per tensor. Payloads are little-endian, row-major, unpadded, and
checksummed with CRC32, so any language can produce or consume them with a
JSON writer and a CRC routine. Tensors are plain numpy arrays restricted to
float32 / int32.
"""

from __future__ import annotations

import json
import re
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MANIFEST_NAME = "manifest.json"

_DTYPES = {"float32": np.dtype("<f4"), "int32": np.dtype("<i4")}
_KEY_RE = re.compile(r"^[A-Za-z0-9._-]+$")

# bundle keys with a fixed meaning for dataset bundles
KEY_FEATURES = "feat"
KEY_LOGITS = "logit"
KEY_LABELS = "label"
KEY_INPUT = "input"
ACT_PREFIX = "act."


class BundleError(ValueError):
    """A bundle violates the on-disk or in-memory contract."""


def _dtype_name(arr: np.ndarray) -> str:
    for name, dt in _DTYPES.items():
        if arr.dtype == dt or arr.dtype == dt.newbyteorder(">") or arr.dtype.name == name:
            return name
    raise BundleError(f"unsupported dtype {arr.dtype}; bundles hold float32/int32 only")


def as_tensor(values, dtype: str) -> np.ndarray:
    """Coerce values to a contiguous little-endian array of the given dtype."""
    if dtype not in _DTYPES:
        raise BundleError(f"unsupported dtype {dtype!r}")
    return np.ascontiguousarray(values, dtype=_DTYPES[dtype])


@dataclass
class TensorBundle:
    """Named collection of tensors sharing a leading sample dimension.

    Dataset bundles use the conventional keys ``feat`` (N x d float32),
    ``logit`` (N x C float32), ``label`` (N int32) and ``act.<i>`` for
    per-layer activations; ``label`` is optional (OOD data). ``meta`` is an
    optional JSON-serializable extension block carried in the manifest.
    """

    name: str
    tensors: dict[str, np.ndarray] = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        coerced = {}
        for key, arr in self.tensors.items():
            if not _KEY_RE.match(key):
                raise BundleError(f"invalid tensor key {key!r}")
            arr = np.asarray(arr)
            coerced[key] = as_tensor(arr, _dtype_name(arr))
        self.tensors = coerced

    # -- conventional accessors -------------------------------------------
    @property
    def features(self) -> np.ndarray:
        return self._require(KEY_FEATURES)

    @property
    def logits(self) -> np.ndarray:
        return self._require(KEY_LOGITS)

    @property
    def labels(self) -> np.ndarray:
        return self._require(KEY_LABELS)

    @property
    def has_labels(self) -> bool:
        return KEY_LABELS in self.tensors

    @property
    def num_samples(self) -> int:
        for arr in self.tensors.values():
            return int(arr.shape[0])
        return 0

    @property
    def num_classes(self) -> int:
        return int(self.logits.shape[1])

    def activation_keys(self) -> list[str]:
        """act.* keys sorted by layer index."""
        keys = [k for k in self.tensors if k.startswith(ACT_PREFIX)]
        return sorted(keys, key=lambda k: int(k[len(ACT_PREFIX):]))

    def labels_for(self, key: str = KEY_LABELS) -> np.ndarray:
        """Label tensor under an arbitrary key (e.g. ``label.noisy.<tag>``)."""
        return self._require(key)

    def _require(self, key: str) -> np.ndarray:
        if key not in self.tensors:
            raise BundleError(f"bundle {self.name!r} has no tensor {key!r}")
        return self.tensors[key]

    def validate(self) -> None:
        """Check dataset-bundle invariants; raises BundleError naming the offender."""
        n = None
        n_key = None
        for key, arr in self.tensors.items():
            if arr.ndim == 0:
                raise BundleError(f"tensor {key!r} is 0-dimensional")
            if n is None:
                n, n_key = int(arr.shape[0]), key
            elif int(arr.shape[0]) != n:
                raise BundleError(
                    f"tensor {key!r} has leading dim {arr.shape[0]}, "
                    f"expected {n} (from {n_key!r})")
        for key, arr in self.tensors.items():
            if arr.dtype.kind == "f" and not np.isfinite(arr).all():
                raise BundleError(f"tensor {key!r} contains NaN/Inf")
        if KEY_LOGITS in self.tensors:
            c = self.num_classes
            for key, arr in self.tensors.items():
                if key == KEY_LABELS or key.startswith("label."):
                    if arr.min(initial=0) < 0 or arr.max(initial=0) >= c:
                        raise BundleError(
                            f"tensor {key!r} has labels outside [0, {c})")


def write_bundle(bundle: TensorBundle, directory_path, validate: bool = True) -> None:
    """Write manifest.json plus one raw .bin file per tensor.

    Payloads are the little-endian row-major bytes of each tensor, CRC32
    checksummed in the manifest. Deterministic: tensors are listed sorted
    by key and the manifest is written with sorted keys.
    """
    if validate:
        bundle.validate()
    directory = Path(directory_path)
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    for key in sorted(bundle.tensors):
        arr = bundle.tensors[key]
        payload = arr.tobytes(order="C")
        fname = f"{key}.bin"
        (directory / fname).write_bytes(payload)
        entries.append({
            "key": key,
            "dtype": _dtype_name(arr),
            "shape": [int(s) for s in arr.shape],
            "file": fname,
            "crc32": zlib.crc32(payload) & 0xFFFFFFFF,
        })
    manifest = {"name": bundle.name, "tensors": entries}
    if bundle.meta:
        manifest["meta"] = bundle.meta
    text = json.dumps(manifest, indent=2, sort_keys=True) + "\n"
    (directory / MANIFEST_NAME).write_text(text)


def read_bundle(directory_path, validate: bool = True) -> TensorBundle:
    """Read a bundle directory back into memory, verifying CRCs and shapes.

    With ``validate=True`` (the default for dataset bundles) the shared-N
    invariant, NaN/Inf rejection and label-range checks are enforced.
    """
    directory = Path(directory_path)
    manifest_path = directory / MANIFEST_NAME
    if not manifest_path.is_file():
        raise BundleError(f"no {MANIFEST_NAME} in {directory}")
    try:
        manifest = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as exc:
        raise BundleError(f"unparseable manifest in {directory}: {exc}") from exc
    if not isinstance(manifest, dict) or "name" not in manifest or "tensors" not in manifest:
        raise BundleError(f"manifest in {directory} lacks name/tensors")
    tensors = {}
    for entry in manifest["tensors"]:
        key = entry["key"]
        dtype = entry["dtype"]
        if dtype not in _DTYPES:
            raise BundleError(f"tensor {key!r}: unsupported dtype {dtype!r}")
        shape = tuple(int(s) for s in entry["shape"])
        path = directory / entry["file"]
        if not path.is_file():
            raise BundleError(f"tensor {key!r}: missing file {entry['file']}")
        payload = path.read_bytes()
        if (zlib.crc32(payload) & 0xFFFFFFFF) != int(entry["crc32"]):
            raise BundleError(f"tensor {key!r}: CRC32 mismatch in {entry['file']}")
        expected = int(np.prod(shape, dtype=np.int64)) * _DTYPES[dtype].itemsize
        if len(payload) != expected:
            raise BundleError(
                f"tensor {key!r}: payload is {len(payload)} bytes, "
                f"shape {list(shape)} needs {expected}")
        tensors[key] = np.frombuffer(payload, dtype=_DTYPES[dtype]).reshape(shape).copy()
    bundle = TensorBundle(name=manifest["name"], tensors=tensors,
                          meta=manifest.get("meta", {}))
    if validate:
        bundle.validate()
    return bundle


def update_bundle_tensor(directory_path, key: str, values, dtype: str,
                         meta_update: dict | None = None) -> None:
    """Add or replace one tensor in an existing on-disk bundle."""
    bundle = read_bundle(directory_path, validate=False)
    bundle.tensors[key] = as_tensor(values, dtype)
    if meta_update:
        bundle.meta.update(meta_update)
    write_bundle(bundle, directory_path, validate=False)


@dataclass
class SplitSet:
    """Train/val/test bundles plus named OOD bundles for one dataset."""

    train: TensorBundle
    val: TensorBundle
    test: TensorBundle
    ood_sets: dict[str, TensorBundle] = field(default_factory=dict)
    ood_val: TensorBundle | None = None

    def validate(self) -> None:
        for b in (self.train, self.val, self.test):
            b.validate()
        d = self.train.features.shape[1]
        for b in (self.val, self.test):
            if b.features.shape[1] != d:
                raise BundleError(f"bundle {b.name!r}: feature width != {d}")
        ood = dict(self.ood_sets)
        if self.ood_val is not None:
            ood["__ood_val__"] = self.ood_val
        for name, b in ood.items():
            b.validate()
            if b.features.shape[1] != d:
                raise BundleError(f"OOD bundle {name!r}: feature width != {d}")


OOD_DIR_PREFIX = "ood_"


def write_split_set(split: SplitSet, directory_path) -> None:
    root = Path(directory_path)
    write_bundle(split.train, root / "train")
    write_bundle(split.val, root / "val")
    write_bundle(split.test, root / "test")
    if split.ood_val is not None:
        write_bundle(split.ood_val, root / "ood_val")
    for name, bundle in split.ood_sets.items():
        write_bundle(bundle, root / f"{OOD_DIR_PREFIX}{name}")


def read_split_set(directory_path) -> SplitSet:
    root = Path(directory_path)
    ood_sets = {}
    for child in sorted(root.iterdir()):
        if child.is_dir() and child.name.startswith(OOD_DIR_PREFIX) and child.name != "ood_val":
            ood_sets[child.name[len(OOD_DIR_PREFIX):]] = read_bundle(child)
    ood_val = None
    if (root / "ood_val").is_dir():
        ood_val = read_bundle(root / "ood_val")
    return SplitSet(
        train=read_bundle(root / "train"),
        val=read_bundle(root / "val"),
        test=read_bundle(root / "test"),
        ood_sets=ood_sets,
        ood_val=ood_val,
    )
