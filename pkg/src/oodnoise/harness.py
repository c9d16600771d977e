"""Experiment-matrix orchestration: datasets x noise x seeds x checkpoints
x label sources x detectors x OOD sets, with resumable per-cell markers,
deterministic CSV reports and aggregate tables.
"""

from __future__ import annotations

import hashlib
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import detectors as det
from . import metrics, mlp, noise, synth, tensorio

log = logging.getLogger("oodnoise")

ROWS_CSV_COLUMNS = (
    "dataset", "noise_model", "noise_rate", "seed", "checkpoint",
    "label_source", "detector", "ood_set", "auroc_id", "auroc_correct",
    "auroc_incorrect", "n_correct", "n_incorrect", "n_ood", "id_accuracy",
)

CHECKPOINT_FIXED = "fixed"  # external feature bundles bypass training


def stable_seed(*parts) -> int:
    digest = hashlib.sha256("|".join(str(p) for p in parts).encode()).digest()
    return int.from_bytes(digest[:8], "little")


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

@dataclass
class DatasetConfig:
    name: str
    synthetic: dict | None = None     # MixtureSpec JSON
    paths: dict | None = None         # {"train","val","test","ood":{name:dir},"ood_val"?}

    def __post_init__(self):
        if (self.synthetic is None) == (self.paths is None):
            raise ValueError(f"dataset {self.name!r}: exactly one of synthetic/paths")


@dataclass
class NoiseConfig:
    tag: str
    model: str = noise.MODEL_SU
    rate: float = 0.0
    transition: list | None = None    # SCC row-stochastic matrix
    labels_key: str | None = None     # REAL: label tensor key in the train bundle

    @property
    def family(self) -> str:
        return "clean" if self.rate == 0.0 and self.labels_key is None else self.model


@dataclass
class ArchConfig:
    name: str
    hidden_dims: list


@dataclass
class TrainConfig:
    epochs: int = 200
    lr: float = 0.05
    batch: int = 64
    momentum: float = 0.9


@dataclass
class DetectorConfig:
    name: str
    overrides: dict = field(default_factory=dict)


@dataclass
class RunMatrixConfig:
    name: str
    datasets: list[DatasetConfig]
    noise: list[NoiseConfig]
    archs: list[ArchConfig]
    train: TrainConfig
    seeds: list[int]
    checkpoints: list[str]
    label_sources: list[str]
    detectors: list[DetectorConfig]
    aso_pairs: list = field(default_factory=list)
    workers: int = 1

    def __post_init__(self):
        for axis, values in (("datasets", self.datasets), ("noise", self.noise),
                             ("archs", self.archs), ("seeds", self.seeds),
                             ("checkpoints", self.checkpoints),
                             ("label_sources", self.label_sources),
                             ("detectors", self.detectors)):
            if not values:
                raise ValueError(f"config axis {axis!r} is empty")
        for d in self.detectors:
            if d.name not in det.DETECTORS:
                raise ValueError(f"unknown detector {d.name!r}")
        for c in self.checkpoints:
            if c not in ("early", "last", CHECKPOINT_FIXED):
                raise ValueError(f"unknown checkpoint {c!r}")
        for s in self.label_sources:
            if s not in (det.LABEL_SOURCE_TRAIN, det.LABEL_SOURCE_VAL):
                raise ValueError(f"unknown label_source {s!r}")

    @classmethod
    def from_dict(cls, obj: dict) -> "RunMatrixConfig":
        try:
            dets = []
            for entry in obj["detectors"]:
                if isinstance(entry, str):
                    dets.append(DetectorConfig(name=entry))
                else:
                    entry = dict(entry)
                    dets.append(DetectorConfig(name=entry.pop("name"),
                                               overrides=entry.pop("overrides", entry)))
            return cls(
                name=obj.get("name", "matrix"),
                datasets=[DatasetConfig(**d) for d in obj["datasets"]],
                noise=[NoiseConfig(**n) for n in obj["noise"]],
                archs=[ArchConfig(**a) for a in obj["archs"]],
                train=TrainConfig(**obj.get("train", {})),
                seeds=list(obj["seeds"]),
                checkpoints=list(obj["checkpoints"]),
                label_sources=list(obj["label_sources"]),
                detectors=dets,
                aso_pairs=[list(p) for p in obj.get("aso_pairs", [])],
                workers=int(obj.get("workers", 1)),
            )
        except (KeyError, TypeError) as exc:
            raise ValueError(f"invalid matrix config: {exc}") from exc

    def to_dict(self) -> dict:
        out = asdict(self)
        return out


def default_matrix_config(seeds=(0, 1, 2)) -> RunMatrixConfig:
    """The stock desk-scale benchmark: 16-d 8-class mixture, SU noise at
    {0, 0.1, 0.2, 0.4}, both checkpoints and label sources, all 20 methods."""
    spec = synth.default_mixture_spec()
    return RunMatrixConfig(
        name="default",
        datasets=[DatasetConfig(name=spec.name,
                                synthetic=synth.mixture_spec_to_json(spec))],
        noise=[NoiseConfig(tag="clean", model="su", rate=0.0),
               NoiseConfig(tag="su10", model="su", rate=0.1),
               NoiseConfig(tag="su20", model="su", rate=0.2),
               NoiseConfig(tag="su40", model="su", rate=0.4)],
        archs=[ArchConfig(name="mlp64x48", hidden_dims=[64, 48])],
        train=TrainConfig(epochs=200, lr=0.05, batch=64, momentum=0.9),
        seeds=list(seeds),
        checkpoints=["early", "last"],
        label_sources=["train", "val"],
        detectors=[DetectorConfig(name=n) for n in det.DEFAULT_DETECTORS],
        aso_pairs=[["mds@train", "mds@val"], ["she@train", "she@val"],
                   ["gram", "msp"], ["knn", "msp"]],
        workers=1,
    )


# ---------------------------------------------------------------------------
# report records
# ---------------------------------------------------------------------------

@dataclass
class RowRecord:
    dataset: str
    arch: str
    noise_tag: str
    noise_model: str
    noise_rate: float
    seed: int
    checkpoint: str
    label_source: str
    detector: str
    ood_set: str
    auroc_id: float
    auroc_correct: float | None
    auroc_incorrect: float | None
    n_correct: int
    n_incorrect: int
    n_ood: int
    id_accuracy: float

    @property
    def cell_key(self) -> tuple:
        return (self.dataset, self.arch, self.noise_tag, self.seed,
                self.checkpoint, self.label_source, self.detector)

    @property
    def group_key(self) -> tuple:
        """Cell key without the OOD axis; the unit of median aggregation."""
        return self.cell_key


@dataclass
class FailureRecord:
    dataset: str
    arch: str
    noise_tag: str
    seed: int
    checkpoint: str
    label_source: str
    detector: str
    stage: str
    message: str

    @property
    def cell_key(self) -> tuple:
        return (self.dataset, self.arch, self.noise_tag, self.seed,
                self.checkpoint, self.label_source, self.detector)


@dataclass
class EvalReport:
    config: RunMatrixConfig
    rows: list[RowRecord]
    failures: list[FailureRecord]
    score_hashes: dict = field(default_factory=dict)   # cell key -> sha256
    n_ood_sets: dict = field(default_factory=dict)     # dataset name -> count
    noise_rates: dict = field(default_factory=dict)    # (ds, arch, tag, seed) -> (configured, realized)

    def median_by_cell(self) -> dict:
        """cell key -> (median auroc_id over OOD sets, mean, id_accuracy)."""
        grouped: dict[tuple, list[RowRecord]] = {}
        for row in self.rows:
            grouped.setdefault(row.group_key, []).append(row)
        out = {}
        for key, rows in grouped.items():
            vals = [r.auroc_id for r in rows]
            out[key] = (metrics.aggregate_median(vals), metrics.aggregate_mean(vals),
                        rows[0].id_accuracy)
        return out


# ---------------------------------------------------------------------------
# matrix execution
# ---------------------------------------------------------------------------

def _dataset_dir(out_dir: Path, ds: DatasetConfig) -> Path:
    return out_dir / "data" / ds.name


def _prepare_dataset(out_dir: Path, ds: DatasetConfig) -> tensorio.SplitSet:
    if ds.paths is not None:
        ood = {name: tensorio.read_bundle(p) for name, p in ds.paths["ood"].items()}
        ood_val = tensorio.read_bundle(ds.paths["ood_val"]) if ds.paths.get("ood_val") else None
        split = tensorio.SplitSet(
            train=tensorio.read_bundle(ds.paths["train"]),
            val=tensorio.read_bundle(ds.paths["val"]),
            test=tensorio.read_bundle(ds.paths["test"]),
            ood_sets=ood, ood_val=ood_val)
        split.validate()
        return split
    root = _dataset_dir(out_dir, ds)
    if not (root / "train" / tensorio.MANIFEST_NAME).is_file():
        spec = synth.mixture_spec_from_json(ds.synthetic)
        split = synth.generate(spec)
        tensorio.write_split_set(split, root)
    return tensorio.read_split_set(root)


def _num_classes(split: tensorio.SplitSet) -> int:
    return int(split.train.labels.max()) + 1


def _noise_spec(ds: DatasetConfig, nz: NoiseConfig, seed: int) -> noise.NoiseSpec:
    return noise.NoiseSpec(
        model=nz.model, rate=nz.rate,
        transition=noise.TransitionMatrix(np.asarray(nz.transition))
        if nz.transition is not None else None,
        seed=stable_seed("noise", ds.name, nz.tag, seed))


def _noisy_labels(ds: DatasetConfig, nz: NoiseConfig, seed: int,
                  split: tensorio.SplitSet, num_classes: int) -> np.ndarray:
    labels = split.train.labels
    if nz.labels_key:
        return np.asarray(split.train.labels_for(nz.labels_key))
    return noise.apply_noise(_noise_spec(ds, nz, seed), labels, num_classes)


def _persist_noisy_labels(out_dir: Path, config: RunMatrixConfig) -> None:
    """Record every injected label set inside the generated train bundles
    (external dataset directories are left untouched)."""
    for ds in config.datasets:
        if ds.paths is not None:
            continue
        split = _prepare_dataset(out_dir, ds)
        num_classes = _num_classes(split)
        train_dir = _dataset_dir(out_dir, ds) / "train"
        bundle = tensorio.read_bundle(train_dir, validate=False)
        changed = False
        for nz in config.noise:
            if nz.labels_key or nz.rate == 0.0:
                continue
            for seed in config.seeds:
                key = noise.noisy_label_key(f"{nz.tag}.s{seed}")
                if key in bundle.tensors:
                    continue
                spec = _noise_spec(ds, nz, seed)
                bundle.tensors[key] = tensorio.as_tensor(
                    noise.apply_noise(spec, split.train.labels, num_classes),
                    "int32")
                bundle.meta[f"noise.{nz.tag}.s{seed}"] = spec.to_json()
                changed = True
        if changed:
            tensorio.write_bundle(bundle, train_dir, validate=False)


def _with_labels(bundle: tensorio.TensorBundle, labels: np.ndarray) -> tensorio.TensorBundle:
    tensors = dict(bundle.tensors)
    tensors[tensorio.KEY_LABELS] = np.asarray(labels, dtype=np.int32)
    return tensorio.TensorBundle(name=bundle.name, tensors=tensors, meta=dict(bundle.meta))


@dataclass
class _JobSpec:
    ds: DatasetConfig
    arch: ArchConfig
    nz: NoiseConfig
    seed: int

    @property
    def key(self) -> tuple:
        return (self.ds.name, self.arch.name, self.nz.tag, self.seed)

    def rel_dir(self) -> str:
        return f"{self.ds.name}/{self.arch.name}/{self.nz.tag}/s{self.seed}"


def _cell_file(out_dir: Path, job: _JobSpec, ckpt: str, ls: str, detector: str) -> Path:
    name = "__".join([job.ds.name, job.arch.name, job.nz.tag, f"s{job.seed}",
                      ckpt, ls, detector])
    return out_dir / "cells" / f"{name}.json"


def _hash_scores(id_scores: np.ndarray, ood_scores: dict) -> str:
    h = hashlib.sha256(np.ascontiguousarray(id_scores).tobytes())
    for name in sorted(ood_scores):
        h.update(np.ascontiguousarray(ood_scores[name]).tobytes())
    return h.hexdigest()


def _train_or_load(job: _JobSpec, config: RunMatrixConfig, out_dir: Path,
                   split: tensorio.SplitSet, num_classes: int,
                   resume: bool) -> dict[str, mlp.ClassifierModel]:
    """Train (or reload) the checkpoint pair for one model job."""
    if job.ds.paths is not None:
        return {CHECKPOINT_FIXED: None}
    model_root = out_dir / "models" / job.rel_dir()
    wanted = [c for c in config.checkpoints if c != CHECKPOINT_FIXED]
    if resume and all((model_root / c / tensorio.MANIFEST_NAME).is_file() for c in wanted):
        return {c: mlp.load_model(model_root / c) for c in wanted}
    noisy = _noisy_labels(job.ds, job.nz, job.seed, split, num_classes)
    train_bundle = _with_labels(split.train, noisy)
    spec = mlp.MlpSpec(
        input_dim=int(split.train.features.shape[1]),
        hidden_dims=tuple(job.arch.hidden_dims),
        num_classes=num_classes,
        seed=stable_seed("train", job.ds.name, job.arch.name, job.nz.tag, job.seed))
    pair = mlp.train(spec, train_bundle, split.val, epochs=config.train.epochs,
                     lr=config.train.lr, batch=config.train.batch,
                     momentum=config.train.momentum)
    mlp.save_model(pair.early, model_root / "early")
    mlp.save_model(pair.last, model_root / "last")
    # reload so scoring always sees the float32 on-disk weights
    return {c: mlp.load_model(model_root / c) for c in wanted}


def _traces_for(model, split: tensorio.SplitSet, noisy_labels: np.ndarray):
    """Float32 trace bundles for every split (or the bundles themselves for
    external feature datasets where model is None)."""
    if model is None:
        train = _with_labels(split.train, noisy_labels)
        return {"train": train, "val": split.val, "test": split.test,
                "ood_val": split.ood_val,
                "ood": dict(split.ood_sets)}
    train_bundle = _with_labels(split.train, noisy_labels)
    return {
        "train": mlp.export_bundle(model, train_bundle),
        "val": mlp.export_bundle(model, split.val),
        "test": mlp.export_bundle(model, split.test),
        "ood_val": mlp.export_bundle(model, split.ood_val) if split.ood_val else None,
        "ood": {name: mlp.export_bundle(model, b) for name, b in split.ood_sets.items()},
    }


def _run_job(job: _JobSpec, config: RunMatrixConfig, out_dir: Path,
             resume: bool) -> tuple[list[dict], list[dict]]:
    """Run every (checkpoint x label_source x detector) cell of one model
    job; returns (cell payloads, failure payloads)."""
    cells, failures = [], []
    base = dict(dataset=job.ds.name, arch=job.arch.name, noise_tag=job.nz.tag,
                seed=job.seed)

    def fail_all(stage, message):
        for ckpt in config.checkpoints:
            for ls in config.label_sources:
                for dc in config.detectors:
                    failures.append(dict(base, checkpoint=ckpt, label_source=ls,
                                         detector=dc.name, stage=stage,
                                         message=message))

    try:
        split = _prepare_dataset(out_dir, job.ds)
        num_classes = _num_classes(split)
        models = _train_or_load(job, config, out_dir, split, num_classes, resume)
    except Exception as exc:  # noqa: BLE001 - failures are first-class results
        fail_all("train", str(exc))
        return cells, failures

    noisy = _noisy_labels(job.ds, job.nz, job.seed, split, num_classes)
    # SU preserves the configured rate exactly; SCC only in expectation, so
    # the realized rate is recorded alongside every cell
    realized_rate = float((noisy != split.train.labels).mean())
    test_labels = split.test.labels

    for ckpt in config.checkpoints:
        if ckpt not in models:
            for ls in config.label_sources:
                for dc in config.detectors:
                    failures.append(dict(base, checkpoint=ckpt, label_source=ls,
                                         detector=dc.name, stage="train",
                                         message=f"checkpoint {ckpt!r} unavailable"))
            continue
        model = models[ckpt]
        traces = _traces_for(model, split, noisy)
        test_trace = traces["test"]
        pred = np.asarray(test_trace.logits).argmax(axis=1)
        id_accuracy = float((pred == test_labels).mean())
        correct_mask = pred == test_labels
        for ls in config.label_sources:
            for dc in config.detectors:
                cell_path = _cell_file(out_dir, job, ckpt, ls, dc.name)
                if resume and cell_path.is_file():
                    cells.append(json.loads(cell_path.read_text()))
                    continue
                meta = dict(base, checkpoint=ckpt, label_source=ls, detector=dc.name)
                try:
                    ctx = det.FitContext(
                        id_train=traces["train"], id_val=traces["val"],
                        ood_val=traces["ood_val"], model=model, label_source=ls)
                    state = det.fit_detector(dc.name, ctx, dc.overrides)
                    id_scores = det.score_bundle(state, test_trace, model)
                    ood_scores = {name: det.score_bundle(state, b, model)
                                  for name, b in traces["ood"].items()}
                    rows = []
                    for name in sorted(ood_scores):
                        triple = metrics.auroc_triple(id_scores, correct_mask,
                                                      ood_scores[name])
                        rows.append({"ood_set": name, **triple.to_json()})
                    payload = dict(meta, noise_model=job.nz.model,
                                   noise_rate=job.nz.rate,
                                   realized_noise_rate=realized_rate,
                                   id_accuracy=id_accuracy, rows=rows,
                                   score_hash=_hash_scores(id_scores, ood_scores),
                                   hyper=state.hyper_summary())
                    cell_path.parent.mkdir(parents=True, exist_ok=True)
                    cell_path.write_text(json.dumps(payload, indent=1, sort_keys=True))
                    cells.append(payload)
                except Exception as exc:  # noqa: BLE001
                    failures.append(dict(meta, stage="fit_or_score", message=str(exc)))
    return cells, failures


def _job_worker(args):
    return _run_job(*args)


def run_matrix(config: RunMatrixConfig, out_dir, workers: int | None = None,
               resume: bool = True) -> EvalReport:
    """Execute the full matrix; per-cell failures never abort the run."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    jobs = [_JobSpec(ds=ds, arch=arch, nz=nz, seed=seed)
            for ds in config.datasets for arch in config.archs
            for nz in config.noise for seed in config.seeds]
    cells_per_job = (len(config.checkpoints) * len(config.label_sources)
                     * len(config.detectors))
    log.info("matrix %s: %d model jobs, %d detector cells",
             config.name, len(jobs), len(jobs) * cells_per_job)

    # generate synthetic datasets and persist noisy label sets up front so
    # parallel jobs only read
    for ds in config.datasets:
        _prepare_dataset(out_dir, ds)
    _persist_noisy_labels(out_dir, config)

    workers = workers or config.workers or 1
    results = []
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_job_worker,
                                    [(j, config, out_dir, resume) for j in jobs]))
    else:
        results = [_run_job(j, config, out_dir, resume) for j in jobs]

    rows: list[RowRecord] = []
    failures: list[FailureRecord] = []
    score_hashes = {}
    noise_rates = {}
    for cells, fails in results:
        for payload in cells:
            noise_rates[(payload["dataset"], payload["arch"],
                         payload["noise_tag"], payload["seed"])] = (
                payload["noise_rate"],
                payload.get("realized_noise_rate", payload["noise_rate"]))
            for row in payload["rows"]:
                rows.append(RowRecord(
                    dataset=payload["dataset"], arch=payload["arch"],
                    noise_tag=payload["noise_tag"],
                    noise_model=payload["noise_model"],
                    noise_rate=payload["noise_rate"], seed=payload["seed"],
                    checkpoint=payload["checkpoint"],
                    label_source=payload["label_source"],
                    detector=payload["detector"], ood_set=row["ood_set"],
                    auroc_id=row["id_vs_ood"],
                    auroc_correct=row["correct_vs_ood"],
                    auroc_incorrect=row["incorrect_vs_ood"],
                    n_correct=row["n_correct"], n_incorrect=row["n_incorrect"],
                    n_ood=row["n_ood"], id_accuracy=payload["id_accuracy"]))
            key = (payload["dataset"], payload["arch"], payload["noise_tag"],
                   payload["seed"], payload["checkpoint"],
                   payload["label_source"], payload["detector"])
            score_hashes[key] = payload["score_hash"]
        for f in fails:
            failures.append(FailureRecord(
                dataset=f["dataset"], arch=f["arch"], noise_tag=f["noise_tag"],
                seed=f["seed"], checkpoint=f["checkpoint"],
                label_source=f["label_source"], detector=f["detector"],
                stage=f["stage"], message=f["message"]))

    rows.sort(key=lambda r: (r.dataset, r.arch, r.noise_tag, r.seed, r.checkpoint,
                             r.label_source, r.detector, r.ood_set))
    failures.sort(key=lambda f: (f.dataset, f.arch, f.noise_tag, f.seed,
                                 f.checkpoint, f.label_source, f.detector))
    n_ood = {}
    for ds in config.datasets:
        split = _prepare_dataset(out_dir, ds)
        n_ood[ds.name] = len(split.ood_sets)
    return EvalReport(config=config, rows=rows, failures=failures,
                      score_hashes=score_hashes, n_ood_sets=n_ood,
                      noise_rates=noise_rates)


def completeness(report: EvalReport) -> dict:
    """Every configured cell must have its rows or an explicit failure."""
    config = report.config
    expected = 0
    missing = []
    row_cells = {}
    for row in report.rows:
        row_cells.setdefault(row.cell_key, 0)
        row_cells[row.cell_key] += 1
    failure_cells = {f.cell_key for f in report.failures}
    for ds in config.datasets:
        for arch in config.archs:
            for nz in config.noise:
                for seed in config.seeds:
                    for ckpt in config.checkpoints:
                        for ls in config.label_sources:
                            for dc in config.detectors:
                                expected += 1
                                key = (ds.name, arch.name, nz.tag, seed, ckpt,
                                       ls, dc.name)
                                have_rows = row_cells.get(key, 0) == report.n_ood_sets[ds.name]
                                if not have_rows and key not in failure_cells:
                                    missing.append(key)
    return {"expected_cells": expected,
            "row_cells": len(row_cells),
            "failure_cells": len(failure_cells),
            "missing": [list(map(str, k)) for k in missing],
            "ok": not missing}


def label_source_crosscheck(report: EvalReport) -> dict:
    """Verify only class-statistic detectors change under the label_source
    switch (bit-level via score hashes)."""
    if len(report.config.label_sources) < 2:
        return {"checked": False, "violations": []}
    grouped: dict[tuple, dict] = {}
    for key, digest in report.score_hashes.items():
        ds, arch, nz, seed, ckpt, ls, detector = key
        grouped.setdefault((ds, arch, nz, seed, ckpt, detector), {})[ls] = digest
    violations = []
    for key, by_ls in grouped.items():
        detector = key[-1]
        if detector in det.CLASS_STAT_DETECTORS or len(by_ls) < 2:
            continue
        if len(set(by_ls.values())) != 1:
            violations.append(list(map(str, key)))
    return {"checked": True, "violations": violations}


def load_report(run_dir) -> EvalReport:
    """Rebuild an EvalReport from a completed run directory (config echo,
    per-cell markers and the failure log)."""
    run_dir = Path(run_dir)
    config = RunMatrixConfig.from_dict(
        json.loads((run_dir / "config_echo.json").read_text()))
    rows: list[RowRecord] = []
    score_hashes = {}
    noise_rates = {}
    cells_dir = run_dir / "cells"
    payloads = []
    if cells_dir.is_dir():
        payloads = [json.loads(p.read_text()) for p in sorted(cells_dir.glob("*.json"))]
    for payload in payloads:
        noise_rates[(payload["dataset"], payload["arch"], payload["noise_tag"],
                     payload["seed"])] = (
            payload["noise_rate"],
            payload.get("realized_noise_rate", payload["noise_rate"]))
        for row in payload["rows"]:
            rows.append(RowRecord(
                dataset=payload["dataset"], arch=payload["arch"],
                noise_tag=payload["noise_tag"], noise_model=payload["noise_model"],
                noise_rate=payload["noise_rate"], seed=payload["seed"],
                checkpoint=payload["checkpoint"],
                label_source=payload["label_source"],
                detector=payload["detector"], ood_set=row["ood_set"],
                auroc_id=row["id_vs_ood"], auroc_correct=row["correct_vs_ood"],
                auroc_incorrect=row["incorrect_vs_ood"],
                n_correct=row["n_correct"], n_incorrect=row["n_incorrect"],
                n_ood=row["n_ood"], id_accuracy=payload["id_accuracy"]))
        key = (payload["dataset"], payload["arch"], payload["noise_tag"],
               payload["seed"], payload["checkpoint"], payload["label_source"],
               payload["detector"])
        score_hashes[key] = payload["score_hash"]
    failures = []
    fail_path = run_dir / "failures.json"
    if fail_path.is_file():
        failures = [FailureRecord(**f) for f in json.loads(fail_path.read_text())]
    rows.sort(key=lambda r: (r.dataset, r.arch, r.noise_tag, r.seed, r.checkpoint,
                             r.label_source, r.detector, r.ood_set))
    ood_names: dict[str, set] = {}
    for row in rows:
        ood_names.setdefault(row.dataset, set()).add(row.ood_set)
    n_ood = {ds: len(names) for ds, names in ood_names.items()}
    return EvalReport(config=config, rows=rows, failures=failures,
                      score_hashes=score_hashes, n_ood_sets=n_ood,
                      noise_rates=noise_rates)


# ---------------------------------------------------------------------------
# aggregate tables
# ---------------------------------------------------------------------------

def best_case_table(report: EvalReport) -> list[dict]:
    """Per (dataset, noise tag, detector): max median-over-OOD AUROC over
    every (arch, seed, checkpoint, label_source) combination."""
    best = {}
    for key, (median, _, _) in report.median_by_cell().items():
        ds, arch, nz, seed, ckpt, ls, detector = key
        bucket = (ds, nz, detector)
        combo = {"arch": arch, "seed": seed, "checkpoint": ckpt, "label_source": ls}
        if bucket not in best or median > best[bucket][0]:
            best[bucket] = (median, combo)
    table = []
    for (ds, nz, detector), (median, combo) in sorted(best.items()):
        table.append({"dataset": ds, "noise_tag": nz, "detector": detector,
                      "best_median_auroc": median, **combo})
    return table


def correlation_table(report: EvalReport, min_points: int = 3) -> list[dict]:
    """Per (detector, noise family): Spearman correlation between ID
    accuracy and median AUROC across models."""
    families = {nz.tag: nz.family for nz in report.config.noise}
    points: dict[tuple, list] = {}
    for key, (median, _, accuracy) in report.median_by_cell().items():
        ds, arch, nz, seed, ckpt, ls, detector = key
        points.setdefault((detector, families[nz]), []).append((accuracy, median))
    table = []
    for (detector, family), pts in sorted(points.items()):
        if len(pts) < min_points:
            table.append({"detector": detector, "noise_family": family,
                          "spearman": None, "n_points": len(pts),
                          "note": f"fewer than {min_points} points"})
            continue
        xs, ys = zip(*pts)
        table.append({"detector": detector, "noise_family": family,
                      "spearman": metrics.spearman(xs, ys), "n_points": len(pts),
                      "note": ""})
    return table


def _parse_aso_token(token: str):
    if "@" in token:
        name, ls = token.split("@", 1)
        return name, ls
    return token, None


def aso_table(report: EvalReport, seed: int = 0) -> list[dict]:
    """Pairwise ASO comparisons requested in the config; sides are matched
    on identical (dataset, arch, noise, seed, checkpoint) cells."""
    medians = report.median_by_cell()

    def series(token):
        name, ls = _parse_aso_token(token)
        out = {}
        for key, (median, _, _) in medians.items():
            ds, arch, nz, sd, ckpt, key_ls, detector = key
            if detector != name or (ls is not None and key_ls != ls):
                continue
            group = (ds, arch, nz, sd, ckpt) if ls is not None \
                else (ds, arch, nz, sd, ckpt, key_ls)
            out[group] = median
        return out

    table = []
    for pair in report.config.aso_pairs:
        a_token, b_token = pair
        sa, sb = series(a_token), series(b_token)
        common = sorted(set(sa) & set(sb))
        entry = {"a": a_token, "b": b_token, "n": len(common)}
        if len(common) < 5:
            entry.update({"eps_min": None, "note": "fewer than 5 paired cells"})
        else:
            result = metrics.aso([sa[k] for k in common], [sb[k] for k in common],
                                 seed=stable_seed("aso", a_token, b_token, seed))
            entry.update({"eps_min": result.eps_min, "note": ""})
        table.append(entry)
    return table


# ---------------------------------------------------------------------------
# emission
# ---------------------------------------------------------------------------

def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return format(value, ".12g")
    return str(value)


def rows_csv_text(report: EvalReport) -> str:
    lines = [",".join(ROWS_CSV_COLUMNS)]
    for r in report.rows:
        lines.append(",".join([
            f"{r.dataset}:{r.arch}", r.noise_model, _fmt(r.noise_rate),
            str(r.seed), r.checkpoint, r.label_source, r.detector, r.ood_set,
            _fmt(r.auroc_id), _fmt(r.auroc_correct), _fmt(r.auroc_incorrect),
            str(r.n_correct), str(r.n_incorrect), str(r.n_ood),
            _fmt(r.id_accuracy),
        ]))
    return "\n".join(lines) + "\n"


def _write_csv(path: Path, header: list[str], rows: list[list]) -> None:
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(_fmt(v) for v in row))
    path.write_text("\n".join(lines) + "\n")


def _write_markdown(path: Path, header: list[str], rows: list[list]) -> None:
    lines = ["| " + " | ".join(header) + " |",
             "|" + "|".join(["---"] * len(header)) + "|"]
    for row in rows:
        lines.append("| " + " | ".join(_fmt(v) for v in row) + " |")
    path.write_text("\n".join(lines) + "\n")


def emit_reports(report: EvalReport, out_dir, figures: bool = True) -> dict:
    """Write rows.csv, aggregate tables (CSV + markdown), the config echo
    and versioned metadata; optionally render the report figures."""
    from . import __version__

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "rows.csv").write_text(rows_csv_text(report))

    med_header = ["dataset", "arch", "noise_tag", "seed", "checkpoint",
                  "label_source", "detector", "median_auroc", "mean_auroc",
                  "id_accuracy"]
    med_rows = [[*key, *vals] for key, vals in sorted(report.median_by_cell().items())]
    _write_csv(out_dir / "medians.csv", med_header, med_rows)
    _write_markdown(out_dir / "medians.md", med_header, med_rows)

    if report.noise_rates:
        noise_header = ["dataset", "arch", "noise_tag", "seed",
                        "configured_rate", "realized_rate"]
        noise_rows = [[*key, *vals]
                      for key, vals in sorted(report.noise_rates.items())]
        _write_csv(out_dir / "noise_report.csv", noise_header, noise_rows)

    best = best_case_table(report)
    best_header = ["dataset", "noise_tag", "detector", "best_median_auroc",
                   "arch", "seed", "checkpoint", "label_source"]
    best_rows = [[b[h] for h in best_header] for b in best]
    _write_csv(out_dir / "best_case.csv", best_header, best_rows)
    _write_markdown(out_dir / "best_case.md", best_header, best_rows)

    corr = correlation_table(report)
    corr_header = ["detector", "noise_family", "spearman", "n_points", "note"]
    corr_rows = [[c[h] for h in corr_header] for c in corr]
    _write_csv(out_dir / "correlations.csv", corr_header, corr_rows)
    _write_markdown(out_dir / "correlations.md", corr_header, corr_rows)

    aso_rows = []
    if report.config.aso_pairs:
        aso = aso_table(report)
        aso_header = ["a", "b", "eps_min", "n", "note"]
        aso_rows = [[a[h] for h in aso_header] for a in aso]
        _write_csv(out_dir / "aso.csv", aso_header, aso_rows)

    fail_header = ["dataset", "arch", "noise_tag", "seed", "checkpoint",
                   "label_source", "detector", "stage", "message"]
    fail_rows = [[f.dataset, f.arch, f.noise_tag, f.seed, f.checkpoint,
                  f.label_source, f.detector, f.stage,
                  f.message.replace(",", ";").replace("\n", " ")]
                 for f in report.failures]
    _write_csv(out_dir / "failures.csv", fail_header, fail_rows)
    (out_dir / "failures.json").write_text(
        json.dumps([asdict(f) for f in report.failures], indent=1, sort_keys=True) + "\n")

    config_dict = report.config.to_dict()
    (out_dir / "config_echo.json").write_text(
        json.dumps(config_dict, indent=2, sort_keys=True) + "\n")

    check = completeness(report)
    ls_check = label_source_crosscheck(report)
    meta = {
        "version": __version__,
        "config_sha256": hashlib.sha256(
            json.dumps(config_dict, sort_keys=True).encode()).hexdigest(),
        "n_rows": len(report.rows),
        "n_failures": len(report.failures),
        "completeness": check,
        "label_source_check": ls_check,
    }
    (out_dir / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    if ls_check["violations"]:
        log.warning("label_source cross-check failed for %d cells",
                    len(ls_check["violations"]))

    if figures and report.rows:
        from . import figures as figmod
        figmod.render_all(report, out_dir / "figures")
    return meta
