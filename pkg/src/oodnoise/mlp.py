"""Small deterministic MLP classifiers with full introspection.

The engine trains ReLU MLPs on feature vectors with plain minibatch SGD
(momentum 0.9, constant lr, cross-entropy) and exposes everything the
post-hoc detectors need: per-layer activations, last-layer weights and
exact input gradients. Training is bit-reproducible given the spec seed
(Philox generator drives both initialization and shuffling).
"""

from __future__ import annotations

import copy
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import tensorio


@dataclass
class MlpSpec:
    input_dim: int
    hidden_dims: tuple[int, ...]
    num_classes: int
    seed: int = 0
    activation: str = "relu"  # fixed; recorded for the manifest

    def __post_init__(self):
        self.hidden_dims = tuple(int(h) for h in self.hidden_dims)
        if self.input_dim < 1 or any(h < 1 for h in self.hidden_dims):
            raise ValueError("all layer widths must be >= 1")
        if self.num_classes < 2:
            raise ValueError("need at least 2 classes")
        if self.activation != "relu":
            raise ValueError("only relu is supported")

    def to_json(self) -> dict:
        return {"input_dim": self.input_dim, "hidden_dims": list(self.hidden_dims),
                "num_classes": self.num_classes, "seed": self.seed,
                "activation": self.activation}

    @classmethod
    def from_json(cls, obj: dict) -> "MlpSpec":
        return cls(input_dim=obj["input_dim"], hidden_dims=tuple(obj["hidden_dims"]),
                   num_classes=obj["num_classes"], seed=obj.get("seed", 0))


@dataclass
class ClassifierModel:
    """Weights of a trained MLP plus its training log.

    weights[i] has shape (d_out, d_in) and logits are a @ W.T + b, so the
    last entry is the (C x d_pen, C) classification layer.
    """

    spec: MlpSpec
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    training_log: dict = field(default_factory=dict)
    epoch: int = 0

    @property
    def last_layer(self) -> tuple[np.ndarray, np.ndarray]:
        return self.weights[-1], self.biases[-1]

    @property
    def penultimate_dim(self) -> int:
        return int(self.weights[-1].shape[1])


@dataclass
class CheckpointPair:
    early: ClassifierModel  # best validation accuracy (earliest such epoch)
    last: ClassifierModel   # final epoch


@dataclass
class ForwardTrace:
    activations: list[np.ndarray]  # post-ReLU, one per hidden layer
    penultimate: np.ndarray        # == activations[-1] (or the input if no hidden)
    logits: np.ndarray


def _init_params(spec: MlpSpec, gen: np.random.Generator):
    dims = [spec.input_dim, *spec.hidden_dims, spec.num_classes]
    weights, biases = [], []
    for d_in, d_out in zip(dims[:-1], dims[1:]):
        bound = 1.0 / np.sqrt(d_in)
        weights.append(gen.uniform(-bound, bound, size=(d_out, d_in)))
        biases.append(gen.uniform(-bound, bound, size=d_out))
    return weights, biases


def _forward(weights, biases, x):
    """Returns (activations, logits); activations are post-ReLU hidden layers."""
    a = x
    acts = []
    for w, b in zip(weights[:-1], biases[:-1]):
        a = np.maximum(a @ w.T + b, 0.0)
        acts.append(a)
    logits = a @ weights[-1].T + biases[-1]
    return acts, logits


def forward_trace(model: ClassifierModel, features) -> ForwardTrace:
    feats = np.asarray(features, dtype=np.float64)
    if feats.ndim != 2 or feats.shape[1] != model.spec.input_dim:
        raise ValueError(
            f"features are {feats.shape}, model expects width {model.spec.input_dim}")
    acts, logits = _forward(model.weights, model.biases, feats)
    penultimate = acts[-1] if acts else feats
    return ForwardTrace(activations=acts, penultimate=penultimate, logits=logits)


def _softmax(z):
    u = z - z.max(axis=-1, keepdims=True)
    e = np.exp(u)
    return e / e.sum(axis=-1, keepdims=True)


def input_gradient(model: ClassifierModel, x, temperature: float = 1.0) -> np.ndarray:
    """Exact gradient of log max_c softmax(z(x)/T)_c w.r.t. the input.

    Accepts a single d-vector or an N x d batch; returns the same shape.
    """
    single = np.asarray(x).ndim == 1
    feats = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if not np.isfinite(feats).all():
        raise ValueError("input contains non-finite values")
    acts, logits = _forward(model.weights, model.biases, feats)
    probs = _softmax(logits / temperature)
    top = logits.argmax(axis=1)
    dz = -probs / temperature
    dz[np.arange(len(top)), top] += 1.0 / temperature
    grad = dz @ model.weights[-1]
    for act, w in zip(reversed(acts), reversed(model.weights[:-1])):
        grad = (grad * (act > 0)) @ w
    return grad[0] if single else grad


def train(spec: MlpSpec, train_bundle: tensorio.TensorBundle,
          val_bundle: tensorio.TensorBundle, epochs: int, lr: float,
          batch: int, momentum: float = 0.9,
          train_label_key: str = tensorio.KEY_LABELS) -> CheckpointPair:
    """Minibatch SGD with momentum; returns (early, last) checkpoints.

    The early checkpoint is the earliest epoch attaining the best validation
    accuracy. Deterministic given spec.seed.
    """
    x = np.asarray(train_bundle.features, dtype=np.float64)
    y = np.asarray(train_bundle.labels_for(train_label_key), dtype=np.int64)
    xv = np.asarray(val_bundle.features, dtype=np.float64)
    yv = np.asarray(val_bundle.labels, dtype=np.int64)
    n = x.shape[0]
    c = spec.num_classes
    if y.min() < 0 or y.max() >= c:
        raise ValueError(f"training labels outside [0, {c})")
    present = np.bincount(y, minlength=c) > 0
    if not present.all():
        warnings.warn(f"training set has empty classes: {np.flatnonzero(~present).tolist()}")

    gen = np.random.Generator(np.random.Philox(key=np.uint64(spec.seed)))
    weights, biases = _init_params(spec, gen)
    vel_w = [np.zeros_like(w) for w in weights]
    vel_b = [np.zeros_like(b) for b in biases]

    log = {"train_loss": [], "train_acc": [], "val_loss": [], "val_acc": []}
    best_acc, best_epoch, best_params = -1.0, -1, None

    for epoch in range(1, epochs + 1):
        perm = gen.permutation(n)
        epoch_loss, epoch_correct = 0.0, 0
        for start in range(0, n, batch):
            idx = perm[start:start + batch]
            xb, yb = x[idx], y[idx]
            acts, logits = _forward(weights, biases, xb)
            probs = _softmax(logits)
            batch_loss = -np.log(probs[np.arange(len(yb)), yb] + 1e-300).sum()
            if not np.isfinite(batch_loss):
                raise RuntimeError(
                    f"NaN loss at epoch {epoch}, batch {start // batch}")
            epoch_loss += batch_loss
            epoch_correct += int((logits.argmax(axis=1) == yb).sum())
            # backprop
            dz = probs
            dz[np.arange(len(yb)), yb] -= 1.0
            dz /= len(yb)
            layer_inputs = [xb, *acts]
            grads_w, grads_b = [None] * len(weights), [None] * len(weights)
            delta = dz
            for li in range(len(weights) - 1, -1, -1):
                grads_w[li] = delta.T @ layer_inputs[li]
                grads_b[li] = delta.sum(axis=0)
                if li > 0:
                    delta = (delta @ weights[li]) * (acts[li - 1] > 0)
            for li in range(len(weights)):
                vel_w[li] = momentum * vel_w[li] - lr * grads_w[li]
                vel_b[li] = momentum * vel_b[li] - lr * grads_b[li]
                weights[li] += vel_w[li]
                biases[li] += vel_b[li]
        _, val_logits = _forward(weights, biases, xv)
        val_probs = _softmax(val_logits)
        val_loss = float(-np.log(val_probs[np.arange(len(yv)), yv] + 1e-300).mean())
        val_acc = float((val_logits.argmax(axis=1) == yv).mean())
        log["train_loss"].append(epoch_loss / n)
        log["train_acc"].append(epoch_correct / n)
        log["val_loss"].append(val_loss)
        log["val_acc"].append(val_acc)
        if val_acc > best_acc:
            best_acc, best_epoch = val_acc, epoch
            best_params = ([w.copy() for w in weights], [b.copy() for b in biases])

    early = ClassifierModel(spec=spec, weights=best_params[0], biases=best_params[1],
                            training_log=copy.deepcopy(log), epoch=best_epoch)
    last = ClassifierModel(spec=spec, weights=[w.copy() for w in weights],
                           biases=[b.copy() for b in biases],
                           training_log=copy.deepcopy(log), epoch=epochs)
    return CheckpointPair(early=early, last=last)


def export_bundle(model: ClassifierModel, data: tensorio.TensorBundle,
                  include_layers: bool = True,
                  label_key: str | None = None) -> tensorio.TensorBundle:
    """Run a forward trace over a data bundle and package the results.

    The exported bundle holds the penultimate activations under ``feat``,
    the logits, the raw inputs under ``input`` (for gradient-based scoring),
    the chosen label tensor (if any) and, when include_layers is set, every
    hidden activation under ``act.<i>``.
    """
    trace = forward_trace(model, data.features)
    tensors = {
        tensorio.KEY_INPUT: np.asarray(data.features, dtype=np.float32),
        tensorio.KEY_FEATURES: trace.penultimate.astype(np.float32),
        tensorio.KEY_LOGITS: trace.logits.astype(np.float32),
    }
    if label_key is None and data.has_labels:
        label_key = tensorio.KEY_LABELS
    if label_key is not None:
        tensors[tensorio.KEY_LABELS] = np.asarray(
            data.labels_for(label_key), dtype=np.int32)
    if include_layers:
        for i, act in enumerate(trace.activations):
            tensors[f"{tensorio.ACT_PREFIX}{i}"] = act.astype(np.float32)
    return tensorio.TensorBundle(
        name=f"{data.name}-trace", tensors=tensors,
        meta={"source": data.name, "model_epoch": model.epoch,
              "label_key": label_key or ""})


def save_model(model: ClassifierModel, directory_path) -> None:
    tensors = {}
    for i, (w, b) in enumerate(zip(model.weights, model.biases)):
        tensors[f"layer.{i}.W"] = w.astype(np.float32)
        tensors[f"layer.{i}.b"] = b.astype(np.float32)
    bundle = tensorio.TensorBundle(
        name="mlp-model", tensors=tensors,
        meta={"mlp_spec": model.spec.to_json(), "epoch": model.epoch,
              "training_log": model.training_log})
    tensorio.write_bundle(bundle, directory_path, validate=False)


def load_model(directory_path) -> ClassifierModel:
    bundle = tensorio.read_bundle(directory_path, validate=False)
    spec = MlpSpec.from_json(bundle.meta["mlp_spec"])
    n_layers = len(spec.hidden_dims) + 1
    weights = [np.asarray(bundle.tensors[f"layer.{i}.W"], dtype=np.float64)
               for i in range(n_layers)]
    biases = [np.asarray(bundle.tensors[f"layer.{i}.b"], dtype=np.float64)
              for i in range(n_layers)]
    return ClassifierModel(spec=spec, weights=weights, biases=biases,
                           training_log=bundle.meta.get("training_log", {}),
                           epoch=int(bundle.meta.get("epoch", 0)))
