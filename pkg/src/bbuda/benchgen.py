"""Synthetic universal-DA benchmark and supervised source training.

Classes are isotropic Gaussians whose means sit on a sphere. Ids are laid
out as ``[common | source-private | target-private]`` so that source class
ids are ``0..K-1`` and target-private ids are ``>= K``. The target domain is
the source distribution pushed through a global affine map (rotation in a
random 2-plane, scaling, translation).
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np

from . import jsonio
from .model import TargetModel, backward, flatten, flatten_grads, forward_batch, init_model, unflatten
from .numerics import InvalidInput, log_softmax, rng_for, softmax


class GenerationError(RuntimeError):
    pass


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class LabelPartition:
    n_common: int
    n_source_private: int
    n_target_private: int

    def __post_init__(self):
        if self.n_common < 1:
            raise InvalidInput("n_common must be >= 1")
        if self.n_source_private < 0 or self.n_target_private < 0:
            raise InvalidInput("private class counts must be >= 0")
        if self.k < 2:
            raise InvalidInput("the source label space needs at least 2 classes")

    @property
    def k(self) -> int:
        """Number of source classes."""
        return self.n_common + self.n_source_private

    @property
    def n_total(self) -> int:
        return self.k + self.n_target_private

    @property
    def source_classes(self) -> List[int]:
        return list(range(self.k))

    @property
    def target_classes(self) -> List[int]:
        return list(range(self.n_common)) + list(range(self.k, self.n_total))


@dataclass(frozen=True)
class DomainShift:
    rotation: float = 0.3        # radians, in a random 2-plane
    translation: float = 0.5     # in units of class_separation
    scale: float = 1.1

    def __post_init__(self):
        if self.scale <= 0:
            raise InvalidInput("scale must be positive")


@dataclass(frozen=True)
class BenchmarkSpec:
    partition: LabelPartition = LabelPartition(10, 5, 6)
    input_dim: int = 16
    source_per_class: int = 100
    target_per_class: int = 100
    shift: DomainShift = DomainShift()
    class_separation: float = 2.0
    noise_sigma: float = 0.25    # in units of class_separation
    radius: float = 2.0          # sphere radius of class means, in units of class_separation
    seed: int = 0

    def __post_init__(self):
        if self.input_dim < 2:
            raise InvalidInput("input_dim must be >= 2")
        if self.source_per_class < 1 or self.target_per_class < 1:
            raise InvalidInput("samples per class must be positive")
        if self.class_separation <= 0:
            raise InvalidInput("class_separation must be positive")
        if self.noise_sigma < 0:
            raise InvalidInput("noise_sigma must be non-negative")
        if self.radius <= 0:
            raise InvalidInput("radius must be positive")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> "BenchmarkSpec":
        doc = dict(doc)
        if "partition" in doc:
            doc["partition"] = LabelPartition(**doc["partition"])
        if "shift" in doc:
            doc["shift"] = DomainShift(**doc["shift"])
        return cls(**doc)


@dataclass
class LabeledDataset:
    inputs: np.ndarray
    labels: np.ndarray
    domain: str = ""

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.inputs.ndim != 2 or len(self.labels) != len(self.inputs):
            raise InvalidInput("need one label per input row")

    def __len__(self) -> int:
        return len(self.labels)


@dataclass
class AffineShift:
    rotation: np.ndarray   # orthonormal (D, D)
    scale: float
    offset: np.ndarray

    def apply(self, X: np.ndarray) -> np.ndarray:
        return self.scale * X @ self.rotation.T + self.offset

    def invert(self, Y: np.ndarray) -> np.ndarray:
        return ((Y - self.offset) / self.scale) @ self.rotation


def _class_means(spec: BenchmarkSpec, rng: np.random.Generator) -> np.ndarray:
    n = spec.partition.n_total
    radius = spec.radius * spec.class_separation
    for _ in range(1000):
        v = rng.standard_normal((n, spec.input_dim))
        means = radius * v / np.linalg.norm(v, axis=1, keepdims=True)
        diff = means[:, None, :] - means[None, :, :]
        dist = np.sqrt((diff ** 2).sum(-1))
        np.fill_diagonal(dist, np.inf)
        if dist.min() >= spec.class_separation:
            return means
    raise GenerationError(f"could not place {n} class means {spec.class_separation} apart "
                          f"in {spec.input_dim} dimensions after 1000 draws")


def make_shift(spec: BenchmarkSpec, rng: np.random.Generator) -> AffineShift:
    d = spec.input_dim
    basis, _ = np.linalg.qr(rng.standard_normal((d, 2)))
    u, v = basis[:, 0], basis[:, 1]
    c, s = np.cos(spec.shift.rotation), np.sin(spec.shift.rotation)
    rot = (np.eye(d) + (c - 1) * (np.outer(u, u) + np.outer(v, v))
           + s * (np.outer(v, u) - np.outer(u, v)))
    direction = rng.standard_normal(d)
    direction /= np.linalg.norm(direction)
    offset = spec.shift.translation * spec.class_separation * direction
    return AffineShift(rot, spec.shift.scale, offset)


def _sample(means: np.ndarray, classes: Sequence[int], per_class: int, sigma: float,
            rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
    labels = np.repeat(np.asarray(classes, dtype=np.int64), per_class)
    noise = rng.standard_normal((len(labels), means.shape[1]))
    return means[labels] + sigma * noise, labels


def generate(spec: BenchmarkSpec):
    """Draw ``(source, target, partition)`` deterministically from ``spec.seed``."""
    src, tgt, _, _ = generate_with_shift(spec)
    return src, tgt, spec.partition


def generate_with_shift(spec: BenchmarkSpec):
    """Like :func:`generate` but returns ``(source, target, shift, means)``."""
    means = _class_means(spec, rng_for(spec.seed, "bench-means"))
    shift = make_shift(spec, rng_for(spec.seed, "bench-shift"))
    sigma = spec.noise_sigma * spec.class_separation
    part = spec.partition
    xs, ys = _sample(means, part.source_classes, spec.source_per_class, sigma,
                     rng_for(spec.seed, "bench-source"))
    xt, yt = _sample(means, part.target_classes, spec.target_per_class, sigma,
                     rng_for(spec.seed, "bench-target"))
    xt = shift.apply(xt)
    return (LabeledDataset(xs, ys, "source"), LabeledDataset(xt, yt, "target"), shift, means)


def dataset_to_dict(ds: LabeledDataset, spec: Optional[BenchmarkSpec] = None) -> dict:
    return {"schema_version": jsonio.SCHEMA_VERSION, "domain": ds.domain,
            "spec": spec.to_dict() if spec is not None else None,
            "inputs": ds.inputs, "labels": ds.labels}


def save_dataset(ds: LabeledDataset, path: str | Path, spec: Optional[BenchmarkSpec] = None) -> None:
    jsonio.write(path, dataset_to_dict(ds, spec))


def load_dataset(path: str | Path) -> Tuple[LabeledDataset, Optional[BenchmarkSpec]]:
    doc = jsonio.read(path)
    if doc.get("schema_version") != jsonio.SCHEMA_VERSION:
        raise InvalidInput(f"unsupported dataset schema_version {doc.get('schema_version')!r}")
    inputs = np.asarray(doc["inputs"], dtype=np.float64)
    if inputs.ndim != 2:
        inputs = inputs.reshape(len(doc["labels"]), -1)
    spec = BenchmarkSpec.from_dict(doc["spec"]) if doc.get("spec") else None
    return LabeledDataset(inputs, doc["labels"], doc.get("domain", "")), spec


# -- source model -----------------------------------------------------------

@dataclass(frozen=True)
class SourceTrainConfig:
    # deliberately short and soft: a fully converged source is confidently
    # wrong on target-private classes, which leaves nothing to adapt from
    epochs: int = 10
    batch_size: int = 64
    learning_rate: float = 0.004
    momentum: float = 0.9
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1 or self.learning_rate <= 0:
            raise InvalidInput("epochs >= 0, batch_size >= 1 and learning_rate > 0 required")
        if not 0.0 <= self.momentum < 1.0:
            raise InvalidInput("momentum must lie in [0, 1)")


@dataclass
class SourceTrainResult:
    model: TargetModel
    train_accuracy: float
    epoch_losses: List[float] = field(default_factory=list)


def default_layer_sizes(input_dim: int) -> List[int]:
    """Target network: two tanh hidden layers and a 32-d feature layer."""
    return [input_dim, 64, 64, 32]


def default_source_layer_sizes(input_dim: int) -> List[int]:
    """Source network: softmax regression (identity feature map)."""
    return [input_dim]


def train_source(source: LabeledDataset, k: int, layer_sizes: Optional[Sequence[int]] = None,
                 cfg: SourceTrainConfig = SourceTrainConfig(),
                 activation: str = "tanh") -> SourceTrainResult:
    """Mini-batch SGD with momentum on cross-entropy against the one-hot labels."""
    if source.labels.min() < 0 or source.labels.max() >= k:
        raise InvalidInput("source labels must lie in [0, K)")
    sizes = (list(layer_sizes) if layer_sizes is not None
             else default_source_layer_sizes(source.inputs.shape[1]))
    view = flatten(init_model(sizes, k, seed=cfg.seed, activation=activation))
    model, _ = unflatten(view)
    velocity = np.zeros_like(view.flat)
    X, y = source.inputs, source.labels
    n = len(y)
    onehot = np.eye(k)[y]
    shuffle = rng_for(cfg.seed, "source-shuffle")
    losses: List[float] = []
    for epoch in range(cfg.epochs):
        order = shuffle.permutation(n)
        total = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            _, logits, acts = forward_batch(model, X[idx])
            if not np.all(np.isfinite(logits)):
                raise TrainingError(f"non-finite logits at epoch {epoch}; lower the learning rate")
            logp = log_softmax(logits)
            loss = float(-(onehot[idx] * logp).sum() / len(idx))
            if not np.isfinite(loss):
                raise TrainingError(f"loss diverged at epoch {epoch}")
            total += loss * len(idx)
            d_logits = (np.exp(logp) - onehot[idx]) / len(idx)
            g = flatten_grads(backward(model, acts, d_logits))
            velocity *= cfg.momentum
            velocity += g
            view.flat -= cfg.learning_rate * velocity
        losses.append(total / n)
    _, logits, _ = forward_batch(model, X)
    acc = float((softmax(logits).argmax(1) == y).mean())
    return SourceTrainResult(model, acc, losses)
