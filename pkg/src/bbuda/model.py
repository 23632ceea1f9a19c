"""Target network f = head(phi(x)), prototype bank and the open-set decision rule.

phi is a multi-layer perceptron: every hidden layer is followed by the
activation, the last (feature) layer is affine. The head is a linear map
from the D features to K class scores.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

from . import jsonio
from .numerics import InvalidInput, entropy, kmeans, rng_for, softmax

UNKNOWN = -1

_ACTIVATIONS = ("tanh", "relu")


@dataclass
class TargetModel:
    layer_sizes: List[int]
    k: int
    weights: List[np.ndarray]
    biases: List[np.ndarray]
    head_weight: np.ndarray
    head_bias: np.ndarray
    activation: str = "tanh"

    @property
    def input_dim(self) -> int:
        return self.layer_sizes[0]

    @property
    def feature_dim(self) -> int:
        return self.layer_sizes[-1]

    def arrays(self) -> List[np.ndarray]:
        """Parameters in canonical order: phi layers (W, b)..., head W, head b."""
        out: List[np.ndarray] = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out + [self.head_weight, self.head_bias]

    def copy(self) -> "TargetModel":
        return TargetModel(list(self.layer_sizes), self.k,
                           [w.copy() for w in self.weights], [b.copy() for b in self.biases],
                           self.head_weight.copy(), self.head_bias.copy(), self.activation)


@dataclass
class PrototypeBank:
    prototypes: np.ndarray  # (M, D)

    @property
    def count(self) -> int:
        return self.prototypes.shape[0]


def _check_sizes(layer_sizes: Sequence[int], k: int) -> None:
    if len(layer_sizes) < 1:
        raise InvalidInput("layer_sizes must contain at least the input dimension")
    if any(int(s) < 1 for s in layer_sizes):
        raise InvalidInput(f"layer sizes must be positive, got {list(layer_sizes)}")
    if k < 2:
        raise InvalidInput("need at least 2 classes")


def _glorot(rng: np.random.Generator, fan_out: int, fan_in: int) -> np.ndarray:
    lim = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-lim, lim, size=(fan_out, fan_in))


def init_model(layer_sizes: Sequence[int], k: int, seed: int = 0,
               activation: str = "tanh") -> TargetModel:
    """Glorot-uniform weights, zero biases.

    ``layer_sizes`` is ``[D_in, hidden..., D]``. A single entry gives an
    identity feature map (D = D_in); two entries give an affine one.
    """
    _check_sizes(layer_sizes, k)
    if activation not in _ACTIVATIONS:
        raise InvalidInput(f"unknown activation {activation!r}")
    sizes = [int(s) for s in layer_sizes]
    rng = rng_for(seed, "init")
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        weights.append(_glorot(rng, fan_out, fan_in))
        biases.append(np.zeros(fan_out))
    head_w = _glorot(rng, k, sizes[-1])
    return TargetModel(sizes, int(k), weights, biases, head_w, np.zeros(k), activation)


def _act(name: str, z: np.ndarray) -> np.ndarray:
    return np.tanh(z) if name == "tanh" else np.maximum(z, 0.0)


def _act_grad(name: str, a: np.ndarray) -> np.ndarray:
    # derivative expressed through the activation output
    return 1.0 - a * a if name == "tanh" else (a > 0).astype(np.float64)


def forward_batch(model: TargetModel, X: np.ndarray):
    """Forward pass on an (N, D_in) batch.

    Returns ``(features, logits, cache)``; ``cache`` is what
    :func:`backward` needs.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != model.input_dim:
        raise InvalidInput(f"dimension mismatch: expected (*, {model.input_dim}), got {X.shape}")
    acts = [X]
    h = X
    n_layers = len(model.weights)
    for i, (w, b) in enumerate(zip(model.weights, model.biases)):
        h = h @ w.T + b
        if i < n_layers - 1:
            h = _act(model.activation, h)
        acts.append(h)
    logits = h @ model.head_weight.T + model.head_bias
    return h, logits, acts


def backward(model: TargetModel, acts: List[np.ndarray], d_logits: np.ndarray,
             d_features: Optional[np.ndarray] = None) -> List[np.ndarray]:
    """Backpropagate loss gradients w.r.t. logits (and optionally features).

    Returns parameter gradients in the order of :meth:`TargetModel.arrays`.
    """
    feats = acts[-1]
    g_head_w = d_logits.T @ feats
    g_head_b = d_logits.sum(axis=0)
    d = d_logits @ model.head_weight
    if d_features is not None:
        d = d + d_features
    grads: List[np.ndarray] = []
    n_layers = len(model.weights)
    for i in range(n_layers - 1, -1, -1):
        if i < n_layers - 1:
            d = d * _act_grad(model.activation, acts[i + 1])
        grads.append(d.sum(axis=0))
        grads.append(d.T @ acts[i])
        if i > 0:
            d = d @ model.weights[i]
    grads.reverse()  # now W0, b0, W1, b1, ...
    return grads + [g_head_w, g_head_b]


def forward(model: TargetModel, x):
    """``(features, logits)`` for one input vector or an (N, D_in) batch."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        f, z, _ = forward_batch(model, x[None, :])
        return f[0], z[0]
    f, z, _ = forward_batch(model, x)
    return f, z


def h1_from_probs(probs) -> np.ndarray | int:
    """1 where the prediction entropy exceeds ln(K)/2 (flag as unknown)."""
    p = np.asarray(probs, dtype=np.float64)
    k = p.shape[-1]
    if k < 2:
        raise InvalidInput("need at least 2 classes")
    out = (np.asarray(entropy(p)) > np.log(k) / 2).astype(int)
    return int(out) if out.ndim == 0 else out


def h1_detect_unknown(logits) -> np.ndarray | int:
    return h1_from_probs(softmax(logits))


def h2_classify(logits) -> np.ndarray | int:
    """Argmax over classes; ``np.argmax`` already picks the lowest index on ties."""
    z = np.asarray(logits, dtype=np.float64)
    if z.shape[-1] < 2:
        raise InvalidInput("need at least 2 classes")
    out = np.argmax(z, axis=-1)
    return int(out) if out.ndim == 0 else out


def decide(probs) -> np.ndarray | int:
    """Open-set rule on probability vectors: class index, or UNKNOWN."""
    p = np.asarray(probs, dtype=np.float64)
    out = np.where(np.asarray(h1_from_probs(p)) == 1, UNKNOWN, np.argmax(p, axis=-1))
    return int(out) if out.ndim == 0 else out


def infer(model: TargetModel, x) -> np.ndarray | int:
    _, logits = forward(model, x)
    return decide(softmax(logits))


def init_prototypes(model: TargetModel, data, m: int, seed: int = 0,
                    max_iter: int = 100, tol: float = 1e-6) -> PrototypeBank:
    """k-means centers of the model's features on ``data``."""
    feats, _ = forward(model, np.atleast_2d(np.asarray(data, dtype=np.float64)))
    centers, _ = kmeans(feats, m, seed=seed, max_iter=max_iter, tol=tol)
    norms = np.linalg.norm(centers, axis=1)
    bad = norms == 0
    if bad.any():
        jitter = rng_for(seed, "prototype-jitter").standard_normal(centers.shape)
        centers[bad] += 1e-6 * jitter[bad]
    return PrototypeBank(centers)


@dataclass
class ParamView:
    """All learnable scalars as one flat float64 vector.

    ``flat`` owns the memory; models and banks returned by :func:`unflatten`
    hold views into it, so in-place updates of ``flat`` are seen by them.
    """
    flat: np.ndarray
    shapes: List[tuple]
    layer_sizes: List[int]
    k: int
    activation: str
    n_model: int = field(default=0)  # number of arrays that belong to the model

    def split(self, vec: Optional[np.ndarray] = None) -> List[np.ndarray]:
        vec = self.flat if vec is None else vec
        out, pos = [], 0
        for shp in self.shapes:
            size = int(np.prod(shp))
            out.append(vec[pos:pos + size].reshape(shp))
            pos += size
        return out


def flatten(model: TargetModel, bank: Optional[PrototypeBank] = None) -> ParamView:
    arrays = model.arrays()
    n_model = len(arrays)
    if bank is not None:
        arrays = arrays + [bank.prototypes]
    flat = np.concatenate([a.ravel() for a in arrays]) if arrays else np.zeros(0)
    return ParamView(flat, [a.shape for a in arrays], list(model.layer_sizes), model.k,
                     model.activation, n_model)


def flatten_grads(grads: Sequence[np.ndarray]) -> np.ndarray:
    return np.concatenate([np.ravel(g) for g in grads])


def unflatten(view: ParamView):
    """Inverse of :func:`flatten`: ``(model, bank_or_None)`` sharing ``view.flat``."""
    parts = view.split()
    model_parts, rest = parts[:view.n_model], parts[view.n_model:]
    n_layers = len(view.layer_sizes) - 1
    weights = [model_parts[2 * i] for i in range(n_layers)]
    biases = [model_parts[2 * i + 1] for i in range(n_layers)]
    model = TargetModel(list(view.layer_sizes), view.k, weights, biases,
                        model_parts[-2], model_parts[-1], view.activation)
    bank = PrototypeBank(rest[0]) if rest else None
    return model, bank


def model_to_dict(model: TargetModel) -> dict:
    return {
        "schema_version": jsonio.SCHEMA_VERSION,
        "layer_sizes": list(model.layer_sizes),
        "k": model.k,
        "activation": model.activation,
        "parameters": flatten(model).flat,
    }


def model_from_dict(doc: dict) -> TargetModel:
    if doc.get("schema_version") != jsonio.SCHEMA_VERSION:
        raise InvalidInput(f"unsupported model schema_version {doc.get('schema_version')!r}")
    template = init_model(doc["layer_sizes"], doc["k"], seed=0, activation=doc.get("activation", "tanh"))
    view = flatten(template)
    params = np.asarray(doc["parameters"], dtype=np.float64)
    if params.shape != view.flat.shape:
        raise InvalidInput(f"expected {view.flat.size} parameters, got {params.size}")
    view.flat[:] = params
    return unflatten(view)[0]


def save_model(model: TargetModel, path: str | Path) -> None:
    jsonio.write(path, model_to_dict(model))


def load_model(path: str | Path) -> TargetModel:
    return model_from_dict(jsonio.read(path))
