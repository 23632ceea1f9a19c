"""Adaptation loop: cache source predictions once, then optimize the weighted objective."""
from __future__ import annotations

import csv
import io
import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

from .benchgen import default_layer_sizes
from .blackbox import DEFAULT_MAX_BATCH, PredictionCache, Predictor, fill_cache
from .evaluation import GroundTruth, evaluate
from .model import (PrototypeBank, TargetModel, decide, flatten, flatten_grads, forward_batch,
                    init_model, init_prototypes, unflatten)
from .numerics import InvalidInput, rng_for, softmax
from .objective import (ObjectiveWeights, PseudoLabelConfig, auxiliary_targets, prototype_affinities,
                        total_loss)

log = logging.getLogger(__name__)


class AdaptationError(RuntimeError):
    pass


@dataclass(frozen=True)
class AdaptConfig:
    epochs: int = 100
    batch_size: int = 64
    learning_rate: float = 0.01
    momentum: float = 0.9
    rho: float = 0.5
    beta: float = 1.0
    m_prototypes: int = 100
    seed: int = 0
    temperature: float = 1.0
    # None: linear decay over alpha_horizon (defaults to epochs); a number pins alpha
    alpha_fixed: Optional[float] = None
    alpha_horizon: Optional[int] = None
    prototype_warmup_epochs: int = 0
    kmeans_max_iter: int = 100
    max_batch: int = DEFAULT_MAX_BATCH
    layer_sizes: Optional[Sequence[int]] = None
    activation: str = "tanh"

    def __post_init__(self):
        if self.epochs < 0:
            raise InvalidInput("epochs must be >= 0")
        if self.batch_size < 1 or self.max_batch < 1:
            raise InvalidInput("batch sizes must be positive")
        if self.learning_rate <= 0 or not 0.0 <= self.momentum < 1.0:
            raise InvalidInput("need learning_rate > 0 and momentum in [0, 1)")
        if self.rho < 0 or self.beta < 0:
            raise InvalidInput("rho and beta must be non-negative")
        if self.beta > 0 and self.m_prototypes < 2:
            raise InvalidInput("need at least 2 prototypes")
        if self.alpha_fixed is not None and not 0.0 <= self.alpha_fixed <= 1.0:
            raise InvalidInput("alpha_fixed must lie in [0, 1]")

    @classmethod
    def from_dict(cls, doc: dict) -> "AdaptConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise InvalidInput(f"unknown adapt config keys: {sorted(unknown)}")
        return cls(**doc)

    def to_dict(self) -> dict:
        d = asdict(self)
        if d["layer_sizes"] is not None:
            d["layer_sizes"] = list(d["layer_sizes"])
        return d


def alpha_schedule(t: int, total: int = 100) -> float:
    """Distillation weight at epoch ``t``: ``max(0, 1 - t/total)``."""
    if t < 0:
        raise InvalidInput("epoch index must be >= 0")
    return max(0.0, 1.0 - t / total)


def sgd_step(params: np.ndarray, grads: np.ndarray, velocity: np.ndarray, lr: float,
             momentum: float) -> None:
    """In place: ``v <- momentum*v + g``; ``p <- p - lr*v``."""
    velocity *= momentum
    velocity += grads
    params -= lr * velocity


HISTORY_FIELDS = ["epoch", "alpha", "loss_distill", "loss_self", "loss_reg", "loss_total"]


@dataclass
class EpochRecord:
    epoch: int
    alpha: float
    loss_distill: float
    loss_self: float
    loss_reg: float
    loss_total: float
    h_score: Optional[float] = None
    aa: Optional[float] = None


@dataclass
class TrainHistory:
    records: List[EpochRecord] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.records)

    def to_csv(self) -> str:
        with_eval = any(r.h_score is not None or r.aa is not None for r in self.records)
        header = HISTORY_FIELDS + (["h_score", "aa"] if with_eval else [])
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(header)
        for r in self.records:
            row = [getattr(r, h) for h in header]
            w.writerow([str(v) if isinstance(v, int) else ("" if v is None else format(v, ".17g"))
                        for v in row])
        return buf.getvalue()

    def save_csv(self, path: str | Path) -> None:
        Path(path).write_text(self.to_csv(), encoding="utf-8")

    @classmethod
    def from_csv(cls, text: str) -> "TrainHistory":
        recs = []
        for row in csv.DictReader(io.StringIO(text)):
            vals = {k: (None if v == "" else float(v)) for k, v in row.items()}
            vals["epoch"] = int(vals["epoch"])
            recs.append(EpochRecord(**vals))
        return cls(recs)


@dataclass
class AdaptResult:
    model: TargetModel
    history: TrainHistory
    cache: PredictionCache
    initial_model: TargetModel


def refresh_targets(model: TargetModel, bank: PrototypeBank, X: np.ndarray) -> np.ndarray:
    """Auxiliary targets over the whole target set, frozen for one epoch."""
    feats, _, _ = forward_batch(model, X)
    return auxiliary_targets(prototype_affinities(feats, bank.prototypes))


def adapt(target_inputs, predictor: Predictor, cfg: AdaptConfig = AdaptConfig(),
          truth: Optional[GroundTruth] = None, cache: Optional[PredictionCache] = None) -> AdaptResult:
    """Train a target model from black-box predictions on ``target_inputs``.

    The predictor is queried once for every instance (in chunks of
    ``cfg.max_batch``) before any training; afterwards only the cache is
    read. A pre-filled ``cache`` skips the queries entirely. ``truth`` is
    only used to log per-epoch metrics.
    """
    X = np.atleast_2d(np.asarray(target_inputs, dtype=np.float64))
    if not np.all(np.isfinite(X)):
        raise InvalidInput("target inputs contain non-finite values")
    if cache is None:
        if predictor.input_dim() != X.shape[1]:
            raise InvalidInput(f"predictor expects dim {predictor.input_dim()}, data has {X.shape[1]}")
        cache = fill_cache(predictor, X, cfg.max_batch)
    elif not np.array_equal(cache.inputs, X):
        raise InvalidInput("cache does not match the target inputs")
    F = cache.outputs
    n, k = F.shape
    sizes = list(cfg.layer_sizes) if cfg.layer_sizes is not None else default_layer_sizes(X.shape[1])
    model0 = init_model(sizes, k, seed=cfg.seed, activation=cfg.activation)
    pl_cfg = PseudoLabelConfig(cfg.rho, k)
    horizon = cfg.alpha_horizon or cfg.epochs
    history = TrainHistory()
    if cfg.epochs == 0:
        return AdaptResult(model0, history, cache, model0)

    view = flatten(model0.copy())
    model, _ = unflatten(view)
    velocity = np.zeros_like(view.flat)
    bank: Optional[PrototypeBank] = None
    shuffle = rng_for(cfg.seed, "shuffle")

    for epoch in range(cfg.epochs):
        if cfg.beta > 0 and bank is None and epoch >= cfg.prototype_warmup_epochs:
            if cfg.m_prototypes > n:
                raise InvalidInput(f"m_prototypes={cfg.m_prototypes} exceeds {n} target instances")
            init_bank = init_prototypes(model, X, cfg.m_prototypes, seed=cfg.seed,
                                        max_iter=cfg.kmeans_max_iter)
            view = flatten(model, init_bank)
            model, bank = unflatten(view)
            velocity = np.concatenate([velocity, np.zeros(init_bank.prototypes.size)])
        alpha = cfg.alpha_fixed if cfg.alpha_fixed is not None else alpha_schedule(epoch, horizon)
        weights = ObjectiveWeights(alpha, cfg.beta if bank is not None else 0.0)
        q_all = refresh_targets(model, bank, X) if bank is not None else None

        sums = np.zeros(4)
        order = shuffle.permutation(n)
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            try:
                parts, grads = total_loss(model, X[idx], F[idx], weights, pl_cfg, bank,
                                          None if q_all is None else q_all[idx], cfg.temperature)
            except InvalidInput as exc:
                # inputs were validated above, so this is the training state blowing up
                raise AdaptationError(f"numerical failure at epoch {epoch}, batch "
                                      f"{start // cfg.batch_size}: {exc}") from exc
            if not np.isfinite(parts.total):
                raise AdaptationError(
                    f"non-finite loss at epoch {epoch}, batch {start // cfg.batch_size}: "
                    f"distill={parts.distill} self={parts.self_train} reg={parts.reg}")
            sums += len(idx) * np.array([parts.distill, parts.self_train, parts.reg, parts.total])
            sgd_step(view.flat, flatten_grads(grads), velocity, cfg.learning_rate, cfg.momentum)
            if not np.all(np.isfinite(view.flat)):
                raise AdaptationError(
                    f"parameters became non-finite at epoch {epoch}, batch {start // cfg.batch_size} "
                    f"(last loss {parts.total}); lower the learning rate")
        d, s, r, _ = sums / n
        rec = EpochRecord(epoch, float(alpha), float(d), float(s), float(r),
                          float(alpha * d + (1.0 - alpha) * s + weights.beta * r))
        if truth is not None:
            rep = evaluate(predict(model, X), truth)
            rec.h_score, rec.aa = rep.h_score, rep.aa
        history.records.append(rec)
        log.debug("epoch %d alpha=%.3f total=%.5f", epoch, alpha, rec.loss_total)

    # prototypes are only a training device
    final = TargetModel(list(model.layer_sizes), model.k, [w.copy() for w in model.weights],
                        [b.copy() for b in model.biases], model.head_weight.copy(),
                        model.head_bias.copy(), model.activation)
    return AdaptResult(final, history, cache, model0)


def predict(model: TargetModel, X) -> np.ndarray:
    """Open-set predictions (class index or UNKNOWN) for a batch."""
    _, logits, _ = forward_batch(model, np.atleast_2d(np.asarray(X, dtype=np.float64)))
    return decide(softmax(logits))
