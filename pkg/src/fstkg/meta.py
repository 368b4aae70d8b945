"""Bi-level meta-training with a temporal adaptation penalty.

Global parameters are adapted per entity with a gradient step on its support
facts; the adapted parameters are scored on the entity's query facts of one
time interval at a time, and the global parameters move along the first-order
gradient of

    R = mean query hinge loss + sqrt((KL + ln(|D| / delta)) / (2 |D| - 1))

where KL is the divergence between isotropic Gaussians (shared variance
``kl_var``) centred at the current parameters and at the parameters the
interval started from, and |D| is the number of query facts pooled over the
task batch.
"""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, fields
from typing import Callable, Sequence

import numpy as np

from .encoder import TRAINABLE, EncoderContext, ModelParams, warm_start_row
from .kgstore import FewShotTask, TemporalKG
from .objective import LossBatch, loss_and_grads, make_loss_batch

log = logging.getLogger(__name__)

MODES = ("full", "static_maml", "no_regularizer", "finetune_only")


class ConfigError(ValueError):
    pass


@dataclass
class TrainConfig:
    inner_lr: float = 1e-4  # eta
    outer_lr: float = 1e-4  # beta
    margin: float = 0.5  # gamma
    shots: int = 3  # K
    intervals: int = 3  # M
    budget: int = 16  # b
    time_bound: float = math.inf  # delta t
    dim: int = 128  # d
    layers: int = 1  # L
    delta: float = 0.1  # bound confidence
    kl_var: float = 1.0  # sigma^2
    n_neg: int = 10
    epochs: int = 50
    pretrain_epochs: int = 50
    pretrain_lr: float = 1e-3
    pretrain_batch: int = 128
    batch_size: int = 20
    inner_steps: int = 1
    optimizer: str = "adam"  # or "sgd"
    time_offset: float = 1.0  # facts at t are scored from history up to t - offset
    warm_start: bool = True
    task_fraction: float = 1.0
    seed: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self):
        for k in ("inner_lr", "outer_lr", "pretrain_lr"):
            if getattr(self, k) < 0:
                raise ConfigError(f"{k} must be non-negative")
        if self.margin <= 0 or self.kl_var <= 0:
            raise ConfigError("margin and kl_var must be positive")
        if not 0 < self.delta < 1:
            raise ConfigError("delta must lie in (0, 1)")
        for k in ("shots", "intervals", "budget", "dim", "layers", "n_neg", "batch_size", "pretrain_batch"):
            if getattr(self, k) < 1:
                raise ConfigError(f"{k} must be >= 1")
        for k in ("epochs", "pretrain_epochs", "inner_steps"):
            if getattr(self, k) < 0:
                raise ConfigError(f"{k} must be >= 0")
        if self.time_bound < 0:
            raise ConfigError("time_bound must be non-negative")
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        if not 0 < self.task_fraction <= 1:
            raise ConfigError("task_fraction must lie in (0, 1]")

    @classmethod
    def field_types(cls) -> dict[str, type]:
        return {f.name: type(f.default) for f in fields(cls)}


# -- optimisers --------------------------------------------------------------

class Adam:
    def __init__(self, lr: float, b1: float = 0.9, b2: float = 0.999, eps: float = 1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, b1, b2, eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, params: ModelParams, grads: dict[str, np.ndarray]) -> ModelParams:
        self.t += 1
        new = {}
        for k in TRAINABLE:
            g = grads[k]
            m = self.b1 * self.m.get(k, 0.0) + (1 - self.b1) * g
            v = self.b2 * self.v.get(k, 0.0) + (1 - self.b2) * g * g
            self.m[k], self.v[k] = m, v
            mhat = m / (1 - self.b1 ** self.t)
            vhat = v / (1 - self.b2 ** self.t)
            new[k] = getattr(params, k) - self.lr * mhat / (np.sqrt(vhat) + self.eps)
        return params.replace(**new)


class SGD:
    def __init__(self, lr: float):
        self.lr = lr

    def step(self, params: ModelParams, grads: dict[str, np.ndarray]) -> ModelParams:
        return params.step(grads, self.lr)


def make_optimizer(kind: str, lr: float):
    return Adam(lr) if kind == "adam" else SGD(lr)


# -- pieces of the objective -------------------------------------------------

def kl_point_gaussian(phi_new: ModelParams | np.ndarray, phi_old: ModelParams | np.ndarray, kl_var: float) -> float:
    """KL between N(phi_new, s2 I) and N(phi_old, s2 I): ||phi_new - phi_old||^2 / (2 s2)."""
    if kl_var <= 0:
        raise ValueError("variance must be positive")
    a = phi_new.flat() if isinstance(phi_new, ModelParams) else np.ravel(phi_new)
    b = phi_old.flat() if isinstance(phi_old, ModelParams) else np.ravel(phi_old)
    if a.shape != b.shape:
        raise ValueError(f"parameter shapes differ: {a.shape} vs {b.shape}")
    d = a - b
    return float(d @ d) / (2.0 * kl_var)


def bound_penalty(kl: float, d_size: int, delta: float) -> float:
    if d_size < 1:
        raise ValueError("penalty needs at least one query fact")
    if not 0 < delta < 1:
        raise ValueError("delta must lie in (0, 1)")
    if kl < 0:
        raise ValueError("KL must be non-negative")
    return math.sqrt((kl + math.log(d_size / delta)) / (2 * d_size - 1))


def temporal_regularizer(emp_loss: float, kl: float, d_size: int, delta: float) -> float:
    return emp_loss + bound_penalty(kl, d_size, delta)


def penalty_grad(phi: ModelParams, anchor: ModelParams, d_size: int, delta: float, kl_var: float) -> dict[str, np.ndarray]:
    """Gradient of the square-root penalty with respect to ``phi``."""
    kl = kl_point_gaussian(phi, anchor, kl_var)
    pen = bound_penalty(kl, d_size, delta)
    c = 1.0 / (2.0 * kl_var * (2 * d_size - 1) * pen)
    return {k: c * (getattr(phi, k) - getattr(anchor, k)) for k in TRAINABLE}


def _check_finite(grads: dict[str, np.ndarray], where: str):
    for k, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient in parameter block {k!r} during {where}")


def inner_adapt(phi: ModelParams, support: LossBatch, config: TrainConfig, ctx: EncoderContext) -> ModelParams:
    """``inner_steps`` gradient steps of size ``inner_lr`` on the support hinge loss (copy-on-adapt)."""
    if len(support) == 0:
        raise ValueError("empty support set")
    out = phi
    for _ in range(config.inner_steps):
        _, g = loss_and_grads(ctx, out, support, config.margin, config.time_offset)
        _check_finite(g, "inner adaptation")
        out = out.step(g, config.inner_lr)
    return out if out is not phi else phi.copy()


def task_counterparts(kg: TemporalKG, entity: int, fact_ids: Sequence[int]) -> list[int]:
    out = []
    for s, _, o, _ in kg.quads[list(fact_ids)].tolist():
        out.append(o if s == entity else s)
    return out


def _fold_warm_start_grad(g: dict[str, np.ndarray], entity: int, counterparts: list[int], rows: int):
    """Chain the gradient of a mean-initialised row back onto its source rows."""
    ge = g["entity"]
    row = ge[entity].copy()
    ge[entity] = 0.0
    cps = [c for c in counterparts if c != entity and c < rows]
    if cps:
        np.add.at(ge, cps, row / len(cps))


# -- outer step --------------------------------------------------------------

@dataclass
class TaskEpisode:
    """A task with its support and query batches drawn (negatives fixed)."""
    task: FewShotTask
    support: LossBatch
    query: LossBatch
    counterparts: list[int]


def make_episode(kg: TemporalKG, task: FewShotTask, query_ids: Sequence[int], config: TrainConfig,
                 rng: np.random.Generator, num_entities: int | None = None) -> TaskEpisode | None:
    if not len(query_ids):
        return None
    sup = make_loss_batch(kg, task.support, config.n_neg, rng, focus=task.entity, num_entities=num_entities)
    qry = make_loss_batch(kg, query_ids, config.n_neg, rng, focus=task.entity, num_entities=num_entities)
    return TaskEpisode(task, sup, qry, task_counterparts(kg, task.entity, task.support))


@dataclass
class OuterResult:
    objective: float
    emp_loss: float
    kl: float
    penalty: float
    d_size: int
    grads: dict[str, np.ndarray]


def _start_params(phi: ModelParams, ep: TaskEpisode, config: TrainConfig) -> ModelParams:
    if config.warm_start:
        return warm_start_row(phi, ep.task.entity, ep.counterparts)
    return phi


def meta_objective(phi: ModelParams, anchor: ModelParams, episodes: Sequence[TaskEpisode], config: TrainConfig,
                   ctx: EncoderContext, regularize: bool = True, need_grad: bool = True) -> OuterResult:
    """Value of the outer objective at ``phi`` and its first-order gradient.

    The inner-step Jacobian is taken as the identity: per-task query gradients
    are evaluated at the adapted parameters and summed.
    """
    total, d_size = 0.0, 0
    grads = {k: np.zeros_like(v) for k, v in phi.trainable().items()} if need_grad else None
    for ep in episodes:  # fixed order keeps the reduction deterministic
        start = _start_params(phi, ep, config)
        adapted = inner_adapt(start, ep.support, config, ctx)
        loss, g = loss_and_grads(ctx, adapted, ep.query, config.margin, config.time_offset)
        _check_finite(g, "outer step")
        total += loss
        d_size += len(ep.query)
        if need_grad:
            if config.warm_start:
                _fold_warm_start_grad(g, ep.task.entity, ep.counterparts, phi.entity.shape[0])
            for k in TRAINABLE:
                grads[k] += g[k]
    emp = total / d_size
    if need_grad:
        for k in TRAINABLE:
            grads[k] /= d_size
    kl = pen = 0.0
    if regularize:
        kl = kl_point_gaussian(phi, anchor, config.kl_var)
        pen = bound_penalty(kl, d_size, config.delta)
        if need_grad:
            pg = penalty_grad(phi, anchor, d_size, config.delta, config.kl_var)
            for k in TRAINABLE:
                grads[k] += pg[k]
    return OuterResult(emp + pen, emp, kl, pen, d_size, grads)


@dataclass
class MetaState:
    phi: ModelParams
    interval_index: int = 0
    anchor: ModelParams | None = None  # parameters at the start of the current interval
    optimizer: object = None
    log: list[dict] = field(default_factory=list)  # one record per (epoch, interval)
    steps: list[dict] = field(default_factory=list)  # one record per outer update

    def __post_init__(self):
        if self.anchor is None:
            self.anchor = self.phi


def outer_step(state: MetaState, tasks: Sequence[FewShotTask], m: int, config: TrainConfig, ctx: EncoderContext,
               kg: TemporalKG, rng: np.random.Generator, regularize: bool = True,
               collapse: bool = False) -> MetaState:
    """One global update on query interval ``m`` (1-based) of a task batch.

    ``collapse`` pools every query interval (the static variant).
    """
    if not collapse and not 1 <= m <= config.intervals:
        raise ValueError(f"interval {m} outside 1..{config.intervals}")
    episodes = []
    for task in tasks:
        q = task.query if collapse else task.query_intervals[m - 1]
        ep = make_episode(kg, task, q, config, rng, state.phi.entity.shape[0])
        if ep is not None:
            episodes.append(ep)
    if not episodes:
        log.warning("interval %d: no query facts in this batch, skipping update", m)
        return MetaState(state.phi, m, state.anchor, state.optimizer, state.log, state.steps)
    res = meta_objective(state.phi, state.anchor, episodes, config, ctx, regularize)
    opt = state.optimizer or make_optimizer(config.optimizer, config.outer_lr)
    new_phi = opt.step(state.phi, res.grads)
    record = {"interval": m, "objective": res.objective, "emp_loss": res.emp_loss, "kl": res.kl,
              "penalty": res.penalty, "d_size": res.d_size,
              "step_norm": float(np.linalg.norm(new_phi.flat() - state.phi.flat()))}
    return MetaState(new_phi, m, state.anchor, opt, state.log, state.steps + [record])


# -- training loops ----------------------------------------------------------

def _shuffle_batches(items: list, size: int, rng: np.random.Generator) -> list[list]:
    order = rng.permutation(len(items))
    return [[items[i] for i in order[j:j + size]] for j in range(0, len(items), size)]


def pretrain_background(kg: TemporalKG, fact_ids: Sequence[int], config: TrainConfig, ctx: EncoderContext,
                        phi: ModelParams, rng: np.random.Generator | None = None,
                        on_epoch: Callable[[int, float], None] | None = None) -> tuple[ModelParams, list[float]]:
    """Plain margin-loss training on many-shot facts. Returns (params, per-epoch mean loss)."""
    fact_ids = list(fact_ids)
    if not fact_ids:
        raise ValueError("background split has no facts to train on")
    rng = rng or np.random.default_rng(config.seed)
    opt = make_optimizer(config.optimizer, config.pretrain_lr)
    losses = []
    for epoch in range(config.pretrain_epochs):
        total = 0.0
        for batch_ids in _shuffle_batches(fact_ids, config.pretrain_batch, rng):
            batch = make_loss_batch(kg, batch_ids, config.n_neg, rng, num_entities=phi.entity.shape[0])
            loss, g = loss_and_grads(ctx, phi, batch, config.margin, config.time_offset)
            _check_finite(g, "pretraining")
            # mean over the batch keeps the step size independent of batch length
            phi = opt.step(phi, {k: v / len(batch_ids) for k, v in g.items()})
            total += loss
        losses.append(total / len(fact_ids))
        if on_epoch:
            on_epoch(epoch, losses[-1])
    return phi, losses


def drift_norm(a: ModelParams, b: ModelParams) -> float:
    return float(np.linalg.norm(a.flat() - b.flat()))


def meta_train(kg: TemporalKG, tasks: Sequence[FewShotTask], config: TrainConfig, ctx: EncoderContext,
               phi0: ModelParams, mode: str = "full", rng: np.random.Generator | None = None,
               on_record: Callable[[dict], None] | None = None) -> MetaState:
    """Run meta-training from ``phi0``.

    ``full``: per epoch, for m = 1..M, outer steps over all task batches on
    interval m with the penalty, each interval anchored at its starting point.
    ``no_regularizer``: same without the penalty. ``static_maml``: all query
    intervals pooled, no penalty. ``finetune_only``: returns ``phi0``.
    """
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}")
    tasks = list(tasks)
    if not tasks:
        raise ValueError("no eligible meta-training entities")
    rng = rng or np.random.default_rng(config.seed)
    state = MetaState(phi0, 0, phi0, make_optimizer(config.optimizer, config.outer_lr))
    if mode == "finetune_only":
        return state
    regularize = mode == "full"
    plan = [None] if mode == "static_maml" else list(range(1, config.intervals + 1))
    for epoch in range(config.epochs):
        for m in plan:
            anchor = state.phi
            state = MetaState(state.phi, m or 0, anchor, state.optimizer, state.log, [])
            for batch in _shuffle_batches(tasks, config.batch_size, rng):
                state = outer_step(state, batch, m or 0, config, ctx, kg, rng, regularize=regularize,
                                   collapse=m is None)
            steps = state.steps
            rec = {
                "epoch": epoch,
                "interval": m or 0,
                "emp_loss": float(np.mean([s["emp_loss"] for s in steps])) if steps else None,
                "kl": float(np.mean([s["kl"] for s in steps])) if steps else 0.0,
                "penalty": float(np.mean([s["penalty"] for s in steps])) if steps else 0.0,
                "drift": drift_norm(state.phi, anchor),
                "steps": len(steps),
            }
            state.log.append(rec)
            if on_record:
                on_record(rec)
    return state


def meta_test_adapt(phi: ModelParams, ctx: EncoderContext, kg: TemporalKG, entity: int, support: Sequence[int],
                    config: TrainConfig, rng: np.random.Generator, known_entities=None) -> ModelParams:
    """Entity-specific parameters from few-shot ``support`` facts; ``phi`` is left untouched.

    Entities beyond the embedding table, or outside ``known_entities`` when it
    is given, get a row initialised to the mean of their support counterparts.
    """
    support = list(support)
    if not support:
        raise ValueError("empty support set")
    unseen = entity >= phi.entity.shape[0] or (known_entities is not None and entity not in known_entities)
    start = warm_start_row(phi, entity, task_counterparts(kg, entity, support)) if unseen else phi
    batch = make_loss_batch(kg, support, config.n_neg, rng, focus=entity, num_entities=start.entity.shape[0])
    return inner_adapt(start, batch, config, ctx)


def config_dict(config: TrainConfig) -> dict:
    d = asdict(config)
    if math.isinf(d["time_bound"]):
        d["time_bound"] = "inf"
    return d
