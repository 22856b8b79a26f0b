"""Inner-loop adaptation and the outer-loop rules: MAML, first-order MAML, Reptile and HIDRA.

Parameters travel between meta-steps as ``dict[str, np.ndarray]``. Each task is
differentiated on its own stretch of a tape which is truncated once the task's
meta-gradient has been extracted, so the tape length is unchanged by a meta-step.
"""
from __future__ import annotations

import csv
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .episodes import ClassPool, Episode, MetaBatch, sample_episode, sample_meta_batch
from .errors import DimensionError, ValidationError
from .network import (HEAD_BIAS, HEAD_WEIGHT, Backbone, BackboneSpec, DynamicHead, MasterNeuron, Model,
                      aggregate_head, forward_full, init_backbone, init_head, init_master, row_mean, to_tape)

Params = dict[str, np.ndarray]
METHODS = ("maml", "fomaml", "reptile", "hidra")


@dataclass(frozen=True)
class InnerConfig:
    alpha: float = 0.4
    steps: int = 1

    def __post_init__(self):
        if not self.alpha > 0:
            raise ValidationError(f"inner step size must be > 0, got {self.alpha}")
        if self.steps < 0:
            raise ValidationError(f"inner steps must be >= 0, got {self.steps}")


@dataclass(frozen=True)
class OuterConfig:
    beta: float = 1e-3
    b1: float = 0.9
    b2: float = 0.999
    eps: float = 1e-8
    iterations: int = 1000
    method: str = "maml"
    optimizer: str = "adam"  # "sgd" is used by the equivalence checks
    reptile_literal_sign: bool = False

    def __post_init__(self):
        if not self.beta > 0:
            raise ValidationError(f"outer step size must be > 0, got {self.beta}")
        if not (0 <= self.b1 < 1 and 0 <= self.b2 < 1):
            raise ValidationError(f"Adam decay rates must lie in [0, 1), got {self.b1}, {self.b2}")
        if self.method not in METHODS:
            raise ValidationError(f"unknown method {self.method!r}")
        if self.optimizer not in ("adam", "sgd"):
            raise ValidationError(f"unknown outer optimizer {self.optimizer!r}")


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


@dataclass
class StepStats:
    """Post-adaptation query loss/accuracy averaged over the meta-batch."""

    loss: float
    acc: float


def adam_update(state: AdamState, params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray],
                lr: float, b1: float = 0.9, b2: float = 0.999, eps: float = 1e-8) -> Params:
    if set(params) != set(grads):
        raise DimensionError(f"parameter and gradient names differ: {sorted(set(params) ^ set(grads))}")
    state.t += 1
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    out = {}
    for k, p in params.items():
        g = grads[k]
        if g.shape != p.shape:
            raise DimensionError(f"{k}: gradient shape {g.shape} does not match parameter {p.shape}")
        m = state.m.get(k)
        if m is None:
            m = state.m[k] = np.zeros_like(p)
            state.v[k] = np.zeros_like(p)
        elif m.shape != p.shape:
            raise DimensionError(f"{k}: Adam moment shape {m.shape} does not match parameter {p.shape}")
        state.m[k] = b1 * m + (1.0 - b1) * g
        state.v[k] = b2 * state.v[k] + (1.0 - b2) * g * g
        out[k] = p - lr * (state.m[k] / c1) / (np.sqrt(state.v[k] / c2) + eps)
    return out


def _outer_update(params: Params, grads: Params, outer: OuterConfig, adam: AdamState | None) -> Params:
    if outer.optimizer == "sgd":
        return {k: p - outer.beta * grads[k] for k, p in params.items()}
    if adam is None:
        raise ValidationError("the Adam outer optimizer needs an AdamState")
    return adam_update(adam, params, grads, outer.beta, outer.b1, outer.b2, outer.eps)


# ---- inner loop --------------------------------------------------------------

def episode_loss(params: Mapping[str, Tensor], x: Tensor, y: np.ndarray) -> tuple[Tensor, Tensor]:
    logits = forward_full(params, x)
    return ad.softmax_cross_entropy(logits, y), logits


def _accuracy(logits: np.ndarray, y: np.ndarray) -> float:
    return float(np.mean(logits.argmax(axis=1) == y.argmax(axis=1)))


def gradient_descent(params: Mapping[str, Tensor], loss_fn: Callable[[dict[str, Tensor]], Tensor],
                     cfg: InnerConfig, tape: Tape, track_higher_order: bool = True) -> dict[str, Tensor]:
    """``cfg.steps`` plain gradient steps on ``loss_fn``.

    With ``track_higher_order`` every update is a recorded expression of ``params``;
    otherwise each step's result is a fresh leaf.
    """
    params = dict(params)
    names = list(params)
    for _ in range(cfg.steps):
        grads = ad.backward(loss_fn(params), [params[k] for k in names], create_graph=track_higher_order)
        if track_higher_order:
            params = {k: ad.sub(params[k], ad.scale(g, cfg.alpha)) for k, g in zip(names, grads)}
        else:
            params = {k: tape.variable(params[k].value - cfg.alpha * g.value) for k, g in zip(names, grads)}
    return params


def inner_adapt(init: Mapping[str, Tensor], episode: Episode, cfg: InnerConfig, tape: Tape,
                track_higher_order: bool = True) -> dict[str, Tensor]:
    """Full-batch gradient descent on the episode's train split."""
    C = init[HEAD_WEIGHT].shape[0]
    if C != episode.n_way:
        raise ValidationError(f"head has {C} output neurons but the episode is {episode.n_way}-way")
    x = tape.constant(episode.x_train)
    return gradient_descent(init, lambda p: episode_loss(p, x, episode.y_train)[0], cfg, tape, track_higher_order)


def two_level_gradient(init: Params, train_loss: Callable[[dict[str, Tensor]], Tensor],
                       val_loss: Callable[[dict[str, Tensor]], Tensor], inner: InnerConfig, tape: Tape,
                       first_order: bool = False) -> tuple[Params, float]:
    """Gradient w.r.t. ``init`` of ``val_loss`` evaluated after adapting on ``train_loss``.

    ``first_order`` takes the gradient at the adapted parameters instead (FOMAML).
    The tape is returned to its original length.
    """
    mark = tape.mark()
    try:
        leaves = to_tape(init, tape)
        adapted = gradient_descent(leaves, train_loss, inner, tape, track_higher_order=not first_order)
        loss = val_loss(adapted)
        wrt = adapted if first_order else leaves
        names = list(init)
        grads = ad.backward(loss, [wrt[k] for k in names])
        return {k: g.value for k, g in zip(names, grads)}, float(loss.value)
    finally:
        tape.truncate(mark)


def task_meta_gradient(init: Params, episode: Episode, inner: InnerConfig, tape: Tape,
                       first_order: bool = False) -> tuple[Params, float, float]:
    """Meta-gradient, query loss and query accuracy for one episode."""
    if init[HEAD_WEIGHT].shape[0] != episode.n_way:
        raise ValidationError(f"head has {init[HEAD_WEIGHT].shape[0]} output neurons "
                              f"but the episode is {episode.n_way}-way")
    seen = {}

    def train_loss(p):
        if "x" not in seen:
            seen["x"] = tape.constant(episode.x_train)
        return episode_loss(p, seen["x"], episode.y_train)[0]

    def val_loss(p):
        loss, logits = episode_loss(p, tape.constant(episode.x_test), episode.y_test)
        seen["acc"] = _accuracy(logits.value, episode.y_test)
        return loss

    grads, loss = two_level_gradient(init, train_loss, val_loss, inner, tape, first_order)
    return grads, loss, seen["acc"]


def _map_tasks(fn: Callable[[Episode, Tape], object], episodes: list[Episode], tape: Tape | None,
               threads: int) -> list:
    """Run ``fn`` per episode, results in episode order regardless of ``threads``."""
    if threads <= 1 or len(episodes) <= 1:
        tape = tape if tape is not None else Tape()
        return [fn(ep, tape) for ep in episodes]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(lambda ep: fn(ep, Tape()), episodes))


def _ordered_mean(arrays: list[np.ndarray]) -> np.ndarray:
    acc = np.zeros_like(arrays[0])
    for a in arrays:
        acc = acc + a
    return acc / len(arrays)


def meta_gradient(init: Params, batch: MetaBatch, inner: InnerConfig, first_order: bool = False,
                  tape: Tape | None = None, threads: int = 1) -> tuple[Params, StepStats]:
    results = _map_tasks(lambda ep, tp: task_meta_gradient(init, ep, inner, tp, first_order),
                         batch.episodes, tape, threads)
    grads = {k: _ordered_mean([r[0][k] for r in results]) for k in init}
    stats = StepStats(float(np.mean([r[1] for r in results])), float(np.mean([r[2] for r in results])))
    return grads, stats


# ---- outer loop --------------------------------------------------------------

def maml_meta_step(init: Params, batch: MetaBatch, inner: InnerConfig, outer: OuterConfig,
                   adam: AdamState | None, tape: Tape | None = None, threads: int = 1) -> tuple[Params, StepStats]:
    grads, stats = meta_gradient(init, batch, inner, False, tape, threads)
    return _outer_update(init, grads, outer, adam), stats


def fomaml_meta_step(init: Params, batch: MetaBatch, inner: InnerConfig, outer: OuterConfig,
                     adam: AdamState | None, tape: Tape | None = None, threads: int = 1) -> tuple[Params, StepStats]:
    grads, stats = meta_gradient(init, batch, inner, True, tape, threads)
    return _outer_update(init, grads, outer, adam), stats


def _reptile_task(init: Params, episode: Episode, inner: InnerConfig, tape: Tape):
    mark = tape.mark()
    try:
        adapted = inner_adapt(to_tape(init, tape), episode, inner, tape, track_higher_order=False)
        with tape.no_record():
            loss, logits = episode_loss(adapted, tape.constant(episode.x_test), episode.y_test)
        delta = {k: adapted[k].value - init[k] for k in init}
        return delta, float(loss.value), _accuracy(logits.value, episode.y_test)
    finally:
        tape.truncate(mark)


def reptile_delta(init: Params, batch: MetaBatch, inner: InnerConfig, outer: OuterConfig,
                  tape: Tape | None = None, threads: int = 1) -> tuple[Params, StepStats]:
    """Signed outer displacement ``sign * beta * mean(theta' - theta)``; sign is -1 in literal mode."""
    results = _map_tasks(lambda ep, tp: _reptile_task(init, ep, inner, tp), batch.episodes, tape, threads)
    sign = -1.0 if outer.reptile_literal_sign else 1.0
    delta = {k: sign * (outer.beta * _ordered_mean([r[0][k] for r in results])) for k in init}
    stats = StepStats(float(np.mean([r[1] for r in results])), float(np.mean([r[2] for r in results])))
    return delta, stats


def reptile_meta_step(init: Params, batch: MetaBatch, inner: InnerConfig, outer: OuterConfig,
                      tape: Tape | None = None, threads: int = 1) -> tuple[Params, StepStats]:
    """Move toward the mean adapted parameters; the literal-sign mode moves away instead."""
    delta, stats = reptile_delta(init, batch, inner, outer, tape, threads)
    return {k: init[k] + delta[k] for k in init}, stats


def _check_shared_class_count(batch: MetaBatch) -> int:
    counts = {ep.n_way for ep in batch.episodes}
    if len(counts) != 1 or batch.n_way not in counts:
        raise ValidationError(f"meta-batch mixes class counts {sorted(counts)} (declared {batch.n_way})")
    return batch.n_way


def _hidra_params(backbone: Params, phi: MasterNeuron, n_way: int) -> Params:
    params = dict(backbone)
    params[HEAD_WEIGHT] = np.tile(phi.weights, (n_way, 1))
    params[HEAD_BIAS] = np.full(n_way, phi.bias)
    return params


def hidra_meta_step(backbone: Params, phi: MasterNeuron, batch: MetaBatch, inner: InnerConfig,
                    outer: OuterConfig, adam: AdamState | None, tape: Tape | None = None,
                    threads: int = 1) -> tuple[Params, MasterNeuron, StepStats]:
    """One HIDRA meta-iteration with the head's outer state kept in master space.

    The replicated head gets a MAML meta-gradient per neuron; its row mean is the
    master neuron's gradient, which for a plain SGD outer step is the same as updating
    every neuron and averaging them afterwards.
    """
    n_way = _check_shared_class_count(batch)
    params = _hidra_params(backbone, phi, n_way)
    results = _map_tasks(lambda ep, tp: task_meta_gradient(params, ep, inner, tp), batch.episodes, tape, threads)
    # collapse each task's head gradient before averaging over tasks, so that the
    # result does not depend on how any episode ordered its classes
    per_task = []
    for g, _, _ in results:
        mg = {k: g[k] for k in backbone}
        mg["phi.weight"] = row_mean(g[HEAD_WEIGHT])
        mg["phi.bias"] = row_mean(g[HEAD_BIAS][:, None])
        per_task.append(mg)
    master_grads = {k: _ordered_mean([mg[k] for mg in per_task]) for k in per_task[0]}
    stats = StepStats(float(np.mean([r[1] for r in results])), float(np.mean([r[2] for r in results])))
    master = dict(backbone)
    master["phi.weight"] = phi.weights
    master["phi.bias"] = np.array([phi.bias])
    new = _outer_update(master, master_grads, outer, adam)
    new_phi = MasterNeuron(new.pop("phi.weight"), float(new.pop("phi.bias")[0]))
    return new, new_phi, stats


def hidra_meta_step_literal(backbone: Params, phi: MasterNeuron, batch: MetaBatch, inner: InnerConfig,
                            beta: float, tape: Tape | None = None) -> tuple[Params, MasterNeuron]:
    """Replica-space HIDRA with a plain SGD outer step: update every neuron, then average."""
    n_way = _check_shared_class_count(batch)
    params = _hidra_params(backbone, phi, n_way)
    grads, _ = meta_gradient(params, batch, inner, False, tape)
    updated = {k: params[k] - beta * grads[k] for k in params}
    head = DynamicHead(updated.pop(HEAD_WEIGHT), updated.pop(HEAD_BIAS))
    return updated, aggregate_head(head)


# ---- training driver ---------------------------------------------------------

LOG_COLUMNS = ("iteration", "c_b", "train_loss", "train_acc", "val_loss", "val_acc", "wall_ms")


@dataclass(frozen=True)
class TrainConfig:
    method: str
    backbone: BackboneSpec
    inner: InnerConfig
    outer: OuterConfig
    batch_size: int = 4
    n_range: tuple[int, int] = (5, 5)
    k_shot: int = 5
    q_query: int = 15
    checkpoint_every: int = 0
    val_every: int = 0
    val_tasks: int = 16
    log_wall_time: bool = False

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValidationError(f"unknown method {self.method!r}")
        if self.method != "hidra" and self.n_range[0] != self.n_range[1]:
            raise ValidationError("static head requires fixed N")


@dataclass
class TrainResult:
    model: Model
    log: list[dict]


def init_model(cfg: TrainConfig, seed: int) -> Model:
    backbone = init_backbone(cfg.backbone, (seed, 0))
    w = cfg.backbone.feature_width
    if cfg.method == "hidra":
        return Model(backbone, master=init_master(w, (seed, 1)), method="hidra")
    return Model(backbone, head=init_head(w, cfg.n_range[0], (seed, 1)), method=cfg.method)


def validation_metrics(model: Model, pool: ClassPool, n_way: int, k_shot: int, q_query: int,
                       inner: InnerConfig, n_tasks: int, seed) -> tuple[float, float]:
    """Mean post-adaptation query loss/accuracy on freshly sampled episodes."""
    tape = Tape()
    params = model.params(n_way)
    losses, accs = [], []
    for t in range(n_tasks):
        ep = sample_episode(pool, n_way, k_shot, q_query, (*np.atleast_1d(seed), t))
        mark = tape.mark()
        adapted = inner_adapt(to_tape(params, tape), ep, inner, tape, track_higher_order=False)
        with tape.no_record():
            loss, logits = episode_loss(adapted, tape.constant(ep.x_test), ep.y_test)
        losses.append(float(loss.value))
        accs.append(_accuracy(logits.value, ep.y_test))
        tape.truncate(mark)
    return float(np.mean(losses)), float(np.mean(accs))


def train_loop(cfg: TrainConfig, pools: Mapping[str, ClassPool], seed: int, threads: int = 1,
               on_checkpoint: Callable[[Model, int], None] | None = None,
               init: Model | None = None) -> TrainResult:
    model = init if init is not None else init_model(cfg, seed)
    train_pool = pools["train"]
    val_pool = pools.get("validation")
    adam = AdamState()
    tape = Tape()
    backbone = dict(model.backbone.params)
    head = model.head
    phi = model.master
    log = []
    for it in range(1, cfg.outer.iterations + 1):
        start = time.perf_counter()
        batch = sample_meta_batch(train_pool, cfg.batch_size, cfg.n_range, cfg.k_shot, cfg.q_query, (seed, 2, it))
        if cfg.method == "hidra":
            backbone, phi, stats = hidra_meta_step(backbone, phi, batch, cfg.inner, cfg.outer, adam, tape, threads)
        else:
            params = dict(backbone, **{HEAD_WEIGHT: head.weights, HEAD_BIAS: head.biases})
            if cfg.method == "maml":
                params, stats = maml_meta_step(params, batch, cfg.inner, cfg.outer, adam, tape, threads)
            elif cfg.method == "fomaml":
                params, stats = fomaml_meta_step(params, batch, cfg.inner, cfg.outer, adam, tape, threads)
            else:
                params, stats = reptile_meta_step(params, batch, cfg.inner, cfg.outer, tape, threads)
            head = DynamicHead(params.pop(HEAD_WEIGHT), params.pop(HEAD_BIAS))
            backbone = params
        model = Model(Backbone(cfg.backbone, backbone), head=head, master=phi, method=cfg.method)

        row = {"iteration": it, "c_b": batch.n_way, "train_loss": stats.loss, "train_acc": stats.acc,
               "val_loss": None, "val_acc": None, "wall_ms": None}
        if (cfg.val_every and it % cfg.val_every == 0 and val_pool is not None
                and val_pool.n_classes >= batch.n_way):
            row["val_loss"], row["val_acc"] = validation_metrics(
                model, val_pool, batch.n_way, cfg.k_shot, cfg.q_query, cfg.inner, cfg.val_tasks, (seed, 3, it))
        if cfg.log_wall_time:
            row["wall_ms"] = (time.perf_counter() - start) * 1000.0
        log.append(row)
        if on_checkpoint is not None and cfg.checkpoint_every and it % cfg.checkpoint_every == 0:
            on_checkpoint(model, it)
    return TrainResult(model, log)


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_train_log(log: list[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(LOG_COLUMNS)
        for row in log:
            w.writerow([_fmt(row[c]) for c in LOG_COLUMNS])
