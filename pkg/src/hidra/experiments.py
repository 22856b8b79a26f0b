"""Desk-scale experiments on a synthetic Gaussian-cluster pool.

``run_desk_sweep`` trains one HIDRA initialization over a range of class counts and
one fixed-N MAML baseline per evaluated N, then evaluates all of them on held-out
classes. ``run_redundancy_probe`` copies each output neuron of a trained MAML head
over the others and measures what that costs.
"""
from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .episodes import ClassPool, SyntheticSpec, gen_synthetic, split_pool
from .evaluation import (EvalConfig, EvalReport, ProbeResult, evaluate_init, export_head_weights,
                         neuron_copy_probe, pairwise_cosine, write_probe_csv, write_report_csv)
from .meta_learners import InnerConfig, OuterConfig, TrainConfig, train_loop
from .network import BackboneSpec, Model, save_params


@dataclass(frozen=True)
class DeskConfig:
    # data
    feature_dim: int = 32
    n_classes: int = 70
    split: tuple[int, int, int] = (50, 0, 20)
    instances_per_class: int = 40
    cluster_std: float = 0.85
    center_scale: float = 1.0
    data_seed: int = 0
    # training, shared by every method
    hidden: tuple[int, ...] = (128,)
    alpha: float = 0.4
    inner_steps: int = 2
    beta: float = 1e-4
    iterations: int = 2000
    batch_size: int = 4
    hidra_range: tuple[int, int] = (2, 6)
    k_shot: int = 5
    q_query: int = 15
    train_seed: int = 0
    # evaluation
    eval_ways: tuple[int, ...] = tuple(range(2, 11))
    maml_ways: tuple[int, ...] = tuple(range(2, 11))
    probe_way: int = 5
    eval_tasks: int = 500
    eval_steps: int = 10
    eval_seed: int = 1
    threads: int = 1

    def pools(self) -> dict[str, ClassPool]:
        spec = SyntheticSpec(self.feature_dim, self.n_classes, self.instances_per_class, self.cluster_std,
                             self.center_scale, self.data_seed)
        return split_pool(gen_synthetic(spec), self.split)

    def train_config(self, method: str, n_range: tuple[int, int]) -> TrainConfig:
        return TrainConfig(
            method=method,
            backbone=BackboneSpec(self.feature_dim, self.hidden),
            inner=InnerConfig(self.alpha, self.inner_steps),
            outer=OuterConfig(beta=self.beta, iterations=self.iterations, method=method),
            batch_size=self.batch_size,
            n_range=n_range,
            k_shot=self.k_shot,
            q_query=self.q_query,
        )

    def eval_config(self, n_ways) -> EvalConfig:
        return EvalConfig(self.eval_tasks, tuple(n_ways), self.k_shot, self.q_query, self.eval_steps,
                          self.alpha, self.eval_seed)


@dataclass
class Comparison:
    N: int
    hidra_acc: float
    hidra_best: float
    maml_acc: float | None
    maml_best: float | None

    @property
    def chance(self) -> float:
        return 1.0 / self.N

    @property
    def margin_over_chance(self) -> float:
        return self.hidra_acc - self.chance

    @property
    def gap(self) -> float | None:
        """MAML minus HIDRA at the final adaptation step (positive means MAML is ahead)."""
        return None if self.maml_acc is None else self.maml_acc - self.hidra_acc


@dataclass
class DeskSweep:
    config: DeskConfig
    hidra: EvalReport
    maml: dict[int, EvalReport]
    models: dict[str, Model] = field(default_factory=dict)
    seconds: float = 0.0

    def comparisons(self) -> list[Comparison]:
        out = []
        for N in self.config.eval_ways:
            m = self.maml.get(N)
            out.append(Comparison(N, self.hidra.final(N).mean_acc, self.hidra.best(N).mean_acc,
                                  m.final(N).mean_acc if m else None, m.best(N).mean_acc if m else None))
        return out


SUMMARY_COLUMNS = ("N", "chance", "hidra_acc", "hidra_best", "maml_acc", "maml_best", "maml_minus_hidra")


def write_summary_csv(sweep: DeskSweep, path) -> None:
    def f(v):
        return "" if v is None else f"{v:.6f}"

    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SUMMARY_COLUMNS)
        for c in sweep.comparisons():
            w.writerow([c.N, f(c.chance), f(c.hidra_acc), f(c.hidra_best), f(c.maml_acc), f(c.maml_best),
                        f(c.gap)])


def run_desk_sweep(cfg: DeskConfig = DeskConfig(), out_dir=None,
                   log: Callable[[str], None] = lambda s: None) -> DeskSweep:
    start = time.perf_counter()
    pools = cfg.pools()
    test = pools["test"]

    t = time.perf_counter()
    hidra_model = train_loop(cfg.train_config("hidra", cfg.hidra_range), pools, cfg.train_seed, cfg.threads).model
    log(f"hidra trained in {time.perf_counter() - t:.0f}s")
    hidra = evaluate_init(hidra_model, test, cfg.eval_config(cfg.eval_ways), "hidra", cfg.threads)
    models = {"hidra": hidra_model}

    maml = {}
    for N in cfg.maml_ways:
        t = time.perf_counter()
        model = train_loop(cfg.train_config("maml", (N, N)), pools, cfg.train_seed, cfg.threads).model
        maml[N] = evaluate_init(model, test, cfg.eval_config((N,)), f"maml{N}", cfg.threads)
        models[f"maml{N}"] = model
        log(f"maml N={N}: acc {maml[N].final(N).mean_acc:.4f} ({time.perf_counter() - t:.0f}s)")

    sweep = DeskSweep(cfg, hidra, maml, models, time.perf_counter() - start)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_report_csv([hidra] + [maml[N] for N in cfg.maml_ways], out / "eval_report.csv")
        write_summary_csv(sweep, out / "summary.csv")
        for name, model in models.items():
            save_params(model, out / f"{name}.bin")
    return sweep


@dataclass
class RedundancyProbe:
    probe: ProbeResult
    cosines: np.ndarray
    row_norms: np.ndarray

    @property
    def max_abs_delta(self) -> float:
        return float(max(abs(a - self.probe.baseline_acc) for a in self.probe.neuron_accs))


def run_redundancy_probe(cfg: DeskConfig = DeskConfig(), model: Model | None = None, out_dir=None,
                         log: Callable[[str], None] = lambda s: None) -> RedundancyProbe:
    """Neuron-copy probe on a fixed ``probe_way`` MAML head (trained here unless given)."""
    pools = cfg.pools()
    if model is None:
        model = train_loop(cfg.train_config("maml", (cfg.probe_way, cfg.probe_way)), pools, cfg.train_seed,
                           cfg.threads).model
    probe = neuron_copy_probe(model, pools["test"], cfg.eval_config((cfg.probe_way,)), "maml", cfg.threads)
    rows = np.column_stack([model.head.weights, model.head.biases])
    result = RedundancyProbe(probe, pairwise_cosine(rows), np.linalg.norm(rows, axis=1))
    log(f"baseline {probe.baseline_acc:.4f}, neuron copies {[round(a, 4) for a in probe.neuron_accs]}, "
        f"cosine min {result.cosines.min():.3f}")
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_probe_csv(probe, out / "probe_report.csv")
        export_head_weights(model.head, out / "head_weights.csv")
    return result
