"""Accuracy aggregation over sampled test episodes, N-way sweeps, and the neuron-copy probe."""
from __future__ import annotations

import csv
import hashlib
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .autodiff import Tape
from .episodes import ClassPool, sample_episode
from .errors import CapabilityError, ValidationError
from .meta_learners import InnerConfig, episode_loss, inner_adapt
from .network import DynamicHead, Model, copy_neuron_head, to_tape

REPORT_COLUMNS = ("init_id", "method", "N", "step", "mean_acc", "std_acc", "ci95", "n_tasks", "seed",
                  "flag", "is_best")
PROBE_COLUMNS = ("init_id", "neuron", "N", "step", "mean_acc", "std_acc", "ci95", "n_tasks", "seed",
                 "delta_vs_baseline")


@dataclass(frozen=True)
class EvalConfig:
    n_tasks: int = 500
    n_ways: tuple[int, ...] = tuple(range(2, 11))
    k_shot: int = 5
    q_query: int = 15
    eval_steps: int = 3
    eval_alpha: float = 0.4
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "n_ways", tuple(int(n) for n in self.n_ways))
        if self.n_tasks < 1:
            raise ValidationError(f"n_tasks must be >= 1, got {self.n_tasks}")
        if not self.n_ways or min(self.n_ways) < 2:
            raise ValidationError(f"every N must be >= 2, got {self.n_ways}")
        if self.eval_steps < 0:
            raise ValidationError(f"eval_steps must be >= 0, got {self.eval_steps}")

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(asdict(self), sort_keys=True).encode()).hexdigest()[:12]


@dataclass
class EvalRow:
    N: int
    step: int
    mean_acc: float
    std_acc: float
    ci95: float
    n_tasks: int
    n_predictions: int = 0
    flag: str = ""


@dataclass
class EvalReport:
    init_id: str
    method: str
    seed: int
    config_hash: str
    rows: list[EvalRow] = field(default_factory=list)

    def acc(self, N: int, step: int) -> float:
        for r in self.rows:
            if r.N == N and r.step == step:
                return r.mean_acc
        raise KeyError((N, step))

    def row(self, N: int, step: int) -> EvalRow:
        for r in self.rows:
            if r.N == N and r.step == step:
                return r
        raise KeyError((N, step))

    def best(self, N: int) -> EvalRow:
        """Row with the highest mean accuracy over adaptation steps (earliest on ties)."""
        rows = [r for r in self.rows if r.N == N]
        return max(rows, key=lambda r: (r.mean_acc, -r.step))

    def final(self, N: int) -> EvalRow:
        return max((r for r in self.rows if r.N == N), key=lambda r: r.step)


def predict(logits: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Argmax with exact ties broken uniformly at random."""
    tied = logits == logits.max(axis=1, keepdims=True)
    keys = np.where(tied, rng.random(logits.shape), -1.0)
    return keys.argmax(axis=1)


def episode_accuracies(model: Model, pool: ClassPool, N: int, cfg: EvalConfig, index: int) -> np.ndarray:
    """Query accuracy after 0..eval_steps adaptation steps on the ``index``-th episode for N."""
    episode = sample_episode(pool, N, cfg.k_shot, cfg.q_query, (cfg.seed, N, index))
    rng = np.random.default_rng((cfg.seed, N, index, 1))
    tape = Tape()
    params = to_tape(model.params(N), tape)
    x_test = tape.constant(episode.x_test)
    labels = episode.y_test.argmax(axis=1)
    step_cfg = InnerConfig(cfg.eval_alpha, 1)
    out = np.empty(cfg.eval_steps + 1)
    for s in range(cfg.eval_steps + 1):
        if s:
            params = inner_adapt(params, episode, step_cfg, tape, track_higher_order=False)
        with tape.no_record():
            _, logits = episode_loss(params, x_test, episode.y_test)
        out[s] = np.mean(predict(logits.value, rng) == labels)
    return out


def _summarize(N: int, accs: np.ndarray, cfg: EvalConfig) -> list[EvalRow]:
    n = accs.shape[0]
    rows = []
    for s in range(accs.shape[1]):
        col = accs[:, s]
        std = float(col.std(ddof=1)) if n > 1 else 0.0
        rows.append(EvalRow(N, s, float(col.mean()), std, 1.96 * std / np.sqrt(n), n, n * N * cfg.q_query))
    return rows


def evaluate_init(model: Model, pool: ClassPool, cfg: EvalConfig, init_id: str = "init", threads: int = 1,
                  on_mismatch: str = "raise") -> EvalReport:
    """Accuracy statistics per (N, step).

    A static head can only be evaluated at its own class count. With
    ``on_mismatch="flag"`` other N get a flagged chance-level row instead of an error.
    """
    report = EvalReport(init_id, model.method, cfg.seed, cfg.digest())
    for N in cfg.n_ways:
        if not model.is_dynamic and N != model.head.class_count:
            C = model.head.class_count
            if on_mismatch != "flag":
                raise CapabilityError(f"static head has {C} output neurons and cannot evaluate {N}-way tasks")
            report.rows.extend(EvalRow(N, s, 1.0 / N, 0.0, 0.0, 0, 0, f"static_head_C={C}")
                               for s in range(cfg.eval_steps + 1))
            continue
        if threads > 1:
            with ThreadPoolExecutor(max_workers=threads) as ex:
                accs = list(ex.map(lambda i: episode_accuracies(model, pool, N, cfg, i), range(cfg.n_tasks)))
        else:
            accs = [episode_accuracies(model, pool, N, cfg, i) for i in range(cfg.n_tasks)]
        report.rows.extend(_summarize(N, np.stack(accs), cfg))
    return report


def sweep_eval(inits: list[tuple[str, Model]], pool: ClassPool, cfg: EvalConfig, threads: int = 1,
               on_mismatch: str = "raise") -> list[EvalReport]:
    return [evaluate_init(m, pool, cfg, name, threads, on_mismatch) for name, m in inits]


def _fmt(v) -> str:
    return f"{v:.17g}" if isinstance(v, float) else str(v)


def write_report_csv(reports: list[EvalReport], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(REPORT_COLUMNS)
        for rep in reports:
            best = {N: rep.best(N).step for N in {r.N for r in rep.rows}}
            for r in rep.rows:
                w.writerow([rep.init_id, rep.method, r.N, r.step, _fmt(r.mean_acc), _fmt(r.std_acc),
                            _fmt(r.ci95), r.n_tasks, rep.seed, r.flag, int(best[r.N] == r.step)])


def read_report_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


@dataclass
class ProbeResult:
    baseline: EvalReport
    neurons: list[EvalReport]
    step: int

    @property
    def neuron_accs(self) -> list[float]:
        return [r.acc(r.rows[0].N, self.step) for r in self.neurons]

    @property
    def baseline_acc(self) -> float:
        return self.baseline.acc(self.baseline.rows[0].N, self.step)

    @property
    def probe_mean(self) -> float:
        return float(np.mean(self.neuron_accs))


def neuron_copy_probe(model: Model, pool: ClassPool, cfg: EvalConfig, init_id: str = "init",
                      threads: int = 1) -> ProbeResult:
    """Evaluate the head with every neuron copied over all others, plus the unmodified head."""
    if model.is_dynamic:
        raise ValidationError("the neuron-copy probe needs a static head; instantiate one via --nway first")
    C = model.head.class_count
    cfg = replace(cfg, n_ways=(C,))
    baseline = evaluate_init(model, pool, cfg, init_id, threads)
    neurons = []
    for i in range(C):
        probe = replace(model, head=copy_neuron_head(model.head, i))
        neurons.append(evaluate_init(probe, pool, cfg, f"{init_id}/neuron{i}", threads))
    return ProbeResult(baseline, neurons, cfg.eval_steps)


def write_probe_csv(result: ProbeResult, path) -> None:
    init_id = result.baseline.init_id
    step = result.step
    base = result.baseline.rows[0].N
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(PROBE_COLUMNS)
        entries = [(str(i), rep) for i, rep in enumerate(result.neurons)] + [("baseline", result.baseline)]
        for name, rep in entries:
            r = rep.row(base, step)
            w.writerow([init_id, name, r.N, r.step, _fmt(r.mean_acc), _fmt(r.std_acc), _fmt(r.ci95),
                        r.n_tasks, rep.seed, _fmt(r.mean_acc - result.baseline_acc)])


def export_head_weights(head: DynamicHead, path) -> None:
    """One CSV row per output neuron: its weights followed by its bias."""
    w = head.weights.shape[1]
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh, lineterminator="\n")
        out.writerow([f"w{j}" for j in range(w)] + ["bias"])
        for row, b in zip(head.weights, head.biases):
            out.writerow([_fmt(float(v)) for v in row] + [_fmt(float(b))])


def read_head_weights(path) -> DynamicHead:
    data = np.loadtxt(Path(path), delimiter=",", skiprows=1, ndmin=2)
    return DynamicHead(data[:, :-1], data[:, -1])


def pairwise_cosine(weights: np.ndarray) -> np.ndarray:
    """Cosine similarities between all distinct pairs of rows."""
    unit = weights / np.linalg.norm(weights, axis=1, keepdims=True)
    sims = unit @ unit.T
    i, j = np.triu_indices(weights.shape[0], k=1)
    return sims[i, j]
