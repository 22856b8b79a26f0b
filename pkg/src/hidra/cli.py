"""Command-line entry point: gen-data, train, eval, probe, export-weights."""
from __future__ import annotations

import argparse
import json
import sys
from dataclasses import fields
from pathlib import Path

from . import config as C
from .episodes import SyntheticSpec, gen_synthetic, load_pool, split_pool, write_pool
from .errors import HidraError, ValidationError
from .evaluation import (EvalConfig, export_head_weights, neuron_copy_probe, sweep_eval, write_probe_csv,
                         write_report_csv)
from .meta_learners import InnerConfig, OuterConfig, TrainConfig, train_loop, write_train_log
from .network import BackboneSpec, DynamicHead, instantiate_head, load_params, save_params

POOL_FILES = {"train": "train.fsds", "validation": "val.fsds", "test": "test.fsds"}
COMMANDS = ("gen-data", "train", "eval", "probe", "export-weights")


def _build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat key = value config file")
    for f in fields(C.RunConfig):
        flag = "--" + f.name.replace("_", "-")
        if f.type == "bool":
            common.add_argument(flag, dest=f.name, default=None, type=lambda s, k=f.name: C.parse_value(k, s),
                                metavar="BOOL")
        else:
            common.add_argument(flag, dest=f.name, default=None)
    # short aliases used in the docs
    common.add_argument("--nway", dest="eval_nway", default=None, help="alias of --eval-nway")
    common.add_argument("--steps", dest="inner_steps", default=None, help="alias of --inner-steps")

    parser = argparse.ArgumentParser(prog="hidra", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sub.add_parser(name, parents=[common])
    return parser


def _overrides(ns: argparse.Namespace) -> dict[str, object]:
    out = {}
    for f in fields(C.RunConfig):
        v = getattr(ns, f.name, None)
        if v is None:
            continue
        out[f.name] = v if not isinstance(v, str) else C.parse_value(f.name, v)
    return out


def _load_pools(cfg: C.RunConfig, roles) -> dict:
    pools = {}
    for role in roles:
        path = cfg.data_dir / POOL_FILES[role]
        if path.is_file():
            pools[role] = load_pool(path, role)
    return pools


def cmd_gen_data(cfg: C.RunConfig) -> None:
    counts = C.parse_split(cfg.split)
    spec = SyntheticSpec(cfg.features, cfg.classes, cfg.instances_per_class, cfg.cluster_std,
                         cfg.center_scale, cfg.seed)
    out = Path(cfg.out)
    for role, pool in split_pool(gen_synthetic(spec), counts).items():
        write_pool(pool, out / POOL_FILES[role])
        print(f"{role}: {pool.n_classes} classes -> {out / POOL_FILES[role]}")


def train_config(cfg: C.RunConfig, input_dim: int) -> TrainConfig:
    return TrainConfig(
        method=cfg.method,
        backbone=BackboneSpec(input_dim, C.parse_int_list(cfg.hidden)),
        inner=InnerConfig(cfg.alpha, cfg.inner_steps),
        outer=OuterConfig(cfg.beta, cfg.adam_b1, cfg.adam_b2, cfg.adam_eps, cfg.iterations, cfg.method,
                          reptile_literal_sign=cfg.reptile_literal_sign),
        batch_size=cfg.batch_size,
        n_range=C.parse_n_range(cfg.n_way),
        k_shot=cfg.k_shot,
        q_query=cfg.q_query,
        checkpoint_every=cfg.checkpoint_every,
        val_every=cfg.val_every,
        val_tasks=cfg.val_tasks,
        log_wall_time=cfg.log_wall_time,
    )


def cmd_train(cfg: C.RunConfig) -> None:
    pools = _load_pools(cfg, ("train", "validation"))
    train_pool = pools["train"]
    lo, hi = C.parse_n_range(cfg.n_way)
    if hi > train_pool.n_classes:
        raise ValidationError(f"n_way up to {hi} exceeds the {train_pool.n_classes} training classes")
    tcfg = train_config(cfg, train_pool.feature_dim)
    out = Path(cfg.out)

    def checkpoint(model, it):
        save_params(model, out / f"checkpoint_{it:06d}.bin")

    result = train_loop(tcfg, pools, cfg.seed, cfg.threads, checkpoint)
    write_train_log(result.log, out / "train_log.csv")
    save_params(result.model, out / "checkpoint_final.bin")
    last = result.log[-1] if result.log else None
    summary = f"final train_acc={last['train_acc']:.4f}" if last else "no iterations run"
    print(f"trained {cfg.method} for {cfg.iterations} iterations; {summary}")


def _eval_config(cfg: C.RunConfig, n_ways) -> EvalConfig:
    return EvalConfig(cfg.eval_tasks, tuple(n_ways), cfg.k_shot, cfg.q_query, cfg.eval_steps,
                      cfg.effective_eval_alpha, cfg.seed)


def cmd_eval(cfg: C.RunConfig) -> None:
    model = load_params(cfg.checkpoint_path)
    pool = _load_pools(cfg, ("test",))["test"]
    n_ways = C.parse_n_list(cfg.eval_nway)
    too_big = [n for n in n_ways if n > pool.n_classes]
    if too_big:
        raise ValidationError(f"eval_nway {too_big} exceeds the {pool.n_classes} test classes")
    if not model.is_dynamic:
        bad = [n for n in n_ways if n != model.head.class_count]
        if bad:
            print(f"warning: static {model.head.class_count}-way head cannot evaluate N={bad}; "
                  f"writing flagged chance-level rows", file=sys.stderr)
    reports = sweep_eval([(cfg.checkpoint_path.stem, model)], pool, _eval_config(cfg, n_ways), cfg.threads,
                         on_mismatch="flag")
    write_report_csv(reports, Path(cfg.out) / "eval_report.csv")
    for row in reports[0].rows:
        if row.step == cfg.eval_steps:
            print(f"N={row.N} step={row.step} acc={row.mean_acc:.4f} +/- {row.ci95:.4f} {row.flag}".rstrip())


def cmd_probe(cfg: C.RunConfig) -> None:
    model = load_params(cfg.checkpoint_path)
    if model.is_dynamic:
        raise ValidationError("checkpoint has a master neuron, not a static head; "
                              "evaluate it with `eval --nway N` to instantiate a head instead")
    pool = _load_pools(cfg, ("test",))["test"]
    C_ = model.head.class_count
    result = neuron_copy_probe(model, pool, _eval_config(cfg, (C_,)), cfg.checkpoint_path.stem, cfg.threads)
    out = Path(cfg.out)
    write_probe_csv(result, out / "probe_report.csv")
    export_head_weights(model.head, out / "head_weights.csv")
    print(f"baseline acc={result.baseline_acc:.4f}; neuron-copy mean={result.probe_mean:.4f}")


def cmd_export_weights(cfg: C.RunConfig) -> None:
    model = load_params(cfg.checkpoint_path)
    head = model.head if model.head is not None else instantiate_head(model.master, 1)
    export_head_weights(head, Path(cfg.out) / "head_weights.csv")
    print(f"wrote {head.class_count} x {head.weights.shape[1]} head to {Path(cfg.out) / 'head_weights.csv'}")


HANDLERS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "probe": cmd_probe,
    "export-weights": cmd_export_weights,
}


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        cfg = C.resolve(args.config, _overrides(args), inherit=args.command not in ("train", "gen-data"))
        C.validate(cfg, args.command)
        Path(cfg.out).mkdir(parents=True, exist_ok=True)
        C.write_snapshot(cfg, Path(cfg.out) / C.SNAPSHOT_NAME, args.command)
        HANDLERS[args.command](cfg)
    except (HidraError, OSError) as e:
        print(json.dumps({"error": type(e).__name__, "command": args.command, "message": str(e)}), file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
