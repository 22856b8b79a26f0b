"""Flat run configuration: defaults < preset < config file < command-line flags."""
from __future__ import annotations

import configparser
import re
from dataclasses import dataclass, fields, replace
from pathlib import Path

from .errors import ValidationError

PRESETS: dict[str, dict[str, object]] = {
    # desk-scale stand-ins for the published Omniglot / Miniimagenet hyperparameters
    "omniglot": {"alpha": 0.4, "inner_steps": 1, "batch_size": 32, "beta": 1e-3, "eval_steps": 3},
    "miniimagenet": {"alpha": 0.01, "inner_steps": 5, "batch_size": 4, "beta": 1e-3, "eval_steps": 10},
}

SECTION = "run"


@dataclass(frozen=True)
class RunConfig:
    method: str = "hidra"
    preset: str = ""
    seed: int = 0
    out: str = "runs/default"
    threads: int = 1
    data: str = ""
    # synthetic data generation
    features: int = 32
    classes: int = 70
    split: str = "50/0/20"
    instances_per_class: int = 40
    cluster_std: float = 1.0
    center_scale: float = 1.0
    # model and meta-training
    hidden: str = "64,64"
    alpha: float = 0.4
    inner_steps: int = 1
    beta: float = 1e-3
    adam_b1: float = 0.9
    adam_b2: float = 0.999
    adam_eps: float = 1e-8
    iterations: int = 2000
    batch_size: int = 4
    n_way: str = "2-6"
    k_shot: int = 5
    q_query: int = 15
    checkpoint_every: int = 500
    val_every: int = 100
    val_tasks: int = 16
    reptile_literal_sign: bool = False
    log_wall_time: bool = False
    # evaluation
    checkpoint: str = ""
    eval_nway: str = "2-10"
    eval_tasks: int = 500
    eval_steps: int = 3
    eval_alpha: float = 0.0  # 0 means "same as alpha"

    @property
    def data_dir(self) -> Path:
        return Path(self.data or self.out)

    @property
    def checkpoint_path(self) -> Path:
        return Path(self.checkpoint) if self.checkpoint else Path(self.out) / "checkpoint_final.bin"

    @property
    def effective_eval_alpha(self) -> float:
        return self.eval_alpha if self.eval_alpha > 0 else self.alpha


FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}


def parse_value(key: str, raw: str):
    kind = FIELD_TYPES[key]
    raw = raw.strip()
    try:
        if kind == "bool":
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
    except ValueError:
        raise ValidationError(f"{key}: cannot parse {raw!r} as {kind}") from None
    return raw


def format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def read_config_file(path) -> dict[str, object]:
    text = Path(path).read_text()
    if not re.search(r"^\s*\[", text, flags=re.M):
        text = f"[{SECTION}]\n" + text
    cp = configparser.ConfigParser(interpolation=None)
    cp.read_string(text)
    out = {}
    unknown = []
    for section in cp.sections():
        for key, raw in cp.items(section):
            key = key.replace("-", "_")
            if key not in FIELD_TYPES:
                unknown.append(key)
                continue
            out[key] = parse_value(key, raw)
    if unknown:
        raise ValidationError(f"{path}: unknown keys {sorted(unknown)}")
    return out


def resolve(config_path: str | None, overrides: dict[str, object], inherit: bool = False) -> RunConfig:
    """Merge defaults, preset, config file and flags (later wins).

    With ``inherit`` an existing ``config.resolved`` in the output directory
    sits just above the defaults, so commands run after ``train`` keep the
    training settings in their own snapshot.
    """
    file_values = read_config_file(config_path) if config_path else {}
    given = {k: v for k, v in overrides.items() if v is not None}
    cfg = RunConfig()
    if inherit:
        previous = Path(given.get("out") or file_values.get("out") or cfg.out) / SNAPSHOT_NAME
        if previous.is_file():
            cfg = replace(cfg, **read_config_file(previous))
    preset = given.get("preset") or file_values.get("preset") or ""
    if preset:
        if preset not in PRESETS:
            raise ValidationError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
        cfg = replace(cfg, **PRESETS[preset])
    return replace(cfg, **{**file_values, **given})


SNAPSHOT_NAME = "config.resolved"


def write_snapshot(cfg: RunConfig, path, command: str) -> None:
    lines = [f"# resolved configuration written by `{command}`", f"[{SECTION}]"]
    lines += [f"{f.name} = {format_value(getattr(cfg, f.name))}" for f in fields(RunConfig)]
    Path(path).write_text("\n".join(lines) + "\n")


def parse_n_range(text: str) -> tuple[int, int]:
    """``"5"`` -> (5, 5); ``"2-6"`` -> (2, 6)."""
    parts = text.strip().split("-")
    try:
        if len(parts) == 1:
            n = int(parts[0])
            return n, n
        if len(parts) == 2:
            return int(parts[0]), int(parts[1])
    except ValueError:
        pass
    raise ValidationError(f"cannot parse class range {text!r}")


def parse_n_list(text: str) -> tuple[int, ...]:
    """``"2-10"``, ``"2,4,8"`` or a mix such as ``"2-4,8"``."""
    out = []
    for part in text.split(","):
        lo, hi = parse_n_range(part)
        out.extend(range(lo, hi + 1))
    return tuple(out)


def parse_int_list(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(p) for p in text.split(",") if p.strip())
    except ValueError:
        raise ValidationError(f"cannot parse integer list {text!r}") from None


def parse_split(text: str) -> tuple[int, int, int]:
    try:
        parts = tuple(int(p) for p in text.split("/"))
    except ValueError:
        parts = ()
    if len(parts) != 3 or min(parts) < 0:
        raise ValidationError(f"split must look like train/val/test class counts, got {text!r}")
    return parts


def validate(cfg: RunConfig, command: str) -> None:
    """Raise one ValidationError listing every problem found."""
    problems = []

    def check(ok: bool, msg: str) -> None:
        if not ok:
            problems.append(msg)

    def attempt(fn, *args):
        try:
            return fn(*args)
        except ValidationError as e:
            problems.append(str(e))
            return None

    check(cfg.threads >= 1, "threads must be >= 1")
    if command == "gen-data":
        split = attempt(parse_split, cfg.split)
        check(cfg.features >= 1, "features must be >= 1")
        check(cfg.classes >= 2, "classes must be >= 2")
        check(cfg.instances_per_class >= 1, "instances_per_class must be >= 1")
        check(cfg.cluster_std >= 0, "cluster_std must be >= 0")
        check(cfg.center_scale > 0, "center_scale must be > 0")
        if split is not None:
            check(sum(split) <= cfg.classes, f"split {cfg.split} uses more than {cfg.classes} classes")
    if command == "train":
        check(cfg.method in ("maml", "fomaml", "reptile", "hidra"), f"unknown method {cfg.method!r}")
        rng = attempt(parse_n_range, cfg.n_way)
        if rng is not None:
            check(rng[0] >= 2 and rng[1] >= rng[0], f"n_way range {cfg.n_way} must satisfy 2 <= min <= max")
            if cfg.method != "hidra":
                check(rng[0] == rng[1], "static head requires fixed N")
        widths = attempt(parse_int_list, cfg.hidden)
        if widths is not None:
            check(len(widths) > 0 and min(widths, default=0) >= 1, "hidden must list positive layer widths")
        check(cfg.alpha > 0, "alpha must be > 0")
        check(cfg.beta > 0, "beta must be > 0")
        check(cfg.inner_steps >= 0, "inner_steps must be >= 0")
        check(cfg.iterations >= 0, "iterations must be >= 0")
        check(cfg.batch_size >= 1, "batch_size must be >= 1")
        check(0 <= cfg.adam_b1 < 1 and 0 <= cfg.adam_b2 < 1, "adam_b1 and adam_b2 must lie in [0, 1)")
        check(cfg.checkpoint_every >= 0, "checkpoint_every must be >= 0")
        check((cfg.data_dir / "train.fsds").is_file(), f"training pool {cfg.data_dir / 'train.fsds'} not found")
    if command in ("train", "eval", "probe"):
        check(cfg.k_shot >= 1, "k_shot must be >= 1")
        check(cfg.q_query >= 1, "q_query must be >= 1")
    if command in ("eval", "probe"):
        ns = attempt(parse_n_list, cfg.eval_nway)
        if ns is not None:
            check(len(ns) > 0 and min(ns) >= 2, "eval_nway values must be >= 2")
        check(cfg.eval_tasks >= 1, "eval_tasks must be >= 1")
        check(cfg.eval_steps >= 0, "eval_steps must be >= 0")
        check((cfg.data_dir / "test.fsds").is_file(), f"test pool {cfg.data_dir / 'test.fsds'} not found")
    if command in ("eval", "probe", "export-weights"):
        check(cfg.checkpoint_path.is_file(), f"checkpoint {cfg.checkpoint_path} not found")
    if problems:
        raise ValidationError("; ".join(problems))
