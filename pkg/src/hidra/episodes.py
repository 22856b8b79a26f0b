"""N-way K-shot episode construction over class pools, and the FSDS pool file format."""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import CapacityError, FormatError, ValidationError

MAGIC = b"FSDS"
FORMAT_VERSION = 1
ROLES = ("train", "validation", "test")


@dataclass(frozen=True)
class SyntheticSpec:
    feature_dim: int = 32
    n_classes: int = 70
    instances_per_class: int = 40
    cluster_std: float = 1.0
    center_scale: float = 1.0
    seed: int = 0


@dataclass
class ClassPool:
    """Per-class instance matrices keyed by class id (insertion order is the id order)."""

    classes: dict[int, np.ndarray]
    role: str = "train"
    dim: int | None = None  # only needed to describe an empty pool

    def __post_init__(self):
        if self.role not in ROLES:
            raise ValidationError(f"role must be one of {ROLES}, got {self.role!r}")

    @property
    def class_ids(self) -> list[int]:
        return list(self.classes)

    @property
    def n_classes(self) -> int:
        return len(self.classes)

    @property
    def feature_dim(self) -> int:
        for block in self.classes.values():
            return block.shape[1]
        return self.dim or 0

    def subset(self, ids, role: str) -> ClassPool:
        return ClassPool({i: self.classes[i] for i in ids}, role, self.feature_dim)

    def equals(self, other: ClassPool) -> bool:
        return (self.role == other.role and self.class_ids == other.class_ids
                and all(np.array_equal(self.classes[i], other.classes[i]) for i in self.classes))


@dataclass
class Episode:
    x_train: np.ndarray  # (N*K, F)
    y_train: np.ndarray  # (N*K, N) one-hot
    x_test: np.ndarray  # (N*Q, F)
    y_test: np.ndarray  # (N*Q, N)
    class_ids: tuple[int, ...]
    k_shot: int
    q_query: int

    @property
    def n_way(self) -> int:
        return len(self.class_ids)

    def permute_classes(self, perm) -> Episode:
        """Relabel: new column j is old column ``perm[j]``."""
        perm = list(perm)
        return Episode(self.x_train, self.y_train[:, perm], self.x_test, self.y_test[:, perm],
                       tuple(self.class_ids[p] for p in perm), self.k_shot, self.q_query)


@dataclass
class MetaBatch:
    episodes: list[Episode]
    n_way: int

    def __len__(self) -> int:
        return len(self.episodes)


def gen_synthetic(spec: SyntheticSpec, role: str = "train") -> ClassPool:
    """Isotropic Gaussian clusters with centers uniform in [-center_scale, center_scale]^F."""
    rng = np.random.default_rng(spec.seed)
    F = spec.feature_dim
    classes = {}
    for c in range(spec.n_classes):
        center = rng.uniform(-spec.center_scale, spec.center_scale, size=F)
        noise = rng.standard_normal((spec.instances_per_class, F))
        classes[c] = center + spec.cluster_std * noise
    return ClassPool(classes, role, F)


def split_pool(pool: ClassPool, counts: tuple[int, int, int]) -> dict[str, ClassPool]:
    """Cut a pool into disjoint train/validation/test pools by class-id order."""
    if sum(counts) > pool.n_classes:
        raise CapacityError(f"split {counts} needs {sum(counts)} classes, pool has {pool.n_classes}")
    ids = pool.class_ids
    out, start = {}, 0
    for role, n in zip(ROLES, counts):
        out[role] = pool.subset(ids[start:start + n], role)
        start += n
    return out


def _one_hot(labels: np.ndarray, n: int) -> np.ndarray:
    return np.eye(n)[labels]


def sample_episode(pool: ClassPool, n_way: int, k_shot: int, q_query: int, seed) -> Episode:
    if n_way < 1 or k_shot < 0 or q_query < 0:
        raise ValidationError(f"invalid episode shape N={n_way} K={k_shot} Q={q_query}")
    if pool.n_classes < n_way:
        raise CapacityError(f"pool has {pool.n_classes} classes, episode needs {n_way} "
                            f"(short by {n_way - pool.n_classes})")
    rng = np.random.default_rng(seed)
    ids = pool.class_ids
    chosen = [ids[i] for i in rng.choice(len(ids), size=n_way, replace=False)]
    xtr, xte = [], []
    for c in chosen:
        block = pool.classes[c]
        if block.shape[0] < k_shot + q_query:
            raise CapacityError(f"class {c} has {block.shape[0]} instances, episode needs "
                                f"{k_shot + q_query} (short by {k_shot + q_query - block.shape[0]})")
        idx = rng.choice(block.shape[0], size=k_shot + q_query, replace=False)
        xtr.append(block[idx[:k_shot]])
        xte.append(block[idx[k_shot:]])
    labels = np.arange(n_way)
    F = pool.feature_dim
    return Episode(
        x_train=np.concatenate(xtr) if xtr else np.zeros((0, F)),
        y_train=_one_hot(np.repeat(labels, k_shot), n_way),
        x_test=np.concatenate(xte) if xte else np.zeros((0, F)),
        y_test=_one_hot(np.repeat(labels, q_query), n_way),
        class_ids=tuple(chosen),
        k_shot=k_shot,
        q_query=q_query,
    )


def sample_meta_batch(pool: ClassPool, batch_size: int, class_range: tuple[int, int],
                      k_shot: int, q_query: int, seed) -> MetaBatch:
    """One shared class count drawn uniformly from ``class_range`` (inclusive), then the episodes."""
    lo, hi = class_range
    if lo < 2 or hi < lo:
        raise ValidationError(f"class range must satisfy 2 <= N_min <= N_max, got [{lo}, {hi}]")
    if hi > pool.n_classes:
        raise ValidationError(f"N_max={hi} exceeds the pool's {pool.n_classes} classes")
    if batch_size < 1:
        raise ValidationError(f"batch_size must be >= 1, got {batch_size}")
    rng = np.random.default_rng(seed)
    n_way = int(rng.integers(lo, hi + 1))
    seeds = rng.integers(0, 2**63 - 1, size=batch_size)
    episodes = [sample_episode(pool, n_way, k_shot, q_query, int(s)) for s in seeds]
    return MetaBatch(episodes, n_way)


# ---- FSDS files --------------------------------------------------------------
#
# little-endian: "FSDS" | u32 version | u32 n_classes | u32 feature_dim
#                then per class: u32 class_id | u32 n_instances | f64[n_instances * F]

def write_pool(pool: ClassPool, path) -> None:
    F = pool.feature_dim
    buf = bytearray(MAGIC)
    buf += struct.pack("<III", FORMAT_VERSION, pool.n_classes, F)
    for cid, block in pool.classes.items():
        buf += struct.pack("<II", cid, block.shape[0])
        buf += np.ascontiguousarray(block, dtype="<f8").tobytes()
    Path(path).write_bytes(bytes(buf))


def load_pool(path, role: str = "train") -> ClassPool:
    data = Path(path).read_bytes()
    if len(data) < 16 or data[:4] != MAGIC:
        raise FormatError(f"{path}: bad magic, not an FSDS file")
    version, n_classes, F = struct.unpack_from("<III", data, 4)
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported FSDS version {version}")
    pos = 16
    classes = {}
    for k in range(n_classes):
        if pos + 8 > len(data):
            raise FormatError(f"{path}: header declares {n_classes} classes, file holds {k}")
        cid, n = struct.unpack_from("<II", data, pos)
        pos += 8
        nbytes = 8 * n * F
        if pos + nbytes > len(data):
            raise FormatError(f"{path}: class {cid} declares {n} instances, file is short")
        if cid in classes:
            raise FormatError(f"{path}: duplicate class id {cid}")
        classes[cid] = np.frombuffer(data, dtype="<f8", count=n * F, offset=pos).astype(np.float64).reshape(n, F)
        pos += nbytes
    if pos != len(data):
        raise FormatError(f"{path}: {len(data) - pos} trailing bytes after {n_classes} classes")
    return ClassPool(classes, role, F)
