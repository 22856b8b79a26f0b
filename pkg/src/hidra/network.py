"""Dense backbone, master neuron and dynamic output head, plus the parameter file format.

Parameters are kept as plain numpy arrays between meta-steps. Anything that has to be
differentiated is first lifted onto a tape with :func:`to_tape`, keyed by the stable
names ``layer{i}.weight``, ``layer{i}.bias``, ``head.weight`` and ``head.bias``.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .errors import DimensionError, FormatError, ValidationError

MAGIC = b"HIDR"
FORMAT_VERSION = 1
HEAD_WEIGHT = "head.weight"
HEAD_BIAS = "head.bias"


@dataclass(frozen=True)
class BackboneSpec:
    input_dim: int
    hidden_widths: tuple[int, ...]
    activation: str = "relu"

    def __post_init__(self):
        object.__setattr__(self, "hidden_widths", tuple(int(w) for w in self.hidden_widths))
        if self.input_dim < 1:
            raise ValidationError(f"input_dim must be >= 1, got {self.input_dim}")
        if not self.hidden_widths or min(self.hidden_widths) < 1:
            raise ValidationError(f"hidden_widths must be non-empty positive ints, got {self.hidden_widths}")
        if self.activation != "relu":
            raise ValidationError(f"unsupported activation {self.activation!r}")

    @property
    def widths(self) -> tuple[int, ...]:
        return (self.input_dim,) + self.hidden_widths

    @property
    def feature_width(self) -> int:
        return self.hidden_widths[-1]


@dataclass
class Backbone:
    spec: BackboneSpec
    params: dict[str, np.ndarray]

    @property
    def n_layers(self) -> int:
        return len(self.spec.hidden_widths)


@dataclass
class MasterNeuron:
    weights: np.ndarray
    bias: float = 0.0

    @property
    def width(self) -> int:
        return self.weights.shape[0]


@dataclass
class DynamicHead:
    weights: np.ndarray  # (C, w)
    biases: np.ndarray  # (C,)

    @property
    def class_count(self) -> int:
        return self.weights.shape[0]


@dataclass
class Model:
    """A backbone plus either a static head (maml/fomaml/reptile) or a master neuron (hidra)."""

    backbone: Backbone
    head: DynamicHead | None = None
    master: MasterNeuron | None = None
    method: str = "maml"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if (self.head is None) == (self.master is None):
            raise ValidationError("a model carries exactly one of a static head or a master neuron")

    @property
    def is_dynamic(self) -> bool:
        return self.master is not None

    def params(self, n_way: int | None = None) -> dict[str, np.ndarray]:
        """Flat parameter dict; a dynamic model is instantiated with ``n_way`` output neurons."""
        out = dict(self.backbone.params)
        if self.master is not None:
            if n_way is None:
                raise ValidationError("a master-neuron model needs n_way to build its head")
            head = instantiate_head(self.master, n_way)
        else:
            head = self.head
        out[HEAD_WEIGHT] = head.weights
        out[HEAD_BIAS] = head.biases
        return out


def glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int, shape) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape)


def init_backbone(spec: BackboneSpec, seed) -> Backbone:
    rng = np.random.default_rng(seed)
    params = {}
    w = spec.widths
    for i in range(1, len(w)):
        params[f"layer{i - 1}.weight"] = glorot_uniform(rng, w[i - 1], w[i], (w[i - 1], w[i]))
        params[f"layer{i - 1}.bias"] = np.zeros(w[i])
    return Backbone(spec, params)


def init_master(width: int, seed) -> MasterNeuron:
    rng = np.random.default_rng(seed)
    return MasterNeuron(glorot_uniform(rng, width, 1, (width,)), 0.0)


def init_head(width: int, n_classes: int, seed) -> DynamicHead:
    rng = np.random.default_rng(seed)
    return DynamicHead(glorot_uniform(rng, width, n_classes, (n_classes, width)), np.zeros(n_classes))


def to_tape(params: Mapping[str, np.ndarray], tape: Tape, variable: bool = True) -> dict[str, Tensor]:
    leaf = tape.variable if variable else tape.constant
    return {k: leaf(v) for k, v in params.items()}


def _layer_count(params: Mapping[str, Tensor]) -> int:
    n = 0
    while f"layer{n}.weight" in params:
        n += 1
    return n


def forward_backbone(params: Mapping[str, Tensor], x: Tensor) -> Tensor:
    """Affine + ReLU for every layer, including the last. No layers means identity."""
    h = x
    for i in range(_layer_count(params)):
        W = params[f"layer{i}.weight"]
        if h.shape[1] != W.shape[0]:
            raise DimensionError(f"layer{i}: input width {h.shape[1]} does not match weight {W.shape}")
        h = ad.relu(ad.add_rowvec(ad.matmul(h, W), params[f"layer{i}.bias"]))
    return h


def forward_full(params: Mapping[str, Tensor], x: Tensor) -> Tensor:
    """Logits ``M(x) Psi^T + b`` with no output activation."""
    h = forward_backbone(params, x)
    W = params[HEAD_WEIGHT]
    if h.shape[1] != W.shape[1]:
        raise DimensionError(f"head: feature width {h.shape[1]} does not match head {W.shape}")
    return ad.add_rowvec(ad.matmul(h, ad.transpose(W), symmetric=True), params[HEAD_BIAS])


def replicate_master(phi_w: Tensor, phi_b: Tensor, n_classes: int) -> tuple[Tensor, Tensor]:
    """Differentiable head construction: ``n_classes`` copies of one tape node each."""
    if n_classes < 1:
        raise ValidationError(f"class count must be >= 1, got {n_classes}")
    row = ad.reshape(phi_w, (1, phi_w.shape[0]))
    b = ad.reshape(phi_b, (1,))
    return ad.concat_rows([row] * n_classes), ad.concat_rows([b] * n_classes)


def instantiate_head(phi: MasterNeuron, n_classes: int, tape: Tape | None = None) -> DynamicHead:
    tape = tape if tape is not None else Tape()
    W, b = replicate_master(tape.constant(phi.weights), tape.constant(phi.bias), n_classes)
    return DynamicHead(W.value.copy(), b.value.copy())


def row_mean(rows: np.ndarray) -> np.ndarray:
    """Mean over axis 0 that is bitwise invariant to row order and exact for identical rows."""
    rows = np.asarray(rows, dtype=np.float64)
    ref = rows.min(axis=0)
    return ref + np.sort(rows - ref, axis=0).sum(axis=0) / rows.shape[0]


def aggregate_head(head: DynamicHead) -> MasterNeuron:
    return MasterNeuron(row_mean(head.weights), float(row_mean(head.biases)))


def copy_neuron_head(head: DynamicHead, i: int) -> DynamicHead:
    C = head.class_count
    if not 0 <= i < C:
        raise ValidationError(f"neuron index {i} out of range for a head with {C} neurons")
    return DynamicHead(np.tile(head.weights[i], (C, 1)), np.full(C, head.biases[i]))


# ---- parameter files ---------------------------------------------------------
#
# little-endian:
#   "HIDR" | u32 version | u32 F | u32 n_layers | u32 widths[n_layers]
#   u32 n_tensors, then per tensor: u32 name_len | name | u32 rank | u32 dims[rank] | f64 data
#   u32 has_master, and if set: u32 w | f64 weights[w] | f64 bias

def _tensors_of(model: Model) -> dict[str, np.ndarray]:
    out = dict(model.backbone.params)
    if model.head is not None:
        out[HEAD_WEIGHT] = model.head.weights
        out[HEAD_BIAS] = model.head.biases
    return out


def save_params(model: Model, path) -> None:
    path = Path(path)
    spec = model.backbone.spec
    buf = bytearray(MAGIC)
    buf += struct.pack("<III", FORMAT_VERSION, spec.input_dim, len(spec.hidden_widths))
    buf += struct.pack(f"<{len(spec.hidden_widths)}I", *spec.hidden_widths)
    tensors = _tensors_of(model)
    buf += struct.pack("<I", len(tensors))
    for name, arr in tensors.items():
        raw = name.encode()
        buf += struct.pack("<I", len(raw)) + raw
        buf += struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape)
        buf += np.ascontiguousarray(arr, dtype="<f8").tobytes()
    if model.master is not None:
        w = model.master.width
        buf += struct.pack("<II", 1, w)
        buf += np.ascontiguousarray(model.master.weights, dtype="<f8").tobytes()
        buf += struct.pack("<d", model.master.bias)
    else:
        buf += struct.pack("<I", 0)
    path.write_bytes(bytes(buf))
    manifest = {
        "format": "HIDR",
        "version": FORMAT_VERSION,
        "method": model.method,
        "input_dim": spec.input_dim,
        "hidden_widths": list(spec.hidden_widths),
        "tensors": {k: list(v.shape) for k, v in tensors.items()},
        "master_width": None if model.master is None else model.master.width,
        "meta": model.meta,
    }
    Path(str(path) + ".json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise FormatError(f"truncated file: wanted {n} bytes at offset {self.pos}, have {len(self.data) - self.pos}")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self, count: int = 1):
        vals = struct.unpack(f"<{count}I", self.take(4 * count))
        return vals[0] if count == 1 else vals

    def f64(self, count: int) -> np.ndarray:
        return np.frombuffer(self.take(8 * count), dtype="<f8").astype(np.float64)


def load_params(path, spec: BackboneSpec | None = None) -> Model:
    """Read a parameter file. If ``spec`` is given the stored layers must match it."""
    path = Path(path)
    r = _Reader(path.read_bytes())
    if r.take(4) != MAGIC:
        raise FormatError(f"{path}: bad magic, not a parameter file")
    version = r.u32()
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported format version {version}")
    F = r.u32()
    n_layers = r.u32()
    widths = r.u32(n_layers) if n_layers else ()
    widths = (widths,) if isinstance(widths, int) else tuple(widths)
    try:
        stored = BackboneSpec(F, widths)
    except ValidationError as e:
        raise FormatError(f"{path}: invalid backbone header: {e}") from e
    tensors = {}
    for _ in range(r.u32()):
        name = r.take(r.u32()).decode()
        rank = r.u32()
        dims = r.u32(rank) if rank else ()
        dims = (dims,) if isinstance(dims, int) else tuple(dims)
        tensors[name] = r.f64(int(np.prod(dims, dtype=np.int64))).reshape(dims)
    master = None
    if r.u32():
        w = r.u32()
        master = MasterNeuron(r.f64(w), float(r.f64(1)[0]))
    if r.pos != len(r.data):
        raise FormatError(f"{path}: {len(r.data) - r.pos} trailing bytes")

    _check_layers(stored, tensors, source=str(path))
    if spec is not None and spec != stored:
        _check_layers(spec, tensors, source=f"{path} against requested spec")
        raise ValidationError(f"{path}: stored spec {stored} differs from requested {spec}")
    backbone = Backbone(stored, {k: v for k, v in tensors.items() if k.startswith("layer")})
    head = None
    if HEAD_WEIGHT in tensors:
        head = DynamicHead(tensors[HEAD_WEIGHT], tensors[HEAD_BIAS])
    method = "hidra" if master is not None else "maml"
    meta = {}
    manifest = Path(str(path) + ".json")
    if manifest.exists():
        info = json.loads(manifest.read_text())
        method = info.get("method", method)
        meta = info.get("meta", {})
    try:
        return Model(backbone, head=head, master=master, method=method, meta=meta)
    except ValidationError as e:
        raise FormatError(f"{path}: {e}") from e


def _check_layers(spec: BackboneSpec, tensors: Mapping[str, np.ndarray], source: str) -> None:
    w = spec.widths
    for i in range(1, len(w)):
        for name, shape in ((f"layer{i - 1}.weight", (w[i - 1], w[i])), (f"layer{i - 1}.bias", (w[i],))):
            if name not in tensors:
                raise ValidationError(f"{source}: missing tensor {name}")
            if tensors[name].shape != shape:
                raise ValidationError(f"{source}: layer {name} has shape {tensors[name].shape}, expected {shape}")
    extra = [k for k in tensors if k.startswith("layer") and int(k[5:].split(".")[0]) >= len(w) - 1]
    if extra:
        raise ValidationError(f"{source}: unexpected layers {extra}")
