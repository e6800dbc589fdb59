"""The twin model container and its checkpoint file format."""
from __future__ import annotations

import io
import json
import os
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from .autodiff import Tensor
from .cells import OutputHead, RnnStack, StackSpec, init_params
from .objective import AffineMap

CHECKPOINT_FORMAT = "twinnet-checkpoint"
CHECKPOINT_VERSION = 1

DTYPES = {"float64": np.float64, "float32": np.float32}


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class ModelSpec:
    num_classes: int
    output: str = "softmax"
    cell: str = "lstm"
    hidden: int = 32
    layers: int = 1
    embed_dim: int = 16
    cond_dim: int = 0
    dropout: float = 0.0
    share_embeddings: bool = False
    init: str = "uniform"
    precision: str = "float64"

    def stack_spec(self, direction: str) -> StackSpec:
        return StackSpec(self.num_classes, self.hidden, self.layers, self.embed_dim, self.cell,
                         self.output, self.cond_dim, self.dropout, direction)

    @property
    def dtype(self):
        return DTYPES[self.precision]

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


@dataclass
class Network:
    stack: RnnStack
    head: OutputHead


class TwinModel:
    """Forward and backward networks (no shared parameters by default) plus the map g."""

    def __init__(self, spec: ModelSpec, forward: Network, backward: Network, g: AffineMap):
        self.spec = spec
        self.forward = forward
        self.backward = backward
        self.g = g

    @property
    def dtype(self):
        return self.spec.dtype

    def forward_params(self) -> dict[str, Tensor]:
        return {**self.forward.stack.named_params("fwd"), **self.forward.head.named_params("fwd")}

    def backward_params(self) -> dict[str, Tensor]:
        out = {**self.backward.stack.named_params("bwd"), **self.backward.head.named_params("bwd")}
        if self.spec.share_embeddings:
            out.pop("bwd.embed")
        return out

    def g_params(self) -> dict[str, Tensor]:
        return self.g.named_params()

    def parameters(self) -> dict[str, Tensor]:
        return {**self.forward_params(), **self.backward_params(), **self.g_params()}

    def forward_side(self) -> dict[str, Tensor]:
        """Parameters updated by the forward likelihood and the penalty (g included)."""
        return {**self.forward_params(), **self.g_params()}

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.parameters().items()}

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        params = self.parameters()
        missing = set(params) - set(arrays)
        if missing:
            raise CheckpointError(f"missing parameters: {sorted(missing)}")
        for k, p in params.items():
            a = np.asarray(arrays[k])
            if a.shape != p.shape:
                raise CheckpointError(f"parameter {k}: shape {a.shape} != {p.shape}")
            p.data[...] = a

    def copy(self) -> "TwinModel":
        other = init_model(self.spec, seed=0)
        other.load_arrays(self.state_arrays())
        return other


def init_model(spec: ModelSpec, seed: int, scheme: str | None = None) -> TwinModel:
    ss = np.random.SeedSequence(seed)
    f_seed, b_seed = ss.spawn(2)
    scheme = scheme or spec.init
    dtype = spec.dtype
    fs, fh = init_params(spec.stack_spec("forward"), np.random.default_rng(f_seed), scheme, dtype)
    bs, bh = init_params(spec.stack_spec("backward"), np.random.default_rng(b_seed), scheme, dtype)
    if spec.share_embeddings:
        bs.embed = fs.embed
    g = AffineMap.create(spec.hidden, spec.hidden, dtype)
    return TwinModel(spec, Network(fs, fh), Network(bs, bh), g)


# ------------------------------------------------------------------ checkpoint container

def save_checkpoint(path: str | os.PathLike, model: TwinModel, extra_arrays: dict | None = None,
                    meta: dict | None = None) -> Path:
    """Write an ``.npz`` container: parameters, model spec, optional train state.

    ``extra_arrays`` keys must not start with ``param/``. Written atomically.
    """
    path = Path(path)
    arrays = {f"param/{k}": v for k, v in model.state_arrays().items()}
    for k, v in (extra_arrays or {}).items():
        if k.startswith("param/"):
            raise CheckpointError(f"reserved key {k}")
        arrays[k] = np.asarray(v)
    header = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "model_spec": model.spec.to_dict(),
        "params": {k: list(v.shape) for k, v in model.parameters().items()},
        "meta": meta or {},
    }
    arrays["__header__"] = np.frombuffer(json.dumps(header, sort_keys=True).encode(), dtype=np.uint8)
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(buf.getvalue())
    os.replace(tmp, path)
    return path


@dataclass
class Checkpoint:
    model: TwinModel
    arrays: dict[str, np.ndarray]
    meta: dict
    version: int


def load_checkpoint(path: str | os.PathLike) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    try:
        with np.load(path, allow_pickle=False) as z:
            data = {k: z[k] for k in z.files}
    except Exception as exc:  # zip / format errors surface as many types
        raise CheckpointError(f"corrupt checkpoint {path}: {exc}") from exc
    if "__header__" not in data:
        raise CheckpointError(f"{path} has no header")
    header = json.loads(bytes(data.pop("__header__")).decode())
    if header.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path} is not a twinnet checkpoint")
    if header.get("version", 0) > CHECKPOINT_VERSION:
        raise CheckpointError(f"checkpoint version {header['version']} is newer than supported")
    spec = ModelSpec.from_dict(header["model_spec"])
    model = init_model(spec, seed=0)
    params = {k[len("param/"):]: v for k, v in data.items() if k.startswith("param/")}
    model.load_arrays(params)
    extra = {k: v for k, v in data.items() if not k.startswith("param/")}
    return Checkpoint(model, extra, header.get("meta", {}), header["version"])
