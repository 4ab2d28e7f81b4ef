"""Desk-scale model zoo, feature alignment map, cloning, SGD step and checkpoints."""

from __future__ import annotations

import copy
import json
import math
import struct
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, DataFormatError, TrainingError

CKPT_MAGIC = b"MMKDCKPT"
CKPT_VERSION = 1


class BatchOutput(NamedTuple):
    logits: torch.Tensor  # [b, C]
    features: torch.Tensor  # [b, d], penultimate layer, flattened


class MLP(nn.Module):
    """n_in -> hidden[0] -> ... -> hidden[-1] -> C; features are the last hidden layer."""

    def __init__(self, n_in: int, num_classes: int, hidden: Sequence[int] = (256, 128)):
        super().__init__()
        if not hidden:
            raise ConfigError("MLP needs at least one hidden layer to expose features")
        self.n_in = int(n_in)
        self.num_classes = int(num_classes)
        self.hidden = [int(h) for h in hidden]
        dims = [self.n_in, *self.hidden]
        self.body = nn.ModuleList(nn.Linear(a, b) for a, b in zip(dims[:-1], dims[1:]))
        self.head = nn.Linear(dims[-1], self.num_classes)

    @property
    def feature_shape(self) -> tuple[int, ...]:
        return (self.hidden[-1],)

    def descriptor(self) -> dict:
        return {"arch": "mlp", "n_in": self.n_in, "num_classes": self.num_classes,
                "hidden": list(self.hidden)}

    def forward(self, x: torch.Tensor) -> BatchOutput:
        h = x
        for layer in self.body:
            h = F.relu(layer(h))
        return BatchOutput(self.head(h), h)


class SmallCNN(nn.Module):
    """Four conv blocks (3x3 conv, ReLU, optional 2x2 max-pool) and a linear head.

    Inputs arrive flattened as [b, c*h*w] and are reshaped to ``in_shape``.
    Features are the last block's maps, flattened to [b, c*h*w].
    """

    def __init__(self, in_shape: Sequence[int], num_classes: int,
                 channels: Sequence[int] = (16, 32, 32, 64), pool: Sequence[bool] = (True, True, False, False)):
        super().__init__()
        if len(channels) != len(pool):
            raise ConfigError("channels and pool must have equal length")
        self.in_shape = tuple(int(s) for s in in_shape)
        self.num_classes = int(num_classes)
        self.channels = [int(c) for c in channels]
        self.pool = [bool(p) for p in pool]
        c, h, w = self.in_shape
        self.n_in = c * h * w
        convs = []
        for c_out, p in zip(self.channels, self.pool):
            convs.append(nn.Conv2d(c, c_out, 3, padding=1))
            c = c_out
            if p:
                h, w = h // 2, w // 2
        if h < 1 or w < 1:
            raise ConfigError(f"input {self.in_shape} too small for {sum(self.pool)} pooling stages")
        self.convs = nn.ModuleList(convs)
        self._feature_shape = (c, h, w)
        self.head = nn.Linear(c * h * w, self.num_classes)

    @property
    def feature_shape(self) -> tuple[int, ...]:
        return self._feature_shape

    def descriptor(self) -> dict:
        return {"arch": "cnn", "in_shape": list(self.in_shape), "num_classes": self.num_classes,
                "channels": list(self.channels), "pool": list(self.pool)}

    def forward(self, x: torch.Tensor) -> BatchOutput:
        h = x.reshape(x.shape[0], *self.in_shape)
        for conv, p in zip(self.convs, self.pool):
            h = F.relu(conv(h))
            if p:
                h = F.max_pool2d(h, 2)
        feats = h.flatten(1)
        return BatchOutput(self.head(feats), feats)


class AlignmentMap(nn.Module):
    """Bias-free linear map from student features to the teachers' feature space.

    Vector features use a dense matrix. Spatial features ``(c, h, w)`` use a
    1x1 convolution over channels (spatial sizes must agree), applied to the
    flattened layout.
    """

    def __init__(self, in_shape: Sequence[int], out_shape: Sequence[int]):
        super().__init__()
        self.in_shape = tuple(int(s) for s in in_shape)
        self.out_shape = tuple(int(s) for s in out_shape)
        if len(self.in_shape) != len(self.out_shape) or len(self.in_shape) not in (1, 3):
            raise ConfigError(f"cannot align features {self.in_shape} -> {self.out_shape}")
        if len(self.in_shape) == 3 and self.in_shape[1:] != self.out_shape[1:]:
            raise ConfigError("spatial alignment requires matching feature map sizes")
        d_in, d_out = self.in_shape[0], self.out_shape[0]
        self.weight = nn.Parameter(_projection_init(d_out, d_in))

    @property
    def in_features(self) -> int:
        return math.prod(self.in_shape)

    @property
    def out_features(self) -> int:
        return math.prod(self.out_shape)

    def descriptor(self) -> dict:
        return {"arch": "align", "in_shape": list(self.in_shape), "out_shape": list(self.out_shape)}

    def forward(self, feats: torch.Tensor) -> torch.Tensor:
        if feats.shape[-1] != self.in_features:
            raise ConfigError(f"alignment expects {self.in_features} features, got {feats.shape[-1]}")
        if len(self.in_shape) == 1:
            return feats @ self.weight.T
        c, h, w = self.in_shape
        maps = feats.reshape(-1, c, h * w)
        return torch.einsum("oc,bcp->bop", self.weight, maps).flatten(1)


def _projection_init(d_out: int, d_in: int) -> torch.Tensor:
    if d_out == d_in:
        return torch.eye(d_out)
    a = torch.randn(max(d_out, d_in), min(d_out, d_in))
    q, _ = torch.linalg.qr(a)  # orthonormal columns
    w = q if d_out > d_in else q.T
    # Row-orthonormal projections shrink norms by sqrt(d_out / d_in) on average.
    return w * math.sqrt(max(1.0, d_in / d_out))


ARCHS: dict[str, type[nn.Module]] = {"mlp": MLP, "cnn": SmallCNN, "align": AlignmentMap}


def build_model(descriptor: dict) -> nn.Module:
    kwargs = dict(descriptor)
    arch = kwargs.pop("arch", None)
    if arch not in ARCHS:
        raise ConfigError(f"unknown architecture {arch!r}; known: {sorted(ARCHS)}")
    try:
        return ARCHS[arch](**kwargs)
    except TypeError as exc:
        raise ConfigError(f"bad descriptor for {arch}: {exc}") from exc


def forward(model: nn.Module, inputs: torch.Tensor) -> BatchOutput:
    n_in = getattr(model, "n_in", None)
    if inputs.ndim != 2 or inputs.shape[0] < 1:
        raise ConfigError(f"expected a non-empty [b, n_in] batch, got shape {tuple(inputs.shape)}")
    if n_in is not None and inputs.shape[1] != n_in:
        raise ConfigError(f"model expects {n_in} inputs, got {inputs.shape[1]}")
    return model(inputs)


def clone_student(student: nn.Module, align: nn.Module) -> tuple[nn.Module, nn.Module]:
    """Deep copies of the student and its alignment map (no optimizer state is carried)."""
    s, a = copy.deepcopy(student), copy.deepcopy(align)
    for p in [*s.parameters(), *a.parameters()]:
        p.grad = None
    return s, a


def align_features(feats: torch.Tensor, align: AlignmentMap) -> torch.Tensor:
    return align(feats)


def sgd_step(params: dict[str, torch.Tensor], grads: dict[str, torch.Tensor],
             lr: float) -> dict[str, torch.Tensor]:
    """Plain SGD, ``theta - lr * g``; pure (returns new tensors) and differentiable."""
    if not lr >= 0:
        raise ConfigError(f"learning rate must be nonnegative, got {lr}")
    out = {}
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ConfigError(f"gradient for {name} has shape {tuple(g.shape)}, expected {tuple(p.shape)}")
        if not torch.isfinite(g).all():
            raise TrainingError(f"non-finite gradient for parameter {name}")
        out[name] = p - lr * g
    return out


def flat_parameters(module: nn.Module) -> torch.Tensor:
    return torch.cat([p.detach().reshape(-1) for p in module.parameters()])


# -- checkpoints --------------------------------------------------------------

def save_checkpoint(path: str | Path, module: nn.Module, extra: dict | None = None) -> Path:
    """Write descriptor + float32 little-endian flat parameters.

    Layout: magic (8 bytes), version (u32 LE), header length (u32 LE),
    JSON header, parameter data.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    names, shapes, chunks = [], [], []
    for name, p in module.named_parameters():
        names.append(name)
        shapes.append(list(p.shape))
        chunks.append(p.detach().cpu().reshape(-1).numpy().astype("<f4"))
    header = {"format_version": CKPT_VERSION, "descriptor": module.descriptor(),
              "params": [[n, s] for n, s in zip(names, shapes)], "extra": extra or {}}
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    flat = np.concatenate(chunks) if chunks else np.zeros(0, "<f4")
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<II", CKPT_VERSION, len(blob)))
        fh.write(blob)
        fh.write(flat.tobytes())
    return path


def read_checkpoint(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    raw = Path(path).read_bytes()
    if raw[:8] != CKPT_MAGIC:
        raise DataFormatError(f"{path}: bad checkpoint magic at byte offset 0")
    if len(raw) < 16:
        raise DataFormatError(f"{path}: truncated checkpoint header at byte offset 8")
    version, hlen = struct.unpack("<II", raw[8:16])
    if version != CKPT_VERSION:
        raise DataFormatError(f"{path}: unsupported checkpoint version {version} at byte offset 8")
    header = json.loads(raw[16:16 + hlen].decode("utf-8"))
    offset = 16 + hlen
    flat = np.frombuffer(raw, dtype="<f4", offset=offset)
    arrays, pos = {}, 0
    for name, shape in header["params"]:
        n = math.prod(shape)
        if pos + n > flat.size:
            raise DataFormatError(f"{path}: truncated parameter data at byte offset {offset + 4 * flat.size}")
        arrays[name] = flat[pos:pos + n].reshape(shape)
        pos += n
    return header, arrays


def load_checkpoint(path: str | Path, dtype: torch.dtype = torch.float32) -> nn.Module:
    header, arrays = read_checkpoint(path)
    model = build_model(header["descriptor"]).to(dtype)
    expected = dict(model.named_parameters())
    if set(expected) != set(arrays):
        raise DataFormatError(f"{path}: parameter names do not match descriptor")
    with torch.no_grad():
        for name, p in expected.items():
            if tuple(p.shape) != arrays[name].shape:
                raise DataFormatError(f"{path}: shape mismatch for {name}")
            p.copy_(torch.from_numpy(arrays[name].copy()))
    model.checkpoint_extra = header.get("extra", {})
    return model
