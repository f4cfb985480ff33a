"""Expert/student networks over flat parameter vectors.

Parameters live in a single flat array so that trajectories, distances and
perturbations operate on one vector; ``forward`` slices it back into layers
inside the autodiff graph.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

KINDS = ("convnet", "mlp")


@dataclass(frozen=True)
class ModelSpec:
    kind: str = "convnet"
    depth: int = 2
    width: int = 16
    input_shape: tuple = (1, 8, 8)
    num_classes: int = 10
    norm: str = "instance"

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(s) for s in self.input_shape))
        if self.kind not in KINDS:
            raise ValueError(f"unknown model kind {self.kind!r}; expected one of {KINDS}")
        if self.depth < 0 or self.width < 1 or self.num_classes < 2:
            raise ValueError(f"invalid model size: {self}")
        if self.kind == "convnet":
            if len(self.input_shape) != 3:
                raise ValueError("convnet input_shape must be (channels, height, width)")
            if self.depth < 1:
                raise ValueError("convnet needs depth >= 1")
            _, h, w = self.input_shape
            if h % (2**self.depth) or w % (2**self.depth):
                raise ValueError(
                    f"input {h}x{w} cannot be pooled {self.depth} times by 2"
                )
        if self.norm not in ("instance", "none"):
            raise ValueError(f"unknown norm {self.norm!r}")

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "depth": self.depth,
            "width": self.width,
            "input_shape": list(self.input_shape),
            "num_classes": self.num_classes,
            "norm": self.norm,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        return cls(**{**d, "input_shape": tuple(d["input_shape"])})


@dataclass(frozen=True)
class LayerRecord:
    name: str
    shape: tuple
    offset: int

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))


def layout(spec: ModelSpec) -> tuple:
    """Ordered (name, shape, offset) records for ``spec``."""
    shapes = []
    if spec.kind == "convnet":
        cin, h, w = spec.input_shape
        for i in range(spec.depth):
            shapes.append((f"conv{i}.weight", (spec.width, cin, 3, 3)))
            shapes.append((f"conv{i}.bias", (spec.width,)))
            if spec.norm == "instance":
                shapes.append((f"norm{i}.scale", (spec.width,)))
                shapes.append((f"norm{i}.shift", (spec.width,)))
            cin, h, w = spec.width, h // 2, w // 2
        fan_in = cin * h * w
    else:
        fan_in = int(np.prod(spec.input_shape))
        for i in range(spec.depth):
            shapes.append((f"dense{i}.weight", (fan_in, spec.width)))
            shapes.append((f"dense{i}.bias", (spec.width,)))
            fan_in = spec.width
    shapes.append(("classifier.weight", (fan_in, spec.num_classes)))
    shapes.append(("classifier.bias", (spec.num_classes,)))
    records, offset = [], 0
    for name, shape in shapes:
        rec = LayerRecord(name, tuple(shape), offset)
        records.append(rec)
        offset += rec.size
    return tuple(records)


def param_count(spec: ModelSpec) -> int:
    recs = layout(spec)
    return recs[-1].offset + recs[-1].size


def feature_dim(spec: ModelSpec) -> int:
    return layout(spec)[-2].shape[0]


@dataclass(frozen=True, eq=False)
class ParamVector:
    """Flat model parameters plus the layer layout needed to unflatten them."""

    data: np.ndarray
    layout: tuple = field(repr=False)

    def __post_init__(self):
        arr = np.array(self.data, dtype=np.float64).reshape(-1)
        arr.flags.writeable = False
        object.__setattr__(self, "data", arr)
        expected = self.layout[-1].offset + self.layout[-1].size if self.layout else 0
        if arr.size != expected:
            raise ValueError(f"ParamVector: {arr.size} values for a layout of {expected}")

    def __eq__(self, other):
        if not isinstance(other, ParamVector):
            return NotImplemented
        return self.layout == other.layout and np.array_equal(self.data, other.data)

    def __len__(self) -> int:
        return self.data.size

    def unflatten(self) -> dict:
        return {r.name: self.data[r.offset:r.offset + r.size].reshape(r.shape) for r in self.layout}

    @classmethod
    def flatten(cls, arrays: dict, layout_: tuple) -> "ParamVector":
        return cls(np.concatenate([np.asarray(arrays[r.name], dtype=np.float64).reshape(-1)
                                   for r in layout_]), layout_)

    def with_data(self, data) -> "ParamVector":
        return ParamVector(data, self.layout)


def init_params(spec: ModelSpec, seed: int) -> ParamVector:
    """He-uniform weights (bound sqrt(6/fan_in)), zero biases, unit norm scales."""
    rng = np.random.default_rng(seed)
    recs = layout(spec)
    arrays = {}
    for r in recs:
        if r.name.endswith(".weight"):
            fan_in = int(np.prod(r.shape[1:])) if len(r.shape) == 4 else r.shape[0]
            bound = np.sqrt(6.0 / fan_in)
            arrays[r.name] = rng.uniform(-bound, bound, size=r.shape)
        elif r.name.endswith(".scale"):
            arrays[r.name] = np.ones(r.shape)
        else:
            arrays[r.name] = np.zeros(r.shape)
    return ParamVector.flatten(arrays, recs)


def _layers(params, recs) -> dict:
    flat = params if isinstance(params, Tensor) else Tensor(params.data)
    return {r.name: flat[r.offset:r.offset + r.size].reshape(r.shape) for r in recs}


def forward(spec: ModelSpec, params, batch, return_features: bool = False):
    """Logits ``[n, C]`` for ``batch``; ``params`` is a ParamVector or flat Tensor.

    With ``return_features`` the pre-classifier activations are returned too.
    """
    batch = ad.as_tensor(batch)
    if tuple(batch.shape[1:]) != spec.input_shape:
        raise ad.ShapeError(
            f"forward: batch sample shape {tuple(batch.shape[1:])} != {spec.input_shape}"
        )
    recs = layout(spec)
    size = recs[-1].offset + recs[-1].size
    if (params.size if isinstance(params, Tensor) else len(params)) != size:
        raise ad.ShapeError(f"forward: expected {size} parameters")
    p = _layers(params, recs)
    n = batch.shape[0]
    h = batch
    if spec.kind == "convnet":
        for i in range(spec.depth):
            h = ad.conv2d(h, p[f"conv{i}.weight"], p[f"conv{i}.bias"], padding=1)
            if spec.norm == "instance":
                h = ad.instance_norm(h, p[f"norm{i}.scale"], p[f"norm{i}.shift"])
            h = ad.relu(h)
            h = ad.avg_pool2d(h, 2)
        feats = h.reshape(n, -1)
    else:
        h = h.reshape(n, -1)
        for i in range(spec.depth):
            h = ad.relu(h @ p[f"dense{i}.weight"] + p[f"dense{i}.bias"])
        feats = h
    logits = feats @ p["classifier.weight"] + p["classifier.bias"]
    if return_features:
        return logits, feats
    return logits


def features(spec: ModelSpec, params, batch) -> np.ndarray:
    """Feature-tap activations (post-pool, pre-classifier) as a numpy array."""
    with ad.no_grad():
        _, feats = forward(spec, params, batch, return_features=True)
    return feats.data


def predict(spec: ModelSpec, params, batch, chunk: int = 512) -> np.ndarray:
    batch = np.asarray(batch, dtype=np.float64)
    out = []
    with ad.no_grad():
        for start in range(0, len(batch), chunk):
            out.append(forward(spec, params, batch[start:start + chunk]).data.argmax(axis=1))
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


def accuracy(spec: ModelSpec, params, images, labels) -> float:
    return float(np.mean(predict(spec, params, images) == np.asarray(labels)))


def param_distance_sq(a, b):
    """Squared L2 distance; differentiable when ``a`` is a graph Tensor."""
    if isinstance(a, ParamVector) and isinstance(b, ParamVector):
        if a.layout != b.layout:
            raise ValueError("param_distance_sq: layout mismatch")
        d = a.data - b.data
        return float(d @ d)
    a_t = ad.as_tensor(a.data if isinstance(a, ParamVector) else a)
    b_t = ad.as_tensor(b.data if isinstance(b, ParamVector) else b)
    if a_t.shape != b_t.shape:
        raise ValueError(f"param_distance_sq: layout mismatch {a_t.shape} vs {b_t.shape}")
    return ad.squared_distance(a_t, b_t)


def filter_slices(layout_: tuple) -> list:
    """Index arrays into the flat vector, one per filter.

    Conv weights split along output channels, dense weights along output
    units (columns), and every 1-D parameter counts as a single filter.
    """
    out = []
    for r in layout_:
        idx = np.arange(r.offset, r.offset + r.size).reshape(r.shape)
        if len(r.shape) == 4:
            out.extend(idx[j].reshape(-1) for j in range(r.shape[0]))
        elif len(r.shape) == 2:
            out.extend(idx[:, j] for j in range(r.shape[1]))
        else:
            out.append(idx.reshape(-1))
    return out
