"""Sequential model specs, parameter state, and checkpoint persistence."""

from __future__ import annotations

import copy
import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from . import __version__
from .rng import stream
from .tensor import (
    EVAL,
    TRAIN,
    BatchNormState,
    ShapeError,
    Tensor,
    batchnorm,
    conv2d,
    dense,
    flatten,
    maxpool2d,
    relu,
    softmax,
)

LAYER_KINDS = ("Conv2D", "BatchNorm", "ReLU", "MaxPool2D", "Flatten", "Dense", "Softmax")


class SpecError(ValueError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class Layer:
    kind: str
    in_features: int | None = None
    out_features: int | None = None

    def __str__(self) -> str:
        if self.kind in ("Conv2D", "Dense"):
            return f"{self.kind}(in={self.in_features}, out={self.out_features})"
        return self.kind


def Conv2D(in_ch: int, out_ch: int) -> Layer:
    return Layer("Conv2D", in_ch, out_ch)


def Dense(n_in: int, n_out: int) -> Layer:
    return Layer("Dense", n_in, n_out)


BatchNorm = Layer("BatchNorm")
ReLU = Layer("ReLU")
MaxPool2D = Layer("MaxPool2D")
Flatten = Layer("Flatten")
Softmax = Layer("Softmax")


@dataclass(frozen=True)
class ModelSpec:
    layers: tuple[Layer, ...]
    input_shape: tuple[int, ...]
    representation_index: int

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "input_shape", tuple(int(s) for s in self.input_shape))

    @property
    def num_classes(self) -> int:
        return self.layers[-2].out_features

    @property
    def has_batchnorm(self) -> bool:
        return any(l.kind == "BatchNorm" for l in self.layers)

    def to_dict(self) -> dict:
        return {
            "layers": [{k: v for k, v in asdict(l).items() if v is not None} for l in self.layers],
            "input_shape": list(self.input_shape),
            "representation_index": self.representation_index,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        return cls(
            layers=tuple(Layer(**l) for l in d["layers"]),
            input_shape=tuple(d["input_shape"]),
            representation_index=int(d["representation_index"]),
        )


def layer_shapes(spec: ModelSpec) -> list[tuple[int, ...]]:
    """Output shape (without batch dim) of every layer; raises on the first nonconforming pair."""
    shape = spec.input_shape
    shapes = []
    prev = "input"
    for i, layer in enumerate(spec.layers):
        where = f"layer {i} {layer} after {prev} with output shape {shape}"
        if layer.kind not in LAYER_KINDS:
            raise SpecError(f"unknown layer kind at {where}")
        if layer.kind == "Conv2D":
            if len(shape) != 3 or shape[0] != layer.in_features:
                raise SpecError(f"nonconforming {where}")
            shape = (layer.out_features, shape[1], shape[2])
        elif layer.kind == "MaxPool2D":
            if len(shape) != 3:
                raise SpecError(f"nonconforming {where}")
            shape = (shape[0], shape[1] // 2, shape[2] // 2)
            if min(shape[1:]) < 1:
                raise SpecError(f"nonconforming {where}: spatial size collapses")
        elif layer.kind == "Flatten":
            shape = (math.prod(shape),)
        elif layer.kind == "Dense":
            if math.prod(shape) != layer.in_features:
                raise SpecError(f"nonconforming {where}")
            shape = (layer.out_features,)
        elif layer.kind == "Softmax":
            if i != len(spec.layers) - 1 or prev.split("(")[0] != "Dense":
                raise SpecError(f"Softmax must be the final layer and follow Dense; got {where}")
        shapes.append(shape)
        prev = str(layer)
    return shapes


def validate_spec(spec: ModelSpec) -> None:
    if len(spec.layers) < 2 or spec.layers[-1].kind != "Softmax" or spec.layers[-2].kind != "Dense":
        raise SpecError("final layers must be Dense followed by Softmax")
    layer_shapes(spec)
    if not 0 <= spec.representation_index < len(spec.layers) - 2:
        raise SpecError(
            f"representation_index {spec.representation_index} must point strictly before the final Dense"
        )


def strip_batchnorm(spec: ModelSpec) -> ModelSpec:
    """Drop every BatchNorm layer, keeping the representation on the same semantic layer."""
    kept = [i for i, l in enumerate(spec.layers) if l.kind != "BatchNorm"]
    rep = spec.representation_index
    while rep > 0 and spec.layers[rep].kind == "BatchNorm":
        rep -= 1
    new_rep = sum(1 for i in kept if i < rep)
    return ModelSpec(tuple(spec.layers[i] for i in kept), spec.input_shape, new_rep)


def appendix_cnn(in_channels: int = 3, num_classes: int = 2, image_size: int = 28, batchnorm: bool = True) -> ModelSpec:
    """Small CNN: two conv blocks of (16, 16) and (32, 32) channels, then Dense(256) and the classifier."""
    flat = 32 * (image_size // 4) ** 2
    layers = [
        Conv2D(in_channels, 16), BatchNorm, ReLU,
        Conv2D(16, 16), BatchNorm, ReLU,
        MaxPool2D,
        Conv2D(16, 32), BatchNorm, ReLU,
        Conv2D(32, 32), BatchNorm, ReLU,
        MaxPool2D,
        Dense(flat, 256), BatchNorm, ReLU,
        Dense(256, num_classes),
        Softmax,
    ]  # fmt: skip
    spec = ModelSpec(tuple(layers), (in_channels, image_size, image_size), 16)
    return spec if batchnorm else strip_batchnorm(spec)


def mlp(input_shape: tuple[int, ...], hidden: tuple[int, ...] = (256, 256), num_classes: int = 2,
        batchnorm: bool = True) -> ModelSpec:
    layers: list[Layer] = []
    width = math.prod(input_shape)
    for h in hidden:
        layers += [Dense(width, h), BatchNorm, ReLU]
        width = h
    layers += [Dense(width, num_classes), Softmax]
    spec = ModelSpec(tuple(layers), tuple(input_shape), len(layers) - 3)
    return spec if batchnorm else strip_batchnorm(spec)


PRESETS = {"cnn": appendix_cnn, "mlp": mlp}


@dataclass
class Model:
    spec: ModelSpec
    params: list[dict[str, Tensor]]
    bn: dict[int, BatchNormState]
    seed: int = 0
    frozen: bool = False
    shapes: list[tuple[int, ...]] = field(default_factory=list, repr=False)

    def named_tensors(self) -> Iterator[tuple[str, np.ndarray, str]]:
        """(name, array, role) in checkpoint order; role is 'weight', 'param' or 'buffer'."""
        for i, layer in enumerate(self.spec.layers):
            if layer.kind in ("Conv2D", "Dense"):
                yield f"{i}.weight", self.params[i]["weight"].data, "weight"
                yield f"{i}.bias", self.params[i]["bias"].data, "param"
            elif layer.kind == "BatchNorm":
                st = self.bn[i]
                yield f"{i}.gamma", st.gamma.data, "param"
                yield f"{i}.beta", st.beta.data, "param"
                yield f"{i}.running_mean", st.running_mean, "buffer"
                yield f"{i}.running_var", st.running_var, "buffer"

    def parameters(self) -> list[tuple[str, Tensor, bool]]:
        """Learnable tensors as (name, tensor, is_weight)."""
        out = []
        for i, layer in enumerate(self.spec.layers):
            if layer.kind in ("Conv2D", "Dense"):
                out.append((f"{i}.weight", self.params[i]["weight"], True))
                out.append((f"{i}.bias", self.params[i]["bias"], False))
            elif layer.kind == "BatchNorm":
                out.append((f"{i}.gamma", self.bn[i].gamma, False))
                out.append((f"{i}.beta", self.bn[i].beta, False))
        return out

    def num_parameters(self, include_buffers: bool = False) -> int:
        return sum(a.size for _, a, role in self.named_tensors() if include_buffers or role != "buffer")

    def freeze(self) -> "Model":
        self.frozen = True
        for _, t, _ in self.parameters():
            t.requires_grad = False
        return self

    def copy(self) -> "Model":
        return copy.deepcopy(self)

    def state_hash(self) -> str:
        h = hashlib.sha256()
        for name, arr, _ in self.named_tensors():
            h.update(name.encode())
            h.update(np.ascontiguousarray(arr, dtype="<f8").tobytes())
        return h.hexdigest()


def build_model(spec: ModelSpec, seed: int) -> Model:
    """He-uniform weights, zero biases/beta, unit gamma; deterministic in ``seed``."""
    validate_spec(spec)
    rng = stream(seed, "init")
    params: list[dict[str, Tensor]] = []
    bn: dict[int, BatchNormState] = {}
    shapes = layer_shapes(spec)
    prev_shape = spec.input_shape
    for i, layer in enumerate(spec.layers):
        p: dict[str, Tensor] = {}
        if layer.kind == "Conv2D":
            fan_in = layer.in_features * 9
            lim = math.sqrt(6.0 / fan_in)
            p["weight"] = Tensor(rng.uniform(-lim, lim, (layer.out_features, layer.in_features, 3, 3)), True)
            p["bias"] = Tensor(np.zeros(layer.out_features), True)
        elif layer.kind == "Dense":
            lim = math.sqrt(6.0 / layer.in_features)
            p["weight"] = Tensor(rng.uniform(-lim, lim, (layer.out_features, layer.in_features)), True)
            p["bias"] = Tensor(np.zeros(layer.out_features), True)
        elif layer.kind == "BatchNorm":
            bn[i] = BatchNormState.create(prev_shape[0])
        params.append(p)
        prev_shape = shapes[i]
    return Model(spec, params, bn, seed=seed, shapes=shapes)


def forward(model: Model, x, mode: str = EVAL, update_stats: bool = True) -> tuple[Tensor, Tensor, Tensor]:
    """Run the model; returns (representation, logits, probabilities).

    Frozen models always use running statistics.
    """
    spec = model.spec
    h = x if isinstance(x, Tensor) else Tensor(x)
    if tuple(h.shape[1:]) != spec.input_shape:
        raise ShapeError(f"forward: input shape {h.shape[1:]} does not match model input {spec.input_shape}")
    if model.frozen:
        mode = EVAL
    rep = logits = None
    for i, layer in enumerate(spec.layers):
        kind = layer.kind
        if kind == "Conv2D":
            h = conv2d(h, model.params[i]["weight"], model.params[i]["bias"])
        elif kind == "Dense":
            h = dense(h, model.params[i]["weight"], model.params[i]["bias"])
            logits = h
        elif kind == "BatchNorm":
            h = batchnorm(h, model.bn[i], mode, update_stats=update_stats and mode == TRAIN)
        elif kind == "ReLU":
            h = relu(h)
        elif kind == "MaxPool2D":
            h = maxpool2d(h)
        elif kind == "Flatten":
            h = flatten(h)
        elif kind == "Softmax":
            h = softmax(logits)
        if i == spec.representation_index:
            rep = h if h.data.ndim == 2 else flatten(h)
    return rep, logits, h


# ---------------------------------------------------------------------------
# checkpoints

MANIFEST = "manifest.json"
WEIGHTS = "weights.bin"


def save_checkpoint(model: Model, path, extra: dict | None = None) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    entries, blobs = [], []
    for name, arr, role in model.named_tensors():
        entries.append({"name": name, "shape": list(arr.shape), "role": role})
        blobs.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    blob = b"".join(blobs)
    manifest = {
        "format": "normlab-checkpoint",
        "version": __version__,
        "spec": model.spec.to_dict(),
        "tensors": entries,
        "dtype": "float64-le",
        "byte_count": len(blob),
        "seed": model.seed,
        "frozen": model.frozen,
        "meta": extra or {},
    }
    (path / WEIGHTS).write_bytes(blob)
    (path / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def load_checkpoint(path) -> Model:
    path = Path(path)
    try:
        manifest = json.loads((path / MANIFEST).read_text())
        blob = (path / WEIGHTS).read_bytes()
    except (OSError, json.JSONDecodeError) as e:
        raise CheckpointError(f"unreadable checkpoint at {path}: {e}") from e
    spec = ModelSpec.from_dict(manifest["spec"])
    model = build_model(spec, int(manifest.get("seed", 0)))
    expected = [(n, list(a.shape)) for n, a, _ in model.named_tensors()]
    listed = [(e["name"], list(e["shape"])) for e in manifest["tensors"]]
    if expected != listed:
        raise CheckpointError(f"manifest tensor list does not match its model spec: {listed} vs {expected}")
    need = 8 * sum(math.prod(s) for _, s in expected)
    if manifest.get("byte_count") != need:
        raise CheckpointError(f"manifest byte_count {manifest.get('byte_count')} disagrees with spec: expected {need}")
    if len(blob) != need:
        raise CheckpointError(f"weights blob has {len(blob)} bytes, expected {need} bytes")
    flat = np.frombuffer(blob, dtype="<f8")
    off = 0
    arrays = {}
    for name, shape in expected:
        n = math.prod(shape)
        arrays[name] = flat[off:off + n].reshape(shape).astype(np.float64)
        off += n
    for i, layer in enumerate(spec.layers):
        if layer.kind in ("Conv2D", "Dense"):
            model.params[i]["weight"].data = arrays[f"{i}.weight"]
            model.params[i]["bias"].data = arrays[f"{i}.bias"]
        elif layer.kind == "BatchNorm":
            st = model.bn[i]
            st.gamma.data = arrays[f"{i}.gamma"]
            st.beta.data = arrays[f"{i}.beta"]
            st.running_mean = arrays[f"{i}.running_mean"]
            st.running_var = arrays[f"{i}.running_var"]
    if manifest.get("frozen"):
        model.freeze()
    return model
