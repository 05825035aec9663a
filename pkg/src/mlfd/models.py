"""Declarative layer graphs with named representation levels.

A ModelSpec is an ordered list of layer descriptors plus a classification
head and a TapSet binding level names to layer boundaries. Parameter shapes
are derived from the spec alone, so checkpoints and caches can be validated
against a spec hash. Forward passes optionally expose the activations
crossing tapped boundaries, unmodified.

Three built-in families keep the heterogeneous-teacher setting
representable at desk scale: dense stacks (mlp-small), conv/batchnorm/GeLU
stacks with pooling (cnn-small), and the same with a squeeze-excite block
(cnn-se).
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from mlfd.errors import ConfigError, PreconditionError, ShapeError
from mlfd.numerics import (
    Parameter,
    Tensor,
    avg_pool2d,
    batchnorm,
    bias_add,
    conv2d,
    dropout,
    flatten,
    gelu,
    global_avg_pool,
    load_tensor,
    matmul,
    mul,
    relu,
    reshape,
    save_tensor,
    sigmoid,
    xavier_init,
)
from mlfd.numerics.ops import BatchNormState
from mlfd.seeding import derive_seed

LAYER_KINDS = {
    "dense": ("units",),
    "conv": ("channels", "kernel", "stride", "padding"),
    "batchnorm": (),
    "gelu": (),
    "relu": (),
    "dropout": ("p",),
    "avg_pool": ("size",),
    "global_avg_pool": (),
    "flatten": (),
    "squeeze_excite": ("reduction",),
}

_DEFAULTS = {"kernel": 3, "stride": 1, "padding": 0, "size": 2, "reduction": 4}


def _canonical_layer(layer: dict) -> dict:
    kind = layer.get("kind")
    if kind not in LAYER_KINDS:
        raise ConfigError(f"unknown layer kind {kind!r}")
    out = {"kind": kind}
    for key in LAYER_KINDS[kind]:
        if key in layer:
            out[key] = layer[key]
        elif key in _DEFAULTS:
            out[key] = _DEFAULTS[key]
        else:
            raise ConfigError(f"layer {kind!r} missing required field {key!r}")
    extras = set(layer) - set(out) - {"kind"}
    if extras:
        raise ConfigError(f"layer {kind!r} has unknown fields {sorted(extras)}")
    return out


@dataclass(frozen=True)
class TapSet:
    """Ordered (level name, layer boundary) bindings, nearest-input first."""

    levels: tuple  # of (name, layer_index)

    def __post_init__(self):
        if len(self.levels) < 1:
            raise ConfigError("TapSet needs at least one level")
        indices = [idx for _, idx in self.levels]
        if any(b <= a for a, b in zip(indices, indices[1:])):
            raise ConfigError(f"tap bindings must strictly increase in depth: {indices}")
        names = [name for name, _ in self.levels]
        if len(set(names)) != len(names):
            raise ConfigError(f"duplicate tap names: {names}")

    @property
    def names(self) -> list[str]:
        return [name for name, _ in self.levels]

    def boundary(self, name: str) -> int:
        for n, idx in self.levels:
            if n == name:
                return idx
        raise ConfigError(f"level {name!r} not in tap set {self.names}")

    def deepest(self, k: int) -> "TapSet":
        """The k levels nearest the head, still in input-to-head order."""
        if not 1 <= k <= len(self.levels):
            raise ConfigError(f"cannot take {k} levels from a {len(self.levels)}-level tap set")
        return TapSet(self.levels[-k:])


@dataclass(frozen=True)
class ModelSpec:
    input_shape: tuple
    layers: tuple  # of canonical layer dicts
    classes: int
    taps: TapSet

    @staticmethod
    def create(input_shape, layers, classes, taps) -> "ModelSpec":
        canonical = tuple(_canonical_layer(dict(l)) for l in layers)
        tapset = taps if isinstance(taps, TapSet) else TapSet(tuple((n, i) for n, i in taps))
        spec = ModelSpec(tuple(int(s) for s in input_shape), canonical, int(classes), tapset)
        spec.shapes()  # validates layer compatibility eagerly
        for name, idx in tapset.levels:
            if not 0 <= idx < len(canonical):
                raise ConfigError(f"tap {name!r} bound to nonexistent boundary {idx}")
        return spec

    def shapes(self) -> list[tuple]:
        """Activation shape after each layer (batch axis omitted)."""
        shape = self.input_shape
        out = []
        for i, layer in enumerate(self.layers):
            shape = _infer_shape(shape, layer, i)
            out.append(shape)
        if len(shape) != 1:
            raise ConfigError(
                f"head requires a flat feature vector, got shape {shape} after layer {len(self.layers) - 1}"
            )
        return out

    def feature_width(self) -> int:
        return self.shapes()[-1][0]

    def tap_shape(self, name: str) -> tuple:
        return self.shapes()[self.taps.boundary(name)]

    def to_dict(self) -> dict:
        return {
            "input_shape": list(self.input_shape),
            "layers": [dict(l) for l in self.layers],
            "classes": self.classes,
            "taps": [[n, i] for n, i in self.taps.levels],
        }

    @staticmethod
    def from_dict(d: dict) -> "ModelSpec":
        return ModelSpec.create(d["input_shape"], d["layers"], d["classes"], d["taps"])

    def hash(self) -> str:
        payload = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(payload.encode()).hexdigest()


def _infer_shape(shape, layer, index) -> tuple:
    kind = layer["kind"]
    where = f"layer {index} ({kind})"
    if kind == "dense":
        if len(shape) != 1:
            raise ConfigError(f"{where}: needs a flat input, got {shape}; insert flatten")
        return (layer["units"],)
    if kind == "conv":
        if len(shape) != 3:
            raise ConfigError(f"{where}: needs (C,H,W) input, got {shape}")
        c, h, w = shape
        k, s, p = layer["kernel"], layer["stride"], layer["padding"]
        oh = (h + 2 * p - k) // s + 1
        ow = (w + 2 * p - k) // s + 1
        if oh < 1 or ow < 1:
            raise ConfigError(f"{where}: kernel {k} does not fit input {shape}")
        return (layer["channels"], oh, ow)
    if kind == "avg_pool":
        if len(shape) != 3:
            raise ConfigError(f"{where}: needs (C,H,W) input, got {shape}")
        c, h, w = shape
        if h % layer["size"] or w % layer["size"]:
            raise ConfigError(f"{where}: extents {shape} not divisible by {layer['size']}")
        return (c, h // layer["size"], w // layer["size"])
    if kind == "global_avg_pool":
        if len(shape) != 3:
            raise ConfigError(f"{where}: needs (C,H,W) input, got {shape}")
        return (shape[0],)
    if kind == "flatten":
        return (int(np.prod(shape)),)
    if kind == "squeeze_excite":
        if len(shape) != 3:
            raise ConfigError(f"{where}: needs (C,H,W) input, got {shape}")
        if shape[0] % layer["reduction"]:
            raise ConfigError(f"{where}: channels {shape[0]} not divisible by reduction")
        return shape
    if kind in ("batchnorm", "gelu", "relu", "dropout"):
        return shape
    raise ConfigError(f"unknown layer kind {kind!r}")


# ---------------------------------------------------------------------------
# bound models
# ---------------------------------------------------------------------------


class Model:
    """A ModelSpec with bound parameters and batchnorm state."""

    def __init__(self, spec: ModelSpec, seed: int):
        self.spec = spec
        self.seed = seed
        self.mode = "eval"
        self.layer_params: list[dict] = []
        self.bn_states: dict[int, BatchNormState] = {}
        self._build()

    def _build(self):
        shape = self.spec.input_shape
        for i, layer in enumerate(self.spec.layers):
            params = {}
            kind = layer["kind"]
            lseed = derive_seed(self.seed, "layer", i)
            if kind == "dense":
                fan_in, fan_out = shape[0], layer["units"]
                params["weight"] = Parameter(
                    xavier_init(fan_in, fan_out, lseed, shape=(fan_in, fan_out)),
                    name=f"layer{i}.weight",
                )
                params["bias"] = Parameter(np.zeros(fan_out), name=f"layer{i}.bias")
            elif kind == "conv":
                cin = shape[0]
                cout, k = layer["channels"], layer["kernel"]
                fan_in, fan_out = cin * k * k, cout * k * k
                params["weight"] = Parameter(
                    xavier_init(fan_in, fan_out, lseed, shape=(cout, cin, k, k)),
                    name=f"layer{i}.weight",
                )
                params["bias"] = Parameter(np.zeros(cout), name=f"layer{i}.bias")
            elif kind == "batchnorm":
                nfeat = shape[0]
                params["gamma"] = Parameter(np.ones(nfeat), name=f"layer{i}.gamma")
                params["beta"] = Parameter(np.zeros(nfeat), name=f"layer{i}.beta")
                self.bn_states[i] = BatchNormState.create(nfeat)
            elif kind == "squeeze_excite":
                c = shape[0]
                hidden = c // layer["reduction"]
                params["w1"] = Parameter(
                    xavier_init(c, hidden, derive_seed(lseed, "se1"), shape=(c, hidden)),
                    name=f"layer{i}.w1",
                )
                params["b1"] = Parameter(np.zeros(hidden), name=f"layer{i}.b1")
                params["w2"] = Parameter(
                    xavier_init(hidden, c, derive_seed(lseed, "se2"), shape=(hidden, c)),
                    name=f"layer{i}.w2",
                )
                params["b2"] = Parameter(np.zeros(c), name=f"layer{i}.b2")
            self.layer_params.append(params)
            shape = _infer_shape(shape, layer, i)

        width = shape[0]
        head_seed = derive_seed(self.seed, "head")
        self.head_weight = Parameter(
            xavier_init(width, self.spec.classes, head_seed, shape=(width, self.spec.classes)),
            name="head.weight",
        )
        self.head_bias = Parameter(np.zeros(self.spec.classes), name="head.bias")

    # -- parameter access ---------------------------------------------------

    def named_parameters(self):
        for i, params in enumerate(self.layer_params):
            for key, p in params.items():
                yield f"layer{i}.{key}", p
        yield "head.weight", self.head_weight
        yield "head.bias", self.head_bias

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def named_state(self):
        for i, state in sorted(self.bn_states.items()):
            yield f"layer{i}.running_mean", state.running_mean
            yield f"layer{i}.running_var", state.running_var

    def freeze(self):
        for p in self.parameters():
            p.freeze()

    def train(self):
        self.mode = "train"
        return self

    def eval(self):
        self.mode = "eval"
        return self

    # -- forward ------------------------------------------------------------

    def _apply_layer(self, x: Tensor, i: int, mode: str, step: int) -> Tensor:
        layer = self.spec.layers[i]
        params = self.layer_params[i]
        kind = layer["kind"]
        if kind == "dense":
            return bias_add(matmul(x, params["weight"].value), params["bias"].value)
        if kind == "conv":
            out = conv2d(x, params["weight"].value, stride=layer["stride"], padding=layer["padding"])
            return bias_add(out, params["bias"].value)
        if kind == "batchnorm":
            return batchnorm(x, params["gamma"].value, params["beta"].value, self.bn_states[i], mode=mode)
        if kind == "gelu":
            return gelu(x)
        if kind == "relu":
            return relu(x)
        if kind == "dropout":
            seed = derive_seed(self.seed, "dropout", i, step)
            return dropout(x, layer["p"], seed, mode=mode)
        if kind == "avg_pool":
            return avg_pool2d(x, layer["size"])
        if kind == "global_avg_pool":
            return global_avg_pool(x)
        if kind == "flatten":
            return flatten(x)
        if kind == "squeeze_excite":
            s = global_avg_pool(x)
            s = bias_add(matmul(s, params["w1"].value), params["b1"].value)
            s = gelu(s)
            s = bias_add(matmul(s, params["w2"].value), params["b2"].value)
            s = sigmoid(s)
            gate = reshape(s, (x.shape[0], x.shape[1], 1, 1))
            return mul(x, gate)
        raise ConfigError(f"unknown layer kind {kind!r}")

    def run_layers(self, x: Tensor, levels=(), mode=None, step: int = 0, stop_after: Optional[int] = None):
        """Apply body layers, collecting tapped activations; optionally stop
        after a boundary (used to run truncated backbones)."""
        mode = mode or self.mode
        for name in levels:
            self.spec.taps.boundary(name)  # raises for unknown levels
        wanted = {self.spec.taps.boundary(name): name for name in levels}
        embeddings = {}
        for i in range(len(self.spec.layers)):
            x = self._apply_layer(x, i, mode, step)
            if i in wanted:
                embeddings[wanted[i]] = x
            if stop_after is not None and i == stop_after:
                return x, embeddings
        return x, embeddings

    def head(self, features: Tensor) -> Tensor:
        return bias_add(matmul(features, self.head_weight.value), self.head_bias.value)


def build_model(spec: ModelSpec, seed: int) -> Model:
    """Instantiate with Xavier-initialized weights and zero biases."""
    return Model(spec, seed)


def forward_with_taps(model: Model, inputs: Tensor, levels: Sequence[str] = (), mode=None, step: int = 0):
    """Logits over head classes plus the embedding at each requested level."""
    if tuple(inputs.shape[1:]) != model.spec.input_shape:
        raise ShapeError(
            f"forward: input shape {tuple(inputs.shape[1:])} vs spec {model.spec.input_shape}"
        )
    features, embeddings = model.run_layers(inputs, levels=levels, mode=mode, step=step)
    return model.head(features), embeddings


def count_params(model: Model, exclude_frozen: bool = False) -> int:
    total = 0
    for _, p in model.named_parameters():
        if exclude_frozen and p.frozen:
            continue
        total += p.value.size
    return total


# ---------------------------------------------------------------------------
# architecture library
# ---------------------------------------------------------------------------

ARCHITECTURES = ("mlp-small", "cnn-small", "cnn-se")


def make_model_spec(arch: str, input_shape, classes: int) -> ModelSpec:
    input_shape = tuple(int(s) for s in input_shape)
    if arch == "mlp-small":
        return _mlp_small(input_shape, classes)
    if arch == "cnn-small":
        return _cnn_stack(input_shape, classes, widths=(8, 16, 32), squeeze=False)
    if arch == "cnn-se":
        return _cnn_stack(input_shape, classes, widths=(12, 24, 32), squeeze=True)
    raise ConfigError(f"unknown architecture {arch!r}; choose from {ARCHITECTURES}")


def _mlp_small(input_shape, classes) -> ModelSpec:
    layers = [{"kind": "flatten"}]
    taps = []
    for name, units in (("h1", 160), ("h2", 96), ("h3", 64), ("top", 48)):
        layers.append({"kind": "dense", "units": units})
        layers.append({"kind": "gelu"})
        taps.append((name, len(layers) - 1))
    return ModelSpec.create(input_shape, layers, classes, taps)


def _cnn_stack(input_shape, classes, widths, squeeze) -> ModelSpec:
    if len(input_shape) != 3:
        raise ConfigError(f"conv architectures need (C,H,W) inputs, got {input_shape}")
    side = input_shape[1]
    layers = []
    taps = []
    for block, width in enumerate(widths):
        layers.append({"kind": "conv", "channels": width, "kernel": 3, "padding": 1})
        layers.append({"kind": "batchnorm"})
        layers.append({"kind": "gelu"})
        if squeeze and block == len(widths) - 1:
            layers.append({"kind": "squeeze_excite", "reduction": 4})
        taps.append((f"map{side}", len(layers) - 1))
        if block < len(widths) - 1:
            layers.append({"kind": "avg_pool", "size": 2})
            side //= 2
    layers.append({"kind": "global_avg_pool"})
    layers.append({"kind": "dense", "units": 48})
    layers.append({"kind": "gelu"})
    taps.append(("top", len(layers) - 1))
    return ModelSpec.create(input_shape, layers, classes, taps)


def model_content_hash(model: Model) -> str:
    """Hash over spec, parameters, and batchnorm state; identifies trained
    weights, so caches keyed by it go stale when a model changes."""
    h = hashlib.sha256(model.spec.hash().encode())
    for name, p in model.named_parameters():
        h.update(name.encode())
        h.update(p.value.data.tobytes())
    for name, arr in model.named_state():
        h.update(name.encode())
        h.update(arr.tobytes())
    return h.hexdigest()


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def save_model(model: Model, path) -> None:
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    (root / "spec.json").write_text(json.dumps(model.spec.to_dict(), indent=2, sort_keys=True) + "\n")
    (root / "spec_hash").write_text(model.spec.hash() + "\n")
    for name, p in model.named_parameters():
        save_tensor(root / f"p.{name}.tnsr", p.value)
    for name, arr in model.named_state():
        save_tensor(root / f"s.{name}.tnsr", arr)


def load_model(path, expected_spec: Optional[ModelSpec] = None, seed: int = 0) -> Model:
    root = Path(path)
    if not (root / "spec.json").is_file():
        raise PreconditionError(f"no model checkpoint at {root}")
    spec = ModelSpec.from_dict(json.loads((root / "spec.json").read_text()))
    stored = (root / "spec_hash").read_text().strip()
    if stored != spec.hash():
        raise PreconditionError(f"checkpoint at {root} has a tampered spec hash")
    if expected_spec is not None and expected_spec.hash() != spec.hash():
        raise PreconditionError(
            f"checkpoint at {root} was built from a different spec (hash mismatch)"
        )
    model = Model(spec, seed=seed)
    for name, p in model.named_parameters():
        stored_t = load_tensor(root / f"p.{name}.tnsr")
        if stored_t.shape != p.value.shape:
            raise PreconditionError(f"checkpoint tensor {name} has shape {stored_t.shape}")
        p.value.data[...] = stored_t.data
    for name, arr in model.named_state():
        arr[...] = load_tensor(root / f"s.{name}.tnsr").data
    return model
