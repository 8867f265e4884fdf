"""Declarative network assembly, parameter accounting and model files.

A network is a :class:`ModelSpec`: an input shape plus an ordered list of
:class:`LayerSpec`. The CMP variant places a single channel max pooling
layer between the feature extractor and the first dense layer; the two
baselines either flatten the feature maps directly (``baseline_wogap``) or
global-average-pool them first (``baseline_gap``).
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Literal

import numpy as np

from . import ops
from .cmp import CmpConfig, cmp_backward, cmp_forward, make_cmp_config
from .errors import BuildError, CmpNetError, FormatError, ShapeError
from .tensor import Rng, blob_size, read_tensor, tensor_to_bytes

Kind = Literal["conv", "maxpool", "gap", "cmp", "dense", "bn", "elu", "dropout"]
Variant = Literal["baseline_gap", "baseline_wogap", "cmp"]
VARIANTS = ("baseline_gap", "baseline_wogap", "cmp")
FEATURE_KINDS = {"conv", "maxpool", "gap"}

TOYCAR_WIDTHS = (16, 32, 64, 64)

# head geometries of the three backbones: (channels, spatial size)
HEAD_PRESETS = {
    "densenet161-head": (2208, 7),
    "vgg16-head": (512, 7),
    "resnet152-head": (2048, 7),
}


@dataclass(frozen=True)
class LayerSpec:
    kind: Kind
    channels: int | None = None  # conv output channels
    kernel: int = 3
    stride: int = 1
    pad: int = 0
    r: float | None = None
    s: int | None = None
    units: int | None = None
    p: float = 0.5


def conv(channels, kernel=3, stride=1, pad=1):
    return LayerSpec("conv", channels=channels, kernel=kernel, stride=stride, pad=pad)


def maxpool(kernel=2, stride=2):
    return LayerSpec("maxpool", kernel=kernel, stride=stride)


def cmp(r, s):
    return LayerSpec("cmp", r=r, s=s)


def dense(units):
    return LayerSpec("dense", units=units)


def gap():
    return LayerSpec("gap")


def bn():
    return LayerSpec("bn")


def elu():
    return LayerSpec("elu")


def dropout(p=0.5):
    return LayerSpec("dropout", p=p)


@dataclass(frozen=True)
class ModelSpec:
    layers: tuple
    num_classes: int
    variant: Variant = "cmp"
    input_shape: tuple = (3, 32, 32)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ModelSpec":
        d = json.loads(text)
        return cls(
            layers=tuple(LayerSpec(**layer) for layer in d["layers"]),
            num_classes=d["num_classes"],
            variant=d["variant"],
            input_shape=tuple(d["input_shape"]),
        )


def layer_ids(spec: ModelSpec) -> list[str]:
    return [f"{i}.{layer.kind}" for i, layer in enumerate(spec.layers)]


def classifier_head(hidden, num_classes, p=0.5, order=("bn", "dropout", "elu")):
    """FC -> BN -> dropout -> ELU -> FC(P); ``order`` permutes the middle three."""
    middle = {"bn": bn(), "dropout": dropout(p), "elu": elu()}
    return [dense(hidden), *(middle[name] for name in order), dense(num_classes)]


def toycar_spec(
    variant: Variant = "cmp",
    r: float = 4,
    s: int = 4,
    num_classes: int = 8,
    image_size: int = 32,
    hidden: int = 64,
    widths=TOYCAR_WIDTHS,
    dropout_p: float = 0.5,
) -> ModelSpec:
    """Reference desk-scale network: four conv blocks then the classifier head."""
    layers = []
    for w in widths:
        layers += [conv(w), bn(), elu(), maxpool()]
    layers += _neck(variant, r, s)
    layers += classifier_head(hidden, num_classes, dropout_p)
    return ModelSpec(tuple(layers), num_classes, variant, (3, image_size, image_size))


def head_spec(
    preset: str,
    variant: Variant = "cmp",
    r: float | None = None,
    s: int | None = None,
    hidden: int = 256,
    num_classes: int = 196,
) -> ModelSpec:
    """Classifier head on top of a backbone's final (C, 7, 7) feature maps."""
    try:
        C, size = HEAD_PRESETS[preset]
    except KeyError:
        raise ValueError(f"unknown preset {preset!r}; choose from {sorted(HEAD_PRESETS)}") from None
    layers = _neck(variant, r, s) + classifier_head(hidden, num_classes)
    return ModelSpec(tuple(layers), num_classes, variant, (C, size, size))


def _neck(variant, r, s):
    if variant == "cmp":
        return [cmp(r, s)]
    if variant == "baseline_gap":
        return [gap()]
    if variant == "baseline_wogap":
        return []
    raise ValueError(f"unknown variant {variant!r}")


# --- shape propagation ------------------------------------------------------


@dataclass
class LayerInfo:
    name: str
    spec: LayerSpec
    in_shape: tuple
    out_shape: tuple
    params: dict  # param name -> shape
    cmp: CmpConfig | None = None

    @property
    def num_params(self) -> int:
        return sum(math.prod(shape) for shape in self.params.values())


def _validate_variant(spec: ModelSpec) -> None:
    kinds = [layer.kind for layer in spec.layers]
    if spec.variant not in VARIANTS:
        raise BuildError(f"unknown variant {spec.variant!r}")
    if "dense" not in kinds:
        raise BuildError("model has no dense layer")
    first_dense = kinds.index("dense")
    n_cmp = kinds.count("cmp")
    if spec.variant == "cmp":
        if n_cmp != 1:
            raise BuildError(f"cmp variant needs exactly one cmp layer, found {n_cmp}")
        pos = kinds.index("cmp")
        if pos != first_dense - 1 or any(k in FEATURE_KINDS for k in kinds[pos:]):
            raise BuildError(
                f"layer {pos}.cmp must sit between the last feature layer and the first dense layer"
            )
    elif n_cmp:
        raise BuildError(f"variant {spec.variant} must not contain a cmp layer")
    has_gap = "gap" in kinds[:first_dense]
    if spec.variant == "baseline_gap" and not has_gap:
        raise BuildError("baseline_gap variant needs a gap layer before the first dense layer")
    if spec.variant != "baseline_gap" and has_gap:
        raise BuildError(f"variant {spec.variant} must not contain a gap layer")
    if kinds[-1] != "dense" or spec.layers[-1].units != spec.num_classes:
        raise BuildError(f"last layer must be dense with {spec.num_classes} units")


def analyze(spec: ModelSpec) -> list[LayerInfo]:
    """Propagate shapes through the spec; raises BuildError naming the bad layer."""
    _validate_variant(spec)
    shape = tuple(spec.input_shape)
    infos = []
    for name, layer in zip(layer_ids(spec), spec.layers):
        try:
            out, params, cfg = _layer_shape(layer, shape)
        except (ShapeError, ValueError, TypeError, CmpNetError) as exc:
            raise BuildError(f"layer {name}: {exc}") from exc
        infos.append(LayerInfo(name, layer, shape, out, params, cfg))
        shape = out
    return infos


def _layer_shape(layer: LayerSpec, shape: tuple):
    kind = layer.kind
    spatial = len(shape) == 3
    if kind in ("conv", "maxpool", "gap", "cmp") and not spatial:
        raise ShapeError(f"{kind} needs (C, H, W) input, got {shape}")
    if kind == "conv":
        C, H, W = shape
        Ho = ops.conv_output_size(H, layer.kernel, layer.stride, layer.pad)
        Wo = ops.conv_output_size(W, layer.kernel, layer.stride, layer.pad)
        params = {"weight": (layer.channels, C, layer.kernel, layer.kernel), "bias": (layer.channels,)}
        return (layer.channels, Ho, Wo), params, None
    if kind == "maxpool":
        C, H, W = shape
        return (
            C,
            ops.conv_output_size(H, layer.kernel, layer.stride, 0),
            ops.conv_output_size(W, layer.kernel, layer.stride, 0),
        ), {}, None
    if kind == "gap":
        return (shape[0], 1, 1), {}, None
    if kind == "cmp":
        cfg = make_cmp_config(shape[0], layer.r, layer.s)
        return (cfg.out_channels, shape[1], shape[2]), {}, cfg
    if kind == "dense":
        fan_in = math.prod(shape)
        return (layer.units,), {"weight": (layer.units, fan_in), "bias": (layer.units,)}, None
    if kind == "bn":
        return shape, {"gamma": (shape[0],), "beta": (shape[0],)}, None
    if kind in ("elu", "dropout"):
        return shape, {}, None
    raise ShapeError(f"unknown layer kind {kind!r}")


# --- parameter accounting ---------------------------------------------------


@dataclass
class ParamReport:
    per_layer: dict  # layer id -> parameter count (0 for pooling/activations)
    total: int
    fc1_in_features: int
    fc1_weights: int
    fc1_params: int  # weights + bias of the first dense layer


def count_parameters(spec: ModelSpec) -> ParamReport:
    infos = analyze(spec)
    per_layer = {info.name: info.num_params for info in infos}
    fc1 = next(info for info in infos if info.spec.kind == "dense")
    return ParamReport(
        per_layer=per_layer,
        total=sum(per_layer.values()),
        fc1_in_features=fc1.params["weight"][1],
        fc1_weights=math.prod(fc1.params["weight"]),
        fc1_params=fc1.num_params,
    )


# --- built state ------------------------------------------------------------


@dataclass
class ModelState:
    spec: ModelSpec
    params: dict  # "<layer>.<name>" -> ParamTensor, in layer order
    bn_states: dict  # layer id -> BnState (shares gamma/beta with params)
    rng: Rng
    velocity: dict = field(default_factory=dict)

    def parameter_count(self) -> int:
        return sum(p.size for p in self.params.values())

    def named_tensors(self) -> dict:
        """Every persisted tensor: parameters then running statistics."""
        out = {name: p.value for name, p in self.params.items()}
        for lid, bn_state in self.bn_states.items():
            out[f"{lid}.running_mean"] = bn_state.running_mean
            out[f"{lid}.running_var"] = bn_state.running_var
        return out

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()


def tensor_shapes(spec: ModelSpec) -> dict:
    """Names and shapes of the tensors a built model of ``spec`` persists."""
    infos = analyze(spec)
    shapes = {}
    for info in infos:
        for pname, shape in info.params.items():
            shapes[f"{info.name}.{pname}"] = shape
    for info in infos:
        if info.spec.kind == "bn":
            shapes[f"{info.name}.running_mean"] = (info.in_shape[0],)
            shapes[f"{info.name}.running_var"] = (info.in_shape[0],)
    return shapes


def _param_groups(infos):
    """conv-group for everything before the first dense layer, fc-group after."""
    groups, group = {}, "conv"
    for info in infos:
        if info.spec.kind == "dense":
            group = "fc"
        groups[info.name] = group
    return groups


def build_model(spec: ModelSpec, rng: Rng | int = 0) -> ModelState:
    if not isinstance(rng, Rng):
        rng = Rng(rng)
    infos = analyze(spec)
    groups = _param_groups(infos)
    params, bn_states = {}, {}
    for info in infos:
        kind, group = info.spec.kind, groups[info.name]
        if kind in ("conv", "dense"):
            wshape = info.params["weight"]
            fan_in = math.prod(wshape[1:])
            params[f"{info.name}.weight"] = ops.ParamTensor(ops.init_weight(rng, wshape, fan_in), group)
            params[f"{info.name}.bias"] = ops.ParamTensor(np.zeros(info.params["bias"]), group)
        elif kind == "bn":
            state = ops.BnState.create(info.in_shape[0], group)
            bn_states[info.name] = state
            params[f"{info.name}.gamma"] = state.gamma
            params[f"{info.name}.beta"] = state.beta
    return ModelState(spec, params, bn_states, rng)


def forward(state: ModelState, x: np.ndarray, mode: ops.Mode = "eval"):
    """Logits of shape (B, P) plus the per-layer caches needed by :func:`backward`."""
    spec = state.spec
    if x.ndim != 4 or x.shape[1:] != tuple(spec.input_shape):
        raise ShapeError(f"input shape {x.shape[1:]} != configured {tuple(spec.input_shape)}")
    caches = []
    for name, layer in zip(layer_ids(spec), spec.layers):
        try:
            x, cache = _layer_forward(state, name, layer, x, mode)
        except ShapeError as exc:
            raise ShapeError(f"layer {name}: {exc}") from exc
        caches.append(cache)
    return x, caches


def _layer_forward(state, name, layer, x, mode):
    kind = layer.kind
    if kind == "conv":
        w, b = state.params[f"{name}.weight"].value, state.params[f"{name}.bias"].value
        return ops.conv2d_forward(x, w, b, layer.stride, layer.pad)
    if kind == "maxpool":
        return ops.maxpool2d_forward(x, layer.kernel, layer.stride)
    if kind == "gap":
        return ops.global_avg_pool_forward(x)
    if kind == "cmp":
        cfg = make_cmp_config(x.shape[1], layer.r, layer.s)
        y, cache = cmp_forward(x, cfg)
        return y, (cache, cfg)
    if kind == "dense":
        w, b = state.params[f"{name}.weight"].value, state.params[f"{name}.bias"].value
        return ops.dense_forward(x, w, b)
    if kind == "bn":
        return ops.batchnorm_forward(x, state.bn_states[name], mode)
    if kind == "elu":
        return ops.elu_forward(x)
    if kind == "dropout":
        return ops.dropout_forward(x, layer.p, mode, state.rng)
    raise ShapeError(f"unknown layer kind {kind!r}")


def backward(state: ModelState, caches: list, grad_logits: np.ndarray) -> np.ndarray:
    """Overwrite every ``ParamTensor.grad`` and return the input gradient."""
    spec = state.spec
    g = grad_logits
    for name, layer, cache in reversed(list(zip(layer_ids(spec), spec.layers, caches))):
        kind = layer.kind
        if kind == "conv":
            g, dw, db = ops.conv2d_backward(g, cache)
            state.params[f"{name}.weight"].grad[...] = dw
            state.params[f"{name}.bias"].grad[...] = db
        elif kind == "dense":
            g, dw, db = ops.dense_backward(g, cache)
            state.params[f"{name}.weight"].grad[...] = dw
            state.params[f"{name}.bias"].grad[...] = db
        elif kind == "bn":
            g, dgamma, dbeta = ops.batchnorm_backward(g, cache)
            state.params[f"{name}.gamma"].grad[...] = dgamma
            state.params[f"{name}.beta"].grad[...] = dbeta
        elif kind == "maxpool":
            g = ops.maxpool2d_backward(g, cache)
        elif kind == "gap":
            g = ops.global_avg_pool_backward(g, cache)
        elif kind == "cmp":
            cmp_cache, cfg = cache
            g = cmp_backward(g, cmp_cache, cfg)
        elif kind == "elu":
            g = ops.elu_backward(g, cache)
        elif kind == "dropout":
            g = ops.dropout_backward(g, cache)
    return g


def predict(state: ModelState, x: np.ndarray, batch_size: int = 128) -> np.ndarray:
    out = [forward(state, x[i : i + batch_size], "eval")[0] for i in range(0, len(x), batch_size)]
    return np.concatenate(out).argmax(axis=1)


def copy_state(state: ModelState) -> ModelState:
    """Deep copy of parameters and running statistics (velocity included)."""
    fresh = build_model(state.spec, Rng(0))
    load_tensors(fresh, state.named_tensors())
    fresh.rng = state.rng
    fresh.velocity = {k: v.copy() for k, v in state.velocity.items()}
    return fresh


def load_tensors(state: ModelState, tensors: dict) -> None:
    for name, value in tensors.items():
        lid, _, field_name = name.rpartition(".")
        if field_name in ("running_mean", "running_var"):
            getattr(state.bn_states[lid], field_name)[...] = value
        else:
            state.params[name].value[...] = value


# --- model files ------------------------------------------------------------
#
# UTF-8 header of "name shape offset" lines (shape as AxBxC, offset relative to
# the first blob), a blank line, then one CMPT blob per tensor. Lines starting
# with '#' are comments; "# spec <json>" carries the ModelSpec.

MODEL_MAGIC = "# cmpnet-model 1"


def save_model(state: ModelState, path) -> None:
    tensors = state.named_tensors()
    lines = [MODEL_MAGIC, f"# spec {state.spec.to_json()}"]
    offset = 0
    for name, value in tensors.items():
        lines.append(f"{name} {'x'.join(map(str, value.shape))} {offset}")
        offset += blob_size(value.shape)
    with open(path, "wb") as fh:
        fh.write(("\n".join(lines) + "\n\n").encode("utf-8"))
        for value in tensors.values():
            fh.write(tensor_to_bytes(value))


def _read_header(fh):
    entries, spec_json, first = [], None, True
    while True:
        raw = fh.readline()
        if not raw:
            raise FormatError("model file ends inside the header")
        try:
            line = raw.decode("utf-8").rstrip("\n")
        except UnicodeDecodeError:
            raise FormatError("model header is not UTF-8") from None
        if first and line != MODEL_MAGIC:
            raise FormatError(f"not a cmpnet model file (first line {line[:40]!r})")
        first = False
        if line == "":
            return entries, spec_json
        if line.startswith("# spec "):
            spec_json = line[len("# spec ") :]
        elif line.startswith("#"):
            continue
        else:
            parts = line.split()
            if len(parts) != 3:
                raise FormatError(f"bad header line {line!r}")
            name, shape_txt, offset = parts
            try:
                shape = tuple(int(d) for d in shape_txt.split("x"))
                entries.append((name, shape, int(offset)))
            except ValueError:
                raise FormatError(f"bad header line {line!r}") from None


def load_model(path, spec: ModelSpec | None = None) -> ModelState:
    """Load a model file; ``spec`` defaults to the one embedded in the file."""
    path = Path(path)
    try:
        with open(path, "rb") as fh:
            entries, spec_json = _read_header(fh)
            base = fh.tell()
            tensors = {}
            for name, shape, offset in entries:
                fh.seek(base + offset)
                value = read_tensor(fh)
                if value.shape != shape:
                    raise FormatError(f"tensor {name}: blob shape {value.shape} != header {shape}")
                tensors[name] = value
    except OSError as exc:
        raise FormatError(f"{path}: {exc}") from None
    except FormatError as exc:
        raise FormatError(f"{path}: {exc}") from None

    if spec is None:
        if spec_json is None:
            raise FormatError(f"{path}: no embedded spec; pass one explicitly")
        try:
            spec = ModelSpec.from_json(spec_json)
        except (ValueError, TypeError, KeyError) as exc:
            raise FormatError(f"{path}: bad embedded spec: {exc}") from None
    expected = tensor_shapes(spec)
    for (name, shape), (want_name, want_shape) in zip(
        ((n, t.shape) for n, t in tensors.items()), expected.items()
    ):
        if name != want_name or shape != want_shape:
            raise FormatError(
                f"{path}: tensor {name} {shape} does not match expected {want_name} {want_shape}"
            )
    if len(tensors) != len(expected):
        missing = [n for n in expected if n not in tensors]
        extra = [n for n in tensors if n not in expected]
        raise FormatError(f"{path}: tensor count mismatch; missing {missing[:1]}, unexpected {extra[:1]}")
    state = build_model(spec, Rng(0))
    load_tensors(state, tensors)
    return state
