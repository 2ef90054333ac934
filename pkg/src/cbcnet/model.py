"""Declarative model configs: building networks and static parameter accounting.

A config is a JSON object::

    {
      "schema_version": 1,
      "name": "tiny",
      "input_shape": [1, 16, 16],
      "num_classes": 4,
      "alpha": 1.0,            # default for every hybrid_conv
      "variant": "spfw",       # default for every hybrid_conv
      "conv_bias": true,       # default for every hybrid_conv
      "layers": [ {"kind": "hybrid_conv", "out_channels": 8, "kernel": 3, "padding": 1}, ... ]
    }

Layer kinds: ``hybrid_conv``, ``batchnorm``, ``relu``, ``maxpool`` (2x2),
``global_avg_pool``, ``dense`` and ``bottleneck`` (with optional ``repeat``).
Input channel counts are inferred from the chain; an explicit
``in_channels`` on a layer is checked against it.
"""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from . import cbc_basis as cb
from .errors import ConfigError
from .hybrid_layer import HybridConv, hybrid_param_count
from .layers import BatchNorm2d, Bottleneck, Dense, GlobalAvgPool, Layer, MaxPool2x2, ReLU, Sequential
from .tensor_core import ConvGeometry

SCHEMA_VERSION = 1
PRESETS = ("tiny", "vgg16bn", "resnet50")
LAYER_KINDS = ("hybrid_conv", "batchnorm", "relu", "maxpool", "global_avg_pool", "dense", "bottleneck")


# ---------------------------------------------------------------------------
# config loading


def load_preset(name: str) -> dict:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; available: {', '.join(PRESETS)}")
    text = resources.files("cbcnet").joinpath("configs").joinpath(f"{name}.json").read_text()
    return json.loads(text)


def load_config(path_or_name: str | Path) -> dict:
    """Load a config file; a missing path falls back to a shipped preset of the same stem."""
    path = Path(path_or_name)
    if path.is_file():
        try:
            cfg = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    elif path.stem in PRESETS and path.suffix in ("", ".json"):
        cfg = load_preset(path.stem)
    else:
        raise ConfigError(f"config not found: {path}")
    validate_config(cfg)
    return cfg


def config_hash(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:12]


def with_overrides(config: dict, alpha: float | None = None, variant: str | None = None) -> dict:
    """Copy of ``config`` with global and per-layer alpha/variant replaced."""
    cfg = copy.deepcopy(config)

    def visit(layers):
        for spec in layers:
            if alpha is not None:
                spec.pop("alpha", None)
            if variant is not None:
                spec.pop("variant", None)

    visit(cfg["layers"])
    if alpha is not None:
        cfg["alpha"] = float(alpha)
    if variant is not None:
        cfg["variant"] = variant
    return cfg


def baseline_of(config: dict) -> dict:
    cfg = with_overrides(config, alpha=0.0)
    cfg["name"] = f"{config.get('name', 'model')}-baseline"
    return cfg


# ---------------------------------------------------------------------------
# static planning


@dataclass
class ConvPlan:
    geom: ConvGeometry
    alpha: float
    variant: str
    use_bias: bool


@dataclass
class PlanItem:
    kind: str
    in_shape: tuple[int, int, int]
    out_shape: tuple[int, int, int]
    conv: ConvPlan | None = None
    units: int = 0
    blocks: list[list["PlanItem"]] = field(default_factory=list)  # bottleneck: [main, shortcut] per block


def _conv_item(spec: dict, cfg: dict, shape, out_channels, kernel, stride=1, padding=0) -> PlanItem:
    c, h, w = shape
    if "in_channels" in spec and spec["in_channels"] != c:
        raise ConfigError(f"layer expects {spec['in_channels']} input channels, chain provides {c}")
    alpha = float(spec.get("alpha", cfg.get("alpha", 0.0)))
    variant = spec.get("variant", cfg.get("variant", "spfw"))
    cb.parse_variant(variant)
    if not 0.0 <= alpha <= 1.0:
        raise ConfigError(f"alpha must lie in [0, 1], got {alpha}")
    try:
        geom = ConvGeometry(kernel, kernel, c, out_channels, stride, padding)
        ho, wo = geom.output_hw(h, w)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    use_bias = bool(spec.get("bias", cfg.get("conv_bias", True)))
    return PlanItem("hybrid_conv", shape, (out_channels, ho, wo), conv=ConvPlan(geom, alpha, variant, use_bias))


def _bottleneck_blocks(spec: dict, cfg: dict, shape) -> tuple[list, tuple]:
    width = int(spec["width"])
    out_c = int(spec.get("out_channels", 4 * width))
    blocks = []
    for b in range(int(spec.get("repeat", 1))):
        stride = int(spec.get("stride", 1)) if b == 0 else 1
        main, s = [], shape
        for j, (oc, k, st, pad) in enumerate(((width, 1, 1, 0), (width, 3, stride, 1), (out_c, 1, 1, 0))):
            item = _conv_item(spec, cfg, s, oc, k, st, pad)
            main.append(item)
            main.append(PlanItem("batchnorm", item.out_shape, item.out_shape))
            s = item.out_shape
            if j < 2:
                main.append(PlanItem("relu", s, s))
        short = []
        if stride != 1 or shape[0] != out_c:
            item = _conv_item(spec, cfg, shape, out_c, 1, stride, 0)
            if item.out_shape != s:
                raise ConfigError(f"projection shortcut shape {item.out_shape} != main path {s}")
            short = [item, PlanItem("batchnorm", item.out_shape, item.out_shape)]
        blocks.append([main, short])
        shape = s
    return blocks, shape


def plan(config: dict) -> list[PlanItem]:
    """Resolve every layer's shapes and settings without allocating weights."""
    validate_config(config, deep=False)
    shape = tuple(int(v) for v in config["input_shape"])
    items = []
    for i, spec in enumerate(config["layers"]):
        kind = spec.get("kind")
        try:
            if kind == "hybrid_conv":
                item = _conv_item(
                    spec, config, shape, int(spec["out_channels"]), int(spec.get("kernel", 3)),
                    int(spec.get("stride", 1)), int(spec.get("padding", 0)),
                )
            elif kind == "batchnorm":
                if "channels" in spec and spec["channels"] != shape[0]:
                    raise ConfigError(f"batchnorm has {spec['channels']} channels, chain provides {shape[0]}")
                item = PlanItem(kind, shape, shape)
            elif kind == "relu":
                item = PlanItem(kind, shape, shape)
            elif kind == "maxpool":
                out = (shape[0], shape[1] // 2, shape[2] // 2)
                if min(out) < 1:
                    raise ConfigError(f"maxpool on {shape} leaves no pixels")
                item = PlanItem(kind, shape, out)
            elif kind == "global_avg_pool":
                item = PlanItem(kind, shape, (shape[0], 1, 1))
            elif kind == "dense":
                units = int(spec.get("units", config["num_classes"]))
                item = PlanItem(kind, shape, (units, 1, 1), units=units)
            elif kind == "bottleneck":
                blocks, out = _bottleneck_blocks(spec, config, shape)
                item = PlanItem(kind, shape, out, blocks=blocks)
            else:
                raise ConfigError(f"unknown layer kind {kind!r}")
        except (KeyError, TypeError) as exc:
            raise ConfigError(f"layer {i} ({kind}): missing or invalid field {exc}") from None
        except ConfigError as exc:
            raise ConfigError(f"layer {i} ({kind}): {exc}") from None
        items.append(item)
        shape = item.out_shape
    if not items or items[-1].kind != "dense" or items[-1].units != config["num_classes"]:
        raise ConfigError(f"final layer must be a dense layer with num_classes={config['num_classes']} units")
    return items


def validate_config(config: dict, deep: bool = True) -> None:
    if not isinstance(config, dict):
        raise ConfigError("config must be a JSON object")
    if config.get("schema_version") != SCHEMA_VERSION:
        raise ConfigError(f"unsupported schema_version {config.get('schema_version')!r}")
    for key in ("input_shape", "num_classes", "layers"):
        if key not in config:
            raise ConfigError(f"config missing {key!r}")
    shape = config["input_shape"]
    if not isinstance(shape, list) or len(shape) != 3 or min(shape) < 1:
        raise ConfigError(f"input_shape must be [C, H, W] with positive entries, got {shape}")
    if not isinstance(config["num_classes"], int) or config["num_classes"] < 2:
        raise ConfigError("num_classes must be an integer >= 2")
    if deep:
        plan(config)


def _walk_convs(items: list[PlanItem]):
    for item in items:
        if item.kind in ("hybrid_conv", "batchnorm"):
            yield item
        elif item.kind == "bottleneck":
            for main, short in item.blocks:
                yield from _walk_convs(main)
                yield from _walk_convs(short)


def count_conv_params(config: dict) -> int:
    """Parameters of all convolutional layers plus their batchnorm affine terms.

    Dense/classifier parameters are excluded.
    """
    total = 0
    for item in _walk_convs(plan(config)):
        if item.kind == "hybrid_conv":
            cp = item.conv
            total += hybrid_param_count(cp.geom, cp.alpha, cp.variant, cp.use_bias)
        else:
            total += 2 * item.in_shape[0]
    return total


def compression_factor(baseline: dict, candidate: dict) -> float:
    return count_conv_params(baseline) / count_conv_params(candidate)


def format_factor(baseline_count: int, candidate_count: int) -> str:
    """Compression factor truncated (not rounded) to two decimals."""
    hundredths = (100 * baseline_count) // candidate_count
    return f"{hundredths // 100}.{hundredths % 100:02d}"


# ---------------------------------------------------------------------------
# building


class Model:
    """A built network: a :class:`Sequential` plus the config it came from."""

    def __init__(self, config: dict, net: Sequential):
        self.config = config
        self.net = net

    def forward(self, x, training=True):
        return self.net.forward(x, training)

    def backward(self, grad_out):
        return self.net.backward(grad_out)

    def params(self) -> dict[str, np.ndarray]:
        return self.net.params()

    @property
    def grad(self) -> dict[str, np.ndarray]:
        return self.net.grad

    def conv_param_count(self) -> int:
        return sum(layer.param_count() for layer in iter_layers(self.net) if isinstance(layer, (HybridConv, BatchNorm2d)))

    def param_count(self) -> int:
        return self.net.param_count()

    def ledger(self) -> list[tuple[str, str, int]]:
        """``(path, kind, parameter count)`` for every leaf layer."""
        return [(path, layer.kind, layer.param_count()) for path, layer in iter_named_layers(self.net)]

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "config": self.config,
            "layers": [[path, layer.state_dict()] for path, layer in iter_named_layers(self.net)],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_dict(cls, d: dict) -> "Model":
        model = build(d["config"], seed=0)
        states = dict((path, st) for path, st in d["layers"])
        for path, layer in iter_named_layers(model.net):
            if path not in states or states[path]["type"] != layer.kind:
                raise ConfigError(f"serialized model lacks a matching entry for layer {path}")
            layer.load_arrays(states[path])
        return model

    @classmethod
    def from_json(cls, text: str) -> "Model":
        return cls.from_dict(json.loads(text))


def iter_named_layers(layer: Layer, prefix: str = ""):
    if isinstance(layer, Sequential):
        for i, sub in enumerate(layer.layers):
            yield from iter_named_layers(sub, f"{prefix}{i}.")
    elif isinstance(layer, Bottleneck):
        yield from iter_named_layers(layer.main, f"{prefix}main.")
        if layer.shortcut is not None:
            yield from iter_named_layers(layer.shortcut, f"{prefix}short.")
    else:
        yield prefix.rstrip("."), layer


def iter_layers(layer: Layer):
    for _, leaf in iter_named_layers(layer):
        yield leaf


def _build_items(items: list[PlanItem], seeds: np.random.SeedSequence) -> list[Layer]:
    layers: list[Layer] = []
    for item in items:
        if item.kind == "hybrid_conv":
            cp = item.conv
            layers.append(HybridConv.init(cp.geom, cp.alpha, cp.variant, seeds.spawn(1)[0], cp.use_bias))
        elif item.kind == "batchnorm":
            layers.append(BatchNorm2d(item.in_shape[0]))
        elif item.kind == "relu":
            layers.append(ReLU())
        elif item.kind == "maxpool":
            layers.append(MaxPool2x2())
        elif item.kind == "global_avg_pool":
            layers.append(GlobalAvgPool())
        elif item.kind == "dense":
            in_features = int(np.prod(item.in_shape))
            layers.append(Dense(in_features, item.units, np.random.default_rng(seeds.spawn(1)[0])))
        elif item.kind == "bottleneck":
            blocks = []
            for main, short in item.blocks:
                main_seq = Sequential(_build_items(main, seeds))
                short_seq = Sequential(_build_items(short, seeds)) if short else None
                blocks.append(Bottleneck(main_seq, short_seq))
            layers.append(Sequential(blocks))
    return layers


def build(config: dict, seed: int = 0) -> Model:
    """Instantiate every layer of ``config``; deterministic in ``seed``."""
    items = plan(config)
    return Model(config, Sequential(_build_items(items, np.random.SeedSequence(seed))))
