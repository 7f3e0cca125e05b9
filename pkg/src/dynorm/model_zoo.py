"""Declarative model specs, their instantiation and forward pass, and cost models."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from . import normalization as nz
from . import tensor as T
from .autodiff import Node
from .layers import ConfigError, Scope, conv2d, conv_out_size, fc, global_avg_pool

NORM_KINDS = ("none", "bn", "se+bn", "dnb", "dnc-a", "dnc-b")


@dataclass(frozen=True)
class LayerSpec:
    kind: str  # conv | norm | relu | gap | fc | classifier
    name: str = ""
    in_ch: int = 0
    out_ch: int = 0
    kernel: int = 1
    stride: int = 1
    groups: int = 1
    bias: bool = False
    norm: str = "none"
    r: int = 16
    g: int | str = 1

    def sc_config(self) -> nz.SCModuleConfig:
        return nz.SCModuleConfig(self.in_ch, self.r, self.g)


@dataclass(frozen=True)
class ModelSpec:
    layers: tuple[LayerSpec, ...]
    input_shape: tuple[int, int, int]  # (C, H, W)
    classes: int

    def __post_init__(self):
        validate(self)

    def norm_layers(self) -> list[LayerSpec]:
        return [l for l in self.layers if l.kind == "norm" and l.norm != "none"]


@dataclass
class CostReport:
    params: int
    mult_adds: int
    per_layer: list[dict] = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)


def validate(spec: ModelSpec) -> None:
    c, h, w = spec.input_shape
    flat = False
    layers = spec.layers
    if sum(l.kind == "classifier" for l in layers) != 1 or layers[-1].kind != "classifier":
        raise ConfigError("exactly one classifier head, as the last layer")
    names = [l.name for l in layers]
    if len(set(names)) != len(names):
        raise ConfigError("layer names must be unique")
    for i, l in enumerate(layers):
        if l.kind == "conv":
            if flat or l.in_ch != c:
                raise ConfigError(f"{l.name}: expects {l.in_ch} channels, gets {c}")
            if l.kernel not in (1, 3):
                raise ConfigError(f"{l.name}: kernel must be 1 or 3")
            pad = l.kernel // 2
            h, w = conv_out_size(h, l.kernel, l.stride, pad), conv_out_size(w, l.kernel, l.stride, pad)
            if h < 1 or w < 1:
                raise ConfigError(f"{l.name}: spatial size collapses")
            c = l.out_ch
            if i + 1 >= len(layers) or layers[i + 1].kind != "norm":
                raise ConfigError(f"{l.name}: every conv must be followed by a norm slot")
        elif l.kind == "norm":
            if flat or l.in_ch != c:
                raise ConfigError(f"{l.name}: expects {l.in_ch} channels, gets {c}")
            if l.norm not in NORM_KINDS:
                raise ConfigError(f"{l.name}: unknown norm {l.norm!r}")
            if l.norm in nz.DN_VARIANTS:
                l.sc_config()
            elif l.norm == "se+bn" and (l.r < 1 or c % l.r):
                raise ConfigError(f"{l.name}: r={l.r} must divide {c}")
        elif l.kind == "gap":
            flat = True
        elif l.kind in ("fc", "classifier"):
            if not flat or l.in_ch != c:
                raise ConfigError(f"{l.name}: expects {l.in_ch} features, gets {c}")
            if l.in_ch % l.groups or l.out_ch % l.groups:
                raise ConfigError(f"{l.name}: groups must divide in and out")
            c = l.out_ch
        elif l.kind != "relu":
            raise ConfigError(f"unknown layer kind {l.kind!r}")
    if c != spec.classes:
        raise ConfigError(f"classifier emits {c} logits, expected {spec.classes}")


def build_toycnn(norm: str = "bn", r: int = 4, g: int | str = 1, width: float = 1.0,
                 classes: int = 10, image_size: int = 32, in_channels: int = 3) -> ModelSpec:
    """Six 3x3 conv-norm-relu blocks (16w, 16w, 32w/s2, 32w, 64w/s2, 64w), GAP, FC."""
    if width <= 0:
        raise ConfigError("width multiplier must be positive")
    if norm not in NORM_KINDS:
        raise ConfigError(f"unknown norm {norm!r}")
    g = nz.parse_g(g)
    plan = [(16, 1), (16, 1), (32, 2), (32, 1), (64, 2), (64, 1)]
    layers: list[LayerSpec] = []
    cin = in_channels
    for i, (base, stride) in enumerate(plan, 1):
        cout = max(1, int(round(base * width)))
        layers.append(LayerSpec("conv", f"conv{i}", cin, cout, 3, stride, bias=norm == "none"))
        layers.append(LayerSpec("norm", f"norm{i}", cout, cout, norm=norm, r=r, g=g))
        layers.append(LayerSpec("relu", f"relu{i}"))
        cin = cout
    layers.append(LayerSpec("gap", "gap"))
    layers.append(LayerSpec("classifier", "fc", cin, classes, bias=True))
    return ModelSpec(tuple(layers), (in_channels, image_size, image_size), classes)


# instantiation and forward ---------------------------------------------------

def init_params(spec: ModelSpec, seed: int) -> tuple[dict, dict]:
    """Parameters and buffers for ``spec``.

    Every layer draws from its own stream keyed by (seed, layer index), so
    conv and classifier weights are identical across norm kinds.
    """
    params: dict[str, np.ndarray] = {}
    buffers: dict[str, np.ndarray] = {}
    for idx, l in enumerate(spec.layers):
        rng = T.make_rng((seed, idx))
        p = l.name
        if l.kind == "conv":
            fan_in = l.in_ch * l.kernel * l.kernel
            params[f"{p}/weight"] = T.normal((l.out_ch, l.in_ch, l.kernel, l.kernel), rng, 0.0,
                                             float(np.sqrt(2.0 / fan_in)))
            if l.bias:
                params[f"{p}/bias"] = T.zeros((l.out_ch,))
        elif l.kind in ("fc", "classifier"):
            gi = l.in_ch // l.groups
            params[f"{p}/linear.weight"] = T.uniform((l.out_ch, gi), rng, -1 / np.sqrt(gi), 1 / np.sqrt(gi))
            if l.bias:
                params[f"{p}/linear.bias"] = T.zeros((l.out_ch,))
        elif l.kind == "norm" and l.norm != "none":
            if l.norm in nz.DN_VARIANTS:
                pp, bb = nz.init_dn(p, l.sc_config(), l.norm, rng)
            else:
                pp, bb = nz.init_bn(p, l.in_ch)
                if l.norm == "se+bn":
                    pp.update(nz.init_se(p, l.in_ch, l.r, rng))
            params.update(pp)
            buffers.update(bb)
    return params, buffers


def forward(spec: ModelSpec, scope: Scope, x: Node, mode: str) -> Node:
    """Logits (N, classes) for a batch of images."""
    for l in spec.layers:
        if l.kind == "conv":
            bias = scope.param(f"{l.name}/bias") if l.bias else None
            x = conv2d(x, scope.param(f"{l.name}/weight"), bias, l.stride, l.kernel // 2)
        elif l.kind == "norm":
            x = norm_forward(scope, l, x, mode)
        elif l.kind == "relu":
            x = ad.relu(x)
        elif l.kind == "gap":
            x = global_avg_pool(x)
        else:
            x = fc(scope, f"{l.name}/linear", x, l.groups)
    return x


def norm_forward(scope: Scope, l: LayerSpec, x: Node, mode: str) -> Node:
    if l.norm == "none":
        return x
    if l.norm == "bn":
        return nz.bn_forward(scope, l.name, x, mode)
    if l.norm == "se+bn":
        return nz.se_bn_forward(scope, l.name, x, mode)
    return nz.dn_forward(scope, l.name, x, l.sc_config(), l.norm, mode)


# cost model --------------------------------------------------------------------

def norm_cost(norm: str, channels: int, r: int, g) -> tuple[int, int]:
    """(params, mult-adds per sample) of one norm slot."""
    if norm == "none":
        return 0, 0
    if norm == "bn":
        return 2 * channels, 0
    if norm == "se+bn":
        hid = channels // r
        return 2 * channels * hid + hid + channels + 2 * channels, 2 * channels * hid
    cfg = nz.SCModuleConfig(channels, r, g)
    return nz.dn_param_count(cfg, norm), nz.dn_mult_adds(cfg, norm)


def count_params(spec: ModelSpec) -> CostReport:
    """Exact trainable-parameter count and Mult-Adds at the model's input resolution.

    Mult-Adds count one multiply-accumulate per weight use; bias and
    normalization arithmetic are excluded.
    """
    c, h, w = spec.input_shape
    rows = []
    for l in spec.layers:
        params = madds = 0
        if l.kind == "conv":
            pad = l.kernel // 2
            h, w = conv_out_size(h, l.kernel, l.stride, pad), conv_out_size(w, l.kernel, l.stride, pad)
            params = l.out_ch * l.in_ch * l.kernel ** 2 + (l.out_ch if l.bias else 0)
            madds = l.out_ch * l.in_ch * l.kernel ** 2 * h * w
        elif l.kind == "norm":
            params, madds = norm_cost(l.norm, l.in_ch, l.r, l.g)
        elif l.kind in ("fc", "classifier"):
            params = l.in_ch * l.out_ch // l.groups + (l.out_ch if l.bias else 0)
            madds = l.in_ch * l.out_ch // l.groups
        rows.append({"name": l.name, "kind": l.kind if l.kind != "norm" else l.norm,
                     "params": params, "mult_adds": madds})
    return CostReport(sum(r["params"] for r in rows), sum(r["mult_adds"] for r in rows), rows)


# MobileNetV2 comparison table ----------------------------------------------------

MNV2_SETTINGS = ((1, 16, 1, 1), (6, 24, 2, 2), (6, 32, 3, 2), (6, 64, 4, 2),
                 (6, 96, 3, 1), (6, 160, 3, 2), (6, 320, 1, 1))
POLICIES = ("all-bn", "expand-only", "project-only")

# published totals, for side-by-side display only
PUBLISHED_MNV2 = {
    ("bn", None, None): ("2.35M", "299.62M"),
    ("se+bn", 16, None): ("3.73M", "300.98M"),
    ("dnc-a", 16, None): ("3.03M", "301.02M"),
    ("dnc-b", 16, None): ("3.03M", "301.05M"),
    ("dnb", 8, 1): ("3.72M", "301.02M"),
    ("dnb", 16, 1): ("3.03M", "300.34M"),
    ("dnb", 32, 1): ("2.69M", "300.00M"),
    ("dnb", 16, 2): ("3.07M", "300.37M"),
    ("dnb", 16, 4): ("3.14M", "300.44M"),
    ("dnb", 16, "oup"): ("4.36M", "301.66M"),
}


def published_figures(norm: str, r, g) -> tuple[str, str] | None:
    if norm == "bn":
        return PUBLISHED_MNV2[("bn", None, None)]
    if norm in ("se+bn", "dnc-a", "dnc-b"):
        return PUBLISHED_MNV2.get((norm, r, None))
    return PUBLISHED_MNV2.get((norm, r, g))


def _mnv2_layers(classes: int, resolution: int):
    """(kind, role, cin, cout, kernel, stride, depthwise) entries of the standard net."""
    out = [("conv", "stem", 3, 32, 3, 2, False)]
    cin = 32
    for t, c, n, s in MNV2_SETTINGS:
        for i in range(n):
            hidden = cin * t
            if t != 1:
                out.append(("conv", "expand", cin, hidden, 1, 1, False))
            out.append(("conv", "depthwise", hidden, hidden, 3, s if i == 0 else 1, True))
            out.append(("conv", "project", hidden, c, 1, 1, False))
            cin = c
    out.append(("conv", "last", cin, 1280, 1, 1, False))
    return out


def _lenient_dn_cost(norm: str, c: int, r: int, g) -> tuple[int, int]:
    # MobileNetV2 widths (e.g. 24, 144) are not all divisible by r; floor the
    # hidden width instead of rejecting the layer.
    hid = max(1, c // r)
    gw = hid if g == nz.OUP else min(int(g), hid)
    if norm == "se+bn":
        return 2 * c * hid + hid + c + 2 * c, 2 * c * hid
    if norm == "dnb":
        return c * hid + gw * 2 * c + 2 * c, c * hid + gw * 2 * c
    if norm == "dnc-a":
        return 2 * c * hid + gw * 2 * c + 2 * c, 2 * c * hid + gw * 2 * c
    return 2 * c * hid + 2 * gw * 2 * c + 2 * c, 2 * c * hid + 2 * gw * 2 * c


def mobilenetv2_cost_table(norm: str = "bn", r: int = 16, g=1, policy: str = "all-bn",
                           classes: int = 100, resolution: int = 224) -> CostReport:
    """Analytic cost of MobileNetV2 (width 1.0) with some BN layers swapped for ``norm``.

    ``policy`` chooses which BN layers are replaced: every one (``all-bn``),
    only those after expansion 1x1 convs (``expand-only``), or only those after
    projection 1x1 convs (``project-only``).
    """
    if policy not in POLICIES:
        raise ConfigError(f"policy must be one of {POLICIES}")
    if norm not in NORM_KINDS or norm == "none":
        raise ConfigError(f"unknown norm {norm!r}")
    g = nz.parse_g(g)
    size = resolution
    rows = []
    for kind, role, cin, cout, k, s, dw in _mnv2_layers(classes, resolution):
        size = conv_out_size(size, k, s, k // 2)
        w_params = cout * k * k if dw else cout * cin * k * k
        rows.append({"name": f"{role}{len(rows)}", "kind": "conv", "params": w_params,
                     "mult_adds": w_params * size * size})
        replace = norm != "bn" and (policy == "all-bn" or policy == f"{role}-only")
        if replace:
            p, m = _lenient_dn_cost(norm, cout, r, g)
        else:
            p, m = 2 * cout, 0
        rows.append({"name": f"{role}{len(rows)}_norm", "kind": norm if replace else "bn",
                     "params": p, "mult_adds": m})
    rows.append({"name": "classifier", "kind": "classifier", "params": 1280 * classes + classes,
                 "mult_adds": 1280 * classes})
    return CostReport(sum(r["params"] for r in rows), sum(r["mult_adds"] for r in rows), rows)
