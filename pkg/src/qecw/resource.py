"""MAC counting, the PE-parallel cycle model, and model-size accounting.

A layer with N effective MACs takes ceil(N / P_max) cycles on a device with
P_max one-MAC-per-clock processing elements; the total is padded by 10% and
rounded to the nearest cycle.  Sparsity is modelled as a uniform reduction of
every layer's MACs.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field

from .errors import InvalidParameterError

OVERHEAD = 1.1
F_CLK = 300e6
COUNTED_KINDS = ("conv1d", "conv2d", "conv3d", "dense", "attention")
NORM_KINDS = ("batchnorm", "layernorm")

TCN_WIDTHS = {"tiny": (16, 32), "small": (32, 64), "large": (64, 128)}
MLP_WIDTHS = {"small": 512, "large": 1024}
CNN3D_WIDTHS = {"small": (16, 32, 4), "large": (32, 64, 8)}
TRANSFORMER_WIDTHS = {"small": (8, 16, 32, 64, 4, 256), "large": (16, 32, 64, 128, 8, 512)}
TRANSFORMER_LAYERS = 3


@dataclass(frozen=True)
class DeviceSpec:
    name: str
    p_max: int
    f_clk: float = F_CLK
    note: str = "P_max = derated LUTs / 20 LUTs per INT4 MAC PE (50% derating)"

    def __post_init__(self):
        if self.p_max <= 0:
            raise InvalidParameterError(f"device {self.name}: P_max must be positive")


DEVICES = {
    "VP1802": DeviceSpec("VP1802", 84_022),
    "VP1902": DeviceSpec("VP1902", 211_507),
}


def get_device(name: str) -> DeviceSpec:
    try:
        return DEVICES[name.upper()]
    except KeyError:
        raise InvalidParameterError(f"unknown device {name!r}; known: {', '.join(DEVICES)}") from None


@dataclass(frozen=True)
class LayerDesc:
    name: str
    kind: str
    macs: int
    params: int
    prunable: bool = True


@dataclass(frozen=True)
class ArchDescriptor:
    family: str
    scale: str
    d: int
    r: int
    layers: tuple[LayerDesc, ...]
    dims: tuple[int, ...]
    approximate: bool = False

    @property
    def macs(self) -> int:
        return sum(layer.macs for layer in self.layers)

    @property
    def params(self) -> int:
        return sum(layer.params for layer in self.layers)

    @property
    def norm_params(self) -> int:
        return sum(layer.params for layer in self.layers if layer.kind in NORM_KINDS)


def _tcn(scale, d, r):
    c1, c2 = TCN_WIDTHS[scale]
    g = d + 1
    pos = r * g * g
    layers = [
        LayerDesc("embed", "embedding", 0, 0, prunable=False),
        LayerDesc("res_conv", "conv2d", 9 * c1 * c1 * pos, 9 * c1 * c1),
        LayerDesc("res_bn", "batchnorm", 0, 2 * c1, False),
        LayerDesc("conv1", "conv2d", 9 * c1 * c1 * pos, 9 * c1 * c1),
        LayerDesc("bn1", "batchnorm", 0, 2 * c1, False),
        LayerDesc("conv2", "conv2d", 9 * c1 * c2 * pos, 9 * c1 * c2),
        LayerDesc("bn2", "batchnorm", 0, 2 * c2, False),
        LayerDesc("conv3", "conv2d", 9 * c2 * c2 * pos, 9 * c2 * c2),
        LayerDesc("bn3", "batchnorm", 0, 2 * c2, False),
        LayerDesc("tconv1", "conv1d", 3 * c2 * c2 * pos, 3 * c2 * c2),
        LayerDesc("tbn1", "batchnorm", 0, 2 * c2, False),
        LayerDesc("tconv2", "conv1d", 3 * c2 * c2 * pos, 3 * c2 * c2),
        LayerDesc("tbn2", "batchnorm", 0, 2 * c2, False),
        LayerDesc("proj", "dense", c2 * c2 * pos, c2 * c2 + c2),
        LayerDesc("norm", "layernorm", 0, 2 * c2, False),
        LayerDesc("head", "dense", c2, c2 + 1, prunable=False),
    ]
    return layers, (r, g, g), False


def _mlp(scale, d, r):
    h = MLP_WIDTHS[scale]
    n = r * (d * d - 1)
    layers = [LayerDesc("inp", "dense", n * h, n * h + h), LayerDesc("inp_norm", "layernorm", 0, 2 * h, False)]
    for k in range(6):
        layers += [LayerDesc(f"blocks.{k}.fc1", "dense", h * h, h * h + h),
                   LayerDesc(f"blocks.{k}.norm1", "layernorm", 0, 2 * h, False),
                   LayerDesc(f"blocks.{k}.fc2", "dense", h * h, h * h + h),
                   LayerDesc(f"blocks.{k}.norm2", "layernorm", 0, 2 * h, False)]
    layers.append(LayerDesc("head", "dense", h, h + 1, prunable=False))
    return layers, (n,), False


def _conv3d(name, cin, cout, vol, k=27):
    return LayerDesc(name, "conv3d", k * cin * cout * vol, k * cin * cout)


def _bn(name, c):
    return LayerDesc(name, "batchnorm", 0, 2 * c, False)


def _cnn3d(scale, dims):
    c1, c2, cb = CNN3D_WIDTHS[scale]
    t, h, w = dims
    v = t * h * w
    fc = cb * v // 4
    layers = [_conv3d("stem", 2, c1, v), _bn("stem_bn", c1)]
    for k, (cin, cout) in enumerate(((c1, c1), (c1, c2), (c2, c2)), 1):
        layers += [_conv3d(f"res{k}.conv1", cin, cout, v), _bn(f"res{k}.bn1", cout),
                   _conv3d(f"res{k}.conv2", cout, cout, v), _bn(f"res{k}.bn2", cout)]
        if cin != cout:
            layers += [_conv3d(f"res{k}.short", cin, cout, v, k=1), _bn(f"res{k}.short_bn", cout)]
    layers += [_conv3d("bottleneck", c2, cb, v, k=1), _bn("bottleneck_bn", cb),
               LayerDesc("fc", "dense", cb * v * fc, cb * v * fc), _bn("fc_bn", fc),
               LayerDesc("head", "dense", fc, fc + 1, prunable=False)]
    return layers, dims, True


def _transformer(scale, dims):
    c1, c2, c3, e, _heads, f = TRANSFORMER_WIDTHS[scale]
    t, h, w = dims
    v = t * h * w
    t2 = math.ceil(t / 2)
    v2 = t2 * h * w
    layers = [_conv3d("stem", 2, c1, v), _bn("stem_bn", c1)]
    blocks = (("res1", c1, c2, v, v), ("res2", c2, c2, v, v2), ("res3", c2, c3, v2, v2))
    for name, cin, cout, vin, vout in blocks:
        layers += [_conv3d(f"{name}.conv1", cin, cout, vout), _bn(f"{name}.bn1", cout),
                   _conv3d(f"{name}.conv2", cout, cout, vout), _bn(f"{name}.bn2", cout)]
        if cin != cout or vin != vout:
            layers += [_conv3d(f"{name}.short", cin, cout, vout, k=1), _bn(f"{name}.short_bn", cout)]
    layers.append(LayerDesc("proj", "conv3d", c3 * e * v2, c3 * e))
    s = v2
    for k in range(TRANSFORMER_LAYERS):
        layers += [
            LayerDesc(f"enc{k}.ln1", "layernorm", 0, 2 * e, False),
            LayerDesc(f"enc{k}.attn", "attention", 4 * e * e * s + 2 * s * s * e, 4 * e * e + 4 * e),
            LayerDesc(f"enc{k}.ln2", "layernorm", 0, 2 * e, False),
            LayerDesc(f"enc{k}.ffn1", "dense", e * f * s, e * f + f),
            LayerDesc(f"enc{k}.ffn2", "dense", f * e * s, f * e + e),
        ]
    layers += [LayerDesc("norm", "layernorm", 0, 2 * e, False),
               LayerDesc("head", "dense", e, e + 1, prunable=False)]
    return layers, (t2, h, w), True


def describe_arch(family: str, scale: str, d: int, r: int, dims: tuple[int, int, int] | None = None
                  ) -> ArchDescriptor:
    """Per-layer dense MACs and parameters.  ``dims`` overrides the CNN3D/Transformer (T, H, W) volume."""
    fam = family.upper()
    if d < 3 or d % 2 == 0 or r < 1:
        raise InvalidParameterError(f"need odd d >= 3 and r >= 1, got d={d}, r={r}")
    tables = {"TCN": TCN_WIDTHS, "MLP": MLP_WIDTHS, "CNN3D": CNN3D_WIDTHS, "TRANSFORMER": TRANSFORMER_WIDTHS}
    if fam == "GNN":
        raise InvalidParameterError("GNN resource estimates are not supported")
    if fam not in tables:
        raise InvalidParameterError(f"unknown family {family!r}")
    if scale not in tables[fam]:
        raise InvalidParameterError(f"{fam} has no scale {scale!r}; choose from {sorted(tables[fam])}")
    vol = tuple(dims) if dims is not None else (r + 1, d + 1, d + 1)
    if fam == "TCN":
        layers, used, approx = _tcn(scale, d, r)
    elif fam == "MLP":
        layers, used, approx = _mlp(scale, d, r)
    elif fam == "CNN3D":
        layers, used, approx = _cnn3d(scale, vol)
    else:
        layers, used, approx = _transformer(scale, vol)
        fam = "Transformer"
    return ArchDescriptor(fam, scale, d, r, tuple(layers), used, approx)


def effective_macs(desc: ArchDescriptor, sparsity: float) -> list[float]:
    if not 0 <= sparsity < 1:
        raise InvalidParameterError(f"sparsity must lie in [0, 1), got {sparsity}")
    return [layer.macs * (1 - sparsity) for layer in desc.layers]


@dataclass
class LatencyReport:
    device: str
    sparsity: float
    f_clk: float
    layers: list[dict] = field(default_factory=list)
    total_macs: float = 0.0
    cycles: int = 0

    @property
    def latency_s(self) -> float:
        return self.cycles / self.f_clk

    def to_dict(self) -> dict:
        return asdict(self) | {"latency_us": self.latency_s * 1e6}


def estimate_latency(desc: ArchDescriptor, sparsity: float, device: DeviceSpec | str,
                     f_clk: float | None = None) -> LatencyReport:
    dev = get_device(device) if isinstance(device, str) else device
    clock = f_clk or dev.f_clk
    if clock <= 0:
        raise InvalidParameterError("f_clk must be positive")
    report = LatencyReport(dev.name, sparsity, clock)
    raw = 0
    for layer, n in zip(desc.layers, effective_macs(desc, sparsity)):
        # the embedding is a table lookup folded into the first conv's input fetch: no cycles of its own
        cycles = math.ceil(n / dev.p_max) if layer.kind in COUNTED_KINDS and n > 0 else 0
        raw += cycles
        report.layers.append({"name": layer.name, "kind": layer.kind, "macs": n, "cycles": cycles})
    report.total_macs = sum(row["macs"] for row in report.layers)
    report.cycles = round(OVERHEAD * raw)
    return report


def model_size(desc: ArchDescriptor, bits: int, sparsity: float = 0.0) -> tuple[float, str]:
    """Bytes for nonzero weights at ``bits`` plus norm parameters kept at FP32."""
    if bits not in (4, 8, 32):
        raise InvalidParameterError(f"bits must be 4, 8 or 32, got {bits}")
    if not 0 <= sparsity < 1:
        raise InvalidParameterError(f"sparsity must lie in [0, 1), got {sparsity}")
    body = desc.params - desc.norm_params
    size = body * (1 - sparsity) * bits / 8 + desc.norm_params * 4
    return size, f"{body}*(1-{sparsity})*{bits}/8 + {desc.norm_params}*4"


CSV_FIELDS = ("model", "d", "scale", "sparsity", "macs", "params", "size_bytes", "device", "cycles", "latency_us")


def report_row(desc: ArchDescriptor, sparsity: float, device: str, bits: int = 4, f_clk: float | None = None
               ) -> dict:
    lat = estimate_latency(desc, sparsity, device, f_clk)
    size, formula = model_size(desc, bits, sparsity)
    return {
        "model": desc.family, "d": desc.d, "scale": desc.scale, "sparsity": sparsity,
        "macs": round(lat.total_macs), "params": desc.params, "size_bytes": round(size), "device": lat.device,
        "cycles": lat.cycles, "latency_us": round(lat.latency_s * 1e6, 6),
        "approximate": desc.approximate, "size_formula": formula, "layers": lat.layers,
    }


def rows_to_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=CSV_FIELDS, extrasaction="ignore", lineterminator="\n")
    w.writeheader()
    w.writerows(rows)
    return buf.getvalue()


def rows_to_json(rows: list[dict]) -> str:
    return json.dumps(rows, indent=2, sort_keys=True) + "\n"
