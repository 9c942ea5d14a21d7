"""Batch-norm folding, PTQ, QAT and global magnitude pruning.

Quantisation is symmetric: weights per output channel with a scale that is
recomputed from the live weights on every forward, activations per tensor
with a scale calibrated once from max |x| and then frozen.  Activations that
never go negative during calibration (everything after a ReLU) use the
unsigned code range [0, 2^b - 1], so no levels are spent on values that
cannot occur.  Pruning ranks the
deployable (quantised) magnitudes of every maskable weight in one pool.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass

import numpy as np

from .autodiff import Identity, Parameter, QuantState, no_grad
from .autodiff.nn import BatchNorm, _Affine, weight_scale
from .autodiff.ops import code_range, round_half_even
from .errors import InvalidParameterError
from .models import Decoder, TrainConfig, TrainResult, train
from .pauli_sim import ShotDataset

# (affine layer, batch norm) pairs that fold; MLP has none
FOLD_PAIRS = {
    "TCN": (("res_conv", "res_bn"), ("conv1", "bn1"), ("conv2", "bn2"), ("conv3", "bn3"),
            ("tconv1", "tbn1"), ("tconv2", "tbn2")),
    "MLP": (),
}
PROTECTED = ("head",)
CALIBRATION_BATCHES = 50


@dataclass(frozen=True)
class QuantConfig:
    w_bits: int = 4
    a_bits: int = 4

    def __post_init__(self):
        for name in ("w_bits", "a_bits"):
            bits = getattr(self, name)
            if not isinstance(bits, int) or not 2 <= bits <= 32:
                raise InvalidParameterError(f"{name} must be an integer in [2, 32], got {bits!r}")

    @property
    def label(self) -> str:
        return f"W{self.w_bits}A{self.a_bits}"


@dataclass
class PruneMask:
    masks: dict[str, np.ndarray]
    sparsity: float
    threshold: float
    protected: tuple[str, ...] = PROTECTED

    @property
    def measured_sparsity(self) -> float:
        total = sum(m.size for m in self.masks.values())
        return 1.0 - sum(int(m.sum()) for m in self.masks.values()) / total


# -- quantiser ------------------------------------------------------------------

def quantize(x: np.ndarray, scale, bits: int, axis: int | None = None, signed: bool = True) -> np.ndarray:
    """Fake-quantised values scale * clip(round_half_even(x / scale))."""
    return scale_grid(x, scale, axis) * integer_codes(x, scale, bits, axis, signed)


def integer_codes(x: np.ndarray, scale, bits: int, axis: int | None = None, signed: bool = True) -> np.ndarray:
    qmin, qmax = code_range(bits, signed)
    s = scale_grid(x, scale, axis)
    return np.clip(round_half_even(x / s), qmin, qmax).astype(np.int64)


def scale_grid(x: np.ndarray, scale, axis: int | None) -> np.ndarray:
    s = np.asarray(scale, dtype=x.dtype)
    if axis is not None and s.ndim == 1:
        shape = [1] * x.ndim
        shape[axis] = -1
        s = s.reshape(shape)
    return np.where(s > 0, s, np.asarray(1.0, x.dtype))


def integer_dense(layer, x: np.ndarray) -> tuple[np.ndarray, np.ndarray, float]:
    """Integer path of a quantised dense layer: (int64 accumulator, weight scales, activation scale).

    The float output is ``acc * w_scale * a_scale + bias``.
    """
    q = layer.quant
    if q is None or q.a_scale is None:
        raise InvalidParameterError("integer_dense needs a calibrated quantised layer")
    w = layer.weight.data
    ws = weight_scale(w, q.w_bits)
    wq = integer_codes(w, ws, q.w_bits, axis=0)
    xq = integer_codes(x, q.a_scale, q.a_bits, signed=not q.a_unsigned)
    return xq @ wq.T, ws, q.a_scale


# -- batch-norm folding -----------------------------------------------------------

def _fold_structure(model: Decoder):
    """Replace folded norms by identities and give their conv a bias slot (values set by the caller)."""
    for conv_name, bn_name in FOLD_PAIRS[model.spec.family]:
        conv = getattr(model, conv_name)
        if conv.bias is None:
            conv.bias = Parameter(np.zeros(conv.weight.shape[0], conv.weight.dtype))
        setattr(model, bn_name, Identity())
    model.folded = True
    return model


def fold_batchnorm(model: Decoder) -> Decoder:
    """Eval-equivalent copy with every conv+BN pair merged into one biased conv."""
    if model.training:
        raise InvalidParameterError("fold_batchnorm needs an eval-mode model (call .eval() first)")
    folded = copy.deepcopy(model)
    if getattr(model, "folded", False):
        return folded
    stats = []
    for conv_name, bn_name in FOLD_PAIRS[model.spec.family]:
        bn: BatchNorm = getattr(folded, bn_name)
        conv = getattr(folded, conv_name)
        k = bn.gamma.data / np.sqrt(bn.running_var + bn.eps)
        b = conv.bias.data if conv.bias is not None else 0.0
        stats.append((conv, (conv.weight.data * k.reshape((-1,) + (1,) * (conv.weight.ndim - 1))),
                      bn.beta.data + (b - bn.running_mean) * k))
    _fold_structure(folded)
    for conv, w, b in stats:
        conv.weight.data = w.astype(conv.weight.dtype)
        conv.bias.data = b.astype(conv.weight.dtype)
    return folded.eval()


# -- quantisation -----------------------------------------------------------------

def affine_layers(model: Decoder):
    return [(name, m) for name, m in model.modules() if isinstance(m, _Affine)]


def attach_quant(model: Decoder, qc: QuantConfig) -> Decoder:
    for _, layer in affine_layers(model):
        layer.quant = QuantState(qc.w_bits, qc.a_bits)
    return model


def calibrate(model: Decoder, bits: np.ndarray, batch: int = 512, n_batches: int = CALIBRATION_BATCHES):
    """Set each layer's activation scale from max |input| over the first ``n_batches`` batches."""
    if len(bits) == 0:
        raise InvalidParameterError("calibration set is empty")
    layers = affine_layers(model)
    for _, layer in layers:
        q = layer.quant
        q.calibrating, q.a_absmax, q.a_min, q.a_scale, q.a_unsigned = True, 0.0, 0.0, None, False
    was_training = model.training
    model.eval()
    with no_grad():
        for k in range(n_batches):
            chunk = bits[k * batch:(k + 1) * batch]
            if len(chunk) == 0:
                break
            model(chunk)
    for _, layer in layers:
        q = layer.quant
        q.calibrating = False
        q.a_unsigned = q.a_min >= 0
        q.a_scale = q.a_absmax / q.qmax_a if q.a_absmax > 0 else 1.0
    model.train(was_training)
    return model


def ptq(model: Decoder, calib: ShotDataset | np.ndarray, qc: QuantConfig, batch: int = 512,
        n_batches: int = CALIBRATION_BATCHES) -> Decoder:
    """Fold, attach quantisers and calibrate activations; no retraining."""
    bits = calib.detectors if isinstance(calib, ShotDataset) else np.asarray(calib)
    if len(bits) == 0:
        raise InvalidParameterError("calibration set is empty")
    q = attach_quant(fold_batchnorm(model.eval()), qc)
    return calibrate(q, bits, batch, n_batches).eval()


def qat(model: Decoder, data: ShotDataset, qc: QuantConfig, cfg: TrainConfig | None = None,
        history_path=None) -> TrainResult:
    """Fine-tune an FP32 model under fake quantisation (norms stay unfolded and FP32)."""
    cfg = cfg or TrainConfig(lr=1e-4, warmup=0, decay_end=50, max_epochs=50, patience=5)
    q = attach_quant(copy.deepcopy(model), qc)
    calibrate(q, data.detectors[:cfg.batch * CALIBRATION_BATCHES], cfg.batch)
    return train(q, cfg, data, history_path=history_path)


# -- pruning ----------------------------------------------------------------------

def maskable(model: Decoder):
    return [(f"{name}.weight", layer) for name, layer in affine_layers(model) if name not in PROTECTED]


def global_masks(model: Decoder, sparsity: float) -> PruneMask:
    """Prune exactly round(s * N) weights, smallest |W_q| first (ties: latent |W|, then position)."""
    if not 0 < sparsity < 1:
        raise InvalidParameterError(f"sparsity must lie in (0, 1), got {sparsity}")
    layers = maskable(model)
    wq = np.concatenate([np.abs(layer.effective_weight()).ravel() for _, layer in layers]).astype(np.float64)
    wl = np.concatenate([np.abs(layer.weight.data).ravel() for _, layer in layers]).astype(np.float64)
    k = int(round(sparsity * wq.size))
    order = np.lexsort((np.arange(wq.size), wl, wq))
    keep = np.ones(wq.size, dtype=bool)
    keep[order[:k]] = False
    tau = float(wq[order[k - 1]]) if k else 0.0
    masks, start = {}, 0
    for name, layer in layers:
        n = layer.weight.data.size
        masks[name] = keep[start:start + n].reshape(layer.weight.shape)
        start += n
    return PruneMask(masks, sparsity, tau)


def apply_masks(model: Decoder, pm: PruneMask) -> Decoder:
    params = dict(model.named_parameters())
    for name, mask in pm.masks.items():
        p = params[name]
        p.mask = mask.astype(p.dtype)
        p.data = p.data * p.mask
    return model


def prune_global(model: Decoder, sparsity: float, data: ShotDataset | None = None, cfg: TrainConfig | None = None,
                 history_path=None) -> tuple[Decoder, PruneMask, TrainResult | None]:
    """Mask the globally smallest deployable weights, fine-tune with masks enforced, then bake."""
    pruned = copy.deepcopy(model)
    pm = global_masks(pruned, sparsity)
    apply_masks(pruned, pm)
    result = None
    if data is not None:
        cfg = cfg or TrainConfig(lr=5e-5, warmup=0, decay_end=30, max_epochs=30, patience=5)
        result = train(pruned, cfg, data, history_path=history_path)
        pruned = result.model
    for name, p in pruned.named_parameters():
        if p.mask is not None:
            p.data = p.data * p.mask
    return pruned.eval(), pm, result


def weight_sparsity(model: Decoder) -> float:
    """Fraction of exactly-zero latent weights over the maskable pool."""
    ws = [layer.weight.data for _, layer in maskable(model)]
    total = sum(w.size for w in ws)
    return sum(int(np.count_nonzero(w == 0)) for w in ws) / total


def quant_metadata(model: Decoder) -> dict:
    """Per-layer {bits, granularity, scales} for the checkpoint header."""
    out = {}
    for name, layer in affine_layers(model):
        q = layer.quant
        if q is None:
            continue
        out[name] = {
            "weight": {"bits": q.w_bits, "granularity": "per_channel",
                       "scales": weight_scale(layer.weight.data, q.w_bits).astype(float).tolist()},
            "activation": {"bits": q.a_bits, "granularity": "per_tensor", "scales": [q.a_scale],
                           "signed": not q.a_unsigned},
        }
    return out

