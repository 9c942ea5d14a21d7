"""MLP and TCN syndrome decoders, plus the training and evaluation loops.

Both families take the flat detector vector of one memory-Z shot and emit a
single logit for "the logical observable flipped".  The TCN first scatters
every detector bit onto a (d+1) x (d+1) plaquette grid per round frame using
a frozen Gaussian vector per detector, then runs 2D convs per frame and 1D
convs along the flattened (frame, row, col) sequence.
"""

from __future__ import annotations

import csv
import dataclasses
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import (AdamW, BatchNorm, Checkpoint, Conv1d, Conv2d, Dense, Dropout, LayerNorm, Module, Tensor,
                       clip_grad_norm, load_checkpoint, lr_schedule, no_grad, ops, save_checkpoint)
from .errors import InvalidParameterError, NumericalError, ShapeError
from .layout import build_layout, build_memory_z_circuit
from .mwpm import LerReport
from .pauli_sim import ShotDataset, memory_z, sample_shots

log = logging.getLogger(__name__)

TCN_WIDTHS = {"tiny": (16, 32), "small": (32, 64), "large": (64, 128)}
MLP_WIDTHS = {"small": 512, "large": 1024}
MLP_BLOCKS = 6
WEIGHT_DECAY = {"TCN": 1e-3, "MLP": 1e-4}


@dataclass(frozen=True)
class LayerInfo:
    name: str
    kind: str
    shape: tuple[int, ...]
    params: int


@dataclass(frozen=True)
class ModelSpec:
    family: str
    scale: str
    d: int
    r: int

    def __post_init__(self):
        object.__setattr__(self, "family", self.family.upper())
        widths = {"TCN": TCN_WIDTHS, "MLP": MLP_WIDTHS}.get(self.family)
        if widths is None:
            raise InvalidParameterError(f"unknown model family {self.family!r} (expected MLP or TCN)")
        if self.scale not in widths:
            raise InvalidParameterError(f"{self.family} has no scale {self.scale!r}; choose from {sorted(widths)}")
        if self.d < 3 or self.d % 2 == 0 or self.r < 1:
            raise InvalidParameterError(f"need odd d >= 3 and r >= 1, got d={self.d}, r={self.r}")

    @property
    def n_detectors(self) -> int:
        return self.r * (self.d * self.d - 1)

    @property
    def layers(self) -> list[LayerInfo]:
        if self.family == "TCN":
            c1, c2 = TCN_WIDTHS[self.scale]
            g = self.d + 1
            return [
                LayerInfo("embed", "embedding", (self.n_detectors, self.r, c1, g, g), 0),
                LayerInfo("res_conv", "conv2d", (c1, c1, 3, 3), 9 * c1 * c1),
                LayerInfo("res_bn", "batchnorm", (c1,), 2 * c1),
                LayerInfo("conv1", "conv2d", (c1, c1, 3, 3), 9 * c1 * c1),
                LayerInfo("bn1", "batchnorm", (c1,), 2 * c1),
                LayerInfo("conv2", "conv2d", (c2, c1, 3, 3), 9 * c1 * c2),
                LayerInfo("bn2", "batchnorm", (c2,), 2 * c2),
                LayerInfo("conv3", "conv2d", (c2, c2, 3, 3), 9 * c2 * c2),
                LayerInfo("bn3", "batchnorm", (c2,), 2 * c2),
                LayerInfo("tconv1", "conv1d", (c2, c2, 3), 3 * c2 * c2),
                LayerInfo("tbn1", "batchnorm", (c2,), 2 * c2),
                LayerInfo("tconv2", "conv1d", (c2, c2, 3), 3 * c2 * c2),
                LayerInfo("tbn2", "batchnorm", (c2,), 2 * c2),
                LayerInfo("proj", "dense", (c2, c2), c2 * c2 + c2),
                LayerInfo("norm", "layernorm", (c2,), 2 * c2),
                LayerInfo("head", "dense", (1, c2), c2 + 1),
            ]
        h = MLP_WIDTHS[self.scale]
        out = [LayerInfo("inp", "dense", (h, self.n_detectors), self.n_detectors * h + h),
               LayerInfo("inp_norm", "layernorm", (h,), 2 * h)]
        for k in range(MLP_BLOCKS):
            out += [LayerInfo(f"blocks.{k}.fc1", "dense", (h, h), h * h + h),
                    LayerInfo(f"blocks.{k}.norm1", "layernorm", (h,), 2 * h),
                    LayerInfo(f"blocks.{k}.fc2", "dense", (h, h), h * h + h),
                    LayerInfo(f"blocks.{k}.norm2", "layernorm", (h,), 2 * h)]
        out.append(LayerInfo("head", "dense", (1, h), h + 1))
        return out

    @property
    def n_parameters(self) -> int:
        return sum(layer.params for layer in self.layers)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


class Decoder(Module):
    spec: ModelSpec

    def forward(self, bits: np.ndarray) -> Tensor:  # pragma: no cover - abstract
        raise NotImplementedError

    def logits(self, bits: np.ndarray, batch: int = 4096) -> np.ndarray:
        """Eval-free helper: raw logits in the current mode, no graph recorded."""
        outs = []
        with no_grad():
            for s in range(0, len(bits), batch):
                outs.append(self(bits[s:s + batch]).data)
        return np.concatenate(outs) if outs else np.zeros(0, np.float32)

    def _check_input(self, bits: np.ndarray):
        if bits.ndim != 2 or bits.shape[1] != self.spec.n_detectors:
            raise ShapeError(f"decoder for d={self.spec.d}, r={self.spec.r} expects (batch, "
                             f"{self.spec.n_detectors}) detector bits, got {bits.shape}")


class ConstantEmbedding(Module):
    """bit * fixed Gaussian vector, scattered onto the per-frame plaquette grid."""

    _buffers = ("table",)

    def __init__(self, d: int, r: int, channels: int, rng: np.random.Generator):
        super().__init__()
        circuit = build_memory_z_circuit(build_layout(d), r)
        layout = circuit.layout
        g = d + 1
        self.frames, self.grid, self.channels = r, g, channels
        self.table = rng.standard_normal((circuit.n_detectors, channels)).astype(np.float32)
        scatter = np.zeros((r * g * g, circuit.n_detectors), np.float32)
        for det in circuit.detectors:
            # the final data-qubit layer shares the last round's frame
            frame = min(det.round, r) - 1
            row, col = layout.grid_cell(layout.stabilizers[det.stabilizer_index])
            scatter[(frame * g + row) * g + col, det.id] = 1.0
        self.scatter = scatter

    def forward(self, bits: np.ndarray) -> Tensor:
        feats = bits.astype(np.float32)[:, :, None] * self.table  # B, n_det, C
        cells = self.scatter @ feats  # B, r*g*g, C
        b, g = len(bits), self.grid
        out = cells.reshape(b, self.frames, g, g, self.channels).transpose(0, 1, 4, 2, 3)
        return Tensor(np.ascontiguousarray(out).reshape(b * self.frames, self.channels, g, g))


class TCN(Decoder):
    def __init__(self, spec: ModelSpec, seed: int = 0, dropout: float = 0.1):
        super().__init__()
        self.spec = spec
        c1, c2 = TCN_WIDTHS[spec.scale]
        rng = np.random.default_rng(seed)
        self.embed = ConstantEmbedding(spec.d, spec.r, c1, np.random.default_rng([seed, 1]))
        self.res_conv, self.res_bn = Conv2d(c1, c1, rng), BatchNorm(c1)
        self.res_drop = Dropout(dropout, np.random.default_rng([seed, 2]), channelwise=True)
        self.conv1, self.bn1 = Conv2d(c1, c1, rng), BatchNorm(c1)
        self.conv2, self.bn2 = Conv2d(c1, c2, rng), BatchNorm(c2)
        self.conv3, self.bn3 = Conv2d(c2, c2, rng), BatchNorm(c2)
        self.tconv1, self.tbn1 = Conv1d(c2, c2, rng), BatchNorm(c2)
        self.tconv2, self.tbn2 = Conv1d(c2, c2, rng), BatchNorm(c2)
        self.proj = Dense(c2, c2, rng)
        self.norm = LayerNorm(c2)
        self.head = Dense(c2, 1, rng)

    def forward(self, bits: np.ndarray) -> Tensor:
        bits = np.asarray(bits)
        self._check_input(bits)
        b, r, g = len(bits), self.spec.r, self.spec.d + 1
        x = self.embed(bits)
        x = ops.relu(x + self.res_drop(self.res_bn(self.res_conv(x))))
        x = ops.relu(self.bn1(self.conv1(x)))
        x = ops.relu(self.bn2(self.conv2(x)))
        x = ops.relu(self.bn3(self.conv3(x)))
        c2 = x.shape[1]
        # (B*r, C, H, W) -> (B, r, H, W, C) -> (B, S, C) -> (B, C, S)
        x = ops.transpose(ops.reshape(x, (b, r, c2, g, g)), (0, 1, 3, 4, 2))
        x = ops.transpose(ops.reshape(x, (b, r * g * g, c2)), (0, 2, 1))
        x = ops.relu(self.tbn1(self.tconv1(x)))
        x = ops.relu(self.tbn2(self.tconv2(x)))
        x = ops.relu(self.proj(ops.transpose(x, (0, 2, 1))))
        x = self.norm(ops.mean_pool(x, 1))
        return ops.reshape(self.head(x), (b,))


class _ResidualBlock(Module):
    def __init__(self, h: int, rng: np.random.Generator, drop_rng: np.random.Generator, dropout: float):
        super().__init__()
        self.fc1, self.norm1 = Dense(h, h, rng), LayerNorm(h)
        self.drop = Dropout(dropout, drop_rng)
        self.fc2, self.norm2 = Dense(h, h, rng), LayerNorm(h)

    def forward(self, x: Tensor) -> Tensor:
        y = self.drop(ops.gelu(self.norm1(self.fc1(x))))
        return x + self.norm2(self.fc2(y))


class MLP(Decoder):
    def __init__(self, spec: ModelSpec, seed: int = 0, dropout: float = 0.1):
        super().__init__()
        self.spec = spec
        h = MLP_WIDTHS[spec.scale]
        rng = np.random.default_rng(seed)
        drop_rng = np.random.default_rng([seed, 2])
        self.inp, self.inp_norm = Dense(spec.n_detectors, h, rng), LayerNorm(h)
        self.inp_drop = Dropout(dropout, drop_rng)
        self.blocks = [_ResidualBlock(h, rng, drop_rng, dropout) for _ in range(MLP_BLOCKS)]
        self.head = Dense(h, 1, rng)

    def forward(self, bits: np.ndarray) -> Tensor:
        bits = np.asarray(bits)
        self._check_input(bits)
        x = self.inp_drop(ops.gelu(self.inp_norm(self.inp(Tensor(bits.astype(np.float32))))))
        for block in self.blocks:
            x = block(x)
        return ops.reshape(self.head(x), (len(bits),))


def build_model(spec: ModelSpec, seed: int = 0, dropout: float = 0.1) -> Decoder:
    model = (TCN if spec.family == "TCN" else MLP)(spec, seed, dropout)
    model.seed = seed
    n = model.n_parameters()
    if n != spec.n_parameters:  # the layer table and the module tree must agree
        raise AssertionError(f"{spec}: built {n} parameters, layer table says {spec.n_parameters}")
    return model


# -- checkpoints ----------------------------------------------------------------

def save_model(model: Decoder, path, extra: dict | None = None):
    masks = {name: p.mask for name, p in model.named_parameters() if p.mask is not None}
    from .compress import quant_metadata

    meta = {"spec": model.spec.to_dict(), "seed": getattr(model, "seed", 0),
            "folded": bool(getattr(model, "folded", False))}
    quant = {name: dataclasses.asdict(m.quant) for name, m in model.modules() if getattr(m, "quant", None)}
    if quant:
        meta["quant"] = quant
        meta["quant_tensors"] = quant_metadata(model)
    meta.update(extra or {})
    save_checkpoint(path, Checkpoint(model.state_dict(), masks, meta))


def load_model(path) -> Decoder:
    from .autodiff import QuantState
    from .compress import _fold_structure

    ck = load_checkpoint(path)
    model = build_model(ModelSpec(**ck.metadata["spec"]), ck.metadata.get("seed", 0))
    if ck.metadata.get("folded"):
        _fold_structure(model)
    model.load_state_dict(ck.tensors)
    params = dict(model.named_parameters())
    for name, mask in ck.masks.items():
        params[name].mask = mask.astype(params[name].dtype)
    modules = dict(model.modules())
    for name, q in ck.metadata.get("quant", {}).items():
        modules[name].quant = QuantState(**q)
    model.metadata = ck.metadata
    return model.eval()


# -- training -------------------------------------------------------------------

@dataclass
class TrainConfig:
    lr: float = 5e-4
    warmup: float = 5.0
    decay_end: float = 80.0
    min_lr: float = 1e-6
    batch: int = 512
    max_epochs: int = 100
    patience: int = 10
    weight_decay: float | None = None  # family default when None
    clip: float = 1.0
    dropout: float = 0.1
    seed: int = 0
    val_fraction: float = 0.02
    threshold: float = 0.5
    # online sampling: fresh shots every epoch instead of a fixed dataset
    online: bool = False
    online_shots: int = 1 << 16
    online_val_shots: int = 1 << 13
    noise: str = "SD"
    p: float = 0.005

    def __post_init__(self):
        for name in ("lr", "batch", "max_epochs", "patience", "clip", "online_shots", "online_val_shots"):
            if not getattr(self, name) > 0:
                raise InvalidParameterError(f"train.{name} must be positive, got {getattr(self, name)}")
        for name in ("warmup", "min_lr", "dropout"):
            if getattr(self, name) < 0:
                raise InvalidParameterError(f"train.{name} must be non-negative")
        if self.decay_end <= self.warmup:
            raise InvalidParameterError("train.decay_end must exceed train.warmup")
        if self.patience > self.max_epochs:
            raise InvalidParameterError(f"patience {self.patience} exceeds max_epochs {self.max_epochs}")
        if not 0 < self.val_fraction < 1 or not 0 < self.threshold < 1:
            raise InvalidParameterError("val_fraction and threshold must lie in (0, 1)")

    def lr_at(self, epoch: float) -> float:
        return lr_schedule(epoch, self.warmup, self.decay_end, self.lr, self.min_lr)


@dataclass
class TrainResult:
    model: Decoder
    history: list[dict] = field(default_factory=list)
    best_epoch: int = -1
    best_val_loss: float = math.inf

    def write_history(self, path):
        write_history(self.history, path)


HISTORY_FIELDS = ("epoch", "train_loss", "val_loss", "val_ler", "lr", "seconds")


def write_history(history: list[dict], path):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=HISTORY_FIELDS, extrasaction="ignore")
        w.writeheader()
        w.writerows(history)


def logit_threshold(threshold: float) -> float:
    return math.log(threshold / (1 - threshold))


def _validate(model: Decoder, bits: np.ndarray, labels: np.ndarray, cfg: TrainConfig) -> tuple[float, float]:
    model.eval()
    z = model.logits(bits, batch=max(cfg.batch, 2048)).astype(np.float64)
    y = labels.astype(np.float64)
    loss = float(np.mean(np.maximum(z, 0) - z * y + np.log1p(np.exp(-np.abs(z)))))
    ler = float(np.mean((z > logit_threshold(cfg.threshold)) != labels.astype(bool)))
    return loss, ler


def _split(data: ShotDataset, cfg: TrainConfig):
    bits = data.bits()
    n_val = max(1, int(round(cfg.val_fraction * len(bits))))
    if n_val >= len(bits):
        raise InvalidParameterError(f"dataset of {len(bits)} shots is too small for a validation split")
    return bits[:-n_val], bits[-n_val:]


def train(model: Decoder, cfg: TrainConfig, data: ShotDataset | None = None, history_path=None,
          workers: int = 1) -> TrainResult:
    """Minibatch AdamW on BCE-with-logits; returns the best-validation-loss weights."""
    spec = model.spec
    if data is not None:
        if (data.d, data.r) != (spec.d, spec.r):
            raise ShapeError(f"dataset is d={data.d}, r={data.r} but model expects d={spec.d}, r={spec.r}")
        train_bits, val_bits = _split(data, cfg)
    elif cfg.online:
        nc = memory_z(spec.d, spec.r, cfg.noise, cfg.p)
        # validation seeds sit in a separate stream from per-epoch training seeds
        val_bits = sample_shots(nc, cfg.online_val_shots, seed=(cfg.seed << 20) | 0xFFFFF, workers=workers).bits()
        train_bits = None
    else:
        raise InvalidParameterError("training needs a dataset or online=True")

    wd = WEIGHT_DECAY[spec.family] if cfg.weight_decay is None else cfg.weight_decay
    opt = AdamW(model.named_parameters(), lr=cfg.lr, weight_decay=wd)
    rng = np.random.default_rng(cfg.seed)
    result = TrainResult(model)
    best_state = model.state_dict()
    stale = 0
    for epoch in range(cfg.max_epochs):
        t0 = time.perf_counter()
        if cfg.online:
            train_bits = sample_shots(nc, cfg.online_shots, seed=(cfg.seed << 20) | epoch, workers=workers).bits()
        order = rng.permutation(len(train_bits))
        n_batches = max(1, math.ceil(len(order) / cfg.batch))
        model.train()
        total, lr = 0.0, cfg.lr_at(epoch)
        for i in range(n_batches):
            idx = np.sort(order[i * cfg.batch:(i + 1) * cfg.batch])
            batch = train_bits[idx]
            lr = opt.lr = cfg.lr_at(epoch + i / n_batches)
            try:
                loss = ops.bce_with_logits(model(batch[:, :-1]), batch[:, -1])
                loss.backward()
                clip_grad_norm(model.parameters(), cfg.clip)
                opt.step()
            except NumericalError as exc:
                raise NumericalError(f"training diverged at epoch {epoch}, batch {i}, lr {lr:.3g}: {exc}") from exc
            opt.zero_grad()
            total += float(loss.data) * len(idx)
        val_loss, val_ler = _validate(model, val_bits[:, :-1], val_bits[:, -1], cfg)
        if not math.isfinite(val_loss):
            raise NumericalError(f"validation loss is {val_loss} after epoch {epoch} (lr {lr:.3g})")
        row = {"epoch": epoch, "train_loss": total / len(order), "val_loss": val_loss, "val_ler": val_ler,
               "lr": lr, "seconds": time.perf_counter() - t0}
        result.history.append(row)
        log.info("epoch %d train %.5f val %.5f ler %.4f lr %.2e %.1fs", epoch, row["train_loss"], val_loss,
                 val_ler, lr, row["seconds"])
        if val_loss < result.best_val_loss:
            result.best_val_loss, result.best_epoch = val_loss, epoch
            best_state = model.state_dict()
            stale = 0
        else:
            stale += 1
            if stale >= cfg.patience:
                break
    model.load_state_dict(best_state)
    model.eval()
    if history_path is not None:
        result.write_history(history_path)
    return result


def evaluate_ler(model: Decoder, dataset: ShotDataset, threshold: float = 0.5, batch: int = 4096) -> LerReport:
    spec = model.spec
    if (dataset.d, dataset.r) != (spec.d, spec.r):
        raise ShapeError(f"dataset is d={dataset.d}, r={dataset.r} but model expects d={spec.d}, r={spec.r}")
    was_training = model.training
    model.eval()
    failures = 0
    cut = logit_threshold(threshold)
    b = max(1, batch)
    for s in range(0, dataset.n_shots, b):
        bits = dataset.subset(s, s + b).bits()
        pred = model.logits(bits[:, :-1], batch=b) > cut
        failures += int(np.count_nonzero(pred != bits[:, -1].astype(bool)))
    model.train(was_training)
    return LerReport(dataset.n_shots, failures)

