"""Noise attachment, Pauli-frame shot sampling and the ``.qecd`` dataset format.

Frame rules: H swaps the X/Z components, CNOT copies X control->target and
Z target->control, reset clears both components, and a Z-basis measurement
records the X component as the measurement flip.

Randomness comes from a SplitMix64 counter-based stream per shot, keyed by
``mix(seed) ^ shot_index``; one 64-bit draw per noise channel.  Any partition
of shot indices over workers therefore reproduces the sequential bytes.
"""

from __future__ import annotations

import math
import struct
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numba
import numpy as np

from .errors import FormatError, InvalidParameterError
from .layout import Circuit, build_layout, build_memory_z_circuit

NOISE_KINDS = ("SD", "SI1000")

# Pauli codes: 0=I, 1=X, 2=Y, 3=Z  ->  (x bit, z bit)
PAULI_X = (0, 1, 1, 0)
PAULI_Z = (0, 0, 1, 1)
PAULI_NAMES = "IXYZ"

OP_RESET, OP_H, OP_CX, OP_MEAS, OP_DEP1, OP_DEP2, OP_FLIP = range(7)


@dataclass(frozen=True)
class NoiseModel:
    kind: str
    p: float

    def __post_init__(self):
        if self.kind not in NOISE_KINDS:
            raise InvalidParameterError(f"unknown noise kind {self.kind!r}")
        if not 0.0 <= self.p < 0.5:
            raise InvalidParameterError(f"physical error rate must lie in [0, 0.5), got {self.p}")
        if self.kind == "SI1000" and 5 * self.p >= 0.5:
            raise InvalidParameterError(f"SI1000 measurement rate 5p={5 * self.p} is not below 0.5")

    @property
    def p_gate(self) -> float:
        return self.p

    @property
    def p_reset(self) -> float:
        return self.p if self.kind == "SD" else 2 * self.p

    @property
    def p_idle(self) -> float:
        return self.p if self.kind == "SD" else 2 * self.p

    @property
    def p_measure(self) -> float:
        return self.p if self.kind == "SD" else 5 * self.p

    @property
    def kind_code(self) -> int:
        return NOISE_KINDS.index(self.kind)


@dataclass(frozen=True)
class Channel:
    id: int
    op_index: int
    position: str  # "before" | "after"
    arity: int
    qubits: tuple[int, ...]
    rate: float
    kind: str = "depolarize"  # or "flip": a bare X error, as in Z-basis reset/readout

    @property
    def n_components(self) -> int:
        if self.kind == "flip":
            return 1
        return 3 if self.arity == 1 else 15

    def component_paulis(self, comp: int) -> tuple[int, ...]:
        """Pauli code per qubit for component ``comp`` (1-based)."""
        if self.kind == "flip":
            return (1,)
        if self.arity == 1:
            return (comp,)
        return (comp // 4, comp % 4)


@dataclass(frozen=True)
class NoisyCircuit:
    base: Circuit
    model: NoiseModel
    channels: tuple[Channel, ...]
    program: "_Program" = field(repr=False, compare=False)

    @property
    def n_detectors(self) -> int:
        return self.base.n_detectors


@dataclass(frozen=True)
class _Program:
    """Flat instruction arrays consumed by the compiled frame engine."""

    code: np.ndarray
    q0: np.ndarray
    q1: np.ndarray
    chan: np.ndarray
    rate: np.ndarray
    det_ptr: np.ndarray
    det_rec: np.ndarray
    obs_rec: np.ndarray
    n_qubits: int
    n_meas: int


def memory_z(d: int, r: int, kind: str = "SD", p: float = 0.005) -> "NoisyCircuit":
    """Noisy rotated-surface-code memory-Z circuit."""
    return attach_noise(build_memory_z_circuit(build_layout(d), r), NoiseModel(kind, p))


def attach_noise(circuit: Circuit, model: NoiseModel) -> NoisyCircuit:
    channels: list[Channel] = []
    instr: list[tuple[int, int, int, int]] = []  # code, q0, q1, channel id

    def channel(op_index, position, qubits, rate, kind="depolarize"):
        ch = Channel(len(channels), op_index, position, len(qubits), tuple(qubits), rate, kind)
        channels.append(ch)
        code = OP_FLIP if kind == "flip" else OP_DEP1 if ch.arity == 1 else OP_DEP2
        instr.append((code, qubits[0], qubits[-1], ch.id))

    # Reset and readout noise are X flips (the only component a Z-basis
    # reset or measurement can see), matching standard generated circuits.
    for i, op in enumerate(circuit.ops):
        if op.kind == "measure":
            for (q,) in op.targets:
                channel(i, "before", (q,), model.p_measure, "flip")
            for (q,) in op.targets:
                instr.append((OP_MEAS, q, q, -1))
        elif op.kind == "idle_marker":
            for (q,) in op.targets:
                channel(i, "after", (q,), model.p_idle)
        elif op.kind == "reset":
            for (q,) in op.targets:
                instr.append((OP_RESET, q, q, -1))
            for (q,) in op.targets:
                channel(i, "after", (q,), model.p_reset, "flip")
        elif op.kind == "H":
            for (q,) in op.targets:
                instr.append((OP_H, q, q, -1))
            for (q,) in op.targets:
                channel(i, "after", (q,), model.p_gate)
        elif op.kind == "CNOT":
            for c, t in op.targets:
                instr.append((OP_CX, c, t, -1))
            for c, t in op.targets:
                channel(i, "after", (c, t), model.p_gate)
        else:
            raise InvalidParameterError(f"unsupported op kind {op.kind!r}")

    arr = np.array(instr, dtype=np.int64).reshape(-1, 4)
    rates = np.array([ch.rate for ch in channels], dtype=np.float64)
    det_ptr = np.zeros(circuit.n_detectors + 1, dtype=np.int64)
    det_ptr[1:] = np.cumsum([len(det.records) for det in circuit.detectors])
    det_rec = np.array([r for det in circuit.detectors for r in det.records], dtype=np.int64)
    program = _Program(
        code=arr[:, 0].astype(np.int8),
        q0=arr[:, 1].copy(),
        q1=arr[:, 2].copy(),
        chan=arr[:, 3].copy(),
        rate=rates,
        det_ptr=det_ptr,
        det_rec=det_rec,
        obs_rec=np.array(circuit.observable, dtype=np.int64),
        n_qubits=circuit.n_qubits,
        n_meas=circuit.n_measurements,
    )
    return NoisyCircuit(base=circuit, model=model, channels=tuple(channels), program=program)


# ---------------------------------------------------------------------------
# compiled engine

_GAMMA = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)


@numba.njit(cache=True)
def _mix64(z):
    z = np.uint64(z)
    z = (z ^ (z >> np.uint64(30))) * _M1
    z = (z ^ (z >> np.uint64(27))) * _M2
    return z ^ (z >> np.uint64(31))


def stream_key(seed: int, shot: int) -> int:
    """Per-shot SplitMix64 stream key."""
    return (int(_mix64(np.uint64(seed & 0xFFFFFFFFFFFFFFFF))) & 0xFFFFFFFFFFFFFFFF) ^ shot


@numba.njit(cache=True)
def _apply_pauli(x, z, q, pauli):
    if pauli == 1 or pauli == 2:
        x[q] ^= 1
    if pauli == 2 or pauli == 3:
        z[q] ^= 1


@numba.njit(cache=True)
def _run_engine(code, q0, q1, chan, rate, det_ptr, det_rec, obs_rec, n_qubits, n_meas,
                seed_mix, shot_start, n_shots, forced_chan, forced_comp, sample_noise):
    n_det = det_ptr.shape[0] - 1
    out = np.zeros((n_shots, n_det + 1), dtype=np.uint8)
    x = np.zeros(n_qubits, dtype=np.uint8)
    z = np.zeros(n_qubits, dtype=np.uint8)
    meas = np.zeros(n_meas, dtype=np.uint8)
    n_forced = forced_chan.shape[1]
    inv53 = 1.0 / 9007199254740992.0
    for s in range(n_shots):
        x[:] = 0
        z[:] = 0
        state = np.uint64(seed_mix) ^ np.uint64(shot_start + s)
        m = 0
        for i in range(code.shape[0]):
            c = code[i]
            a = q0[i]
            if c == 0:
                x[a] = 0
                z[a] = 0
            elif c == 1:
                t = x[a]
                x[a] = z[a]
                z[a] = t
            elif c == 2:
                b = q1[i]
                x[b] ^= x[a]
                z[a] ^= z[b]
            elif c == 3:
                meas[m] = x[a]
                m += 1
            else:
                ch = chan[i]
                ncomp = 3 if c == 4 else 15 if c == 5 else 1
                comp = 0
                if sample_noise:
                    state += _GAMMA
                    u = float(_mix64(state) >> np.uint64(11)) * inv53
                    p = rate[ch]
                    if u < p:
                        comp = 1 + int(u / p * ncomp)
                        if comp > ncomp:
                            comp = ncomp
                for k in range(n_forced):
                    if forced_chan[s, k] == ch:
                        # composing Paulis is XOR of their symplectic bits
                        comp = _compose(comp, forced_comp[s, k], c != 5)
                if comp != 0:
                    if c != 5:
                        _apply_pauli(x, z, a, comp)
                    else:
                        _apply_pauli(x, z, a, comp // 4)
                        _apply_pauli(x, z, q1[i], comp % 4)
        for dd in range(n_det):
            v = 0
            for r in range(det_ptr[dd], det_ptr[dd + 1]):
                v ^= meas[det_rec[r]]
            out[s, dd] = v
        v = 0
        for r in range(obs_rec.shape[0]):
            v ^= meas[obs_rec[r]]
        out[s, n_det] = v
    return out


@numba.njit(cache=True)
def _sym(p):
    # pauli code -> 2-bit symplectic (x<<1 | z)
    if p == 0:
        return 0
    if p == 1:
        return 2
    if p == 2:
        return 3
    return 1


@numba.njit(cache=True)
def _unsym(s):
    if s == 0:
        return 0
    if s == 2:
        return 1
    if s == 3:
        return 2
    return 3


@numba.njit(cache=True)
def _compose(a, b, single):
    if single:
        return _unsym(_sym(a) ^ _sym(b))
    hi = _unsym(_sym(a // 4) ^ _sym(b // 4))
    lo = _unsym(_sym(a % 4) ^ _sym(b % 4))
    return hi * 4 + lo


def _engine(nc: NoisyCircuit, seed: int, shot_start: int, n: int, forced_chan=None, forced_comp=None,
            sample_noise=True) -> np.ndarray:
    pr = nc.program
    if forced_chan is None:
        forced_chan = np.full((n, 0), -1, dtype=np.int64)
        forced_comp = np.zeros((n, 0), dtype=np.int64)
    seed_mix = np.uint64(int(_mix64(np.uint64(seed & 0xFFFFFFFFFFFFFFFF))) & 0xFFFFFFFFFFFFFFFF)
    return _run_engine(pr.code, pr.q0, pr.q1, pr.chan, pr.rate, pr.det_ptr, pr.det_rec, pr.obs_rec,
                       pr.n_qubits, pr.n_meas, seed_mix, shot_start, n,
                       np.asarray(forced_chan, dtype=np.int64), np.asarray(forced_comp, dtype=np.int64),
                       sample_noise)


# ---------------------------------------------------------------------------
# datasets

HEADER = struct.Struct("<4sHHHBdQQ")
MAGIC = b"QECD"
VERSION = 1


@dataclass(frozen=True)
class ShotDataset:
    d: int
    r: int
    n_shots: int
    noise_kind: str
    p: float
    seed: int
    payload: bytes = field(repr=False)

    @property
    def n_detectors(self) -> int:
        return self.r * (self.d * self.d - 1)

    @property
    def bytes_per_shot(self) -> int:
        return math.ceil((self.n_detectors + 1) / 8)

    def bits(self) -> np.ndarray:
        """Unpacked (n_shots, n_detectors + 1) uint8 array; last column is the label."""
        raw = np.frombuffer(self.payload, dtype=np.uint8).reshape(self.n_shots, self.bytes_per_shot)
        return np.unpackbits(raw, axis=1, count=self.n_detectors + 1, bitorder="little")

    @property
    def detectors(self) -> np.ndarray:
        return self.bits()[:, :-1]

    @property
    def labels(self) -> np.ndarray:
        return self.bits()[:, -1]

    def subset(self, start: int, stop: int) -> "ShotDataset":
        stop = min(stop, self.n_shots)
        b = self.bytes_per_shot
        return ShotDataset(self.d, self.r, stop - start, self.noise_kind, self.p, self.seed,
                           self.payload[start * b: stop * b])

    @classmethod
    def from_bits(cls, bits: np.ndarray, d: int, r: int, noise_kind: str, p: float, seed: int) -> "ShotDataset":
        bits = np.asarray(bits, dtype=np.uint8)
        if bits.ndim != 2 or bits.shape[1] != r * (d * d - 1) + 1:
            raise InvalidParameterError(f"bits shape {bits.shape} does not match d={d}, r={r}")
        packed = np.packbits(bits, axis=1, bitorder="little")
        return cls(d, r, bits.shape[0], noise_kind, p, seed, packed.tobytes())


def _sample_block(args):
    nc, seed, start, n = args
    bits = _engine(nc, seed, start, n)
    return np.packbits(bits, axis=1, bitorder="little").tobytes()


def sample_shots(nc: NoisyCircuit, n: int, seed: int, workers: int = 1, chunk: int = 65536) -> ShotDataset:
    """Sample ``n`` shots.  Output bytes do not depend on ``workers``."""
    if n < 0:
        raise InvalidParameterError("shot count must be non-negative")
    blocks = [(nc, seed, s, min(chunk, n - s)) for s in range(0, n, chunk)]
    if workers > 1 and len(blocks) > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            parts = list(ex.map(_sample_block, blocks))
    elif workers > 1:
        # split a single block so every worker gets a shard
        step = max(1, math.ceil(n / workers))
        shards = [(nc, seed, s, min(step, n - s)) for s in range(0, n, step)]
        with ProcessPoolExecutor(max_workers=workers) as ex:
            parts = list(ex.map(_sample_block, shards))
    else:
        parts = [_sample_block(b) for b in blocks]
    c = nc.base
    return ShotDataset(c.layout.d, c.rounds, n, nc.model.kind, nc.model.p, seed, b"".join(parts))


def inject_faults(nc: NoisyCircuit, faults) -> np.ndarray:
    """Deterministically propagate forced faults with random noise disabled.

    ``faults`` is a list (one entry per shot) of lists of ``(channel_id,
    component)`` pairs.  Returns the unpacked (shots, n_det + 1) bit array.
    """
    n = len(faults)
    k = max((len(f) for f in faults), default=0)
    fc = np.full((n, k), -1, dtype=np.int64)
    fp = np.zeros((n, k), dtype=np.int64)
    for i, shot in enumerate(faults):
        for j, (ch, comp) in enumerate(shot):
            if not 0 <= ch < len(nc.channels):
                raise InvalidParameterError(f"channel {ch} out of range")
            if not 1 <= comp <= nc.channels[ch].n_components:
                raise InvalidParameterError(f"component {comp} invalid for channel {ch}")
            fc[i, j] = ch
            fp[i, j] = comp
    return _engine(nc, 0, 0, n, fc, fp, sample_noise=False)


def write_dataset(ds: ShotDataset, path) -> None:
    header = HEADER.pack(MAGIC, VERSION, ds.d, ds.r, NOISE_KINDS.index(ds.noise_kind), ds.p,
                         ds.seed & 0xFFFFFFFFFFFFFFFF, ds.n_shots)
    Path(path).write_bytes(header + ds.payload)


def read_dataset(path) -> ShotDataset:
    raw = Path(path).read_bytes()
    if len(raw) < HEADER.size:
        raise FormatError(f"{path}: truncated header at offset {len(raw)} (need {HEADER.size} bytes)")
    magic, version, d, r, kind, p, seed, n = HEADER.unpack_from(raw, 0)
    if magic != MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r} at offset 0")
    if version != VERSION:
        raise FormatError(f"{path}: unsupported version {version} at offset 4")
    if kind >= len(NOISE_KINDS):
        raise FormatError(f"{path}: unknown noise kind {kind} at offset 10")
    per_shot = math.ceil((r * (d * d - 1) + 1) / 8)
    expected = n * per_shot
    actual = len(raw) - HEADER.size
    if actual != expected:
        raise FormatError(
            f"{path}: payload at offset {HEADER.size} has {actual} bytes, expected {expected}")
    return ShotDataset(d, r, n, NOISE_KINDS[kind], p, seed, raw[HEADER.size:])
