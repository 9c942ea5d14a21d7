"""Fault enumeration and graphlike detector error model construction.

Every noise channel is split into elementary factors (one X or Z flip on one
qubit).  Factor signatures are found by propagating all factors at once as
columns of a batched Pauli frame; a mechanism's signature is the XOR of its
factors' signatures.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field

import numpy as np

from .errors import DecompositionError, FormatError
from .pauli_sim import (OP_CX, OP_DEP1, OP_DEP2, OP_FLIP, OP_H, OP_MEAS, OP_RESET, PAULI_NAMES, PAULI_X, PAULI_Z,
                        NoisyCircuit)


@dataclass(frozen=True)
class FaultMechanism:
    channel: int
    component: int
    pauli: str
    probability: float
    detectors: tuple[int, ...]
    observable_flip: int
    # (factor label, detectors, observable flip) for each X/Z factor
    factors: tuple[tuple[str, tuple[int, ...], int], ...] = field(repr=False, compare=False)


@dataclass(frozen=True)
class Edge:
    detectors: tuple[int, ...]
    probability: float
    observable_flip: int

    @property
    def is_boundary(self) -> bool:
        return len(self.detectors) == 1


@dataclass(frozen=True)
class DetectorErrorModel:
    n_detectors: int
    edges: tuple[Edge, ...]
    provenance: dict = field(compare=False, repr=False)

    def __len__(self):
        return len(self.edges)


def _factor_signatures(nc: NoisyCircuit):
    """Propagate every elementary factor; return (labels, det matrix, obs row)."""
    pr = nc.program
    labels = []
    start = np.zeros(len(nc.channels) + 1, dtype=np.int64)
    for ch in nc.channels:
        for j, q in enumerate(ch.qubits):
            labels.append((ch.id, j, q, "X"))
            labels.append((ch.id, j, q, "Z"))
        start[ch.id + 1] = len(labels)
    n_f = len(labels)
    fx = np.zeros((pr.n_qubits, n_f), dtype=bool)
    fz = np.zeros((pr.n_qubits, n_f), dtype=bool)
    meas = np.zeros((pr.n_meas, n_f), dtype=bool)
    m = 0
    for code, a, b, ch in zip(pr.code, pr.q0, pr.q1, pr.chan):
        if code == OP_RESET:
            fx[a] = False
            fz[a] = False
        elif code == OP_H:
            fx[a], fz[a] = fz[a].copy(), fx[a].copy()
        elif code == OP_CX:
            fx[b] ^= fx[a]
            fz[a] ^= fz[b]
        elif code == OP_MEAS:
            meas[m] = fx[a]
            m += 1
        elif code in (OP_DEP1, OP_DEP2, OP_FLIP):
            col = start[ch]
            qubits = (a, b) if code == OP_DEP2 else (a,)
            for j, q in enumerate(qubits):
                fx[q, col + 2 * j] ^= True
                fz[q, col + 2 * j + 1] ^= True
    dets = np.zeros((len(pr.det_ptr) - 1, n_f), dtype=bool)
    for i in range(len(pr.det_ptr) - 1):
        for r in pr.det_rec[pr.det_ptr[i]:pr.det_ptr[i + 1]]:
            dets[i] ^= meas[r]
    obs = np.zeros(n_f, dtype=bool)
    for r in pr.obs_rec:
        obs ^= meas[r]
    return labels, start, dets, obs


def enumerate_faults(nc: NoisyCircuit) -> list[FaultMechanism]:
    labels, start, dets, obs = _factor_signatures(nc)
    det_t = dets.T
    out: list[FaultMechanism] = []
    for ch in nc.channels:
        if ch.rate <= 0:
            continue
        prob = ch.rate / ch.n_components
        base = start[ch.id]
        for comp in range(1, ch.n_components + 1):
            paulis = ch.component_paulis(comp)
            cols = []
            for j, pc in enumerate(paulis):
                if PAULI_X[pc]:
                    cols.append((base + 2 * j, f"X{ch.qubits[j]}"))
                if PAULI_Z[pc]:
                    cols.append((base + 2 * j + 1, f"Z{ch.qubits[j]}"))
            sig = np.zeros(dets.shape[0], dtype=bool)
            flip = False
            factors = []
            for col, name in cols:
                sig ^= det_t[col]
                flip ^= bool(obs[col])
                factors.append((name, tuple(int(i) for i in np.flatnonzero(det_t[col])), int(obs[col])))
            out.append(FaultMechanism(
                channel=ch.id,
                component=comp,
                pauli="".join(PAULI_NAMES[p] for p in paulis),
                probability=prob,
                detectors=tuple(int(i) for i in np.flatnonzero(sig)),
                observable_flip=int(flip),
                factors=tuple(factors),
            ))
    return out


def _xor_pieces(factors):
    dets: set[int] = set()
    flip = 0
    for _, ds, f in factors:
        dets ^= set(ds)
        flip ^= f
    return tuple(sorted(dets)), flip


def _set_partitions(items):
    if not items:
        yield []
        return
    first, rest = items[0], items[1:]
    for part in _set_partitions(rest):
        yield [[first]] + part
        for i in range(len(part)):
            yield part[:i] + [[first] + part[i]] + part[i + 1:]


def decompose(mech: FaultMechanism) -> list[tuple[tuple[int, ...], int]]:
    """Split a mechanism into graphlike (<=2 detector) pieces."""
    if not mech.detectors:
        if mech.observable_flip:
            raise DecompositionError(f"channel {mech.channel} component {mech.pauli} flips the observable silently")
        return []
    if len(mech.detectors) <= 2:
        return [(mech.detectors, mech.observable_flip)]
    xs = [f for f in mech.factors if f[0][0] == "X"]
    zs = [f for f in mech.factors if f[0][0] == "Z"]
    candidates = []
    if xs and zs:
        candidates.append([xs, zs])
    # finer splits, fewest pieces first
    parts = sorted(_set_partitions(list(mech.factors)), key=len)
    candidates.extend(p for p in parts if len(p) > 1)
    for blocks in candidates:
        pieces = [_xor_pieces(b) for b in blocks]
        if all(len(ds) <= 2 for ds, _ in pieces) and not any(not ds and f for ds, f in pieces):
            return [(ds, f) for ds, f in pieces if ds]
    raise DecompositionError(
        f"channel {mech.channel} component {mech.pauli} flips detectors {list(mech.detectors)} "
        "and has no graphlike decomposition")


def merge_probability(p1: float, p2: float) -> float:
    return p1 + p2 - 2 * p1 * p2


def build_dem(faults, n_detectors: int | None = None) -> DetectorErrorModel:
    contributions: dict[tuple, list] = {}
    max_det = -1
    for mech in faults:
        for dets, flip in decompose(mech):
            contributions.setdefault((dets, flip), []).append((mech.probability, mech.channel, mech.component))
            max_det = max(max_det, *dets)
    if n_detectors is None:
        n_detectors = max_det + 1
    edges = []
    provenance = {}
    for key in sorted(contributions):
        p = 0.0
        for prob, _, _ in sorted(contributions[key]):
            p = merge_probability(p, prob)
        if p <= 0:
            continue
        edge = Edge(key[0], p, key[1])
        edges.append(edge)
        provenance[(key[0], key[1])] = tuple(sorted({c for _, c, _ in contributions[key]}))
    return DetectorErrorModel(n_detectors=n_detectors, edges=tuple(edges), provenance=provenance)


def dem_from_circuit(nc: NoisyCircuit) -> DetectorErrorModel:
    return build_dem(enumerate_faults(nc), nc.n_detectors)


def format_dem(dem: DetectorErrorModel) -> str:
    lines = [f"detectors {dem.n_detectors}"]
    for e in dem.edges:
        ds = " ".join(f"D{i}" for i in e.detectors)
        lines.append(f"edge {ds} p={e.probability!r} L={e.observable_flip}")
    return "\n".join(lines) + "\n"


_EDGE_RE = re.compile(r"^edge((?: D\d+){1,2}) p=(\S+) L=([01])$")


def parse_dem(text: str) -> DetectorErrorModel:
    n_det = None
    edges = []
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line:
            continue
        if line.startswith("detectors "):
            n_det = int(line.split()[1])
            continue
        m = _EDGE_RE.match(line)
        if not m:
            raise FormatError(f"DEM line {lineno}: cannot parse {line!r}")
        dets = tuple(int(t[1:]) for t in m.group(1).split())
        edges.append(Edge(dets, float(m.group(2)), int(m.group(3))))
    if n_det is None:
        n_det = 1 + max((max(e.detectors) for e in edges), default=-1)
    return DetectorErrorModel(n_detectors=n_det, edges=tuple(edges), provenance={})
