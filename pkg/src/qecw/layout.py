"""Rotated surface code geometry and the memory-Z syndrome extraction circuit.

Coordinates: data qubit ``(x, y)`` sits on integer lattice points
``0 <= x, y < d``; a stabilizer sits on the plaquette centre
``(x + 0.5, y + 0.5)`` with ``-1 <= x, y < d``.  Plaquette type follows a
checkerboard (Z when ``x + y`` is even).  Weight-2 Z plaquettes run along the
top and bottom edges, weight-2 X plaquettes along the left and right edges, so
the logical Z operator is the column ``x = 0`` and logical X is a row.

CNOT order inside a round (offsets from the plaquette centre, with
N=(+,+), W=(-,+), E=(+,-), S=(-,-)):

* Z stabilizers: N, W, E, S  (data qubit is the control)
* X stabilizers: N, E, W, S  (ancilla is the control)

With this order the two-qubit hook left by an X-ancilla fault is vertical and
a Z-ancilla hook is horizontal, both perpendicular to the logical operator
they could otherwise shorten.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .errors import InvalidParameterError

Z_ORDER = ((0.5, 0.5), (-0.5, 0.5), (0.5, -0.5), (-0.5, -0.5))
X_ORDER = ((0.5, 0.5), (0.5, -0.5), (-0.5, 0.5), (-0.5, -0.5))

OP_KINDS = ("reset", "H", "CNOT", "measure", "idle_marker")


@dataclass(frozen=True)
class Stabilizer:
    index: int
    type: str  # "X" or "Z"
    support: tuple[int, ...]
    coordinate: tuple[float, float]


@dataclass(frozen=True)
class Layout:
    d: int
    data_qubits: tuple[tuple[int, int], ...]
    stabilizers: tuple[Stabilizer, ...]
    logical_z_support: tuple[int, ...]

    @property
    def n_data(self) -> int:
        return len(self.data_qubits)

    @property
    def n_stabilizers(self) -> int:
        return len(self.stabilizers)

    def of_type(self, kind: str) -> list[Stabilizer]:
        return [s for s in self.stabilizers if s.type == kind]

    def data_index(self, x: int, y: int) -> int:
        return y * self.d + x

    def grid_cell(self, stab: Stabilizer) -> tuple[int, int]:
        """(row, col) of a stabilizer on the (d+1) x (d+1) plaquette grid."""
        cx, cy = stab.coordinate
        return int(cy + 0.5), int(cx + 0.5)


@dataclass(frozen=True)
class Op:
    kind: str
    qubits: tuple[int, ...]
    round_index: int
    layer_index: int

    @property
    def targets(self):
        """Qubit groups the op acts on: pairs for CNOT, singletons otherwise."""
        if self.kind == "CNOT":
            return [self.qubits[i:i + 2] for i in range(0, len(self.qubits), 2)]
        return [(q,) for q in self.qubits]


@dataclass(frozen=True)
class DetectorDef:
    id: int
    round: int
    stabilizer_index: int
    records: tuple[int, ...]


@dataclass(frozen=True)
class Circuit:
    layout: Layout
    rounds: int
    ops: tuple[Op, ...]
    detectors: tuple[DetectorDef, ...]
    observable: tuple[int, ...]
    n_qubits: int
    n_measurements: int
    # measurement record index -> (op index, qubit)
    record_sources: tuple[tuple[int, int], ...] = field(repr=False)

    @property
    def n_detectors(self) -> int:
        return len(self.detectors)

    def ancilla(self, stab_index: int) -> int:
        return self.layout.n_data + stab_index


def _plaquette_type(x: int, y: int) -> str:
    return "Z" if (x + y) % 2 == 0 else "X"


def build_layout(d: int) -> Layout:
    if not isinstance(d, int) or d % 2 == 0 or not 3 <= d <= 15:
        raise InvalidParameterError(f"code distance must be an odd integer in [3, 15], got {d!r}")

    data = tuple((x, y) for y in range(d) for x in range(d))
    raw = []
    for y in range(-1, d):
        for x in range(-1, d):
            kind = _plaquette_type(x, y)
            on_tb = y in (-1, d - 1)
            on_lr = x in (-1, d - 1)
            if on_tb and on_lr:
                continue  # corners would be weight 1
            if on_tb and kind != "Z":
                continue
            if on_lr and kind != "X":
                continue
            corners = [(x + dx, y + dy) for dy in (0, 1) for dx in (0, 1)]
            support = tuple(sorted(cy * d + cx for cx, cy in corners if 0 <= cx < d and 0 <= cy < d))
            raw.append((kind, support, (x + 0.5, y + 0.5)))

    stabs = tuple(Stabilizer(i, kind, sup, coord) for i, (kind, sup, coord) in enumerate(raw))
    logical = tuple(y * d for y in range(d))
    return Layout(d=d, data_qubits=data, stabilizers=stabs, logical_z_support=logical)


def _cnot_layers(layout: Layout) -> list[list[tuple[int, int]]]:
    d = layout.d
    layers: list[list[tuple[int, int]]] = [[], [], [], []]
    for s in layout.stabilizers:
        anc = layout.n_data + s.index
        order = Z_ORDER if s.type == "Z" else X_ORDER
        cx, cy = s.coordinate
        for k, (dx, dy) in enumerate(order):
            qx, qy = int(cx + dx), int(cy + dy)
            if not (0 <= qx < d and 0 <= qy < d):
                continue
            q = qy * d + qx
            layers[k].append((q, anc) if s.type == "Z" else (anc, q))
    return layers


def cnot_schedule(layout: Layout) -> list[list[tuple[int, int]]]:
    """The four (control, target) layers used in every round."""
    return _cnot_layers(layout)


def build_memory_z_circuit(layout: Layout, rounds: int) -> Circuit:
    if not isinstance(rounds, int) or rounds < 1:
        raise InvalidParameterError(f"rounds must be an integer >= 1, got {rounds!r}")

    n_data = layout.n_data
    n_stab = layout.n_stabilizers
    ancillas = tuple(n_data + s.index for s in layout.stabilizers)
    x_ancillas = tuple(n_data + s.index for s in layout.stabilizers if s.type == "X")
    data = tuple(range(n_data))
    layers = _cnot_layers(layout)

    ops: list[Op] = []
    record_sources: list[tuple[int, int]] = []

    def emit(kind, qubits, rnd, layer):
        ops.append(Op(kind, tuple(qubits), rnd, layer))
        if kind == "measure":
            record_sources.extend((len(ops) - 1, q) for q in qubits)

    emit("reset", data, 0, 0)
    for rnd in range(1, rounds + 1):
        emit("idle_marker", data, rnd, 0)
        emit("reset", ancillas, rnd, 1)
        emit("H", x_ancillas, rnd, 2)
        for k, layer in enumerate(layers):
            emit("CNOT", [q for pair in layer for q in pair], rnd, 3 + k)
        emit("H", x_ancillas, rnd, 7)
        emit("measure", ancillas, rnd, 8)
    emit("measure", data, rounds + 1, 0)

    def anc_rec(rnd: int, s: int) -> int:
        return (rnd - 1) * n_stab + s

    final_base = rounds * n_stab
    detectors: list[DetectorDef] = []

    def add(rnd, s, recs):
        detectors.append(DetectorDef(len(detectors), rnd, s, tuple(recs)))

    for s in layout.stabilizers:
        if s.type == "Z":
            add(1, s.index, [anc_rec(1, s.index)])
    for rnd in range(2, rounds + 1):
        for s in layout.stabilizers:
            add(rnd, s.index, [anc_rec(rnd - 1, s.index), anc_rec(rnd, s.index)])
    for s in layout.stabilizers:
        if s.type == "Z":
            add(rounds + 1, s.index, [anc_rec(rounds, s.index)] + [final_base + q for q in s.support])

    observable = tuple(final_base + q for q in layout.logical_z_support)
    return Circuit(
        layout=layout,
        rounds=rounds,
        ops=tuple(ops),
        detectors=tuple(detectors),
        observable=observable,
        n_qubits=n_data + n_stab,
        n_measurements=len(record_sources),
        record_sources=tuple(record_sources),
    )


def format_circuit(circuit: Circuit) -> str:
    """One op per line, followed by detector and observable definitions."""
    lines = []
    for i, op in enumerate(circuit.ops):
        if op.kind == "CNOT":
            body = " ".join(f"{a}-{b}" for a, b in op.targets)
        else:
            body = " ".join(str(q) for q in op.qubits)
        lines.append(f"{i:4d} r{op.round_index} l{op.layer_index} {op.kind:<11s} {body}")
    for det in circuit.detectors:
        recs = " ".join(f"rec[{r}]" for r in det.records)
        lines.append(f"DETECTOR D{det.id} round={det.round} stab={det.stabilizer_index} {recs}")
    lines.append("OBSERVABLE L0 " + " ".join(f"rec[{r}]" for r in circuit.observable))
    return "\n".join(lines)
