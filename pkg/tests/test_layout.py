import numpy as np
import pytest

from qecw.errors import InvalidParameterError
from qecw.layout import build_layout, build_memory_z_circuit, cnot_schedule, format_circuit
from qecw.pauli_sim import NoiseModel, attach_noise, sample_shots


@pytest.mark.parametrize("d", [3, 5, 7, 9, 15])
def test_layout_invariants(d):
    lay = build_layout(d)
    assert lay.n_data == d * d
    assert lay.n_stabilizers == d * d - 1
    assert len(lay.of_type("X")) == len(lay.of_type("Z")) == (d * d - 1) // 2
    sizes = [len(s.support) for s in lay.stabilizers]
    assert set(sizes) <= {2, 4}
    assert sizes.count(2) == 2 * (d - 1)
    for sx in lay.of_type("X"):
        for sz in lay.of_type("Z"):
            assert len(set(sx.support) & set(sz.support)) % 2 == 0
        assert len(set(sx.support) & set(lay.logical_z_support)) % 2 == 0
    assert len(lay.logical_z_support) == d


def test_d3_counts():
    lay = build_layout(3)
    assert (lay.n_data, len(lay.of_type("X")), len(lay.of_type("Z"))) == (9, 4, 4)
    assert sum(len(s.support) for s in lay.stabilizers) == 24
    assert sum(len(layer) for layer in cnot_schedule(lay)) == 24


@pytest.mark.parametrize("d", [2, 4, 1, 17, 3.0, "3"])
def test_bad_distance(d):
    with pytest.raises(InvalidParameterError):
        build_layout(d)


def test_bad_rounds():
    with pytest.raises(InvalidParameterError):
        build_memory_z_circuit(build_layout(3), 0)


@pytest.mark.parametrize("d,r,n", [(3, 3, 24), (5, 5, 120), (3, 1, 8), (7, 2, 96)])
def test_detector_counts(d, r, n):
    c = build_memory_z_circuit(build_layout(d), r)
    assert c.n_detectors == n
    assert [det.id for det in c.detectors] == list(range(n))
    keys = [(det.round, det.stabilizer_index) for det in c.detectors]
    assert keys == sorted(keys)


def test_d3_r1_detector_split():
    c = build_memory_z_circuit(build_layout(3), 1)
    assert [det.round for det in c.detectors] == [1] * 4 + [2] * 4


@pytest.mark.parametrize("d", [3, 5, 7])
def test_schedule_no_qubit_reuse(d):
    lay = build_layout(d)
    for layer in cnot_schedule(lay):
        qubits = [q for pair in layer for q in pair]
        assert len(qubits) == len(set(qubits))


def test_rounds_have_four_cnot_layers_and_records_precede():
    c = build_memory_z_circuit(build_layout(5), 3)
    for rnd in range(1, 4):
        assert sum(op.kind == "CNOT" and op.round_index == rnd for op in c.ops) == 4
    for det in c.detectors:
        for rec in det.records:
            assert rec < c.n_measurements
    # the measurement op feeding each record comes before any later record's op
    ops = [src for src, _ in c.record_sources]
    assert ops == sorted(ops)


def test_noise_free_replay_is_silent():
    for d, r in [(3, 3), (5, 2)]:
        nc = attach_noise(build_memory_z_circuit(build_layout(d), r), NoiseModel("SD", 0.0))
        bits = sample_shots(nc, 200, seed=1).bits()
        assert not bits.any()


def test_cnot_direction():
    # Z checks take data as control; X checks drive data from the ancilla
    lay = build_layout(5)
    n = lay.n_data
    for layer in cnot_schedule(lay):
        for c, t in layer:
            stab = lay.stabilizers[(t if t >= n else c) - n]
            assert (c < n) == (stab.type == "Z")


def test_format_circuit_mentions_everything():
    c = build_memory_z_circuit(build_layout(3), 2)
    text = format_circuit(c)
    assert text.count("DETECTOR") == c.n_detectors
    assert "OBSERVABLE" in text
    assert len(text.splitlines()) == len(c.ops) + c.n_detectors + 1
