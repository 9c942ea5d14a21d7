import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from qecw.errors import FormatError, InvalidParameterError
from qecw.layout import build_layout, build_memory_z_circuit
from qecw.pauli_sim import (HEADER, NoiseModel, ShotDataset, attach_noise, inject_faults, read_dataset,
                            sample_shots, stream_key, write_dataset)

from conftest import dem_for, noisy


def test_noise_model_rates():
    sd = NoiseModel("SD", 0.005)
    assert (sd.p_gate, sd.p_reset, sd.p_idle, sd.p_measure) == (0.005,) * 4
    si = NoiseModel("SI1000", 0.004)
    assert (si.p_gate, si.p_reset, si.p_idle) == (0.004, 0.008, 0.008)
    assert si.p_measure == pytest.approx(0.020)
    with pytest.raises(InvalidParameterError):
        NoiseModel("SD", 0.5)
    with pytest.raises(InvalidParameterError):
        NoiseModel("SI1000", 0.2)
    with pytest.raises(InvalidParameterError):
        NoiseModel("XX", 0.1)


def test_si1000_measurement_channels():
    nc = noisy(3, 3, "SI1000", 0.004)
    rates = {ch.rate for ch in nc.channels if ch.position == "before"}
    assert len(rates) == 1 and rates.pop() == pytest.approx(0.020)


def test_zero_rate_channels():
    nc = noisy(3, 3, "SD", 0.0)
    assert all(ch.rate == 0 for ch in nc.channels)


def test_channel_count():
    nc = noisy(3, 3)
    c = nc.base
    count = lambda kind: sum(len(op.targets) for op in c.ops if op.kind == kind)
    expected = count("H") + count("CNOT") + count("reset") + 3 * 9 + count("measure")
    assert len(nc.channels) == expected == 189


def _idle_channel(nc, rnd, q):
    for ch in nc.channels:
        op = nc.base.ops[ch.op_index]
        if op.kind == "idle_marker" and op.round_index == rnd and ch.qubits == (q,):
            return ch.id
    raise LookupError


def test_bulk_x_error_fires_two_z_detectors():
    nc = noisy(3, 3)
    c = nc.base
    centre = c.layout.data_index(1, 1)
    for rnd in (1, 2, 3):
        bits = inject_faults(nc, [[(_idle_channel(nc, rnd, centre), 1)]])[0]
        fired = np.flatnonzero(bits[:-1])
        assert len(fired) == 2 and bits[-1] == 0
        for det in fired:
            dd = c.detectors[det]
            assert c.layout.stabilizers[dd.stabilizer_index].type == "Z"
            assert dd.round == rnd
            assert centre in c.layout.stabilizers[dd.stabilizer_index].support


def test_determinism_and_workers_invariance():
    nc = noisy(3, 3)
    a = sample_shots(nc, 3000, seed=99)
    b = sample_shots(nc, 3000, seed=99)
    assert a.payload == b.payload
    c = sample_shots(nc, 3000, seed=99, workers=4, chunk=700)
    assert c.payload == a.payload
    assert sample_shots(nc, 3000, seed=100).payload != a.payload


def test_subsets_are_prefix_consistent():
    nc = noisy(3, 3)
    a = sample_shots(nc, 500, seed=5)
    b = sample_shots(nc, 200, seed=5)
    assert a.subset(0, 200).payload == b.payload


def test_stream_key_distinct():
    keys = {stream_key(s, i) for s in range(20) for i in range(20)}
    assert len(keys) == 400


def test_marginals_match_dem():
    nc = noisy(3, 3)
    dem = dem_for(3, 3)
    prod = np.ones(dem.n_detectors)
    for e in dem.edges:
        for i in e.detectors:
            prod[i] *= 1 - 2 * e.probability
    pred = (1 - prod) / 2
    n = 100_000
    rate = sample_shots(nc, n, seed=2024).detectors.mean(0)
    z = np.abs(rate - pred) / np.sqrt(pred * (1 - pred) / n)
    assert z.max() < 4


def test_linearity_of_faults():
    nc = noisy(3, 3)
    rng = np.random.default_rng(0)
    pairs = []
    for _ in range(300):
        a, b = rng.choice(len(nc.channels), 2, replace=False)
        ca = int(rng.integers(1, nc.channels[a].n_components + 1))
        cb = int(rng.integers(1, nc.channels[b].n_components + 1))
        pairs.append(((int(a), ca), (int(b), cb)))
    both = inject_faults(nc, [[p, q] for p, q in pairs])
    first = inject_faults(nc, [[p] for p, _ in pairs])
    second = inject_faults(nc, [[q] for _, q in pairs])
    assert np.array_equal(both, first ^ second)


def test_label_parity_on_final_readout():
    nc = noisy(3, 3)
    c = nc.base
    final_meas = [ch for ch in nc.channels
                  if c.ops[ch.op_index].kind == "measure" and c.ops[ch.op_index].round_index == c.rounds + 1]
    for ch in final_meas:
        bits = inject_faults(nc, [[(ch.id, 1)]])[0]
        q = ch.qubits[0]
        assert bits[-1] == (q in c.layout.logical_z_support)
        fired = set(np.flatnonzero(bits[:-1]))
        incident = {det.id for det in c.detectors if det.round == c.rounds + 1
                    and q in c.layout.stabilizers[det.stabilizer_index].support}
        assert fired == incident


def test_inject_rejects_bad_faults():
    nc = noisy(3, 3)
    with pytest.raises(InvalidParameterError):
        inject_faults(nc, [[(10_000, 1)]])
    with pytest.raises(InvalidParameterError):
        inject_faults(nc, [[(0, 99)]])


def test_round_trip(tmp_path):
    ds = sample_shots(noisy(3, 3), 777, seed=3)
    path = tmp_path / "a.qecd"
    write_dataset(ds, path)
    back = read_dataset(path)
    assert back == ds
    write_dataset(back, tmp_path / "b.qecd")
    assert (tmp_path / "b.qecd").read_bytes() == path.read_bytes()


def test_empty_dataset_size(tmp_path):
    ds = sample_shots(noisy(3, 3), 0, seed=3)
    write_dataset(ds, tmp_path / "e.qecd")
    assert (tmp_path / "e.qecd").stat().st_size == HEADER.size == 35


def test_format_errors(tmp_path):
    ds = sample_shots(noisy(3, 3), 10, seed=3)
    path = tmp_path / "x.qecd"
    write_dataset(ds, path)
    raw = path.read_bytes()
    path.write_bytes(raw[:-1])
    with pytest.raises(FormatError, match="expected 40"):
        read_dataset(path)
    path.write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(FormatError, match="magic"):
        read_dataset(path)
    path.write_bytes(raw[:4] + b"\x02\x00" + raw[6:])
    with pytest.raises(FormatError, match="version"):
        read_dataset(path)
    path.write_bytes(raw[:10])
    with pytest.raises(FormatError, match="header"):
        read_dataset(path)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 60), st.integers(0, 2**64 - 1))
def test_pack_unpack_property(n, seed):
    rng = np.random.default_rng(seed % 2**32)
    bits = rng.integers(0, 2, size=(n, 25), dtype=np.uint8)
    ds = ShotDataset.from_bits(bits, 3, 3, "SD", 0.01, seed)
    assert np.array_equal(ds.bits(), bits)
    assert len(ds.payload) == n * 4
