import random
from collections import deque

import numpy as np
import pytest

from qecw.dem import (DetectorErrorModel, FaultMechanism, build_dem, decompose, dem_from_circuit,
                      enumerate_faults, format_dem, merge_probability, parse_dem)
from qecw.errors import DecompositionError
from qecw.pauli_sim import inject_faults

from conftest import dem_for, noisy


def _mech(dets, p=0.001, flip=0, factors=None, channel=0, comp=1):
    return FaultMechanism(channel, comp, "X", p, tuple(dets), flip,
                          factors if factors is not None else (("X0", tuple(dets), flip),))


def test_zero_rate_gives_no_faults():
    assert enumerate_faults(noisy(3, 3, "SD", 0.0)) == []


def test_empty_dem():
    dem = build_dem([], 0)
    assert len(dem) == 0 and dem.n_detectors == 0


def test_merge_formula():
    assert merge_probability(0.001, 0.001) == pytest.approx(0.001998)
    dem = build_dem([_mech([1, 2], channel=0), _mech([1, 2], channel=5)], 3)
    assert len(dem) == 1
    assert dem.edges[0].probability == pytest.approx(0.001998)
    assert dem.provenance[((1, 2), 0)] == (0, 5)


def test_bulk_idle_x_signature():
    nc = noisy(3, 3)
    lay = nc.base.layout
    centre = lay.data_index(1, 1)
    faults = enumerate_faults(nc)
    for m in faults:
        ch = nc.channels[m.channel]
        op = nc.base.ops[ch.op_index]
        if op.kind == "idle_marker" and op.round_index == 1 and ch.qubits == (centre,):
            if m.pauli == "X":
                assert len(m.detectors) == 2 and m.observable_flip == 0
            if m.pauli == "Z":
                assert m.observable_flip == 0 and len(m.detectors) <= 2
                for det in m.detectors:
                    dd = nc.base.detectors[det]
                    assert lay.stabilizers[dd.stabilizer_index].type == "X"
                    assert 2 <= dd.round <= nc.base.rounds


def test_mechanism_probabilities():
    nc = noisy(3, 3)
    for m in enumerate_faults(nc):
        ch = nc.channels[m.channel]
        assert m.probability == pytest.approx(ch.rate / ch.n_components)
        assert 0 < m.probability < 0.5
        assert list(m.detectors) == sorted(set(m.detectors))


@pytest.mark.parametrize("kind", ["SD", "SI1000"])
def test_injection_reproduces_every_mechanism(kind):
    nc = noisy(3, 3, kind, 0.004)
    faults = enumerate_faults(nc)
    bits = inject_faults(nc, [[(m.channel, m.component)] for m in faults])
    for row, m in zip(bits, faults):
        assert tuple(np.flatnonzero(row[:-1])) == m.detectors
        assert row[-1] == m.observable_flip


@pytest.mark.parametrize("d", [3, 5])
def test_dem_is_graphlike(d):
    dem = dem_for(d, d)
    assert all(1 <= len(e.detectors) <= 2 for e in dem.edges)
    assert all(0 < e.probability < 0.5 for e in dem.edges)
    assert all(max(e.detectors) < d * (d * d - 1) for e in dem.edges)
    keys = [(e.detectors, e.observable_flip) for e in dem.edges]
    assert len(keys) == len(set(keys))


def test_merge_order_independent():
    faults = enumerate_faults(noisy(3, 3))
    base = build_dem(faults, 24)
    shuffled = faults[:]
    random.Random(4).shuffle(shuffled)
    other = build_dem(shuffled, 24)
    assert other == base
    assert format_dem(other) == format_dem(base)


def test_monotone_in_p():
    lo, hi = dem_for(3, 3, "SD", 0.002), dem_for(3, 3, "SD", 0.006)
    assert [(e.detectors, e.observable_flip) for e in lo.edges] == [(e.detectors, e.observable_flip) for e in hi.edges]
    assert all(a.probability < b.probability for a, b in zip(lo.edges, hi.edges))


def test_decompose_splits_y():
    m = FaultMechanism(0, 2, "Y", 0.001, (0, 1, 5, 6), 0,
                       (("X3", (0, 1), 0), ("Z3", (5, 6), 0)))
    assert sorted(decompose(m)) == [((0, 1), 0), ((5, 6), 0)]


def test_undecomposable_raises():
    m = FaultMechanism(7, 1, "X", 0.001, (0, 1, 2), 0, (("X3", (0, 1, 2), 0),))
    with pytest.raises(DecompositionError, match="channel 7"):
        decompose(m)


def test_dump_round_trip():
    dem = dem_for(3, 3)
    text = format_dem(dem)
    assert text.splitlines()[1].startswith("edge D")
    back = parse_dem(text)
    assert back.edges == dem.edges and back.n_detectors == dem.n_detectors


def _circuit_distance(dem: DetectorErrorModel) -> int:
    """Fewest DEM edges forming an undetectable logical (unit-weight odd cycle via BFS)."""
    n = dem.n_detectors
    adj = [[] for _ in range(n + 1)]
    for e in dem.edges:
        a, b = (e.detectors[0], n) if len(e.detectors) == 1 else e.detectors
        adj[a].append((b, e.observable_flip))
        adj[b].append((a, e.observable_flip))
    best = 10**9
    for src in range(n + 1):
        dist = {(src, 0): 0}
        queue = deque([(src, 0)])
        while queue:
            v, par = queue.popleft()
            for w, f in adj[v]:
                key = (w, par ^ f)
                if key not in dist:
                    dist[key] = dist[(v, par)] + 1
                    queue.append(key)
        best = min(best, dist.get((src, 1), 10**9))
    return best


@pytest.mark.parametrize("d", [3, 5])
def test_circuit_distance_equals_d(d):
    assert _circuit_distance(dem_for(d, d)) == d
