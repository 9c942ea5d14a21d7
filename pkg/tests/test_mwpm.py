import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from qecw.dem import DetectorErrorModel, Edge, enumerate_faults
from qecw.errors import CapacityError, ShapeError
from qecw.mwpm import (LerReport, brute_force_decode, build_metric, decode_batch, decode_shot, evaluate,
                       floyd_warshall, shortest_paths)
from qecw.pauli_sim import sample_shots

from conftest import dem_for, noisy


def _dem(n, edges):
    return DetectorErrorModel(n, tuple(Edge(tuple(d), p, f) for d, p, f in edges), {})


def test_empty_metric_and_shot():
    dem = dem_for(3, 3)
    m = build_metric(dem, [])
    assert m.pair_weight.shape == (0, 0)
    assert decode_shot(dem, np.zeros(24, np.uint8)) == {"prediction": 0, "weight": 0.0}


def test_single_edge_weight():
    dem = _dem(2, [((0, 1), 0.01, 0), ((0,), 0.001, 1), ((1,), 0.001, 0)])
    m = build_metric(dem, {0, 1})
    assert m.pair_weight[0, 1] == pytest.approx(math.log(0.99 / 0.01))
    assert m.pair_weight[0, 1] == pytest.approx(4.595, abs=1e-3)
    out = decode_shot(dem, [1, 1])
    assert out["prediction"] == 0
    assert decode_shot(dem, [1, 0])["prediction"] == 1


def test_boundary_is_a_sink():
    # 0 and 1 are only joined through the boundary; the metric must not shortcut
    dem = _dem(2, [((0,), 0.1, 0), ((1,), 0.1, 0)])
    m = build_metric(dem, {0, 1})
    assert np.isinf(m.pair_weight[0, 1])
    assert decode_shot(dem, [1, 1])["weight"] == pytest.approx(2 * math.log(9))


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 9), st.data())
def test_dijkstra_matches_floyd_warshall(n, data):
    edges = []
    for i in range(n):
        for j in range(i + 1, n):
            if data.draw(st.booleans()):
                edges.append(((i, j), data.draw(st.floats(1e-4, 0.45)), data.draw(st.integers(0, 1))))
        if data.draw(st.booleans()):
            edges.append(((i,), data.draw(st.floats(1e-4, 0.45)), data.draw(st.integers(0, 1))))
    dem = _dem(n, edges)
    dist, _ = shortest_paths(dem)
    fw = floyd_warshall(dem)
    assert np.allclose(np.where(np.isinf(fw), -1, fw), np.where(np.isinf(dist), -1, dist))


def test_single_bulk_error_matched_together():
    nc = noisy(3, 3)
    dem = dem_for(3, 3)
    faults = [m for m in enumerate_faults(nc) if m.pauli == "X" and len(m.detectors) == 2
              and nc.base.ops[nc.channels[m.channel].op_index].kind == "idle_marker"]
    for m in faults:
        bits = np.zeros(24, np.uint8)
        bits[list(m.detectors)] = 1
        assert decode_shot(dem, bits)["prediction"] == m.observable_flip == 0


def test_dp_equals_brute_force():
    dem = dem_for(3, 3)
    dets = sample_shots(noisy(3, 3, "SD", 0.012), 4000, seed=8).detectors
    dets = dets[(dets.sum(1) <= 8)][:1500]
    assert len(dets) >= 1000
    pred, weight = decode_batch(dem, dets)
    for row, p, w in zip(dets, pred, weight):
        bw, bp = brute_force_decode(build_metric(dem, np.flatnonzero(row)))
        assert w == bw and p == bp


def test_clustered_path_matches_full_dp():
    dem = dem_for(5, 5)
    dets = sample_shots(noisy(5, 5), 3000, seed=21).detectors
    dets = dets[(dets.sum(1) > 12) & (dets.sum(1) <= 18)]
    fast_p, fast_w = decode_batch(dem, dets)
    full_p, full_w = decode_batch(dem, dets, threshold=24)
    assert np.allclose(fast_w, full_w, rtol=0, atol=1e-9)
    assert np.array_equal(fast_p, full_p)


def test_blossom_fallback_agrees_with_dp():
    from qecw.mwpm import blossom_decode
    dem = dem_for(3, 3)
    dist, par = shortest_paths(dem)
    dets = sample_shots(noisy(3, 3, "SD", 0.015), 400, seed=2).detectors
    for row in dets[dets.sum(1) <= 10]:
        w, p = blossom_decode(np.flatnonzero(row), dist, par)
        out = decode_shot(dem, row)
        assert w == pytest.approx(out["weight"], abs=1e-9)


def test_strict_capacity():
    dem = dem_for(5, 5)
    bits = np.zeros((1, 120), np.uint8)
    bits[0, ::4] = 1  # 30 spread-out defects that mostly cluster
    with pytest.raises(CapacityError):
        decode_batch(dem, np.ones((1, 120), np.uint8), strict_capacity=True)
    decode_batch(dem, bits)  # non-strict never raises for capacity


def test_shape_mismatch():
    with pytest.raises(ShapeError):
        decode_shot(dem_for(3, 3), np.zeros(10, np.uint8))
    with pytest.raises(ShapeError):
        evaluate(dem_for(3, 3), sample_shots(noisy(5, 5), 10, seed=1))


def test_noise_free_ler_zero():
    rep = evaluate(dem_for(3, 3), sample_shots(noisy(3, 3, "SD", 0.0), 500, seed=1))
    assert rep.failures == 0 and rep.ler == 0


def test_report_json():
    rep = LerReport(shots=1000, failures=10)
    data = json.loads(rep.to_json())
    assert data == {"shots": 1000, "failures": 10, "ler": 0.01, "stderr": pytest.approx(math.sqrt(0.01 * 0.99 / 1000))}


def test_workers_invariance():
    dem = dem_for(3, 3)
    ds = sample_shots(noisy(3, 3), 20000, seed=3)
    assert evaluate(dem, ds) == evaluate(dem, ds, workers=4, chunk=3000)


def test_error_suppression():
    n = 50_000
    r3 = evaluate(dem_for(3, 3), sample_shots(noisy(3, 3), n, seed=11))
    r5 = evaluate(dem_for(5, 5), sample_shots(noisy(5, 5), n, seed=11))
    assert r3.ler - r5.ler > 3 * math.hypot(r3.stderr, r5.stderr)
