"""Oracle suites runnable from an installed package (``qecw selftest``)."""

from __future__ import annotations

import numpy as np

from .autodiff import ops
from .autodiff.gradcheck import check_gradients
from .dem import dem_from_circuit, enumerate_faults
from .mwpm import brute_force_decode, build_metric, decode_batch
from .pauli_sim import inject_faults, memory_z, sample_shots

GRAD_TOL = 1e-4


def _grad_cases(rng):
    bn = lambda train: lambda x, g, b: ops.batch_norm(x, g, b, np.zeros(x.shape[1]), np.ones(x.shape[1]), train)
    for k in range(5):
        n, c, o = (int(v) for v in rng.integers(1, 4, size=3))
        yield "dense", ops.dense, [rng.standard_normal((n + 1, c)), rng.standard_normal((o, c)), rng.standard_normal(o)]
        yield "conv2d", ops.conv2d, [rng.standard_normal((n, c, 3, 2 + k % 2)), rng.standard_normal((o, c, 3, 3))]
        yield "conv1d", ops.conv1d, [rng.standard_normal((n, c, 4)), rng.standard_normal((o, c, 3)),
                                     rng.standard_normal(o)]
        for train in (True, False):
            yield f"batch_norm[{'train' if train else 'eval'}]", bn(train), [
                rng.standard_normal((n + 2, c, 3)), rng.standard_normal(c), rng.standard_normal(c)]
        yield "layer_norm", ops.layer_norm, [rng.standard_normal((n, 4)) * 0.3 + np.arange(4),
                                             rng.standard_normal(4), rng.standard_normal(4)]
        x = rng.standard_normal((n, c + 1))
        yield "relu", ops.relu, [np.where(np.abs(x) < 0.05, 0.5, x)]
        yield "gelu", ops.gelu, [rng.standard_normal((n, c))]
        seed = int(rng.integers(1 << 30))
        yield "dropout", lambda t: ops.dropout(t, 0.2, True, np.random.default_rng(seed)), [rng.standard_normal((n, 5))]
        yield "add", ops.add, [rng.standard_normal((n, c)), rng.standard_normal((n, c))]
        yield "mean_pool", lambda t: ops.mean_pool(t, 1), [rng.standard_normal((n, 3, c))]
        y = rng.integers(0, 2, size=n + 1)
        yield "bce_with_logits", lambda z: ops.bce_with_logits(z, y), [rng.standard_normal(n + 1)]


def gradient_suite(seed: int = 0) -> list[tuple[str, bool, str]]:
    worst: dict[str, float] = {}
    for name, fn, args in _grad_cases(np.random.default_rng(seed)):
        worst[name] = max(worst.get(name, 0.0), check_gradients(fn, args))
    return [(f"grad {k}", v < GRAD_TOL, f"max rel err {v:.2e}") for k, v in worst.items()]


def matching_suite(shots: int = 300, seed: int = 0) -> list[tuple[str, bool, str]]:
    nc = memory_z(3, 3, "SD", 0.012)
    dem = dem_from_circuit(memory_z(3, 3))
    dets = sample_shots(nc, shots * 3, seed=seed).detectors
    dets = dets[dets.sum(1) <= 8][:shots]
    pred, weight = decode_batch(dem, dets)
    bad = 0
    for row, p, w in zip(dets, pred, weight):
        bw, bp = brute_force_decode(build_metric(dem, np.flatnonzero(row)))
        bad += (w != bw) or (p != bp)
    return [("matching dp == exhaustive", bool(bad == 0), f"{bad} mismatches over {len(dets)} shots")]


def injection_suite() -> list[tuple[str, bool, str]]:
    out = []
    for kind in ("SD", "SI1000"):
        nc = memory_z(3, 3, kind, 0.004)
        faults = enumerate_faults(nc)
        bits = inject_faults(nc, [[(m.channel, m.component)] for m in faults])
        bad = sum(tuple(np.flatnonzero(row[:-1])) != m.detectors or row[-1] != m.observable_flip
                  for row, m in zip(bits, faults))
        out.append((f"fault injection {kind}", bool(bad == 0), f"{bad} mismatches over {len(faults)} mechanisms"))
    return out


def run_all() -> list[tuple[str, bool, str]]:
    return gradient_suite() + matching_suite() + injection_suite()
