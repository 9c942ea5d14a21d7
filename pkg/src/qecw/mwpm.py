"""Exact minimum-weight matching decoder over a graphlike DEM.

Defects are matched pairwise or to the boundary by a bitmask DP over subsets.
Path weights come from Dijkstra on the DEM graph with w = ln((1-p)/p); the
boundary is a sink node and is never used as a shortcut between detectors.

Shots with more than ``CLUSTER_THRESHOLD`` defects are first split into
clusters: a pair (i, j) whose path weight is not below b_i + b_j can always be
replaced by two boundary matches at no extra cost, so only cheaper pairs
connect defects.  Each cluster is then solved exactly, large ones by a DP
that only visits subsets reachable through such pairs.  A cluster that is
still too big goes to an exact blossom matcher (networkx).  With
``strict_capacity`` any cluster over ``MAX_DEFECTS`` raises instead.
"""

from __future__ import annotations

import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass
from functools import lru_cache

import numba
import numpy as np

from .dem import DetectorErrorModel
from .errors import CapacityError, InfeasibleDecodeError, ShapeError

MAX_DEFECTS = 24  # dense DP bound
MAX_CLUSTER = 62  # sparse DP works on int64 masks
MAX_STATES = 1 << 22
CLUSTER_THRESHOLD = 12
P_FLOOR = 1e-12

_OK, _CAPACITY, _INFEASIBLE = 0, 1, 2


def edge_weight(p: float) -> float:
    p = max(p, P_FLOOR)
    return math.log((1 - p) / p)


@dataclass(frozen=True)
class DefectMetric:
    defects: tuple[int, ...]
    pair_weight: np.ndarray  # (k, k)
    pair_parity: np.ndarray
    boundary_weight: np.ndarray  # (k,)
    boundary_parity: np.ndarray


@dataclass(frozen=True)
class LerReport:
    shots: int
    failures: int

    @property
    def ler(self) -> float:
        return self.failures / self.shots if self.shots else 0.0

    @property
    def stderr(self) -> float:
        ler = self.ler
        return math.sqrt(ler * (1 - ler) / self.shots) if self.shots else 0.0

    def to_dict(self) -> dict:
        return {**asdict(self), "ler": self.ler, "stderr": self.stderr}

    def to_json(self) -> str:
        return json.dumps(self.to_dict())


# ---------------------------------------------------------------------------
# shortest paths

def _adjacency(dem: DetectorErrorModel):
    """CSR adjacency; node ``n`` is the boundary.  Parallel edges keep the lighter one."""
    n = dem.n_detectors
    best: dict[tuple[int, int], tuple[float, int]] = {}
    for e in dem.edges:
        a, b = (e.detectors[0], n) if len(e.detectors) == 1 else e.detectors
        w = edge_weight(e.probability)
        for key in ((a, b), (b, a)):
            if key not in best or (w, e.observable_flip) < best[key]:
                best[key] = (w, e.observable_flip)
    keys = sorted(best)
    ptr = np.zeros(n + 2, dtype=np.int64)
    for a, _ in keys:
        ptr[a + 1] += 1
    ptr = np.cumsum(ptr)
    nbr = np.array([b for _, b in keys], dtype=np.int64)
    wt = np.array([best[k][0] for k in keys], dtype=np.float64)
    fl = np.array([best[k][1] for k in keys], dtype=np.uint8)
    return ptr, nbr, wt, fl


@numba.njit(cache=True)
def _heap_push(hk, hv, size, key, val):
    i = size
    hk[i] = key
    hv[i] = val
    while i > 0:
        parent = (i - 1) // 2
        if hk[parent] < hk[i] or (hk[parent] == hk[i] and hv[parent] <= hv[i]):
            break
        hk[parent], hk[i] = hk[i], hk[parent]
        hv[parent], hv[i] = hv[i], hv[parent]
        i = parent
    return size + 1


@numba.njit(cache=True)
def _heap_pop(hk, hv, size):
    key, val = hk[0], hv[0]
    size -= 1
    hk[0] = hk[size]
    hv[0] = hv[size]
    i = 0
    while True:
        l, r, m = 2 * i + 1, 2 * i + 2, i
        if l < size and (hk[l] < hk[m] or (hk[l] == hk[m] and hv[l] < hv[m])):
            m = l
        if r < size and (hk[r] < hk[m] or (hk[r] == hk[m] and hv[r] < hv[m])):
            m = r
        if m == i:
            break
        hk[m], hk[i] = hk[i], hk[m]
        hv[m], hv[i] = hv[i], hv[m]
        i = m
    return key, val, size


@numba.njit(cache=True)
def _all_pairs(ptr, nbr, wt, fl, n):
    dist = np.full((n, n + 1), np.inf)
    par = np.zeros((n, n + 1), dtype=np.uint8)
    cap = nbr.shape[0] + n + 2
    hk = np.empty(cap)
    hv = np.empty(cap, dtype=np.int64)
    pred = np.empty(n + 1, dtype=np.int64)
    done = np.zeros(n + 1, dtype=np.bool_)
    for src in range(n):
        d = dist[src]
        pa = par[src]
        pred[:] = n + 1
        done[:] = False
        d[src] = 0.0
        size = _heap_push(hk, hv, 0, 0.0, src)
        while size > 0:
            du, u, size = _heap_pop(hk, hv, size)
            if done[u] or du > d[u]:
                continue
            done[u] = True
            if u == n:
                continue  # boundary is a sink
            for e in range(ptr[u], ptr[u + 1]):
                v = nbr[e]
                if done[v]:
                    continue
                nd = du + wt[e]
                if nd < d[v] or (nd == d[v] and u < pred[v]):
                    d[v] = nd
                    pred[v] = u
                    pa[v] = pa[u] ^ fl[e]
                    size = _heap_push(hk, hv, size, nd, v)
    return dist, par


@lru_cache(maxsize=8)
def _tables(dem: DetectorErrorModel):
    ptr, nbr, wt, fl = _adjacency(dem)
    return _all_pairs(ptr, nbr, wt, fl, dem.n_detectors)


def shortest_paths(dem: DetectorErrorModel):
    """(dist, parity) tables of shape (n, n+1); column n is the boundary."""
    return _tables(dem)


def floyd_warshall(dem: DetectorErrorModel) -> np.ndarray:
    """Independent all-pairs oracle (weights only, boundary as a sink)."""
    n = dem.n_detectors
    ptr, nbr, wt, _ = _adjacency(dem)
    w = np.full((n + 1, n + 1), np.inf)
    np.fill_diagonal(w, 0.0)
    for a in range(n + 1):
        for e in range(ptr[a], ptr[a + 1]):
            w[a, nbr[e]] = min(w[a, nbr[e]], wt[e])
    w[n, :n] = np.inf  # nothing leaves the boundary
    for k in range(n):
        w = np.minimum(w, w[:, k:k + 1] + w[k:k + 1, :])
    return w[:n]


def build_metric(dem: DetectorErrorModel, defects) -> DefectMetric:
    defects = tuple(sorted(int(i) for i in defects))
    dist, par = shortest_paths(dem)
    idx = np.array(defects, dtype=np.int64)
    n = dem.n_detectors
    if len(idx) and (idx.min() < 0 or idx.max() >= n):
        raise ShapeError(f"defect ids must lie in [0, {n})")
    metric = DefectMetric(
        defects=defects,
        pair_weight=dist[np.ix_(idx, idx)] if len(idx) else np.zeros((0, 0)),
        pair_parity=par[np.ix_(idx, idx)] if len(idx) else np.zeros((0, 0), np.uint8),
        boundary_weight=dist[idx, n],
        boundary_parity=par[idx, n],
    )
    for a, i in enumerate(defects):
        if not np.isfinite(metric.boundary_weight[a]) and not np.isfinite(np.delete(metric.pair_weight[a], a)).any():
            raise InfeasibleDecodeError(f"detector {i} has no path to any other defect or the boundary")
    return metric


# ---------------------------------------------------------------------------
# matching

@numba.njit(cache=True)
def _dp(W, P, B, PB):
    """Bitmask DP; returns (weight, parity).  Option order: boundary, then j ascending."""
    k = B.shape[0]
    full = (1 << k) - 1
    best = np.full(1 << k, np.inf)
    parity = np.zeros(1 << k, dtype=np.uint8)
    best[0] = 0.0
    for mask in range(1, full + 1):
        i = 0
        while not (mask >> i) & 1:
            i += 1
        rest = mask ^ (1 << i)
        bw = B[i] + best[rest]
        bp = PB[i] ^ parity[rest]
        for j in range(i + 1, k):
            if (rest >> j) & 1:
                sub = rest ^ (1 << j)
                cand = W[i, j] + best[sub]
                if cand < bw:
                    bw = cand
                    bp = P[i, j] ^ parity[sub]
        best[mask] = bw
        parity[mask] = bp
    return best[full], parity[full]


@numba.njit(cache=True)
def _dp_sparse(W, P, B, PB, max_states):
    """Same recursion as ``_dp`` restricted to useful pairs (W < B_i + B_j).

    Only subsets reachable from the full set are visited, which keeps large
    but spatially local clusters cheap.  Dropping non-useful pairs never
    raises the optimum since two boundary matches cost no more.
    """
    k = B.shape[0]
    full = (np.int64(1) << k) - 1
    index = numba.typed.Dict.empty(numba.types.int64, numba.types.int64)
    masks = [full]
    index[full] = 0
    head = 0
    while head < len(masks):
        mask = masks[head]
        head += 1
        if mask == 0:
            continue
        i = 0
        while not (mask >> i) & 1:
            i += 1
        rest = mask ^ (np.int64(1) << i)
        if rest not in index:
            index[rest] = len(masks)
            masks.append(rest)
        for j in range(i + 1, k):
            if (rest >> j) & 1 and W[i, j] < B[i] + B[j]:
                sub = rest ^ (np.int64(1) << j)
                if sub not in index:
                    index[sub] = len(masks)
                    masks.append(sub)
        if len(masks) > max_states:
            return np.inf, np.uint8(0), False
    m = len(masks)
    best = np.full(m, np.inf)
    parity = np.zeros(m, dtype=np.uint8)
    bits = np.zeros(m, dtype=np.int64)
    for t in range(m):
        x = masks[t]
        while x:
            x &= x - 1
            bits[t] += 1
    # children always have fewer bits
    for t in np.argsort(bits, kind="mergesort"):
        mask = masks[t]
        if mask == 0:
            best[t] = 0.0
            continue
        i = 0
        while not (mask >> i) & 1:
            i += 1
        rest = mask ^ (np.int64(1) << i)
        r = index[rest]
        bw = B[i] + best[r]
        bp = PB[i] ^ parity[r]
        for j in range(i + 1, k):
            if (rest >> j) & 1 and W[i, j] < B[i] + B[j]:
                c = index[rest ^ (np.int64(1) << j)]
                cand = W[i, j] + best[c]
                if cand < bw:
                    bw = cand
                    bp = P[i, j] ^ parity[c]
        best[t] = bw
        parity[t] = bp
    return best[0], parity[0], True


@numba.njit(cache=True)
def _find(root, a):
    while root[a] != a:
        root[a] = root[root[a]]
        a = root[a]
    return a


@numba.njit(cache=True)
def _decode_defects(defects, dist, par, n, threshold, cap):
    k = defects.shape[0]
    if k == 0:
        return 0, 0.0, _OK
    W = np.empty((k, k))
    P = np.empty((k, k), dtype=np.uint8)
    B = np.empty(k)
    PB = np.empty(k, dtype=np.uint8)
    for a in range(k):
        B[a] = dist[defects[a], n]
        PB[a] = par[defects[a], n]
        for b in range(k):
            W[a, b] = dist[defects[a], defects[b]]
            P[a, b] = par[defects[a], defects[b]]
    if k <= threshold:
        w, p = _dp(W, P, B, PB)
        return p, w, _OK if np.isfinite(w) else _INFEASIBLE
    root = np.arange(k)
    for a in range(k):
        for b in range(a + 1, k):
            if W[a, b] < B[a] + B[b]:
                ra, rb = _find(root, a), _find(root, b)
                if ra != rb:
                    root[max(ra, rb)] = min(ra, rb)
    labels = np.empty(k, dtype=np.int64)
    for a in range(k):
        labels[a] = _find(root, a)
    total_w = 0.0
    total_p = 0
    for c in range(k):
        members = np.flatnonzero(labels == c)
        m = members.shape[0]
        if m == 0:
            continue
        if m > cap:
            return 0, np.inf, _CAPACITY
        Wc = np.empty((m, m))
        Pc = np.empty((m, m), dtype=np.uint8)
        Bc = np.empty(m)
        PBc = np.empty(m, dtype=np.uint8)
        for a in range(m):
            Bc[a] = B[members[a]]
            PBc[a] = PB[members[a]]
            for b in range(m):
                Wc[a, b] = W[members[a], members[b]]
                Pc[a, b] = P[members[a], members[b]]
        if m > threshold:
            w, p, ok = _dp_sparse(Wc, Pc, Bc, PBc, MAX_STATES)
            if not ok:
                return 0, np.inf, _CAPACITY
        else:
            w, p = _dp(Wc, Pc, Bc, PBc)
        total_w += w
        total_p ^= p
    return total_p, total_w, _OK if np.isfinite(total_w) else _INFEASIBLE


@numba.njit(cache=True)
def _decode_batch(dets, dist, par, threshold, cap):
    n_shots, n = dets.shape
    pred = np.zeros(n_shots, dtype=np.uint8)
    weight = np.zeros(n_shots)
    status = np.zeros(n_shots, dtype=np.int64)
    for s in range(n_shots):
        defects = np.flatnonzero(dets[s])
        p, w, st = _decode_defects(defects, dist, par, n, threshold, cap)
        pred[s] = p
        weight[s] = w
        status[s] = st
    return pred, weight, status


def _raise_for(status: int, where: str):
    if status == _CAPACITY:
        raise CapacityError(f"{where}: a defect cluster exceeds the exact matcher's capacity "
                            f"({MAX_DEFECTS} defects); lower p or d")
    if status == _INFEASIBLE:
        raise InfeasibleDecodeError(f"{where}: some defect cannot be matched")


def blossom_decode(defects, dist, par) -> tuple[float, int]:
    """Exact matching with boundary via networkx blossom (one boundary copy per defect)."""
    import networkx as nx

    defects = [int(i) for i in defects]
    k = len(defects)
    n = dist.shape[0]
    finite = [w for w in dist[np.ix_(defects, defects + [n])].ravel() if np.isfinite(w)]
    big = max(finite, default=0.0) + 1.0
    g = nx.Graph()
    for a in range(k):
        if np.isfinite(dist[defects[a], n]):
            g.add_edge(a, k + a, weight=big - dist[defects[a], n])
        for b in range(a + 1, k):
            if np.isfinite(dist[defects[a], defects[b]]):
                g.add_edge(a, b, weight=big - dist[defects[a], defects[b]])
            g.add_edge(k + a, k + b, weight=big)
    matching = nx.max_weight_matching(g, maxcardinality=True)
    if len(matching) != k:
        raise InfeasibleDecodeError("no perfect matching with boundary exists")
    weight, parity = 0.0, 0
    for u, v in sorted(tuple(sorted(m)) for m in matching):
        if u >= k:
            continue
        if v >= k:
            weight += dist[defects[u], n]
            parity ^= int(par[defects[u], n])
        else:
            weight += dist[defects[u], defects[v]]
            parity ^= int(par[defects[u], defects[v]])
    return weight, parity


def decode_shot(dem: DetectorErrorModel, detector_bits, threshold: int = CLUSTER_THRESHOLD,
                strict_capacity: bool = False) -> dict:
    bits = np.asarray(detector_bits, dtype=np.uint8).reshape(1, -1)
    pred, weight = decode_batch(dem, bits, threshold, strict_capacity)
    return {"prediction": int(pred[0]), "weight": float(weight[0])}


def brute_force_decode(metric: DefectMetric) -> tuple[float, int]:
    """Exhaustive pairing oracle with the same option order as the DP."""
    k = len(metric.defects)
    W, P = metric.pair_weight, metric.pair_parity
    B, PB = metric.boundary_weight, metric.boundary_parity

    def pairings(remaining):
        # every pairing-with-boundary, in DP option order
        if not remaining:
            yield []
            return
        i, rest = remaining[0], remaining[1:]
        for tail in pairings(rest):
            yield [(i, None)] + tail
        for j in rest:
            for tail in pairings(tuple(x for x in rest if x != j)):
                yield [(i, j)] + tail

    def cost(matches):
        w, p = 0.0, 0
        for i, j in reversed(matches):  # right fold, as in the DP
            w = (float(B[i]) if j is None else float(W[i, j])) + w
            p ^= int(PB[i]) if j is None else int(P[i, j])
        return w, p

    if k > 12:
        raise CapacityError("brute-force oracle limited to 12 defects")
    best = (math.inf, 0)
    for matches in pairings(tuple(range(k))):
        w, p = cost(matches)
        if w < best[0]:
            best = (w, p)
    return best


def decode_batch(dem: DetectorErrorModel, detectors: np.ndarray, threshold: int = CLUSTER_THRESHOLD,
                 strict_capacity: bool = False):
    """Decode every row; returns (predictions, matching weights)."""
    detectors = np.ascontiguousarray(detectors, dtype=np.uint8)
    if detectors.ndim != 2 or detectors.shape[1] != dem.n_detectors:
        raise ShapeError(f"detector array shape {detectors.shape} does not match DEM with "
                         f"{dem.n_detectors} detectors")
    dist, par = shortest_paths(dem)
    cap = MAX_DEFECTS if strict_capacity else MAX_CLUSTER
    pred, weight, status = _decode_batch(detectors, dist, par, threshold, cap)
    for s in np.flatnonzero(status):
        if status[s] == _CAPACITY and not strict_capacity:
            weight[s], pred[s] = blossom_decode(np.flatnonzero(detectors[s]), dist, par)
        else:
            _raise_for(int(status[s]), f"shot {int(s)}")
    return pred, weight


def _decode_chunk(args):
    dem, dets, strict = args
    return decode_batch(dem, dets, strict_capacity=strict)[0]


def evaluate(dem: DetectorErrorModel, dataset, workers: int = 1, chunk: int = 8192,
             strict_capacity: bool = False) -> LerReport:
    bits = dataset.bits()
    dets, labels = bits[:, :-1], bits[:, -1]
    if dets.shape[1] != dem.n_detectors:
        raise ShapeError(f"dataset has {dets.shape[1]} detectors, DEM expects {dem.n_detectors}")
    if workers > 1 and len(dets) > chunk:
        parts = [(dem, dets[s:s + chunk], strict_capacity) for s in range(0, len(dets), chunk)]
        with ProcessPoolExecutor(max_workers=workers) as ex:
            pred = np.concatenate(list(ex.map(_decode_chunk, parts)))
    else:
        pred = decode_batch(dem, dets, strict_capacity=strict_capacity)[0]
    return LerReport(shots=len(labels), failures=int(np.count_nonzero(pred != labels)))
