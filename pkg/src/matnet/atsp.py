"""Asymmetric TSP: instances, tours, rollout environment, heuristics, exact oracle, MIP export."""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import autodiff as ad
from .decoder import select
from .lp import LinearModel

DIST_SCALE = 1e6  # divides raw distances before they enter the network


class CapacityError(ValueError):
    pass


@dataclass
class AtspInstance:
    dist: np.ndarray  # (n, n), zero diagonal

    @property
    def n(self) -> int:
        return self.dist.shape[0]


@dataclass
class Tour:
    perm: np.ndarray
    length: float


@dataclass
class Trajectory:
    """A batch of constructed tours: tours (B, P, n), lengths (B, P), logp (B, P)."""
    tours: np.ndarray
    lengths: np.ndarray
    logp: ad.Tensor | None = None
    step_logps: list = field(default_factory=list)


# ------------------------------------------------------------------ generation

def minplus_closure_np(d: np.ndarray, chunk: int = 64) -> np.ndarray:
    """Repeat full min-plus passes d[i,j] = min_k d[i,k] + d[k,j] until nothing changes.

    ``d`` is (B, n, n); the pass is applied in batch chunks to bound memory.
    """
    d = d.copy()
    for s in range(0, d.shape[0], chunk):
        block = d[s:s + chunk]
        while True:
            new = (block[:, :, :, None] + block[:, None, :, :]).min(axis=2)
            if np.array_equal(new, block):
                break
            block = new
        d[s:s + chunk] = block
    return d


def minplus_pass(d: np.ndarray) -> np.ndarray:
    return (d[..., :, :, None] + d[..., None, :, :]).min(axis=-2)


def generate_tmat_batch(count: int, n: int, rng: np.random.Generator,
                        min_val: int = 1, max_val: int = 1_000_000) -> np.ndarray:
    d = rng.integers(min_val, max_val + 1, size=(count, n, n), dtype=np.int64)
    d[:, np.arange(n), np.arange(n)] = 0
    return minplus_closure(d)


def _floyd_py(d):
    d = d.copy()
    n = d.shape[1]
    for k in range(n):
        np.minimum(d, d[:, :, k:k + 1] + d[:, k:k + 1, :], out=d)
    return d


try:
    from numba import njit

    @njit(cache=True)
    def _floyd_nb(d):
        # shortest-path closure == fixpoint of repeated min-plus passes
        out = d.copy()
        B, n, _ = out.shape
        for b in range(B):
            for k in range(n):
                for i in range(n):
                    dik = out[b, i, k]
                    for j in range(n):
                        v = dik + out[b, k, j]
                        if v < out[b, i, j]:
                            out[b, i, j] = v
        return out

    @njit(cache=True)
    def _insertion_nb(dist, farthest):
        B, n, _ = dist.shape
        tours = np.zeros((B, n), dtype=np.int64)
        nxt = np.zeros(n, dtype=np.int64)
        pos = np.zeros(n, dtype=np.int64)
        in_tour = np.zeros(n, dtype=np.bool_)
        for b in range(B):
            d = dist[b]
            in_tour[:] = False
            in_tour[0] = True
            pos[:] = n + 1
            pos[0] = 0
            nxt[:] = 0
            for size in range(1, n):
                city = -1
                city_val = 0.0
                city_after = -1
                for c in range(n):
                    if in_tour[c]:
                        continue
                    cb = np.inf
                    ca = -1
                    for a in range(n):
                        if not in_tour[a]:
                            continue
                        v = d[a, c] + d[c, nxt[a]] - d[a, nxt[a]]
                        if ca < 0 or v < cb or (v == cb and pos[a] < pos[ca]):
                            cb = v
                            ca = a
                    if city < 0 or (farthest and cb > city_val) or (not farthest and cb < city_val):
                        city = c
                        city_val = cb
                        city_after = ca
                p_a = pos[city_after]
                for a in range(n):
                    if in_tour[a] and pos[a] > p_a:
                        pos[a] += 1
                pos[city] = p_a + 1
                nxt[city] = nxt[city_after]
                nxt[city_after] = city
                in_tour[city] = True
            for c in range(n):
                tours[b, pos[c]] = c
        return tours

    def minplus_closure(d: np.ndarray) -> np.ndarray:
        return _floyd_nb(np.ascontiguousarray(d))

    def _insertion_batch(dist: np.ndarray, farthest: bool) -> np.ndarray:
        return _insertion_nb(np.ascontiguousarray(dist, dtype=np.float64), farthest)
except ImportError:  # pragma: no cover
    minplus_closure = _floyd_py

    def _insertion_batch(dist: np.ndarray, farthest: bool) -> np.ndarray:
        return _insertion_batch_np(dist, farthest)


def generate_tmat(n: int, rng: np.random.Generator, min_val: int = 1,
                  max_val: int = 1_000_000) -> AtspInstance:
    if n < 2:
        raise ValueError("n must be >= 2")
    return AtspInstance(generate_tmat_batch(1, n, rng, min_val, max_val)[0])


def generate_euclidean_batch(count: int, n: int, rng: np.random.Generator):
    pts = rng.random((count, n, 2))
    diff = pts[:, :, None, :] - pts[:, None, :, :]
    return np.sqrt((diff ** 2).sum(-1)), pts


def generate_euclidean(n: int, rng: np.random.Generator) -> AtspInstance:
    if n < 2:
        raise ValueError("n must be >= 2")
    return AtspInstance(euclidean_matrix(rng.random((n, 2))))


def euclidean_matrix(points: np.ndarray) -> np.ndarray:
    diff = points[:, None, :] - points[None, :, :]
    d = np.sqrt((diff ** 2).sum(-1))
    return np.minimum(d, d.T)  # exact symmetry


# ----------------------------------------------------------------------- tours

def check_perm(perm, n: int) -> np.ndarray:
    perm = np.asarray(perm)
    if perm.shape != (n,) or not np.array_equal(np.sort(perm), np.arange(n)):
        raise ValueError(f"not a permutation of 0..{n - 1}: {perm.tolist()}")
    return perm


def tour_length(inst: AtspInstance, perm) -> float:
    perm = check_perm(perm, inst.n)
    return inst.dist[perm, np.roll(perm, -1)].sum().item()


def tour_lengths(dist: np.ndarray, tours: np.ndarray) -> np.ndarray:
    """Batched lengths: dist (B, n, n), tours (B, ..., n)."""
    b = dist.shape[0]
    nxt = np.roll(tours, -1, axis=-1)
    flat_t = tours.reshape(b, -1)
    flat_n = nxt.reshape(b, -1)
    arcs = dist[np.arange(b)[:, None], flat_t, flat_n].reshape(tours.shape)
    return arcs.sum(axis=-1)


# ------------------------------------------------------------------ rollouts

StepFn = Callable[[np.ndarray, np.ndarray, np.ndarray], ad.Tensor]


def rollout(dist: np.ndarray, step_fn: StepFn, starts: np.ndarray, mode: str,
            rng: np.random.Generator | None) -> Trajectory:
    """Construct tours for every (instance, start) pair.

    ``step_fn(first, current, mask)`` returns probabilities (B, P, n); ``starts``
    is (B, P). The first city is fixed by ``starts``; the remaining n-1 cities
    are chosen by the policy under the visited mask.
    """
    b, n, _ = dist.shape
    p = starts.shape[1]
    bi = np.arange(b)[:, None]
    pi = np.arange(p)[None, :]
    mask = np.zeros((b, p, n))
    mask[bi, pi, starts] = -np.inf
    tours = np.zeros((b, p, n), dtype=np.int64)
    tours[:, :, 0] = starts
    current = starts
    logps = []
    for step in range(1, n):
        probs = step_fn(starts, current, mask)
        action = select(probs.data, mode, rng)
        logps.append(ad.log(ad.pick(probs, action)))
        tours[:, :, step] = action
        mask = mask.copy()
        mask[bi, pi, action] = -np.inf
        current = action
    logp = None
    if logps:
        logp = logps[0]
        for lp in logps[1:]:
            logp = ad.add(logp, lp)
    return Trajectory(tours, tour_lengths(dist, tours), logp, logps)


def env_rollout(inst: AtspInstance, policy_step_fn: StepFn, start_city: int, mode: str = "greedy",
                rng: np.random.Generator | None = None) -> Trajectory:
    """Single rollout on one instance; see :func:`rollout` for the policy contract."""
    return rollout(inst.dist[None], policy_step_fn, np.array([[start_city]]), mode, rng)


# ------------------------------------------------------------------ heuristics

def nearest_neighbor_batch(dist: np.ndarray, start: int = 0) -> np.ndarray:
    b, n, _ = dist.shape
    bi = np.arange(b)
    visited = np.zeros((b, n), dtype=bool)
    tours = np.zeros((b, n), dtype=np.int64)
    cur = np.full(b, start)
    tours[:, 0] = cur
    visited[bi, cur] = True
    big = np.iinfo(np.int64).max if np.issubdtype(dist.dtype, np.integer) else np.inf
    for step in range(1, n):
        row = np.where(visited, big, dist[bi, cur])
        cur = row.argmin(axis=1)
        tours[:, step] = cur
        visited[bi, cur] = True
    return tours


def _insertion_batch_np(dist: np.ndarray, farthest: bool) -> np.ndarray:
    """Shared NI/FI loop.

    Each outside city gets its cheapest insertion edge (ties: earliest tour
    position); NI then inserts the city with the smallest increment, FI the one
    with the largest (ties: lowest city index).
    """
    dist = dist.astype(np.float64)
    b, n, _ = dist.shape
    bi = np.arange(b)
    nxt = np.zeros((b, n), dtype=np.int64)   # successor pointer, valid for tour members
    pos = np.full((b, n), n + 1, dtype=np.int64)  # position in tour; n+1 = outside
    in_tour = np.zeros((b, n), dtype=bool)
    in_tour[:, 0] = True
    pos[:, 0] = 0
    for size in range(1, n):
        # inc[b, a, c] = d[a, c] + d[c, nxt[a]] - d[a, nxt[a]]
        d_next = dist[bi[:, None], np.arange(n)[None, :], nxt]            # d[a, nxt[a]]
        to_next = dist[bi[:, None, None], np.arange(n)[None, None, :], nxt[:, :, None]]  # d[c, nxt[a]] (b,a,c)
        inc = dist + to_next - d_next[:, :, None]
        inc = np.where(in_tour[:, :, None], inc, np.inf)
        best = inc.min(axis=1)                                               # (b, c)
        # earliest tour position among equally cheap edges
        ties = inc == best[:, None, :]
        pos_key = np.where(ties, pos[:, :, None], n + 2)
        after = pos_key.argmin(axis=1)                                        # (b, c)
        best = np.where(in_tour, np.nan, best)
        if farthest:
            city = np.nanargmax(best, axis=1)
        else:
            city = np.nanargmin(best, axis=1)
        a = after[bi, city]
        p_a = pos[bi, a]
        shift = in_tour & (pos > p_a[:, None])
        pos = pos + shift
        pos[bi, city] = p_a + 1
        nxt[bi, city] = nxt[bi, a]
        nxt[bi, a] = city
        in_tour[bi, city] = True
    tours = np.zeros((b, n), dtype=np.int64)
    np.put_along_axis(tours, pos, np.arange(n)[None, :].repeat(b, 0), axis=1)
    return tours


def nearest_insertion_batch(dist: np.ndarray) -> np.ndarray:
    return _insertion_batch(dist, farthest=False)


def furthest_insertion_batch(dist: np.ndarray) -> np.ndarray:
    return _insertion_batch(dist, farthest=True)


def _as_tour(inst: AtspInstance, perm: np.ndarray) -> Tour:
    return Tour(perm, tour_length(inst, perm))


def nearest_neighbor(inst: AtspInstance, start: int = 0) -> Tour:
    return _as_tour(inst, nearest_neighbor_batch(inst.dist[None], start)[0])


def nearest_insertion(inst: AtspInstance) -> Tour:
    return _as_tour(inst, nearest_insertion_batch(inst.dist[None])[0])


def furthest_insertion(inst: AtspInstance) -> Tour:
    return _as_tour(inst, furthest_insertion_batch(inst.dist[None])[0])


HEURISTICS = {
    "nn": nearest_neighbor_batch,
    "ni": nearest_insertion_batch,
    "fi": furthest_insertion_batch,
}


# --------------------------------------------------------------- exact oracle

HELD_KARP_MAX_N = 16


def held_karp_batch(dist: np.ndarray) -> np.ndarray:
    """Exact optimal tour lengths via bitmask DP, batched over instances."""
    dist = np.asarray(dist, dtype=np.float64)
    b, n, _ = dist.shape
    if n > HELD_KARP_MAX_N:
        raise CapacityError(f"held_karp supports n <= {HELD_KARP_MAX_N}, got {n}")
    if n == 1:
        return np.zeros(b)
    m = n - 1  # cities 1..n-1 map to bits 0..m-1
    full = 1 << m
    dp = np.full((b, full, m), np.inf)
    for j in range(m):
        dp[:, 1 << j, j] = dist[:, 0, j + 1]
    for subset in range(1, full):
        members = [j for j in range(m) if subset >> j & 1]
        if len(members) < 2:
            continue
        js = np.array(members)
        prev = subset ^ (1 << js)                          # (s,)
        cand = dp[:, prev[:, None], js[None, :]]           # (b, s_j, s_k): end at k, then -> j
        cand = cand + dist[:, js[None, :] + 1, js[:, None] + 1]
        dp[:, subset, js] = cand.min(axis=2)
    closing = dp[:, full - 1, :] + dist[:, np.arange(1, n), 0]
    return closing.min(axis=1)


def held_karp(inst: AtspInstance) -> float:
    return float(held_karp_batch(inst.dist[None])[0])


def brute_force(inst: AtspInstance) -> float:
    n = inst.n
    best = np.inf
    for rest in itertools.permutations(range(1, n)):
        best = min(best, tour_length(inst, (0,) + rest))
    return float(best)


# ------------------------------------------------------------------ MIP export

def mtz_model(inst: AtspInstance) -> LinearModel:
    """Miller-Tucker-Zemlin model; cities are numbered 1..n in variable names."""
    n = inst.n
    c = inst.dist
    x = lambda i, j: f"x_{i + 1}_{j + 1}"  # noqa: E731
    u = lambda i: f"u_{i + 1}"  # noqa: E731
    model = LinearModel(name=f"ATSP MTZ n={n}")
    model.objective = {x(i, j): float(c[i, j]) for i in range(n) for j in range(n) if i != j}
    for j in range(n):
        model.add(f"in_{j + 1}", {x(i, j): 1 for i in range(n) if i != j}, "=", 1)
    for i in range(n):
        model.add(f"out_{i + 1}", {x(i, j): 1 for j in range(n) if j != i}, "=", 1)
    for i in range(1, n):
        for j in range(1, n):
            if i != j:
                model.add(f"mtz_{i + 1}_{j + 1}", {u(i): 1, u(j): -1, x(i, j): n - 1}, "<=", n - 2)
    for i in range(1, n):
        model.bounds[u(i)] = (1, n - 1)
    model.binaries = [x(i, j) for i in range(n) for j in range(n) if i != j]
    return model


def export_mtz_lp(inst: AtspInstance) -> str:
    return mtz_model(inst).to_lp()


def tour_to_mip_values(perm) -> dict[str, float]:
    """x/u assignment for a tour; u_i is the position of city i after rotating city 1 to the front."""
    perm = list(np.roll(perm, -int(np.argmax(np.asarray(perm) == 0))))
    n = len(perm)
    vals: dict[str, float] = {}
    for i in range(n):
        for j in range(n):
            if i != j:
                vals[f"x_{i + 1}_{j + 1}"] = 0.0
    for t in range(n):
        a, b = perm[t], perm[(t + 1) % n]
        vals[f"x_{a + 1}_{b + 1}"] = 1.0
    for t, city in enumerate(perm):
        if city != 0:
            vals[f"u_{city + 1}"] = float(t)
    return vals


# --------------------------------------------------------------------- file io

def format_instance(inst: AtspInstance) -> str:
    d = inst.dist
    fmt = (lambda v: str(int(v))) if np.issubdtype(d.dtype, np.integer) else repr
    rows = [" ".join(fmt(v) for v in row) for row in d.tolist()]
    return f"ATSP {inst.n}\n" + "\n".join(rows) + "\n"


def parse_instance(text: str) -> AtspInstance:
    lines = [ln for ln in text.strip().splitlines() if ln.strip()]
    head = lines[0].split()
    if len(head) != 2 or head[0] != "ATSP":
        raise ValueError("ATSP file must start with 'ATSP n'")
    n = int(head[1])
    vals = [row.split() for row in lines[1:1 + n]]
    if len(vals) != n or any(len(r) != n for r in vals):
        raise ValueError(f"ATSP file needs {n} rows of {n} values")
    try:
        d = np.array([[int(v) for v in r] for r in vals], dtype=np.int64)
    except ValueError:
        d = np.array([[float(v) for v in r] for r in vals])
    return AtspInstance(d)


def save_instance(path, inst: AtspInstance) -> None:
    Path(path).write_text(format_instance(inst))


def load_instance(path) -> AtspInstance:
    return parse_instance(Path(path).read_text())
