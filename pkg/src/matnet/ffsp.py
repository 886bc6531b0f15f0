"""Flexible flow shop: instances, schedules, the Gantt-completion environment, and baselines.

Stages, machines and jobs are 0-based internally; the LP export and the text
formats use the same 0-based indices except where noted.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .decoder import select
from .lp import LinearModel

PROC_SCALE = 10.0  # divides processing times before they enter the network


@dataclass
class FfspInstance:
    proc: np.ndarray  # (S, M, N) integer processing times

    @property
    def S(self) -> int:
        return self.proc.shape[0]

    @property
    def M(self) -> int:
        return self.proc.shape[1]

    @property
    def N(self) -> int:
        return self.proc.shape[2]


@dataclass
class FfspSchedule:
    machine: np.ndarray  # (S, N)
    start: np.ndarray    # (S, N)
    makespan: int

    def completion(self, inst: FfspInstance) -> np.ndarray:
        p = np.take_along_axis(inst.proc, self.machine[:, None, :], axis=1)[:, 0, :]
        return self.start + p


def make_schedule(inst: FfspInstance, machine, start) -> FfspSchedule:
    machine = np.asarray(machine, dtype=np.int64)
    start = np.asarray(start, dtype=np.int64)
    sched = FfspSchedule(machine, start, 0)
    sched.makespan = int(sched.completion(inst)[-1].max())
    return sched


def horizon(inst: FfspInstance) -> int:
    """Serial upper bound on any non-delay schedule: every job back to back on its slowest machine."""
    return int(inst.proc.max(axis=1).sum())


# ------------------------------------------------------------------ generation

def generate_ffsp_batch(count: int, S: int, M: int, N: int, rng: np.random.Generator,
                        low: int = 2, high: int = 9) -> np.ndarray:
    if min(S, M, N) < 1:
        raise ValueError("S, M, N must be >= 1")
    return rng.integers(low, high + 1, size=(count, S, M, N), dtype=np.int64)


def generate_ffsp(S: int, M: int, N: int, rng: np.random.Generator) -> FfspInstance:
    return FfspInstance(generate_ffsp_batch(1, S, M, N, rng)[0])


# ------------------------------------------------------------------ validation

@dataclass
class Violation:
    constraint: str
    indices: tuple
    message: str

    def __str__(self) -> str:
        return f"{self.constraint} {self.indices}: {self.message}"


def validate_schedule(inst: FfspInstance, sched: FfspSchedule) -> Violation | None:
    """First violated constraint, or None for a valid schedule."""
    S, M, N = inst.proc.shape
    if sched.machine.shape != (S, N) or sched.start.shape != (S, N):
        return Violation("F.2", (), f"expected ({S}, {N}) assignments, got {sched.machine.shape}")
    for k in range(S):
        for j in range(N):
            if not 0 <= sched.machine[k, j] < M:
                return Violation("F.2", (k, j), f"machine index {sched.machine[k, j]} out of range")
    comp = sched.completion(inst)
    for j in range(N):
        if sched.start[0, j] < 0:
            return Violation("F.8", (0, j), f"job {j} starts at {sched.start[0, j]} < 0")
    for k in range(1, S):
        for j in range(N):
            if sched.start[k, j] < comp[k - 1, j]:
                return Violation("F.9", (k, j), f"job {j} starts stage {k} at {sched.start[k, j]} "
                                                f"before stage {k - 1} ends at {comp[k - 1, j]}")
    for k in range(S):
        for i in range(M):
            jobs = sorted(np.flatnonzero(sched.machine[k] == i), key=lambda j: sched.start[k, j])
            for a, b in zip(jobs, jobs[1:]):
                if sched.start[k, b] < comp[k, a]:
                    return Violation("F.10", (k, i, int(a), int(b)),
                                     f"jobs {a} and {b} overlap on machine {i} of stage {k}")
    if sched.makespan != comp[-1].max():
        return Violation("F.1", (), f"makespan {sched.makespan} != last completion {comp[-1].max()}")
    return None


# ------------------------------------------------------ Gantt-completion environment

class GanttEnv:
    """Batched Gantt-chart completion over (B, P) trajectories in lockstep time.

    At every integer time t, stages are visited in order and, within a stage,
    machines in the trajectory's machine-order permutation. A decision is
    requested when the machine is idle and at least one job is available.
    Candidates are the N jobs plus a skip option at index N. Beyond the
    horizon bound skip is withheld whenever a job is available.
    """

    def __init__(self, proc: np.ndarray, perms: np.ndarray):
        self.proc = np.asarray(proc, dtype=np.int64)      # (B, S, M, N)
        b, S, M, N = self.proc.shape
        self.perms = np.asarray(perms, dtype=np.int64)    # (B, P, M)
        p = self.perms.shape[1]
        self.shape = (b, p)
        self.S, self.M, self.N = S, M, N
        self.t = 0
        self.cap = self.proc.max(axis=2).sum(axis=(1, 2))  # (B,)
        self.ready = np.full((b, p, S, N), np.iinfo(np.int64).max)
        self.ready[:, :, 0, :] = 0
        self.scheduled = np.zeros((b, p, S, N), dtype=bool)
        self.free_at = np.zeros((b, p, S, M), dtype=np.int64)
        self.machine = np.full((b, p, S, N), -1, dtype=np.int64)
        self.start = np.full((b, p, S, N), -1, dtype=np.int64)
        self._bi = np.arange(b)[:, None]
        self._pi = np.arange(p)[None, :]

    @property
    def done(self) -> np.ndarray:
        return self.scheduled[:, :, -1, :].all(axis=-1)

    def pending(self, stage: int, slot: int):
        """(machine (B,P), need (B,P), mask (B,P,N+1)) for one decision point."""
        machine = self.perms[:, :, slot]
        idle = self.free_at[self._bi, self._pi, stage, machine] <= self.t
        avail = ~self.scheduled[:, :, stage, :] & (self.ready[:, :, stage, :] <= self.t)
        need = idle & avail.any(axis=-1)
        b, p = self.shape
        mask = np.full((b, p, self.N + 1), -np.inf)
        mask[..., :self.N][need[..., None] & avail] = 0.0
        over_cap = self.t >= self.cap[:, None]
        mask[..., self.N] = np.where(need & over_cap, -np.inf, 0.0)
        return machine, need, mask

    def apply(self, stage: int, machine: np.ndarray, need: np.ndarray, action: np.ndarray) -> None:
        act = need & (action < self.N)
        if not act.any():
            return
        bi, pi = np.nonzero(act)
        j = action[bi, pi]
        m = machine[bi, pi]
        dur = self.proc[bi, stage, m, j]
        end = self.t + dur
        self.scheduled[bi, pi, stage, j] = True
        self.machine[bi, pi, stage, j] = m
        self.start[bi, pi, stage, j] = self.t
        self.free_at[bi, pi, stage, m] = end
        if stage + 1 < self.S:
            self.ready[bi, pi, stage + 1, j] = end

    def makespans(self) -> np.ndarray:
        dur = np.take_along_axis(self.proc[:, None, -1, :, :].repeat(self.shape[1], 1),
                                 self.machine[:, :, -1, None, :], axis=2)[:, :, 0, :]
        return (self.start[:, :, -1, :] + dur).max(axis=-1)

    def schedule(self, b: int, p: int) -> FfspSchedule:
        inst = FfspInstance(self.proc[b])
        return make_schedule(inst, self.machine[b, p], self.start[b, p])


StagePolicy = Callable[[int, np.ndarray, np.ndarray], "ad.Tensor | np.ndarray"]


def run_gantt(proc: np.ndarray, perms: np.ndarray, policy: StagePolicy, mode: str,
              rng: np.random.Generator | None, record: list | None = None):
    """Drive a :class:`GanttEnv` to completion.

    ``policy(stage, machine, mask)`` returns probabilities (B, P, N+1), either a
    Tensor (log-probs are then accumulated on the tape) or a plain array.
    Returns (env, logp) where logp is a Tensor (B, P) or None.
    """
    env = GanttEnv(proc, perms)
    logp = None
    while not env.done.all():
        for stage in range(env.S):
            for slot in range(env.M):
                machine, need, mask = env.pending(stage, slot)
                need &= ~env.done
                if not need.any():
                    continue
                mask = np.where(need[..., None], mask, _FORCED_SKIP[env.N])
                probs = policy(stage, machine, mask)
                pdata = probs.data if isinstance(probs, ad.Tensor) else probs
                action = select(pdata, mode, rng)
                if record is not None:
                    record.append((env.t, stage, machine.copy(), need.copy(), action.copy()))
                if isinstance(probs, ad.Tensor):
                    lp = ad.log(ad.pick(probs, action))
                    logp = lp if logp is None else ad.add(logp, lp)
                env.apply(stage, machine, need, action)
        env.t += 1
    return env, logp


class _ForcedSkip(dict):
    def __missing__(self, n):
        row = np.full(n + 1, -np.inf)
        row[n] = 0.0
        self[n] = row
        return row


_FORCED_SKIP = _ForcedSkip()


def uniform_policy(stage: int, machine: np.ndarray, mask: np.ndarray) -> np.ndarray:
    allowed = np.isfinite(mask)
    return allowed / allowed.sum(axis=-1, keepdims=True)


def gantt_rollout(inst: FfspInstance, stage_policies: Sequence[StagePolicy] | StagePolicy,
                  machine_order_perm: Sequence[int], mode: str = "sample",
                  rng: np.random.Generator | None = None):
    """Single-trajectory rollout; returns (schedule, logp Tensor or None)."""
    if sorted(machine_order_perm) != list(range(inst.M)):
        raise ValueError(f"machine order {list(machine_order_perm)} is not a permutation")
    if callable(stage_policies):
        policy = stage_policies
    else:
        policy = lambda stage, machine, mask: stage_policies[stage](stage, machine, mask)  # noqa: E731
    perms = np.asarray(machine_order_perm)[None, None, :]
    env, logp = run_gantt(inst.proc[None], perms, policy, mode, rng)
    return env.schedule(0, 0), logp


def machine_permutations(M: int, cap: int | None = None) -> np.ndarray:
    perms = list(itertools.permutations(range(M)))
    if cap is not None:
        perms = perms[:cap]
    return np.array(perms, dtype=np.int64)


class ScriptedPolicy:
    """Replays a recorded sequence of single-trajectory decisions (job index or N for skip)."""

    def __init__(self, actions: Sequence[int]):
        self.actions = list(actions)
        self.pos = 0

    def __call__(self, stage, machine, mask):
        if self.pos >= len(self.actions):
            raise ValueError(f"scripted actions exhausted after {self.pos} decisions")
        a = self.actions[self.pos]
        self.pos += 1
        if not 0 <= a < mask.shape[-1] or not np.isfinite(mask[0, 0, a]):
            raise ValueError(f"scripted action {a} is not allowed at decision {self.pos - 1}")
        probs = np.zeros_like(mask)
        probs[0, 0, a] = 1.0
        return probs


def schedule_to_actions(inst: FfspInstance, sched: FfspSchedule,
                        machine_order: Sequence[int] | None = None) -> list[int]:
    """Decision sequence that makes the environment reproduce ``sched`` exactly."""
    order = list(machine_order) if machine_order is not None else list(range(inst.M))
    lookup = {(int(k), int(sched.machine[k, j]), int(sched.start[k, j])): j
              for k in range(inst.S) for j in range(inst.N)}
    actions: list[int] = []

    def policy(stage, machine, mask):
        job = lookup.get((stage, int(machine[0, 0]), env_time[0]), inst.N)
        actions.append(job)
        probs = np.zeros_like(mask)
        probs[0, 0, job] = 1.0
        return probs

    env_time = [0]
    env = GanttEnv(inst.proc[None], np.asarray(order)[None, None, :])
    while not env.done.all():
        env_time[0] = env.t
        for stage in range(env.S):
            for slot in range(env.M):
                machine, need, mask = env.pending(stage, slot)
                if not need[0, 0]:
                    continue
                probs = policy(stage, machine, mask)
                if not np.isfinite(mask[0, 0, actions[-1]]):
                    raise ValueError("schedule cannot be expressed as environment decisions")
                env.apply(stage, machine, need, select(probs, "greedy", None))
        env.t += 1
    return actions


# ------------------------------------------------------------------ heuristics

def sjf(inst: FfspInstance) -> FfspSchedule:
    """Shortest Job First: at each time, repeatedly start the shortest (idle machine, available job) pair."""
    proc = inst.proc.tolist()
    S, M, N = inst.S, inst.M, inst.N
    ready = [[0] * N] + [[None] * N for _ in range(S - 1)]
    free_at = [[0] * M for _ in range(S)]
    machine = [[-1] * N for _ in range(S)]
    start = [[-1] * N for _ in range(S)]
    todo = [set(range(N)) for _ in range(S)]
    t = 0
    while todo[-1]:
        for k in range(S):
            rk = ready[k]
            avail = [j for j in todo[k] if rk[j] is not None and rk[j] <= t]
            idle = [i for i in range(M) if free_at[k][i] <= t]
            pk = proc[k]
            while avail and idle:
                _, i, j = min((pk[i][j], i, j) for i in idle for j in avail)
                end = t + pk[i][j]
                machine[k][j], start[k][j] = i, t
                free_at[k][i] = end
                if k + 1 < S:
                    ready[k + 1][j] = end
                todo[k].discard(j)
                avail.remove(j)
                idle.remove(i)
        # nothing changes until the next completion
        future = [f for row in free_at for f in row if f > t]
        future += [r for k in range(S) for j in todo[k] if (r := ready[k][j]) is not None and r > t]
        t = min(future) if future else t + 1
    return make_schedule(inst, machine, start)


def random_schedule(inst: FfspInstance, rng: np.random.Generator) -> FfspSchedule:
    """Uniform random policy over (available jobs + skip) at every decision point."""
    return random_schedule_batch(inst.proc[None], rng)[0]


def random_schedule_batch(procs: np.ndarray, rng: np.random.Generator) -> list[FfspSchedule]:
    b, S, M, N = procs.shape
    perms = np.broadcast_to(np.arange(M), (b, 1, M))
    env, _ = run_gantt(procs, perms, uniform_policy, "sample", rng)
    return [env.schedule(i, 0) for i in range(b)]


# ------------------------------------------------------------ chromosome decoding

def decode_chromosome(inst: FfspInstance, chrom: np.ndarray) -> FfspSchedule:
    """Integer part = machine, fractional part = priority (lower runs first among available jobs)."""
    chrom = np.asarray(chrom, dtype=np.float64)
    machines = np.floor(chrom).astype(np.int64)
    if machines.shape != (inst.S, inst.N) or machines.min() < 0 or machines.max() >= inst.M:
        raise ValueError("chromosome integer parts must lie in [0, M)")
    start = _decode_core(inst.proc, machines, chrom - machines)
    return make_schedule(inst, machines, start)


def _decode_core_py(proc, machines, prio):
    S, M, N = proc.shape
    start = np.zeros((S, N), dtype=np.int64)
    release = np.zeros(N, dtype=np.int64)
    for k in range(S):
        new_release = np.zeros(N, dtype=np.int64)
        for i in range(M):
            jobs = [j for j in range(N) if machines[k, j] == i]
            time = 0
            while jobs:
                best = -1
                for j in jobs:
                    if release[j] <= time and (best < 0 or prio[k, j] < prio[k, best]
                                               or (prio[k, j] == prio[k, best] and j < best)):
                        best = j
                if best < 0:
                    time = min(release[j] for j in jobs)
                    continue
                start[k, best] = time
                time += proc[k, i, best]
                new_release[best] = time
                jobs.remove(best)
        release = new_release
    return start


try:
    from numba import njit

    @njit(cache=True)
    def _decode_core_nb(proc, machines, prio):
        S, M, N = proc.shape
        start = np.zeros((S, N), dtype=np.int64)
        release = np.zeros(N, dtype=np.int64)
        new_release = np.zeros(N, dtype=np.int64)
        pending = np.zeros(N, dtype=np.bool_)
        for k in range(S):
            for i in range(M):
                left = 0
                for j in range(N):
                    pending[j] = machines[k, j] == i
                    if pending[j]:
                        left += 1
                time = 0
                while left > 0:
                    best = -1
                    earliest = np.iinfo(np.int64).max
                    for j in range(N):
                        if not pending[j]:
                            continue
                        if release[j] <= time:
                            if best < 0 or prio[k, j] < prio[k, best]:
                                best = j
                        elif release[j] < earliest:
                            earliest = release[j]
                    if best < 0:
                        time = earliest
                        continue
                    start[k, best] = time
                    time += proc[k, i, best]
                    new_release[best] = time
                    pending[best] = False
                    left -= 1
            release[:] = new_release
        return start

    def _decode_core(proc, machines, prio):
        return _decode_core_nb(np.ascontiguousarray(proc, dtype=np.int64),
                               np.ascontiguousarray(machines), np.ascontiguousarray(prio))
except ImportError:  # pragma: no cover
    _decode_core = _decode_core_py


def schedule_to_chromosome(inst: FfspInstance, sched: FfspSchedule) -> np.ndarray:
    """Machines from the schedule; priorities from the start-time order within each stage."""
    chrom = np.zeros((inst.S, inst.N))
    for k in range(inst.S):
        order = np.lexsort((np.arange(inst.N), sched.start[k]))
        rank = np.empty(inst.N)
        rank[order] = np.arange(inst.N)
        chrom[k] = sched.machine[k] + (rank + 0.5) / inst.N
    return chrom


def _makespan(inst: FfspInstance, chrom: np.ndarray) -> int:
    machines = np.floor(chrom).astype(np.int64)
    start = _decode_core(inst.proc, machines, chrom - machines)
    last = inst.proc[-1, machines[-1], np.arange(inst.N)]
    return int((start[-1] + last).max())


# ------------------------------------------------------------------ metaheuristics

@dataclass
class SearchResult:
    schedule: FfspSchedule
    history: list[int]  # best-so-far makespan after each iteration (index 0 = initial)


def _random_chromosome(inst: FfspInstance, rng: np.random.Generator) -> np.ndarray:
    return rng.integers(0, inst.M, size=(inst.S, inst.N)) + rng.random((inst.S, inst.N))


def _mutate(chrom: np.ndarray, M: int, rng: np.random.Generator) -> np.ndarray:
    c = chrom.copy()
    S, N = c.shape
    k = rng.integers(S)
    machines = np.floor(c[k])
    frac = c[k] - machines
    op = rng.integers(4)
    a, b = sorted(rng.choice(N, size=2, replace=False)) if N > 1 else (0, 0)
    if op == 0:    # exchange
        frac[a], frac[b] = frac[b], frac[a]
    elif op == 1:  # inverse
        frac[a:b + 1] = frac[a:b + 1][::-1].copy()
    elif op == 2:  # insert: move priority at a to position b
        frac = np.insert(np.delete(frac, a), b, frac[a])
    else:          # change
        j = rng.integers(N)
        machines[j] = rng.integers(M)
        frac[j] = rng.random()
    c[k] = machines + frac
    return c


def ga_solve(inst: FfspInstance, pop: int = 25, crossover: float = 0.3, mutation: float = 0.3,
             iters: int = 1000, rng: np.random.Generator | None = None) -> SearchResult:
    """Elitist genetic algorithm over machine/priority chromosomes seeded with SJF."""
    rng = rng or np.random.default_rng()
    seed_sched = sjf(inst)
    population = [schedule_to_chromosome(inst, seed_sched)]
    population += [_random_chromosome(inst, rng) for _ in range(pop - 1)]
    fitness = np.array([_makespan(inst, c) for c in population])
    best_ms, best_sched = seed_sched.makespan, seed_sched
    e = int(fitness.argmin())
    if fitness[e] < best_ms:
        best_ms, best_sched = int(fitness[e]), decode_chromosome(inst, population[e])
    history = [best_ms]
    for _ in range(iters):
        elite = int(fitness.argmin())
        children = [population[elite]]
        child_fit = [fitness[elite]]
        while len(children) < pop:
            a, b = rng.integers(pop, size=2)
            parent = population[a if fitness[a] <= fitness[b] else b]
            child = parent
            if rng.random() < crossover:
                a, b = rng.integers(pop, size=2)
                other = population[a if fitness[a] <= fitness[b] else b]
                pm, om = np.floor(parent), np.floor(other)
                take_m = rng.random(parent.shape) < 0.5
                take_f = rng.random(parent.shape) < 0.5
                child = np.where(take_m, om, pm) + np.where(take_f, other - om, parent - pm)
            if rng.random() < mutation:
                child = _mutate(child, inst.M, rng)
            children.append(child)
            child_fit.append(fitness[a] if child is parent else _makespan(inst, child))
        population, fitness = children, np.array(child_fit)
        e = int(fitness.argmin())
        if fitness[e] < best_ms:
            best_ms, best_sched = int(fitness[e]), decode_chromosome(inst, population[e])
        history.append(best_ms)
    return SearchResult(best_sched, history)


def pso_solve(inst: FfspInstance, particles: int = 25, w: float = 0.7, c1: float = 1.5,
              c2: float = 1.5, iters: int = 1000, rng: np.random.Generator | None = None) -> SearchResult:
    """Global-best PSO over the same chromosome encoding, seeded with SJF."""
    rng = rng or np.random.default_rng()
    S, N, M = inst.S, inst.N, inst.M
    upper = M - 1e-9
    seed_sched = sjf(inst)
    x = np.stack([schedule_to_chromosome(inst, seed_sched)]
                 + [_random_chromosome(inst, rng) for _ in range(particles - 1)])
    vmax = M / 2.0
    v = rng.uniform(-vmax, vmax, size=x.shape) * 0.1
    fit = np.array([_makespan(inst, c) for c in x])
    pbest, pfit = x.copy(), fit.copy()
    g = int(pfit.argmin())
    best_ms, best_sched = seed_sched.makespan, seed_sched
    if pfit[g] < best_ms:
        best_ms, best_sched = int(pfit[g]), decode_chromosome(inst, pbest[g])
    history = [best_ms]
    for _ in range(iters):
        gbest = pbest[int(pfit.argmin())]
        r1 = rng.random(x.shape)
        r2 = rng.random(x.shape)
        v = w * v + c1 * r1 * (pbest - x) + c2 * r2 * (gbest[None] - x)
        v = np.clip(v, -vmax, vmax)
        x = np.clip(x + v, 0.0, upper)
        fit = np.array([_makespan(inst, c) for c in x])
        improved = fit < pfit
        pbest[improved], pfit[improved] = x[improved], fit[improved]
        g = int(pfit.argmin())
        if pfit[g] < best_ms:
            best_ms, best_sched = int(pfit[g]), decode_chromosome(inst, pbest[g])
        history.append(best_ms)
    return SearchResult(best_sched, history)


# ------------------------------------------------------------------ MIP export

def ffsp_model(inst: FfspInstance, big_m: float | None = None) -> LinearModel:
    """Linearized FFSP model. Variables: X_i_j_k, Y_i_l_j, C_i_j, E_i_k, Cmax (stage i, jobs j/l, machine k)."""
    S, M, N = inst.S, inst.M, inst.N
    p = inst.proc  # p[i, k, j]
    big = float(horizon(inst) if big_m is None else big_m)
    X = lambda i, j, k: f"X_{i}_{j}_{k}"  # noqa: E731
    Y = lambda i, l, j: f"Y_{i}_{l}_{j}"  # noqa: E731
    C = lambda i, j: f"C_{i}_{j}"  # noqa: E731
    E = lambda i, k: f"E_{i}_{k}"  # noqa: E731
    model = LinearModel(name=f"FFSP S={S} M={M} N={N}")
    model.objective = {"Cmax": 1.0}
    last = S - 1
    for j in range(N):
        model.add(f"mk_{j}", {"Cmax": 1, C(last, j): -1}, ">=", 0)
    for i in range(S):
        for j in range(N):
            model.add(f"assign_{i}_{j}", {X(i, j, k): 1 for k in range(M)}, "=", 1)
            model.add(f"noself_{i}_{j}", {Y(i, j, j): 1}, "=", 0)
        # machine-used indicators: E = 1 iff some job is on machine k
        for k in range(M):
            model.add(f"used_lo_{i}_{k}", {E(i, k): 1, **{X(i, j, k): -1 for j in range(N)}}, "<=", 0)
            model.add(f"used_hi_{i}_{k}", {**{X(i, j, k): 1 for j in range(N)}, E(i, k): -N}, "<=", 0)
        # sum of Y = sum_k max(sum_j X_ijk - 1, 0) = sum_k (sum_j X_ijk - E_ik)
        coeffs = {Y(i, j, l): 1.0 for j in range(N) for l in range(N)}
        for k in range(M):
            coeffs[E(i, k)] = 1.0
            for j in range(N):
                coeffs[X(i, j, k)] = -1.0
        model.add(f"chain_{i}", coeffs, "=", 0)
        for j in range(N):
            for l in range(N):
                if j == l:
                    continue
                for k in range(M):
                    model.add(f"same_{i}_{j}_{l}_{k}", {Y(i, j, l): 1, X(i, j, k): 1, X(i, l, k): -1}, "<=", 1)
        for j in range(N):
            model.add(f"succ_{i}_{j}", {Y(i, j, l): 1 for l in range(N)}, "<=", 1)
            model.add(f"pred_{i}_{j}", {Y(i, l, j): 1 for l in range(N)}, "<=", 1)
        for j in range(N):
            work = {X(i, j, k): -float(p[i, k, j]) for k in range(M)}
            if i == 0:
                model.add(f"first_{j}", {C(0, j): 1, **work}, ">=", 0)
            else:
                model.add(f"flow_{i}_{j}", {C(i, j): 1, C(i - 1, j): -1, **work}, ">=", 0)
        for j in range(N):
            for l in range(N):
                if j == l:
                    continue
                work = {X(i, j, k): -float(p[i, k, j]) for k in range(M)}
                model.add(f"disj_{i}_{l}_{j}", {C(i, j): 1, C(i, l): -1, Y(i, l, j): -big, **work}, ">=", -big)
    model.binaries = ([X(i, j, k) for i in range(S) for j in range(N) for k in range(M)]
                      + [Y(i, l, j) for i in range(S) for l in range(N) for j in range(N)]
                      + [E(i, k) for i in range(S) for k in range(M)])
    for i in range(S):
        for j in range(N):
            model.bounds[C(i, j)] = (0, None)
    model.bounds["Cmax"] = (0, None)
    return model


def export_ffsp_lp(inst: FfspInstance, big_m: float | None = None) -> str:
    return ffsp_model(inst, big_m).to_lp()


def schedule_to_mip_values(inst: FfspInstance, sched: FfspSchedule) -> dict[str, float]:
    S, M, N = inst.S, inst.M, inst.N
    comp = sched.completion(inst)
    vals: dict[str, float] = {"Cmax": float(sched.makespan)}
    for i in range(S):
        for j in range(N):
            vals[f"C_{i}_{j}"] = float(comp[i, j])
            for k in range(M):
                vals[f"X_{i}_{j}_{k}"] = float(sched.machine[i, j] == k)
            for l in range(N):
                vals[f"Y_{i}_{l}_{j}"] = 0.0
        for k in range(M):
            jobs = sorted(np.flatnonzero(sched.machine[i] == k), key=lambda j: sched.start[i, j])
            vals[f"E_{i}_{k}"] = float(bool(jobs))
            for a, b in zip(jobs, jobs[1:]):
                vals[f"Y_{i}_{a}_{b}"] = 1.0
    return vals


# --------------------------------------------------------------------- file io

def format_instance(inst: FfspInstance) -> str:
    out = [f"FFSP {inst.S} {inst.M} {inst.N}"]
    for k in range(inst.S):
        out += [" ".join(str(int(v)) for v in row) for row in inst.proc[k]]
    return "\n".join(out) + "\n"


def parse_instance(text: str) -> FfspInstance:
    lines = [ln for ln in text.strip().splitlines() if ln.strip()]
    head = lines[0].split()
    if len(head) != 4 or head[0] != "FFSP":
        raise ValueError("FFSP file must start with 'FFSP S M N'")
    S, M, N = map(int, head[1:])
    rows = [[int(v) for v in ln.split()] for ln in lines[1:1 + S * M]]
    if len(rows) != S * M or any(len(r) != N for r in rows):
        raise ValueError(f"FFSP file needs {S * M} rows of {N} integers")
    return FfspInstance(np.array(rows, dtype=np.int64).reshape(S, M, N))


def format_schedule(sched: FfspSchedule, M: int | None = None) -> str:
    S, N = sched.machine.shape
    M = int(sched.machine.max()) + 1 if M is None else M
    out = [f"SCHED {S} {M} {N} {sched.makespan}"]
    for k in range(S):
        out.append(f"STAGE {k}")
        out += [f"{j} {sched.machine[k, j]} {sched.start[k, j]}" for j in range(N)]
    return "\n".join(out) + "\n"


def parse_schedule(text: str) -> tuple[FfspSchedule, int]:
    """Returns (schedule, M declared in the header)."""
    lines = [ln.split() for ln in text.strip().splitlines() if ln.strip()]
    if lines[0][0] != "SCHED":
        raise ValueError("schedule file must start with 'SCHED S M N makespan'")
    S, M, N, ms = map(int, lines[0][1:5])
    machine = np.zeros((S, N), dtype=np.int64)
    start = np.zeros((S, N), dtype=np.int64)
    k = -1
    for parts in lines[1:]:
        if parts[0] == "STAGE":
            k = int(parts[1])
            continue
        j, m, s = map(int, parts)
        machine[k, j], start[k, j] = m, s
    return FfspSchedule(machine, start, ms), M


def save_instance(path, inst: FfspInstance) -> None:
    Path(path).write_text(format_instance(inst))


def load_instance(path) -> FfspInstance:
    return parse_instance(Path(path).read_text())
