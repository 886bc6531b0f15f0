"""Evaluation-time solving: POMO multi-start, instance augmentation, best-of selection."""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from . import atsp, ffsp
from .autodiff import Tensor
from .encoder import EncoderConfig
from .policy import pomo_rollout_atsp, pomo_rollout_ffsp


@dataclass
class SolveOptions:
    mode: str = "sample"
    pomo: bool = True
    augmentation: int = 1
    sampling_count: int = 1
    seed: int = 0
    perm_cap: int | None = None
    validate: bool = True

    def __post_init__(self):
        if self.mode not in ("greedy", "sample"):
            raise ValueError(f"mode: expected greedy or sample, got {self.mode!r}")
        if self.augmentation < 1:
            raise ValueError(f"augmentation: must be >= 1, got {self.augmentation}")
        if self.sampling_count < 1:
            raise ValueError(f"sampling_count: must be >= 1, got {self.sampling_count}")


def _stream(seed: int, k: int) -> np.random.Generator:
    """Independent generator for augmentation/sampling round k; nested across K by construction."""
    return np.random.default_rng([seed, k])


@dataclass
class AtspResult:
    tours: np.ndarray        # (B, n) best tour per instance
    lengths: np.ndarray      # (B,)
    candidates: np.ndarray   # (B, rounds, P) all candidate lengths
    assignments: list = field(default_factory=list)  # per round, pool indices of the one-hot side


def _best(cands: np.ndarray, tours: np.ndarray):
    """Best candidate per instance; ties go to the lowest round, then lowest start."""
    b = cands.shape[0]
    flat = cands.reshape(b, -1)
    idx = flat.argmin(axis=1)
    return flat[np.arange(b), idx], tours.reshape(b, flat.shape[1], -1)[np.arange(b), idx]


def solve_atsp_batch(params: Mapping[str, Tensor], cfg: EncoderConfig, dists: np.ndarray,
                     opts: SolveOptions) -> AtspResult:
    dists = np.asarray(dists)
    b, n, _ = dists.shape
    starts = None if opts.pomo else np.zeros((b, 1), dtype=np.int64)
    cands, tours, asgs = [], [], []
    for k in range(opts.augmentation):
        rng = _stream(opts.seed, k)
        traj, enc = pomo_rollout_atsp(params, cfg, dists, opts.mode, rng, starts=starts)
        cands.append(traj.lengths)
        tours.append(traj.tours)
        asgs.append(enc.assignment)
    cands = np.stack(cands, axis=1)
    tours = np.stack(tours, axis=1)
    lengths, best = _best(cands, tours)
    return AtspResult(best, lengths, cands, asgs)


def solve_atsp(params: Mapping[str, Tensor], cfg: EncoderConfig, inst: atsp.AtspInstance,
               opts: SolveOptions) -> tuple[atsp.Tour, np.ndarray]:
    """Best tour over K augmentations x POMO starts, plus all candidate lengths (K, P)."""
    res = solve_atsp_batch(params, cfg, inst.dist[None], opts)
    perm = res.tours[0]
    return atsp.Tour(perm, atsp.tour_length(inst, perm)), res.candidates[0]


def sample_only_atsp_batch(params: Mapping[str, Tensor], cfg: EncoderConfig, dists: np.ndarray,
                           count: int, seed: int = 0) -> AtspResult:
    """One encoding, ``count`` rounds of sampled POMO rollouts, best kept."""
    if count < 1:
        raise ValueError("count must be >= 1")
    dists = np.asarray(dists)
    traj, enc = pomo_rollout_atsp(params, cfg, dists, "sample", _stream(seed, 0))
    cands, tours = [traj.lengths], [traj.tours]
    from .policy import atsp_step_fn  # same encoding, fresh sampling streams
    b, n, _ = dists.shape
    starts = np.broadcast_to(np.arange(n), (b, n)).copy()
    for k in range(1, count):
        t = atsp.rollout(dists, atsp_step_fn(enc, cfg, params), starts, "sample", _stream(seed, k))
        cands.append(t.lengths)
        tours.append(t.tours)
    cands = np.stack(cands, axis=1)
    lengths, best = _best(cands, np.stack(tours, axis=1))
    return AtspResult(best, lengths, cands, [enc.assignment])


def sample_only_solve(params: Mapping[str, Tensor], cfg: EncoderConfig, inst: atsp.AtspInstance,
                      count: int, seed: int = 0) -> atsp.Tour:
    res = sample_only_atsp_batch(params, cfg, inst.dist[None], count, seed)
    return atsp.Tour(res.tours[0], atsp.tour_length(inst, res.tours[0]))


@dataclass
class FfspResult:
    schedules: list[ffsp.FfspSchedule]
    makespans: np.ndarray    # (B,)
    candidates: np.ndarray   # (B, K, P)
    assignments: list = field(default_factory=list)


def solve_ffsp_batch(params: Mapping[str, Tensor], cfg: EncoderConfig, procs: np.ndarray,
                     opts: SolveOptions) -> FfspResult:
    procs = np.asarray(procs)
    b = procs.shape[0]
    cap = opts.perm_cap if opts.pomo else 1
    cands, best = [], [None] * b
    best_ms = np.full(b, np.iinfo(np.int64).max)
    asgs = []
    for k in range(opts.augmentation):
        env, _, enc = pomo_rollout_ffsp(params, cfg, procs, opts.mode, _stream(opts.seed, k), perm_cap=cap)
        ms = env.makespans()
        cands.append(ms)
        asgs.append(enc.assignment)
        for i in range(b):
            if opts.validate:
                for p in range(ms.shape[1]):
                    bad = ffsp.validate_schedule(ffsp.FfspInstance(procs[i]), env.schedule(i, p))
                    if bad is not None:
                        raise AssertionError(f"invalid candidate schedule: {bad}")
            p = int(ms[i].argmin())
            if ms[i, p] < best_ms[i]:
                best_ms[i] = ms[i, p]
                best[i] = env.schedule(i, p)
    return FfspResult(best, best_ms, np.stack(cands, axis=1), asgs)


def solve_ffsp(params: Mapping[str, Tensor], cfg: EncoderConfig, inst: ffsp.FfspInstance,
               opts: SolveOptions) -> ffsp.FfspSchedule:
    return solve_ffsp_batch(params, cfg, inst.proc[None], opts).schedules[0]


# ------------------------------------------------------------- solution files

def format_tour(perm) -> str:
    perm = np.asarray(perm)
    return f"TOUR {len(perm)}\n" + " ".join(str(int(c)) for c in perm) + "\n"


def parse_tour(text: str) -> np.ndarray:
    lines = [ln.split() for ln in text.strip().splitlines() if ln.strip()]
    if not lines or lines[0][0] != "TOUR":
        raise ValueError("tour file must start with 'TOUR n'")
    n = int(lines[0][1])
    perm = np.array([int(v) for v in lines[1]] if len(lines) > 1 else [], dtype=np.int64)
    return atsp.check_perm(perm, n)


def save_solution(path, solution, M: int | None = None) -> None:
    if isinstance(solution, ffsp.FfspSchedule):
        Path(path).write_text(ffsp.format_schedule(solution, M))
    else:
        Path(path).write_text(format_tour(solution.perm if isinstance(solution, atsp.Tour) else solution))
