"""Encoder + decoder wiring for the two problem domains, and their POMO rollouts."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np

from . import atsp, ffsp
from .autodiff import Tensor
from .decoder import (KvCache, candidates_with_skip, decode_step, init_decoder_params,
                      make_query_atsp, make_query_machine, precompute_kv)
from .encoder import EncoderConfig, Params, encode, init_encoder_params


def init_atsp_params(cfg: EncoderConfig, rng: np.random.Generator) -> Params:
    params = init_encoder_params(cfg, rng, prefix="enc")
    params.update(init_decoder_params(cfg, rng, query_width=2 * cfg.d_model, prefix="dec"))
    return params


def init_ffsp_params(cfg: EncoderConfig, rng: np.random.Generator, stages: int) -> Params:
    """One untied encoder and one untied decoder (with skip row) per stage."""
    params: Params = {}
    for k in range(stages):
        params.update(init_encoder_params(cfg, rng, prefix=f"enc{k}"))
        params.update(init_decoder_params(cfg, rng, query_width=cfg.d_model, prefix=f"dec{k}", skip=True))
    return params


# ---------------------------------------------------------------------- ATSP

@dataclass
class AtspEncoding:
    H_A: Tensor        # (B, n, d) "from" cities
    H_B: Tensor        # (B, n, d) "to" cities
    cache: KvCache
    assignment: dict


def encode_atsp(dist: np.ndarray, cfg: EncoderConfig, params: Mapping[str, Tensor],
                rng: np.random.Generator, init=None) -> AtspEncoding:
    D = np.asarray(dist, dtype=np.float64) / atsp.DIST_SCALE
    h_a, h_b, asg = encode(D[..., None], cfg, params, rng, prefix="enc", init=init)
    return AtspEncoding(h_a, h_b, precompute_kv(h_b, params, cfg.n_heads, prefix="dec"), asg)


def atsp_step_fn(enc: AtspEncoding, cfg: EncoderConfig, params: Mapping[str, Tensor]):
    def step(first, current, mask):
        query = make_query_atsp(enc.H_A, first, current, params, prefix="dec")
        return decode_step(query, enc.cache, mask, params, cfg.n_heads, cfg.clip_c, prefix="dec")
    return step


def pomo_rollout_atsp(params: Mapping[str, Tensor], cfg: EncoderConfig, dist: np.ndarray, mode: str,
                      rng: np.random.Generator, init=None, starts: np.ndarray | None = None):
    """n multi-start rollouts per instance sharing one encoding. Returns (Trajectory, encoding)."""
    dist = np.asarray(dist)
    b, n, _ = dist.shape
    enc = encode_atsp(dist, cfg, params, rng, init)
    if starts is None:
        starts = np.broadcast_to(np.arange(n), (b, n)).copy()
    traj = atsp.rollout(dist, atsp_step_fn(enc, cfg, params), starts, mode, rng)
    return traj, enc


# ---------------------------------------------------------------------- FFSP

@dataclass
class FfspEncoding:
    H_A: list[Tensor]      # per stage (B, M, d) machines
    H_B: list[Tensor]      # per stage (B, N, d) jobs
    caches: list[KvCache]  # per stage, candidates = jobs + skip
    assignment: list[dict]


def encode_ffsp(procs: np.ndarray, cfg: EncoderConfig, params: Mapping[str, Tensor],
                rng: np.random.Generator, inits=None) -> FfspEncoding:
    procs = np.asarray(procs)
    S = procs.shape[1]
    out = FfspEncoding([], [], [], [])
    for k in range(S):
        D = procs[:, k].astype(np.float64)[..., None] / ffsp.PROC_SCALE   # (B, M, N, 1)
        h_a, h_b, asg = encode(D, cfg, params, rng, prefix=f"enc{k}",
                               init=None if inits is None else inits[k])
        cand = candidates_with_skip(h_b, params, prefix=f"dec{k}")
        out.H_A.append(h_a)
        out.H_B.append(h_b)
        out.caches.append(precompute_kv(cand, params, cfg.n_heads, prefix=f"dec{k}"))
        out.assignment.append(asg)
    return out


def ffsp_policy(enc: FfspEncoding, cfg: EncoderConfig, params: Mapping[str, Tensor]):
    def policy(stage, machine, mask):
        query = make_query_machine(enc.H_A[stage], machine, params, prefix=f"dec{stage}")
        return decode_step(query, enc.caches[stage], mask, params, cfg.n_heads, cfg.clip_c,
                           prefix=f"dec{stage}")
    return policy


def pomo_rollout_ffsp(params: Mapping[str, Tensor], cfg: EncoderConfig, procs: np.ndarray, mode: str,
                      rng: np.random.Generator, inits=None, perm_cap: int | None = None):
    """One trajectory per machine-order permutation, all sharing the stage encodings.

    Returns (env, logp (B, P) Tensor, encoding); makespans via ``env.makespans()``.
    """
    procs = np.asarray(procs)
    b, S, M, N = procs.shape
    perms = ffsp.machine_permutations(M, perm_cap)
    perms_b = np.broadcast_to(perms, (b,) + perms.shape)
    enc = encode_ffsp(procs, cfg, params, rng, inits)
    env, logp = ffsp.run_gantt(procs, perms_b, ffsp_policy(enc, cfg, params), mode, rng)
    return env, logp, enc
