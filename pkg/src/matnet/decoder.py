"""Autoregressive pointer decoder shared by the ATSP solver and the FFSP stage decoders."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .encoder import EncoderConfig, Params, _heads, _merge_heads, _param, _uniform


@dataclass
class KvCache:
    k: Tensor           # (B, h, n, dk)
    v: Tensor           # (B, h, n, dk)
    single_key: Tensor  # (B, n, d_model)

    @property
    def n_candidates(self) -> int:
        return self.k.shape[2]


def init_decoder_params(cfg: EncoderConfig, rng: np.random.Generator, query_width: int,
                        prefix: str = "dec", skip: bool = False) -> Params:
    d, h, dk = cfg.d_model, cfg.n_heads, cfg.d_k
    store: Params = {}
    _param(store, f"{prefix}.Wq", _uniform(rng, (query_width, h * dk), query_width))
    _param(store, f"{prefix}.Wk", _uniform(rng, (d, h * dk), d))
    _param(store, f"{prefix}.Wv", _uniform(rng, (d, h * dk), d))
    _param(store, f"{prefix}.Wo", _uniform(rng, (h * dk, d), h * dk))
    _param(store, f"{prefix}.bo", np.zeros(d))
    _param(store, f"{prefix}.Wsk", _uniform(rng, (d, d), d))
    if skip:
        _param(store, f"{prefix}.skip", _uniform(rng, (d,), d))
    return store


def candidates_with_skip(H_B: Tensor, params: Mapping[str, Tensor], prefix: str = "dec") -> Tensor:
    """Append the learnable skip row as candidate index N."""
    b, _, d = H_B.shape
    skip_row = ad.add(Tensor(np.zeros((b, 1, d))), params[f"{prefix}.skip"])
    return ad.concat([H_B, skip_row], axis=1)


def precompute_kv(H_c: Tensor, params: Mapping[str, Tensor], n_heads: int, prefix: str = "dec") -> KvCache:
    k = _heads(ad.matmul(H_c, params[f"{prefix}.Wk"]), n_heads)
    v = _heads(ad.matmul(H_c, params[f"{prefix}.Wv"]), n_heads)
    return KvCache(k, v, ad.matmul(H_c, params[f"{prefix}.Wsk"]))


def make_query_atsp(H_A: Tensor, first: np.ndarray, current: np.ndarray,
                    params: Mapping[str, Tensor], prefix: str = "dec") -> Tensor:
    """[h_first ; h_current] projected to d_model. first/current: (B, P) -> (B, P, d)."""
    q = ad.concat([ad.take_rows(H_A, first), ad.take_rows(H_A, current)], axis=-1)
    return ad.matmul(q, params[f"{prefix}.Wq"])


def make_query_machine(H_A: Tensor, machine: np.ndarray, params: Mapping[str, Tensor],
                       prefix: str = "dec") -> Tensor:
    """Machine embedding as query. machine: (B, P) -> (B, P, d)."""
    return ad.matmul(ad.take_rows(H_A, machine), params[f"{prefix}.Wq"])


def decode_step(query: Tensor, cache: KvCache, mask: np.ndarray, params: Mapping[str, Tensor],
                n_heads: int, clip_c: float = 10.0, prefix: str = "dec") -> Tensor:
    """Selection probabilities (B, P, n) over the cached candidates.

    ``mask`` is (B, P, n) with 0 for selectable and -inf for excluded candidates.
    """
    mask = np.asarray(mask)
    if np.any(np.all(np.isneginf(mask), axis=-1)):
        raise ValueError("decode_step: every candidate is masked")
    q = _heads(query, n_heads)                                    # (B, h, P, dk)
    dk = q.shape[-1]
    score = ad.scale(ad.matmul(q, ad.transpose(cache.k, (0, 1, 3, 2))), 1.0 / math.sqrt(dk))
    attn = ad.masked_softmax(score, mask[:, None, :, :])
    mh = ad.linear(_merge_heads(ad.matmul(attn, cache.v)), params[f"{prefix}.Wo"], params[f"{prefix}.bo"])
    d = mh.shape[-1]
    logits = ad.scale(ad.matmul(mh, ad.transpose(cache.single_key, (0, 2, 1))), 1.0 / math.sqrt(d))
    return ad.masked_softmax(ad.soft_clip(logits, clip_c), mask)


def select(probs: np.ndarray, mode: str, rng: np.random.Generator | None) -> np.ndarray:
    """Greedy (lowest index on ties) or inverse-CDF sampling along the last axis."""
    if mode == "greedy":
        return probs.argmax(axis=-1)
    cdf = np.cumsum(probs, axis=-1)
    u = rng.random(probs.shape[:-1])[..., None] * cdf[..., -1:]
    idx = (cdf <= u).sum(axis=-1)
    return np.minimum(idx, probs.shape[-1] - 1)
