"""MatNet encoder: stacked dual graph-attentional layers over a data matrix.

Shapes (batched over instances):
    D      (B, M, N, f)   relationship matrix planes, already pre-scaled
    H_A    (B, M, d_model) row-item embeddings
    H_B    (B, N, d_model) column-item embeddings
"""
from __future__ import annotations

import math
from dataclasses import dataclass, asdict
from typing import Mapping

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

Params = dict[str, Tensor]

INIT_SCHEMES = ("zeros", "one_hot_pool", "random_vectors", "learned_pool")
UPDATE_MODES = ("parallel", "seq_A_first", "seq_B_first")


class CapacityError(ValueError):
    pass


@dataclass
class EncoderConfig:
    n_layers: int = 3
    d_model: int = 64
    n_heads: int = 4
    d_ff: int = 516
    f: int = 1
    mixer_hidden: int = 16
    clip_c: float = 10.0
    update_mode: str = "parallel"
    share_update_fn: bool = False
    init_scheme_A: str = "zeros"
    init_scheme_B: str = "one_hot_pool"
    pool_size: int = 20  # N_max for one_hot_pool / learned_pool

    @property
    def d_k(self) -> int:
        return self.d_model // self.n_heads

    def validate(self) -> None:
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")
        if self.n_layers < 0 or self.f < 1:
            raise ValueError("n_layers must be >= 0 and f >= 1")
        if self.update_mode not in UPDATE_MODES:
            raise ValueError(f"unknown update_mode {self.update_mode!r}")
        for s in (self.init_scheme_A, self.init_scheme_B):
            if s not in INIT_SCHEMES:
                raise ValueError(f"unknown init scheme {s!r}")
        if "one_hot_pool" in (self.init_scheme_A, self.init_scheme_B) and self.pool_size > self.d_model:
            raise ValueError(f"one-hot pool of {self.pool_size} does not fit in d_model={self.d_model}")

    def to_dict(self) -> dict:
        return asdict(self)


def _uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def _param(store: Params, name: str, value: np.ndarray) -> None:
    store[name] = Tensor(value, requires_grad=True, name=name)


def init_sub_block(store: Params, prefix: str, cfg: EncoderConfig, rng: np.random.Generator) -> None:
    d, h, dk, hid = cfg.d_model, cfg.n_heads, cfg.d_k, cfg.mixer_hidden
    for w in ("Wq", "Wk", "Wv"):
        _param(store, f"{prefix}.{w}", _uniform(rng, (d, h * dk), d))
    # mixer input 0 is the attention score, inputs 1..f are the matrix planes
    mix1 = _uniform(rng, (h, cfg.f + 1, hid), cfg.f + 1)
    _param(store, f"{prefix}.mix1_score", mix1[:, 0, :])
    _param(store, f"{prefix}.mix1_data", mix1[:, 1:, :])
    _param(store, f"{prefix}.mix1_b", np.zeros((h, hid)))
    _param(store, f"{prefix}.mix2", _uniform(rng, (h, hid), hid))
    _param(store, f"{prefix}.mix2_b", np.zeros(h))
    _param(store, f"{prefix}.Wo", _uniform(rng, (h * dk, d), h * dk))
    _param(store, f"{prefix}.bo", np.zeros(d))
    _param(store, f"{prefix}.norm1_g", np.ones(d))
    _param(store, f"{prefix}.norm1_b", np.zeros(d))
    _param(store, f"{prefix}.ff1", _uniform(rng, (d, cfg.d_ff), d))
    _param(store, f"{prefix}.ff1_b", np.zeros(cfg.d_ff))
    _param(store, f"{prefix}.ff2", _uniform(rng, (cfg.d_ff, d), cfg.d_ff))
    _param(store, f"{prefix}.ff2_b", np.zeros(d))
    _param(store, f"{prefix}.norm2_g", np.ones(d))
    _param(store, f"{prefix}.norm2_b", np.zeros(d))


def sub_block_prefix(prefix: str, layer: int, side: str, cfg: EncoderConfig) -> str:
    if cfg.share_update_fn:
        side = "F"
    return f"{prefix}.layer{layer}.{side}"


def init_encoder_params(cfg: EncoderConfig, rng: np.random.Generator, prefix: str = "enc") -> Params:
    cfg.validate()
    store: Params = {}
    for layer in range(cfg.n_layers):
        sides = ("F",) if cfg.share_update_fn else ("A", "B")
        for side in sides:
            init_sub_block(store, f"{prefix}.layer{layer}.{side}", cfg, rng)
    for side, scheme in (("A", cfg.init_scheme_A), ("B", cfg.init_scheme_B)):
        if scheme == "learned_pool":
            _param(store, f"{prefix}.pool_{side}", rng.uniform(-1.0, 1.0, (cfg.pool_size, cfg.d_model)))
    return store


# ------------------------------------------------------------ initial embeddings

def _init_side(n: int, batch: int, scheme: str, side: str, cfg: EncoderConfig,
               params: Mapping[str, Tensor], rng: np.random.Generator, prefix: str):
    d = cfg.d_model
    if scheme == "zeros":
        return Tensor(np.zeros((batch, n, d))), None
    if scheme == "random_vectors":
        return Tensor(rng.random((batch, n, d))), None
    if n > cfg.pool_size:
        raise CapacityError(f"{n} items exceed the embedding pool size {cfg.pool_size}")
    assignment = rng.random((batch, cfg.pool_size)).argsort(axis=1)[:, :n]
    if scheme == "one_hot_pool":
        emb = np.zeros((batch, n, d))
        np.put_along_axis(emb, assignment[:, :, None], 1.0, axis=2)
        return Tensor(emb), assignment
    return ad.gather_rows(params[f"{prefix}.pool_{side}"], assignment), assignment


def init_embeddings(M: int, N: int, cfg: EncoderConfig, rng: np.random.Generator,
                    params: Mapping[str, Tensor] | None = None, batch: int = 1,
                    prefix: str = "enc"):
    """Initial embeddings for both sides.

    Returns (E_A (B, M, d), E_B (B, N, d), assignment) where ``assignment`` holds
    the pool indices drawn for each side (None for schemes without a pool).
    """
    params = params or {}
    e_a, asg_a = _init_side(M, batch, cfg.init_scheme_A, "A", cfg, params, rng, prefix)
    e_b, asg_b = _init_side(N, batch, cfg.init_scheme_B, "B", cfg, params, rng, prefix)
    return e_a, e_b, {"A": asg_a, "B": asg_b}


# ------------------------------------------------------------------- attention

def _heads(x: Tensor, h: int) -> Tensor:
    # (B, n, h*dk) -> (B, h, n, dk)
    b, n, hd = x.shape
    return ad.transpose(ad.reshape(x, (b, n, h, hd // h)), (0, 2, 1, 3))


def _merge_heads(x: Tensor) -> Tensor:
    b, h, n, dk = x.shape
    return ad.reshape(ad.transpose(x, (0, 2, 1, 3)), (b, n, h * dk))


def mix_scores(score: Tensor, D: np.ndarray, p: Mapping[str, Tensor], prefix: str) -> Tensor:
    """Per-head element-wise MLP over (score, D^1..D^f).

    score (B, h, nq, nk), D (B, nq, nk, f) -> mixed (B, h, nq, nk).
    """
    b, h, nq, nk = score.shape
    f = D.shape[-1]
    hid = p[f"{prefix}.mix1_b"].shape[-1]
    s5 = ad.reshape(score, (b, h, nq, nk, 1))
    hidden = ad.mul(s5, ad.reshape(p[f"{prefix}.mix1_score"], (h, 1, 1, hid)))
    d5 = Tensor(D.reshape(b, 1, nq, nk, f))
    hidden = ad.add(hidden, ad.matmul(d5, ad.reshape(p[f"{prefix}.mix1_data"], (h, 1, f, hid))))
    hidden = ad.relu(ad.add(hidden, ad.reshape(p[f"{prefix}.mix1_b"], (h, 1, 1, hid))))
    out = ad.matmul(hidden, ad.reshape(p[f"{prefix}.mix2"], (h, 1, hid, 1)))
    out = ad.add(ad.reshape(out, (b, h, nq, nk)), ad.reshape(p[f"{prefix}.mix2_b"], (h, 1, 1)))
    return out


def mixed_score_attention(H_q: Tensor, H_kv: Tensor, D: np.ndarray, p: Mapping[str, Tensor],
                          prefix: str, n_heads: int, clip_c: float = 10.0) -> Tensor:
    """Multi-head mixed-score attention; returns (B, nq, d_model)."""
    if D.shape[:3] != (H_q.shape[0], H_q.shape[1], H_kv.shape[1]):
        raise ValueError(f"mixed_score_attention: shape mismatch {D.shape} vs {H_q.shape}, {H_kv.shape}")
    q = _heads(ad.matmul(H_q, p[f"{prefix}.Wq"]), n_heads)
    k = _heads(ad.matmul(H_kv, p[f"{prefix}.Wk"]), n_heads)
    v = _heads(ad.matmul(H_kv, p[f"{prefix}.Wv"]), n_heads)
    dk = q.shape[-1]
    score = ad.scale(ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dk))
    mixed = ad.soft_clip(mix_scores(score, D, p, prefix), clip_c)
    attn = ad.masked_softmax(mixed)
    out = _merge_heads(ad.matmul(attn, v))
    return ad.linear(out, p[f"{prefix}.Wo"], p[f"{prefix}.bo"])


def _add_norm(x: Tensor, y: Tensor, g: Tensor, b: Tensor) -> Tensor:
    return ad.add(ad.mul(ad.instance_normalize(ad.add(x, y)), g), b)


def sub_block(H_self: Tensor, H_other: Tensor, D: np.ndarray, p: Mapping[str, Tensor],
              prefix: str, cfg: EncoderConfig) -> Tensor:
    """One update function: attention -> Add&Norm -> feed-forward -> Add&Norm."""
    attn = mixed_score_attention(H_self, H_other, D, p, prefix, cfg.n_heads, cfg.clip_c)
    x = _add_norm(H_self, attn, p[f"{prefix}.norm1_g"], p[f"{prefix}.norm1_b"])
    ff = ad.mlp(x, p[f"{prefix}.ff1"], p[f"{prefix}.ff1_b"], p[f"{prefix}.ff2"], p[f"{prefix}.ff2_b"])
    return _add_norm(x, ff, p[f"{prefix}.norm2_g"], p[f"{prefix}.norm2_b"])


def encoder_layer(H_A: Tensor, H_B: Tensor, D: np.ndarray, p: Mapping[str, Tensor],
                  layer: int, cfg: EncoderConfig, prefix: str = "enc",
                  D_T: np.ndarray | None = None) -> tuple[Tensor, Tensor]:
    pa = sub_block_prefix(prefix, layer, "A", cfg)
    pb = sub_block_prefix(prefix, layer, "B", cfg)
    if D_T is None:
        D_T = D.transpose(0, 2, 1, 3)
    mode = cfg.update_mode
    if mode == "parallel":
        return (sub_block(H_A, H_B, D, p, pa, cfg),
                sub_block(H_B, H_A, D_T, p, pb, cfg))
    if mode == "seq_A_first":
        new_a = sub_block(H_A, H_B, D, p, pa, cfg)
        return new_a, sub_block(H_B, new_a, D_T, p, pb, cfg)
    new_b = sub_block(H_B, H_A, D_T, p, pb, cfg)
    return sub_block(H_A, new_b, D, p, pa, cfg), new_b


def as_batched(D: np.ndarray) -> np.ndarray:
    """Accept (M, N), (M, N, f), or (B, M, N, f)."""
    D = np.asarray(D, dtype=ad.DTYPE)
    if D.ndim == 2:
        return D[None, :, :, None]
    if D.ndim == 3:
        return D[None]
    return D


def encode(D: np.ndarray, cfg: EncoderConfig, params: Mapping[str, Tensor],
           rng: np.random.Generator, prefix: str = "enc", init=None):
    """Run the full encoder.

    ``init`` may supply precomputed (E_A, E_B, assignment) to pin the initial
    embeddings; otherwise they are drawn from ``rng``.
    Returns (H_A, H_B, assignment).
    """
    D = as_batched(D)
    if D.shape[-1] != cfg.f:
        raise ValueError(f"encode: expected {cfg.f} matrix planes, got {D.shape[-1]}")
    b, m, n, _ = D.shape
    if init is None:
        init = init_embeddings(m, n, cfg, rng, params, batch=b, prefix=prefix)
    h_a, h_b, assignment = init
    D_T = D.transpose(0, 2, 1, 3)
    for layer in range(cfg.n_layers):
        h_a, h_b = encoder_layer(h_a, h_b, D, params, layer, cfg, prefix, D_T)
    return h_a, h_b, assignment
