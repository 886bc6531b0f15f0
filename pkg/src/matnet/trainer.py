"""POMO-style REINFORCE training, shared-baseline loss, and binary checkpoints."""
from __future__ import annotations

import hashlib
import json
import struct
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Mapping

import numpy as np

from . import atsp, ffsp
from . import autodiff as ad
from .autodiff import AdamState, Tape, Tensor
from .encoder import EncoderConfig, Params
from .policy import init_atsp_params, init_ffsp_params, pomo_rollout_atsp, pomo_rollout_ffsp


@dataclass
class TrainConfig:
    problem: str = "atsp"
    n: int = 10          # ATSP cities
    S: int = 3           # FFSP stages
    M: int = 4           # FFSP machines per stage
    N: int = 10          # FFSP jobs
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    lr: float = 1e-4
    batch_size: int = 50
    instances_per_epoch: int = 1000
    epochs: int = 1
    grad_accum: int = 1
    seed: int = 1234
    perm_cap: int | None = None
    threads: int = 1

    def validate(self) -> None:
        if self.problem not in ("atsp", "ffsp"):
            raise ValueError(f"problem: expected atsp or ffsp, got {self.problem!r}")
        for name in ("n", "S", "M", "N", "batch_size", "instances_per_epoch", "grad_accum", "threads"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name}: must be positive, got {getattr(self, name)}")
        if self.epochs < 0:
            raise ValueError(f"epochs: must be >= 0, got {self.epochs}")
        if not self.lr > 0:
            raise ValueError(f"lr: must be positive, got {self.lr}")
        if self.batch_size % self.grad_accum:
            raise ValueError(f"grad_accum: {self.grad_accum} does not divide batch_size {self.batch_size}")
        if self.problem == "atsp" and self.n < 2:
            raise ValueError("n: ATSP needs at least 2 cities")
        self.encoder.validate()

    def to_dict(self) -> dict:
        d = asdict(self)
        d["encoder"] = self.encoder.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "TrainConfig":
        d = dict(d)
        enc = EncoderConfig(**d.pop("encoder", {}))
        return cls(encoder=enc, **d)


def atsp_preset(name: str = "toy") -> TrainConfig:
    if name == "toy":
        enc = EncoderConfig(n_layers=3, d_model=64, n_heads=4, d_ff=128, pool_size=10)
        return TrainConfig(problem="atsp", n=10, encoder=enc, lr=4e-4, batch_size=50,
                           instances_per_epoch=1000, epochs=30)
    if name == "full":
        enc = EncoderConfig(n_layers=5, d_model=256, n_heads=16, d_ff=516, pool_size=20)
        return TrainConfig(problem="atsp", n=20, encoder=enc, lr=4e-4, batch_size=200,
                           instances_per_epoch=10_000, epochs=2000)
    raise ValueError(f"unknown ATSP preset {name!r}")


def ffsp_preset(name: str = "toy") -> TrainConfig:
    if name == "toy":
        enc = EncoderConfig(n_layers=2, d_model=64, n_heads=4, d_ff=128, init_scheme_A="one_hot_pool",
                            init_scheme_B="zeros", pool_size=4)
        return TrainConfig(problem="ffsp", S=3, M=4, N=10, encoder=enc, lr=1e-4, batch_size=50,
                           instances_per_epoch=1000, epochs=30)
    if name == "full":
        enc = EncoderConfig(n_layers=3, d_model=256, n_heads=16, d_ff=516, init_scheme_A="one_hot_pool",
                            init_scheme_B="zeros", pool_size=4)
        return TrainConfig(problem="ffsp", S=3, M=4, N=20, encoder=enc, lr=1e-4, batch_size=50,
                           instances_per_epoch=10_000, epochs=100)
    raise ValueError(f"unknown FFSP preset {name!r}")


def init_params(cfg: TrainConfig, rng: np.random.Generator) -> Params:
    if cfg.problem == "atsp":
        return init_atsp_params(cfg.encoder, rng)
    return init_ffsp_params(cfg.encoder, rng, cfg.S)


# ------------------------------------------------------------------- loss

def advantages(rewards: np.ndarray) -> np.ndarray:
    """Shared-baseline advantages, (B, P): reward minus the instance mean."""
    rewards = np.asarray(rewards, dtype=np.float64)
    if rewards.ndim != 2 or rewards.shape[1] < 2:
        raise ValueError("reinforce needs at least 2 trajectories per instance for a shared baseline")
    return rewards - rewards.mean(axis=1, keepdims=True)


def reinforce_loss(rewards: np.ndarray, logp: Tensor, weight: float = 1.0) -> Tensor:
    """-mean(advantage * logp) over all trajectories, times ``weight``."""
    adv = advantages(rewards)
    if logp.shape != adv.shape:
        raise ValueError(f"reinforce_loss: logp {logp.shape} vs rewards {adv.shape}")
    return ad.scale(ad.mean_all(ad.mul(Tensor(adv), logp)), -weight)


def rollout_rewards(cfg: TrainConfig, params: Params, batch: np.ndarray, rng: np.random.Generator):
    """Sampled POMO rollouts on ``batch``: (scaled rewards (B, P), logp, raw objectives (B, P))."""
    if cfg.problem == "atsp":
        traj, _ = pomo_rollout_atsp(params, cfg.encoder, batch, "sample", rng)
        obj = traj.lengths.astype(np.float64)
        return -obj / atsp.DIST_SCALE, traj.logp, obj
    env, logp, _ = pomo_rollout_ffsp(params, cfg.encoder, batch, "sample", rng, perm_cap=cfg.perm_cap)
    obj = env.makespans().astype(np.float64)
    return -obj / ffsp.PROC_SCALE, logp, obj


def batch_gradients(cfg: TrainConfig, params: Params, batch: np.ndarray, rng: np.random.Generator):
    """Loss value, gradient map and raw objectives for one batch, honoring grad accumulation."""
    chunks = np.split(batch, cfg.grad_accum)
    grads, loss_total, objs = [], 0.0, []
    for chunk in chunks:
        with Tape() as tape:
            rewards, logp, obj = rollout_rewards(cfg, params, chunk, rng)
            loss = reinforce_loss(rewards, logp, weight=len(chunk) / len(batch))
        loss_total += float(loss.data)
        grads.append(ad.backward(tape, loss, params))
        objs.append(obj)
    return loss_total, ad.merge_grads(grads), np.concatenate(objs)


# -------------------------------------------------------------- checkpoints

CHECKPOINT_MAGIC = b"MATNETCK"
CHECKPOINT_VERSION = 1
_DTYPES = {0: np.dtype("<f8"), 1: np.dtype("<f4"), 2: np.dtype("<i8")}
_TAGS = {v: k for k, v in _DTYPES.items()}


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    params: dict[str, np.ndarray]
    config: TrainConfig
    adam: AdamState
    epoch: int = 0
    rng_state: dict | None = None
    version: int = CHECKPOINT_VERSION

    def tensors(self) -> dict[str, Tensor]:
        return {k: Tensor(v.copy(), requires_grad=True, name=k) for k, v in self.params.items()}


def _canonical(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def checkpoint_bytes(ck: Checkpoint) -> bytes:
    records = [("param/" + k, v) for k, v in sorted(ck.params.items())]
    records += [("adam_m/" + k, v) for k, v in sorted(ck.adam.m.items())]
    records += [("adam_v/" + k, v) for k, v in sorted(ck.adam.v.items())]
    body = bytearray(struct.pack("<I", len(records)))
    for name, arr in records:
        arr = np.asarray(arr)
        dt = arr.dtype.newbyteorder("<")
        if dt not in _TAGS:
            raise CheckpointError(f"unsupported dtype {arr.dtype} for {name}")
        raw = name.encode()
        body += struct.pack("<I", len(raw)) + raw
        body += struct.pack("<BI", _TAGS[dt], arr.ndim)
        body += struct.pack(f"<{arr.ndim}Q", *arr.shape)
        body += np.ascontiguousarray(arr, dtype=dt).tobytes()
    meta = _canonical({
        "config": ck.config.to_dict(),
        "epoch": ck.epoch,
        "rng_state": ck.rng_state,
        "adam": {"lr": ck.adam.lr, "beta1": ck.adam.beta1, "beta2": ck.adam.beta2,
                 "eps": ck.adam.eps, "step": ck.adam.step},
    }).encode()
    body += struct.pack("<Q", len(meta)) + meta
    digest = hashlib.sha256(bytes(body)).digest()
    return CHECKPOINT_MAGIC + struct.pack("<IQ", ck.version, len(body)) + digest + bytes(body)


def checkpoint_from_bytes(blob: bytes) -> Checkpoint:
    head = len(CHECKPOINT_MAGIC) + 12 + 32
    if len(blob) < head or blob[:len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic or truncated header)")
    version, size = struct.unpack_from("<IQ", blob, len(CHECKPOINT_MAGIC))
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"checkpoint format version {version}, this build reads {CHECKPOINT_VERSION}")
    digest = blob[head - 32:head]
    body = blob[head:]
    if len(body) != size or hashlib.sha256(body).digest() != digest:
        raise CheckpointError("checkpoint checksum mismatch (file corrupt or truncated)")
    pos = 0

    def take(fmt):
        nonlocal pos
        vals = struct.unpack_from(fmt, body, pos)
        pos += struct.calcsize(fmt)
        return vals

    (count,) = take("<I")
    tensors = {}
    for _ in range(count):
        (ln,) = take("<I")
        name = body[pos:pos + ln].decode()
        pos += ln
        tag, rank = take("<BI")
        dims = take(f"<{rank}Q")
        dt = _DTYPES[tag]
        nbytes = int(np.prod(dims, dtype=np.int64)) * dt.itemsize
        tensors[name] = np.frombuffer(body, dtype=dt, count=nbytes // dt.itemsize, offset=pos).reshape(dims).copy()
        pos += nbytes
    (ln,) = take("<Q")
    meta = json.loads(body[pos:pos + ln].decode())
    params = {k[6:]: v for k, v in tensors.items() if k.startswith("param/")}
    adam = AdamState(**meta["adam"])
    adam.m = {k[7:]: v for k, v in tensors.items() if k.startswith("adam_m/")}
    adam.v = {k[7:]: v for k, v in tensors.items() if k.startswith("adam_v/")}
    return Checkpoint(params, TrainConfig.from_dict(meta["config"]), adam, meta["epoch"],
                      meta["rng_state"], version)


def save_checkpoint(path, ck: Checkpoint) -> None:
    Path(path).write_bytes(checkpoint_bytes(ck))


def load_checkpoint(path) -> Checkpoint:
    return checkpoint_from_bytes(Path(path).read_bytes())


# ------------------------------------------------------------------ training

class TrainingDiverged(FloatingPointError):
    pass


def _draw_batch(cfg: TrainConfig, size: int, rng: np.random.Generator) -> np.ndarray:
    if cfg.problem == "atsp":
        return atsp.generate_tmat_batch(size, cfg.n, rng)
    return ffsp.generate_ffsp_batch(size, cfg.S, cfg.M, cfg.N, rng)


def _heuristic_objective(cfg: TrainConfig, batch: np.ndarray) -> np.ndarray:
    if cfg.problem == "atsp":
        return atsp.tour_lengths(batch, atsp.nearest_neighbor_batch(batch)).astype(np.float64)
    return np.array([ffsp.sjf(ffsp.FfspInstance(p)).makespan for p in batch], dtype=np.float64)


def _diverged(cfg, epoch, step, loss, grads, dump_path):
    bad = sorted(k for k, g in grads.items() if not np.all(np.isfinite(g)))
    info = {"epoch": epoch, "step": step, "loss": repr(loss), "nonfinite_grads": bad,
            "config": cfg.to_dict()}
    if dump_path is not None:
        Path(dump_path).write_text(json.dumps(info, indent=2, sort_keys=True))
    raise TrainingDiverged(f"non-finite loss/gradient at epoch {epoch} step {step}: {info}")


def train(cfg: TrainConfig, metrics_path=None, resume: Checkpoint | None = None,
          progress: Callable[[str], None] | None = None, dump_path=None) -> Checkpoint:
    """Run ``cfg.epochs`` epochs of shared-baseline REINFORCE and return the final checkpoint.

    The metrics CSV gets one line per epoch: epoch, mean_reward, baseline_metric,
    wall_seconds, where mean_reward is the mean negated objective of all sampled
    trajectories and baseline_metric is the best-of-POMO objective relative to
    nearest neighbour (ATSP) or SJF (FFSP): mean(best)/mean(heuristic) - 1.
    """
    cfg.validate()
    if resume is None:
        rng = np.random.default_rng(cfg.seed)
        params = init_params(cfg, rng)
        adam = AdamState(lr=cfg.lr)
        start_epoch = 0
    else:
        rng = np.random.default_rng()
        rng.bit_generator.state = resume.rng_state
        params = resume.tensors()
        adam = resume.adam
        start_epoch = resume.epoch
    steps = max(1, cfg.instances_per_epoch // cfg.batch_size)
    if metrics_path is not None and resume is None:
        Path(metrics_path).write_text("epoch,mean_reward,baseline_metric,wall_seconds\n")
    for epoch in range(start_epoch, cfg.epochs):
        t0 = time.perf_counter()
        rewards, best, heur = [], [], []
        for step in range(steps):
            batch = _draw_batch(cfg, cfg.batch_size, rng)
            loss, grads, obj = batch_gradients(cfg, params, batch, rng)
            if not np.isfinite(loss) or not all(np.all(np.isfinite(g)) for g in grads.values()):
                _diverged(cfg, epoch, step, loss, grads, dump_path)
            ad.adam_step(adam, params, grads)
            rewards.append(-obj.mean())
            best.append(obj.min(axis=1).mean())
            heur.append(_heuristic_objective(cfg, batch).mean())
        wall = time.perf_counter() - t0
        line = f"{epoch + 1},{np.mean(rewards):.6f},{np.mean(best) / np.mean(heur) - 1:.6f},{wall:.3f}"
        if metrics_path is not None:
            with open(metrics_path, "a") as fh:
                fh.write(line + "\n")
        if progress is not None:
            progress(line)
    return Checkpoint({k: p.data.copy() for k, p in params.items()}, cfg, adam,
                      max(cfg.epochs, start_epoch), rng.bit_generator.state)
