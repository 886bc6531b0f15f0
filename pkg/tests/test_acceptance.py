"""End-to-end acceptance checks, one test per numbered criterion.

Each test records a PASS/FAIL line that pytest prints in the
"acceptance criteria" section of the terminal summary.

Criteria 7 and 8 need the trained toy models. They are cached under
``.model_cache/`` (or $MATNET_MODEL_CACHE), keyed by a hash of the training
config, and trained from the preset when missing.
"""
import hashlib
import json
import os
import time
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from matnet import atsp, bench, ffsp, trainer
from matnet import autodiff as ad
from matnet.autodiff import Tensor
from matnet.cli import main
from matnet.decoder import candidates_with_skip, decode_step, init_decoder_params, make_query_machine, precompute_kv
from matnet.encoder import EncoderConfig, encode, init_embeddings, init_encoder_params, mixed_score_attention
from matnet.lp import parse_lp
from matnet.policy import init_ffsp_params, pomo_rollout_atsp, pomo_rollout_ffsp

from acceptance_log import criterion
from helpers import analytic_grads, max_rel_error, numeric_grads
from test_encoder import _encode_pinned, _identity_mixer, _reference_attention

ROOT = Path(__file__).resolve().parents[1]
FIXTURES = Path(__file__).parent / "fixtures"
CACHE = Path(os.environ.get("MATNET_MODEL_CACHE", ROOT / ".model_cache"))


def within(value, target, rel):
    return abs(value - target) <= rel * target


# ----------------------------------------------------------------- 1

def test_c01_atsp_heuristics_reproduce_reference_means():
    targets = {20: {"nn": 2.01e6, "ni": 1.80e6, "fi": 1.71e6},
               50: {"nn": 2.10e6, "ni": 1.95e6, "fi": 1.84e6}}
    with criterion(1, "ATSP NN/NI/FI means on 10,000 tmat instances, n=20 and n=50") as info:
        t0 = time.perf_counter()
        means = {}
        for n in (20, 50):
            d = atsp.generate_tmat_batch(10_000, n, np.random.default_rng(1000 + n))
            for name, fn in atsp.HEURISTICS.items():
                tours = np.concatenate([fn(d[i:i + 1000]) for i in range(0, len(d), 1000)])
                means[n, name] = float(atsp.tour_lengths(d, tours).mean())
                info[f"{name}{n}"] = f"{means[n, name] / 1e6:.4f}e6"
        wall = time.perf_counter() - t0
        for (n, name), m in means.items():
            assert within(m, targets[n][name], 0.02), f"{name} n={n}: {m:.0f} vs {targets[n][name]:.0f}"
        assert wall <= 300


# ----------------------------------------------------------------- 2

def test_c02_ffsp_heuristics_reproduce_reference_means():
    with criterion(2, "FFSP SJF/Random means on 1,000 instances (S=3, M=4, N=20)") as info:
        t0 = time.perf_counter()
        procs = ffsp.generate_ffsp_batch(1000, 3, 4, 20, np.random.default_rng(2002))
        sjf = np.mean([ffsp.sjf(ffsp.FfspInstance(p)).makespan for p in procs])
        rnd = np.mean([s.makespan for s in ffsp.random_schedule_batch(procs, np.random.default_rng(2003))])
        wall = time.perf_counter() - t0
        info.update(sjf=f"{sjf:.2f}", random=f"{rnd:.2f}")
        assert within(sjf, 31.3, 0.03) and within(rnd, 47.8, 0.03)
        assert wall <= 300


# ----------------------------------------------------------------- 3

@pytest.mark.slow
def test_c03_metaheuristics_dominate_sjf():
    with criterion(3, "GA/PSO never worse than SJF; 1,000-iteration means on 100 instances") as info:
        procs = ffsp.generate_ffsp_batch(100, 3, 4, 20, np.random.default_rng(3003))
        rng = np.random.default_rng(3004)
        # iteration budget 0 is the seed itself
        for p in procs[:10]:
            inst = ffsp.FfspInstance(p)
            base = ffsp.sjf(inst).makespan
            assert ffsp.ga_solve(inst, iters=0, rng=rng).schedule.makespan <= base
            assert ffsp.pso_solve(inst, iters=0, rng=rng).schedule.makespan <= base
        means = {}
        for name, solver in (("ga", ffsp.ga_solve), ("pso", ffsp.pso_solve)):
            out = []
            for p in procs:
                inst = ffsp.FfspInstance(p)
                base = ffsp.sjf(inst).makespan
                res = solver(inst, iters=1000, rng=rng)
                hist = np.array(res.history)
                # best-so-far after every budget 0..1000
                assert len(hist) == 1001 and np.all(hist <= base) and np.all(np.diff(hist) <= 0)
                assert ffsp.validate_schedule(inst, res.schedule) is None
                assert res.schedule.makespan == hist[-1]
                out.append(res.schedule.makespan)
            means[name] = float(np.mean(out))
        info.update(ga=f"{means['ga']:.2f}", pso=f"{means['pso']:.2f}")
        assert means["ga"] <= 30.6 * 1.03
        assert means["pso"] <= 29.1 * 1.05


# ----------------------------------------------------------------- 4

def test_c04_tmat_instances_satisfy_triangle_inequality():
    with criterion(4, "1,000 tmat instances (n=20): exhaustive triangle audit, closure fixpoint") as info:
        d = atsp.generate_tmat_batch(1000, 20, np.random.default_rng(4004))
        # viol[b, i, k, j] = d[i,j] > d[i,k] + d[k,j]
        viol = d[:, :, None, :] > d[:, :, :, None] + d[:, None, :, :]
        info["violations"] = int(viol.sum())
        assert viol.sum() == 0
        assert np.array_equal(atsp.minplus_pass(d), d)
        assert np.all(d[:, np.arange(20), np.arange(20)] == 0)


# ----------------------------------------------------------------- 5

def test_c05_full_model_gradient_check():
    with criterion(5, "encoder+decoder finite differences (L=1, d_model=8, h=2, M=3, N=4)") as info:
        t0 = time.perf_counter()
        cfg = EncoderConfig(n_layers=1, d_model=8, n_heads=2, d_ff=16, init_scheme_A="one_hot_pool",
                            init_scheme_B="zeros", pool_size=4)
        rng = np.random.default_rng(5005)
        params = init_encoder_params(cfg, rng, prefix="enc0")
        params.update(init_decoder_params(cfg, rng, cfg.d_model, prefix="dec0", skip=True))
        D = rng.integers(2, 10, size=(1, 3, 4, 1)) / ffsp.PROC_SCALE
        init = init_embeddings(3, 4, cfg, np.random.default_rng(1), batch=1, prefix="enc0")
        machine = np.array([[0, 1, 2]])
        mask = np.zeros((1, 3, 5))
        mask[0, 0, [1, 3]] = -np.inf
        mask[0, 2, 0] = -np.inf
        actions = np.array([[2, 4, 1]])

        def build():
            h_a, h_b, _ = encode(D, cfg, params, None, prefix="enc0", init=init)
            cache = precompute_kv(candidates_with_skip(h_b, params, "dec0"), params, cfg.n_heads, "dec0")
            probs = decode_step(make_query_machine(h_a, machine, params, "dec0"), cache, mask, params,
                                cfg.n_heads, cfg.clip_c, "dec0")
            return ad.sum_all(ad.log(ad.pick(probs, actions)))

        assert ad.DTYPE == np.float64
        ana = analytic_grads(build, params)
        num = numeric_grads(lambda: float(build().data), params)
        err = max_rel_error(ana, num)
        wall = time.perf_counter() - t0
        info.update(max_rel_err=f"{err:.2e}", params=sum(p.data.size for p in params.values()))
        assert err <= 1e-4
        assert wall < 60


# ----------------------------------------------------------------- 6

def test_c06_equivariance_suite():
    with criterion(6, "encoder row/column equivariance, decoder candidate equivariance, identity mixer") as info:
        worst = 0.0
        for mode in ("parallel", "seq_A_first", "seq_B_first"):
            cfg = EncoderConfig(n_layers=2, d_model=8, n_heads=2, d_ff=16, pool_size=6, update_mode=mode)
            rng = np.random.default_rng(6006)
            p = init_encoder_params(cfg, rng)
            D = rng.random((1, 5, 6, 1))
            e_b = np.eye(8)[rng.permutation(6)][None]
            a1, b1 = _encode_pinned(D, cfg, p, e_b)
            rows, cols = rng.permutation(5), rng.permutation(6)
            a2, b2 = _encode_pinned(D[:, rows], cfg, p, e_b)
            worst = max(worst, np.abs(a2 - a1[:, rows]).max(), np.abs(b2 - b1).max())
            a3, b3 = _encode_pinned(D[:, :, cols], cfg, p, e_b[:, cols])
            worst = max(worst, np.abs(b3 - b1[:, cols]).max(), np.abs(a3 - a1).max())
        info["encoder"] = f"{worst:.1e}"
        assert worst <= 1e-8

        cfg = EncoderConfig(n_layers=1, d_model=8, n_heads=2, d_ff=16)
        rng = np.random.default_rng(6007)
        p = init_decoder_params(cfg, rng, 8, skip=True)
        H_A, H_B = Tensor(rng.normal(size=(1, 3, 8))), Tensor(rng.normal(size=(1, 7, 8)))
        machine = np.array([[0, 1, 2]])
        mask = np.where(rng.random((1, 3, 7)) < 0.3, -np.inf, 0.0)
        mask[..., 0] = 0.0
        perm = rng.permutation(7)

        def probs(h_b, m):
            cache = precompute_kv(h_b, p, 2)
            return decode_step(make_query_machine(H_A, machine, p), cache, m, p, 2).data

        dec = np.abs(probs(Tensor(H_B.data[:, perm]), mask[..., perm]) - probs(H_B, mask)[..., perm]).max()
        info["decoder"] = f"{dec:.1e}"
        assert dec <= 1e-8

        cfg = EncoderConfig(n_layers=1, d_model=8, n_heads=2, d_ff=16, pool_size=6)
        rng = np.random.default_rng(6008)
        p = init_encoder_params(cfg, rng)
        _identity_mixer(p, "enc.layer0.A", cfg.n_heads, cfg.mixer_hidden)
        Hq, Hkv = rng.normal(size=(1, 3, 8)), rng.normal(size=(1, 5, 8))
        D = rng.random((1, 3, 5, 1))
        got = mixed_score_attention(Tensor(Hq), Tensor(Hkv), D, p, "enc.layer0.A", 2, cfg.clip_c).data[0]
        want = _reference_attention(Hq, Hkv, D, p, "enc.layer0.A", 2, cfg.clip_c)
        mix = np.abs(got - want).max()
        info["identity_mixer"] = f"{mix:.1e}"
        assert mix <= 1e-10


# ----------------------------------------------------------------- 7, 8

def trained(cfg: trainer.TrainConfig) -> trainer.Checkpoint:
    key = hashlib.sha256(json.dumps(cfg.to_dict(), sort_keys=True).encode()).hexdigest()[:16]
    path = CACHE / f"{cfg.problem}_toy_{key}.ckpt"
    if path.exists():
        ck = trainer.load_checkpoint(path)
        if ck.config == cfg and ck.epoch == cfg.epochs:
            return ck
    CACHE.mkdir(parents=True, exist_ok=True)
    ck = trainer.train(cfg, metrics_path=path.with_suffix(".csv"))
    trainer.save_checkpoint(path, ck)
    return ck


@pytest.mark.slow
def test_c07_atsp_toy_model_learns():
    with criterion(7, "ATSP toy (n=10): single-POMO gap vs Held-Karp <= 5%, x16 strictly better") as info:
        cfg = trainer.atsp_preset("toy")
        ck = trained(cfg)
        dists = atsp.generate_tmat_batch(500, cfg.n, np.random.default_rng(7007))
        report = bench.run_bench("atsp", ["held_karp", "matnet", "matnet_x16"], dists, seed=7,
                                 model=(ck.tensors(), cfg.encoder))
        gap = {r.method: r.gap for r in report.rows}
        info.update(single=f"{100 * gap['matnet']:.2f}%", x16=f"{100 * gap['matnet_x16']:.2f}%")
        assert report.reference == "held_karp"
        assert np.all(report.raw["matnet"] >= report.raw["held_karp"])
        assert gap["matnet"] <= 0.05
        assert gap["matnet_x16"] < gap["matnet"]


@pytest.mark.slow
def test_c08_ffsp_toy_model_learns():
    with criterion(8, "FFSP toy (N=10): single-POMO >= 3% better than SJF, x16 better still") as info:
        cfg = trainer.ffsp_preset("toy")
        ck = trained(cfg)
        procs = ffsp.generate_ffsp_batch(500, cfg.S, cfg.M, cfg.N, np.random.default_rng(8008))
        report = bench.run_bench("ffsp", ["sjf", "matnet", "matnet_x16"], procs, seed=8,
                                 model=(ck.tensors(), cfg.encoder), reference="sjf")
        mean = {r.method: r.mean for r in report.rows}
        gain = 1 - mean["matnet"] / mean["sjf"]
        info.update(sjf=f"{mean['sjf']:.3f}", single=f"{mean['matnet']:.3f}", x16=f"{mean['matnet_x16']:.3f}",
                    gain=f"{100 * gain:.2f}%")
        assert gain >= 0.03
        assert mean["matnet_x16"] < mean["matnet"]


# ----------------------------------------------------------------- 9

@given(st.integers(1, 8), st.integers(2, 40), st.integers(0, 2**32 - 1))
@settings(max_examples=200, deadline=None)
def _advantages_sum_to_zero(b, p, seed):
    rng = np.random.default_rng(seed)
    r = rng.normal(scale=10.0 ** rng.integers(-3, 4), size=(b, p))
    adv = trainer.advantages(r)
    assert np.all(np.abs(adv.sum(axis=1)) <= 1e-12 * np.maximum(1.0, np.abs(r).sum(axis=1)))


def test_c09_pomo_baseline_identities():
    with criterion(9, "per-instance advantages sum to 0; equal rewards give zero gradient") as info:
        _advantages_sum_to_zero()
        rng = np.random.default_rng(9009)
        enc = EncoderConfig(n_layers=1, d_model=8, n_heads=2, d_ff=16, pool_size=6)
        params = trainer.init_params(trainer.TrainConfig(problem="atsp", n=6, encoder=enc), rng)
        dist = atsp.generate_tmat_batch(3, 6, rng)
        with ad.Tape() as tape:
            traj, _ = pomo_rollout_atsp(params, enc, dist, "sample", rng)
            loss = trainer.reinforce_loss(np.full((3, 6), -1.5), traj.logp)
        grads = ad.backward(tape, loss, params)
        assert float(loss.data) == 0.0 and all(np.all(g == 0.0) for g in grads.values())

        fenc = EncoderConfig(n_layers=1, d_model=8, n_heads=2, d_ff=16, init_scheme_A="one_hot_pool",
                             init_scheme_B="zeros", pool_size=4)
        fparams = init_ffsp_params(fenc, rng, 2)
        procs = ffsp.generate_ffsp_batch(2, 2, 3, 4, rng)
        with ad.Tape() as tape:
            _, logp, _ = pomo_rollout_ffsp(fparams, fenc, procs, "sample", rng)
            loss = trainer.reinforce_loss(np.full(logp.shape, 2.0), logp)
        grads = ad.backward(tape, loss, fparams)
        assert all(np.all(g == 0.0) for g in grads.values())
        # mixed batch: changing the constant reward of one instance leaves the gradient bitwise unchanged
        out = []
        for const in (0.25, 7.0):
            with ad.Tape() as tape:
                traj, _ = pomo_rollout_atsp(params, enc, dist, "sample", np.random.default_rng(1))
                r = -traj.lengths / atsp.DIST_SCALE
                r[1] = const
                loss = trainer.reinforce_loss(r, traj.logp)
            out.append(ad.backward(tape, loss, params))
        assert any(np.any(g != 0.0) for g in out[0].values())
        assert all(np.array_equal(out[0][k], out[1][k]) for k in params)
        info["mixed_batch"] = "bitwise equal"


# ----------------------------------------------------------------- 10

def test_c10_schedules_from_every_solver_are_valid():
    with criterion(10, "10,000 schedules from every FFSP solver validate; fixture replays to 25") as info:
        rng = np.random.default_rng(10010)
        counts = dict.fromkeys(("sjf", "random", "decode", "ga", "pso", "matnet"), 0)

        def check(name, inst, sched):
            bad = ffsp.validate_schedule(inst, sched)
            assert bad is None, f"{name}: {bad}"
            counts[name] += 1

        def shape():
            return int(rng.integers(1, 4)), int(rng.integers(1, 5)), int(rng.integers(1, 13))

        for _ in range(2000):
            inst = ffsp.generate_ffsp(*shape(), rng)
            check("sjf", inst, ffsp.sjf(inst))
            check("random", inst, ffsp.random_schedule(inst, rng))
            chrom = rng.integers(0, inst.M, size=(inst.S, inst.N)) + rng.random((inst.S, inst.N))
            check("decode", inst, ffsp.decode_chromosome(inst, chrom))
        for _ in range(500):
            inst = ffsp.generate_ffsp(*shape(), rng)
            check("ga", inst, ffsp.ga_solve(inst, iters=5, rng=rng).schedule)
            check("pso", inst, ffsp.pso_solve(inst, iters=5, rng=rng).schedule)
        fenc = EncoderConfig(n_layers=1, d_model=8, n_heads=2, d_ff=16, init_scheme_A="one_hot_pool",
                             init_scheme_B="zeros", pool_size=4)
        params = init_ffsp_params(fenc, rng, 3)
        procs = ffsp.generate_ffsp_batch(125, 3, 4, 10, rng)
        env, _, _ = pomo_rollout_ffsp(params, fenc, procs, "sample", rng)
        for i in range(125):
            inst = ffsp.FfspInstance(procs[i])
            for p in range(24):
                check("matnet", inst, env.schedule(i, p))
        info.update(counts)
        assert sum(counts.values()) == 10_000

        inst = ffsp.load_instance(FIXTURES / "gantt_25.ffsp")
        actions = [int(a) for a in (FIXTURES / "gantt_25.actions").read_text().split()]
        sched, _ = ffsp.gantt_rollout(inst, ffsp.ScriptedPolicy(actions), range(inst.M), "greedy")
        info["fixture_makespan"] = sched.makespan
        assert ffsp.validate_schedule(inst, sched) is None
        assert sched.makespan == 25


# ----------------------------------------------------------------- 11

def _tree_bytes(directory: Path) -> dict[str, bytes]:
    return {p.name: p.read_bytes() for p in sorted(directory.iterdir())}


def _mask_time(csv_text: str) -> str:
    lines = csv_text.splitlines()
    return "\n".join(lines[:2] + [ln.rsplit(",", 1)[0] for ln in lines[2:]])


def test_c11_reproducibility(tmp_path, monkeypatch, capsys):
    with criterion(11, "fixed (seed, threads) reproduces instances, checkpoints, reports bitwise") as info:
        monkeypatch.delenv("MATNET_SEED", raising=False)
        for problem, extra in (("atsp", ["--n", "8"]), ("ffsp", ["--N", "6"])):
            for run in ("a", "b"):
                assert main(["generate", problem, "--count", "6", "--seed", "11", "--threads", "1",
                             "--out-dir", str(tmp_path / f"{problem}_{run}")] + extra) == 0
            a, b = _tree_bytes(tmp_path / f"{problem}_a"), _tree_bytes(tmp_path / f"{problem}_b")
            assert a == b and len(a) == 6
        info["instances"] = "identical"

        cfg_text = ("[train]\nproblem = atsp\nn = 6\nbatch_size = 4\ninstances_per_epoch = 8\nepochs = 2\n"
                    "[encoder]\nn_layers = 1\nd_model = 16\nn_heads = 2\nd_ff = 16\npool_size = 6\n")
        (tmp_path / "t.ini").write_text(cfg_text)
        blobs = []
        for run in ("a", "b"):
            out = tmp_path / f"{run}.ckpt"
            assert main(["train", "--config", str(tmp_path / "t.ini"), "--out", str(out),
                         "--seed", "11", "--threads", "1"]) == 0
            blobs.append(out.read_bytes())
        assert blobs[0] == blobs[1]
        back = trainer.checkpoint_bytes(trainer.load_checkpoint(tmp_path / "a.ckpt"))
        assert back == blobs[0]
        info["checkpoints"] = "identical"

        for run in ("a", "b"):
            assert main(["bench", "--methods", "sjf,random,ga", "--iters", "5", "--set", str(tmp_path / "ffsp_a"),
                         "--seed", "11", "--threads", "1", "--out", str(tmp_path / f"rep_{run}")]) == 0
        raw = [(tmp_path / f"rep_{r}.raw.csv").read_bytes() for r in "ab"]
        rep = [(tmp_path / f"rep_{r}.csv").read_text() for r in "ab"]
        assert raw[0] == raw[1]
        # wall time is the one field that cannot repeat
        assert _mask_time(rep[0]) == _mask_time(rep[1])
        info["reports"] = "identical apart from wall time"


# ----------------------------------------------------------------- 12

def test_c12_mip_exports_accept_heuristic_solutions():
    with criterion(12, "exported LP models accept heuristic solutions (20 instances per problem)") as info:
        rng = np.random.default_rng(12012)
        rows = 0
        for _ in range(20):
            inst = atsp.generate_tmat(int(rng.integers(2, 9)), rng)
            tour = atsp.nearest_insertion(inst)
            model = parse_lp(atsp.export_mtz_lp(inst))
            vals = atsp.tour_to_mip_values(tour.perm)
            assert model.evaluate(vals) == []
            assert model.objective_value(vals) == tour.length
            rows += len(model.constraints)
        for _ in range(20):
            inst = ffsp.generate_ffsp(int(rng.integers(1, 4)), int(rng.integers(1, 4)), int(rng.integers(1, 6)), rng)
            sched = ffsp.sjf(inst)
            model = parse_lp(ffsp.export_ffsp_lp(inst))
            vals = ffsp.schedule_to_mip_values(inst, sched)
            assert model.evaluate(vals) == []
            assert model.objective_value(vals) == sched.makespan
            rows += len(model.constraints)
        info["constraints_checked"] = rows
