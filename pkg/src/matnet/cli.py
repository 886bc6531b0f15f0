"""Command-line entry point: ``matnet <command> ...``.

Exit codes: 0 success, 1 bad input or configuration, 2 usage error.
"""
from __future__ import annotations

import argparse
import configparser
import dataclasses
import os
import sys
import typing
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import atsp, bench, ffsp, inference, trainer
from .encoder import EncoderConfig
from .gantt import gantt_svg


class ConfigError(ValueError):
    pass


def _coerce(cls, name: str, raw: str):
    hints = typing.get_type_hints(cls)
    if name not in hints:
        raise ConfigError(f"unknown config field {name!r}")
    kind = hints[name]
    raw = raw.strip()
    try:
        if kind is bool:
            if raw.lower() not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return raw.lower() in ("true", "1", "yes")
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
        if kind == (int | None) or kind == typing.Optional[int]:
            return None if raw.lower() in ("", "none") else int(raw)
        return raw
    except ValueError:
        raise ConfigError(f"config field {name!r}: cannot read {raw!r} as {getattr(kind, '__name__', kind)}")


def parse_config(text: str) -> trainer.TrainConfig:
    """Sectioned key=value text: [train] fields (plus ``preset``) and [encoder] fields."""
    cp = configparser.ConfigParser(interpolation=None, delimiters=("=",))
    cp.optionxform = str
    try:
        cp.read_string(text)
    except configparser.Error as e:
        raise ConfigError(f"config syntax: {e}")
    for section in cp.sections():
        if section not in ("train", "encoder"):
            raise ConfigError(f"unknown config section [{section}]")
    train = dict(cp["train"]) if cp.has_section("train") else {}
    problem = train.get("problem", "atsp").strip()
    preset = train.pop("preset", None)
    if preset is not None:
        maker = trainer.atsp_preset if problem == "atsp" else trainer.ffsp_preset
        try:
            cfg = maker(preset.strip())
        except ValueError as e:
            raise ConfigError(f"config field 'preset': {e}")
    else:
        cfg = trainer.TrainConfig(problem=problem)
        if problem == "ffsp":
            cfg.encoder = dataclasses.replace(trainer.ffsp_preset("toy").encoder)
    for key, raw in train.items():
        if key == "encoder":
            raise ConfigError("config field 'encoder': use an [encoder] section")
        setattr(cfg, key, _coerce(trainer.TrainConfig, key, raw))
    if cp.has_section("encoder"):
        for key, raw in cp["encoder"].items():
            setattr(cfg.encoder, key, _coerce(EncoderConfig, key, raw))
    try:
        cfg.validate()
    except ValueError as e:
        raise ConfigError(f"config: {e}")
    return cfg


def _seed(args) -> int:
    if args.seed is not None:
        return args.seed
    env = os.environ.get("MATNET_SEED")
    if env is None:
        return 0
    try:
        return int(env)
    except ValueError:
        raise ConfigError(f"MATNET_SEED: not an integer: {env!r}")


def _model(path):
    ck = trainer.load_checkpoint(path)
    return ck.tensors(), ck.config.encoder


# ------------------------------------------------------------------ commands

def cmd_generate(args) -> int:
    seed = _seed(args)
    rng = np.random.default_rng(seed)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if args.problem == "atsp":
        data = atsp.generate_tmat_batch(args.count, args.n, rng)
        for i, d in enumerate(data):
            atsp.save_instance(out / f"inst_{i:05d}.atsp", atsp.AtspInstance(d))
    else:
        data = ffsp.generate_ffsp_batch(args.count, args.S, args.M, args.N, rng)
        for i, p in enumerate(data):
            ffsp.save_instance(out / f"inst_{i:05d}.ffsp", ffsp.FfspInstance(p))
    print(f"wrote {args.count} {args.problem} instances to {out}")
    return 0


def cmd_train(args) -> int:
    cfg = parse_config(Path(args.config).read_text())
    if args.seed is not None or "MATNET_SEED" in os.environ:
        cfg.seed = _seed(args)
    cfg.threads = args.threads
    ck = trainer.train(cfg, metrics_path=args.metrics, progress=print,
                       dump_path=str(args.out) + ".diverged.json")
    trainer.save_checkpoint(args.out, ck)
    print(f"saved checkpoint to {args.out}")
    return 0


def cmd_eval(args) -> int:
    problem, data = bench.load_set(args.set)
    params, cfg = _model(args.checkpoint)
    opts = inference.SolveOptions(mode=args.mode, pomo=not args.no_pomo, augmentation=args.aug,
                                  seed=_seed(args))
    if args.sampling_count > 1:
        if problem != "atsp":
            raise ConfigError("sampling-count: plain-sampling mode is available for atsp only")
        res = inference.sample_only_atsp_batch(params, cfg, data, args.sampling_count, opts.seed)
        obj = res.lengths
    elif problem == "atsp":
        obj = inference.solve_atsp_batch(params, cfg, data, opts).lengths
    else:
        obj = inference.solve_ffsp_batch(params, cfg, data, opts).makespans
    print(f"{problem} instances={len(obj)} mean={np.mean(obj):.6f}")
    if args.out:
        Path(args.out).write_text("".join(f"{i},{float(v)!r}\n" for i, v in enumerate(obj)))
    return 0


def cmd_bench(args) -> int:
    problem, data = bench.load_set(args.set)
    model = _model(args.checkpoint) if args.checkpoint else None
    methods = [m.strip() for m in args.methods.split(",") if m.strip()]
    report = bench.run_bench(problem, methods, data, _seed(args), model, iters=args.iters,
                             reference=args.reference)
    csv_text, text = bench.render_report(report)
    print(text, end="")
    if args.out:
        Path(args.out + ".csv").write_text(csv_text)
        Path(args.out + ".txt").write_text(text)
        Path(args.out + ".raw.csv").write_text(bench.render_raw(report))
    return 0


SOLVE_PRESETS = {"x1": 1, "x16": 16, "x128": 128, "x1280": 1280}


def cmd_solve(args) -> int:
    text = Path(args.instance).read_text()
    seed = _seed(args)
    is_atsp = text.lstrip().startswith("ATSP")
    if args.checkpoint is None:
        if is_atsp:
            inst = atsp.parse_instance(text)
            sol = atsp.furthest_insertion(inst)
            print(f"length {sol.length}")
        else:
            inst = ffsp.parse_instance(text)
            sol = ffsp.sjf(inst)
            print(f"makespan {sol.makespan}")
    else:
        params, cfg = _model(args.checkpoint)
        opts = inference.SolveOptions(mode="sample", augmentation=SOLVE_PRESETS[args.preset], seed=seed)
        if is_atsp:
            inst = atsp.parse_instance(text)
            sol, _ = inference.solve_atsp(params, cfg, inst, opts)
            print(f"length {sol.length}")
        else:
            inst = ffsp.parse_instance(text)
            sol = inference.solve_ffsp(params, cfg, inst, opts)
            print(f"makespan {sol.makespan}")
    if args.out:
        inference.save_solution(args.out, sol, None if is_atsp else inst.M)
    return 0


def cmd_export_mip(args) -> int:
    text = Path(args.instance).read_text()
    if text.lstrip().startswith("ATSP"):
        lp = atsp.export_mtz_lp(atsp.parse_instance(text))
    else:
        lp = ffsp.export_ffsp_lp(ffsp.parse_instance(text), args.big_m)
    Path(args.out).write_text(lp)
    print(f"wrote {args.out}")
    return 0


def cmd_gantt(args) -> int:
    inst = ffsp.load_instance(args.instance)
    sched, _ = ffsp.parse_schedule(Path(args.schedule).read_text())
    bad = ffsp.validate_schedule(inst, sched)
    if bad is not None:
        raise ConfigError(f"schedule is invalid: {bad}")
    Path(args.out).write_text(gantt_svg(inst, sched))
    print(f"wrote {args.out} (makespan {sched.makespan})")
    return 0


def cmd_oracle(args) -> int:
    problem, data = bench.load_set(args.set)
    if problem != "atsp":
        raise ConfigError("oracle: held-karp applies to atsp sets only")
    if data.shape[1] > atsp.HELD_KARP_MAX_N:
        raise ConfigError(f"oracle: n={data.shape[1]} exceeds the held-karp limit {atsp.HELD_KARP_MAX_N}")
    opt = atsp.held_karp_batch(data)
    lines = "".join(f"{i},{int(v)}\n" for i, v in enumerate(opt))
    if args.out:
        Path(args.out).write_text(lines)
    print(f"held_karp instances={len(opt)} mean={opt.mean():.6f}")
    return 0


# -------------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="matnet", description="MatNet ATSP/FFSP solver and benchmarks")
    p.add_argument("--seed", type=int, default=None, help="master seed (fallback: MATNET_SEED, then 0)")
    p.add_argument("--threads", type=int, default=1, help="BLAS thread count")
    # repeated on every subcommand; SUPPRESS keeps a value given before the subcommand
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS)
    common.add_argument("--threads", type=int, default=argparse.SUPPRESS)
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", parents=[common], help="generate random instances")
    g.add_argument("problem", choices=["atsp", "ffsp"])
    g.add_argument("--n", type=int, default=20)
    g.add_argument("--S", type=int, default=3)
    g.add_argument("--M", type=int, default=4)
    g.add_argument("--N", type=int, default=20)
    g.add_argument("--count", type=int, default=1)
    g.add_argument("--out-dir", default=".")
    g.set_defaults(fn=cmd_generate)

    t = sub.add_parser("train", parents=[common], help="train from a config file")
    t.add_argument("--config", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--metrics", default=None)
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint on an instance set")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--set", required=True)
    e.add_argument("--mode", choices=["greedy", "sample"], default="sample")
    e.add_argument("--aug", type=int, default=1)
    e.add_argument("--no-pomo", action="store_true")
    e.add_argument("--sampling-count", type=int, default=1)
    e.add_argument("--out", default=None)
    e.set_defaults(fn=cmd_eval)

    b = sub.add_parser("bench", parents=[common], help="compare methods over an instance set")
    b.add_argument("--methods", required=True)
    b.add_argument("--set", required=True)
    b.add_argument("--checkpoint", default=None)
    b.add_argument("--iters", type=int, default=1000, help="GA/PSO iterations")
    b.add_argument("--reference", default=None)
    b.add_argument("--out", default=None, help="prefix for .csv/.txt/.raw.csv outputs")
    b.set_defaults(fn=cmd_bench)

    s = sub.add_parser("solve", parents=[common], help="solve one instance")
    s.add_argument("--instance", required=True)
    s.add_argument("--checkpoint", default=None)
    s.add_argument("--preset", choices=sorted(SOLVE_PRESETS), default="x1")
    s.add_argument("--out", default=None)
    s.set_defaults(fn=cmd_solve)

    x = sub.add_parser("export-mip", parents=[common], help="write the MIP model as an LP file")
    x.add_argument("--instance", required=True)
    x.add_argument("--out", required=True)
    x.add_argument("--big-m", type=float, default=None)
    x.set_defaults(fn=cmd_export_mip)

    gt = sub.add_parser("gantt", parents=[common], help="render a schedule as SVG")
    gt.add_argument("--schedule", required=True)
    gt.add_argument("--instance", required=True)
    gt.add_argument("--out", required=True)
    gt.set_defaults(fn=cmd_gantt)

    o = sub.add_parser("oracle", parents=[common], help="exact held-karp lengths for a set")
    o.add_argument("--set", required=True)
    o.add_argument("--out", default=None)
    o.set_defaults(fn=cmd_oracle)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)  # exits 2 with usage on bad flags
    try:
        with threadpool_limits(limits=args.threads):
            return args.fn(args)
    except (ConfigError, trainer.CheckpointError, FileNotFoundError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
