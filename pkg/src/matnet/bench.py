"""Benchmark orchestration and result tables."""
from __future__ import annotations

import csv
import io
import time
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from . import atsp, ffsp
from .autodiff import Tensor
from .encoder import EncoderConfig
from .inference import SolveOptions, solve_atsp_batch, solve_ffsp_batch


@dataclass
class BenchRow:
    method: str
    seed: int
    count: int
    mean: float
    wall: float
    gap: float | None = None


@dataclass
class BenchReport:
    problem: str
    rows: list[BenchRow] = field(default_factory=list)
    raw: dict[str, np.ndarray] = field(default_factory=dict)   # method -> per-instance objectives
    reference: str | None = None

    def add(self, method: str, seed: int, objectives: np.ndarray, wall: float) -> None:
        objectives = np.asarray(objectives, dtype=np.float64)
        self.raw[method] = objectives
        self.rows.append(BenchRow(method, seed, len(objectives), float(objectives.mean()), wall))


def compute_gaps(report: BenchReport, reference: str | None = None) -> BenchReport:
    """Fill gap columns from the stored raw objectives.

    Reference: the explicit one if given, else held_karp when present, else the
    best method of the run; with a single method there is nothing to compare to.
    ATSP gaps are relative, FFSP gaps absolute.
    """
    means = {m: float(np.mean(v)) for m, v in report.raw.items()}
    for row in report.rows:
        row.mean = means[row.method]
        row.count = len(report.raw[row.method])
        row.gap = None
    if reference is None:
        if "held_karp" in means:
            reference = "held_karp"
        elif len(means) >= 2:
            reference = min(sorted(means), key=lambda m: means[m])
    if reference is None or reference not in means:
        if reference is not None:
            warnings.warn(f"reference method {reference!r} not in report; gap column left blank")
        report.reference = None
        return report
    report.reference = reference
    ref = means[reference]
    for row in report.rows:
        row.gap = (row.mean - ref) / ref if report.problem == "atsp" else row.mean - ref
    return report


_FIELDS = ["method", "seed", "count", "mean", "gap", "time"]


def _sorted_rows(report: BenchReport) -> list[BenchRow]:
    return sorted(report.rows, key=lambda r: (r.method, r.seed))


def render_csv(report: BenchReport) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["problem", report.problem] + [""] * (len(_FIELDS) - 2))
    w.writerow(_FIELDS)
    for r in _sorted_rows(report):
        w.writerow([r.method, r.seed, r.count, repr(r.mean), "" if r.gap is None else repr(r.gap), repr(r.wall)])
    return buf.getvalue()


def parse_csv(text: str) -> BenchReport:
    lines = list(csv.reader(io.StringIO(text)))
    report = BenchReport(lines[0][1])
    if lines[1] != _FIELDS:
        raise ValueError(f"unexpected report header {lines[1]}")
    for method, seed, count, mean, gap, wall in lines[2:]:
        report.rows.append(BenchRow(method, int(seed), int(count), float(mean), float(wall),
                                    None if gap == "" else float(gap)))
    return report


def render_text(report: BenchReport) -> str:
    atsp_like = report.problem == "atsp"
    head = ["method", "seed", "count", "Len." if atsp_like else "MS", "Gap", "Time(s)"]
    body = []
    for r in _sorted_rows(report):
        if r.gap is None:
            gap = ""
        else:
            gap = f"{100 * r.gap:.2f}%" if atsp_like else f"{r.gap:.2f}"
        mean = f"{r.mean / atsp.DIST_SCALE:.4f}e6" if atsp_like else f"{r.mean:.2f}"
        body.append([r.method, str(r.seed), str(r.count), mean, gap, f"{r.wall:.2f}"])
    widths = [max(len(x) for x in col) for col in zip(head, *body)]
    fmt = lambda cells: "  ".join(c.rjust(w) if i else c.ljust(w)  # noqa: E731
                                  for i, (c, w) in enumerate(zip(cells, widths)))
    lines = [fmt(head), "  ".join("-" * w for w in widths)] + [fmt(b) for b in body]
    if report.reference:
        lines.append(f"gap reference: {report.reference}")
    return "\n".join(lines) + "\n"


def render_report(report: BenchReport) -> tuple[str, str]:
    return render_csv(report), render_text(report)


def render_raw(report: BenchReport) -> str:
    methods = sorted(report.raw)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["instance"] + methods)
    count = max(len(v) for v in report.raw.values()) if methods else 0
    for i in range(count):
        w.writerow([i] + [repr(float(report.raw[m][i])) for m in methods])
    return buf.getvalue()


def parse_raw(text: str) -> dict[str, np.ndarray]:
    lines = list(csv.reader(io.StringIO(text)))
    methods = lines[0][1:]
    cols = np.array([[float(x) for x in ln[1:]] for ln in lines[1:]]).reshape(-1, len(methods))
    return {m: cols[:, i] for i, m in enumerate(methods)}


# --------------------------------------------------------------- method runners

ATSP_METHODS = ("nn", "ni", "fi", "held_karp")
FFSP_METHODS = ("sjf", "random", "ga", "pso")


def _matnet_opts(method: str, seed: int) -> SolveOptions:
    """``matnet`` = single POMO; ``matnet_x16`` = x16 instance augmentation."""
    k = 1
    if "_x" in method:
        k = int(method.split("_x", 1)[1])
    return SolveOptions(mode="sample", augmentation=k, seed=seed)


def run_atsp_method(method: str, dists: np.ndarray, seed: int,
                    model: tuple[Mapping[str, Tensor], EncoderConfig] | None = None) -> np.ndarray:
    if method in ("nn", "ni", "fi"):
        runner = {"nn": atsp.nearest_neighbor_batch, "ni": atsp.nearest_insertion_batch,
                  "fi": atsp.furthest_insertion_batch}[method]
        return atsp.tour_lengths(dists, runner(dists)).astype(np.float64)
    if method == "held_karp":
        return atsp.held_karp_batch(dists).astype(np.float64)
    if method.startswith("matnet"):
        if model is None:
            raise ValueError(f"method {method} needs a checkpoint")
        return solve_atsp_batch(model[0], model[1], dists, _matnet_opts(method, seed)).lengths.astype(np.float64)
    raise ValueError(f"unknown ATSP method {method!r}")


def run_ffsp_method(method: str, procs: np.ndarray, seed: int, iters: int = 1000,
                    model: tuple[Mapping[str, Tensor], EncoderConfig] | None = None) -> np.ndarray:
    rng = np.random.default_rng(seed)
    if method == "sjf":
        return np.array([ffsp.sjf(ffsp.FfspInstance(p)).makespan for p in procs], dtype=np.float64)
    if method == "random":
        return np.array([s.makespan for s in ffsp.random_schedule_batch(procs, rng)], dtype=np.float64)
    if method in ("ga", "pso"):
        solver = ffsp.ga_solve if method == "ga" else ffsp.pso_solve
        return np.array([solver(ffsp.FfspInstance(p), iters=iters, rng=rng).schedule.makespan
                         for p in procs], dtype=np.float64)
    if method.startswith("matnet"):
        if model is None:
            raise ValueError(f"method {method} needs a checkpoint")
        opts = _matnet_opts(method, seed)
        return solve_ffsp_batch(model[0], model[1], procs, opts).makespans.astype(np.float64)
    raise ValueError(f"unknown FFSP method {method!r}")


def run_bench(problem: str, methods: list[str], data: np.ndarray, seed: int, model=None,
              iters: int = 1000, reference: str | None = None) -> BenchReport:
    report = BenchReport(problem)
    for method in methods:
        t0 = time.perf_counter()
        if problem == "atsp":
            obj = run_atsp_method(method, data, seed, model)
        else:
            obj = run_ffsp_method(method, data, seed, iters, model)
        report.add(method, seed, obj, time.perf_counter() - t0)
    return compute_gaps(report, reference)


# ------------------------------------------------------------- instance sets

def load_set(directory) -> tuple[str, np.ndarray]:
    """Load every instance file of a directory in name order: ('atsp', (B,n,n)) or ('ffsp', (B,S,M,N))."""
    files = sorted(Path(directory).glob("*.atsp"))
    if files:
        return "atsp", np.stack([atsp.load_instance(f).dist for f in files])
    files = sorted(Path(directory).glob("*.ffsp"))
    if files:
        return "ffsp", np.stack([ffsp.load_instance(f).proc for f in files])
    raise FileNotFoundError(f"no .atsp or .ffsp instance files in {directory}")
