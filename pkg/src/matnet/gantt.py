"""Plain SVG Gantt charts for FFSP schedules: one lane per (stage, machine)."""
from __future__ import annotations

from xml.sax.saxutils import escape

from .ffsp import FfspInstance, FfspSchedule

_PALETTE = ["#4e79a7", "#f28e2b", "#e15759", "#76b7b2", "#59a14f", "#edc948", "#b07aa1",
            "#ff9da7", "#9c755f", "#bab0ac"]


def gantt_svg(inst: FfspInstance, sched: FfspSchedule, unit: int = 24, lane: int = 22) -> str:
    S, M, N = inst.S, inst.M, inst.N
    comp = sched.completion(inst)
    left, top = 90, 20
    width = left + unit * (int(sched.makespan) + 1) + 20
    height = top + lane * S * M + 40
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
           f'data-makespan="{int(sched.makespan)}" data-lanes="{S * M}">']
    for k in range(S):
        for i in range(M):
            y = top + lane * (k * M + i)
            out.append(f'<g class="lane" data-stage="{k}" data-machine="{i}">')
            out.append(f'<text x="4" y="{y + lane - 7}" font-size="11">S{k + 1} M{i + 1}</text>')
            out.append(f'<line x1="{left}" y1="{y + lane}" x2="{width - 20}" y2="{y + lane}" stroke="#ddd"/>')
            for j in range(N):
                if sched.machine[k, j] != i:
                    continue
                s, e = int(sched.start[k, j]), int(comp[k, j])
                out.append(f'<rect class="strip" x="{left + unit * s}" y="{y + 2}" width="{unit * (e - s)}" '
                           f'height="{lane - 4}" fill="{_PALETTE[j % len(_PALETTE)]}" stroke="black" '
                           f'data-job="{j}" data-start="{s}" data-end="{e}"/>')
                out.append(f'<text x="{left + unit * s + 3}" y="{y + lane - 7}" font-size="10">'
                           f'{escape(str(j + 1))}</text>')
            out.append("</g>")
    x = left + unit * int(sched.makespan)
    base = top + lane * S * M
    out.append(f'<line x1="{x}" y1="{top}" x2="{x}" y2="{base}" stroke="red" stroke-dasharray="4 2"/>')
    for t in range(0, int(sched.makespan) + 1, 5):
        out.append(f'<text x="{left + unit * t}" y="{base + 16}" font-size="10">{t}</text>')
    out.append(f'<text x="{left}" y="{base + 32}" font-size="11">makespan {int(sched.makespan)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"
