"""Linear-model container with CPLEX-LP text writer, parser, and evaluator.

Only the subset of the LP format this package emits is supported: one
objective, linear constraints with <=, >=, =, simple bounds, and Binary /
General sections.
"""
from __future__ import annotations

import re
from dataclasses import dataclass, field

_SENSES = ("<=", ">=", "=")


@dataclass
class Constraint:
    name: str
    coeffs: dict[str, float]
    sense: str
    rhs: float


@dataclass
class LinearModel:
    name: str = "model"
    minimize: bool = True
    objective: dict[str, float] = field(default_factory=dict)
    constraints: list[Constraint] = field(default_factory=list)
    bounds: dict[str, tuple[float | None, float | None]] = field(default_factory=dict)
    binaries: list[str] = field(default_factory=list)
    generals: list[str] = field(default_factory=list)

    def add(self, name: str, coeffs: dict[str, float], sense: str, rhs: float) -> None:
        if sense not in _SENSES:
            raise ValueError(f"bad constraint sense {sense!r}")
        self.constraints.append(Constraint(name, dict(coeffs), sense, float(rhs)))

    def variables(self) -> list[str]:
        seen = dict.fromkeys(self.objective)
        for c in self.constraints:
            seen.update(dict.fromkeys(c.coeffs))
        seen.update(dict.fromkeys(self.bounds))
        seen.update(dict.fromkeys(self.binaries))
        seen.update(dict.fromkeys(self.generals))
        return list(seen)

    def to_lp(self) -> str:
        lines = [f"\\ {self.name}", "Minimize" if self.minimize else "Maximize"]
        lines += _wrap(" obj:", self.objective)
        lines.append("Subject To")
        for c in self.constraints:
            body = _wrap(f" {c.name}:", c.coeffs)
            body[-1] += f" {c.sense} {_num(c.rhs)}"
            lines += body
        if self.bounds:
            lines.append("Bounds")
            for var, (lo, hi) in self.bounds.items():
                if lo is not None and hi is not None:
                    lines.append(f" {_num(lo)} <= {var} <= {_num(hi)}")
                elif lo is not None:
                    lines.append(f" {var} >= {_num(lo)}")
                elif hi is not None:
                    lines.append(f" -inf <= {var} <= {_num(hi)}")
                else:
                    lines.append(f" {var} free")
        for title, names in (("Binary", self.binaries), ("General", self.generals)):
            if names:
                lines.append(title)
                for i in range(0, len(names), 8):
                    lines.append(" " + " ".join(names[i:i + 8]))
        lines.append("End")
        return "\n".join(lines) + "\n"

    def evaluate(self, values: dict[str, float], tol: float = 1e-9) -> list[str]:
        """Names of violated constraints, bounds, and integrality requirements."""
        bad = []
        for c in self.constraints:
            lhs = sum(a * values.get(v, 0.0) for v, a in c.coeffs.items())
            if ((c.sense == "<=" and lhs > c.rhs + tol) or (c.sense == ">=" and lhs < c.rhs - tol)
                    or (c.sense == "=" and abs(lhs - c.rhs) > tol)):
                bad.append(c.name)
        for var, (lo, hi) in self.bounds.items():
            x = values.get(var, 0.0)
            if (lo is not None and x < lo - tol) or (hi is not None and x > hi + tol):
                bad.append(f"bound:{var}")
        for var in self.binaries:
            if values.get(var, 0.0) not in (0, 1):
                bad.append(f"binary:{var}")
        for var in self.generals:
            x = values.get(var, 0.0)
            if abs(x - round(x)) > tol:
                bad.append(f"integer:{var}")
        return bad

    def objective_value(self, values: dict[str, float]) -> float:
        return sum(a * values.get(v, 0.0) for v, a in self.objective.items())


def _num(x: float) -> str:
    return str(int(x)) if float(x).is_integer() else repr(float(x))


def _wrap(head: str, coeffs: dict[str, float], width: int = 200) -> list[str]:
    lines, cur = [], head
    first = True
    for var, a in coeffs.items():
        if a == 0:
            continue
        sign = "-" if a < 0 else ("" if first else "+")
        mag = abs(a)
        term = f"{sign} {var}" if mag == 1 else f"{sign} {_num(mag)} {var}"
        term = term.strip()
        if len(cur) + len(term) + 1 > width:
            lines.append(cur)
            cur = "  "
        cur += " " + term
        first = False
    if first:
        cur += " 0"
    lines.append(cur)
    return lines


_TERM = re.compile(r"([+-]?)\s*(\d+(?:\.\d*)?(?:[eE][+-]?\d+)?)?\s*([A-Za-z_][\w.\[\]]*)")
_NAMED = re.compile(r"^\s*([A-Za-z_][\w.\[\]]*)\s*:(.*)$")


class LpParseError(ValueError):
    pass


def _parse_expr(text: str) -> dict[str, float]:
    coeffs: dict[str, float] = {}
    text = text.strip()
    if text in ("", "0"):
        return coeffs
    pos = 0
    for m in _TERM.finditer(text):
        if text[pos:m.start()].strip():
            raise LpParseError(f"cannot parse expression near {text[pos:m.start()]!r}")
        sign, num, var = m.groups()
        a = float(num) if num else 1.0
        coeffs[var] = coeffs.get(var, 0.0) + (-a if sign == "-" else a)
        pos = m.end()
    if text[pos:].strip():
        raise LpParseError(f"trailing text {text[pos:]!r}")
    return coeffs


def _bound_value(tok: str) -> float | None:
    tok = tok.strip().lower()
    if tok in ("-inf", "-infinity"):
        return None
    if tok in ("inf", "+inf", "infinity"):
        return None
    return float(tok)


def parse_lp(text: str) -> LinearModel:
    model = LinearModel()
    section = None
    statements: dict[str, list[str]] = {"obj": [], "st": [], "bounds": [], "bin": [], "gen": []}
    headers = {"minimize": "obj", "maximize": "obj", "subject to": "st", "bounds": "bounds",
               "binary": "bin", "binaries": "bin", "general": "gen", "generals": "gen"}
    for raw in text.splitlines():
        line = raw.rstrip()
        if line.startswith("\\"):
            if section is None and line[1:].strip():
                model.name = line[1:].strip()
            continue
        key = line.strip().lower()
        if key in headers:
            section = headers[key]
            if key == "maximize":
                model.minimize = False
            continue
        if key == "end":
            break
        if not key:
            continue
        if section is None:
            raise LpParseError(f"content before any section: {line!r}")
        if section in ("obj", "st") and not _NAMED.match(line) and statements[section]:
            statements[section][-1] += " " + line.strip()
        else:
            statements[section].append(line.strip())
    for stmt in statements["obj"]:
        m = _NAMED.match(stmt)
        model.objective = _parse_expr(m.group(2) if m else stmt)
    for stmt in statements["st"]:
        m = _NAMED.match(stmt)
        if not m:
            raise LpParseError(f"unnamed constraint {stmt!r}")
        name, body = m.groups()
        found = re.search(r"(<=|>=|=<|=>|=)", body)
        if not found:
            raise LpParseError(f"constraint {name} has no relation")
        sense = {"=<": "<=", "=>": ">="}.get(found.group(1), found.group(1))
        model.add(name, _parse_expr(body[:found.start()]), sense, float(body[found.end():]))
    for stmt in statements["bounds"]:
        parts = stmt.split()
        if len(parts) == 2 and parts[1].lower() == "free":
            model.bounds[parts[0]] = (None, None)
        elif len(parts) == 5 and parts[1] == "<=" and parts[3] == "<=":
            model.bounds[parts[2]] = (_bound_value(parts[0]), _bound_value(parts[4]))
        elif len(parts) == 3 and parts[1] in (">=", "<="):
            lo, hi = model.bounds.get(parts[0], (0.0, None))
            if parts[1] == ">=":
                lo = _bound_value(parts[2])
            else:
                hi = _bound_value(parts[2])
            model.bounds[parts[0]] = (lo, hi)
        else:
            raise LpParseError(f"cannot parse bound {stmt!r}")
    for stmt in statements["bin"]:
        model.binaries += stmt.split()
    for stmt in statements["gen"]:
        model.generals += stmt.split()
    return model
