"""Shared test utilities: central finite differences and small builders."""
from __future__ import annotations

import numpy as np

from matnet import autodiff as ad


def numeric_grads(loss_fn, params: dict, h: float = 1e-5) -> dict:
    """Central differences of ``loss_fn()`` (a float) w.r.t. every entry of every param."""
    out = {}
    for name, p in params.items():
        g = np.zeros_like(p.data)
        for i in np.ndindex(p.data.shape):
            old = p.data[i]
            p.data[i] = old + h
            up = loss_fn()
            p.data[i] = old - h
            down = loss_fn()
            p.data[i] = old
            g[i] = (up - down) / (2 * h)
        out[name] = g
    return out


def analytic_grads(build_loss, params: dict) -> dict:
    with ad.Tape() as tape:
        loss = build_loss()
    return ad.backward(tape, loss, params)


def max_rel_error(a: dict, b: dict) -> float:
    """max |a-b| / max(|a|, |b|, 1e-4), so near-zero entries are judged absolutely."""
    worst = 0.0
    for k in a:
        den = np.maximum(np.maximum(np.abs(a[k]), np.abs(b[k])), 1e-4)
        worst = max(worst, float(np.max(np.abs(a[k] - b[k]) / den)) if a[k].size else 0.0)
    return worst


def check_gradients(build_loss, params: dict, tol: float = 1e-4) -> float:
    ana = analytic_grads(build_loss, params)
    num = numeric_grads(lambda: float(build_loss().data), params)
    err = max_rel_error(ana, num)
    assert err <= tol, f"relative gradient error {err:.3e} > {tol}"
    return err
