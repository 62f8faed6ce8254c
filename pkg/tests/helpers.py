"""Shared test utilities, most importantly the finite-difference gradient
oracle. The oracle is deliberately independent of the autodiff engine: it
only calls a closure mapping plain numpy parameter arrays to a float loss."""

from __future__ import annotations

import numpy as np


def numeric_gradient(fn, arrays, h=1e-5):
    """Central finite differences of ``fn`` at ``arrays``.

    fn: callable taking a dict name -> np.ndarray and returning a float.
    arrays: dict name -> np.ndarray (float64), not mutated.
    Returns a dict of gradient arrays of matching shapes.
    """
    grads = {}
    work = {k: v.copy() for k, v in arrays.items()}
    for name, a in work.items():
        g = np.zeros_like(a)
        flat = a.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            hi = fn(work)
            flat[i] = orig - h
            lo = fn(work)
            flat[i] = orig
            gflat[i] = (hi - lo) / (2.0 * h)
        grads[name] = g
    return grads


def relative_error(a, b, floor=1e-8):
    """Max elementwise |a-b| / max(|a|, |b|, floor)."""
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom))
