"""Deliberate fault injection for negative controls.

Known faults:

``c2-scale``
    every C2 estimate and closed form is multiplied by 1.1.
``esm-target``
    the explicit-score regression target is shifted by +0.1.
"""
from __future__ import annotations

import contextlib
import contextvars

KNOWN = ("c2-scale", "esm-target")

_active: contextvars.ContextVar[frozenset] = contextvars.ContextVar("dsmbias_faults", default=frozenset())


def active(name: str) -> bool:
    return name in _active.get()


@contextlib.contextmanager
def inject(*names: str | None):
    names = tuple(n for n in names if n)
    unknown = [n for n in names if n not in KNOWN]
    if unknown:
        raise ValueError(f"unknown fault(s) {unknown}; known: {', '.join(KNOWN)}")
    token = _active.set(_active.get() | frozenset(names))
    try:
        yield
    finally:
        _active.reset(token)


C2_SCALE = 1.1
ESM_SHIFT = 0.1


def c2_factor() -> float:
    return C2_SCALE if active("c2-scale") else 1.0


def esm_shift() -> float:
    return ESM_SHIFT if active("esm-target") else 0.0
