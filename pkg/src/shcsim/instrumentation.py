"""Lightweight operation counters for empirical complexity reports.

Counting is disabled by default and adds one branch per instrumented kernel.
Enable around a run with :func:`counting`, then read the totals.
"""

from __future__ import annotations

from contextlib import contextmanager
from dataclasses import dataclass, field


@dataclass
class OpCounters:
    rate_evals: int = 0
    gradient_evals: int = 0
    dual_inner_evals: int = 0
    flops: float = 0.0
    iterations: int = 0

    def as_dict(self) -> dict:
        return {
            "rate_evals": self.rate_evals,
            "gradient_evals": self.gradient_evals,
            "dual_inner_evals": self.dual_inner_evals,
            "flops": self.flops,
            "iterations": self.iterations,
        }


_ACTIVE: OpCounters | None = None


def tally(kind: str, count: int = 1, flops: float = 0.0) -> None:
    if _ACTIVE is None:
        return
    setattr(_ACTIVE, kind, getattr(_ACTIVE, kind) + count)
    _ACTIVE.flops += flops


@contextmanager
def counting(counters: OpCounters):
    global _ACTIVE
    previous = _ACTIVE
    _ACTIVE = counters
    try:
        yield counters
    finally:
        _ACTIVE = previous
