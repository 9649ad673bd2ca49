"""Continual-learning summary metrics over a lower-triangular accuracy matrix."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np


@dataclass(frozen=True)
class MetricsReport:
    """AA and AF after the final stage.

    ``af`` measures the drop from each old task's best accuracy, so it is
    never negative. ``af_first`` uses the accuracy at the stage the task was
    learned as the reference and can go negative (backward transfer).
    """

    aa: float
    af: float
    af_first: float
    accuracy: tuple[tuple[float, ...], ...]

    def to_record(self) -> dict:
        return {
            "AA": self.aa,
            "AF": self.af,
            "AF_first": self.af_first,
            "accuracy": [list(row) for row in self.accuracy],
        }


def _check(acc: Sequence[Sequence[float]]) -> list[list[float]]:
    rows = [list(map(float, r)) for r in acc]
    if not rows:
        raise ValueError("accuracy matrix is empty")
    for t, r in enumerate(rows):
        if len(r) < t + 1:
            raise ValueError(f"row {t} has {len(r)} entries, needs at least {t + 1}")
        if any(not np.isfinite(v) for v in r[: t + 1]):
            raise ValueError(f"row {t} has non-finite accuracies")
    return [r[: t + 1] for t, r in enumerate(rows)]


def task_forgetting(acc: Sequence[Sequence[float]]) -> list[float]:
    """``max_{t >= i} a[t][i] - a[K][i]`` for every task i < K."""
    rows = _check(acc)
    K = len(rows) - 1
    return [max(rows[t][i] for t in range(i, K + 1)) - rows[K][i] for i in range(K)]


def compute_metrics(acc: Sequence[Sequence[float]]) -> MetricsReport:
    rows = _check(acc)
    K = len(rows) - 1
    aa = float(np.mean(rows[K]))
    if K == 0:
        af = af_first = 0.0
    else:
        af = float(np.mean(task_forgetting(rows)))
        af_first = float(np.mean([rows[i][i] - rows[K][i] for i in range(K)]))
    return MetricsReport(aa, af, af_first, tuple(tuple(r) for r in rows))
