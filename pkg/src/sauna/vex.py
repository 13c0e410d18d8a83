"""Fraction of variance explained (V^ex) and the transition filter.

V^ex compares value predictions with the empirical returns that followed:
``1 - sum((R - V)^2) / sum((R - mean(R))^2)``. It is 1 for a perfect fit, 0
for a predictor no better than the mean return, and negative when worse.
"""

from __future__ import annotations

import heapq
import logging
from dataclasses import dataclass

import numpy as np

from .exceptions import ConfigurationError, UsageError

logger = logging.getLogger(__name__)

#: V^ex reported when every return in the batch is identical but V misses them.
DEGENERATE_VEX = -1.0


@dataclass(frozen=True)
class VexBatchStat:
    vex_batch: float
    sample_count: int
    return_mean: float
    degenerate: bool = False


def vex_of_batch(returns, values) -> VexBatchStat:
    """V^ex of ``values`` as predictors of ``returns``.

    When all returns are equal the ratio is undefined; the result is 1 if the
    predictions are exact and :data:`DEGENERATE_VEX` otherwise.
    """
    returns = np.asarray(returns, dtype=np.float64).ravel()
    values = np.asarray(values, dtype=np.float64).ravel()
    if returns.size == 0:
        raise UsageError("vex_of_batch needs at least one sample")
    if returns.shape != values.shape:
        raise ConfigurationError("returns and values differ in length")
    mean = returns.mean()
    sse = float(np.sum((returns - values) ** 2))
    sst = float(np.sum((returns - mean) ** 2))
    if sst == 0.0:
        vex = 1.0 if sse == 0.0 else DEGENERATE_VEX
        logger.debug("degenerate V^ex batch (constant returns), using %s", vex)
        return VexBatchStat(vex, returns.size, float(mean), degenerate=True)
    return VexBatchStat(1.0 - sse / sst, returns.size, float(mean))


def adjusted_vex(vex, n: int, p: int = 1) -> float:
    """Adjusted V^ex (the adjusted R^2) for ``n`` samples and ``p`` predictors."""
    if isinstance(vex, VexBatchStat):
        vex = vex.vex_batch
    if n <= p + 1:
        raise UsageError(f"adjusted V^ex needs n > p + 1 (got n={n}, p={p})")
    return 1.0 - (1.0 - vex) * (n - 1) / (n - p - 1)


class MedianTracker:
    """Exact running median of a stream (two heaps).

    ``median()`` of an empty tracker is 0.
    """

    def __init__(self, values=()):
        self._low = []   # max-heap via negation
        self._high = []  # min-heap
        for v in values:
            self.add(v)

    def __len__(self):
        return len(self._low) + len(self._high)

    def add(self, value):
        value = float(value)
        if self._low and value > -self._low[0]:
            heapq.heappush(self._high, value)
        else:
            heapq.heappush(self._low, -value)
        if len(self._low) > len(self._high) + 1:
            heapq.heappush(self._high, -heapq.heappop(self._low))
        elif len(self._high) > len(self._low):
            heapq.heappush(self._low, -heapq.heappop(self._high))

    def median(self):
        if not self._low:
            return 0.0
        if len(self._low) > len(self._high):
            return -self._low[0]
        return (-self._low[0] + self._high[0]) / 2.0

    statistic = median

    def clear(self):
        self._low.clear()
        self._high.clear()


class MeanTracker:
    """Running mean with the same interface as :class:`MedianTracker`."""

    def __init__(self, values=()):
        self._sum = 0.0
        self._n = 0
        for v in values:
            self.add(v)

    def __len__(self):
        return self._n

    def add(self, value):
        self._sum += float(value)
        self._n += 1

    def mean(self):
        return self._sum / self._n if self._n else 0.0

    statistic = mean

    def clear(self):
        self._sum = 0.0
        self._n = 0


def filter_ratio(vex_pred, center, eps0=1e-8):
    return abs(vex_pred) / (abs(center) + eps0)


def accept_transition(vex_pred, tracker, rho=0.3, eps0=1e-8) -> bool:
    """Keep a transition iff ``|vex_pred| / (|center| + eps0) >= rho``.

    ``center`` is the tracker's statistic over earlier predictions of the
    current collection. The caller adds ``vex_pred`` to the tracker afterwards.
    """
    if rho <= 0.0:
        return True
    return filter_ratio(vex_pred, tracker.statistic(), eps0) >= rho
