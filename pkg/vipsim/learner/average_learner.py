import math
from itertools import count

from vipsim.learner.base_learner import BaseLearner


class AverageLearner(BaseLearner):
    """Mean of a stochastic function of an integer seed, to a tolerance.

    Seeds are handed out from 0 upwards, skipping the ones already
    evaluated or in flight. The learner is done once the standard error of
    the mean is below ``atol`` or below ``rtol * |mean|`` (after at least
    ``min_npoints`` values), or when ``max_npoints`` values are in.

    Parameters
    ----------
    function : callable
        ``seed -> float``.
    atol, rtol : float, optional
        Absolute and relative tolerance on the standard error; at least one
        is required.
    min_npoints : int, default: 10
    max_npoints : int, optional

    Attributes
    ----------
    data : dict
        Seed => value.
    """

    def __init__(self, function, atol=None, rtol=None, *, min_npoints=10, max_npoints=None):
        if atol is None and rtol is None:
            raise ValueError("At least one of `atol` and `rtol` should be set.")
        self.function = function
        self.atol = atol
        self.rtol = rtol
        self.min_npoints = max(2, min_npoints)
        self.max_npoints = max_npoints
        self.data = {}
        self.pending_points = set()
        # Running mean and sum of squared deviations.
        self._mean = 0.0
        self._m2 = 0.0

    def _free_seeds(self):
        return (s for s in count() if s not in self.data and s not in self.pending_points)

    def ask(self, n, tell_pending=True):
        if self.max_npoints is not None:
            n = min(n, self.max_npoints - self.npoints - len(self.pending_points))
        seeds = [s for s, _ in zip(self._free_seeds(), range(max(0, n)))]
        if tell_pending:
            for s in seeds:
                self.tell_pending(s)
        gain = self._gain(len(seeds))
        return seeds, [gain / len(seeds)] * len(seeds) if seeds else []

    def tell(self, seed, value):
        if seed in self.data:
            return
        self.data[seed] = value
        self.pending_points.discard(seed)
        delta = value - self._mean
        self._mean += delta / len(self.data)
        self._m2 += delta * (value - self._mean)

    def tell_pending(self, seed):
        self.pending_points.add(seed)

    def remove_unfinished(self):
        self.pending_points = set()

    @property
    def mean(self):
        return self._mean if self.data else math.nan

    @property
    def std(self):
        """Sample standard deviation."""
        n = self.npoints
        if n < 2:
            return math.inf
        return math.sqrt(max(self._m2, 0.0) / (n - 1))

    @property
    def standard_error(self):
        return self._standard_error(self.npoints)

    def _standard_error(self, n):
        if self.npoints < 2:
            return math.inf
        return self.std / math.sqrt(n)

    def _tolerance(self):
        tolerances = []
        if self.atol is not None:
            tolerances.append(self.atol)
        if self.rtol is not None and self.data:
            tolerances.append(self.rtol * abs(self._mean))
        return max(tolerances, default=0.0)

    def loss(self, real=True, *, n=None):
        """Standard error over the tolerance, for ``n`` values."""
        if n is None:
            n = self.npoints if real else self.npoints + len(self.pending_points)
        se = self._standard_error(max(n, 1))
        tol = self._tolerance()
        if se == 0:
            return 0.0
        return se / tol if tol > 0 else math.inf

    def _gain(self, n):
        now = self.loss()
        if not math.isfinite(now):
            return math.inf
        return now - self.loss(n=self.npoints + n)

    def done(self):
        if self.max_npoints is not None and self.npoints >= self.max_npoints:
            return True
        return self.npoints >= self.min_npoints and self.loss() <= 1
