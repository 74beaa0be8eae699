from itertools import islice

from sortedcontainers import SortedDict, SortedSet

from vipsim.learner.base_learner import BaseLearner


class _IndexedTask:
    """``(index, task) -> function(task)``, picklable unlike a lambda."""

    def __init__(self, function):
        self.function = function

    def __call__(self, indexed_task):
        _, task = indexed_task
        return self.function(task)

    def __getstate__(self):
        return self.function

    def __setstate__(self, function):
        self.function = function


class SequenceLearner(BaseLearner):
    """Evaluate ``function`` once on every element of ``sequence``.

    Frame production hands it ``(ccd_id, frame_index)`` pairs, frame
    selection hands it file names and the closure ensembles hand it trial
    seeds. Tasks go out in sequence order and `result` returns the values
    in that order whatever order the executor finished them in, so serial
    and parallel runs give the same output.

    Tasks are ``(index, element)`` pairs so that equal elements stay
    distinct.
    """

    def __init__(self, function, sequence):
        self.sequence = list(sequence)
        self.function = _IndexedTask(function)
        self.data = SortedDict()
        self.pending_points = set()
        self._queue = SortedSet(range(len(self.sequence)))

    def ask(self, n, tell_pending=True):
        tasks = [(i, self.sequence[i]) for i in islice(self._queue, max(0, n))]
        if tell_pending:
            for task in tasks:
                self.tell_pending(task)
        return tasks, [1 / len(self.sequence)] * len(tasks) if tasks else []

    def tell(self, task, value):
        index, _ = task
        self.data[index] = value
        self.pending_points.discard(index)
        self._queue.discard(index)

    def tell_pending(self, task):
        index, _ = task
        self.pending_points.add(index)
        self._queue.discard(index)

    def remove_unfinished(self):
        self._queue.update(self.pending_points)
        self.pending_points = set()

    def loss(self, real=True):
        if not self.sequence:
            return 0
        finished = self.npoints if real else self.npoints + len(self.pending_points)
        return 1 - finished / len(self.sequence)

    def done(self):
        return self.npoints == len(self.sequence)

    def result(self):
        """The values, in sequence order."""
        if not self.done():
            raise RuntimeError(
                f"{len(self.sequence) - self.npoints} of {len(self.sequence)} tasks are unfinished"
            )
        return list(self.data.values())
