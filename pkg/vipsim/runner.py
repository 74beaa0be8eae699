"""Evaluate the tasks of a learner in an executor.

Frame simulation, frame selection and the Monte Carlo ensembles all run
through `BlockingRunner`, with a `concurrent.futures` executor, a
``distributed.Client`` or an ``ipyparallel.Client``.
"""

import collections
import concurrent.futures as concurrent
import logging
import os
import time
import traceback

try:
    import ipyparallel

    with_ipyparallel = True
except ModuleNotFoundError:
    with_ipyparallel = False

try:
    import distributed

    with_distributed = True
except ModuleNotFoundError:
    with_distributed = False

logger = logging.getLogger(__name__)


class BlockingRunner:
    r"""Feed the tasks of ``learner`` to ``executor`` until ``goal(learner)``.

    The constructor returns when the goal is reached.

    Parameters
    ----------
    learner : `~vipsim.learner.BaseLearner` instance
    goal : callable
        ``goal(learner) -> bool``; True stops the run.
    executor : `concurrent.futures.Executor`, `distributed.Client`,\
               or `ipyparallel.Client`, optional
        Defaults to a new `~concurrent.futures.ProcessPoolExecutor`, which
        is shut down at the end.
    ntasks : int, optional
        Tasks in flight at once; defaults to the executor's worker count.
    shutdown_executor : bool, default: False
        Also shut down an executor that was passed in.
    retries : int, default: 0
        How often a failing task is resubmitted before giving up on it.
    raise_if_retries_exceeded : bool, default: True
        Raise `RuntimeError` (chained to the task's exception) when giving
        up on a task; otherwise record it in `failed` and carry on.

    Attributes
    ----------
    attempts : collections.Counter
        Failed attempts per task.
    tracebacks : dict
        Task => formatted traceback of its last failure.
    """

    def __init__(
        self,
        learner,
        goal,
        *,
        executor=None,
        ntasks=None,
        shutdown_executor=False,
        retries=0,
        raise_if_retries_exceeded=True,
    ):
        self.learner = learner
        self.goal = goal
        self.shutdown_executor = shutdown_executor or executor is None
        self.executor = _ensure_executor(executor)
        self.ntasks = ntasks or _get_ncores(self.executor)
        self.retries = retries
        self.raise_if_retries_exceeded = raise_if_retries_exceeded

        self.attempts = collections.Counter()
        self.tracebacks = {}
        self._gave_up = set()
        self._resubmit = collections.deque()
        self._in_flight = {}

        self.start_time = time.time()
        self.end_time = None
        self._run()

    @property
    def failed(self):
        """Tasks that were given up on."""
        return set(self._gave_up)

    def elapsed_time(self):
        return (self.end_time or time.time()) - self.start_time

    def _run(self):
        if self.ntasks < 1:
            raise RuntimeError("Executor has no workers")
        try:
            while not self.goal(self.learner):
                self._submit_more()
                if not self._in_flight:
                    raise RuntimeError("the learner ran out of tasks before reaching the goal")
                finished, _ = concurrent.wait(list(self._in_flight), return_when=concurrent.FIRST_COMPLETED)
                for fut in finished:
                    self._collect(fut)
        finally:
            self._stop()

    def _submit_more(self):
        free = self.ntasks - len(self._in_flight)
        tasks = []
        while self._resubmit and len(tasks) < free:
            tasks.append(self._resubmit.popleft())
        if len(tasks) < free:
            tasks += self.learner.ask(free - len(tasks))[0]
        for task in tasks:
            self._in_flight[self.executor.submit(self.learner.function, task)] = task

    def _collect(self, fut):
        task = self._in_flight.pop(fut)
        try:
            value = fut.result()
        except Exception as e:
            self.tracebacks[task] = traceback.format_exc()
            self.attempts[task] += 1
            logger.warning("task %r failed (attempt %d): %s", task, self.attempts[task], e)
            if self.attempts[task] <= self.retries:
                self._resubmit.append(task)
                return
            self._gave_up.add(task)
            if self.raise_if_retries_exceeded:
                raise RuntimeError(
                    f"task {task!r} failed {self.attempts[task]} time(s):\n\n{self.tracebacks[task]}"
                ) from e
        else:
            self.learner.tell(task, value)

    def _stop(self):
        self.learner.remove_unfinished()
        leftover = list(self._in_flight)
        for fut in leftover:
            fut.cancel()
        if leftover:
            concurrent.wait(leftover)
        self._in_flight.clear()
        if self.shutdown_executor:
            self.executor.shutdown(wait=True)
        self.end_time = time.time()


def simple(learner, goal):
    """Evaluate tasks one by one in the current thread.

    Exceptions from ``learner.function`` propagate unchanged, which makes
    this the runner to debug with.
    """
    while not goal(learner):
        tasks, _ = learner.ask(1)
        if not tasks:
            raise RuntimeError("the learner ran out of tasks before reaching the goal")
        for task in tasks:
            learner.tell(task, learner.function(task))


def run_to_completion(learner, executor=None):
    """Evaluate every task of a finite learner and return ``learner.result()``."""
    BlockingRunner(learner, goal=lambda l: l.done(), executor=executor)
    return learner.result()


# --- Executors


class SequentialExecutor(concurrent.Executor):
    """Runs every task in the calling thread at submission."""

    def submit(self, fn, *args, **kwargs):
        fut = concurrent.Future()
        try:
            fut.set_result(fn(*args, **kwargs))
        except Exception as e:
            fut.set_exception(e)
        return fut

    def map(self, fn, *iterables, timeout=None, chunksize=1):
        return map(fn, *iterables)

    def shutdown(self, wait=True):
        pass


def executor_for(workers):
    """Executor for a ``simulation.workers`` setting: 1 runs in-process,
    0 uses one process per core, ``n > 1`` uses ``n`` processes."""
    if workers == 1:
        return SequentialExecutor()
    return concurrent.ProcessPoolExecutor(max_workers=workers or os.cpu_count())


def _ensure_executor(executor):
    if executor is None:
        return concurrent.ProcessPoolExecutor()
    if isinstance(executor, concurrent.Executor):
        return executor
    if with_ipyparallel and isinstance(executor, ipyparallel.Client):
        return executor.executor()
    if with_distributed and isinstance(executor, distributed.Client):
        return executor.get_executor()
    raise TypeError(
        f"cannot run tasks on a {type(executor).__name__}; use a concurrent.futures.Executor,"
        " distributed.Client or ipyparallel.Client"
    )


def _get_ncores(ex):
    """Number of tasks ``ex`` can run at once."""
    if isinstance(ex, SequentialExecutor):
        return 1
    if isinstance(ex, (concurrent.ProcessPoolExecutor, concurrent.ThreadPoolExecutor)):
        return ex._max_workers  # not public API!
    if with_ipyparallel and isinstance(ex, ipyparallel.client.view.ViewExecutor):
        return len(ex.view)
    if with_distributed and isinstance(ex, distributed.cfexecutor.ClientExecutor):
        return sum(ex._client.ncores().values())
    raise TypeError(f"Cannot get number of cores for {ex.__class__}")
