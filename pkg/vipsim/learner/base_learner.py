import abc


class BaseLearner(metaclass=abc.ABCMeta):
    """Source of tasks for a `~vipsim.runner.BlockingRunner`.

    The runner asks for tasks, evaluates ``function`` on them in an
    executor and tells the results back. A learner keeps track of what is
    in flight so that it never hands out the same task twice.

    Attributes
    ----------
    function : callable
        Evaluated on every task. Must be picklable for process-based
        executors.
    data : dict
        Task => result.
    pending_points : set
        Tasks handed out and not yet told.
    """

    @abc.abstractmethod
    def ask(self, n, tell_pending=True):
        """Up to ``n`` new tasks and the loss improvement expected from each."""

    @abc.abstractmethod
    def tell(self, x, y):
        """Record the result ``y`` of task ``x``."""

    def tell_many(self, xs, ys):
        for x, y in zip(xs, ys):
            self.tell(x, y)

    @abc.abstractmethod
    def tell_pending(self, x):
        """Mark ``x`` as in flight."""

    @abc.abstractmethod
    def remove_unfinished(self):
        """Forget the tasks in flight; they will be handed out again."""

    @abc.abstractmethod
    def loss(self, real=True):
        """How far the learner is from done; at most 1 once it is."""

    @abc.abstractmethod
    def done(self):
        pass

    @property
    def npoints(self):
        return len(self.data)
