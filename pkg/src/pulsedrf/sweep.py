"""Ordered fan-out of independent tasks over a process pool."""

from __future__ import annotations

from concurrent.futures import FIRST_EXCEPTION, ProcessPoolExecutor, wait


class SweepError(RuntimeError):
    """A task failed; ``index`` and ``task`` identify the failing tile."""

    def __init__(self, index: int, task, cause: BaseException):
        super().__init__(f"task {index} failed: {type(cause).__name__}: {cause}")
        self.index = index
        self.task = task
        self.cause = cause


def sweep_parallel(fn, tasks, workers: int = 1) -> list:
    """Apply ``fn`` to every task and return the results in task order.

    With ``workers == 1`` the tasks run in-process. Otherwise they are spread
    over a process pool; since each result is stored at its task index, the
    output does not depend on completion order. On the first failure, pending
    tasks after it are cancelled, the rest are drained, and
    :class:`SweepError` is raised for the lowest failing index.
    """
    tasks = list(tasks)
    if workers < 1:
        raise ValueError(f"workers must be >= 1, got {workers}")
    if workers == 1 or len(tasks) <= 1:
        out = []
        for i, task in enumerate(tasks):
            try:
                out.append(fn(task))
            except Exception as exc:
                raise SweepError(i, task, exc) from exc
        return out

    results: list = [None] * len(tasks)
    with ProcessPoolExecutor(max_workers=min(workers, len(tasks))) as pool:
        futures = {pool.submit(fn, t): i for i, t in enumerate(tasks)}
        done, pending = wait(futures, return_when=FIRST_EXCEPTION)
        failed = [futures[f] for f in done if f.exception() is not None]
        if failed:
            # tasks below the failure still run, so the reported index does
            # not depend on scheduling
            first = min(failed)
            for f in pending:
                if futures[f] > first:
                    f.cancel()
            wait(pending)
            errors = {futures[f]: f.exception() for f in futures
                      if not f.cancelled() and f.exception() is not None}
            i = min(errors)
            raise SweepError(i, tasks[i], errors[i]) from errors[i]
        for f, i in futures.items():
            results[i] = f.result()
    return results
