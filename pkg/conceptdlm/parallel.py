"""
This module contains helpers to fan work out over joblib workers while
reporting progress into a tqdm bar: annotation requests, evaluation decodes
and comparison universes all go through ``parallel_map``.
"""

import contextlib
from typing import Callable, List, Sequence, TypeVar

import joblib
from joblib import Parallel, delayed
from tqdm import tqdm

T = TypeVar("T")
R = TypeVar("R")


# From https://stackoverflow.com/questions/24983493/tracking-progress-of-joblib-parallel-execution/58936697#58936697
@contextlib.contextmanager
def tqdm_joblib(tqdm_object):
    """Context manager to patch joblib to report into tqdm progress bar given as argument.

    Args:
        tqdm_object: The tqdm progress bar object to report progress to.

    Yields:
        The tqdm progress bar object.
    """

    class TqdmBatchCompletionCallback(joblib.parallel.BatchCompletionCallBack):
        def __call__(self, *args, **kwargs):
            tqdm_object.update(n=self.batch_size)
            return super().__call__(*args, **kwargs)

    old_batch_callback = joblib.parallel.BatchCompletionCallBack
    joblib.parallel.BatchCompletionCallBack = TqdmBatchCompletionCallback
    try:
        yield tqdm_object
    finally:
        joblib.parallel.BatchCompletionCallBack = old_batch_callback
        tqdm_object.close()


def parallel_map(
    fn: Callable[[T], R],
    items: Sequence[T],
    n_jobs: int = 1,
    desc: str = "",
    prefer: str = "threads",
) -> List[R]:
    """
    Apply ``fn`` to every item, in input order, with a progress bar.

    With ``n_jobs == 1`` the items are processed in a plain loop so results
    and exceptions surface exactly as in serial code.

    Args:
        fn: Function applied to each item.
        items: The work items.
        n_jobs: Number of joblib workers.
        desc: Progress bar label.
        prefer: joblib backend preference ("threads" or "processes").

    Returns:
        Results in the same order as ``items``.
    """
    if n_jobs == 1:
        return [fn(item) for item in tqdm(items, desc=desc)]
    with tqdm_joblib(tqdm(desc=desc, total=len(items))):
        return Parallel(n_jobs=n_jobs, prefer=prefer)(delayed(fn)(item) for item in items)
