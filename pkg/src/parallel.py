import logging
from multiprocessing import pool
from typing import Callable, Iterable, TypeVar

logger = logging.getLogger(__name__)
logger.addHandler(logging.NullHandler())

T = TypeVar("T")
R = TypeVar("R")


def ordered_map(func: Callable[[T], R], items: Iterable[T], workers: int = 1, chunksize: int = 1) -> list[R]:
    """Map func over items, results in input order whatever the worker count.

    func and items must be picklable when workers > 1.
    """
    items = list(items)
    if workers <= 1 or len(items) <= 1:
        return [func(item) for item in items]
    n_proc = min(workers, len(items))
    logger.debug("dispatching %d tasks to %d workers", len(items), n_proc)
    with pool.Pool(n_proc) as process_pool:
        # imap keeps submission order
        return list(process_pool.imap(func, items, chunksize=chunksize))
