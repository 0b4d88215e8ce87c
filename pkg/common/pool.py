import typing as t
from concurrent.futures import ThreadPoolExecutor

from .config import CONFIG

T = t.TypeVar("T")


def make_chunks(n_items: int, parallelism: int) -> t.List[range]:
    """Split range(n_items) into at most `parallelism` contiguous chunks."""
    parallelism = max(1, min(parallelism, n_items))
    chunk_size = -(-n_items // parallelism)
    return [range(i, min(i + chunk_size, n_items)) for i in range(0, n_items, chunk_size)]


class WorkerPool:
    """
    Runs independent chunks on threads and hands the results back in chunk order.
    Callers write into disjoint slices, so the outcome never depends on the schedule.
    """
    def __init__(self, threads: t.Optional[int] = None):
        self.threads = threads if threads is not None else CONFIG.threads

    def map_chunks(self, fn: t.Callable[[range], T], n_items: int) -> t.List[T]:
        chunks = make_chunks(n_items, self.threads)
        if len(chunks) <= 1:
            return [fn(chunk) for chunk in chunks]
        with ThreadPoolExecutor(max_workers=len(chunks)) as executor:
            return list(executor.map(fn, chunks))

    def map(self, fn: t.Callable[..., T], items: t.Sequence[t.Any]) -> t.List[T]:
        """Evaluate fn on every item concurrently; output order follows input order."""
        if self.threads <= 1 or len(items) <= 1:
            return [fn(item) for item in items]
        with ThreadPoolExecutor(max_workers=min(self.threads, len(items))) as executor:
            return list(executor.map(fn, items))
