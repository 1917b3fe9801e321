import contextlib
import logging
import os
from typing import Iterator, Optional

import torch

logger = logging.getLogger(__name__)


def available_cores() -> int:
    return len(os.sched_getaffinity(0)) if hasattr(os, "sched_getaffinity") else (os.cpu_count() or 1)


def resolve_threads(threads: Optional[int]) -> int:
    if threads is None:
        return available_cores()
    if threads < 1:
        raise ValueError(f"number of threads has to be positive, but got {threads}")
    return threads


@contextlib.contextmanager
def torch_threads(num_threads: int = 1) -> Iterator[None]:
    """Temporarily sets the number of torch intra-op threads.

    A single thread keeps the float accumulation order of all kernels fixed, so results do
    not depend on the machine or on the --threads setting.
    """
    previous = torch.get_num_threads()
    torch.set_num_threads(num_threads)
    try:
        yield
    finally:
        torch.set_num_threads(previous)
