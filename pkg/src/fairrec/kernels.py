"""Backend selection for the propagation kernels.

The compiled extension is used when it imports; ``FAIRREC_PURE_PYTHON=1``
forces the numpy fallback. ``FAIRREC_THREADS`` caps the worker count of the
compiled backend.
"""
import os

import numpy as np

from . import _pykernels

try:
    from . import _ckernels
except ImportError:  # extension not built
    _ckernels = None

__all__ = [
    "BACKEND",
    "available_backends",
    "gather_interests",
    "neighbor_sum",
    "select_aggregate",
    "scatter_selected",
    "use_backend",
]


def _threads():
    raw = os.environ.get("FAIRREC_THREADS", "")
    try:
        return max(1, int(raw))
    except ValueError:
        return os.cpu_count() or 1


def available_backends():
    return ["cython", "python"] if _ckernels is not None else ["python"]


class _Compiled:
    name = "cython"

    def __init__(self, threads):
        self.threads = threads

    def gather_interests(self, indptr, indices, att, x):
        return _ckernels.gather_interests(
            indptr, indices, np.ascontiguousarray(att), np.ascontiguousarray(x),
            self.threads,
        )

    def neighbor_sum(self, indptr, indices, t):
        return _ckernels.neighbor_sum(indptr, indices, np.ascontiguousarray(t), self.threads)

    def select_aggregate(self, indptr, indices, weights, ev, x):
        return _ckernels.select_aggregate(
            indptr, indices, weights, np.ascontiguousarray(ev),
            np.ascontiguousarray(x), self.threads,
        )

    def scatter_selected(self, indptr, indices, rev, weights, mid, dy, k):
        return _ckernels.scatter_selected(
            indptr, indices, rev, weights, mid, np.ascontiguousarray(dy), k,
            self.threads,
        )


class _Python:
    name = "python"
    gather_interests = staticmethod(_pykernels.gather_interests)
    neighbor_sum = staticmethod(_pykernels.neighbor_sum)
    select_aggregate = staticmethod(_pykernels.select_aggregate)
    scatter_selected = staticmethod(_pykernels.scatter_selected)


def _make(name):
    if name == "cython":
        if _ckernels is None:
            raise RuntimeError("compiled kernels are not built")
        return _Compiled(_threads())
    if name == "python":
        return _Python()
    raise ValueError(f"unknown backend {name!r}")


_impl = _make(
    "python"
    if _ckernels is None or os.environ.get("FAIRREC_PURE_PYTHON", "") not in ("", "0")
    else "cython"
)
BACKEND = _impl.name


def use_backend(name):
    """Switch the active backend; returns the previous backend name."""
    global _impl, BACKEND
    previous = BACKEND
    _impl = _make(name)
    BACKEND = _impl.name
    return previous


def gather_interests(indptr, indices, att, x):
    return _impl.gather_interests(indptr, indices, att, x)


def neighbor_sum(indptr, indices, t):
    return _impl.neighbor_sum(indptr, indices, t)


def select_aggregate(indptr, indices, weights, ev, x):
    return _impl.select_aggregate(indptr, indices, weights, ev, x)


def scatter_selected(indptr, indices, rev, weights, mid, dy, k):
    return _impl.scatter_selected(indptr, indices, rev, weights, mid, dy, k)
