"""Incremental derived-stream computation over the store."""

from .kernels import KERNELS, kernel
from .pipeline import DEFAULT_CHUNK_PW, DistillerSpec, Materialization, Pipeline, join_nearest

__all__ = ["DEFAULT_CHUNK_PW", "DistillerSpec", "KERNELS", "Materialization", "Pipeline", "join_nearest", "kernel"]
