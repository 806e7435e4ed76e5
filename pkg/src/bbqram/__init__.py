"""Bucket-brigade QRAM protocol compiler and noisy-query simulator."""

from .topology import NodeId, QuditId, Scheme, TreeSpec, path_of, enumerate_layer
from .program import MemoryTable, Program, TimeStep, validate, gate_cost, apply_op, support
from .protocols import (
    compile_nonparallel, compile_parallel, compile_high_bandwidth, compile_hybrid_parallel,
    compile_protocol, step_report,
)

__version__ = "0.1.0"
