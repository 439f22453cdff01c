"""Predictive block prefetching: trace mining, Markov prediction, caching and replay."""

from .config import BLOCK_SIZE, PredictorConfig, SimConfig
from .trace import BlockId, BlockRead, FileTable, ReadRecord, Trace, load_trace, parse_trace

__version__ = "0.1.0"

__all__ = [
    "BLOCK_SIZE",
    "BlockId",
    "BlockRead",
    "FileTable",
    "PredictorConfig",
    "ReadRecord",
    "SimConfig",
    "Trace",
    "load_trace",
    "parse_trace",
]
