"""Block transfer: wire protocol, server, client fetchers and live replay."""

from .client import BlockClient, ContentMismatch, FetchError, NetworkError, SpeculativeFetcher
from .queue import FetchQueue
from .server import BlockServer
from .store import BlockRoot, BlockRootError, build_block_root, synthetic_content

__all__ = [
    "BlockClient",
    "BlockRoot",
    "BlockRootError",
    "BlockServer",
    "ContentMismatch",
    "FetchError",
    "FetchQueue",
    "NetworkError",
    "SpeculativeFetcher",
    "build_block_root",
    "synthetic_content",
]
