"""Server-side content addressed by (file_id, block_index).

Layout::

    <root>/manifest.json   {"format": "blockstream-root", "block_size": 4096,
                            "files": [{"id": 0, "path": "...", "size": N}, ...]}
    <root>/data/<id>.bin   raw file content
"""

from __future__ import annotations

import json
import os
import random
import shutil
import threading
from dataclasses import dataclass
from typing import Dict, List, Mapping, Optional

from ..config import BLOCK_SIZE
from ..trace import BlockId

ROOT_FORMAT = "blockstream-root"


class BlockRootError(ValueError):
    pass


@dataclass(frozen=True)
class RootFile:
    file_id: int
    path: str
    size: int


def synthetic_content(path: str, size: int) -> bytes:
    """Deterministic pseudo-random bytes standing in for a file's content."""
    return random.Random(f"blockstream:{path}").randbytes(size)


def build_block_root(root: str, files: Mapping[int, tuple], source_dir: Optional[str] = None,
                     block_size: int = BLOCK_SIZE) -> List[RootFile]:
    """Write a block root for ``{file_id: (path, size)}``.

    With ``source_dir`` each file is copied from ``source_dir/path``; otherwise
    synthetic content of the declared size is generated.
    """
    data_dir = os.path.join(root, "data")
    os.makedirs(data_dir, exist_ok=True)
    entries = []
    for fid in sorted(files):
        path, size = files[fid]
        dest = os.path.join(data_dir, f"{fid}.bin")
        if source_dir is not None:
            src = os.path.join(source_dir, path)
            if not os.path.isfile(src):
                raise BlockRootError(f"missing source file {src}")
            shutil.copyfile(src, dest)
            size = os.path.getsize(dest)
        else:
            with open(dest, "wb") as f:
                f.write(synthetic_content(path, size))
        entries.append(RootFile(fid, path, size))
    manifest = {
        "format": ROOT_FORMAT,
        "block_size": block_size,
        "files": [{"id": e.file_id, "path": e.path, "size": e.size} for e in entries],
    }
    with open(os.path.join(root, "manifest.json"), "w", encoding="utf-8") as f:
        json.dump(manifest, f, sort_keys=True, indent=1)
        f.write("\n")
    return entries


class BlockRoot:
    """Read-only access to a block root; safe to share between threads."""

    def __init__(self, root: str):
        self.root = root
        try:
            with open(os.path.join(root, "manifest.json"), encoding="utf-8") as f:
                manifest = json.load(f)
        except (OSError, json.JSONDecodeError) as exc:
            raise BlockRootError(f"cannot read block root manifest in {root}: {exc}") from exc
        if manifest.get("format") != ROOT_FORMAT:
            raise BlockRootError(f"{root} is not a block root")
        self.block_size = int(manifest["block_size"])
        self.files: Dict[int, RootFile] = {}
        self._fds: Dict[int, int] = {}
        for e in manifest["files"]:
            rf = RootFile(int(e["id"]), e["path"], int(e["size"]))
            data = os.path.join(root, "data", f"{rf.file_id}.bin")
            if not os.path.isfile(data) or os.path.getsize(data) != rf.size:
                raise BlockRootError(f"data for file {rf.file_id} ({rf.path}) is missing or truncated")
            self.files[rf.file_id] = rf
        self._lock = threading.Lock()

    def num_blocks(self, file_id: int) -> int:
        rf = self.files.get(file_id)
        if rf is None:
            return 0
        return -(-rf.size // self.block_size)

    def has(self, block: BlockId) -> bool:
        return 0 <= block.index < self.num_blocks(block.file_id)

    def read(self, block: BlockId) -> bytes:
        """Unpadded block content; ``KeyError`` if the block does not exist."""
        if not self.has(block):
            raise KeyError(block)
        fd = self._fds.get(block.file_id)
        if fd is None:
            with self._lock:
                fd = self._fds.get(block.file_id)
                if fd is None:
                    fd = os.open(os.path.join(self.root, "data", f"{block.file_id}.bin"), os.O_RDONLY)
                    self._fds[block.file_id] = fd
        return os.pread(fd, self.block_size, block.index * self.block_size)

    def close(self) -> None:
        with self._lock:
            for fd in self._fds.values():
                os.close(fd)
            self._fds.clear()
