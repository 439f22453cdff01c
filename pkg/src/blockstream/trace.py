"""Read-trace data model and the tab-separated trace file format.

A trace file holds one read per line::

    # comment
    #trace<TAB>run-03
    #file<TAB>assets/main.obb<TAB>52428800
    1520<TAB>assets/main.obb<TAB>8192<TAB>65536

Columns are ``timestamp_ms, path, offset, length``; extra columns are ignored.
Paths are interned to integer file ids through a :class:`FileTable` that can be
shared between traces so block ids line up across a corpus.
"""

from __future__ import annotations

import io
import logging
import os
from dataclasses import dataclass, field
from typing import Dict, Iterable, Iterator, List, NamedTuple, Optional, TextIO, Tuple

from .config import BLOCK_SIZE

log = logging.getLogger(__name__)


class TraceError(ValueError):
    """Raised for traces that cannot be used (empty, malformed, inconsistent)."""


class TraceParseError(TraceError):
    def __init__(self, lineno: int, message: str, source: str = "<trace>"):
        super().__init__(f"{source}:{lineno}: {message}")
        self.lineno = lineno
        self.source = source


class BlockId(NamedTuple):
    file_id: int
    index: int


class BlockRead(NamedTuple):
    timestamp: int
    block: BlockId


@dataclass(frozen=True)
class ReadRecord:
    timestamp: int
    file_id: int
    offset: int
    length: int

    def __post_init__(self):
        if self.timestamp < 0 or self.offset < 0 or self.length < 0:
            raise TraceError(f"negative field in {self!r}")


class FileTable:
    """Bidirectional path <-> file id map. Ids are dense and assigned on first sight."""

    def __init__(self, paths: Iterable[str] = ()):
        self._paths: List[str] = []
        self._ids: Dict[str, int] = {}
        for p in paths:
            self.intern(p)

    def intern(self, path: str) -> int:
        fid = self._ids.get(path)
        if fid is None:
            fid = len(self._paths)
            self._paths.append(path)
            self._ids[path] = fid
        return fid

    def lookup(self, path: str) -> Optional[int]:
        return self._ids.get(path)

    def path(self, file_id: int) -> str:
        return self._paths[file_id]

    @property
    def paths(self) -> Tuple[str, ...]:
        return tuple(self._paths)

    def __len__(self):
        return len(self._paths)

    def __eq__(self, other):
        return isinstance(other, FileTable) and self._paths == other._paths

    def __repr__(self):
        return f"FileTable({self._paths!r})"


@dataclass(frozen=True)
class Trace:
    trace_id: str
    records: Tuple[ReadRecord, ...]
    files: FileTable = field(compare=False, repr=False)
    manifest: Dict[int, int] = field(default_factory=dict)
    resorted: bool = field(default=False, compare=False)

    def __len__(self):
        return len(self.records)

    @property
    def duration_ms(self) -> int:
        if not self.records:
            return 0
        return self.records[-1].timestamp - self.records[0].timestamp

    def paths_equal(self, other: "Trace") -> bool:
        mine = [self.files.path(r.file_id) for r in self.records]
        theirs = [other.files.path(r.file_id) for r in other.records]
        return mine == theirs

    def block_reads(self, block_size: int = BLOCK_SIZE) -> List[BlockRead]:
        out: List[BlockRead] = []
        for rec in self.records:
            out.extend(expand_record(rec, block_size))
        return out

    def bytes_read(self) -> int:
        return sum(r.length for r in self.records)


def expand_record(record: ReadRecord, block_size: int = BLOCK_SIZE) -> List[BlockRead]:
    """Blocks touched by ``[offset, offset + length)``, ascending."""
    if record.length <= 0:
        return []
    first = record.offset // block_size
    last = (record.offset + record.length - 1) // block_size
    ts, fid = record.timestamp, record.file_id
    return [BlockRead(ts, BlockId(fid, i)) for i in range(first, last + 1)]


def _parse_int(text: str, what: str, lineno: int, source: str) -> int:
    try:
        value = int(text)
    except ValueError:
        raise TraceParseError(lineno, f"{what} is not an integer: {text!r}", source) from None
    if value < 0:
        raise TraceParseError(lineno, f"{what} is negative: {value}", source)
    return value


def parse_trace(
    stream: TextIO,
    files: Optional[FileTable] = None,
    trace_id: Optional[str] = None,
    strict: bool = False,
    source: str = "<trace>",
) -> Trace:
    """Parse the trace text format.

    Out-of-order timestamps are stably re-sorted (``Trace.resorted`` is set);
    with ``strict=True`` they are rejected instead.
    """
    files = files if files is not None else FileTable()
    records: List[ReadRecord] = []
    manifest: Dict[int, int] = {}
    header_id = None
    resorted = False
    last_ts = -1
    for lineno, raw in enumerate(stream, 1):
        line = raw.rstrip("\r\n")
        if not line.strip():
            continue
        if line.startswith("#"):
            parts = line.split("\t")
            if parts[0] == "#file":
                if len(parts) < 3:
                    raise TraceParseError(lineno, "manifest line needs path and size", source)
                size = _parse_int(parts[2], "file size", lineno, source)
                manifest[files.intern(parts[1])] = size
            elif parts[0] == "#trace" and len(parts) >= 2:
                header_id = parts[1]
            continue
        parts = line.split("\t")
        if len(parts) < 4:
            raise TraceParseError(lineno, f"expected 4 tab-separated fields, got {len(parts)}", source)
        ts = _parse_int(parts[0], "timestamp", lineno, source)
        path = parts[1]
        if not path:
            raise TraceParseError(lineno, "empty path", source)
        offset = _parse_int(parts[2], "offset", lineno, source)
        length = _parse_int(parts[3], "length", lineno, source)
        fid = files.intern(path)
        size = manifest.get(fid)
        if size is not None and offset + length > size:
            raise TraceParseError(lineno, f"read past end of {path} ({offset}+{length} > {size})", source)
        if ts < last_ts:
            if strict:
                raise TraceParseError(lineno, f"timestamp {ts} goes backwards (previous {last_ts})", source)
            resorted = True
        last_ts = max(last_ts, ts)
        records.append(ReadRecord(ts, fid, offset, length))
    if not records:
        raise TraceError(f"{source}: empty trace")
    if resorted:
        log.warning("%s: timestamps out of order, re-sorted", source)
        records.sort(key=lambda r: r.timestamp)
    tid = trace_id if trace_id is not None else (header_id if header_id is not None else source)
    return Trace(tid, tuple(records), files, manifest, resorted)


def parse_trace_text(text: str, **kwargs) -> Trace:
    return parse_trace(io.StringIO(text), **kwargs)


def load_trace(path, files: Optional[FileTable] = None, strict: bool = False) -> Trace:
    path = os.fspath(path)
    default_id = os.path.splitext(os.path.basename(path))[0]
    with open(path, encoding="utf-8") as f:
        text = f.read()
    has_header = any(line.startswith("#trace\t") for line in text.splitlines()[:50])
    return parse_trace(
        io.StringIO(text),
        files=files,
        trace_id=None if has_header else default_id,
        strict=strict,
        source=path,
    )


def iter_lines(trace: Trace) -> Iterator[str]:
    yield f"#trace\t{trace.trace_id}\n"
    for fid in sorted(trace.manifest):
        yield f"#file\t{trace.files.path(fid)}\t{trace.manifest[fid]}\n"
    for r in trace.records:
        yield f"{r.timestamp}\t{trace.files.path(r.file_id)}\t{r.offset}\t{r.length}\n"


def serialize_trace(trace: Trace, stream: TextIO) -> None:
    stream.writelines(iter_lines(trace))


def dumps_trace(trace: Trace) -> str:
    return "".join(iter_lines(trace))


def save_trace(trace: Trace, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        serialize_trace(trace, f)
