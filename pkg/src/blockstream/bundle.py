"""Deployable application model: superblocks, Markov chain, resident ranking.

Stored as one JSON document (keys sorted, so output is byte-stable)::

    {"format": "blockstream-bundle", "version": 1,
     "params": {"delta_ms", "tau", "min_superblock_size", "containment", "block_size"},
     "files": [{"path", "size"}, ...],            # list index = file id
     "superblocks": [{"id", "blocks": [[file_id, first, count], ...],
                      "timestamps": {trace_id: [ms, ...]}}, ...],
     "ctmc": "<base64 of the binary chain format>",
     "resident_ranking": [[file_id, first, count], ...],
     "training": {"traces": [...], "coverage": float, "partitions": int, "unmatched": int}}
"""

from __future__ import annotations

import base64
import json
import logging
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

from . import ctmc
from .cache import rank_blocks
from .config import BLOCK_SIZE, SimConfig
from .grouping import Superblock, group_traces
from .trace import BlockId, FileTable, Trace

log = logging.getLogger(__name__)

FORMAT = "blockstream-bundle"
VERSION = 1


class BundleError(ValueError):
    pass


def encode_runs(blocks: Iterable[BlockId], keep_order: bool = False) -> List[List[int]]:
    seq = list(blocks) if keep_order else sorted(blocks)
    runs: List[List[int]] = []
    for b in seq:
        if runs and runs[-1][0] == b.file_id and runs[-1][1] + runs[-1][2] == b.index:
            runs[-1][2] += 1
        else:
            runs.append([b.file_id, b.index, 1])
    return runs


def decode_runs(runs) -> List[BlockId]:
    return [BlockId(f, i) for f, first, n in runs for i in range(first, first + n)]


@dataclass
class ModelBundle:
    params: Dict[str, float]
    files: FileTable
    manifest: Dict[int, int]
    superblocks: List[Superblock]
    model: ctmc.CtmcModel
    ranking: List[BlockId]
    training: Dict = field(default_factory=dict)

    @property
    def block_size(self) -> int:
        return int(self.params.get("block_size", BLOCK_SIZE))

    def resident_selection(self, b_initial: int) -> List[BlockId]:
        return self.ranking[: max(0, b_initial) // self.block_size]

    def stored_transitions(self) -> int:
        return self.model.num_transitions

    def to_dict(self) -> dict:
        return {
            "format": FORMAT,
            "version": VERSION,
            "params": dict(self.params),
            "files": [{"path": self.files.path(i), "size": self.manifest.get(i, 0)} for i in range(len(self.files))],
            "superblocks": [
                {
                    "id": s.superblock_id,
                    "blocks": encode_runs(s.blocks),
                    "timestamps": {k: list(v) for k, v in sorted(s.timestamps.items())},
                }
                for s in self.superblocks
            ],
            "ctmc": base64.b64encode(ctmc.serialize(self.model)).decode("ascii"),
            "resident_ranking": encode_runs(self.ranking, keep_order=True),
            "training": self.training,
        }

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as f:
            f.write(self.dumps())
            f.write("\n")

    @classmethod
    def from_dict(cls, data: dict) -> "ModelBundle":
        if not isinstance(data, dict) or data.get("format") != FORMAT:
            raise BundleError("not a model bundle")
        if data.get("version") != VERSION:
            raise BundleError(f"unsupported bundle version {data.get('version')!r}")
        try:
            files = FileTable(f["path"] for f in data["files"])
            manifest = {i: int(f["size"]) for i, f in enumerate(data["files"])}
            superblocks = [
                Superblock(int(s["id"]), frozenset(decode_runs(s["blocks"])),
                           {k: tuple(v) for k, v in s["timestamps"].items()})
                for s in data["superblocks"]
            ]
            model = ctmc.deserialize(base64.b64decode(data["ctmc"]))
            ranking = decode_runs(data["resident_ranking"])
        except (KeyError, TypeError, ValueError) as exc:
            raise BundleError(f"malformed bundle: {exc}") from exc
        if [s.superblock_id for s in superblocks] != list(range(len(superblocks))):
            raise BundleError("superblock ids are not dense")
        return cls(dict(data["params"]), files, manifest, superblocks, model, ranking, data.get("training", {}))

    @classmethod
    def loads(cls, text: str) -> "ModelBundle":
        try:
            return cls.from_dict(json.loads(text))
        except json.JSONDecodeError as exc:
            raise BundleError(f"bundle is not valid JSON: {exc}") from exc

    @classmethod
    def load(cls, path) -> "ModelBundle":
        with open(path, encoding="utf-8") as f:
            return cls.loads(f.read())


def train_bundle(traces: Sequence[Trace], config: Optional[SimConfig] = None) -> ModelBundle:
    """Group the corpus, fit the chain and rank blocks for the resident set."""
    if not traces:
        raise BundleError("need at least one training trace")
    config = config or SimConfig()
    files = traces[0].files
    if any(t.files is not files for t in traces):
        raise BundleError("training traces must share one FileTable")
    bs = config.block_size
    grouped = group_traces(traces, config.delta_ms, config.tau, config.min_superblock_size,
                           config.containment, block_size=bs)
    sequences = [s for s in grouped.sequences if s.steps]
    if not sequences:
        raise BundleError("no training trace maps onto any superblock")
    model = ctmc.train(sequences, num_states=len(grouped.superblocks))
    declared: Dict[int, int] = {}
    extent: Dict[int, int] = {}
    for t in traces:
        for fid, size in t.manifest.items():
            declared[fid] = max(declared.get(fid, 0), size)
        for r in t.records:
            extent[r.file_id] = max(extent.get(r.file_id, 0), r.offset + r.length)
    manifest = {fid: declared.get(fid, extent.get(fid, 0)) for fid in sorted(set(declared) | set(extent))}
    params = {
        "delta_ms": config.delta_ms,
        "tau": config.tau,
        "min_superblock_size": config.min_superblock_size,
        "containment": config.containment,
        "block_size": bs,
    }
    training = {
        "traces": [t.trace_id for t in traces],
        "partitions": sum(s.partitions for s in grouped.sequences),
        "unmatched": sum(s.unmatched for s in grouped.sequences),
        "coverage": grouped.coverage,
    }
    log.info("trained %d superblocks, %d transitions, coverage %.3f",
             len(grouped.superblocks), model.num_transitions, grouped.coverage)
    return ModelBundle(params, files, manifest, grouped.superblocks, model, rank_blocks(traces, bs), training)
