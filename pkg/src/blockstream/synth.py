"""Synthetic scene-structured traces for desk-scale experiments.

An application is modelled as a graph of *scenes*. Entering a scene reads its
block range in one dense burst (reads spaced well under the partition gap),
then the player dwells there while a trickle of random single-block reads
("noise") arrives. The next scene is drawn from the outgoing edge
probabilities; a scene without outgoing edges ends the run.
"""

from __future__ import annotations

import json
import math
import random
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

from .config import BLOCK_SIZE
from .trace import FileTable, ReadRecord, Trace


class SynthSpecError(ValueError):
    pass


@dataclass(frozen=True)
class Scene:
    name: str
    file: str
    first_block: int
    num_blocks: int
    dwell_ms: Optional[float] = None


@dataclass(frozen=True)
class SynthSpec:
    scenes: Tuple[Scene, ...]
    edges: Dict[str, Tuple[Tuple[str, float], ...]]
    start: str
    files: Dict[str, int] = field(default_factory=dict)
    dwell_ms: float = 20_000.0
    dwell_jitter: float = 0.2
    reads_per_scene: int = 32
    read_gap_ms: int = 10
    noise_rate: float = 0.0
    coverage: float = 1.0
    speed_jitter: float = 0.0
    max_steps: int = 64
    block_size: int = BLOCK_SIZE

    def __post_init__(self):
        self.validate()

    def scene(self, name: str) -> Scene:
        for s in self.scenes:
            if s.name == name:
                return s
        raise SynthSpecError(f"unknown scene {name!r}")

    def file_sizes(self) -> Dict[str, int]:
        sizes = dict(self.files)
        for s in self.scenes:
            need = (s.first_block + s.num_blocks) * self.block_size
            if s.file in self.files:
                if need > self.files[s.file]:
                    raise SynthSpecError(f"scene {s.name!r} extends past the end of {s.file!r}")
            else:
                sizes[s.file] = max(sizes.get(s.file, 0), need)
        return sizes

    def validate(self) -> None:
        if not self.scenes:
            raise SynthSpecError("spec has no scenes")
        names = [s.name for s in self.scenes]
        if len(set(names)) != len(names):
            raise SynthSpecError("duplicate scene names")
        if self.start not in names:
            raise SynthSpecError(f"start scene {self.start!r} is not defined")
        for s in self.scenes:
            if s.num_blocks <= 0 or s.first_block < 0:
                raise SynthSpecError(f"scene {s.name!r} has an empty or negative block range")
        for src, outs in self.edges.items():
            if src not in names:
                raise SynthSpecError(f"edge from unknown scene {src!r}")
            total = 0.0
            for dst, p in outs:
                if dst not in names:
                    raise SynthSpecError(f"edge to unknown scene {dst!r}")
                if not 0 <= p <= 1:
                    raise SynthSpecError(f"edge {src}->{dst} probability {p} outside [0, 1]")
                total += p
            if outs and abs(total - 1.0) > 1e-9:
                raise SynthSpecError(f"outgoing probabilities of {src!r} sum to {total}, not 1")
        if self.reads_per_scene < 1:
            raise SynthSpecError("reads_per_scene must be >= 1")
        if not 0 < self.coverage <= 1:
            raise SynthSpecError("coverage must lie in (0, 1]")
        if self.noise_rate < 0 or self.dwell_ms < 0 or self.read_gap_ms < 0:
            raise SynthSpecError("rates and durations must be non-negative")
        self.file_sizes()

    @classmethod
    def from_dict(cls, data: dict) -> "SynthSpec":
        try:
            scenes = tuple(
                Scene(
                    name=str(s["name"]),
                    file=str(s["file"]),
                    first_block=int(s["first_block"]),
                    num_blocks=int(s["num_blocks"]),
                    dwell_ms=None if s.get("dwell_ms") is None else float(s["dwell_ms"]),
                )
                for s in data["scenes"]
            )
            edges: Dict[str, List[Tuple[str, float]]] = {}
            for e in data.get("edges", []):
                edges.setdefault(str(e["from"]), []).append((str(e["to"]), float(e["p"])))
            opts = {k: data[k] for k in (
                "dwell_ms", "dwell_jitter", "reads_per_scene", "read_gap_ms", "noise_rate",
                "coverage", "speed_jitter", "max_steps", "block_size") if k in data}
            return cls(
                scenes=scenes,
                edges={k: tuple(v) for k, v in edges.items()},
                start=str(data.get("start", scenes[0].name if scenes else "")),
                files={str(k): int(v) for k, v in data.get("files", {}).items()},
                **opts,
            )
        except (KeyError, TypeError, IndexError) as exc:
            raise SynthSpecError(f"malformed synth spec: {exc!r}") from exc

    def to_dict(self) -> dict:
        out = {
            "scenes": [
                {k: v for k, v in vars(s).items() if v is not None} for s in self.scenes
            ],
            "edges": [
                {"from": src, "to": dst, "p": p}
                for src, outs in self.edges.items() for dst, p in outs
            ],
            "start": self.start,
            "files": dict(self.files),
        }
        for k in ("dwell_ms", "dwell_jitter", "reads_per_scene", "read_gap_ms", "noise_rate",
                  "coverage", "speed_jitter", "max_steps", "block_size"):
            out[k] = getattr(self, k)
        return out

    @classmethod
    def loads(cls, text: str) -> "SynthSpec":
        try:
            return cls.from_dict(json.loads(text))
        except json.JSONDecodeError as exc:
            raise SynthSpecError(f"synth spec is not valid JSON: {exc}") from exc


def _runs(blocks: Sequence[int]) -> List[Tuple[int, int]]:
    runs: List[Tuple[int, int]] = []
    for b in blocks:
        if runs and runs[-1][0] + runs[-1][1] == b:
            runs[-1] = (runs[-1][0], runs[-1][1] + 1)
        else:
            runs.append((b, 1))
    return runs


def synth_trace(spec: SynthSpec, seed: int, files: Optional[FileTable] = None,
                trace_id: Optional[str] = None) -> Trace:
    """Generate one run. Pure function of ``(spec, seed)``."""
    rng = random.Random(seed)
    files = files if files is not None else FileTable()
    sizes = spec.file_sizes()
    fids = {path: files.intern(path) for path in sizes}
    total_blocks = [(path, math.ceil(size / spec.block_size)) for path, size in sizes.items()]
    bs = spec.block_size
    speed = math.exp(rng.gauss(0.0, spec.speed_jitter)) if spec.speed_jitter > 0 else 1.0

    records: List[ReadRecord] = []
    t = 0
    current = spec.start
    for step in range(spec.max_steps):
        scene = spec.scene(current)
        fid = fids[scene.file]
        blocks = range(scene.first_block, scene.first_block + scene.num_blocks)
        if spec.coverage < 1.0:
            keep = max(1, round(scene.num_blocks * spec.coverage))
            chosen = sorted(rng.sample(list(blocks), keep))
        else:
            chosen = list(blocks)
        per_read = max(1, math.ceil(len(chosen) / spec.reads_per_scene))
        first = True
        for start, count in _runs(chosen):
            for off in range(0, count, per_read):
                n = min(per_read, count - off)
                if not first:
                    t += rng.randint(0, spec.read_gap_ms)
                first = False
                records.append(ReadRecord(t, fid, (start + off) * bs, n * bs))

        outs = spec.edges.get(current, ())
        if not outs:
            break
        base = scene.dwell_ms if scene.dwell_ms is not None else spec.dwell_ms
        dwell = max(1.0, rng.gauss(base, base * spec.dwell_jitter)) / speed
        burst_end = t
        t_next = burst_end + int(dwell)
        if spec.noise_rate > 0:
            tn = burst_end + rng.expovariate(spec.noise_rate) * 1000.0
            while tn < t_next:
                path, nblocks = total_blocks[rng.randrange(len(total_blocks))]
                idx = rng.randrange(nblocks)
                length = min(bs, sizes[path] - idx * bs)
                records.append(ReadRecord(int(tn), fids[path], idx * bs, length))
                tn += rng.expovariate(spec.noise_rate) * 1000.0
        t = max(t_next, records[-1].timestamp)

        r = rng.random()
        acc = 0.0
        nxt = outs[-1][0]
        for dst, p in outs:
            acc += p
            if r < acc:
                nxt = dst
                break
        current = nxt

    manifest = {fids[path]: size for path, size in sizes.items()}
    return Trace(trace_id or f"synth-{seed}", tuple(records), files, manifest)


def synth_corpus(spec: SynthSpec, seeds: Sequence[int], files: Optional[FileTable] = None) -> List[Trace]:
    files = files if files is not None else FileTable()
    return [synth_trace(spec, s, files) for s in seeds]


def demo_spec(noise_rate: float = 0.05, coverage: float = 1.0) -> SynthSpec:
    """A ~50 MB two-file application with branching levels and optional side areas.

    Launch and menu load from ``core.pak``; levels live in ``levels.obb``. After
    level 1 the path forks, and some levels have a side area visited with some
    probability before moving on.
    """
    mb = 1 << 20
    scenes = [
        Scene("launch", "core.pak", 0, 256, 8_000.0),
        Scene("menu", "core.pak", 256, 96, 6_000.0),
        Scene("level1", "levels.obb", 0, 900),
        Scene("level1_side", "levels.obb", 900, 160, 12_000.0),
        Scene("level2a", "levels.obb", 1100, 1000),
        Scene("level2b", "levels.obb", 2200, 800),
        Scene("level3", "levels.obb", 3100, 1100),
        Scene("level3_side", "levels.obb", 4300, 200, 12_000.0),
        Scene("level4a", "levels.obb", 4600, 900),
        Scene("level4b", "levels.obb", 5600, 1000),
        Scene("level5", "levels.obb", 6700, 1200),
        Scene("credits", "core.pak", 400, 64),
    ]
    edges = {
        "launch": (("menu", 1.0),),
        "menu": (("level1", 1.0),),
        "level1": (("level1_side", 0.4), ("level2a", 0.35), ("level2b", 0.25)),
        "level1_side": (("level2a", 0.6), ("level2b", 0.4)),
        "level2a": (("level3", 1.0),),
        "level2b": (("level3", 1.0),),
        "level3": (("level3_side", 0.3), ("level4a", 0.4), ("level4b", 0.3)),
        "level3_side": (("level4a", 0.5), ("level4b", 0.5)),
        "level4a": (("level5", 1.0),),
        "level4b": (("level5", 1.0),),
        "level5": (("credits", 1.0),),
    }
    return SynthSpec(
        scenes=tuple(scenes),
        edges=edges,
        start="launch",
        files={"core.pak": 4 * mb, "levels.obb": 46 * mb},
        dwell_ms=25_000.0,
        dwell_jitter=0.2,
        reads_per_scene=48,
        read_gap_ms=12,
        noise_rate=noise_rate,
        coverage=coverage,
        speed_jitter=0.1,
    )
