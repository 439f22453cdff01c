import json

import pytest

from blockstream.synth import Scene, SynthSpec, SynthSpecError, demo_spec, synth_trace
from blockstream.trace import dumps_trace


def fork_spec(**kw):
    scenes = (Scene("a", "f", 0, 8), Scene("b", "f", 8, 8), Scene("c", "f", 16, 8))
    return SynthSpec(scenes=scenes, edges={"a": (("b", 0.5), ("c", 0.5))}, start="a", dwell_ms=1000.0, **kw)


def test_same_seed_same_trace():
    spec = demo_spec()
    assert dumps_trace(synth_trace(spec, 7)) == dumps_trace(synth_trace(spec, 7))
    assert dumps_trace(synth_trace(spec, 7)) != dumps_trace(synth_trace(spec, 8))


def test_branch_frequencies_follow_edge_probabilities():
    spec = fork_spec()
    hits_b = 0
    for seed in range(1000):
        t = synth_trace(spec, seed)
        last = t.records[-1]
        hits_b += last.offset // 4096 < 16
    assert abs(hits_b / 1000 - 0.5) <= 0.05


def test_trace_is_sorted_and_in_bounds():
    spec = demo_spec(noise_rate=0.5)
    t = synth_trace(spec, 3)
    ts = [r.timestamp for r in t.records]
    assert ts == sorted(ts)
    for r in t.records:
        assert r.offset + r.length <= t.manifest[r.file_id]


def test_every_scene_block_is_read_with_full_coverage():
    spec = fork_spec()
    t = synth_trace(spec, 1)
    blocks = {b.block.index for b in t.block_reads()}
    assert set(range(8)) <= blocks


def test_partial_coverage_reads_fewer_blocks():
    full = synth_trace(fork_spec(), 1)
    part = synth_trace(fork_spec(coverage=0.5), 1)
    assert len(part.block_reads()) < len(full.block_reads())


@pytest.mark.parametrize("edges", [
    {"a": (("b", 0.4), ("c", 0.4))},
    {"a": (("zz", 1.0),)},
    {"q": (("b", 1.0),)},
])
def test_invalid_edges_rejected(edges):
    scenes = (Scene("a", "f", 0, 8), Scene("b", "f", 8, 8), Scene("c", "f", 16, 8))
    with pytest.raises(SynthSpecError):
        SynthSpec(scenes=scenes, edges=edges, start="a")


def test_scene_past_declared_file_rejected():
    with pytest.raises(SynthSpecError):
        SynthSpec(scenes=(Scene("a", "f", 0, 8),), edges={}, start="a", files={"f": 4096})


def test_spec_json_roundtrip():
    spec = demo_spec()
    again = SynthSpec.loads(json.dumps(spec.to_dict()))
    assert again == spec


def test_malformed_json_spec():
    with pytest.raises(SynthSpecError):
        SynthSpec.loads("{")
    with pytest.raises(SynthSpecError):
        SynthSpec.loads('{"scenes": [{"name": "a"}]}')


def test_demo_spec_size_is_about_50mb():
    total = sum(demo_spec().file_sizes().values())
    assert total == 50 * (1 << 20)
