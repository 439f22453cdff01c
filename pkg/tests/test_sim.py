import pytest

from blockstream.config import SimConfig
from blockstream.sim import (
    SWEEP_HEADER,
    SimulationError,
    aggregate,
    block_cost_ms,
    simulate,
    sweep,
    sweep_csv,
    urgent_cost_ms,
)
from blockstream.trace import FileTable, ReadRecord, Trace

NO_PREFETCH = dict(p_download=2.0)


def naive_delay(trace, rtt, t_block, bs=4096):
    """Every first read of a block misses; each record stalls once for its misses."""
    seen, total = set(), 0.0
    for r in trace.records:
        first, last = r.offset // bs, (r.offset + r.length - 1) // bs
        new = [i for i in range(first, last + 1) if (r.file_id, i) not in seen] if r.length else []
        seen.update((r.file_id, i) for i in new)
        if new:
            total += rtt + len(new) * t_block
    return total


def test_block_cost_arithmetic():
    cfg = SimConfig(rtt_ms=100, bandwidth_bps=17.4e6)
    assert block_cost_ms(cfg) == pytest.approx(4096 * 8 / 17.4e6 * 1000)
    assert urgent_cost_ms(cfg) == pytest.approx(101.883, abs=1e-3)
    assert urgent_cost_ms(cfg, 3) == pytest.approx(100 + 3 * 1.8832, abs=1e-3)


def test_no_prefetch_matches_closed_form(corpus, bundle):
    cfg = SimConfig(**NO_PREFETCH)
    for t in corpus[3]:
        rep = simulate(bundle, t, cfg)
        want = naive_delay(t, cfg.rtt_ms, block_cost_ms(cfg))
        assert rep.total_delay_ms == pytest.approx(want, rel=1e-9)
        assert rep.speculative_bytes == 0


def test_zero_lookahead_never_prefetches(corpus, bundle):
    rep = simulate(bundle, corpus[3][0], SimConfig(lookahead_s=0.0))
    assert rep.speculative_bytes == 0


def test_free_network_has_no_delay(corpus, bundle):
    rep = simulate(bundle, corpus[3][0], SimConfig(rtt_ms=0, bandwidth_bps=float("inf")))
    assert rep.total_delay_ms == 0
    assert rep.misses > 0


def test_accounting_invariants(corpus, bundle):
    for b_initial in (0, 2 << 20):
        for t in corpus[3]:
            r = simulate(bundle, t, SimConfig(b_initial_bytes=b_initial, temp_limit_bytes=8 << 20))
            assert r.accesses == r.resident_hits + r.temp_hits + r.misses
            assert r.downloaded_bytes == r.speculative_bytes + r.urgent_bytes
            assert r.urgent_bytes == r.miss_bytes == r.misses * 4096
            assert 0 <= r.false_positive_bytes <= r.speculative_bytes
            assert 0 <= r.hit_rate <= 1
            assert r.stalls <= r.misses
            if b_initial == 0:
                assert r.resident_hits == 0


def test_full_resident_set_misses_only_unseen_blocks(corpus, bundle):
    trained = {r.block for t in corpus[2] for r in t.block_reads()}
    cfg = SimConfig(b_initial_bytes=10 << 30)
    assert simulate(bundle, corpus[2][0], cfg).misses == 0
    t = corpus[3][0]
    unseen = {r.block for r in t.block_reads()} - trained
    assert simulate(bundle, t, cfg).misses == len(unseen)


def test_deterministic(corpus, bundle):
    cfg = SimConfig(b_initial_bytes=1 << 20)
    a = simulate(bundle, corpus[3][1], cfg)
    b = simulate(bundle, corpus[3][1], cfg)
    assert a.to_json() == b.to_json()


def test_manifest_mismatch_rejected(bundle):
    files = FileTable(["not/in/model.bin"])
    t = Trace("x", (ReadRecord(0, 0, 0, 10),), files, {0: 10})
    with pytest.raises(SimulationError, match="manifest"):
        simulate(bundle, t, SimConfig())
    with pytest.raises(SimulationError, match="block size"):
        simulate(bundle, t, SimConfig(block_size=8192))


def test_size_mismatch_rejected(corpus, bundle):
    t = corpus[3][0]
    fid = next(iter(t.manifest))
    bad = Trace("x", t.records[:1], t.files, {fid: t.manifest[fid] + 1})
    with pytest.raises(SimulationError, match="size mismatch"):
        simulate(bundle, bad, SimConfig())


def test_aggregate_sums_runs(corpus, bundle):
    reps = [simulate(bundle, t, SimConfig()) for t in corpus[3]]
    agg = aggregate(reps)
    assert agg.total_delay_ms == pytest.approx(sum(r.total_delay_ms for r in reps))
    assert agg.accesses == sum(r.accesses for r in reps)
    assert len(agg.runs) == 2


def test_sweep_csv(corpus, bundle):
    res = sweep(corpus[2], corpus[3], SimConfig(), {"bandwidth_bps": [10.8e6, 13.95e6, 17.4e6]}, bundle=bundle)
    lines = sweep_csv(res).splitlines()
    assert lines[0] == ",".join(SWEEP_HEADER)
    assert len(lines) == 4
    with pytest.raises(ValueError):
        sweep(corpus[2], corpus[3], SimConfig(), {})


def test_baseline_simulation_runs(corpus, bundle):
    from blockstream.baseline import train_pair_model

    pm = train_pair_model(corpus[2], 60_000)
    r = simulate(bundle, corpus[3][0], SimConfig(), pair_model=pm)
    assert r.accesses == r.resident_hits + r.temp_hits + r.misses
    assert r.speculative_bytes > 0
