import os
import random
import threading

import pytest

from blockstream.cache import (
    BlockStore,
    CacheExhausted,
    CacheIOError,
    choose_resident_set,
    permanent_footprint,
    rank_blocks,
    storage_saving,
)
from blockstream.trace import BlockId, FileTable, ReadRecord, Trace

BS = 4096


def blk(i):
    return BlockId(0, i)


def data(i):
    return bytes([i % 256]) * BS


class RefCache:
    """Explicit recency list: index 0 is the next eviction victim."""

    def __init__(self, capacity):
        self.capacity = capacity
        self.resident = set()
        self.recency = []
        self.pins = []  # (block, pinned_at), oldest pin first

    def present(self, b):
        return b in self.resident or b in self.recency or any(p == b for p, _ in self.pins)

    def _unpin(self, b):
        self.pins = [(p, t) for p, t in self.pins if p != b]

    def insert(self, b, pinned, now):
        if b in self.resident:
            return []
        if self.present(b):
            if pinned:
                if b in self.recency:
                    self.recency.remove(b)
                self._unpin(b)
                self.pins.append((b, now))
            elif b in self.recency:
                self.recency.remove(b)
                self.recency.append(b)
            return []
        if self.capacity is not None:
            if len(self.pins) + 1 > self.capacity:
                raise CacheExhausted("full")
            evicted = []
            while len(self.recency) + len(self.pins) + 1 > self.capacity:
                evicted.append(self.recency.pop(0))
        else:
            evicted = []
        if pinned:
            self.pins.append((b, now))
        else:
            self.recency.append(b)
        return evicted

    def read(self, b):
        if b in self.resident:
            return "resident"
        if b in self.recency:
            self.recency.remove(b)
            self.recency.append(b)
            return "temp"
        if any(p == b for p, _ in self.pins):
            self._unpin(b)
            self.recency.append(b)
            return "temp"
        return None

    def pin(self, b, now):
        if b in self.resident or not self.present(b):
            return False
        if b in self.recency:
            self.recency.remove(b)
        self._unpin(b)
        self.pins.append((b, now))
        return True

    def unpin_stale(self, age, now):
        stale = [p for p, t in self.pins if now - t > age]
        self.pins = [(p, t) for p, t in self.pins if now - t <= age]
        self.recency = stale + self.recency
        return len(stale)

    def add_resident(self, b):
        if b in self.recency:
            self.recency.remove(b)
        self._unpin(b)
        self.resident.add(b)


def run_random_ops(seed, n_ops, capacity, with_data, directory=None):
    rng = random.Random(seed)
    limit = None if capacity is None else capacity * BS
    store = BlockStore(directory, temp_limit=limit, keep_data=with_data)
    ref = RefCache(capacity)
    now = 0
    for _ in range(n_ops):
        now += rng.randint(0, 50)
        b = blk(rng.randrange(24))
        op = rng.random()
        if op < 0.45:
            pinned = rng.random() < 0.3
            try:
                want = ref.insert(b, pinned, now)
            except CacheExhausted:
                with pytest.raises(CacheExhausted):
                    store.insert(b, data(b.index) if with_data else None, pinned=pinned, now=now)
                continue
            got = store.insert(b, data(b.index) if with_data else None, pinned=pinned, now=now)
            assert got == want
            assert not (set(got) & ref.resident)
        elif op < 0.85:
            want = ref.read(b)
            hit = store.read(b)
            if want is None:
                assert hit is None
            else:
                assert hit is not None and hit.resident == (want == "resident")
                if with_data:
                    assert hit.data == data(b.index)
        elif op < 0.93:
            assert store.pin(b, now) == ref.pin(b, now)
        elif op < 0.98:
            assert store.unpin_stale(200, now) == ref.unpin_stale(200, now)
        else:
            store.add_resident(b, data(b.index) if with_data else None)
            ref.add_resident(b)
        assert list(store.lru) == ref.recency
        assert list(store.pinned) == [p for p, _ in ref.pins]
        assert store.resident == ref.resident
        if limit is not None:
            assert store.temp_blocks * BS <= limit
    return store


def test_lru_examples():
    c = BlockStore(temp_limit=2 * BS, keep_data=False)
    c.insert(blk(1))
    c.insert(blk(2))
    c.read(blk(1))
    assert c.insert(blk(3)) == [blk(2)]
    d = BlockStore(temp_limit=2 * BS, keep_data=False)
    d.insert(blk(1))
    d.insert(blk(2), pinned=True)
    d.read(blk(1))
    assert d.insert(blk(3)) == [blk(1)]


def test_unlimited_never_evicts():
    c = BlockStore(keep_data=False)
    for i in range(1000):
        assert c.insert(blk(i)) == []
    assert c.temp_blocks == 1000


def test_miss_leaves_state_unchanged():
    c = BlockStore(keep_data=False)
    c.insert(blk(1))
    before = (list(c.lru), dict(c.pinned))
    assert c.read(blk(9)) is None
    assert (list(c.lru), dict(c.pinned)) == before
    assert c.stats.misses == 1 and c.stats.miss_bytes == BS


def test_inserted_then_evicted_is_miss():
    c = BlockStore(temp_limit=BS, keep_data=False)
    c.insert(blk(1))
    c.insert(blk(2))
    assert c.read(blk(1)) is None


def test_resident_never_evicted():
    c = BlockStore(temp_limit=BS, keep_data=False)
    c.add_resident(blk(0))
    for i in range(1, 10):
        assert blk(0) not in c.insert(blk(i))
    assert c.read(blk(0)).resident


def test_exhausted_leaves_state():
    c = BlockStore(temp_limit=2 * BS, keep_data=False)
    c.insert(blk(1), pinned=True, now=0)
    c.insert(blk(2), pinned=True, now=0)
    with pytest.raises(CacheExhausted):
        c.insert(blk(3), now=1)
    assert list(c.pinned) == [blk(1), blk(2)] and blk(3) not in c


def test_unpin_stale_lifecycle():
    c = BlockStore(keep_data=False)
    assert c.unpin_stale(100, now=0) == 0
    c.insert(blk(1), pinned=True, now=0)
    c.insert(blk(2), pinned=True, now=0)
    c.read(blk(2))
    assert not c.is_pinned(blk(2))
    assert c.unpin_stale(100, now=500) == 1
    assert list(c.lru) == [blk(1), blk(2)]


def test_payload_size_checked():
    c = BlockStore()
    with pytest.raises(ValueError):
        c.insert(blk(1), b"short")


def test_matches_reference_in_memory():
    for seed in range(5):
        run_random_ops(seed, 2500, capacity=6, with_data=True)


def test_matches_reference_unlimited():
    run_random_ops(77, 2000, capacity=None, with_data=False)


def test_container_persists_and_replays(tmp_path):
    d = str(tmp_path / "c")
    store = run_random_ops(3, 800, capacity=5, with_data=True, directory=d)
    contents = {b: store.read(b) for b in list(store._slots)}
    resident = set(store.resident)
    store.close()
    again = BlockStore(d, temp_limit=5 * BS)
    assert set(again._slots) == set(contents)
    assert again.resident == resident
    for b, hit in contents.items():
        assert again.read(b).data == hit.data
    again.close()


def test_torn_journal_tail_ignored(tmp_path):
    d = str(tmp_path / "c")
    with BlockStore(d) as s:
        s.insert(blk(1), data(1))
        s.insert(blk(2), data(2))
    with open(os.path.join(d, "blocks.jnl"), "ab") as f:
        f.write(b"\x01\x00\x00")
    with BlockStore(d) as s:
        assert s.read(blk(2)).data == data(2)


def test_bad_container_header(tmp_path):
    d = tmp_path / "c"
    d.mkdir()
    (d / "blocks.dat").write_bytes(b"JUNKJUNKJUNKJUNK")
    with pytest.raises(CacheIOError):
        BlockStore(str(d))


def test_concurrent_writer_and_reader():
    c = BlockStore(temp_limit=64 * BS)
    errors = []

    def writer():
        try:
            for i in range(3000):
                c.insert(blk(i % 200), data(i % 200), pinned=i % 3 == 0, now=i)
                if i % 50 == 0:
                    c.unpin_stale(10, now=i)
        except CacheExhausted:
            pass
        except Exception as exc:  # pragma: no cover
            errors.append(exc)

    def reader():
        for i in range(3000):
            hit = c.read(blk(i % 200))
            if hit is not None and hit.data != data(i % 200):
                errors.append(AssertionError("corrupt payload"))

    threads = [threading.Thread(target=writer), threading.Thread(target=reader)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert not errors
    assert c.temp_blocks <= 64


def trace(tid, reads, files):
    fid = files.intern("f")
    return Trace(tid, tuple(ReadRecord(ts, fid, i * BS, BS) for ts, i in reads), files)


def test_resident_ranking_examples():
    files = FileTable()
    ts = [trace("a", [(0, 0), (600_000, 1)], files), trace("b", [(0, 0), (600_000, 1)], files)]
    assert choose_resident_set(ts, 0).selection == ()
    assert choose_resident_set(ts, BS).selection == (blk(0),)
    assert set(choose_resident_set(ts, 100 * BS).selection) == {blk(0), blk(1)}
    with pytest.raises(ValueError):
        choose_resident_set(ts, -1)


def test_launch_window_blocks_first():
    files = FileTable()
    # block 5 is read at 1.5 s in one run only, block 3 at 3 s in both
    ts = [trace("a", [(0, 0), (1500, 5), (3000, 3)], files), trace("b", [(0, 0), (3000, 3), (9000, 5)], files)]
    assert rank_blocks(ts)[:3] == [blk(0), blk(5), blk(3)]


def test_storage_formula():
    assert permanent_footprint(100, 46.22) == pytest.approx(146.22)
    assert storage_saving(146.22, 1139.07) == pytest.approx(0.87163, abs=1e-5)
    with pytest.raises(ValueError):
        storage_saving(1, 0)
