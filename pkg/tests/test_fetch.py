import socket
import struct
import threading
import time
import zlib

import pytest

from blockstream.cache import BlockStore
from blockstream.fetch import (
    BlockClient,
    BlockRoot,
    BlockServer,
    ContentMismatch,
    FetchQueue,
    NetworkError,
    SpeculativeFetcher,
    build_block_root,
    synthetic_content,
)
from blockstream.fetch import protocol as P
from blockstream.trace import BlockId

BS = 4096
FILES = {0: ("core.pak", 40 * BS + 100), 1: ("maps/a.pak", 300 * BS)}


@pytest.fixture(scope="module")
def root(tmp_path_factory):
    d = str(tmp_path_factory.mktemp("root"))
    build_block_root(d, FILES)
    return d


def expected(fid, index):
    path, size = FILES[fid]
    raw = synthetic_content(path, size)[index * BS:(index + 1) * BS]
    return raw + bytes(BS - len(raw))


def free_port():
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        return s.getsockname()[1]


# -- protocol --------------------------------------------------------------


def test_request_roundtrip():
    data = P.encode_request(7, 1, [(5, 3), (20, 1)], urgent=True)
    length, ftype, rid = struct.unpack(">IBI", data[:9])
    assert length == len(data) - 4 and ftype == P.URGENT_REQ and rid == 7
    req = P.decode_request(data[9:])
    assert req.file_id == 1 and list(req.ranges) == [(5, 3), (20, 1)]
    assert req.blocks() == [BlockId(1, 5), BlockId(1, 6), BlockId(1, 7), BlockId(1, 20)]


def test_response_roundtrip_and_crc():
    blocks = [(BlockId(0, 1), b"a" * BS), (BlockId(2, 9), P.pad(b"tail", BS))]
    data = P.encode_response(3, blocks)
    body = data[9:]
    assert P.decode_response(body, BS) == (3, blocks)
    # layout check: first block header carries the CRC of its payload
    fid, idx, crc = struct.unpack(">III", body[8:20])
    assert (fid, idx, crc) == (0, 1, zlib.crc32(b"a" * BS))
    bad = bytearray(body)
    bad[30] ^= 0xFF
    with pytest.raises(P.ProtocolError, match="checksum"):
        P.decode_response(bytes(bad), BS)
    with pytest.raises(P.ProtocolError):
        P.decode_response(body[:-1], BS)


def test_error_roundtrip():
    e = P.decode_error(P.encode_error(4, P.NOT_FOUND, "gone")[9:])
    assert (e.request_id, e.code, e.message) == (4, P.NOT_FOUND, "gone")


def test_coalesce():
    bs = [BlockId(0, 7), BlockId(0, 5), BlockId(0, 6), BlockId(1, 2), BlockId(0, 9)]
    assert P.coalesce(sorted(bs)) == [(0, [(5, 3), (9, 1)]), (1, [(2, 1)])]
    assert P.coalesce([]) == []


def test_malformed_request_rejected():
    with pytest.raises(P.ProtocolError):
        P.decode_request(b"\x00\x00")
    with pytest.raises(P.ProtocolError):
        P.decode_request(struct.pack(">II", 0, 2) + struct.pack(">II", 0, 1))


# -- store -----------------------------------------------------------------


def test_block_root_reads(root):
    r = BlockRoot(root)
    assert r.num_blocks(0) == 41
    assert r.read(BlockId(0, 3)) == expected(0, 3)
    assert len(r.read(BlockId(0, 40))) == 100
    assert not r.has(BlockId(0, 41)) and not r.has(BlockId(9, 0))
    with pytest.raises(KeyError):
        r.read(BlockId(0, 41))
    r.close()


# -- queue -----------------------------------------------------------------


def test_queue_drops_oldest_when_full():
    dropped = []
    q = FetchQueue(capacity=3, on_drop=dropped.append)
    assert q.put([BlockId(0, i) for i in range(5)], issued_at=1.0) == 5
    assert q.dropped == 2 and dropped == [BlockId(0, 0), BlockId(0, 1)]
    assert q.snapshot() == [BlockId(0, 2), BlockId(0, 3), BlockId(0, 4)]
    assert q.put([BlockId(0, 3)]) == 0


def test_queue_cancel_and_batch():
    q = FetchQueue(capacity=10)
    q.put([BlockId(0, i) for i in range(4)], issued_at=5.0)
    assert q.cancel(BlockId(0, 1)) and not q.cancel(BlockId(0, 1))
    assert BlockId(0, 1) not in q
    assert q.get_batch(2) == [(BlockId(0, 0), 5.0), (BlockId(0, 2), 5.0)]
    assert len(q) == 1
    q.close()
    assert q.get_batch(5) == [(BlockId(0, 3), 5.0)]
    assert q.get_batch(5, timeout=0.01) == []
    with pytest.raises(RuntimeError):
        q.put([BlockId(0, 9)])


# -- client/server ---------------------------------------------------------


def test_single_block_and_range(root):
    with BlockServer(root) as srv:
        c = BlockClient(srv.address)
        got = c.fetch_urgent([BlockId(0, 2)])
        assert got == {BlockId(0, 2): expected(0, 2)}
        run = [BlockId(1, i) for i in range(10, 26)]
        got = c.fetch_urgent(run)
        assert all(got[b] == expected(1, b.index) for b in run)
        assert srv.stats.urgent_requests == 2 and srv.stats.urgent_blocks == 17
        c.close()


def test_padded_tail_block(root):
    with BlockServer(root) as srv:
        c = BlockClient(srv.address)
        assert c.fetch_urgent([BlockId(0, 40)])[BlockId(0, 40)] == expected(0, 40)
        c.close()


def test_not_found_is_content_mismatch(root):
    with BlockServer(root) as srv:
        c = BlockClient(srv.address)
        with pytest.raises(ContentMismatch):
            c.fetch_urgent([BlockId(0, 41)])
        with pytest.raises(ContentMismatch):
            c.fetch_urgent([BlockId(5, 0)])
        # connection is still usable
        assert c.fetch_urgent([BlockId(0, 0)])
        c.close()


def test_server_down_gives_network_error():
    c = BlockClient(("127.0.0.1", free_port()), backoff_s=0.01)
    with pytest.raises(NetworkError) as exc:
        c.fetch_urgent([BlockId(0, 0)])
    assert exc.value.attempts == 3 and c.retries == 2
    with pytest.raises(NetworkError):
        c.connect()


def test_urgent_inserts_into_cache(root):
    cache = BlockStore(temp_limit=64 * BS)
    with BlockServer(root) as srv:
        c = BlockClient(srv.address, cache)
        c.fetch_urgent([BlockId(0, 1), BlockId(0, 1)])
        hit = cache.read(BlockId(0, 1))
        assert hit.data == expected(0, 1) and not cache.is_pinned(BlockId(0, 1))
        c.close()


def test_urgent_latency_matches_link_model(root):
    with BlockServer(root, bandwidth_bps=17.4e6, rtt_ms=100) as srv:
        c = BlockClient(srv.address)
        c.connect()
        for i in range(5):
            c.fetch_urgent([BlockId(1, i)], insert=False)
        c.close()
    for ms in c.latencies_ms:
        assert ms == pytest.approx(101.88, abs=10)


def test_speculative_fetcher_delivers_pinned(root):
    cache = BlockStore(temp_limit=400 * BS)
    seen = []
    with BlockServer(root) as srv:
        q = FetchQueue()
        f = SpeculativeFetcher(srv.address, q, cache, on_block=lambda b, t: seen.append((b, t))).start()
        blocks = [BlockId(1, i) for i in range(100)]
        q.put(blocks, issued_at=42.0)
        deadline = time.monotonic() + 10
        while not (f.idle() and len(seen) == 100) and time.monotonic() < deadline:
            time.sleep(0.01)
        f.stop()
    assert sorted(b for b, _ in seen) == blocks
    assert all(t == 42.0 for _, t in seen)
    assert all(cache.is_pinned(b) and cache.read(b).data == expected(1, b.index) for b in blocks)
    assert f.requests < 100  # coalesced into ranges


def test_speculative_gives_up_on_missing_block(root):
    gave_up = []
    with BlockServer(root) as srv:
        q = FetchQueue()
        f = SpeculativeFetcher(srv.address, q, None, on_give_up=gave_up.append).start()
        q.put([BlockId(0, 99)])
        deadline = time.monotonic() + 5
        while not gave_up and time.monotonic() < deadline:
            time.sleep(0.01)
        f.stop()
    assert gave_up == [BlockId(0, 99)]
    assert any(isinstance(e, ContentMismatch) for e in f.errors)


def test_urgent_preempts_speculative(root):
    # 4096 B at 3.2768 Mbps = 10 ms per block; 200 speculative blocks = 2 s
    with BlockServer(root, bandwidth_bps=3.2768e6, rtt_ms=5, record_events=True) as srv:
        spec = socket.create_connection(srv.address)
        spec.sendall(P.encode_request(1, 1, [(0, 200)], urgent=False))
        time.sleep(0.3)
        c = BlockClient(srv.address)
        c.fetch_urgent([BlockId(0, i) for i in range(5)], insert=False)
        fr = P.read_frame(spec)
        spec.close()
        c.close()
        events = list(srv.events)
    assert fr.type == P.RESP
    ready = next(t for t, e, _ in events if e == "urgent_ready")
    done = next(t for t, e, _ in events if e == "urgent_done")
    inside = [t for t, e, _ in events if e == "spec_block" and ready < t < done]
    assert len(inside) <= 1  # the block already on the wire
    assert done - ready == pytest.approx(0.05, abs=0.03)
    spec_done = next(t for t, e, _ in events if e == "spec_done")
    assert spec_done > done
