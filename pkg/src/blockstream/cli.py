"""Command-line entry point.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 network error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import re
import sys
from typing import List, Optional, Sequence

from . import __version__
from .baseline import train_pair_model
from .bundle import BundleError, ModelBundle, train_bundle
from .config import ConfigError, SimConfig
from .ctmc import CtmcError
from .sim import SimulationError, simulate_runs, sweep, sweep_csv
from .synth import SynthSpec, SynthSpecError, demo_spec, synth_trace
from .trace import FileTable, TraceError, load_trace, save_trace

log = logging.getLogger("blockstream")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NETWORK = 4

# flag name -> SimConfig key
CONFIG_FLAGS = {
    "delta_ms": int,
    "tau": float,
    "p_stop": float,
    "p_download": float,
    "lookahead_s": float,
    "containment": float,
    "min_superblock_size": int,
    "b_initial_bytes": int,
    "temp_limit_bytes": int,
    "bandwidth_bps": float,
    "rtt_ms": float,
    "fp_window_s": float,
}


class UsageError(Exception):
    pass


def parse_bandwidth(text: str) -> float:
    """'17.4Mbps', '17.4M', '500kbps' or a plain number of bits per second."""
    m = re.fullmatch(r"\s*([0-9]*\.?[0-9]+(?:[eE][-+]?[0-9]+)?)\s*([kKmMgG]?)(?:bps|bit/s)?\s*", text)
    if not m:
        raise argparse.ArgumentTypeError(f"bad bandwidth {text!r}")
    scale = {"": 1, "k": 1e3, "m": 1e6, "g": 1e9}[m.group(2).lower()]
    value = float(m.group(1)) * scale
    if value <= 0:
        raise argparse.ArgumentTypeError("bandwidth must be positive")
    return value


def parse_address(text: str):
    host, sep, port = text.rpartition(":")
    if not sep or not port.isdigit():
        raise argparse.ArgumentTypeError(f"expected HOST:PORT, got {text!r}")
    return host or "127.0.0.1", int(port)


def parse_seeds(text: str) -> List[int]:
    seeds: List[int] = []
    for part in text.split(","):
        part = part.strip()
        if "-" in part[1:]:
            lo, hi = part.split("-", 1)
            seeds.extend(range(int(lo), int(hi) + 1))
        elif part:
            seeds.append(int(part))
    if not seeds:
        raise argparse.ArgumentTypeError("no seeds given")
    return seeds


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("model and simulation parameters (override --config)")
    g.add_argument("--config", help="JSON file with flat parameter keys")
    for key, kind in CONFIG_FLAGS.items():
        flag = "--" + key.replace("_", "-")
        if key == "bandwidth_bps":
            g.add_argument(flag, dest=key, type=parse_bandwidth)
        else:
            g.add_argument(flag, dest=key, type=kind)
    g.add_argument("--no-speed-adaptation", dest="speed_adaptation", action="store_false", default=None)


def resolve_config(args: argparse.Namespace) -> SimConfig:
    base = SimConfig.load(args.config) if getattr(args, "config", None) else SimConfig()
    overrides = {k: getattr(args, k) for k in list(CONFIG_FLAGS) + ["speed_adaptation"]
                 if getattr(args, k, None) is not None}
    cfg = base.replace(**overrides) if overrides else base
    log.info("resolved config: %s", json.dumps(cfg.to_dict(), sort_keys=True))
    return cfg


def load_traces(paths: Sequence[str], files: Optional[FileTable] = None, strict: bool = False):
    files = files if files is not None else FileTable()
    return [load_trace(p, files, strict=strict) for p in paths]


def _write(text: str, out: Optional[str]) -> None:
    if out is None or out == "-":
        sys.stdout.write(text)
        if not text.endswith("\n"):
            sys.stdout.write("\n")
    else:
        with open(out, "w", encoding="utf-8", newline="\n") as f:
            f.write(text if text.endswith("\n") else text + "\n")


def _bundle_traces(bundle: ModelBundle, paths: Sequence[str], strict: bool = False):
    return load_traces(paths, FileTable(bundle.files.paths), strict)


# -- subcommands -------------------------------------------------------------


def cmd_synth(args) -> int:
    if args.spec:
        with open(args.spec, encoding="utf-8") as f:
            spec = SynthSpec.loads(f.read())
    else:
        spec = demo_spec(noise_rate=args.noise_rate)
    os.makedirs(args.out_dir, exist_ok=True)
    files = FileTable()
    for seed in args.seeds:
        trace = synth_trace(spec, seed, files, trace_id=f"{args.prefix}{seed}")
        path = os.path.join(args.out_dir, f"{args.prefix}{seed}.trace")
        save_trace(trace, path)
        print(f"{path}\t{len(trace.records)} reads\t{trace.duration_ms} ms")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = resolve_config(args)
    traces = load_traces(args.traces, strict=args.strict)
    bundle = train_bundle(traces, cfg)
    bundle.save(args.out)
    t = bundle.training
    print(f"states\t{len(bundle.superblocks)}")
    print(f"transitions\t{bundle.model.num_transitions}")
    print(f"coverage\t{t['coverage']:.4f}")
    print(f"partitions\t{t['partitions']}")
    print(f"unmatched\t{t['unmatched']}")
    return EXIT_OK


def _pair_model(args, bundle: ModelBundle, cfg: SimConfig):
    if not args.baseline:
        return None
    if not args.train:
        raise UsageError("--baseline needs --train traces to build the pair model")
    train = _bundle_traces(bundle, args.train)
    return train_pair_model(train, cfg.lookahead_ms, cfg.block_size)


def cmd_simulate(args) -> int:
    cfg = resolve_config(args)
    bundle = ModelBundle.load(args.model)
    traces = _bundle_traces(bundle, args.traces, args.strict)
    report = simulate_runs(bundle, traces, cfg, _pair_model(args, bundle, cfg))
    _write(report.to_json(), args.out)
    return EXIT_OK


def parse_grid(items: Sequence[str]) -> dict:
    grid = {}
    for item in items:
        key, sep, values = item.partition("=")
        key = key.strip().replace("-", "_")
        if not sep or key not in CONFIG_FLAGS:
            raise ConfigError(f"bad grid entry {item!r}; expected KEY=V1,V2,... with a parameter key")
        kind = parse_bandwidth if key == "bandwidth_bps" else CONFIG_FLAGS[key]
        try:
            grid[key] = [kind(v) for v in values.split(",") if v.strip()]
        except (ValueError, argparse.ArgumentTypeError) as exc:
            raise ConfigError(f"bad value in grid entry {item!r}: {exc}") from exc
    if not grid or not any(grid.values()):
        raise ConfigError("sweep grid is empty")
    return grid


def cmd_sweep(args) -> int:
    cfg = resolve_config(args)
    grid = parse_grid(args.grid)
    bundle = ModelBundle.load(args.model) if args.model else None
    files = FileTable(bundle.files.paths) if bundle is not None else FileTable()
    train = load_traces(args.train, files, args.strict)
    test = load_traces(args.test, files, args.strict)
    results = sweep(train, test, cfg, grid, bundle=bundle, workers=args.workers, baseline=args.baseline)
    _write(sweep_csv(results), args.out)
    return EXIT_OK


def cmd_shard(args) -> int:
    from .fetch import build_block_root

    bundle = ModelBundle.load(args.model)
    files = {i: (bundle.files.path(i), bundle.manifest.get(i, 0)) for i in range(len(bundle.files))}
    entries = build_block_root(args.out, files, source_dir=args.source, block_size=bundle.block_size)
    for e in entries:
        if args.source is not None and e.size != bundle.manifest.get(e.file_id, e.size):
            raise BundleError(f"{e.path}: source is {e.size} bytes, model expects {bundle.manifest[e.file_id]}")
        print(f"{e.file_id}\t{e.path}\t{e.size}")
    return EXIT_OK


def cmd_serve(args) -> int:
    from .fetch import BlockServer

    server = BlockServer(args.root, args.listen, bandwidth_bps=args.bandwidth_cap, rtt_ms=args.rtt_sim)
    log.info("listening on %s:%d (bandwidth cap %s, rtt %.1f ms)", *server.address,
             args.bandwidth_cap or "none", args.rtt_sim)
    print(f"{server.address[0]}:{server.address[1]}", flush=True)
    server.serve_forever()
    return EXIT_OK


def cmd_replay(args) -> int:
    from .fetch.replay import replay_live
    from .sim import aggregate

    cfg = resolve_config(args)
    bundle = ModelBundle.load(args.model)
    traces = _bundle_traces(bundle, args.traces, args.strict)
    pair = _pair_model(args, bundle, cfg)
    runs = [replay_live(bundle, t, cfg, args.server, time_scale=args.time_scale, pair_model=pair) for t in traces]
    report = aggregate(runs)
    out = report.to_dict()
    out["urgent_latencies_ms"] = [x for r in runs for x in r.urgent_latencies_ms]
    out["urgent_retries"] = sum(r.urgent_retries for r in runs)
    _write(json.dumps(out, sort_keys=True, indent=2), args.out)
    return EXIT_OK


def cmd_probe(args) -> int:
    from .fetch import BlockClient
    from .trace import BlockId

    client = BlockClient(args.server, block_size=args.block_size)
    client.connect()
    try:
        for i in range(args.count):
            client.fetch_urgent([BlockId(args.file_id, args.block + i)], insert=False)
    finally:
        client.close()
    lat = client.latencies_ms
    print(json.dumps({"count": len(lat), "mean_ms": sum(lat) / len(lat), "max_ms": max(lat),
                      "min_ms": min(lat), "retries": client.retries}, sort_keys=True))
    return EXIT_OK


# -- parser ------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="blockstream", description="Predictive block prefetching toolkit")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate synthetic scene traces")
    s.add_argument("--spec", help="JSON scene-graph spec (default: built-in demo)")
    s.add_argument("--seeds", type=parse_seeds, default=parse_seeds("1-10"), help="e.g. 1-10 or 3,5,8")
    s.add_argument("--noise-rate", type=float, default=0.05, help="random reads per second (demo spec)")
    s.add_argument("--prefix", default="run")
    s.add_argument("--out-dir", required=True)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("train", help="train a model bundle from traces")
    s.add_argument("traces", nargs="+")
    s.add_argument("--out", required=True)
    s.add_argument("--strict", action="store_true", help="reject out-of-order timestamps")
    _add_config_flags(s)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("simulate", help="replay traces against a model; prints a JSON report")
    s.add_argument("traces", nargs="+")
    s.add_argument("--model", required=True)
    s.add_argument("--baseline", action="store_true", help="use the block-pair model instead")
    s.add_argument("--train", nargs="+", help="training traces for the block-pair model")
    s.add_argument("--out")
    s.add_argument("--strict", action="store_true")
    _add_config_flags(s)
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("sweep", help="vary one parameter at a time; prints CSV")
    s.add_argument("--train", nargs="+", required=True)
    s.add_argument("--test", nargs="+", required=True)
    s.add_argument("--grid", action="append", required=True, help="KEY=V1,V2,... (repeatable)")
    s.add_argument("--model", help="reuse this bundle for non-training parameters")
    s.add_argument("--workers", type=int, default=1)
    s.add_argument("--baseline", action="store_true")
    s.add_argument("--out")
    s.add_argument("--strict", action="store_true")
    _add_config_flags(s)
    s.set_defaults(func=cmd_sweep)

    s = sub.add_parser("shard", help="build a server block root for a model's files")
    s.add_argument("--model", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--source", help="directory holding the real files (default: synthetic content)")
    s.set_defaults(func=cmd_shard)

    s = sub.add_parser("serve", help="run a block server")
    s.add_argument("--root", required=True)
    s.add_argument("--listen", type=parse_address, default=("127.0.0.1", 7070))
    s.add_argument("--bandwidth-cap", type=parse_bandwidth, help="e.g. 17.4Mbps")
    s.add_argument("--rtt-sim", type=float, default=0.0, help="added latency per request, ms")
    s.set_defaults(func=cmd_serve)

    s = sub.add_parser("replay", help="replay traces live against a block server")
    s.add_argument("traces", nargs="+")
    s.add_argument("--model", required=True)
    s.add_argument("--server", type=parse_address, required=True)
    s.add_argument("--time-scale", type=float, default=1.0,
                   help="run this many times faster (start the server with scaled rtt/bandwidth)")
    s.add_argument("--baseline", action="store_true")
    s.add_argument("--train", nargs="+")
    s.add_argument("--out")
    s.add_argument("--strict", action="store_true")
    _add_config_flags(s)
    s.set_defaults(func=cmd_replay)

    s = sub.add_parser("probe", help="time urgent single-block fetches")
    s.add_argument("--server", type=parse_address, required=True)
    s.add_argument("--file-id", type=int, default=0)
    s.add_argument("--block", type=int, default=0)
    s.add_argument("--count", type=int, default=10)
    s.add_argument("--block-size", type=int, default=4096)
    s.set_defaults(func=cmd_probe)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose + 1, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    from .fetch import BlockRootError, ContentMismatch, NetworkError

    try:
        return args.func(args)
    except (ConfigError, SynthSpecError, UsageError) as exc:
        log.error("config error: %s", exc)
        return EXIT_CONFIG
    except (NetworkError, ConnectionError) as exc:
        log.error("network error: %s", exc)
        return EXIT_NETWORK
    except (TraceError, BundleError, SimulationError, CtmcError, BlockRootError, ContentMismatch, OSError) as exc:
        log.error("data error: %s", exc)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
