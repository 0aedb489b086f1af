"""Command-line front end: ``python -m tierann <command> [flags]``.

Every command takes ``--config FILE`` (``key = value`` lines, keys spelled
like the long flags). Values resolve flags > config file > defaults.
Reports are CSV files whose first line is a ``# tierann-<schema> v<N>``
comment; they contain no timestamps, so a fixed seed and config give
byte-identical output.

Failures print one line to stderr and exit non-zero::

    tierann: error kind=<usage|format|io|unreachable|remote> message="..."
"""

from __future__ import annotations

import argparse
import asyncio
import csv
import io
import json
import logging
import re
import signal
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Sequence

import numpy as np

from .core import FormatError, IndexCorruptionError, SearchParams, UsageError, as_matrix, default_threads

log = logging.getLogger("tierann")

CSV_VERSION = 1
EXIT_USAGE, EXIT_FORMAT, EXIT_UNREACHABLE, EXIT_REMOTE = 2, 3, 4, 5


# -- options --------------------------------------------------------------------------

@dataclass(frozen=True)
class Option:
    type: Callable[[str], Any]
    default: Any
    help: str


def _ints(raw: str) -> list[int]:
    try:
        return [int(v) for v in str(raw).split(",") if v.strip()]
    except ValueError:
        raise UsageError(f"expected comma-separated integers, got {raw!r}") from None


def _density(raw: str):
    if str(raw).strip() == "auto":
        return "auto"
    try:
        vals = [float(v) for v in str(raw).split(",")]
    except ValueError:
        raise UsageError(f"density must be 'auto' or numbers, got {raw!r}") from None
    return vals[0] if len(vals) == 1 else vals


_UNITS = {"": 1, "b": 1, "kb": 10**3, "mb": 10**6, "gb": 10**9, "kib": 2**10, "mib": 2**20, "gib": 2**30}


def parse_budget(raw: str) -> tuple[int, bool]:
    """``"10000"`` is a vector count; ``"64MiB"`` / ``"2GB"`` a byte budget.
    Returns ``(value, is_bytes)``."""
    m = re.fullmatch(r"\s*(\d+(?:\.\d+)?)\s*([a-zA-Z]*)\s*", str(raw))
    if not m or m.group(2).lower() not in _UNITS:
        raise UsageError(f"bad budget {raw!r}: use a count or a size like 64MiB")
    unit = m.group(2).lower()
    value = int(float(m.group(1)) * _UNITS[unit])
    return value, unit != ""


OPTIONS: dict[str, Option] = {
    "dataset": Option(str, None, "dataset manifest or .fvecs/.bvecs file"),
    "queries": Option(str, None, "query vectors (.fvecs/.bvecs)"),
    "truth": Option(str, None, "ground-truth prefix (<prefix>.ivecs + <prefix>.fvecs)"),
    "index": Option(str, None, "index directory"),
    "budget": Option(str, "10000", "root budget: vector count, or bytes with a unit (64MiB)"),
    "density": Option(_density, 0.1, "partition density, comma list per level, or 'auto'"),
    "seed": Option(int, 0, "random seed"),
    "R": Option(int, 32, "graph out-degree"),
    "build-beam": Option(int, 128, "graph construction beam"),
    "epsilon": Option(float, 0.1, "boundary replication ratio"),
    "max-copies": Option(int, 8, "maximum partitions per vector"),
    "m": Option(_ints, [256], "candidates forwarded per level (comma list for sweeps)"),
    "k": Option(int, 10, "results per query"),
    "root-beam": Option(int, None, "root graph beam (default max(m, 64))"),
    "nodes": Option(_ints, [5], "store node count (comma list for simulate)"),
    "node": Option(int, 0, "this store's node index"),
    "model": Option(str, "lsv3", "cluster profile: lsv3, commodity, or a key=value file"),
    "target-recall": Option(float, 0.9, "recall target for profiling / probing"),
    "cost-ratio": Option(float, 2.0, "allowed cost over the density-1.0 baseline"),
    "sample": Option(int, 100_000, "profiling sample size"),
    "shards": Option(int, 5, "spatial shards for shardprobe"),
    "closed-loop": Option(lambda s: str(s).lower() in ("1", "true", "yes", "on"), False,
                          "also run the discrete-event check"),
    "out": Option(str, None, "output file or directory"),
    "listen": Option(str, "127.0.0.1:0", "store listen address host:port"),
    "stores": Option(lambda s: [a.strip() for a in str(s).split(",") if a.strip()], None,
                     "comma-separated store addresses, node order"),
    "threads": Option(int, None, "query worker threads (default $TIERANN_THREADS or 1)"),
    "n": Option(int, 100_000, "vectors to generate"),
    "dim": Option(int, 128, "dimension of generated vectors"),
    "timeout": Option(float, 10.0, "store reply timeout in seconds"),
}


def read_config(path: str | Path) -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected key=value")
        key, value = (s.strip() for s in line.split("=", 1))
        key = key.replace("_", "-").lstrip("-")
        if key not in OPTIONS:
            raise UsageError(f"{path}:{lineno}: unknown key {key!r}")
        out[key] = value
    return out


def resolve(names: Sequence[str], flags: dict[str, Any], config: dict[str, str]) -> dict[str, Any]:
    """Flags win over the config file, which wins over defaults."""
    cfg: dict[str, Any] = {}
    for name in names:
        opt = OPTIONS[name]
        if flags.get(name) is not None:
            cfg[name] = flags[name]
        elif name in config:
            cfg[name] = opt.type(config[name])
        else:
            cfg[name] = opt.default
    return cfg


def _require(cfg: dict[str, Any], *names: str) -> None:
    missing = [n for n in names if cfg.get(n) is None]
    if missing:
        raise UsageError("missing " + ", ".join("--" + n for n in missing))


# -- CSV --------------------------------------------------------------------------------

def _cell(v) -> str:
    if isinstance(v, (float, np.floating)):
        return format(float(v), ".6g")
    return str(v)


def format_csv(schema: str, columns: Sequence[str], rows, version: int = CSV_VERSION) -> str:
    buf = io.StringIO()
    buf.write(f"# tierann-{schema} v{version}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for row in rows:
        w.writerow([_cell(v) for v in row])
    return buf.getvalue()


def _emit(cfg, text: str) -> None:
    if cfg.get("out"):
        Path(cfg["out"]).parent.mkdir(parents=True, exist_ok=True)
        Path(cfg["out"]).write_text(text)
        log.info("wrote %s", cfg["out"])
    else:
        sys.stdout.write(text)


# -- inputs -----------------------------------------------------------------------------

def _dataset(path: str):
    from .dataset import load_manifest_dataset, load_vectors

    p = Path(path)
    if p.suffix in (".fvecs", ".bvecs", ".ivecs"):
        return load_vectors(p)
    return load_manifest_dataset(p)


def _queries(path: str) -> np.ndarray:
    from .dataset import read_vecs

    return as_matrix(read_vecs(path).astype(np.float32))


def _params(cfg, m: int) -> SearchParams:
    root = cfg.get("root-beam")
    return SearchParams(m=m, k=cfg["k"], root_beam=max(root, m) if root else None)


def _budget(cfg, dim: int) -> int:
    from .hierarchy import budget_from_bytes

    value, is_bytes = parse_budget(cfg["budget"])
    return budget_from_bytes(value, dim, cfg["R"]) if is_bytes else value


# -- commands ---------------------------------------------------------------------------

def cmd_generate(cfg) -> int:
    """Write a synthetic SIFT-style dataset (.fvecs + manifest) and queries."""
    from .dataset import generate_sift_like, write_manifest, write_vecs

    _require(cfg, "out")
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    nq = 1000
    ds = generate_sift_like(cfg["n"] + nq, dim=cfg["dim"], seed=cfg["seed"])
    write_vecs(out / "base.fvecs", ds.vectors[nq:])
    write_vecs(out / "queries.fvecs", ds.vectors[:nq])
    write_manifest(out / "dataset.txt", {"path": "base.fvecs", "format": "fvecs", "metric": "l2",
                                         "dim": cfg["dim"]})
    print(f"wrote {out / 'dataset.txt'} ({cfg['n']} x {cfg['dim']}) and {out / 'queries.fvecs'} ({nq})")
    return 0


def cmd_groundtruth(cfg) -> int:
    """Exact top-k for a query file (.ivecs ids + .fvecs distances)."""
    from .dataset import brute_force_topk, write_groundtruth

    _require(cfg, "dataset", "queries", "out")
    gt = brute_force_topk(_dataset(cfg["dataset"]), _queries(cfg["queries"]), cfg["k"])
    ivecs, fvecs = write_groundtruth(cfg["out"], gt)
    print(f"wrote {ivecs} and {fvecs}")
    return 0


PROFILE_COLUMNS = ("density", "probe_count", "accessed_vectors", "recall", "partitions")


def cmd_profile(cfg) -> int:
    """Pick the balanced partition density on a sample; CSV of probes."""
    from .profiler import profile_vectors

    _require(cfg, "dataset")
    ds = _dataset(cfg["dataset"])
    queries = _queries(cfg["queries"]) if cfg.get("queries") else None
    prof = profile_vectors(ds.ids, ds.vectors, ds.metric, sample_size=cfg["sample"], queries=queries,
                           target_recall=cfg["target-recall"], cost_ratio=cfg["cost-ratio"],
                           seed=cfg["seed"])
    rows = [(p.density, p.probe_count, p.accessed_vectors, p.recall, p.partitions) for p in prof.probes]
    text = format_csv("profile", PROFILE_COLUMNS, rows)
    text += f"# chosen_density={prof.chosen:.6g} baseline_cost={prof.baseline_cost:.6g} " \
            f"fallback={int(prof.fallback)}\n"
    _emit(cfg, text)
    print(f"chosen density {prof.chosen:.6g}", file=sys.stderr)
    return 0


def cmd_build(cfg) -> int:
    """Build a hierarchical index directory."""
    from .hierarchy import build_levels, level_stats, save_index

    _require(cfg, "dataset", "out")
    ds = _dataset(cfg["dataset"])
    queries = _queries(cfg["queries"]) if cfg.get("queries") else None
    budget = _budget(cfg, ds.vectors.shape[1])
    index = build_levels(budget, ds, cfg["density"], seed=cfg["seed"], epsilon=cfg["epsilon"],
                         max_copies=cfg["max-copies"], R=cfg["R"], build_beam=cfg["build-beam"],
                         queries=queries, profile_sample=cfg["sample"],
                         target_recall=cfg["target-recall"], cost_ratio=cfg["cost-ratio"], log=log.info)
    save_index(index, cfg["out"])
    for st in level_stats(index):
        log.info("level %d: %d vectors, %d partitions, %d bytes on disk", st.level, st.vectors,
                 st.partitions, st.disk_bytes)
    print(f"built {len(index.levels)} clustered levels + root ({len(index.root)} vectors) in {cfg['out']}")
    return 0


RESULT_COLUMNS = ("query", "rank", "id", "distance")


def _result_rows(ids, dists):
    for qi, (row, drow) in enumerate(zip(ids, dists)):
        for rank, (i, d) in enumerate(zip(row, drow)):
            if np.isfinite(d):
                yield qi, rank, int(i), float(d)


def cmd_search(cfg) -> int:
    """Search an index locally; CSV of results."""
    from .hierarchy import load_index, search_batch

    _require(cfg, "index", "queries")
    index = load_index(cfg["index"])
    ids, dists, _ = search_batch(index, _queries(cfg["queries"]), _params(cfg, cfg["m"][0]),
                                 threads=cfg["threads"])
    _emit(cfg, format_csv("results", RESULT_COLUMNS, _result_rows(ids, dists)))
    return 0


EVAL_COLUMNS = ("m", "recall_at_k", "vectors_scanned", "fetch_rounds", "simulated_latency_us",
                "estimated_qps", "level_recall")


def cmd_eval(cfg) -> int:
    """Sweep m: recall, scan cost, fetch rounds, simulated latency and QPS."""
    from .cluster import estimate_throughput, load_model, measure_beta, place, simulate_workload
    from .dataset import read_groundtruth
    from .hierarchy import evaluate, load_index

    _require(cfg, "index", "queries", "truth")
    index = load_index(cfg["index"])
    q = _queries(cfg["queries"])
    truth = read_groundtruth(cfg["truth"])
    model = load_model(cfg["model"]).with_nodes(cfg["nodes"][0])
    placement = place(index, model.node_count)
    rows = []
    for row in evaluate(index, q, truth, cfg["m"], cfg["k"], cfg.get("root-beam")):
        params = _params(cfg, row.m)
        reports = simulate_workload(index, placement, model, q, params)
        est = estimate_throughput(index, placement, model, q, params, beta=measure_beta(reports),
                                  reports=reports)
        rows.append((row.m, row.recall, row.vectors_scanned, row.fetch_rounds, est.mean_latency, est.qps,
                     ";".join(f"{r:.4f}" for r in row.per_level_recall)))
    _emit(cfg, format_csv("eval", EVAL_COLUMNS, rows))
    return 0


SIMULATE_COLUMNS = ("nodes", "qps", "binding", "util_iops", "util_disk_bw", "util_cpu", "util_net",
                    "beta", "measured_beta", "latency_p50_us", "latency_p95_us", "latency_p99_us",
                    "closed_loop_qps")


def cmd_simulate(cfg) -> int:
    """Analytic throughput across node counts."""
    from .cluster import (closed_loop_throughput, estimate_throughput, load_model, measure_beta, place,
                          simulate_workload)
    from .hierarchy import load_index

    _require(cfg, "index", "queries")
    index = load_index(cfg["index"])
    q = _queries(cfg["queries"])
    params = _params(cfg, cfg["m"][0])
    base = load_model(cfg["model"])
    rows = []
    for n in cfg["nodes"]:
        model = base.with_nodes(n)
        placement = place(index, n)
        reports = simulate_workload(index, placement, model, q, params)
        est = estimate_throughput(index, placement, model, q, params, reports=reports)
        measured = measure_beta(reports)
        closed = ""
        if cfg["closed-loop"]:
            closed = closed_loop_throughput(reports, model, clients=64 * n, queries=20 * len(reports)).qps
        lat = est.latency_percentiles
        rows.append((n, est.qps, est.binding, *(est.utilization[r] for r in ("iops", "disk_bw", "cpu", "net")),
                     est.beta, measured, lat["p50"], lat["p95"], lat["p99"], closed))
    _emit(cfg, format_csv("simulate", SIMULATE_COLUMNS, rows))
    return 0


SHARDPROBE_COLUMNS = ("shards", "beam", "recall", "avg_total_steps", "avg_cross_node_steps",
                      "p99_cross_node_steps", "cross_node_fraction")


def cmd_shardprobe(cfg) -> int:
    """Cross-node steps of a graph split into spatial shards."""
    from .dataset import brute_force_topk, read_groundtruth
    from .graph import build_graph, min_beam_for_recall, shard_and_measure

    _require(cfg, "dataset", "queries")
    ds = _dataset(cfg["dataset"])
    q = _queries(cfg["queries"])
    k = cfg["k"]
    if not 0 < cfg["target-recall"] <= 1:
        raise UsageError("--target-recall must lie in (0, 1]")
    truth = read_groundtruth(cfg["truth"]) if cfg.get("truth") else brute_force_topk(ds, q, k)
    if truth.k < k:
        raise UsageError(f"ground truth covers k={truth.k}, need {k}")
    g = build_graph(ds.ids, ds.vectors, cfg["R"], cfg["build-beam"], cfg["seed"], ds.metric)
    try:
        beam, recall, _ = min_beam_for_recall(g, q, truth.ids[:, :k], k, cfg["target-recall"])
    except ValueError:
        from .core import mean_recall
        from .graph import batch_search
        from .profiler import UnreachableTarget

        best = mean_recall(batch_search(g, q, k, len(g))[0], truth.ids[:, :k], k)
        raise UnreachableTarget(1.0, best, cfg["target-recall"]) from None
    res = shard_and_measure(g, cfg["shards"], q, k, beam, seed=cfg["seed"])
    rows = [(cfg["shards"], beam, recall, res.avg_total_steps, res.avg_cross_node_steps,
             res.p99_cross_node_steps, res.cross_node_fraction)]
    _emit(cfg, format_csv("shardprobe", SHARDPROBE_COLUMNS, rows))
    return 0


def cmd_serve_store(cfg) -> int:
    """Run one store node until SIGINT/SIGTERM; SIGUSR1 prints stats."""
    from .service.engine import parse_address
    from .service.store import load_store, serve_store, server_address

    _require(cfg, "index")
    node_count = cfg["nodes"][0]
    if not 0 <= cfg["node"] < node_count:
        raise UsageError(f"--node must lie in [0, {node_count})")
    node = load_store(cfg["index"], cfg["node"], node_count)
    host, port = parse_address(cfg["listen"])

    async def run():
        server = await serve_store(node, host, port)
        print(f"listening {server_address(server)}", flush=True)
        loop = asyncio.get_running_loop()
        stop = asyncio.Event()
        for sig in (signal.SIGINT, signal.SIGTERM):
            loop.add_signal_handler(sig, stop.set)
        loop.add_signal_handler(signal.SIGUSR1, lambda: print(node.dump_stats(), end="", flush=True))
        await stop.wait()
        server.close()
        await server.wait_closed()

    asyncio.run(run())
    print(node.dump_stats(), end="")
    return 0


def cmd_serve_engine(cfg) -> int:
    """Batch mode: answer a query file through the given stores."""
    from .service.engine import QueryEngine

    _require(cfg, "index", "stores", "queries")
    engine = QueryEngine.from_index(cfg["index"], cfg["stores"], timeout=cfg["timeout"])
    q = _queries(cfg["queries"])
    params = _params(cfg, cfg["m"][0])

    async def run():
        try:
            return await engine.search_many(q, params, concurrency=max(1, cfg["threads"] or default_threads()))
        finally:
            engine.close()

    found = asyncio.run(run())
    ids = np.full((len(found), params.k), np.iinfo(np.uint64).max, dtype=np.uint64)
    dists = np.full((len(found), params.k), np.inf, dtype=np.float32)
    for i, (r, d) in enumerate(found):
        ids[i, : r.size], dists[i, : d.size] = r, d
    _emit(cfg, format_csv("results", RESULT_COLUMNS, _result_rows(ids, dists)))
    return 0


COMMANDS: dict[str, tuple[Callable, tuple[str, ...]]] = {
    "generate": (cmd_generate, ("n", "dim", "seed", "out")),
    "groundtruth": (cmd_groundtruth, ("dataset", "queries", "k", "out")),
    "profile": (cmd_profile, ("dataset", "queries", "sample", "target-recall", "cost-ratio", "seed", "out")),
    "build": (cmd_build, ("dataset", "queries", "budget", "density", "seed", "R", "build-beam", "epsilon",
                          "max-copies", "sample", "target-recall", "cost-ratio", "out")),
    "search": (cmd_search, ("index", "queries", "m", "k", "root-beam", "threads", "out")),
    "eval": (cmd_eval, ("index", "queries", "truth", "m", "k", "root-beam", "nodes", "model", "out")),
    "simulate": (cmd_simulate, ("index", "queries", "m", "k", "root-beam", "nodes", "model", "closed-loop",
                                "out")),
    "shardprobe": (cmd_shardprobe, ("dataset", "queries", "truth", "k", "shards", "target-recall", "seed",
                                    "R", "build-beam", "out")),
    "serve-store": (cmd_serve_store, ("index", "node", "nodes", "listen")),
    "serve-engine": (cmd_serve_engine, ("index", "stores", "queries", "m", "k", "root-beam", "threads",
                                        "timeout", "out")),
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        _fail("usage", message, EXIT_USAGE)
        sys.exit(EXIT_USAGE)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="tierann", description=__doc__.split("\n\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name, (fn, names) in COMMANDS.items():
        p = sub.add_parser(name, help=(fn.__doc__ or "").strip().split("\n")[0] or None)
        p.add_argument("--config", help="key=value config file; flags override it")
        p.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS,
                       help="log progress to stderr")
        for opt in names:
            o = OPTIONS[opt]
            p.add_argument(f"--{opt}", dest=opt, type=o.type, default=None,
                           help=f"{o.help} (default: {o.default})")
    return parser


def _fail(kind: str, message: str, code: int) -> int:
    print(f"tierann: error kind={kind} message={json.dumps(message)}", file=sys.stderr)
    return code


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(name)s: %(message)s", stream=sys.stderr)
    from .profiler import UnreachableTarget
    from .service.engine import StoreUnavailable
    from .service.protocol import ProtocolError, RemoteError

    fn, names = COMMANDS[args.command]
    try:
        config = read_config(args.config) if args.config else {}
        cfg = resolve(names, vars(args), config)
        return fn(cfg)
    except UnreachableTarget as exc:
        return _fail("unreachable", str(exc), EXIT_UNREACHABLE)
    except (StoreUnavailable, RemoteError, ProtocolError) as exc:
        return _fail("remote", str(exc), EXIT_REMOTE)
    except (FormatError, IndexCorruptionError) as exc:
        return _fail("format", str(exc), EXIT_FORMAT)
    except OSError as exc:
        return _fail("io", f"{exc.strerror or exc}: {exc.filename}" if exc.filename else str(exc), EXIT_FORMAT)
    except UsageError as exc:
        return _fail("usage", str(exc), EXIT_USAGE)


if __name__ == "__main__":
    sys.exit(main())
