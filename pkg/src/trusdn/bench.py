"""Desk-scale flow-setup benchmark and CSV summary statistics.

Each measured flow starts from an empty FIB (every rule is flushed first), so
its first packet always takes the packet-in path.  Tick columns are
deterministic for a seed; the wall-clock columns are not.
"""

from __future__ import annotations

import csv
import math
import statistics
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional

from .attestation import EpidAuthority, Verifier
from .controller import Controller
from .crypto import DeterministicRandom
from .enclave import Datacenter, EnclaveKind
from .endpoint import Mode
from .errors import ParseError
from .sim import Network

CSV_COLUMNS = [
    "flow",
    "mode",
    "first_packet_ticks",
    "keygen_wall_ns",
    "distribution_wall_ns",
    "handshake_messages",
    "handshake_pk_ops",
]
STATS = ("min", "max", "mean", "median", "stddev")

BENCH_SWITCH = b"trusdn bench switch"
BENCH_CT = b"trusdn bench compute task"


@dataclass
class BenchConfig:
    flows: int
    repeats: int = 1
    mode: Mode = Mode.PSK
    seed: int = 0
    csv_path: Optional[str] = None

    def __post_init__(self):
        self.mode = Mode(self.mode)
        if self.flows < 1 or self.repeats < 1:
            raise ValueError("flows and repeats must be at least 1")


@dataclass
class BenchRecord:
    flow: int
    mode: str
    first_packet_ticks: int
    keygen_wall_ns: int
    distribution_wall_ns: int
    handshake_messages: int
    handshake_pk_ops: int


def _testbed(seed: int, mode: Mode):
    """One host, one switch, two compute tasks: the intra-host setting."""
    rng = DeterministicRandom(seed)
    authority = EpidAuthority(rng.fork("authority"))
    host = Datacenter().add(authority.new_platform("h1"))
    net = Network()
    verifier = Verifier("nc", authority.group, rng.fork("verifier"), root_pk=authority.root_pk, clock=net.now)
    nc = Controller(net, rng.fork("nc"), verifier, psk_mode=mode is Mode.PSK)
    nc.approve_image(EnclaveKind.SWITCH, BENCH_SWITCH, b"")
    nc.approve_image(EnclaveKind.COMPUTE_TASK, BENCH_CT, b"")
    sw = nc.deploy_and_enroll_switch(host, BENCH_SWITCH, b"", "d1")
    client = nc.ct_nodes[nc.deploy_and_enroll_ct(host, BENCH_CT, b"", sw)]
    server = nc.ct_nodes[nc.deploy_and_enroll_ct(host, BENCH_CT, b"", sw)]
    client.learn_peer(server.id, server.public_key)
    server.learn_peer(client.id, client.public_key)
    return net, nc, client, server


def run_repeat(cfg: BenchConfig, repeat: int) -> list[BenchRecord]:
    net, nc, client, server = _testbed(cfg.seed + repeat, cfg.mode)
    records = []
    for i in range(cfg.flows):
        nc.flush_flows()
        flow = client.ct_open_flow(server.id, b"bench", mode=cfg.mode)
        net.run()
        key = flow.canonical()
        c_sess, s_sess = client.session(flow), server.session(flow)
        timing = nc.timings.get(key, {})
        records.append(
            BenchRecord(
                flow=repeat * cfg.flows + i,
                mode=cfg.mode.value,
                first_packet_ticks=server.flow_times[key]["first_packet"] - client.flow_times[key]["opened"],
                keygen_wall_ns=timing.get("keygen_ns", 0),
                distribution_wall_ns=timing.get("distribution_ns", 0),
                handshake_messages=c_sess.handshake_messages,
                handshake_pk_ops=c_sess.handshake_pk_ops + s_sess.handshake_pk_ops,
            )
        )
    return records


def run_bench(cfg: BenchConfig, workers: int = 1) -> list[BenchRecord]:
    """Runs every repeat on its own simulator seeded ``seed + repeat``.

    With ``workers > 1`` the repeats run in separate processes; rows come back
    in flow order either way.
    """
    if workers > 1 and cfg.repeats > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            chunks = list(pool.map(run_repeat, [cfg] * cfg.repeats, range(cfg.repeats)))
    else:
        chunks = [run_repeat(cfg, r) for r in range(cfg.repeats)]
    records = [rec for chunk in chunks for rec in chunk]
    if cfg.csv_path:
        write_csv(records, cfg.csv_path)
    return records


def write_csv(records, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=CSV_COLUMNS)
        w.writeheader()
        for rec in records:
            w.writerow(asdict(rec))


def read_columns(path) -> dict[str, list[float]]:
    """Numeric columns of a bench CSV (``flow`` and ``mode`` excluded)."""
    text = Path(path).read_text()
    reader = csv.reader(text.splitlines())
    try:
        header = next(reader)
    except StopIteration:
        raise ParseError("empty CSV", line=1) from None
    if "flow" not in header:
        raise ParseError("CSV header lacks a flow column", line=1)
    numeric = [h for h in header if h not in ("flow", "mode")]
    cols: dict[str, list[float]] = {h: [] for h in numeric}
    for lineno, row in enumerate(reader, start=2):
        if not row:
            continue
        if len(row) != len(header):
            raise ParseError(f"expected {len(header)} fields, got {len(row)}", line=lineno)
        for name, value in zip(header, row):
            if name in cols:
                try:
                    v = float(value)
                except ValueError:
                    raise ParseError(f"non-numeric {name} value {value!r}", line=lineno) from None
                if not math.isfinite(v):
                    raise ParseError(f"non-finite {name} value", line=lineno)
                cols[name].append(v)
    if not any(cols.values()):
        raise ParseError("CSV has no data rows", line=2)
    return cols


def summarize(values: list[float]) -> dict[str, float]:
    # population standard deviation: the rows are the whole measured set
    return {
        "min": min(values),
        "max": max(values),
        "mean": statistics.fmean(values),
        "median": statistics.median(values),
        "stddev": statistics.pstdev(values),
    }


def summary_table(path) -> dict[str, dict[str, float]]:
    return {name: summarize(vals) for name, vals in read_columns(path).items()}


def format_summary(table: dict[str, dict[str, float]]) -> str:
    width = max(len(n) for n in table) + 2
    head = "".ljust(width) + "".join(s.rjust(16) for s in ("Minimum", "Maximum", "Mean", "Median", "Stddev"))
    lines = [head]
    for name, st in table.items():
        lines.append(name.ljust(width) + "".join(f"{st[s]:16.3f}" for s in STATS))
    return "\n".join(lines)
