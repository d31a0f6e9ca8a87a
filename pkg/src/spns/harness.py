"""Scenario runner, the connection-time benchmark, the anonymity audit,
and golden-vector generation.

A scenario wires a directory, a core, RANs, and one UE over the simulated
network (or the socket transport), drives the full build + data phases,
and hands back egress, timings, logs, and the secrets manifest the audit
needs.
"""

from __future__ import annotations

import json
import logging
import os
import random
import statistics
import struct
import time
from dataclasses import dataclass, field
from pathlib import Path

from . import cells, crypto, nsi
from .circuit import UserEquipment
from .directory import DirectoryService, DirectorySnapshot, descriptor_sign, pack_address
from .errors import MalformedLog, ScenarioFailure
from .nodes import AuditLog, CoreNode, DirectoryNode, RanNode
from .simnet import LinkModel, SimNetwork

log = logging.getLogger("spns.harness")

DEFAULT_BANDWIDTH = 10_000_000.0  # 10 Mb/s
MEGABIT = 1_000_000


def configure_logging(level: str | None = None) -> None:
    """SPNS_LOG=debug|info|warning|error controls stack verbosity."""
    name = (level or os.environ.get("SPNS_LOG", "warning")).upper()
    logging.basicConfig(level=getattr(logging, name, logging.WARNING))


# --- key material -------------------------------------------------------------


@dataclass
class Deployment:
    """Long-term key material and descriptors for one topology."""

    directory_keys: crypto.NodeKeySet
    core_keys: crypto.NodeKeySet
    ran_keys: list[crypto.NodeKeySet]
    descriptors: list
    service: DirectoryService
    snapshot: DirectorySnapshot
    nssai: bytes

    @classmethod
    def create(cls, ran_count: int = 2, nssai: bytes = b"EMBB", seed: bytes = b"deploy") -> "Deployment":
        directory_keys = crypto.NodeKeySet.generate(seed + b"-dir")
        core_keys = crypto.NodeKeySet.generate(seed + b"-core")
        service = DirectoryService(directory_keys)
        ran_keys = []
        descriptors = []
        for i in range(ran_count):
            ks = crypto.NodeKeySet.generate(seed + b"-ran%d" % i)
            d = descriptor_sign(
                node_name=f"gnb-{i + 1}",
                gnb_id=1000 + i,
                location_area=7,
                supported_nssai=[nssai],
                slice_part=bytes([0x10 + i]) * 5,
                keyset=ks,
                address=f"ran{i + 1}",
            )
            service.publish(d)
            ran_keys.append(ks)
            descriptors.append(d)
        service.register_core(core_keys.onion_public, "core")
        snapshot = service.fetch_snapshot()
        return cls(directory_keys, core_keys, ran_keys, descriptors, service, snapshot, nssai)


# --- scenario -----------------------------------------------------------------


@dataclass
class ScenarioConfig:
    seed: int = 0
    hops: int = 2
    messages: list[bytes] = field(default_factory=lambda: [b"hello slice"])
    bandwidth_bps: float = DEFAULT_BANDWIDTH
    propagation_delay_s: float = 0.0
    log_dir: str | None = None
    leak_master: bool = False
    deployment: Deployment | None = None
    record_trace: bool = True
    audit: bool = True


@dataclass
class ScenarioResult:
    egress: bytes
    setup_time: float
    transfer_time: float
    total_time: float
    session_count: int
    log_paths: dict[str, str]
    manifest: dict
    trace_len: int
    audits: dict[str, AuditLog]
    ue: UserEquipment
    core: CoreNode
    rans: dict[str, RanNode]


def run_scenario(cfg: ScenarioConfig) -> ScenarioResult:
    """Drive directory fetch, circuit build, NG setup, and data transfer on
    the simulated network; raises ScenarioFailure naming the failing phase."""
    dep = cfg.deployment or Deployment.create(ran_count=max(2, cfg.hops), seed=b"scn%d" % cfg.seed)
    ue_identity = crypto.HashDrbg(b"ue-id%d" % cfg.seed).read(16)

    sim = SimNetwork(
        default_link=LinkModel(cfg.bandwidth_bps, cfg.propagation_delay_s),
        record_trace=cfg.record_trace,
    )
    log_dir = Path(cfg.log_dir) if cfg.log_dir else None
    if log_dir:
        log_dir.mkdir(parents=True, exist_ok=True)
    audits: dict[str, AuditLog] = {}

    def audit_for(name: str) -> AuditLog | None:
        if not cfg.audit:
            return None
        audits[name] = AuditLog(str(log_dir / f"{name}.jsonl") if log_dir else None)
        return audits[name]

    sim.register("amf", DirectoryNode("amf", dep.service, clock=sim.clock, audit=audit_for("amf")))
    core = CoreNode(
        "core", dep.core_keys, "core", clock=sim.clock, audit=audit_for("core"), seed=b"core%d" % cfg.seed
    )
    sim.register("core", core)
    rans: dict[str, RanNode] = {}
    for i, (ks, desc) in enumerate(zip(dep.ran_keys, dep.descriptors)):
        name = f"ran{i + 1}"
        rans[name] = RanNode(
            name,
            ks,
            desc,
            dep.snapshot,
            clock=sim.clock,
            audit=audit_for(name),
            seed=b"%s-%d" % (name.encode(), cfg.seed),
        )
        sim.register(name, rans[name])
    ue = UserEquipment(
        "ue",
        ue_identity,
        dep.nssai,
        "amf",
        dep.directory_keys.identity_public,
        seed=b"ue%d" % cfg.seed,
        hops=cfg.hops,
        clock=sim.clock,
        audit=audit_for("ue"),
    )
    sim.register("ue", ue)

    # phase 1: directory fetch, circuit build, NG setup
    for dst, wire in ue.start():
        sim.send("ue", dst, wire)
    sim.run_until_idle()
    if not ue.established:
        raise ScenarioFailure("circuit-build", f"circuit state {ue.circuit and ue.circuit.status}")
    if not core.registered:
        raise ScenarioFailure("ng-setup", "no session registered at the core")
    master_name = ue.path_names()[-1]
    master_addr = ue.circuit.hops[-1].descriptor.address
    if cfg.leak_master:
        rans[master_addr].debug_leak = ue_identity
    setup_time = sim.now

    # phase 2: data
    parts = nsi.partition(ue.circuit.nsi, cfg.hops)
    id_core = parts.parts[-1]
    t0 = sim.now
    for message in cfg.messages:
        for dst, wire in ue.send_data(message):
            sim.send("ue", dst, wire)
    sim.run_until_idle()
    transfer_time = sim.now - t0
    expected = b"".join(cfg.messages)
    egress = core.egress_for(id_core)
    if egress != expected:
        raise ScenarioFailure("data-transfer", f"egress {len(egress)} bytes, expected {len(expected)}")

    for a in audits.values():
        a.close()
    data_samples = []
    for message in cfg.messages:
        if len(message) >= 16:
            mid = len(message) // 2
            data_samples += [message[:16], message[mid : mid + 16], message[-16:]]
        elif message:
            data_samples.append(message)
    manifest = {
        "real_ue_id": ue_identity.hex(),
        "address_core": pack_address("core").hex(),
        "id_core": id_core.hex(),
        "data_samples": sorted({s.hex() for s in data_samples}),
        "entry_nodes": [ue.circuit.hops[0].descriptor.address],
        "interior_nodes": [h.descriptor.address for h in ue.circuit.hops[1:]],
        "core_nodes": ["core"],
        "master": master_name,
    }
    if log_dir:
        (log_dir / "secrets.json").write_text(json.dumps(manifest, indent=2))
    return ScenarioResult(
        egress=egress,
        setup_time=setup_time,
        transfer_time=transfer_time,
        total_time=setup_time + transfer_time,
        session_count=len(core.registered),
        log_paths={n: str(log_dir / f"{n}.jsonl") for n in audits} if log_dir else {},
        manifest=manifest,
        trace_len=len(sim.trace),
        audits=audits,
        ue=ue,
        core=core,
        rans=rans,
    )


# --- benchmark ----------------------------------------------------------------


@dataclass
class BenchmarkConfig:
    sizes_bits: list[int] = field(default_factory=lambda: [s * MEGABIT for s in range(1, 15)])
    iterations: int = 100
    bandwidth_bps: float = DEFAULT_BANDWIDTH
    seed: int = 0
    output_path: str | None = None
    hops: int = 2

    def __post_init__(self):
        if not self.sizes_bits:
            raise ValueError("sizes must be non-empty")
        if sorted(self.sizes_bits) != list(self.sizes_bits):
            raise ValueError("sizes must be ascending")
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")


@dataclass
class BenchmarkRow:
    size_bits: int
    mean_total_s: float
    std_s: float
    setup_s: float
    transfer_s: float


@dataclass
class BenchmarkReport:
    rows: list[BenchmarkRow]
    slope: float
    intercept: float
    r2: float
    wall_seconds: float
    wall_throughput_mbps: float

    def csv_lines(self) -> list[str]:
        lines = ["size_bits,mean_total_s,std_s,setup_s,transfer_s,slope,intercept,r2"]
        for r in self.rows:
            lines.append(
                f"{r.size_bits},{r.mean_total_s:.9f},{r.std_s:.9f},{r.setup_s:.9f},{r.transfer_s:.9f},,,"
            )
        lines.append(f",,,,,{self.slope:.12g},{self.intercept:.12g},{self.r2:.9f}")
        return lines


def run_benchmark(cfg: BenchmarkConfig, progress=None) -> BenchmarkReport:
    """Connection-time experiment: one fresh circuit and transfer per
    iteration per size on the simulated network; reports virtual times plus
    the observed wall-clock throughput (informational only)."""
    dep = Deployment.create(ran_count=max(2, cfg.hops), seed=b"bench%d" % cfg.seed)
    rows: list[BenchmarkRow] = []
    wall_start = time.perf_counter()
    total_bits = 0
    for size_bits in cfg.sizes_bits:
        payload = random.Random(cfg.seed * (1 << 40) + size_bits).randbytes(size_bits // 8)
        totals: list[float] = []
        setups: list[float] = []
        transfers: list[float] = []
        for it in range(cfg.iterations):
            result = run_scenario(
                ScenarioConfig(
                    seed=cfg.seed * 1_000_003 + it,
                    hops=cfg.hops,
                    messages=[payload],
                    bandwidth_bps=cfg.bandwidth_bps,
                    deployment=dep,
                    record_trace=False,
                    audit=False,
                )
            )
            setups.append(result.setup_time)
            transfers.append(result.transfer_time)
            totals.append(result.total_time)
            total_bits += size_bits
        rows.append(
            BenchmarkRow(
                size_bits=size_bits,
                mean_total_s=statistics.fmean(totals),
                std_s=statistics.pstdev(totals),
                setup_s=statistics.fmean(setups),
                transfer_s=statistics.fmean(transfers),
            )
        )
        if progress:
            progress(rows[-1])
    wall = time.perf_counter() - wall_start
    xs = [r.size_bits for r in rows]
    ys = [r.mean_total_s for r in rows]
    if len(rows) > 1:
        fit = statistics.linear_regression(xs, ys)
        slope, intercept = fit.slope, fit.intercept
        r2 = statistics.correlation(xs, ys) ** 2
    else:
        slope, intercept, r2 = 0.0, ys[0], 1.0
    report = BenchmarkReport(
        rows=rows,
        slope=slope,
        intercept=intercept,
        r2=r2,
        wall_seconds=wall,
        wall_throughput_mbps=(total_bits / wall / 1e6) if wall > 0 else 0.0,
    )
    if cfg.output_path:
        Path(cfg.output_path).write_text("\n".join(report.csv_lines()) + "\n")
    return report


# --- anonymity audit ------------------------------------------------------------

AUDIT_RULES = [
    # (node class, manifest keys that must never appear in that node's log)
    ("entry_nodes", ("address_core", "id_core", "data_samples")),
    ("interior_nodes", ("real_ue_id",)),
    ("core_nodes", ("real_ue_id",)),
]


@dataclass
class AuditVerdict:
    passed: bool
    violations: list[str]
    warnings: list[str]
    records_scanned: int

    def __str__(self):
        status = "PASS" if self.passed else "FAIL"
        lines = [f"{status}: {self.records_scanned} log records scanned"]
        lines += [f"  violation: {v}" for v in self.violations]
        lines += [f"  warning: {w}" for w in self.warnings]
        return "\n".join(lines)


def _load_log(path) -> list[dict]:
    records = []
    for line_no, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise MalformedLog(f"{path}:{line_no}: not JSON: {exc}") from exc
        for fieldname in ("node", "kind", "link", "direction", "bytes_hex"):
            if fieldname not in rec:
                raise MalformedLog(f"{path}:{line_no}: missing field {fieldname!r}")
        records.append(rec)
    return records


def run_audit(log_paths, manifest: dict) -> AuditVerdict:
    """Scan per-node logs for forbidden byte strings.

    The manifest names the sensitive values and which node played which
    role; the rules are: entry RANs must never observe the core address,
    the core slice segment, or data samples; every later hop and the core
    must never observe the real UE identity.
    """
    records: list[dict] = []
    for path in log_paths:
        records.extend(_load_log(path))
    violations: list[str] = []
    warnings: list[str] = []
    if not records:
        warnings.append("no log records found; audit passes vacuously")
    by_node: dict[str, list[dict]] = {}
    for rec in records:
        by_node.setdefault(rec["node"], []).append(rec)
    for role, forbidden_keys in AUDIT_RULES:
        for node_name in manifest.get(role, []):
            node_records = by_node.get(node_name, [])
            for key in forbidden_keys:
                needles = manifest[key] if isinstance(manifest[key], list) else [manifest[key]]
                for needle in needles:
                    if not needle:
                        continue
                    for rec in node_records:
                        if needle in rec["bytes_hex"]:
                            violations.append(
                                f"rule '{role} must not observe {key}': "
                                f"{node_name} logged it (kind={rec['kind']})"
                            )
                            break
    return AuditVerdict(not violations, violations, warnings, len(records))


# --- golden vectors -------------------------------------------------------------


def golden_vectors() -> dict[str, str]:
    """Deterministic wire vectors: cells, relay units, URNs, envelope layout."""
    vectors: dict[str, str] = {}
    create = cells.Cell(1, cells.CREATE, bytes(range(256)), epoch=3)
    vectors["cell_create.hex"] = cells.encode_cell(create).hex()
    vectors["cell_empty.hex"] = cells.encode_cell(cells.Cell(0xDEADBEEF, cells.DESTROY, b"\x02")).hex()
    chained = cells.chunk_control(7, cells.NG_SETUP, bytes([i % 251 for i in range(700)]), epoch=1)
    vectors["cell_chained.hex"] = "\n".join(cells.encode_cell(c).hex() for c in chained)
    relay = cells.RelayHeader(cells.RELAY_EXTEND, b"extend-me", digest=b"\x01\x02\x03\x04")
    vectors["relay_extend.hex"] = cells.encode_relay(relay).hex()
    sender = cells.RelaySender(42, b"vector-seed")
    vectors["relay_message.hex"] = "\n".join(w.hex() for w in sender.to_cells(cells.RELAY_DATA, bytes(range(256)) * 4))
    ident = nsi.NsiId(bytes(range(16)))
    vectors["urn.txt"] = nsi.to_urn(nsi.partition(ident, 2))
    vectors["urn_singlehop.txt"] = nsi.to_urn(nsi.partition(ident, 1))
    info_seed = crypto.HashDrbg(b"vector-info")
    from .circuit import InfoRecord

    info = InfoRecord(
        nssai=b"EMBB",
        slice_part_id=bytes.fromhex("0001020304"),
        bearer_context=info_seed.read(8),
        security_info=info_seed.read(16),
        rrc_config=info_seed.read(8),
        ue_identity=info_seed.read(16),
        timestamp_us=1_700_000_000_000_000,
        seqnum=7,
        packet_type=1,
    )
    vectors["info_record.hex"] = info.to_bytes().hex()
    return vectors


def write_vectors(directory) -> list[str]:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    written = []
    for name, content in golden_vectors().items():
        (d / name).write_text(content + "\n")
        written.append(name)
    return written


# --- key=value config files -------------------------------------------------------


def parse_config_file(path) -> dict[str, str]:
    """Line-based key=value files; '#' starts a comment; blank lines skip."""
    out: dict[str, str] = {}
    for line_no, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{line_no}: expected key=value, got {raw!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out
