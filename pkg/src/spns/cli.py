"""Command-line front end.

    spns keygen     generate node key material
    spns directory  run the directory (AMF) over TCP
    spns ran        run a RAN onion router over TCP
    spns core       run the 5G core endpoint over TCP
    spns ue-build   build a circuit and persist its state
    spns ue-send    send a file through a persisted circuit
    spns bench      connection-time benchmark on the simulated network
    spns audit      scan node logs for forbidden byte strings
    spns vectors    dump golden wire vectors

Exit codes: 0 ok, 1 scenario/audit failure, 2 usage error. Flags may come
from a key=value --config file; explicit flags win. SPNS_LOG sets
verbosity.
"""

from __future__ import annotations

import argparse
import json
import selectors
import socket
import sys
import threading
import time
from pathlib import Path

from . import cells, crypto
from .circuit import (
    DIR_STATUS_OK,
    TAG_DIR_SNAPSHOT,
    TAG_DIR_STATUS,
    UserEquipment,
    directory_fetch_cells,
    dump_circuit_state,
    load_circuit_state,
)
from .directory import DirectoryService, DirectorySnapshot
from .errors import ProtocolError, ScenarioFailure
from .harness import (
    MEGABIT,
    BenchmarkConfig,
    configure_logging,
    parse_config_file,
    run_audit,
    run_benchmark,
    write_vectors,
)
from .nodes import (
    AuditLog,
    CoreNode,
    DirectoryNode,
    RanNode,
    directory_publish_cells,
    directory_register_core_cells,
)
from .sockets import SocketNode


def _parse_peers(args) -> dict[str, tuple[str, int]]:
    peers: dict[str, tuple[str, int]] = {}
    entries = []
    if getattr(args, "peers_file", None):
        entries += [f"{k}={v}" for k, v in parse_config_file(args.peers_file).items()]
    if getattr(args, "peers", None):
        entries += args.peers.split(",")
    for entry in entries:
        if not entry.strip():
            continue
        token, _, hostport = entry.partition("=")
        host, _, port = hostport.rpartition(":")
        peers[token.strip()] = (host.strip(), int(port))
    return peers


def _parse_hostport(value: str) -> tuple[str, int]:
    host, _, port = value.rpartition(":")
    return host, int(port)


def _apply_config(args: argparse.Namespace) -> argparse.Namespace:
    if getattr(args, "config", None):
        file_values = parse_config_file(args.config)
        for key, value in file_values.items():
            attr = key.replace("-", "_")
            if getattr(args, attr, None) in (None, False):
                setattr(args, attr, value)
    return args


# --- tiny request/response client against the directory ------------------------


def _dir_exchange(hostport: tuple[str, int], wires: list[bytes]) -> bytes:
    """Send directory-plane cells, assemble the chained reply payload."""
    assembler = cells.ControlAssembler()
    with socket.create_connection(hostport, timeout=10) as conn:
        for wire in wires:
            conn.sendall(wire)
        buf = bytearray()
        while True:
            chunk = conn.recv(8192)
            if not chunk:
                raise ProtocolError("directory closed the connection")
            buf.extend(chunk)
            while len(buf) >= cells.CELL_SIZE:
                cell = cells.decode_cell(bytes(buf[: cells.CELL_SIZE]))
                del buf[: cells.CELL_SIZE]
                if cell.command != cells.NG_SETUP_ACK:
                    continue
                payload = assembler.feed(cell)
                if payload is not None:
                    return payload


def fetch_snapshot_via_socket(hostport: tuple[str, int]) -> DirectorySnapshot:
    payload = _dir_exchange(hostport, directory_fetch_cells())
    fields = dict(cells.decode_tlv(payload))
    if fields.get(TAG_DIR_STATUS, b"\xff")[0] != DIR_STATUS_OK:
        raise ProtocolError("directory fetch rejected")
    return DirectorySnapshot.from_bytes(fields[TAG_DIR_SNAPSHOT])


# --- subcommands -----------------------------------------------------------------


def cmd_keygen(args) -> int:
    out = Path(args.out)
    if args.role == "ue":
        out.mkdir(parents=True, exist_ok=True)
        seed = bytes.fromhex(args.seed) if args.seed else None
        ue_id = crypto.HashDrbg(seed).read(16) if seed else __import__("secrets").token_bytes(16)
        (out / "ue.json").write_text(json.dumps({"ue_id": ue_id.hex()}))
        print(f"wrote {out / 'ue.json'}")
        return 0
    keyset = crypto.NodeKeySet.generate(bytes.fromhex(args.seed) if args.seed else None)
    keyset.save(out)
    (out / "identity.pub").write_text(
        crypto.identity_public_bytes(keyset.identity_public).hex() + "\n"
    )
    print(f"wrote keyset to {out} (fingerprint {keyset.fingerprint.hex()})")
    return 0


def cmd_directory(args) -> int:
    keyset = crypto.NodeKeySet.load(args.keys)
    service = DirectoryService(keyset)
    node = DirectoryNode("amf", service)
    server = SocketNode(node, args.host, args.port).start()
    print(f"directory listening on {server.address[0]}:{server.port}")
    return _serve_forever(server)


def cmd_core(args) -> int:
    keyset = crypto.NodeKeySet.load(args.keys)
    audit = AuditLog(args.log) if args.log else None
    if args.egress_dir:
        Path(args.egress_dir).mkdir(parents=True, exist_ok=True)
    node = CoreNode("core", keyset, args.address, clock=time.time, audit=audit, egress_dir=args.egress_dir)
    peers = _parse_peers(args)
    peers["amf"] = _parse_hostport(args.directory)
    server = SocketNode(node, args.host, args.port, peers).start()
    server.inject(
        [("amf", wire) for wire in directory_register_core_cells(keyset.onion_public, args.address)]
    )
    print(f"core listening on {server.address[0]}:{server.port}")
    return _serve_forever(server)


def cmd_ran(args) -> int:
    from .directory import descriptor_sign

    keyset = crypto.NodeKeySet.load(args.keys)
    nssai = args.nssai.encode()
    if len(nssai) != 4:
        print("NSSAI tag must be exactly 4 bytes", file=sys.stderr)
        return 2
    descriptor = descriptor_sign(
        node_name=args.name,
        gnb_id=args.gnb_id,
        location_area=args.location_area,
        supported_nssai=[nssai],
        slice_part=bytes.fromhex(args.slice_part),
        keyset=keyset,
        address=args.address,
    )
    dir_hostport = _parse_hostport(args.directory)
    _dir_exchange(dir_hostport, directory_publish_cells(descriptor))
    snapshot = fetch_snapshot_via_socket(dir_hostport)
    audit = AuditLog(args.log) if args.log else None
    node = RanNode(args.name, keyset, descriptor, snapshot, clock=time.time, audit=audit)
    peers = _parse_peers(args)
    peers["amf"] = dir_hostport
    server = SocketNode(node, args.host, args.port, peers).start()

    def refresh():
        # later-joining RANs only become routable after a refetch
        while True:
            time.sleep(args.refresh)
            try:
                node.snapshot = fetch_snapshot_via_socket(dir_hostport)
            except OSError:
                pass

    threading.Thread(target=refresh, daemon=True).start()
    print(f"ran {args.name!r} ({args.address}) listening on {server.address[0]}:{server.port}")
    return _serve_forever(server)


def _serve_forever(server: SocketNode) -> int:
    try:
        while True:
            time.sleep(3600)
    except KeyboardInterrupt:
        server.close()
        return 0


class _UeDriver:
    """Blocking socket pump for the sans-io UE."""

    def __init__(self, ue: UserEquipment, peers: dict[str, tuple[str, int]]):
        self.ue = ue
        self.peers = peers
        self.socks: dict[str, socket.socket] = {}
        self.selector = selectors.DefaultSelector()
        self.buffers: dict[str, bytearray] = {}

    def _sock(self, token: str) -> socket.socket:
        if token not in self.socks:
            conn = socket.create_connection(self.peers[token], timeout=10)
            conn.setblocking(False)
            self.socks[token] = conn
            self.buffers[token] = bytearray()
            self.selector.register(conn, selectors.EVENT_READ, token)
        return self.socks[token]

    def send(self, outputs) -> None:
        for dst, wire in outputs:
            sock = self._sock(dst)
            sock.setblocking(True)
            sock.sendall(wire)
            sock.setblocking(False)

    def pump_until(self, predicate, timeout: float = 15.0) -> None:
        deadline = time.monotonic() + timeout
        while not predicate():
            remaining = deadline - time.monotonic()
            if remaining <= 0:
                raise ScenarioFailure("socket-pump", "timed out waiting for the network")
            for key, _ in self.selector.select(remaining):
                token = key.data
                try:
                    chunk = key.fileobj.recv(65536)
                except BlockingIOError:
                    continue
                if not chunk:
                    raise ScenarioFailure("socket-pump", f"{token} closed the connection")
                buf = self.buffers[token]
                buf.extend(chunk)
                while len(buf) >= cells.CELL_SIZE:
                    wire = bytes(buf[: cells.CELL_SIZE])
                    del buf[: cells.CELL_SIZE]
                    self.send(self.ue.handle_cell(token, wire))

    def close(self):
        for conn in self.socks.values():
            try:
                conn.close()
            except OSError:
                pass


def cmd_ue_build(args) -> int:
    peers = _parse_peers(args)
    peers["amf"] = _parse_hostport(args.directory)
    directory_identity = crypto.identity_public_from_bytes(
        bytes.fromhex(Path(args.directory_pub).read_text().strip())
    )
    ue_id = bytes.fromhex(json.loads((Path(args.ue_keys) / "ue.json").read_text())["ue_id"])
    nssai = args.nssai.encode()
    ue = UserEquipment(
        "ue",
        ue_id,
        nssai,
        "amf",
        directory_identity,
        seed=args.seed.encode() if args.seed else b"ue-build",
        hops=args.hops,
        clock=time.time,
    )
    driver = _UeDriver(ue, peers)
    try:
        driver.send(ue.start())
        driver.pump_until(lambda: ue.established, timeout=args.timeout)
    finally:
        driver.close()
    state = dump_circuit_state(ue.circuit)
    Path(args.state).write_text(json.dumps(state, indent=2))
    print(f"circuit established via {' -> '.join(ue.path_names())}; state in {args.state}")
    return 0


def cmd_ue_send(args) -> int:
    peers = _parse_peers(args)
    state = json.loads(Path(args.state).read_text())
    circ = load_circuit_state(state)
    data = Path(args.file).read_bytes()
    onion_cells = []
    from .circuit import build_onion

    onion = build_onion(circ, data, int(time.time() * 1e6))
    onion_cells = circ.relay_out.to_cells(cells.RELAY_DATA, onion.ciphertext)
    entry = circ.hops[0].descriptor.address
    with socket.create_connection(peers[entry], timeout=10) as conn:
        for wire in onion_cells:
            conn.sendall(wire)
    Path(args.state).write_text(json.dumps(dump_circuit_state(circ), indent=2))
    print(f"sent {len(data)} bytes in {len(onion_cells)} cells via {entry}")
    return 0


def _parse_sizes(spec: str, unit: str) -> list[int]:
    scale = MEGABIT if unit == "Mb" else 8 * 1024 * 1024
    out: list[int] = []
    for part in spec.split(","):
        part = part.strip()
        if ":" in part:
            lo, hi = part.split(":")
            out.extend(s * scale for s in range(int(lo), int(hi) + 1))
        elif part:
            out.append(int(part) * scale)
    return out


def cmd_bench(args) -> int:
    def progress(row):
        print(
            f"  {row.size_bits / MEGABIT:g} Mb: total {row.mean_total_s:.4f}s "
            f"(setup {row.setup_s:.4f}s, transfer {row.transfer_s:.4f}s, std {row.std_s:.2g})"
        )

    if args.hops_sweep:
        lo, _, hi = args.hops_sweep.partition(":")
        hop_counts = list(range(int(lo), int(hi or lo) + 1))
    else:
        hop_counts = [args.hops]
    for hops in hop_counts:
        csv_path = args.csv
        if csv_path and len(hop_counts) > 1:
            base, dot, ext = args.csv.rpartition(".")
            csv_path = f"{base}-h{hops}.{ext}" if dot else f"{args.csv}-h{hops}"
        cfg = BenchmarkConfig(
            sizes_bits=_parse_sizes(args.sizes, args.unit),
            iterations=args.iters,
            bandwidth_bps=args.bandwidth,
            seed=args.seed,
            output_path=csv_path,
            hops=hops,
        )
        if len(hop_counts) > 1:
            print(f"hops={hops}:")
        try:
            report = run_benchmark(cfg, progress=progress)
        except ScenarioFailure as exc:
            print(f"benchmark failed: {exc}", file=sys.stderr)
            return 1
        print(
            f"fit: slope {report.slope * MEGABIT:.6f} s/Mb, intercept {report.intercept:.6f} s, "
            f"r2 {report.r2:.6f}"
        )
        print(
            f"wall clock: {report.wall_seconds:.1f}s for the sweep "
            f"({report.wall_throughput_mbps:.1f} Mb/s through the full stack; informational)"
        )
        if csv_path:
            print(f"csv written to {csv_path}")
    return 0


def cmd_audit(args) -> int:
    log_dir = Path(args.logs)
    manifest_path = Path(args.manifest) if args.manifest else log_dir / "secrets.json"
    manifest = json.loads(manifest_path.read_text())
    paths = sorted(log_dir.glob("*.jsonl"))
    verdict = run_audit(paths, manifest)
    print(verdict)
    return 0 if verdict.passed else 1


def cmd_vectors(args) -> int:
    written = write_vectors(args.out)
    print(f"wrote {len(written)} vector files to {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="spns", description=__doc__.splitlines()[0])
    parser.add_argument("--config", help="key=value file supplying defaults for flags")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("keygen", help="generate key material")
    p.add_argument("--out", required=True)
    p.add_argument("--role", choices=["ran", "core", "directory", "ue"], default="ran")
    p.add_argument("--seed", help="hex seed for a deterministic identity key")
    p.set_defaults(func=cmd_keygen)

    p = sub.add_parser("directory", help="run the directory service")
    p.add_argument("--keys", required=True)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=7001)
    p.set_defaults(func=cmd_directory)

    p = sub.add_parser("core", help="run the 5G core endpoint")
    p.add_argument("--keys", required=True)
    p.add_argument("--address", default="core")
    p.add_argument("--directory", required=True, help="host:port of the directory")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=7002)
    p.add_argument("--peers")
    p.add_argument("--peers-file")
    p.add_argument("--egress-dir")
    p.add_argument("--log")
    p.set_defaults(func=cmd_core)

    p = sub.add_parser("ran", help="run a RAN onion router")
    p.add_argument("--keys", required=True)
    p.add_argument("--name", required=True)
    p.add_argument("--address", required=True, help="logical address token, <= 12 bytes")
    p.add_argument("--directory", required=True)
    p.add_argument("--gnb-id", type=int, default=1)
    p.add_argument("--location-area", type=int, default=1)
    p.add_argument("--nssai", default="EMBB")
    p.add_argument("--slice-part", default="1010101010", help="hex slice segment capability")
    p.add_argument("--refresh", type=float, default=5.0, help="directory refetch interval, seconds")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=0)
    p.add_argument("--peers")
    p.add_argument("--peers-file")
    p.add_argument("--log")
    p.set_defaults(func=cmd_ran)

    p = sub.add_parser("ue-build", help="build a circuit and save its state")
    p.add_argument("--directory", required=True)
    p.add_argument("--directory-pub", required=True, help="pinned directory identity key (hex file)")
    p.add_argument("--ue-keys", required=True)
    p.add_argument("--state", required=True)
    p.add_argument("--hops", type=int, default=2)
    p.add_argument("--nssai", default="EMBB")
    p.add_argument("--seed")
    p.add_argument("--timeout", type=float, default=15.0)
    p.add_argument("--peers")
    p.add_argument("--peers-file")
    p.set_defaults(func=cmd_ue_build)

    p = sub.add_parser("ue-send", help="send a file through a saved circuit")
    p.add_argument("--state", required=True)
    p.add_argument("--file", required=True)
    p.add_argument("--peers")
    p.add_argument("--peers-file")
    p.set_defaults(func=cmd_ue_send)

    p = sub.add_parser("bench", help="connection-time benchmark (simulated network)")
    p.add_argument("--sizes", default="1:14", help="Mb values, e.g. 1:14 or 1,5,10")
    p.add_argument("--iters", type=int, default=100)
    p.add_argument("--unit", choices=["Mb", "MB"], default="Mb")
    p.add_argument("--bandwidth", type=float, default=10_000_000.0)
    p.add_argument("--hops", type=int, default=2)
    p.add_argument("--hops-sweep", help="e.g. 2:4; one sweep per hop count")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--csv")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("audit", help="anonymity audit over node logs")
    p.add_argument("--logs", required=True, help="directory of *.jsonl node logs")
    p.add_argument("--manifest", help="secrets manifest (default: logs/secrets.json)")
    p.set_defaults(func=cmd_audit)

    p = sub.add_parser("vectors", help="dump golden wire vectors")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_vectors)
    return parser


def main(argv=None) -> int:
    configure_logging()
    parser = build_parser()
    args = parser.parse_args(argv)
    _apply_config(args)
    try:
        return args.func(args)
    except ScenarioFailure as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
