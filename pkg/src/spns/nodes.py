"""Server-side state machines: the RAN onion router (secondary or master),
the 5G core endpoint, and the directory node, all sans-io.

Each node exposes handle_cell(peer, wire) -> [(destination, wire), ...].
`peer` is an opaque transport handle (the sender); destinations are either
a peer handle (reply on the same association) or an address token (dial).
A node processes one cell at a time; link tables are node-private.

Data messages cut through: a hop forwards each 512-byte cell as soon as it
can, verifying the layer's keyed hash when the message completes and
tearing the circuit down on mismatch.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass

from . import cells, crypto
from .cells import (
    NOT_RECOGNIZED,
    Cell,
    RelayReceiver,
    RelaySender,
    decode_cell,
    decode_tlv,
    encode_cell,
    encode_tlv,
)
from .circuit import (
    DIR_OP_FETCH,
    DIR_OP_PUBLISH,
    DIR_OP_REGISTER_CORE,
    DIR_STATUS_INVALID,
    DIR_STATUS_OK,
    DIR_STATUS_STALE_EPOCH,
    DIRECTORY_LINK,
    LAYER_MAGIC,
    TAG_C_CORE,
    TAG_C_NEXT,
    TAG_CORE_ADDRESS,
    TAG_CORE_DATA,
    TAG_CORE_ID,
    TAG_CREATED_CONFIRM,
    TAG_CREATED_E_MASTER,
    TAG_CREATED_E_SECONDARY,
    TAG_CREATED_HALF,
    TAG_DH_ENVELOPE,
    TAG_DIR_BODY,
    TAG_DIR_OP,
    TAG_DIR_SNAPSHOT,
    TAG_DIR_STATUS,
    TAG_E_PREV,
    TAG_EXTEND_ADDR,
    TAG_EXTEND_C_CORE,
    TAG_EXTEND_C_NEXT,
    TAG_FORWARD_BLOB,
    T_CORE_SIZE,
    InfoRecord,
    unpack_t_core,
)
from .directory import (
    DirectoryService,
    DirectorySnapshot,
    RouterDescriptor,
    descriptor_verify,
    unpack_address,
)
from .errors import (
    AttestationFailure,
    DecryptionFailure,
    DigestMismatch,
    DuplicateLink,
    EpochMismatch,
    InvalidDescriptor,
    LinkExhaustion,
    MalformedInfo,
    ProtocolError,
    SingleRanRejected,
    StaleEpoch,
    UnknownLink,
    UnknownNextHop,
    UnknownSession,
)

# NG setup inner TLV (hybrid-wrapped to the core's short-term key)
TAG_NG_ENVELOPE = 1
TAG_NG_DESCRIPTOR_ENV = 1
TAG_NG_NSSAI = 2
TAG_NG_ID_CORE = 3

TAG_ACK_STATUS = 1
TAG_ACK_TOKEN = 2
ACK_OK = 0
ACK_ATTESTATION = 1
ACK_SINGLE_RAN = 2
ACK_CRYPTO = 3

# core egress message TLV (master RAN -> core)
TAG_EGRESS_ID = 1
TAG_EGRESS_INFO = 2
TAG_EGRESS_DATA = 3

ROLE_UNDETERMINED = "undetermined"
ROLE_SECONDARY = "secondary"
ROLE_MASTER = "master"

_SIGNAL_QUALITY = struct.pack(">i", -70)


def plain_link_seed(link_id: int, direction: str) -> bytes:
    """Relay digest seed for node-to-node links, where the two ends share no
    session key; gives integrity against corruption, while confidentiality
    on such legs comes entirely from the onion layers."""
    return crypto.sha256(b"spns-relay-plain" + struct.pack(">I", link_id) + direction.encode())


class AuditLog:
    """JSON-lines log of every plaintext a node observes.

    One object per event: {node, kind, link, direction, bytes_hex}. This is
    the contract the anonymity audit checks against.
    """

    def __init__(self, path=None):
        self.path = path
        self.records: list[dict] = []
        self._fh = open(path, "a", encoding="utf-8") if path else None

    def write(self, node: str, kind: str, link: int, direction: str, data: bytes) -> None:
        rec = {
            "node": node,
            "kind": kind,
            "link": link,
            "direction": direction,
            "bytes_hex": bytes(data).hex(),
        }
        self.records.append(rec)
        if self._fh:
            self._fh.write(json.dumps(rec, sort_keys=True) + "\n")
            self._fh.flush()

    def close(self):
        if self._fh:
            self._fh.close()
            self._fh = None


@dataclass
class CoreInfoRecord:
    bearer_context: bytes
    ue_identifier: bytes
    uplink_packets: int
    downlink_packets: int
    timestamp_us: int
    security_parameters: bytes
    signal_quality: bytes

    _FMT = struct.Struct(">8s16sQQQ16s4s")

    def to_bytes(self) -> bytes:
        return self._FMT.pack(
            self.bearer_context,
            self.ue_identifier,
            self.uplink_packets,
            self.downlink_packets,
            self.timestamp_us,
            self.security_parameters,
            self.signal_quality,
        )

    @classmethod
    def from_bytes(cls, data: bytes) -> "CoreInfoRecord":
        if len(data) != cls._FMT.size:
            raise MalformedInfo(f"core info record must be {cls._FMT.size} bytes")
        return cls(*cls._FMT.unpack(data))


class _Link:
    """One node-local link: session key (when this node terminates the
    layer), cipher streams, relay messengers, and forwarding pointers."""

    __slots__ = (
        "peer",
        "link_id",
        "session",
        "fwd_in",
        "bwd_out",
        "relay_in",
        "relay_out",
        "next_key",
        "prev_key",
        "to_core",
        "prev_envelopes",
        "last_seq",
        "rx",
        "msg_count",
        "id_core",
        "dial_address",
    )

    def __init__(self, peer, link_id, session=None, keyed_relay=False, downstream=False):
        self.peer = peer
        self.link_id = link_id
        self.session = session
        if session is not None:
            self.fwd_in = crypto.LayerCipherState(session, crypto.FORWARD)
            self.bwd_out = crypto.LayerCipherState(session, crypto.BACKWARD)
        else:
            self.fwd_in = None
            self.bwd_out = None
        # seeds are named for the link direction (forward = toward the core);
        # on a dialed (downstream) link we send forward and receive backward
        in_dir, out_dir = (
            (crypto.BACKWARD, crypto.FORWARD) if downstream else (crypto.FORWARD, crypto.BACKWARD)
        )
        if keyed_relay and session is not None:
            in_seed = session.relay_seed(in_dir)
            out_seed = session.relay_seed(out_dir)
        else:
            in_seed = plain_link_seed(link_id, in_dir)
            out_seed = plain_link_seed(link_id, out_dir)
        self.relay_in = RelayReceiver(in_seed)
        self.relay_out = RelaySender(link_id, out_seed)
        self.next_key = None
        self.prev_key = None
        self.to_core = False
        self.prev_envelopes: list[bytes] = []
        self.last_seq = 0
        self.rx = None
        self.msg_count = 0
        self.id_core = None
        self.dial_address = peer if downstream and isinstance(peer, str) else None


class _DataRx:
    """Incremental state for one inbound relay message on a link."""

    __slots__ = ("cmd", "total", "head", "info", "auth", "route", "discard", "buf", "started")

    def __init__(self, cmd: int, total: int):
        self.cmd = cmd
        self.total = total
        self.head = bytearray()
        self.info: InfoRecord | None = None
        self.auth = None
        self.route = None
        self.discard = False
        self.buf = bytearray()
        self.started = False


class _CoreBlockRoute:
    """Master-side routing of a peeled inner stream (the core block TLVs)
    into the egress message toward the core, cut-through."""

    __slots__ = ("node", "link", "stream", "dst", "parse_buf", "data_left", "parsed")

    def __init__(self, node, link):
        self.node = node
        self.link = link
        self.stream = None
        self.dst = None
        self.parse_buf = bytearray()
        self.data_left = None
        self.parsed = False

    def feed(self, chunk: bytes, outputs: list):
        if not self.parsed:
            self.parse_buf.extend(chunk)
            if not self._try_parse(outputs):
                return
            chunk = b""
        if self.stream is not None and chunk:
            for wire in self.stream.feed(chunk):
                outputs.append((self.dst, wire))

    def _try_parse(self, outputs) -> bool:
        buf = bytes(self.parse_buf)
        try:
            tag1, addr = _read_tlv(buf, 0)
            off = cells.TLV_HEADER + len(addr)
            tag2, id_core = _read_tlv(buf, off)
            off += cells.TLV_HEADER + len(id_core)
            if off + cells.TLV_HEADER > len(buf):
                return False
            tag3, data_len = struct.unpack_from(">BI", buf, off)
            off += cells.TLV_HEADER
        except _NeedMore:
            return False
        if (tag1, tag2, tag3) != (TAG_CORE_ADDRESS, TAG_CORE_ID, TAG_CORE_DATA):
            raise MalformedInfo("core block fields out of order")
        node = self.node
        address = unpack_address(addr)
        node._log("core_block", addr + id_core, self.link.link_id, "in")
        core_link = node.links[self.link.next_key]
        if address != core_link.dial_address:
            raise ProtocolError(f"core block address {address!r} does not match setup")
        if core_link.id_core is not None and bytes(id_core) != core_link.id_core:
            raise ProtocolError("core block slice segment does not match setup")
        self.parsed = True
        self.data_left = data_len
        core_link.msg_count += 1
        info = self.link.rx.info
        record = CoreInfoRecord(
            bearer_context=info.bearer_context,
            ue_identifier=info.ue_identity,
            uplink_packets=core_link.msg_count,
            downlink_packets=0,
            timestamp_us=int(node.clock() * 1e6),
            security_parameters=node.session_token or b"\x00" * 16,
            signal_quality=_SIGNAL_QUALITY,
        ).to_bytes()
        head = encode_tlv([(TAG_EGRESS_ID, bytes(id_core)), (TAG_EGRESS_INFO, record)])
        total = len(head) + cells.TLV_HEADER + data_len
        self.dst = core_link.peer
        self.stream = core_link.relay_out.open(cells.RELAY_DATA, total)
        first = head + struct.pack(">BI", TAG_EGRESS_DATA, data_len) + buf[off:]
        for wire in self.stream.feed(first):
            outputs.append((self.dst, wire))
        self.parse_buf = bytearray()
        return True

    def finish(self, outputs: list):
        if self.stream is None:
            raise MalformedInfo("core block never completed its header")
        for wire in self.stream.finish():
            outputs.append((self.dst, wire))


class _NeedMore(Exception):
    pass


def _read_tlv(buf: bytes, off: int):
    if off + cells.TLV_HEADER > len(buf):
        raise _NeedMore()
    tag, length = struct.unpack_from(">BI", buf, off)
    if off + cells.TLV_HEADER + length > len(buf):
        raise _NeedMore()
    return tag, buf[off + cells.TLV_HEADER : off + cells.TLV_HEADER + length]


class _ForwardRoute:
    """Streams a peeled inner blob down the next link as a DATA message."""

    __slots__ = ("dst", "stream")

    def __init__(self, out_link: "_Link", total: int):
        self.dst = out_link.peer
        self.stream = out_link.relay_out.open(cells.RELAY_DATA, total)

    def feed(self, chunk: bytes, outputs: list):
        if chunk:
            for wire in self.stream.feed(chunk):
                outputs.append((self.dst, wire))

    def finish(self, outputs: list):
        for wire in self.stream.finish():
            outputs.append((self.dst, wire))


class _BufferRoute:
    """Buffers a whole message (used when the core session is not yet
    acknowledged); flushed by the node later."""

    __slots__ = ("buf",)

    def __init__(self):
        self.buf = bytearray()

    def feed(self, chunk: bytes, outputs: list):
        self.buf.extend(chunk)

    def finish(self, outputs: list):
        pass


class _NodeBase:
    def __init__(self, name: str, clock=None, audit: AuditLog | None = None):
        self.name = name
        self.clock = clock or (lambda: 0.0)
        self.audit = audit
        self.links: dict[tuple, _Link] = {}
        self._assembly: dict[tuple, bytearray] = {}

    def _log(self, kind: str, data: bytes = b"", link: int = 0, direction: str = "in"):
        if self.audit is not None:
            self.audit.write(self.name, kind, link, direction, data)

    def _assemble(self, peer, cell: Cell) -> bytes | None:
        key = (peer, cell.link_id, cell.command)
        buf = self._assembly.setdefault(key, bytearray())
        buf.extend(cell.payload)
        if cell.more:
            return None
        del self._assembly[key]
        return bytes(buf)

    def _find_link(self, peer, link_id: int) -> _Link:
        link = self.links.get((peer, link_id))
        if link is not None:
            return link
        # stream transports may reconnect with a fresh handle; rebind when
        # the link id is unambiguous. Links keyed by address token were
        # dialed by us and never rebind.
        matches = [k for k in self.links if k[1] == link_id and not isinstance(k[0], str)]
        if len(matches) == 1:
            old = matches[0]
            link = self.links.pop(old)
            link.peer = peer
            self.links[(peer, link_id)] = link
            for other in self.links.values():
                if other.next_key == old:
                    other.next_key = (peer, link_id)
                if other.prev_key == old:
                    other.prev_key = (peer, link_id)
            return link
        raise UnknownLink(f"no link {link_id} with this peer")

    def _destroy(self, link: _Link, reason: int) -> list:
        self._log("destroy_sent", bytes([reason]), link.link_id, "out")
        return [
            (link.peer, encode_cell(Cell(link.link_id, cells.DESTROY, bytes([reason]))))
        ]

    def _teardown(self, link_key, reason: int, notify=(), seen=None) -> list:
        """Remove a link and cascade along its forwarding pointers."""
        seen = seen if seen is not None else set()
        if link_key in seen or link_key not in self.links:
            return []
        seen.add(link_key)
        link = self.links.pop(link_key)
        outputs = self._destroy(link, reason) if link_key not in notify else []
        for neighbor in (link.next_key, link.prev_key):
            if neighbor:
                outputs += self._teardown(neighbor, reason, notify, seen)
        return outputs


class RanNode(_NodeBase):
    """RAN onion router; plays secondary or master depending on what its
    CREATE payload carries."""

    def __init__(
        self,
        name: str,
        keyset: crypto.NodeKeySet,
        descriptor: RouterDescriptor,
        snapshot: DirectorySnapshot,
        group: crypto.DhGroup | None = None,
        clock=None,
        audit: AuditLog | None = None,
        seed=None,
        debug_leak: bytes | None = None,
    ):
        super().__init__(name, clock, audit)
        self.keyset = keyset
        self.descriptor = descriptor
        self.snapshot = snapshot
        self.group = group or crypto.DhGroup.default()
        self.role_hint = ROLE_UNDETERMINED
        self.drbg = crypto.HashDrbg(seed if seed is not None else keyset.fingerprint)
        self.debug_leak = debug_leak
        self.session_token: bytes | None = None
        self.session_ready = False
        self._pending_egress: list[tuple] = []

    # -- reactor --

    def handle_cell(self, peer, wire: bytes) -> list:
        # fast path: relay cells dominate traffic and carry full payloads
        if len(wire) == cells.CELL_SIZE and wire[4] == cells.RELAY:
            try:
                return self.handle_relay(peer, int.from_bytes(wire[:4], "big"), wire[14:])
            except UnknownLink:
                self._log("unknown_link", b"", int.from_bytes(wire[:4], "big"), "in")
                return []
            except (DecryptionFailure, DigestMismatch, MalformedInfo) as exc:
                self._log("crypto_failure", str(exc).encode()[:64], 0, "in")
                reason = cells.REASON_DIGEST if isinstance(exc, DigestMismatch) else cells.REASON_CRYPTO
                return self._fail_link(peer, int.from_bytes(wire[:4], "big"), reason)
            except ProtocolError as exc:
                self._log("protocol_failure", str(exc).encode()[:64], 0, "in")
                return self._fail_link(peer, int.from_bytes(wire[:4], "big"), cells.REASON_PROTOCOL)
        cell = decode_cell(wire)
        try:
            if cell.command == cells.CREATE:
                payload = self._assemble(peer, cell)
                return [] if payload is None else self.handle_create(peer, cell.link_id, payload)
            if cell.command == cells.CREATED:
                payload = self._assemble(peer, cell)
                return [] if payload is None else self._handle_created_control(peer, cell.link_id, payload)
            if cell.command == cells.DESTROY:
                reason = cell.payload[0] if cell.payload else 0
                self._log("destroy_received", bytes([reason]), cell.link_id, "in")
                try:
                    link = self._find_link(peer, cell.link_id)
                except UnknownLink:
                    return []
                key = (link.peer, link.link_id)
                return self._teardown(key, reason, notify={key})
            if cell.command == cells.NG_SETUP_ACK:
                payload = self._assemble(peer, cell)
                return [] if payload is None else self._handle_ack(peer, cell.link_id, payload)
        except (UnknownLink,) as exc:
            self._log("unknown_link", b"", cell.link_id, "in")
            return []
        except DuplicateLink:
            return [
                (peer, encode_cell(Cell(cell.link_id, cells.DESTROY, bytes([cells.REASON_DUPLICATE_LINK]))))
            ]
        except (DecryptionFailure, DigestMismatch, MalformedInfo) as exc:
            self._log("crypto_failure", str(exc).encode()[:64], cell.link_id, "in")
            reason = cells.REASON_DIGEST if isinstance(exc, DigestMismatch) else cells.REASON_CRYPTO
            return self._fail_link(peer, cell.link_id, reason)
        except EpochMismatch:
            return self._fail_link(peer, cell.link_id, cells.REASON_EPOCH)
        except UnknownNextHop:
            return self._fail_link(peer, cell.link_id, cells.REASON_UNROUTABLE)
        except ProtocolError as exc:
            self._log("protocol_failure", str(exc).encode()[:64], cell.link_id, "in")
            return self._fail_link(peer, cell.link_id, cells.REASON_PROTOCOL)
        return []

    def _fail_link(self, peer, link_id: int, reason: int) -> list:
        try:
            link = self._find_link(peer, link_id)
        except UnknownLink:
            return [(peer, encode_cell(Cell(link_id, cells.DESTROY, bytes([reason]))))]
        return self._teardown((link.peer, link.link_id), reason)

    # -- link setup --

    def _alloc_link_id(self) -> int:
        used = {k[1] for k in self.links}
        for _ in range(64):
            candidate = int.from_bytes(self.drbg.read(4), "big")
            if candidate and candidate not in used:
                return candidate
        raise LinkExhaustion("could not allocate a fresh link id")

    def handle_create(self, peer, link_id: int, payload: bytes) -> list:
        """CREATE handler: entry handshake, or the forwarded create that
        carries core information and makes this node the master."""
        if (peer, link_id) in self.links:
            self._log("duplicate_link", b"", link_id, "in")
            raise DuplicateLink(f"link {link_id} already exists")
        fields = decode_tlv(payload)
        tags = [t for t, _ in fields]
        self._log("create_received", b"", link_id, "in")
        if TAG_DH_ENVELOPE in tags:
            return self._entry_create(peer, link_id, dict(fields))
        if TAG_C_NEXT in tags and TAG_C_CORE in tags:
            return self.handle_create_with_core(peer, link_id, fields)
        if TAG_C_NEXT in tags:
            return self._middle_create(peer, link_id, fields)
        raise ProtocolError("create payload carries no handshake")

    def _respond_dh(self, envelope_bytes: bytes):
        env = crypto.HybridEnvelope.from_bytes(envelope_bytes)
        their_half = self.group.decode_element(crypto.hybrid_decrypt(self.keyset.onion, env))
        mine = crypto.dh_generate(self.group, self.drbg)
        session = crypto.dh_shared_secret(mine, their_half, self.group)
        return mine, session

    def _entry_create(self, peer, link_id: int, fields: dict) -> list:
        mine, session = self._respond_dh(fields[TAG_DH_ENVELOPE])
        link = _Link(peer, link_id, session, keyed_relay=True)
        self.links[(peer, link_id)] = link
        created = encode_tlv(
            [
                (TAG_CREATED_HALF, self.group.encode_element(mine.public_half)),
                (TAG_CREATED_CONFIRM, session.confirmation_hash),
            ]
        )
        self._log("created_sent", b"", link_id, "out")
        return [(peer, encode_cell(c)) for c in cells.chunk_control(link_id, cells.CREATED, created)]

    def _middle_create(self, peer, link_id: int, fields: list) -> list:
        """Create forwarded by another RAN without core information: this
        node is an interior hop of a longer circuit."""
        fdict = dict(fields)
        mine, session = self._respond_dh(fdict[TAG_C_NEXT])
        link = _Link(peer, link_id, session, keyed_relay=False)
        link.prev_envelopes = [v for t, v in fields if t == TAG_E_PREV]
        self.links[(peer, link_id)] = link
        created = encode_tlv(
            [
                (TAG_CREATED_HALF, self.group.encode_element(mine.public_half)),
                (TAG_CREATED_CONFIRM, session.confirmation_hash),
            ]
        )
        self._log("created_sent", b"", link_id, "out")
        return [(peer, encode_cell(c)) for c in cells.chunk_control(link_id, cells.CREATED, created)]

    def handle_create_with_core(self, peer, link_id: int, fields: list) -> list:
        """Master-side create: unwrap the half-key and the core hint, answer
        CREATED upstream and fire NG setup toward the core atomically."""
        fdict = dict(fields)
        mine, session = self._respond_dh(fdict[TAG_C_NEXT])
        slice_request = crypto.hybrid_decrypt(
            self.keyset.onion, crypto.HybridEnvelope.from_bytes(fdict[TAG_C_CORE])
        )
        if len(slice_request) < T_CORE_SIZE + 4:
            raise MalformedInfo("slice request too short")
        core_address, epoch, core_fp = unpack_t_core(slice_request[:T_CORE_SIZE])
        nssai = slice_request[T_CORE_SIZE : T_CORE_SIZE + 4]
        id_core = slice_request[T_CORE_SIZE + 4 :]
        self._log("core_hint", slice_request, link_id, "in")
        if epoch != self.snapshot.epoch:
            raise EpochMismatch(f"core hint epoch {epoch}, directory epoch {self.snapshot.epoch}")
        if core_fp != self.snapshot.core_fingerprint:
            raise EpochMismatch("core key fingerprint does not match the directory")
        prev_envelopes = [v for t, v in fields if t == TAG_E_PREV]

        link = _Link(peer, link_id, session, keyed_relay=False)
        link.prev_envelopes = prev_envelopes
        self.links[(peer, link_id)] = link
        self.role_hint = ROLE_MASTER

        own_envelope = crypto.hybrid_encrypt(
            self.snapshot.core_public, self.descriptor.to_bytes(), self.drbg
        ).to_bytes()
        created_items = [
            (TAG_CREATED_HALF, self.group.encode_element(mine.public_half)),
            (TAG_CREATED_CONFIRM, session.confirmation_hash),
            (TAG_CREATED_E_MASTER, own_envelope),
        ]
        created_items += [(TAG_CREATED_E_SECONDARY, env) for env in prev_envelopes]
        created = encode_tlv(created_items)

        ng_inner_items = [(TAG_NG_DESCRIPTOR_ENV, env) for env in prev_envelopes]
        ng_inner_items.append((TAG_NG_DESCRIPTOR_ENV, own_envelope))
        ng_inner_items += [(TAG_NG_NSSAI, nssai), (TAG_NG_ID_CORE, id_core)]
        ng_envelope = crypto.hybrid_encrypt(
            self.snapshot.core_public, encode_tlv(ng_inner_items), self.drbg
        )
        ng_payload = encode_tlv([(TAG_NG_ENVELOPE, ng_envelope.to_bytes())])

        core_link_id = self._alloc_link_id()
        core_link = _Link(core_address, core_link_id, downstream=True)
        core_link.to_core = True
        core_link.id_core = bytes(id_core)
        core_link.prev_key = (peer, link_id)
        self.links[(core_address, core_link_id)] = core_link
        link.next_key = (core_address, core_link_id)

        self._log("created_sent", b"", link_id, "out")
        self._log("ng_setup_sent", b"", core_link_id, "out")
        outputs = [(peer, encode_cell(c)) for c in cells.chunk_control(link_id, cells.CREATED, created)]
        outputs += [
            (core_address, encode_cell(c))
            for c in cells.chunk_control(core_link_id, cells.NG_SETUP, ng_payload)
        ]
        return outputs

    def _handle_ack(self, peer, link_id: int, payload: bytes) -> list:
        link = self._find_link(peer, link_id)
        fields = dict(decode_tlv(payload))
        status = fields.get(TAG_ACK_STATUS, b"\xff")[0]
        if status != ACK_OK:
            self._log("ng_rejected", bytes([status]), link_id, "in")
            return self._teardown((link.peer, link.link_id), cells.REASON_PROTOCOL)
        self.session_token = fields.get(TAG_ACK_TOKEN, b"")
        self.session_ready = True
        self._log("ng_ack", b"", link_id, "in")
        outputs: list = []
        for dst, stream_bytes in self._pending_egress:
            for wire in stream_bytes:
                outputs.append((dst, wire))
        self._pending_egress.clear()
        return outputs

    # -- relay handling --

    def handle_relay(self, peer, link_id: int, payload: bytes) -> list:
        link = self._find_link(peer, link_id)
        progress = link.relay_in.feed(payload)
        if progress is NOT_RECOGNIZED:
            self._log("relay_digest_fail", b"", link_id, "in")
            raise DigestMismatch("relay unit failed recognition")
        if link.session is not None:
            return self._session_rx(link, progress)
        return self._plain_rx(link, progress)

    def _session_rx(self, link: _Link, progress) -> list:
        rx = link.rx
        if rx is None:
            rx = link.rx = _DataRx(progress.relay_cmd, progress.total)
        plain = link.fwd_in.process(progress.new_bytes)
        done = progress.received >= progress.total
        if rx.cmd == cells.RELAY_DATA and rx.info is not None and not rx.discard:
            # steady state: authenticated pass-through of body bytes
            rx.auth.update(plain)
            outputs: list = []
            rx.route.feed(plain, outputs)
            if done:
                link.rx = None
                if rx.auth.digest()[:16] != rx.info.security_info:
                    self._log("layer_digest_fail", b"", link.link_id, "in")
                    raise DigestMismatch("layer security hash mismatch")
                rx.route.finish(outputs)
                self._log("forwarded", b"", link.link_id, "out")
            return outputs
        outputs = []
        if rx.cmd == cells.RELAY_EXTEND:
            rx.buf.extend(plain)
            if done:
                link.rx = None
                outputs += self.handle_extend(link, bytes(rx.buf))
        elif rx.cmd == cells.RELAY_DATA:
            outputs += self._data_chunk(link, rx, plain, done)
            if done:
                link.rx = None
        else:
            raise ProtocolError(f"unexpected relay command {rx.cmd} on session link")
        return outputs

    def _plain_rx(self, link: _Link, progress) -> list:
        """Backward traffic on a forwarding link: wrap it one layer up."""
        rx = link.rx
        if rx is None:
            rx = link.rx = _DataRx(progress.relay_cmd, progress.total)
        rx.buf.extend(progress.new_bytes)
        if not progress.done:
            return []
        link.rx = None
        if rx.cmd != cells.RELAY_EXTENDED:
            self._log("unsupported_backward", bytes([rx.cmd]), link.link_id, "in")
            return []
        if link.prev_key is None:
            raise ProtocolError("backward traffic on a link with no upstream")
        up = self.links[link.prev_key]
        content = encode_tlv([(TAG_FORWARD_BLOB, bytes(rx.buf))])
        body = up.bwd_out.process(content)
        self._log("forwarded", b"", up.link_id, "out")
        return [(up.peer, wire) for wire in up.relay_out.to_cells(cells.RELAY_EXTENDED, body)]

    # -- extend --

    def handle_extend(self, link: _Link, content: bytes) -> list:
        """Act on a decrypted EXTEND: allocate the next link, append our
        encrypted descriptor, and fire CREATE toward the next hop. A
        forward-wrapped blob instead streams down the existing next link."""
        fields = decode_tlv(content)
        fdict = dict(fields)
        if TAG_FORWARD_BLOB in fdict:
            if link.next_key is None:
                raise ProtocolError("forward blob but no next link")
            nxt = self.links[link.next_key]
            self._log("forwarded", b"", nxt.link_id, "out")
            return [
                (nxt.peer, wire)
                for wire in nxt.relay_out.to_cells(cells.RELAY_EXTEND, fdict[TAG_FORWARD_BLOB])
            ]
        self._log("extend_content", content, link.link_id, "in")
        try:
            address = unpack_address(fdict[TAG_EXTEND_ADDR])
            c_next = fdict[TAG_EXTEND_C_NEXT]
        except KeyError as exc:
            raise MalformedInfo("extend content missing fields") from exc
        known = {d.address for d in self.snapshot.descriptors}
        if address not in known:
            raise UnknownNextHop(f"address {address!r} not in the directory")
        own_envelope = crypto.hybrid_encrypt(
            self.snapshot.core_public, self.descriptor.to_bytes(), self.drbg
        ).to_bytes()
        create_items = [(TAG_C_NEXT, c_next)]
        if TAG_EXTEND_C_CORE in fdict:
            create_items.append((TAG_C_CORE, fdict[TAG_EXTEND_C_CORE]))
        create_items += [(TAG_E_PREV, env) for env in link.prev_envelopes]
        create_items.append((TAG_E_PREV, own_envelope))

        next_id = self._alloc_link_id()
        down = _Link(address, next_id, downstream=True)
        down.prev_key = (link.peer, link.link_id)
        self.links[(address, next_id)] = down
        link.next_key = (address, next_id)
        if self.role_hint == ROLE_UNDETERMINED:
            self.role_hint = ROLE_SECONDARY
        self._log("create_forwarded", b"", next_id, "out")
        return [
            (address, encode_cell(c))
            for c in cells.chunk_control(next_id, cells.CREATE, encode_tlv(create_items))
        ]

    def _handle_created_control(self, peer, link_id: int, payload: bytes) -> list:
        """CREATED from our downstream: relay it upstream as EXTENDED under
        our upstream layer."""
        link = self._find_link(peer, link_id)
        if link.prev_key is None:
            raise ProtocolError("created on a link with no upstream")
        up = self.links[link.prev_key]
        if up.session is None:
            raise ProtocolError("upstream link has no session")
        body = up.bwd_out.process(payload)
        self._log("extended_sent", b"", up.link_id, "out")
        return [(up.peer, wire) for wire in up.relay_out.to_cells(cells.RELAY_EXTENDED, body)]

    # -- data path --

    def _data_chunk(self, link: _Link, rx: _DataRx, plain: bytes, done: bool) -> list:
        outputs: list = []
        if rx.info is None:
            rx.head.extend(plain)
            if len(rx.head) < 4:
                if done:
                    raise MalformedInfo("data message shorter than a layer header")
                return outputs
            if bytes(rx.head[:2]) != LAYER_MAGIC:
                raise DigestMismatch("layer head marker absent")
            (info_len,) = struct.unpack_from(">H", rx.head, 2)
            if len(rx.head) < 4 + info_len:
                if done:
                    raise MalformedInfo("data message truncated inside its info record")
                return outputs
            info_bytes = bytes(rx.head[4 : 4 + info_len])
            rx.info = InfoRecord.from_bytes(info_bytes)
            leftover = bytes(rx.head[4 + info_len :])
            rx.head = bytearray()
            zeroed_head = (
                LAYER_MAGIC
                + struct.pack(">H", info_len)
                + info_bytes[: rx.info.security_offset()]
                + b"\x00" * 16
                + info_bytes[rx.info.security_offset() + 16 :]
            )
            rx.auth = hashlib.sha256(link.session.key_bytes + crypto.LAYER_AUTH_TAG + zeroed_head)
            self._log("info_record", info_bytes, link.link_id, "in")
            if self.debug_leak is not None:
                self._log("debug_leak", self.debug_leak, link.link_id, "in")
            if rx.info.seqnum <= link.last_seq:
                self._log("replay_rejected", struct.pack(">Q", rx.info.seqnum), link.link_id, "in")
                rx.discard = True
            else:
                link.last_seq = rx.info.seqnum
                inner_total = rx.total - 4 - info_len
                rx.route = self._open_route(link, inner_total)
            plain = leftover
        if plain and not rx.discard:
            rx.auth.update(plain)
            rx.route.feed(plain, outputs)
        elif plain:
            rx.auth.update(plain)
        if done and not rx.discard:
            if rx.auth.digest()[:16] != rx.info.security_info:
                self._log("layer_digest_fail", b"", link.link_id, "in")
                raise DigestMismatch("layer security hash mismatch")
            rx.route.finish(outputs)
            self._log("forwarded", b"", link.link_id, "out")
        return outputs

    def _open_route(self, link: _Link, inner_total: int):
        if link.next_key is None:
            raise ProtocolError("data on an unextended circuit")
        nxt = self.links[link.next_key]
        if nxt.to_core:
            if not self.session_ready:
                route = _PendingCoreRoute(self, link)
                return route
            return _CoreBlockRoute(self, link)
        return _ForwardRoute(nxt, inner_total)


class _PendingCoreRoute(_BufferRoute):
    """Core session not acknowledged yet: buffer, replay through a real
    core route once the whole message is here (ACK is expected shortly)."""

    __slots__ = ("node", "link")

    def __init__(self, node: RanNode, link: _Link):
        super().__init__()
        self.node = node
        self.link = link

    def finish(self, outputs: list):
        inner = _CoreBlockRoute(self.node, self.link)
        staged: list = []
        inner.feed(bytes(self.buf), staged)
        inner.finish(staged)
        if self.node.session_ready:
            outputs.extend(staged)
        else:
            by_dst: dict = {}
            for dst, wire in staged:
                by_dst.setdefault(dst, []).append(wire)
            for dst, wires in by_dst.items():
                self.node._pending_egress.append((dst, wires))


class CoreNode(_NodeBase):
    """The 5G core endpoint: attests RAN descriptor pairs at NG setup,
    registers slice sessions, and absorbs uplink data."""

    def __init__(
        self,
        name: str,
        keyset: crypto.NodeKeySet,
        address: str,
        clock=None,
        audit: AuditLog | None = None,
        seed=None,
        egress_dir=None,
    ):
        super().__init__(name, clock, audit)
        self.keyset = keyset
        self.address = address
        self.registered: dict[bytes, dict] = {}
        self.attestations: dict[bytes, list[RouterDescriptor]] = {}
        self.deliveries: list[dict] = []
        self.drbg = crypto.HashDrbg(seed if seed is not None else keyset.fingerprint)
        self.egress_dir = egress_dir

    def handle_cell(self, peer, wire: bytes) -> list:
        if len(wire) == cells.CELL_SIZE and wire[4] == cells.RELAY:
            try:
                return self._handle_relay(peer, int.from_bytes(wire[:4], "big"), wire[14:])
            except UnknownLink:
                self._log("unknown_link", b"", int.from_bytes(wire[:4], "big"), "in")
                return []
            except ProtocolError as exc:
                self._log("protocol_failure", str(exc).encode()[:64], 0, "in")
                return []
        cell = decode_cell(wire)
        try:
            if cell.command == cells.NG_SETUP:
                payload = self._assemble(peer, cell)
                if payload is None:
                    return []
                try:
                    return self.core_handle_ng_setup(peer, cell.link_id, payload)
                except (AttestationFailure, InvalidDescriptor):
                    return self._reject(peer, cell.link_id, ACK_ATTESTATION)
                except SingleRanRejected:
                    return self._reject(peer, cell.link_id, ACK_SINGLE_RAN)
                except DecryptionFailure:
                    return self._reject(peer, cell.link_id, ACK_CRYPTO)
            if cell.command == cells.DESTROY:
                self._log("destroy_received", cell.payload[:1], cell.link_id, "in")
                self.links.pop((peer, cell.link_id), None)
                return []
        except UnknownLink:
            self._log("unknown_link", b"", cell.link_id, "in")
            return []
        except ProtocolError as exc:
            self._log("protocol_failure", str(exc).encode()[:64], cell.link_id, "in")
            return []
        return []

    def _reject(self, peer, link_id: int, status: int) -> list:
        self._log("ng_rejected", bytes([status]), link_id, "out")
        ack = encode_tlv([(TAG_ACK_STATUS, bytes([status]))])
        return [
            (peer, encode_cell(c)) for c in cells.chunk_control(link_id, cells.NG_SETUP_ACK, ack)
        ]

    def core_handle_ng_setup(self, peer, link_id: int, payload: bytes) -> list:
        """Verify the forwarded descriptors and activate the slice session.

        At least two distinct verified RAN descriptors are required; the
        session is keyed by the core's slice-ID segment.
        """
        fields = dict(decode_tlv(payload))
        if TAG_NG_ENVELOPE not in fields:
            raise DecryptionFailure("NG setup carries no envelope")
        inner = crypto.hybrid_decrypt(
            self.keyset.onion, crypto.HybridEnvelope.from_bytes(fields[TAG_NG_ENVELOPE])
        )
        self._log("ng_setup_received", b"", link_id, "in")
        descriptor_envs = []
        nssai = b""
        id_core = b""
        for tag, value in decode_tlv(inner):
            if tag == TAG_NG_DESCRIPTOR_ENV:
                descriptor_envs.append(value)
            elif tag == TAG_NG_NSSAI:
                nssai = value
            elif tag == TAG_NG_ID_CORE:
                id_core = value
        descriptors = []
        for env in descriptor_envs:
            blob = crypto.hybrid_decrypt(self.keyset.onion, crypto.HybridEnvelope.from_bytes(env))
            d = RouterDescriptor.from_bytes(blob)
            if not descriptor_verify(d):
                raise AttestationFailure(f"descriptor for {d.node_name!r} failed verification")
            self._log("descriptor_verified", blob, link_id, "in")
            descriptors.append(d)
        distinct = {d.fingerprint for d in descriptors}
        if len(distinct) < 2:
            raise SingleRanRejected(f"{len(distinct)} distinct RAN(s); dual connectivity needs 2")
        token = self.drbg.read(16)
        session = {
            "token": token,
            "nssai": bytes(nssai),
            "id_core": bytes(id_core),
            "descriptors": descriptors,
            "uplink_packets": 0,
            "downlink_packets": 0,
            "egress": bytearray(),
            "infos": [],
            "registered_at": self.clock(),
        }
        self.registered[bytes(id_core)] = session
        self.attestations[token] = descriptors
        link = _Link(peer, link_id)
        link.id_core = bytes(id_core)
        self.links[(peer, link_id)] = link
        self._log("session_registered", id_core, link_id, "in")
        ack = encode_tlv([(TAG_ACK_STATUS, bytes([ACK_OK])), (TAG_ACK_TOKEN, token)])
        return [
            (peer, encode_cell(c)) for c in cells.chunk_control(link_id, cells.NG_SETUP_ACK, ack)
        ]

    def _handle_relay(self, peer, link_id: int, payload: bytes) -> list:
        link = self._find_link(peer, link_id)
        progress = link.relay_in.feed(payload)
        if progress is NOT_RECOGNIZED:
            self._log("relay_digest_fail", b"", link_id, "in")
            return []
        rx = link.rx
        if rx is None:
            rx = link.rx = _DataRx(progress.relay_cmd, progress.total)
        rx.buf.extend(progress.new_bytes)
        if not progress.done:
            return []
        link.rx = None
        if rx.cmd != cells.RELAY_DATA:
            self._log("unsupported_command", bytes([rx.cmd]), link_id, "in")
            return []
        fields = dict(decode_tlv(bytes(rx.buf)))
        try:
            id_core = fields[TAG_EGRESS_ID]
            info_core = fields[TAG_EGRESS_INFO]
            data = fields[TAG_EGRESS_DATA]
        except KeyError as exc:
            raise MalformedInfo("egress message missing fields") from exc
        try:
            self.core_deliver(id_core, data, info_core)
        except UnknownSession:
            self._log("unknown_session", id_core, link_id, "in")
        return []

    def core_deliver(self, id_core: bytes, data: bytes, info_core: bytes) -> dict:
        """Append data to the slice's egress sink and bump its counters."""
        session = self.registered.get(bytes(id_core))
        if session is None:
            raise UnknownSession(f"no session for segment {bytes(id_core).hex()}")
        record = CoreInfoRecord.from_bytes(info_core)
        session["egress"].extend(data)
        session["uplink_packets"] += 1
        session["infos"].append(record)
        if self.egress_dir is not None:
            from pathlib import Path

            out = Path(self.egress_dir) / f"{bytes(id_core).hex()}.bin"
            with open(out, "ab") as fh:
                fh.write(data)
        delivery = {
            "id_core": bytes(id_core),
            "size": len(data),
            "uplink_packets": session["uplink_packets"],
            "time": self.clock(),
        }
        self.deliveries.append(delivery)
        self._log("info_core", info_core, 0, "in")
        self._log("delivered", data, 0, "in")
        return delivery

    def egress_for(self, id_core: bytes) -> bytes:
        session = self.registered.get(bytes(id_core))
        return bytes(session["egress"]) if session else b""


class DirectoryNode(_NodeBase):
    """Cell-facing front of the DirectoryService (the AMF)."""

    def __init__(self, name: str, service: DirectoryService, clock=None, audit: AuditLog | None = None):
        super().__init__(name, clock, audit)
        self.service = service

    def handle_cell(self, peer, wire: bytes) -> list:
        cell = decode_cell(wire)
        if cell.command != cells.NG_SETUP or cell.link_id != DIRECTORY_LINK:
            return []
        payload = self._assemble(peer, cell)
        if payload is None:
            return []
        fields = dict(decode_tlv(payload))
        op = fields.get(TAG_DIR_OP, b"\x00")[0]
        body = fields.get(TAG_DIR_BODY, b"")
        if op == DIR_OP_FETCH:
            expected = struct.unpack(">I", body)[0] if len(body) == 4 else None
            try:
                snapshot = self.service.fetch_snapshot(expected)
            except StaleEpoch:
                self._log("fetch_stale", b"", 0, "in")
                return self._dir_reply(peer, DIR_STATUS_STALE_EPOCH, b"")
            self._log("fetch", b"", 0, "in")
            return self._dir_reply(peer, DIR_STATUS_OK, snapshot.to_bytes())
        if op == DIR_OP_PUBLISH:
            try:
                self.service.publish(RouterDescriptor.from_bytes(body))
            except InvalidDescriptor:
                self._log("publish_rejected", b"", 0, "in")
                return self._dir_reply(peer, DIR_STATUS_INVALID, b"")
            self._log("publish", b"", 0, "in")
            return self._dir_reply(peer, DIR_STATUS_OK, b"")
        if op == DIR_OP_REGISTER_CORE:
            inner = dict(decode_tlv(body))
            public = crypto.onion_public_from_bytes(inner[1])
            address = inner[2].decode()
            epoch = self.service.register_core(public, address)
            self._log("core_registered", struct.pack(">I", epoch), 0, "in")
            return self._dir_reply(peer, DIR_STATUS_OK, struct.pack(">I", epoch))
        return self._dir_reply(peer, DIR_STATUS_INVALID, b"")

    def _dir_reply(self, peer, status: int, body: bytes) -> list:
        payload = encode_tlv([(TAG_DIR_STATUS, bytes([status])), (TAG_DIR_SNAPSHOT, body)])
        return [
            (peer, encode_cell(c))
            for c in cells.chunk_control(DIRECTORY_LINK, cells.NG_SETUP_ACK, payload)
        ]


def directory_publish_cells(descriptor: RouterDescriptor) -> list[bytes]:
    payload = encode_tlv(
        [(TAG_DIR_OP, bytes([DIR_OP_PUBLISH])), (TAG_DIR_BODY, descriptor.to_bytes())]
    )
    return [encode_cell(c) for c in cells.chunk_control(DIRECTORY_LINK, cells.NG_SETUP, payload)]


def directory_register_core_cells(core_public, core_address: str) -> list[bytes]:
    body = encode_tlv([(1, crypto.onion_public_bytes(core_public)), (2, core_address.encode())])
    payload = encode_tlv([(TAG_DIR_OP, bytes([DIR_OP_REGISTER_CORE])), (TAG_DIR_BODY, body)])
    return [encode_cell(c) for c in cells.chunk_control(DIRECTORY_LINK, cells.NG_SETUP, payload)]
