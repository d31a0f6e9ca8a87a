"""UE-side circuit construction and the onion build/peel of data payloads.

Layer framing, forward direction: each hop's layer decrypts (one continuous
AES-CTR segment per hop) to

    "SL" | u16 info_len | info record | inner

where inner is the next layer's ciphertext, except at the last hop where it
is the core block TLV (ADDRESS_CORE, ID_CORE, Data). The info record's
security_info field holds a keyed truncated hash over the whole frame
(computed with the field zeroed), so every hop can verify its layer's
integrity; the leading marker makes a wrong-key peel fail closed.

Handshake payloads (TLV tags):

    CREATE  to entry RAN:   1=hybrid envelope of our DH half
    CREATE  via extend:     2=C_next, 3=C_core, 4=E_prev-descriptor
    CREATED:                1=responder half, 2=confirmation hash,
                            [3=E_master, 4=E_secondary] when the responder
                            also reached the core
    EXTEND  relay content:  1=next address, 2=C_next, 3=C_core
    EXTENDED relay content: the CREATED payload verbatim, or 5=opaque blob
                            to pass further down an n-hop circuit
"""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass, field

from . import cells, crypto, nsi
from .cells import (
    NOT_RECOGNIZED,
    Cell,
    ControlAssembler,
    RelayReceiver,
    RelaySender,
    decode_tlv,
    encode_cell,
    encode_tlv,
)
from .directory import (
    ADDRESS_SIZE,
    DirectorySnapshot,
    RouterDescriptor,
    pack_address,
    select_path,
    select_route,
    unpack_address,
)
from .errors import (
    CircuitNotEstablished,
    DigestMismatch,
    KeyConfirmMismatch,
    MalformedInfo,
    ProtocolError,
    StateError,
)

LAYER_MAGIC = b"SL"
T_CORE_SIZE = ADDRESS_SIZE + 4 + 8  # address | epoch u32 | core key fingerprint

# TLV tags for handshake payloads
TAG_DH_ENVELOPE = 1
TAG_C_NEXT = 2
TAG_C_CORE = 3
TAG_E_PREV = 4

TAG_CREATED_HALF = 1
TAG_CREATED_CONFIRM = 2
TAG_CREATED_E_MASTER = 3
TAG_CREATED_E_SECONDARY = 4

TAG_EXTEND_ADDR = 1
TAG_EXTEND_C_NEXT = 2
TAG_EXTEND_C_CORE = 3
TAG_FORWARD_BLOB = 5

TAG_CORE_ADDRESS = 1
TAG_CORE_ID = 2
TAG_CORE_DATA = 3

PACKET_TYPE_DATA = 1


def pack_t_core(core_address: str, epoch: int, core_fingerprint: bytes) -> bytes:
    if len(core_fingerprint) != 8:
        raise ValueError("core fingerprint must be 8 bytes")
    return pack_address(core_address) + struct.pack(">I", epoch) + core_fingerprint


def unpack_t_core(data: bytes) -> tuple[str, int, bytes]:
    if len(data) != T_CORE_SIZE:
        raise ValueError(f"core hint must be {T_CORE_SIZE} bytes")
    address = unpack_address(data[:ADDRESS_SIZE])
    (epoch,) = struct.unpack_from(">I", data, ADDRESS_SIZE)
    return address, epoch, data[ADDRESS_SIZE + 4 :]


# --- per-hop info record -----------------------------------------------------


@dataclass
class InfoRecord:
    nssai: bytes
    slice_part_id: bytes
    bearer_context: bytes
    security_info: bytes
    rrc_config: bytes
    ue_identity: bytes
    timestamp_us: int
    seqnum: int
    packet_type: int

    _HEAD = struct.Struct(">4sB")
    _TAIL = struct.Struct(">8s16s8s16sQQB")

    def to_bytes(self) -> bytes:
        if len(self.slice_part_id) > 255:
            raise ValueError("slice part too long")
        return self._HEAD.pack(self.nssai, len(self.slice_part_id)) + self.slice_part_id + self._TAIL.pack(
            self.bearer_context,
            self.security_info,
            self.rrc_config,
            self.ue_identity,
            self.timestamp_us,
            self.seqnum,
            self.packet_type,
        )

    @classmethod
    def from_bytes(cls, data: bytes) -> "InfoRecord":
        try:
            nssai, part_len = cls._HEAD.unpack_from(data, 0)
            part = data[5 : 5 + part_len]
            if len(part) != part_len:
                raise MalformedInfo("info record truncated in slice part")
            tail = cls._TAIL.unpack_from(data, 5 + part_len)
        except struct.error as exc:
            raise MalformedInfo(f"info record truncated: {exc}") from exc
        if 5 + part_len + cls._TAIL.size != len(data):
            raise MalformedInfo("info record has trailing bytes")
        return cls(nssai, part, *tail)

    @classmethod
    def size_for(cls, part_len: int) -> int:
        return cls._HEAD.size + part_len + cls._TAIL.size

    def security_offset(self) -> int:
        """Offset of the security_info field within the serialized record."""
        return self._HEAD.size + len(self.slice_part_id) + 8


def layer_auth(key: crypto.SessionKey, frame_with_zeroed_security: bytes) -> bytes:
    return crypto.sha256(key.key_bytes + crypto.LAYER_AUTH_TAG + frame_with_zeroed_security)[:16]


@dataclass
class OnionMessage:
    ciphertext: bytes
    seqnum: int


# --- circuit state -----------------------------------------------------------


class CircuitStatus(enum.Enum):
    BUILDING = "building"
    EXTENDING = "extending"
    ESTABLISHED = "established"
    FAILED = "failed"
    CLOSED = "closed"


@dataclass
class HopState:
    descriptor: RouterDescriptor
    pending: crypto.DhKeyPair | None = None
    session: crypto.SessionKey | None = None
    forward: crypto.LayerCipherState | None = None
    backward: crypto.LayerCipherState | None = None

    @property
    def confirmed(self) -> bool:
        return self.session is not None


class CircuitState:
    """One UE-side circuit: ordered hops, negotiated keys, cipher streams."""

    def __init__(
        self,
        entry_link_id: int,
        slice_id: nsi.NsiId,
        nssai: bytes,
        ue_identity: bytes,
        seed,
        group: crypto.DhGroup | None = None,
    ):
        if entry_link_id == 0:
            raise ValueError("entry link id must be nonzero")
        self.entry_link_id = entry_link_id
        self.nsi = slice_id
        self.nssai = nssai
        self.ue_identity = ue_identity
        self.group = group or crypto.DhGroup.default()
        self.status = CircuitStatus.BUILDING
        self.hops: list[HopState] = []
        self.seq_counter = 0
        self.drbg = crypto.HashDrbg(seed)
        self.pseudonym = self.drbg.read(16)
        self.bearer_context = self.drbg.read(8)
        self.rrc_config = self.drbg.read(8)
        self.planned_hops = 2
        self.core_address: str | None = None
        self.core_id_part: bytes | None = None
        self.stored_envelopes: list[bytes] = []
        # entry-link relay messengers, installed once hop 1 confirms
        self.relay_out: RelaySender | None = None
        self.relay_in: RelayReceiver | None = None

    @property
    def established(self) -> bool:
        return self.status is CircuitStatus.ESTABLISHED

    def hop_identity(self, index: int) -> bytes:
        """Entry hop sees the real UE identity; later hops a per-circuit pseudonym."""
        return self.ue_identity if index == 0 else self.pseudonym

    def partition_parts(self) -> nsi.NsiPartition:
        return nsi.partition(self.nsi, len(self.hops))

    def next_seq(self) -> int:
        self.seq_counter += 1
        return self.seq_counter


def build_create(circ: CircuitState, target: RouterDescriptor) -> list[Cell]:
    """First-hop CREATE: our DH half, hybrid-wrapped to the target's onion key.

    Returns the CREATE message as a chained cell sequence (a 2048-bit
    half-key envelope does not fit one payload).
    """
    if circ.status is not CircuitStatus.BUILDING:
        raise StateError(f"create not legal in state {circ.status.value}")
    if circ.hops:
        raise StateError("create already sent; awaiting response")
    pair = crypto.dh_generate(circ.group, circ.drbg)
    circ.hops.append(HopState(target, pending=pair))
    envelope = crypto.hybrid_encrypt(
        target.onion_public, circ.group.encode_element(pair.public_half), circ.drbg
    )
    payload = encode_tlv([(TAG_DH_ENVELOPE, envelope.to_bytes())])
    return cells.chunk_control(circ.entry_link_id, cells.CREATE, payload)


def handle_created(circ: CircuitState, link_id: int, payload: bytes) -> bool:
    """Process an assembled CREATED (or relayed EXTENDED) payload.

    Returns True when the newest hop is confirmed; False when the message
    is not for this circuit and was ignored. Raises KeyConfirmMismatch on
    a wrong confirmation hash, which fails the circuit.
    """
    if circ.status not in (CircuitStatus.BUILDING, CircuitStatus.EXTENDING):
        raise StateError(f"created not expected in state {circ.status.value}")
    if link_id != circ.entry_link_id:
        return False
    hop = circ.hops[-1]
    if hop.pending is None:
        raise StateError("no handshake outstanding")
    fields = dict(decode_tlv(payload))
    try:
        their_half = circ.group.decode_element(fields[TAG_CREATED_HALF])
        their_confirm = fields[TAG_CREATED_CONFIRM]
    except KeyError as exc:
        raise KeyConfirmMismatch("created payload missing handshake fields") from exc
    session = crypto.dh_shared_secret(hop.pending, their_half, circ.group)
    if their_confirm != session.confirmation_hash:
        circ.status = CircuitStatus.FAILED
        raise KeyConfirmMismatch(f"hop {len(circ.hops)} confirmation hash mismatch")
    hop.session = session
    hop.pending = None
    hop.forward = crypto.LayerCipherState(session, crypto.FORWARD)
    hop.backward = crypto.LayerCipherState(session, crypto.BACKWARD)
    for tag in (TAG_CREATED_E_MASTER, TAG_CREATED_E_SECONDARY):
        if tag in fields:
            circ.stored_envelopes.append(fields[tag])
    if len(circ.hops) == 1:
        circ.relay_out = RelaySender(circ.entry_link_id, session.relay_seed(crypto.FORWARD))
        circ.relay_in = RelayReceiver(session.relay_seed(crypto.BACKWARD))
    if len(circ.hops) == circ.planned_hops:
        circ.status = CircuitStatus.ESTABLISHED
    return True


def build_extend(
    circ: CircuitState, next_hop: RouterDescriptor, core_hint: bytes | None
) -> list[bytes]:
    """Extend through the entry hop: EXTEND relay message whose content is
    (next address, C_next, C_core), stream-encrypted under hop 1 forward.

    core_hint is the packed core routing hint; it is wrapped, together with
    the slice request the master will need for NG setup, to the next hop's
    onion key so the entry RAN learns nothing about the core.
    """
    if not circ.hops or not circ.hops[0].confirmed:
        raise StateError("hop 1 not established")
    if any(h.pending for h in circ.hops):
        raise StateError("handshake already outstanding")
    pair = crypto.dh_generate(circ.group, circ.drbg)
    is_last = len(circ.hops) + 1 == circ.planned_hops
    c_next = crypto.hybrid_encrypt(
        next_hop.onion_public, circ.group.encode_element(pair.public_half), circ.drbg
    )
    items = [
        (TAG_EXTEND_ADDR, pack_address(next_hop.address)),
        (TAG_EXTEND_C_NEXT, c_next.to_bytes()),
    ]
    if is_last:
        if core_hint is None:
            raise StateError("final extend requires the core hint")
        parts = nsi.partition(circ.nsi, circ.planned_hops)
        slice_request = core_hint + circ.nssai + parts.parts[-1]
        c_core = crypto.hybrid_encrypt(next_hop.onion_public, slice_request, circ.drbg)
        items.append((TAG_EXTEND_C_CORE, c_core.to_bytes()))
    content = encode_tlv(items)
    # wrap for pass-through hops beyond hop 1, innermost first
    for hop in reversed(circ.hops[1:]):
        content = encode_tlv([(TAG_FORWARD_BLOB, hop.forward.process(content))])
    body = circ.hops[0].forward.process(content)
    circ.hops.append(HopState(next_hop, pending=pair))
    circ.status = CircuitStatus.EXTENDING
    return circ.relay_out.to_cells(cells.RELAY_EXTEND, body)


def handle_extended(circ: CircuitState, content: bytes) -> bool:
    """Unwrap an EXTENDED relay content down to the CREATED payload."""
    depth = 0
    while True:
        fields = dict(decode_tlv(content))
        if TAG_FORWARD_BLOB not in fields:
            break
        depth += 1
        if depth >= len(circ.hops):
            raise ProtocolError("forward wrapping deeper than the circuit")
        content = circ.hops[depth].backward.process(fields[TAG_FORWARD_BLOB])
    return handle_created(circ, circ.entry_link_id, content)


# --- data phase ---------------------------------------------------------------


def _make_frame(info_bytes: bytes, inner: bytes) -> bytes:
    return LAYER_MAGIC + struct.pack(">H", len(info_bytes)) + info_bytes + inner


def build_onion(circ: CircuitState, data: bytes, timestamp_us: int = 0) -> OnionMessage:
    """Nest the per-hop info records and user data into layered ciphertext.

    The innermost layer carries the core address, the core's slice-ID
    segment, and the data; each wrapping layer prepends that hop's info
    record and encrypts with its forward stream. Advances every hop's
    forward keystream, so onions must be transmitted in build order.
    """
    if not circ.established:
        raise CircuitNotEstablished(f"circuit is {circ.status.value}")
    if circ.core_address is None:
        raise CircuitNotEstablished("core address unknown")
    parts = circ.partition_parts()
    seq = circ.next_seq()
    inner = encode_tlv(
        [
            (TAG_CORE_ADDRESS, pack_address(circ.core_address)),
            (TAG_CORE_ID, parts.parts[-1]),
            (TAG_CORE_DATA, data),
        ]
    )
    for i in range(len(circ.hops) - 1, -1, -1):
        hop = circ.hops[i]
        info = InfoRecord(
            nssai=circ.nssai,
            slice_part_id=parts.parts[i],
            bearer_context=circ.bearer_context,
            security_info=b"\x00" * 16,
            rrc_config=circ.rrc_config,
            ue_identity=circ.hop_identity(i),
            timestamp_us=timestamp_us,
            seqnum=seq,
            packet_type=PACKET_TYPE_DATA,
        )
        info_bytes = info.to_bytes()
        frame = bytearray(_make_frame(info_bytes, inner))
        sec_off = 4 + info.security_offset()
        mac = layer_auth(hop.session, bytes(frame))
        frame[sec_off : sec_off + 16] = mac
        inner = hop.forward.process(bytes(frame))
    return OnionMessage(inner, seq)


def parse_frame(plaintext: bytes) -> tuple[InfoRecord, bytes, bytes]:
    """Split a decrypted layer into (info, inner, zeroed-frame-for-auth).

    Raises DigestMismatch when the head marker is absent (wrong key or
    tampering) and MalformedInfo when the structure is truncated.
    """
    if len(plaintext) < 4:
        raise MalformedInfo("layer shorter than its header")
    if plaintext[:2] != LAYER_MAGIC:
        raise DigestMismatch("layer head marker absent; wrong key or corrupted stream")
    (info_len,) = struct.unpack_from(">H", plaintext, 2)
    if 4 + info_len > len(plaintext):
        raise MalformedInfo("layer shorter than its info record")
    info = InfoRecord.from_bytes(plaintext[4 : 4 + info_len])
    sec_off = 4 + info.security_offset()
    zeroed = plaintext[:sec_off] + b"\x00" * 16 + plaintext[sec_off + 16 :]
    return info, plaintext[4 + info_len :], zeroed


def peel_layer(key_state: crypto.LayerCipherState, layer_ciphertext: bytes) -> tuple[InfoRecord, bytes]:
    """Strip one onion layer: returns this hop's info record and the inner
    blob, exactly as the UE produced it for the next layer."""
    plaintext = key_state.process(layer_ciphertext)
    info, inner, zeroed = parse_frame(plaintext)
    if layer_auth(key_state.key, zeroed) != info.security_info:
        raise DigestMismatch("layer security hash mismatch")
    return info, inner


# --- the UE reactor ------------------------------------------------------------

DIRECTORY_LINK = 0
DIR_OP_FETCH = 1
DIR_OP_PUBLISH = 2
DIR_OP_REGISTER_CORE = 3
TAG_DIR_OP = 1
TAG_DIR_BODY = 2
TAG_DIR_STATUS = 1
TAG_DIR_SNAPSHOT = 2
DIR_STATUS_OK = 0
DIR_STATUS_STALE_EPOCH = 1
DIR_STATUS_INVALID = 2


def directory_fetch_cells(expected_epoch: int | None = None) -> list[bytes]:
    body = b"" if expected_epoch is None else struct.pack(">I", expected_epoch)
    payload = encode_tlv([(TAG_DIR_OP, bytes([DIR_OP_FETCH])), (TAG_DIR_BODY, body)])
    return [encode_cell(c) for c in cells.chunk_control(DIRECTORY_LINK, cells.NG_SETUP, payload)]


class UserEquipment:
    """Sans-io UE: feed it cells, it returns (address, cell) pairs to send.

    Drives the full sequence: directory fetch, path selection, first-hop
    CREATE, extend to the master, then data transfer over the finished
    circuit.
    """

    def __init__(
        self,
        name: str,
        ue_identity: bytes,
        nssai: bytes,
        directory_address: str,
        directory_identity,
        seed,
        group: crypto.DhGroup | None = None,
        hops: int = 2,
        clock=None,
        audit=None,
        slice_id: nsi.NsiId | None = None,
    ):
        self.name = name
        self.ue_identity = ue_identity
        self.nssai = nssai
        self.directory_address = directory_address
        self.directory_identity = directory_identity
        self.drbg = crypto.HashDrbg(seed)
        self.group = group
        self.hops = hops
        self.clock = clock or (lambda: 0.0)
        self.audit = audit
        self.snapshot: DirectorySnapshot | None = None
        self.circuit: CircuitState | None = None
        self._assembler = ControlAssembler()
        self._path = None
        self._slice_id = slice_id or self._draw_slice_id()
        self._established_at: float | None = None
        self._relay_buf = bytearray()

    def _draw_slice_id(self) -> nsi.NsiId:
        while True:
            candidate = self.drbg.read(nsi.NSI_SIZE)
            if candidate != nsi.UNASSIGNED:
                return nsi.NsiId(candidate)

    def _log(self, kind: str, data: bytes = b"", link: int = 0, direction: str = "out"):
        if self.audit is not None:
            self.audit.write(self.name, kind, link, direction, data)

    @property
    def established(self) -> bool:
        return self.circuit is not None and self.circuit.established

    @property
    def established_at(self) -> float | None:
        return self._established_at

    def start(self) -> list[tuple[str, bytes]]:
        """Kick off: fetch the directory snapshot."""
        self._log("directory_fetch")
        return [(self.directory_address, wire) for wire in directory_fetch_cells()]

    def handle_cell(self, peer, wire: bytes) -> list[tuple[str, bytes]]:
        cell = cells.decode_cell(wire)
        if cell.command == cells.NG_SETUP_ACK and cell.link_id == DIRECTORY_LINK:
            payload = self._assembler.feed(cell)
            if payload is None:
                return []
            return self._on_directory_reply(payload)
        if self.circuit is None:
            return []
        if cell.command == cells.CREATED and cell.link_id == self.circuit.entry_link_id:
            payload = self._assembler.feed(cell)
            if payload is None:
                return []
            return self._on_created(payload)
        if cell.command == cells.RELAY and cell.link_id == self.circuit.entry_link_id:
            return self._on_relay(cell.payload)
        if cell.command == cells.DESTROY and cell.link_id == self.circuit.entry_link_id:
            reason = cell.payload[0] if cell.payload else 0
            self._log("destroy_received", bytes([reason]), cell.link_id, "in")
            self.circuit.status = CircuitStatus.FAILED
            return []
        return []

    def _on_directory_reply(self, payload: bytes) -> list[tuple[str, bytes]]:
        fields = dict(decode_tlv(payload))
        status = fields.get(TAG_DIR_STATUS, b"\xff")[0]
        if status != DIR_STATUS_OK:
            raise ProtocolError(f"directory fetch failed with status {status}")
        snapshot = DirectorySnapshot.from_bytes(fields[TAG_DIR_SNAPSHOT])
        if not snapshot.verify(self.directory_identity):
            raise ProtocolError("directory snapshot signature invalid")
        self.snapshot = snapshot
        self._log("snapshot", struct.pack(">I", snapshot.epoch), direction="in")
        return self._begin_circuit()

    def _begin_circuit(self) -> list[tuple[str, bytes]]:
        if self.hops == 2:
            secondary, master = select_path(self.snapshot, self.nssai, self.drbg.read(8))
            self._path = [secondary, master]
        else:
            self._path = select_route(self.snapshot, self.nssai, self.drbg.read(8), self.hops)
        entry = self._path[0]
        link_id = int.from_bytes(self.drbg.read(4), "big") or 1
        circ = CircuitState(
            link_id, self._slice_id, self.nssai, self.ue_identity, self.drbg.read(32), self.group
        )
        circ.planned_hops = self.hops
        circ.core_address = self.snapshot.core_address
        self.circuit = circ
        create = build_create(circ, entry)
        self._log("create_sent", b"", link_id)
        return [(entry.address, encode_cell(c)) for c in create]

    def _on_created(self, payload: bytes) -> list[tuple[str, bytes]]:
        circ = self.circuit
        if not handle_created(circ, circ.entry_link_id, payload):
            return []
        self._log("created_confirmed", b"", circ.entry_link_id, "in")
        return self._continue_build()

    def _on_relay(self, payload: bytes) -> list[tuple[str, bytes]]:
        circ = self.circuit
        if circ.relay_in is None:
            return []
        progress = circ.relay_in.feed(payload)
        if progress is NOT_RECOGNIZED:
            self._log("relay_not_recognized", b"", circ.entry_link_id, "in")
            return []
        self._relay_buf.extend(progress.new_bytes)
        if not progress.done:
            return []
        body = bytes(self._relay_buf)
        self._relay_buf = bytearray()
        if progress.relay_cmd == cells.RELAY_EXTENDED:
            content = circ.hops[0].backward.process(body)
            if handle_extended(circ, content):
                self._log("extended_confirmed", b"", circ.entry_link_id, "in")
                return self._continue_build()
        return []

    def _continue_build(self) -> list[tuple[str, bytes]]:
        circ = self.circuit
        if circ.established:
            if self._established_at is None:
                self._established_at = self.clock()
            self._log("established")
            return []
        next_index = len(circ.hops)
        next_desc = self._path[next_index] if next_index < len(self._path) else None
        if next_desc is None:
            return []
        hint = None
        if next_index + 1 == circ.planned_hops:
            hint = pack_t_core(
                self.snapshot.core_address, self.snapshot.epoch, self.snapshot.core_fingerprint
            )
        wire_cells = build_extend(circ, next_desc, hint)
        self._log("extend_sent", b"", circ.entry_link_id)
        entry = circ.hops[0].descriptor.address
        return [(entry, wire) for wire in wire_cells]

    def send_data(self, data: bytes) -> list[tuple[str, bytes]]:
        """Build one onion for `data` and frame it for the entry link."""
        circ = self.circuit
        if circ is None or not circ.established:
            raise CircuitNotEstablished("no established circuit")
        onion = build_onion(circ, data, int(self.clock() * 1e6))
        self._log("data_sent", struct.pack(">Q", onion.seqnum), circ.entry_link_id)
        entry = circ.hops[0].descriptor.address
        return [(entry, wire) for wire in circ.relay_out.to_cells(cells.RELAY_DATA, onion.ciphertext)]

    def path_names(self) -> list[str]:
        return [d.node_name for d in (self._path or [])]


# --- circuit state persistence ---------------------------------------------------
#
# Established circuits serialize to JSON so a UE can build in one process
# and send in another: keys, keystream offsets, and relay message indexes
# are enough to resume every stream exactly where it stopped.


def dump_circuit_state(circ: CircuitState) -> dict:
    if not circ.established:
        raise StateError("only established circuits can be persisted")
    return {
        "entry_link_id": circ.entry_link_id,
        "nsi": circ.nsi.hex(),
        "nssai": circ.nssai.hex(),
        "ue_identity": circ.ue_identity.hex(),
        "pseudonym": circ.pseudonym.hex(),
        "bearer_context": circ.bearer_context.hex(),
        "rrc_config": circ.rrc_config.hex(),
        "seq_counter": circ.seq_counter,
        "planned_hops": circ.planned_hops,
        "core_address": circ.core_address,
        "relay_out_index": circ.relay_out.next_index,
        "relay_in_index": circ.relay_in.next_index,
        "hops": [
            {
                "descriptor": h.descriptor.to_bytes().hex(),
                "key": h.session.key_bytes.hex(),
                "confirm": h.session.confirmation_hash.hex(),
                "fwd_offset": h.forward.stream_offset,
                "bwd_offset": h.backward.stream_offset,
            }
            for h in circ.hops
        ],
    }


def load_circuit_state(state: dict) -> CircuitState:
    circ = CircuitState(
        state["entry_link_id"],
        nsi.NsiId(bytes.fromhex(state["nsi"])),
        bytes.fromhex(state["nssai"]),
        bytes.fromhex(state["ue_identity"]),
        seed=b"resume",
    )
    circ.pseudonym = bytes.fromhex(state["pseudonym"])
    circ.bearer_context = bytes.fromhex(state["bearer_context"])
    circ.rrc_config = bytes.fromhex(state["rrc_config"])
    circ.seq_counter = state["seq_counter"]
    circ.planned_hops = state["planned_hops"]
    circ.core_address = state["core_address"]
    for hop_state in state["hops"]:
        session = crypto.SessionKey(
            bytes.fromhex(hop_state["key"]), bytes.fromhex(hop_state["confirm"])
        )
        hop = HopState(
            RouterDescriptor.from_bytes(bytes.fromhex(hop_state["descriptor"])),
            session=session,
            forward=crypto.LayerCipherState(session, crypto.FORWARD, hop_state["fwd_offset"]),
            backward=crypto.LayerCipherState(session, crypto.BACKWARD, hop_state["bwd_offset"]),
        )
        circ.hops.append(hop)
    entry_session = circ.hops[0].session
    circ.relay_out = RelaySender(
        circ.entry_link_id,
        entry_session.relay_seed(crypto.FORWARD),
        next_index=state["relay_out_index"],
    )
    circ.relay_in = RelayReceiver(
        entry_session.relay_seed(crypto.BACKWARD), next_index=state["relay_in_index"]
    )
    circ.status = CircuitStatus.ESTABLISHED
    return circ
