"""Bit-exact codec for the fixed 512-byte cell and the relay sub-header.

Cell layout (512 bytes, all integers big-endian):

    link_id      u32
    command      u8      CREATE=1 CREATED=2 RELAY=3 DESTROY=4 NG_SETUP=5 NG_SETUP_ACK=6
    payload_len  u16     <= 498
    epoch        u8      bit 7 = more-fragments flag for chained control payloads
    reserved     6 bytes, zero
    payload      498 bytes, zero-padded past payload_len

Relay unit layout (the 498-byte payload of a RELAY cell):

    relay_cmd    u8      EXTEND=1 EXTENDED=2 DATA=3 END=4
    recognized   u16     must be zero at the terminating layer
    digest       4 bytes truncated running SHA-256 of the unit stream
    body_len     u16     <= 489
    body         body_len bytes, zero-padded to 489
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field

from .errors import BadLength, BodyOverflow, MissingFragment, NonzeroReserved, UnknownCommand

CELL_SIZE = 512
HEADER_SIZE = 14
PAYLOAD_SIZE = 498

CREATE = 1
CREATED = 2
RELAY = 3
DESTROY = 4
NG_SETUP = 5
NG_SETUP_ACK = 6
COMMANDS = (CREATE, CREATED, RELAY, DESTROY, NG_SETUP, NG_SETUP_ACK)
COMMAND_NAMES = {1: "CREATE", 2: "CREATED", 3: "RELAY", 4: "DESTROY", 5: "NG_SETUP", 6: "NG_SETUP_ACK"}

RELAY_HEADER_SIZE = 9
RELAY_BODY_MAX = PAYLOAD_SIZE - RELAY_HEADER_SIZE  # 489

RELAY_EXTEND = 1
RELAY_EXTENDED = 2
RELAY_DATA = 3
RELAY_END = 4
RELAY_COMMANDS = (RELAY_EXTEND, RELAY_EXTENDED, RELAY_DATA, RELAY_END)

EPOCH_MORE = 0x80

# DESTROY reason codes (1-byte payload)
REASON_NONE = 0
REASON_PROTOCOL = 1
REASON_CRYPTO = 2
REASON_DUPLICATE_LINK = 3
REASON_EPOCH = 4
REASON_DIGEST = 5
REASON_UNROUTABLE = 6

_HEADER = struct.Struct(">IBHB6s")


@dataclass
class Cell:
    link_id: int
    command: int
    payload: bytes = b""
    epoch: int = 0
    more: bool = False

    @property
    def payload_len(self) -> int:
        return len(self.payload)


def encode_cell(c: Cell) -> bytes:
    if not 0 <= c.link_id < 1 << 32:
        raise ValueError("link_id out of range")
    if c.command not in COMMANDS:
        raise UnknownCommand(f"command {c.command}")
    if len(c.payload) > PAYLOAD_SIZE:
        raise BadLength(f"payload {len(c.payload)} exceeds {PAYLOAD_SIZE}")
    if not 0 <= c.epoch < EPOCH_MORE:
        raise ValueError("epoch must fit in 7 bits")
    epoch_byte = c.epoch | (EPOCH_MORE if c.more else 0)
    header = _HEADER.pack(c.link_id, c.command, len(c.payload), epoch_byte, b"\x00" * 6)
    return header + c.payload + b"\x00" * (PAYLOAD_SIZE - len(c.payload))


def decode_cell(wire: bytes) -> Cell:
    if len(wire) != CELL_SIZE:
        raise BadLength(f"cell must be {CELL_SIZE} bytes, got {len(wire)}")
    link_id, command, payload_len, epoch_byte, reserved = _HEADER.unpack_from(wire, 0)
    if command not in COMMANDS:
        raise UnknownCommand(f"command {command}")
    if payload_len > PAYLOAD_SIZE:
        raise BadLength(f"payload_len {payload_len} exceeds {PAYLOAD_SIZE}")
    if reserved != b"\x00" * 6:
        raise NonzeroReserved("reserved header bytes set")
    payload = wire[HEADER_SIZE : HEADER_SIZE + payload_len]
    return Cell(link_id, command, payload, epoch_byte & 0x7F, bool(epoch_byte & EPOCH_MORE))


# --- relay sub-header --------------------------------------------------------


class _NotRecognized:
    """Sentinel: the relay unit does not terminate at this node."""

    _instance = None

    def __new__(cls):
        if cls._instance is None:
            cls._instance = super().__new__(cls)
        return cls._instance

    def __repr__(self):
        return "NotRecognized"


NOT_RECOGNIZED = _NotRecognized()

_RELAY_HEADER = struct.Struct(">BH4sH")


@dataclass
class RelayHeader:
    relay_cmd: int
    body: bytes = b""
    recognized: int = 0
    digest: bytes = b"\x00\x00\x00\x00"

    @property
    def body_len(self) -> int:
        return len(self.body)


_ZERO4 = b"\x00\x00\x00\x00"


class RelayDigest:
    """Running truncated SHA-256 over one direction's relay unit stream.

    The sender stamps each 498-byte unit with the first 4 bytes of the
    running hash (computed with the digest field zeroed); the receiver
    mirrors the computation and only commits its state when the check
    passes, so a corrupt unit does not poison subsequent ones.
    """

    def __init__(self, seed: bytes):
        self._h = hashlib.sha256(seed)

    def stamp(self, unit: bytearray) -> None:
        self.stamp_into(unit, 0)

    def stamp_into(self, buf: bytearray, base: int) -> None:
        """Stamp the unit living at buf[base:base+498]."""
        buf[base + 3 : base + 7] = _ZERO4
        self._h.update(memoryview(buf)[base:])
        buf[base + 3 : base + 7] = self._h.digest()[:4]

    def stamp_detached(self, before: bytes, *after: bytes) -> bytes:
        """Absorb one unit given as (bytes before the digest field, parts
        after it); returns the 4-byte digest to splice in."""
        update = self._h.update
        update(before)
        update(_ZERO4)
        for part in after:
            update(part)
        return self._h.digest()[:4]

    def check(self, unit: bytes) -> bool:
        trial = self._h.copy()
        trial.update(unit[:3])
        trial.update(_ZERO4)
        trial.update(memoryview(unit)[7:])
        if trial.digest()[:4] != unit[3:7]:
            return False
        self._h = trial
        return True

    def check_consuming(self, unit: bytes) -> bool:
        """Like check, but commits unconditionally; callers that tear the
        stream down on failure can skip the rollback copy."""
        h = self._h
        h.update(unit[:3])
        h.update(_ZERO4)
        h.update(memoryview(unit)[7:])
        return h.digest()[:4] == unit[3:7]


def encode_relay(h: RelayHeader) -> bytes:
    if len(h.body) > RELAY_BODY_MAX:
        raise BodyOverflow(f"relay body {len(h.body)} exceeds {RELAY_BODY_MAX}")
    if h.relay_cmd not in RELAY_COMMANDS:
        raise ValueError(f"relay command {h.relay_cmd}")
    hdr = _RELAY_HEADER.pack(h.relay_cmd, h.recognized, h.digest, len(h.body))
    return hdr + h.body + b"\x00" * (RELAY_BODY_MAX - len(h.body))


def decode_relay(data: bytes, digest: RelayDigest | None = None):
    """Parse a 498-byte relay unit.

    Returns a RelayHeader when the unit is structurally valid, recognized
    is zero and (when a digest stream is supplied) the digest matches;
    otherwise returns NOT_RECOGNIZED, telling the caller to forward the
    unit without interpreting it.
    """
    if len(data) != PAYLOAD_SIZE:
        raise BadLength(f"relay unit must be {PAYLOAD_SIZE} bytes, got {len(data)}")
    relay_cmd, recognized, digest_bytes, body_len = _RELAY_HEADER.unpack_from(data, 0)
    if relay_cmd not in RELAY_COMMANDS or body_len > RELAY_BODY_MAX:
        return NOT_RECOGNIZED
    if recognized != 0:
        return NOT_RECOGNIZED
    if digest is not None and not digest.check(data):
        return NOT_RECOGNIZED
    body = data[RELAY_HEADER_SIZE : RELAY_HEADER_SIZE + body_len]
    return RelayHeader(relay_cmd, body, recognized, digest_bytes)


# --- fragmentation -----------------------------------------------------------


def fragment(message: bytes) -> list[bytes]:
    """Split into relay DATA bodies of at most 489 bytes; empty input yields
    one empty fragment."""
    if not message:
        return [b""]
    view = memoryview(message)
    return [bytes(view[i : i + RELAY_BODY_MAX]) for i in range(0, len(message), RELAY_BODY_MAX)]


def reassemble(indexed_fragments) -> bytes:
    """Rejoin (sequence_number, body) pairs; raises MissingFragment on a gap
    or duplicate. Sequence numbers must cover 0..n-1."""
    frags = sorted(indexed_fragments, key=lambda pair: pair[0])
    for expected, (seq, _) in enumerate(frags):
        if seq != expected:
            raise MissingFragment(f"expected fragment {expected}, got {seq}")
    return b"".join(body for _, body in frags)


# --- TLV ----------------------------------------------------------------------
#
# Structured payloads use tag(u8) | length(u32) | value records, fields in
# a fixed order; serialization is deterministic by construction. The wide
# length field lets one record carry a whole data message.

TLV_HEADER = 5


def encode_tlv(items) -> bytes:
    out = bytearray()
    for tag, value in items:
        if len(value) > 0xFFFFFFFF:
            raise ValueError(f"TLV value for tag {tag} too long")
        out += struct.pack(">BI", tag, len(value))
        out += value
    return bytes(out)


def decode_tlv(data: bytes) -> list[tuple[int, bytes]]:
    items = []
    off = 0
    while off < len(data):
        if off + TLV_HEADER > len(data):
            raise BadLength("truncated TLV header")
        tag, length = struct.unpack_from(">BI", data, off)
        off += TLV_HEADER
        if off + length > len(data):
            raise BadLength("truncated TLV value")
        items.append((tag, data[off : off + length]))
        off += length
    return items


# --- control payload chaining ------------------------------------------------
#
# Control payloads larger than one cell (hybrid envelopes and descriptor
# bundles do not fit 498 bytes) span consecutive cells of the same command
# with the epoch more-fragments bit set on all but the last.


def chunk_control(link_id: int, command: int, payload: bytes, epoch: int = 0) -> list[Cell]:
    pieces = [payload[i : i + PAYLOAD_SIZE] for i in range(0, len(payload), PAYLOAD_SIZE)] or [b""]
    return [
        Cell(link_id, command, piece, epoch, more=(i + 1 < len(pieces)))
        for i, piece in enumerate(pieces)
    ]


class ControlAssembler:
    """Reassembles chained control payloads, keyed by (link_id, command)."""

    def __init__(self):
        self._partial: dict[tuple[int, int], bytearray] = {}

    def feed(self, cell: Cell) -> bytes | None:
        key = (cell.link_id, cell.command)
        buf = self._partial.setdefault(key, bytearray())
        buf.extend(cell.payload)
        if cell.more:
            return None
        del self._partial[key]
        return bytes(buf)


# --- relay messages ----------------------------------------------------------
#
# A logical relay message (one EXTEND, one EXTENDED, or one DATA transfer)
# travels as a u32 length prefix followed by the message body, fragmented
# into relay units. Each (link, direction) runs one digest stream per
# message, seeded with the link seed and the message index, so state can be
# checkpointed between messages as plain integers.


@dataclass(slots=True)
class RelayProgress:
    """Incremental result of feeding relay units to a RelayReceiver."""

    relay_cmd: int
    new_bytes: bytes
    total: int
    received: int

    @property
    def done(self) -> bool:
        return self.received >= self.total


def _message_seed(link_seed: bytes, index: int) -> bytes:
    return link_seed + struct.pack(">Q", index)


class RelaySender:
    def __init__(self, link_id: int, link_seed: bytes, epoch: int = 0, next_index: int = 0):
        self.link_id = link_id
        self.link_seed = link_seed
        self.epoch = epoch
        self.next_index = next_index

    def open(self, relay_cmd: int, total: int) -> "RelayMessageStream":
        """Start a message of `total` body bytes for incremental sending."""
        stream = RelayMessageStream(self, relay_cmd, total)
        self.next_index += 1
        return stream

    def to_cells(self, relay_cmd: int, body: bytes) -> list[bytes]:
        """Encode one whole logical message into encoded RELAY cells."""
        stream = self.open(relay_cmd, len(body))
        out = stream.feed(body)
        out += stream.finish()
        return out


class RelayMessageStream:
    """Incremental sender for one relay message; cut-through forwarding
    emits each 512-byte cell as soon as its 489 body bytes exist."""

    _FULL_LEN = struct.pack(">H", RELAY_BODY_MAX)

    def __init__(self, sender: RelaySender, relay_cmd: int, total: int):
        self.relay_cmd = relay_cmd
        self.total = total
        self._digest = RelayDigest(_message_seed(sender.link_seed, sender.next_index))
        self._head3 = struct.pack(">BH", relay_cmd, 0)
        self._cell_prefix = struct.pack(
            ">IBHB6s", sender.link_id, RELAY, PAYLOAD_SIZE, sender.epoch, b"\x00" * 6
        )
        self._pending = bytearray(struct.pack(">I", total))
        self._sent = 0

    def _emit(self, final: bool) -> list[bytes]:
        cells_out = []
        pending = self._pending
        stamp = self._digest.stamp_detached
        head3 = self._head3
        prefix = self._cell_prefix
        full_len = self._FULL_LEN
        while len(pending) >= RELAY_BODY_MAX:
            chunk = bytes(pending[:RELAY_BODY_MAX])
            del pending[:RELAY_BODY_MAX]
            digest = stamp(head3, full_len, chunk)
            cells_out.append(b"".join((prefix, head3, digest, full_len, chunk)))
        if final and pending:
            chunk = bytes(pending)
            pending.clear()
            pad = b"\x00" * (RELAY_BODY_MAX - len(chunk))
            len_field = struct.pack(">H", len(chunk))
            digest = stamp(head3, len_field, chunk, pad)
            cells_out.append(b"".join((prefix, head3, digest, len_field, chunk, pad)))
        return cells_out

    def feed(self, chunk: bytes) -> list[bytes]:
        if self._sent + len(chunk) > self.total:
            raise ValueError("stream fed more bytes than declared")
        self._sent += len(chunk)
        self._pending.extend(chunk)
        return self._emit(final=False)

    def finish(self) -> list[bytes]:
        if self._sent != self.total:
            raise ValueError(f"stream ended at {self._sent} of {self.total} bytes")
        return self._emit(final=True)


class RelayReceiver:
    def __init__(self, link_seed: bytes, next_index: int = 0):
        self.link_seed = link_seed
        self.next_index = next_index
        self._digest: RelayDigest | None = None
        self._cmd: int | None = None
        self._total: int | None = None
        self._received = 0
        self._progress = RelayProgress(0, b"", 0, 0)

    def _reset(self):
        self._digest = None
        self._cmd = None
        self._total = None
        self._received = 0

    def feed(self, payload: bytes):
        """Feed one 498-byte relay unit; returns RelayProgress or NOT_RECOGNIZED.

        The first unit of a message carries the u32 total length (fragments
        are never shorter than the prefix); new_bytes exclude that prefix.
        The returned progress object is reused across calls.
        """
        if len(payload) != PAYLOAD_SIZE:
            raise BadLength(f"relay unit must be {PAYLOAD_SIZE} bytes, got {len(payload)}")
        if self._digest is None:
            self._digest = RelayDigest(_message_seed(self.link_seed, self.next_index))
        relay_cmd = payload[0]
        if (
            relay_cmd not in RELAY_COMMANDS
            or payload[1:3] != b"\x00\x00"
            or not self._digest.check_consuming(payload)
        ):
            self._digest = None  # stream is poisoned; caller tears down
            return NOT_RECOGNIZED
        body_len = (payload[7] << 8) | payload[8]
        if body_len > RELAY_BODY_MAX:
            return NOT_RECOGNIZED
        body = payload[RELAY_HEADER_SIZE : RELAY_HEADER_SIZE + body_len]
        if self._cmd is None:
            if body_len < 4:
                return NOT_RECOGNIZED
            self._cmd = relay_cmd
            (self._total,) = struct.unpack_from(">I", body, 0)
            chunk = body[4:]
        else:
            chunk = body
        if self._received + len(chunk) > self._total:
            chunk = chunk[: self._total - self._received]
        self._received += len(chunk)
        progress = self._progress
        progress.relay_cmd = self._cmd
        progress.new_bytes = chunk
        progress.total = self._total
        progress.received = self._received
        if self._received >= self._total:
            self.next_index += 1
            self._reset()
        return progress
