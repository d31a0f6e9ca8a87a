"""Slice instance identifiers: the 16-byte NSI ID, its per-hop partition,
and the urn:nsi string form.
"""

from __future__ import annotations

import re
from dataclasses import dataclass

from .errors import MalformedUrn, TooManyHops

NSI_SIZE = 16
UNASSIGNED = b"\x00" * NSI_SIZE  # reserved


@dataclass(frozen=True)
class NsiId:
    value: bytes

    def __post_init__(self):
        if len(self.value) != NSI_SIZE:
            raise ValueError(f"NSI ID must be {NSI_SIZE} bytes, got {len(self.value)}")

    @property
    def is_unassigned(self) -> bool:
        return self.value == UNASSIGNED

    @classmethod
    def from_hex(cls, s: str) -> "NsiId":
        return cls(bytes.fromhex(s))

    def hex(self) -> str:
        return self.value.hex()


@dataclass(frozen=True)
class NsiPartition:
    """Ordered byte segments whose concatenation is the full 16-byte ID.

    A circuit of h hops yields h+1 parts: one per RAN plus the core's.
    """

    parts: tuple[bytes, ...]

    def __post_init__(self):
        if sum(len(p) for p in self.parts) != NSI_SIZE:
            raise ValueError("partition does not cover 16 bytes")
        if any(len(p) == 0 for p in self.parts):
            raise ValueError("empty slice part")


def partition(nsi: NsiId, hops: int) -> NsiPartition:
    """Split into hops+1 segments: floor(16/(hops+1)) bytes each, remainder
    appended to the last part. The two-hop case gives 5/5/6."""
    if hops < 1:
        raise ValueError("hops must be >= 1")
    count = hops + 1
    if count > NSI_SIZE:
        raise TooManyHops(f"{hops} hops needs {count} parts, max {NSI_SIZE}")
    base = NSI_SIZE // count
    parts = [nsi.value[i * base : (i + 1) * base] for i in range(count - 1)]
    parts.append(nsi.value[(count - 1) * base :])
    return NsiPartition(tuple(parts))


def join(p: NsiPartition) -> NsiId:
    return NsiId(b"".join(p.parts))


_URN_RE = re.compile(r"^urn:nsi:([0-9a-f]{2,}(?::[0-9a-f]{2,})*)$")


def to_urn(p: NsiPartition) -> str:
    return "urn:nsi:" + ":".join(part.hex() for part in p.parts)


def from_urn(s: str) -> NsiPartition:
    m = _URN_RE.match(s)
    if m is None:
        raise MalformedUrn(f"not a urn:nsi string: {s!r}")
    hex_parts = m.group(1).split(":")
    if any(len(h) % 2 for h in hex_parts):
        raise MalformedUrn("slice part has odd hex length")
    parts = tuple(bytes.fromhex(h) for h in hex_parts)
    if sum(len(p) for p in parts) != NSI_SIZE:
        raise MalformedUrn("decoded parts do not total 16 bytes")
    return NsiPartition(parts)
