"""Router descriptors and the AMF-hosted directory service.

The directory is a single trusted endpoint: RANs publish signed
descriptors, the core registers its rotating short-term public key, and
the UE fetches a signed snapshot listing both. Descriptors and snapshots
serialize as deterministic TLV so identical inputs always produce
identical bytes.
"""

from __future__ import annotations

import random
import struct
from dataclasses import dataclass, field

from cryptography.hazmat.primitives.asymmetric import ed25519, rsa

from . import crypto
from .cells import decode_tlv, encode_tlv
from .errors import BadLength, InsufficientRans, InvalidDescriptor, StaleEpoch

MAX_NODE_NAME = 64
NSSAI_SIZE = 4
ADDRESS_SIZE = 12  # fixed-width zero-padded address token

_D_NAME = 1
_D_GNB_ID = 2
_D_LOCATION = 3
_D_NSSAI = 4
_D_SLICE_PART = 5
_D_IDENTITY = 6
_D_ONION = 7
_D_ADDRESS = 8
_D_SIGNATURE = 9

_S_EPOCH = 1
_S_CORE_PUBLIC = 2
_S_CORE_ADDRESS = 3
_S_DESCRIPTOR = 4
_S_SIGNATURE = 5


def pack_address(token: str) -> bytes:
    raw = token.encode()
    if len(raw) > ADDRESS_SIZE:
        raise ValueError(f"address token {token!r} exceeds {ADDRESS_SIZE} bytes")
    return raw + b"\x00" * (ADDRESS_SIZE - len(raw))


def unpack_address(data: bytes) -> str:
    return data.rstrip(b"\x00").decode()


@dataclass(frozen=True)
class RouterDescriptor:
    node_name: str
    gnb_id: int
    location_area: int
    supported_nssai: tuple[bytes, ...]
    slice_part: bytes
    identity_public: ed25519.Ed25519PublicKey
    onion_public: rsa.RSAPublicKey
    address: str
    signature: bytes

    def signed_fields(self) -> bytes:
        name = self.node_name.encode()
        if len(name) > MAX_NODE_NAME:
            raise ValueError("node name too long")
        if any(len(tag) != NSSAI_SIZE for tag in self.supported_nssai):
            raise ValueError("NSSAI tags are 4 bytes")
        return encode_tlv(
            [
                (_D_NAME, name),
                (_D_GNB_ID, struct.pack(">I", self.gnb_id)),
                (_D_LOCATION, struct.pack(">H", self.location_area)),
                (_D_NSSAI, b"".join(self.supported_nssai)),
                (_D_SLICE_PART, self.slice_part),
                (_D_IDENTITY, crypto.identity_public_bytes(self.identity_public)),
                (_D_ONION, crypto.onion_public_bytes(self.onion_public)),
                (_D_ADDRESS, self.address.encode()),
            ]
        )

    def to_bytes(self) -> bytes:
        return self.signed_fields() + encode_tlv([(_D_SIGNATURE, self.signature)])

    @classmethod
    def from_bytes(cls, data: bytes) -> "RouterDescriptor":
        fields = dict(decode_tlv(data))
        try:
            nssai_blob = fields[_D_NSSAI]
            if len(nssai_blob) % NSSAI_SIZE:
                raise BadLength("NSSAI list not a multiple of 4 bytes")
            return cls(
                node_name=fields[_D_NAME].decode(),
                gnb_id=struct.unpack(">I", fields[_D_GNB_ID])[0],
                location_area=struct.unpack(">H", fields[_D_LOCATION])[0],
                supported_nssai=tuple(
                    nssai_blob[i : i + NSSAI_SIZE] for i in range(0, len(nssai_blob), NSSAI_SIZE)
                ),
                slice_part=fields[_D_SLICE_PART],
                identity_public=crypto.identity_public_from_bytes(fields[_D_IDENTITY]),
                onion_public=crypto.onion_public_from_bytes(fields[_D_ONION]),
                address=fields[_D_ADDRESS].decode(),
                signature=fields[_D_SIGNATURE],
            )
        except (KeyError, struct.error, UnicodeDecodeError, ValueError) as exc:
            raise InvalidDescriptor(f"cannot parse descriptor: {exc}") from exc

    @property
    def fingerprint(self) -> bytes:
        return crypto.fingerprint_of(self.identity_public)


def descriptor_sign(
    *,
    node_name: str,
    gnb_id: int,
    location_area: int,
    supported_nssai,
    slice_part: bytes,
    keyset: crypto.NodeKeySet,
    address: str,
) -> RouterDescriptor:
    unsigned = RouterDescriptor(
        node_name=node_name,
        gnb_id=gnb_id,
        location_area=location_area,
        supported_nssai=tuple(supported_nssai),
        slice_part=slice_part,
        identity_public=keyset.identity_public,
        onion_public=keyset.onion_public,
        address=address,
        signature=b"",
    )
    sig = crypto.sign(keyset.identity, unsigned.signed_fields())
    return RouterDescriptor(
        node_name=unsigned.node_name,
        gnb_id=unsigned.gnb_id,
        location_area=unsigned.location_area,
        supported_nssai=unsigned.supported_nssai,
        slice_part=unsigned.slice_part,
        identity_public=unsigned.identity_public,
        onion_public=unsigned.onion_public,
        address=unsigned.address,
        signature=sig,
    )


def descriptor_verify(d: RouterDescriptor) -> bool:
    try:
        return crypto.verify(d.identity_public, d.signed_fields(), d.signature)
    except ValueError:
        return False


@dataclass(frozen=True)
class DirectorySnapshot:
    epoch: int
    core_public: rsa.RSAPublicKey
    core_address: str
    descriptors: tuple[RouterDescriptor, ...]
    directory_signature: bytes

    def signed_fields(self) -> bytes:
        items = [
            (_S_EPOCH, struct.pack(">I", self.epoch)),
            (_S_CORE_PUBLIC, crypto.onion_public_bytes(self.core_public)),
            (_S_CORE_ADDRESS, self.core_address.encode()),
        ]
        items.extend((_S_DESCRIPTOR, d.to_bytes()) for d in self.descriptors)
        return encode_tlv(items)

    def to_bytes(self) -> bytes:
        return self.signed_fields() + encode_tlv([(_S_SIGNATURE, self.directory_signature)])

    @classmethod
    def from_bytes(cls, data: bytes) -> "DirectorySnapshot":
        epoch = None
        core_public = None
        core_address = None
        descriptors = []
        signature = b""
        for tag, value in decode_tlv(data):
            if tag == _S_EPOCH:
                epoch = struct.unpack(">I", value)[0]
            elif tag == _S_CORE_PUBLIC:
                core_public = crypto.onion_public_from_bytes(value)
            elif tag == _S_CORE_ADDRESS:
                core_address = value.decode()
            elif tag == _S_DESCRIPTOR:
                descriptors.append(RouterDescriptor.from_bytes(value))
            elif tag == _S_SIGNATURE:
                signature = value
        if epoch is None or core_public is None or core_address is None:
            raise BadLength("snapshot missing required fields")
        return cls(epoch, core_public, core_address, tuple(descriptors), signature)

    def verify(self, directory_identity: ed25519.Ed25519PublicKey) -> bool:
        if not crypto.verify(directory_identity, self.signed_fields(), self.directory_signature):
            return False
        return all(descriptor_verify(d) for d in self.descriptors)

    @property
    def core_fingerprint(self) -> bytes:
        return crypto.sha256(crypto.onion_public_bytes(self.core_public))[:8]

    def save_hex(self, path) -> None:
        from pathlib import Path

        Path(path).write_text(self.to_bytes().hex() + "\n")

    @classmethod
    def load_hex(cls, path) -> "DirectorySnapshot":
        from pathlib import Path

        return cls.from_bytes(bytes.fromhex(Path(path).read_text().strip()))


class DirectoryService:
    """The AMF acting as directory: holds published descriptors and the
    core's current short-term key, and signs snapshots on request."""

    def __init__(self, keyset: crypto.NodeKeySet):
        self.keyset = keyset
        self._descriptors: dict[bytes, RouterDescriptor] = {}
        self._core_public: rsa.RSAPublicKey | None = None
        self._core_address: str | None = None
        self._epoch = 0

    @property
    def identity_public(self) -> ed25519.Ed25519PublicKey:
        return self.keyset.identity_public

    @property
    def epoch(self) -> int:
        return self._epoch

    def publish(self, d: RouterDescriptor) -> None:
        if not descriptor_verify(d):
            raise InvalidDescriptor(f"descriptor for {d.node_name!r} does not verify")
        self._descriptors[d.fingerprint] = d

    def register_core(self, core_public: rsa.RSAPublicKey, core_address: str) -> int:
        """Install or rotate the core's short-term key; returns the epoch."""
        if self._core_public is not None:
            self._epoch += 1
        self._core_public = core_public
        self._core_address = core_address
        return self._epoch

    def fetch_snapshot(self, expected_epoch: int | None = None) -> DirectorySnapshot:
        if self._core_public is None:
            raise StaleEpoch("no core key registered yet")
        if expected_epoch is not None and expected_epoch != self._epoch:
            raise StaleEpoch(f"core key rotated: epoch {self._epoch}, expected {expected_epoch}")
        ordered = tuple(self._descriptors[fp] for fp in sorted(self._descriptors))
        unsigned = DirectorySnapshot(self._epoch, self._core_public, self._core_address, ordered, b"")
        sig = crypto.sign(self.keyset.identity, unsigned.signed_fields())
        return DirectorySnapshot(self._epoch, self._core_public, self._core_address, ordered, sig)


def select_route(
    snapshot: DirectorySnapshot, requested_nssai: bytes, policy_seed, count: int
) -> list[RouterDescriptor]:
    """Pick `count` distinct RANs supporting the NSSAI, entry first.

    Deterministic under a fixed seed; candidates are ordered by fingerprint
    before sampling so the choice does not depend on publish order.
    """
    matching = [d for d in snapshot.descriptors if requested_nssai in d.supported_nssai]
    if len(matching) < count:
        raise InsufficientRans(
            f"{len(matching)} RAN(s) support NSSAI {requested_nssai.hex()}, need {count}"
        )
    matching.sort(key=lambda d: d.fingerprint)
    seed = policy_seed if not isinstance(policy_seed, bytes) else int.from_bytes(policy_seed, "big")
    return random.Random(seed).sample(matching, count)


def select_path(
    snapshot: DirectorySnapshot, requested_nssai: bytes, policy_seed
) -> tuple[RouterDescriptor, RouterDescriptor]:
    """Pick (secondary, master) for dual connectivity: two distinct RANs."""
    secondary, master = select_route(snapshot, requested_nssai, policy_seed, 2)
    return secondary, master
