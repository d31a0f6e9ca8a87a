"""Exception types shared across the protocol stack.

Every error that crosses a module boundary lives here so that state
machines can catch whole families (e.g. any ProtocolError tears a
circuit down) without import cycles.
"""


class ProtocolError(Exception):
    """Base class for all protocol-level failures."""


# crypto
class DegenerateHalfKey(ProtocolError):
    """Peer offered a half-key in {0, 1, p-1}; treated as active tampering."""


class DecryptionFailure(ProtocolError):
    """A public-key envelope failed to open (wrong key, truncation, padding)."""


# cells
class BadLength(ProtocolError):
    """Wire input is not the exact size the codec requires."""


class UnknownCommand(ProtocolError):
    """Cell command byte outside the known set."""


class NonzeroReserved(ProtocolError):
    """Reserved header bytes were non-zero; corruption or version skew."""


class BodyOverflow(ProtocolError):
    """Relay body exceeds the 489-byte maximum."""


class MissingFragment(ProtocolError):
    """A fragment sequence has a gap and cannot be reassembled."""


# nsi
class TooManyHops(ProtocolError):
    """Requested more slice-ID segments than the 16-byte ID can carry."""


class MalformedUrn(ProtocolError):
    """String does not match the urn:nsi grammar."""


# directory
class InvalidDescriptor(ProtocolError):
    """Router descriptor failed signature verification."""


class StaleEpoch(ProtocolError):
    """Caller's expected core-key epoch no longer matches the directory."""


class InsufficientRans(ProtocolError):
    """Fewer than two distinct RANs support the requested NSSAI."""


# circuit
class StateError(ProtocolError):
    """Operation not legal in the circuit's current state."""


class KeyConfirmMismatch(ProtocolError):
    """Responder's key-confirmation hash does not match the derived key."""


class CircuitNotEstablished(ProtocolError):
    """Data operations require a fully established circuit."""


class DigestMismatch(ProtocolError):
    """Layer or relay digest check failed."""


class MalformedInfo(ProtocolError):
    """Per-hop info record could not be parsed from a peeled layer."""


# nodes
class DuplicateLink(ProtocolError):
    """CREATE arrived for a link ID already in use with this peer."""


class UnknownNextHop(ProtocolError):
    """Extend target address is not present in the directory snapshot."""


class LinkExhaustion(ProtocolError):
    """No fresh link ID could be allocated."""


class EpochMismatch(ProtocolError):
    """Core hint carries a key epoch that is no longer current."""


class AttestationFailure(ProtocolError):
    """A forwarded router descriptor failed verification at the core."""


class SingleRanRejected(ProtocolError):
    """Slice setup offered fewer than two distinct RAN descriptors."""


class UnknownLink(ProtocolError):
    """Cell arrived on a link the node has no entry for."""


class UnknownSession(ProtocolError):
    """Data arrived for a slice the core never registered."""


# simnet / transports
class UnknownEndpoint(ProtocolError):
    """Send to an address no node registered."""


class LivelockDetected(ProtocolError):
    """Event processing exceeded the configured cap without quiescing."""


# harness
class ScenarioFailure(ProtocolError):
    """A scripted scenario failed; message names the phase."""

    def __init__(self, phase: str, detail: str = ""):
        self.phase = phase
        super().__init__(f"scenario failed in phase '{phase}'" + (f": {detail}" if detail else ""))


class MalformedLog(ProtocolError):
    """An audit log line is not valid JSON or lacks required fields."""
