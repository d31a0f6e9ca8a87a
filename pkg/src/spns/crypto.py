"""Cryptographic primitives: DH negotiation, key derivation and confirmation,
the layered counter-mode stream cipher, hybrid public-key envelopes, and
descriptor signatures.

Conventions:
  - big integers serialize big-endian at the fixed width of their group
    (256 bytes for the default 2048-bit group)
  - SHA-256 is the only hash
  - session keys are 16 bytes (AES-128)
"""

from __future__ import annotations

import hashlib
import secrets
import struct
from dataclasses import dataclass

from cryptography.exceptions import InvalidSignature, InvalidTag
from cryptography.hazmat.primitives import hashes, serialization
from cryptography.hazmat.primitives.asymmetric import ed25519, padding, rsa
from cryptography.hazmat.primitives.ciphers import Cipher, algorithms, modes
from cryptography.hazmat.primitives.ciphers.aead import AESGCM

from .errors import DecryptionFailure, DegenerateHalfKey

try:  # 5-10x faster modular exponentiation when available
    from gmpy2 import powmod as _powmod
except ImportError:  # pragma: no cover
    _powmod = pow

KEY_LEN = 16
CONFIRM_TAG = b"spns-kc"
LAYER_AUTH_TAG = b"spns-layer-auth"
RELAY_SEED_TAG = b"spns-relay-seed"
HYBRID_MAX_PLAINTEXT = 64 * 1024

# RFC 3526 group 14: 2048-bit MODP, generator 2.
_MODP_2048_HEX = (
    "FFFFFFFFFFFFFFFFC90FDAA22168C234C4C6628B80DC1CD1"
    "29024E088A67CC74020BBEA63B139B22514A08798E3404DD"
    "EF9519B3CD3A431B302B0A6DF25F14374FE1356D6D51C245"
    "E485B576625E7EC6F44C42E9A637ED6B0BFF5CB6F406B7ED"
    "EE386BFB5A899FA5AE9F24117C4B1FE649286651ECE45B3D"
    "C2007CB8A163BF0598DA48361C55D39A69163FA8FD24CF5F"
    "83655D23DCA3AD961C62F356208552BB9ED529077096966D"
    "670C354E4ABC9804F1746C08CA18217C32905E462E36CE3B"
    "E39E772C180E86039B2783A2EC07A28FB5C55DF06F4C52C9"
    "DE2BCBF6955817183995497CEA956AE515D2261898FA0510"
    "15728E5A8AACAA68FFFFFFFFFFFFFFFF"
)


def sha256(data: bytes) -> bytes:
    return hashlib.sha256(data).digest()


class HashDrbg:
    """Deterministic byte stream: SHA-256 over (key, counter) blocks.

    Used wherever an operation must be reproducible under a caller-supplied
    seed; platform-independent by construction.
    """

    def __init__(self, seed):
        if isinstance(seed, int):
            seed = seed.to_bytes((seed.bit_length() + 7) // 8 or 1, "big", signed=False)
        self._key = hashlib.sha256(b"spns-drbg:" + bytes(seed)).digest()
        self._counter = 0
        self._pool = b""

    def read(self, n: int) -> bytes:
        parts = [self._pool]
        have = len(self._pool)
        key = self._key
        while have < n:
            block = hashlib.sha256(key + struct.pack(">Q", self._counter)).digest()
            self._counter += 1
            parts.append(block)
            have += len(block)
        buf = b"".join(parts)
        out, self._pool = buf[:n], buf[n:]
        return out

    def randint(self, lo: int, hi: int) -> int:
        """Uniform integer in [lo, hi] by rejection sampling."""
        span = hi - lo + 1
        nbytes = (span.bit_length() + 7) // 8
        limit = (256 ** nbytes // span) * span
        while True:
            v = int.from_bytes(self.read(nbytes), "big")
            if v < limit:
                return lo + v % span


def _rand_source(rng_seed):
    if rng_seed is None:
        return None
    if isinstance(rng_seed, HashDrbg):
        return rng_seed
    return HashDrbg(rng_seed)


@dataclass(frozen=True)
class DhGroup:
    prime_p: int
    generator_g: int

    def __post_init__(self):
        if not (1 < self.generator_g < self.prime_p):
            raise ValueError("generator out of range")

    @property
    def element_size(self) -> int:
        """Fixed serialization width in bytes for group elements."""
        return (self.prime_p.bit_length() + 7) // 8

    def encode_element(self, value: int) -> bytes:
        return value.to_bytes(self.element_size, "big")

    def decode_element(self, data: bytes) -> int:
        return int.from_bytes(data, "big")

    @classmethod
    def default(cls) -> "DhGroup":
        return _GROUP_2048

    @classmethod
    def toy(cls, p: int = 23, g: int = 5) -> "DhGroup":
        return cls(p, g)


_GROUP_2048 = DhGroup(int(_MODP_2048_HEX, 16), 2)


@dataclass(frozen=True)
class DhKeyPair:
    secret_x: int
    public_half: int
    group: DhGroup

    def recompute_public(self) -> int:
        return int(_powmod(self.group.generator_g, self.secret_x, self.group.prime_p))


def _degenerate(half: int, p: int) -> bool:
    return half in (0, 1, p - 1)


# Secret exponents for large groups are drawn from 256 bits: well above the
# group's ~110-bit discrete-log strength, an order of magnitude cheaper to
# exponentiate than full-width, and still inside [2, p-2].
SHORT_EXPONENT_BITS = 256


def dh_generate(group: DhGroup, rng_seed=None) -> DhKeyPair:
    """Draw a secret exponent in [2, p-2] and compute its public half.

    Degenerate draws (public half in {0, 1, p-1}) are re-sampled, so the
    result always satisfies the half-key invariant. Deterministic when a
    seed is supplied.
    """
    rng = _rand_source(rng_seed)
    p, g = group.prime_p, group.generator_g
    hi = p - 2
    if p.bit_length() > 2 * SHORT_EXPONENT_BITS:
        hi = min(hi, (1 << SHORT_EXPONENT_BITS) - 1)
    while True:
        if rng is None:
            x = 2 + secrets.randbelow(hi - 1)  # [2, hi]
        else:
            x = rng.randint(2, hi)
        half = int(_powmod(g, x, p))
        if not _degenerate(half, p):
            return DhKeyPair(x, half, group)


@dataclass(frozen=True)
class SessionKey:
    key_bytes: bytes
    confirmation_hash: bytes

    @classmethod
    def from_shared_secret(cls, secret: int, group: DhGroup) -> "SessionKey":
        key = sha256(group.encode_element(secret))[:KEY_LEN]
        return cls(key, sha256(key + CONFIRM_TAG))

    def relay_seed(self, direction: str) -> bytes:
        return sha256(self.key_bytes + RELAY_SEED_TAG + direction.encode())


def dh_shared_secret(mine: DhKeyPair, peer_half: int, group: DhGroup) -> SessionKey:
    """Derive the session key from our secret and the peer's half-key.

    Raises DegenerateHalfKey on halves that would force a weak shared
    secret; that only happens under active tampering.
    """
    if _degenerate(peer_half % group.prime_p, group.prime_p):
        raise DegenerateHalfKey(f"peer half-key {peer_half} rejected")
    secret = int(_powmod(peer_half, mine.secret_x, group.prime_p))
    return SessionKey.from_shared_secret(secret, group)


FORWARD = "forward"
BACKWARD = "backward"

# Forward keystream counts from block 0, backward from block 2**127, so the
# two directions of one session key can never overlap.
_DIRECTION_BASE = {FORWARD: 0, BACKWARD: 1 << 127}


class LayerCipherState:
    """One direction of a hop's AES-128-CTR keystream.

    The keystream position only moves forward; a (key, direction) pair is
    one continuous stream across every message it protects, which is what
    makes counter reuse impossible as long as transport keeps byte order.
    """

    def __init__(self, key: SessionKey, direction: str, stream_offset: int = 0):
        if direction not in _DIRECTION_BASE:
            raise ValueError(f"direction must be forward or backward, got {direction!r}")
        self.key = key
        self.direction = direction
        self.stream_offset = 0
        self._ctx = None
        if stream_offset:
            self.seek(stream_offset)

    def _make_ctx(self, block: int):
        iv = ((_DIRECTION_BASE[self.direction] + block) % (1 << 128)).to_bytes(16, "big")
        return Cipher(algorithms.AES(self.key.key_bytes), modes.CTR(iv)).encryptor()

    def seek(self, offset: int) -> None:
        """Position the keystream at an absolute byte offset (resume support)."""
        self._ctx = self._make_ctx(offset // 16)
        skip = offset % 16
        if skip:
            self._ctx.update(b"\x00" * skip)
        self.stream_offset = offset

    def process(self, data: bytes) -> bytes:
        if not data:
            return b""
        if self._ctx is None:
            self.seek(self.stream_offset)
        out = self._ctx.update(bytes(data))
        self.stream_offset += len(data)
        return out


def layer_encrypt(state: LayerCipherState, plaintext: bytes) -> bytes:
    return state.process(plaintext)


def layer_decrypt(state: LayerCipherState, ciphertext: bytes) -> bytes:
    return state.process(ciphertext)


# --- hybrid envelopes -------------------------------------------------------
#
# RSA-2048 OAEP(SHA-256) wraps a fresh 16-byte AES key; the body is that
# key's AES-GCM ciphertext under a zero nonce (single-use key). OAEP padding
# is applied by hand over raw modexp so that a caller-supplied DRBG makes
# the whole envelope reproducible; unseeded envelopes draw from the OS.
# Wire layout: u16 wrapped_key length | wrapped_key | u32 body length | body.

_OAEP_HLEN = 32
_OAEP_LHASH = sha256(b"")


def _mgf1(seed: bytes, length: int) -> bytes:
    out = b""
    for counter in range((length + _OAEP_HLEN - 1) // _OAEP_HLEN):
        out += sha256(seed + struct.pack(">I", counter))
    return out[:length]


def _xor(a: bytes, b: bytes) -> bytes:
    return bytes(x ^ y for x, y in zip(a, b))


def _oaep_wrap(public: rsa.RSAPublicKey, message: bytes, seed: bytes) -> bytes:
    nums = public.public_numbers()
    k = (nums.n.bit_length() + 7) // 8
    if len(message) > k - 2 * _OAEP_HLEN - 2:
        raise ValueError("message too long for OAEP")
    db = _OAEP_LHASH + b"\x00" * (k - len(message) - 2 * _OAEP_HLEN - 2) + b"\x01" + message
    masked_db = _xor(db, _mgf1(seed, k - _OAEP_HLEN - 1))
    masked_seed = _xor(seed, _mgf1(masked_db, _OAEP_HLEN))
    em = int.from_bytes(b"\x00" + masked_seed + masked_db, "big")
    return int(_powmod(em, nums.e, nums.n)).to_bytes(k, "big")


@dataclass(frozen=True)
class HybridEnvelope:
    wrapped_key: bytes
    body_ciphertext: bytes

    @property
    def body_length(self) -> int:
        return len(self.body_ciphertext)

    def to_bytes(self) -> bytes:
        return (
            struct.pack(">H", len(self.wrapped_key))
            + self.wrapped_key
            + struct.pack(">I", self.body_length)
            + self.body_ciphertext
        )

    @classmethod
    def from_bytes(cls, data: bytes) -> "HybridEnvelope":
        try:
            (wlen,) = struct.unpack_from(">H", data, 0)
            wrapped = data[2 : 2 + wlen]
            (blen,) = struct.unpack_from(">I", data, 2 + wlen)
            body = data[6 + wlen : 6 + wlen + blen]
        except struct.error as exc:
            raise DecryptionFailure("truncated envelope") from exc
        if len(wrapped) != wlen or len(body) != blen or 6 + wlen + blen != len(data):
            raise DecryptionFailure("envelope length fields inconsistent")
        return cls(wrapped, body)


_GCM_NONCE = b"\x00" * 12


def hybrid_encrypt(recipient_public: rsa.RSAPublicKey, plaintext: bytes, rng_seed=None) -> HybridEnvelope:
    if len(plaintext) > HYBRID_MAX_PLAINTEXT:
        raise ValueError(f"plaintext exceeds {HYBRID_MAX_PLAINTEXT} bytes")
    rng = _rand_source(rng_seed)
    ephemeral = rng.read(KEY_LEN) if rng else secrets.token_bytes(KEY_LEN)
    oaep_seed = rng.read(_OAEP_HLEN) if rng else secrets.token_bytes(_OAEP_HLEN)
    body = AESGCM(ephemeral).encrypt(_GCM_NONCE, plaintext, None)
    return HybridEnvelope(_oaep_wrap(recipient_public, ephemeral, oaep_seed), body)


def hybrid_decrypt(recipient_secret: rsa.RSAPrivateKey, env: HybridEnvelope) -> bytes:
    oaep = padding.OAEP(padding.MGF1(hashes.SHA256()), hashes.SHA256(), None)
    try:
        ephemeral = recipient_secret.decrypt(env.wrapped_key, oaep)
    except ValueError as exc:
        raise DecryptionFailure("key unwrap failed") from exc
    if len(ephemeral) != KEY_LEN:
        raise DecryptionFailure("unwrapped key has wrong size")
    try:
        return AESGCM(ephemeral).decrypt(_GCM_NONCE, env.body_ciphertext, None)
    except InvalidTag as exc:
        raise DecryptionFailure("body authentication failed") from exc


# --- signatures and node key material ---------------------------------------


def sign(keypair: ed25519.Ed25519PrivateKey, message: bytes) -> bytes:
    return keypair.sign(message)


def verify(public: ed25519.Ed25519PublicKey, message: bytes, signature: bytes) -> bool:
    try:
        public.verify(signature, message)
        return True
    except (InvalidSignature, ValueError, TypeError):
        return False


def identity_public_bytes(public: ed25519.Ed25519PublicKey) -> bytes:
    return public.public_bytes(
        serialization.Encoding.Raw, serialization.PublicFormat.Raw
    )


def identity_public_from_bytes(raw: bytes) -> ed25519.Ed25519PublicKey:
    return ed25519.Ed25519PublicKey.from_public_bytes(raw)


def onion_public_bytes(public: rsa.RSAPublicKey) -> bytes:
    return public.public_bytes(
        serialization.Encoding.DER, serialization.PublicFormat.SubjectPublicKeyInfo
    )


def onion_public_from_bytes(der: bytes) -> rsa.RSAPublicKey:
    return serialization.load_der_public_key(der)


def fingerprint_of(identity_public: ed25519.Ed25519PublicKey) -> bytes:
    """8-byte node fingerprint: truncated hash of the identity public key."""
    return sha256(identity_public_bytes(identity_public))[:8]


class NodeKeySet:
    """A node's long-term signing keypair, onion keypair, and key epoch.

    The epoch only matters for the core, whose onion key is short-term and
    rotates; RANs keep epoch 0.
    """

    def __init__(self, identity: ed25519.Ed25519PrivateKey, onion: rsa.RSAPrivateKey, epoch: int = 0):
        self.identity = identity
        self.onion = onion
        self.epoch = epoch

    @classmethod
    def generate(cls, identity_seed: bytes | None = None, epoch: int = 0) -> "NodeKeySet":
        if identity_seed is not None:
            identity = ed25519.Ed25519PrivateKey.from_private_bytes(sha256(identity_seed))
        else:
            identity = ed25519.Ed25519PrivateKey.generate()
        onion = rsa.generate_private_key(public_exponent=65537, key_size=2048)
        return cls(identity, onion, epoch)

    @property
    def identity_public(self) -> ed25519.Ed25519PublicKey:
        return self.identity.public_key()

    @property
    def onion_public(self) -> rsa.RSAPublicKey:
        return self.onion.public_key()

    @property
    def fingerprint(self) -> bytes:
        return fingerprint_of(self.identity_public)

    def rotate_onion(self) -> None:
        """Replace the onion keypair and bump the epoch (core short-term key)."""
        self.onion = rsa.generate_private_key(public_exponent=65537, key_size=2048)
        self.epoch += 1

    # -- on-disk form (used by the keygen CLI) --

    def save(self, directory) -> None:
        from pathlib import Path

        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        (d / "identity.key").write_bytes(
            self.identity.private_bytes(
                serialization.Encoding.Raw,
                serialization.PrivateFormat.Raw,
                serialization.NoEncryption(),
            )
        )
        (d / "onion.pem").write_bytes(
            self.onion.private_bytes(
                serialization.Encoding.PEM,
                serialization.PrivateFormat.PKCS8,
                serialization.NoEncryption(),
            )
        )
        (d / "epoch").write_text(str(self.epoch))

    @classmethod
    def load(cls, directory) -> "NodeKeySet":
        from pathlib import Path

        d = Path(directory)
        identity = ed25519.Ed25519PrivateKey.from_private_bytes((d / "identity.key").read_bytes())
        onion = serialization.load_pem_private_key((d / "onion.pem").read_bytes(), password=None)
        epoch = int((d / "epoch").read_text())
        return cls(identity, onion, epoch)
