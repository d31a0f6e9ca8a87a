import hashlib
import random

import pytest
import sympy
from cryptography.hazmat.primitives import hashes
from cryptography.hazmat.primitives.asymmetric import padding

from spns import crypto
from spns.errors import DecryptionFailure, DegenerateHalfKey

from reference_aes import ctr_crypt, ctr_keystream


def brute_force_shared(g, x, y, p):
    return pow(pow(g, y, p), x, p)


class TestDh:
    def test_forced_exponents_toy_group(self, toy_group):
        pair = crypto.DhKeyPair(6, pow(5, 6, 23), toy_group)
        assert pair.public_half == 8
        assert pair.recompute_public() == 8
        assert crypto.DhKeyPair(1, pow(5, 1, 23), toy_group).public_half == 5

    def test_forced_exponent_group14(self):
        group = crypto.DhGroup.default()
        pair = crypto.DhKeyPair(2, pow(2, 2, group.prime_p), group)
        assert pair.public_half == 4

    def test_both_sides_agree(self, toy_group):
        a = crypto.DhKeyPair(6, pow(5, 6, 23), toy_group)
        b = crypto.DhKeyPair(15, pow(5, 15, 23), toy_group)
        ka = crypto.dh_shared_secret(a, b.public_half, toy_group)
        kb = crypto.dh_shared_secret(b, a.public_half, toy_group)
        assert ka == kb
        assert pow(19, 6, 23) == pow(8, 15, 23) == 2  # the raw shared secret

    def test_exhaustive_sweep_against_brute_force(self, toy_group):
        p, g = toy_group.prime_p, toy_group.generator_g
        for x in range(2, 21):
            for y in range(2, 21):
                a = crypto.DhKeyPair(x, pow(g, x, p), toy_group)
                b = crypto.DhKeyPair(y, pow(g, y, p), toy_group)
                degenerate = False
                if b.public_half in (0, 1, p - 1):
                    degenerate = True
                    with pytest.raises(DegenerateHalfKey):
                        crypto.dh_shared_secret(a, b.public_half, toy_group)
                if a.public_half in (0, 1, p - 1):
                    degenerate = True
                    with pytest.raises(DegenerateHalfKey):
                        crypto.dh_shared_secret(b, a.public_half, toy_group)
                if degenerate:
                    continue
                ka = crypto.dh_shared_secret(a, b.public_half, toy_group)
                kb = crypto.dh_shared_secret(b, a.public_half, toy_group)
                assert ka == kb
                expected = crypto.SessionKey.from_shared_secret(
                    brute_force_shared(g, x, y, p), toy_group
                )
                assert ka == expected

    def test_degenerate_peer_halves_rejected(self, toy_group):
        mine = crypto.dh_generate(toy_group, rng_seed=b"x")
        for bad in (0, 1, toy_group.prime_p - 1):
            with pytest.raises(DegenerateHalfKey):
                crypto.dh_shared_secret(mine, bad, toy_group)

    def test_generate_deterministic_under_seed(self):
        group = crypto.DhGroup.default()
        a = crypto.dh_generate(group, rng_seed=b"seed")
        b = crypto.dh_generate(group, rng_seed=b"seed")
        assert a == b
        assert a != crypto.dh_generate(group, rng_seed=b"other")

    def test_generate_never_degenerate(self, toy_group):
        for i in range(200):
            pair = crypto.dh_generate(toy_group, rng_seed=i)
            assert pair.public_half not in (0, 1, 22)
            assert 2 <= pair.secret_x <= 21

    def test_session_key_derivation_spelled_out(self, toy_group):
        key = crypto.SessionKey.from_shared_secret(2, toy_group)
        raw = (2).to_bytes(toy_group.element_size, "big")
        assert key.key_bytes == hashlib.sha256(raw).digest()[:16]
        assert key.confirmation_hash == hashlib.sha256(key.key_bytes + b"spns-kc").digest()

    def test_group14_parameters(self):
        group = crypto.DhGroup.default()
        assert group.prime_p.bit_length() == 2048
        assert group.generator_g == 2
        assert group.element_size == 256
        assert sympy.isprime(group.prime_p)

    def test_bad_generator_rejected(self):
        with pytest.raises(ValueError):
            crypto.DhGroup(23, 23)


class TestLayerCipher:
    def zero_key(self):
        return crypto.SessionKey(b"\x00" * 16, b"\x00" * 32)

    def test_empty_input(self):
        st = crypto.LayerCipherState(self.zero_key(), crypto.FORWARD)
        assert crypto.layer_encrypt(st, b"") == b""
        assert st.stream_offset == 0

    def test_zero_key_known_answer(self):
        st = crypto.LayerCipherState(self.zero_key(), crypto.FORWARD)
        out = crypto.layer_encrypt(st, b"\x00" * 16)
        assert out == ctr_keystream(b"\x00" * 16, 0, 16)
        assert out.hex() == "66e94bd4ef8a2c3b884cfa59ca342b2e"

    def test_matches_reference_all_offsets(self):
        key = crypto.SessionKey(bytes(range(16)), b"\x00" * 32)
        rng = random.Random(7)
        for direction, base in ((crypto.FORWARD, 0), (crypto.BACKWARD, 1 << 127)):
            for offset in (0, 1, 15, 16, 17, 100):
                data = rng.randbytes(65)
                st = crypto.LayerCipherState(key, direction, stream_offset=offset)
                assert st.process(data) == ctr_crypt(key.key_bytes, base, data, skip=offset)

    def test_roundtrip_all_lengths(self):
        key = crypto.SessionKey(b"k" * 16, b"\x00" * 32)
        rng = random.Random(5)
        enc = crypto.LayerCipherState(key, crypto.FORWARD)
        dec = crypto.LayerCipherState(key, crypto.FORWARD)
        for length in list(range(0, 64)) + [255, 498, 1024, 2048]:
            m = rng.randbytes(length)
            assert crypto.layer_decrypt(dec, crypto.layer_encrypt(enc, m)) == m
        assert enc.stream_offset == dec.stream_offset

    def test_keystream_never_reused_across_messages(self):
        key = crypto.SessionKey(b"q" * 16, b"\x00" * 32)
        st = crypto.LayerCipherState(key, crypto.FORWARD)
        part1 = st.process(b"\x00" * 30)
        assert st.stream_offset == 30
        part2 = st.process(b"\x00" * 40)
        assert st.stream_offset == 70
        whole = crypto.LayerCipherState(key, crypto.FORWARD).process(b"\x00" * 70)
        assert part1 + part2 == whole  # contiguous, non-overlapping keystream

    def test_seek_resumes_exactly(self):
        key = crypto.SessionKey(b"r" * 16, b"\x00" * 32)
        st = crypto.LayerCipherState(key, crypto.FORWARD)
        st.process(b"\x00" * 37)
        resumed = crypto.LayerCipherState(key, crypto.FORWARD, stream_offset=37)
        rest = b"\x01" * 50
        assert st.process(rest) == resumed.process(rest)

    def test_directions_use_disjoint_keystreams(self):
        key = crypto.SessionKey(b"d" * 16, b"\x00" * 32)
        fwd = crypto.LayerCipherState(key, crypto.FORWARD).process(b"\x00" * 64)
        bwd = crypto.LayerCipherState(key, crypto.BACKWARD).process(b"\x00" * 64)
        assert fwd != bwd

    def test_unknown_direction(self):
        with pytest.raises(ValueError):
            crypto.LayerCipherState(self.zero_key(), "sideways")


class TestHybrid:
    def test_roundtrip_empty(self, keyset):
        env = crypto.hybrid_encrypt(keyset.onion_public, b"")
        assert crypto.hybrid_decrypt(keyset.onion, env) == b""

    def test_roundtrip_dh_half_blob(self, keyset):
        blob = bytes(range(256))
        env = crypto.hybrid_encrypt(keyset.onion_public, blob)
        assert crypto.hybrid_decrypt(keyset.onion, env) == blob

    def test_wrong_key_fails(self, keyset, second_keyset):
        env = crypto.hybrid_encrypt(keyset.onion_public, b"secret")
        with pytest.raises(DecryptionFailure):
            crypto.hybrid_decrypt(second_keyset.onion, env)

    def test_truncated_envelope_fails(self, keyset):
        env = crypto.hybrid_encrypt(keyset.onion_public, b"secret")
        wire = env.to_bytes()
        with pytest.raises(DecryptionFailure):
            crypto.HybridEnvelope.from_bytes(wire[:-3])

    def test_tampered_body_fails(self, keyset):
        env = crypto.hybrid_encrypt(keyset.onion_public, b"secret payload")
        bad = crypto.HybridEnvelope(env.wrapped_key, env.body_ciphertext[:-1] + b"\x00")
        with pytest.raises(DecryptionFailure):
            crypto.hybrid_decrypt(keyset.onion, bad)

    def test_nondeterministic_without_seed(self, keyset):
        a = crypto.hybrid_encrypt(keyset.onion_public, b"same")
        b = crypto.hybrid_encrypt(keyset.onion_public, b"same")
        assert a.body_ciphertext != b.body_ciphertext or a.wrapped_key != b.wrapped_key

    def test_deterministic_under_seed(self, keyset):
        a = crypto.hybrid_encrypt(keyset.onion_public, b"same", crypto.HashDrbg(b"s"))
        b = crypto.hybrid_encrypt(keyset.onion_public, b"same", crypto.HashDrbg(b"s"))
        assert a.to_bytes() == b.to_bytes()

    def test_size_limit(self, keyset):
        with pytest.raises(ValueError):
            crypto.hybrid_encrypt(keyset.onion_public, b"\x00" * (64 * 1024 + 1))

    def test_wire_layout(self, keyset):
        env = crypto.hybrid_encrypt(keyset.onion_public, b"abc")
        wire = env.to_bytes()
        wlen = int.from_bytes(wire[:2], "big")
        assert wlen == len(env.wrapped_key) == 256
        blen = int.from_bytes(wire[2 + wlen : 6 + wlen], "big")
        assert blen == env.body_length
        assert crypto.HybridEnvelope.from_bytes(wire) == env

    def test_manual_oaep_interops_with_library(self, keyset):
        # our padded wrap must open under the library's OAEP, and vice versa
        wrapped = crypto._oaep_wrap(keyset.onion_public, b"k" * 16, b"\x11" * 32)
        oaep = padding.OAEP(padding.MGF1(hashes.SHA256()), hashes.SHA256(), None)
        assert keyset.onion.decrypt(wrapped, oaep) == b"k" * 16
        lib_wrapped = keyset.onion_public.encrypt(b"m" * 16, oaep)
        env = crypto.HybridEnvelope(lib_wrapped, b"")
        from cryptography.hazmat.primitives.ciphers.aead import AESGCM

        body = AESGCM(b"m" * 16).encrypt(b"\x00" * 12, b"payload", None)
        env = crypto.HybridEnvelope(lib_wrapped, body)
        assert crypto.hybrid_decrypt(keyset.onion, env) == b"payload"


class TestSignatures:
    def test_roundtrip(self, keyset):
        sig = crypto.sign(keyset.identity, b"message")
        assert crypto.verify(keyset.identity_public, b"message", sig)

    def test_flipped_bit_fails(self, keyset):
        sig = crypto.sign(keyset.identity, b"message")
        assert not crypto.verify(keyset.identity_public, b"messagf", sig)

    def test_wrong_key_fails(self, keyset, second_keyset):
        sig = crypto.sign(keyset.identity, b"message")
        assert not crypto.verify(second_keyset.identity_public, b"message", sig)

    def test_verify_never_raises(self, keyset):
        assert not crypto.verify(keyset.identity_public, b"m", b"too short")


class TestNodeKeySet:
    def test_fingerprint(self, keyset):
        fp = keyset.fingerprint
        assert len(fp) == 8
        raw = crypto.identity_public_bytes(keyset.identity_public)
        assert fp == hashlib.sha256(raw).digest()[:8]

    def test_seeded_identity_reproducible(self):
        a = crypto.NodeKeySet.generate(b"same-seed")
        b = crypto.NodeKeySet.generate(b"same-seed")
        assert a.fingerprint == b.fingerprint  # identity from seed; onion key fresh

    def test_rotate_bumps_epoch(self):
        ks = crypto.NodeKeySet.generate(b"rotate-me")
        before = crypto.onion_public_bytes(ks.onion_public)
        assert ks.epoch == 0
        ks.rotate_onion()
        assert ks.epoch == 1
        assert crypto.onion_public_bytes(ks.onion_public) != before

    def test_save_load(self, keyset, tmp_path):
        keyset.save(tmp_path / "ks")
        loaded = crypto.NodeKeySet.load(tmp_path / "ks")
        assert loaded.fingerprint == keyset.fingerprint
        assert loaded.epoch == keyset.epoch
        sig = crypto.sign(loaded.identity, b"after reload")
        assert crypto.verify(keyset.identity_public, b"after reload", sig)
        env = crypto.hybrid_encrypt(loaded.onion_public, b"x")
        assert crypto.hybrid_decrypt(keyset.onion, env) == b"x"


class TestHashDrbg:
    def test_deterministic(self):
        assert crypto.HashDrbg(b"a").read(100) == crypto.HashDrbg(b"a").read(100)
        assert crypto.HashDrbg(b"a").read(100) != crypto.HashDrbg(b"b").read(100)

    def test_int_seed(self):
        assert crypto.HashDrbg(7).read(8) == crypto.HashDrbg(7).read(8)

    def test_randint_bounds(self):
        d = crypto.HashDrbg(b"bounds")
        values = {d.randint(3, 9) for _ in range(300)}
        assert min(values) >= 3 and max(values) <= 9
        assert values == set(range(3, 10))
