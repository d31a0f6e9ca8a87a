import random

import pytest

from spns import nsi
from spns.errors import MalformedUrn, TooManyHops


class TestPartition:
    def test_two_hop_split_is_5_5_6(self):
        ident = nsi.NsiId(bytes(range(16)))
        p = nsi.partition(ident, 2)
        assert [len(part) for part in p.parts] == [5, 5, 6]
        assert p.parts == (bytes(range(5)), bytes(range(5, 10)), bytes(range(10, 16)))

    def test_one_hop_even_split(self):
        p = nsi.partition(nsi.NsiId(b"\xaa" * 16), 1)
        assert [len(part) for part in p.parts] == [8, 8]

    def test_too_many_hops(self):
        with pytest.raises(TooManyHops):
            nsi.partition(nsi.NsiId(b"\x01" * 16), 16)

    def test_zero_hops_invalid(self):
        with pytest.raises(ValueError):
            nsi.partition(nsi.NsiId(b"\x01" * 16), 0)

    def test_join_inverts_partition_everywhere(self):
        rng = random.Random(11)
        for hops in range(1, 16):
            for _ in range(20):
                ident = nsi.NsiId(rng.randbytes(16))
                p = nsi.partition(ident, hops)
                assert len(p.parts) == hops + 1
                assert nsi.join(p) == ident

    def test_wrong_size_rejected(self):
        with pytest.raises(ValueError):
            nsi.NsiId(b"\x00" * 15)

    def test_unassigned_reserved(self):
        assert nsi.NsiId(b"\x00" * 16).is_unassigned
        assert not nsi.NsiId(b"\x00" * 15 + b"\x01").is_unassigned


class TestUrn:
    def test_known_value(self):
        p = nsi.NsiPartition((b"\xaa" * 5, b"\xbb" * 5, b"\xcc" * 6))
        assert nsi.to_urn(p) == "urn:nsi:aaaaaaaaaa:bbbbbbbbbb:cccccccccccc"

    def test_roundtrip_random(self):
        rng = random.Random(12)
        for _ in range(500):
            hops = rng.randrange(1, 16)
            p = nsi.partition(nsi.NsiId(rng.randbytes(16)), hops)
            assert nsi.from_urn(nsi.to_urn(p)) == p

    @pytest.mark.parametrize(
        "bad",
        [
            "urn:nsi:zz",
            "urn:nsi:",
            "nsi:aabb",
            "urn:nsi:aabb",  # only 2 bytes total
            "urn:nsi:AAAAAAAAAA:bbbbbbbbbb:cccccccccccc",  # uppercase
            "urn:nsi:aaa:aaaaaaa:cccccccccccc",  # odd-length parts
            "urn:nsi:aaaaaaaaaa:bbbbbbbbbb:cccccccccccccc",  # 17 bytes
        ],
    )
    def test_malformed(self, bad):
        with pytest.raises(MalformedUrn):
            nsi.from_urn(bad)
