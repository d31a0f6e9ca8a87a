import dataclasses

import pytest

from spns import crypto
from spns.directory import (
    DirectoryService,
    DirectorySnapshot,
    RouterDescriptor,
    descriptor_sign,
    descriptor_verify,
    pack_address,
    select_path,
    select_route,
    unpack_address,
)
from spns.errors import InsufficientRans, InvalidDescriptor, StaleEpoch


@pytest.fixture(scope="module")
def signed(keyset):
    return descriptor_sign(
        node_name="gnb-alpha",
        gnb_id=314,
        location_area=7,
        supported_nssai=[b"EMBB", b"URLL"],
        slice_part=b"\x01\x02\x03\x04\x05",
        keyset=keyset,
        address="ran-alpha",
    )


class TestDescriptor:
    def test_sign_verify_roundtrip(self, signed):
        assert descriptor_verify(signed)

    def test_mutation_falsifies(self, signed):
        mutated = dataclasses.replace(signed, gnb_id=signed.gnb_id + 1)
        assert not descriptor_verify(mutated)

    def test_serialization_deterministic(self, signed, keyset):
        again = descriptor_sign(
            node_name="gnb-alpha",
            gnb_id=314,
            location_area=7,
            supported_nssai=[b"EMBB", b"URLL"],
            slice_part=b"\x01\x02\x03\x04\x05",
            keyset=keyset,
            address="ran-alpha",
        )
        assert again.to_bytes() == signed.to_bytes()

    def test_bytes_roundtrip_and_reverify(self, signed):
        back = RouterDescriptor.from_bytes(signed.to_bytes())
        assert descriptor_verify(back)
        assert back.to_bytes() == signed.to_bytes()
        assert back.node_name == "gnb-alpha"
        assert back.supported_nssai == (b"EMBB", b"URLL")

    def test_garbage_rejected(self):
        with pytest.raises(InvalidDescriptor):
            RouterDescriptor.from_bytes(b"\x01\x00\x00\x00\x02hi")

    def test_fingerprint_matches_keyset(self, signed, keyset):
        assert signed.fingerprint == keyset.fingerprint


class TestAddressTokens:
    def test_roundtrip(self):
        assert unpack_address(pack_address("core")) == "core"
        assert len(pack_address("a")) == 12

    def test_too_long(self):
        with pytest.raises(ValueError):
            pack_address("much-too-long-token")


class TestService:
    def make_service(self, deployment, count=2):
        service = DirectoryService(deployment.directory_keys)
        for d in deployment.descriptors[:count]:
            service.publish(d)
        service.register_core(deployment.core_keys.onion_public, "core")
        return service

    def test_publish_and_fetch(self, deployment):
        service = self.make_service(deployment)
        snap = service.fetch_snapshot()
        assert len(snap.descriptors) == 2
        assert snap.verify(deployment.directory_keys.identity_public)

    def test_tampered_descriptor_rejected(self, deployment):
        service = self.make_service(deployment)
        bad = dataclasses.replace(deployment.descriptors[0], gnb_id=999)
        with pytest.raises(InvalidDescriptor):
            service.publish(bad)
        assert all(descriptor_verify(d) for d in service.fetch_snapshot().descriptors)

    def test_core_rotation_bumps_epoch(self, deployment):
        service = self.make_service(deployment)
        assert service.fetch_snapshot().epoch == 0
        fresh = crypto.NodeKeySet.generate(b"fresh-core")
        service.register_core(fresh.onion_public, "core")
        assert service.fetch_snapshot().epoch == 1

    def test_stale_epoch(self, deployment):
        service = self.make_service(deployment)
        service.register_core(crypto.NodeKeySet.generate(b"f2").onion_public, "core")
        with pytest.raises(StaleEpoch):
            service.fetch_snapshot(expected_epoch=0)
        assert service.fetch_snapshot(expected_epoch=1).epoch == 1

    def test_no_core_key_yet(self, deployment):
        service = DirectoryService(deployment.directory_keys)
        with pytest.raises(StaleEpoch):
            service.fetch_snapshot()

    def test_snapshot_signature_binds_content(self, deployment):
        snap = self.make_service(deployment).fetch_snapshot()
        forged = dataclasses.replace(snap, epoch=snap.epoch + 1)
        assert not forged.verify(deployment.directory_keys.identity_public)

    def test_snapshot_file_roundtrip(self, deployment, tmp_path):
        snap = self.make_service(deployment).fetch_snapshot()
        snap.save_hex(tmp_path / "snap.hex")
        loaded = DirectorySnapshot.load_hex(tmp_path / "snap.hex")
        assert loaded.to_bytes() == snap.to_bytes()
        assert loaded.verify(deployment.directory_keys.identity_public)


class TestSelectPath:
    def snapshot(self, deployment):
        service = DirectoryService(deployment.directory_keys)
        for d in deployment.descriptors:
            service.publish(d)
        service.register_core(deployment.core_keys.onion_public, "core")
        return service.fetch_snapshot()

    def test_two_matching(self, deployment):
        snap = self.snapshot(deployment)
        secondary, master = select_path(snap, b"EMBB", 1)
        assert secondary.fingerprint != master.fingerprint

    def test_deterministic_under_seed(self, deployment):
        snap = self.snapshot(deployment)
        picks = {
            tuple(d.fingerprint for d in select_path(snap, b"EMBB", 42)) for _ in range(5)
        }
        assert len(picks) == 1

    def test_insufficient(self, deployment):
        snap = self.snapshot(deployment)
        with pytest.raises(InsufficientRans):
            select_path(snap, b"NONE", 1)

    def test_route_of_three(self, deployment):
        snap = self.snapshot(deployment)
        route = select_route(snap, b"EMBB", 7, 3)
        assert len({d.fingerprint for d in route}) == 3

    def test_three_matching_of_five_reproducible(self, deployment):
        # two extra descriptors advertise a different slice type; the pick
        # must filter them out and stay stable under a fixed seed
        others = [
            descriptor_sign(
                node_name=f"gnb-urllc-{i}",
                gnb_id=500 + i,
                location_area=2,
                supported_nssai=[b"URLL"],
                slice_part=b"\x55" * 5,
                keyset=deployment.ran_keys[i],
                address=f"uran{i}",
            )
            for i in range(2)
        ]
        base = self.snapshot(deployment)
        snap = dataclasses.replace(base, descriptors=base.descriptors + tuple(others))
        assert len(snap.descriptors) == 5
        first = select_path(snap, b"EMBB", 99)
        for _ in range(3):
            again = select_path(snap, b"EMBB", 99)
            assert [d.fingerprint for d in again] == [d.fingerprint for d in first]
        assert all(b"EMBB" in d.supported_nssai for d in first)


class TestCellInterface:
    def test_publish_and_fetch_over_cells(self, deployment):
        from spns.circuit import (
            DIR_STATUS_OK,
            TAG_DIR_SNAPSHOT,
            TAG_DIR_STATUS,
            directory_fetch_cells,
        )
        from spns.cells import ControlAssembler, decode_cell, decode_tlv
        from spns.nodes import DirectoryNode, directory_publish_cells, directory_register_core_cells
        from spns.simnet import SimNetwork

        service = DirectoryService(deployment.directory_keys)
        node = DirectoryNode("amf", service)
        sim = SimNetwork()
        sim.register("amf", node)

        class Sink:
            def __init__(self):
                self.cells = []

            def handle_cell(self, peer, wire):
                self.cells.append(wire)
                return []

        sink = Sink()
        sim.register("client", sink)
        for wire in directory_register_core_cells(deployment.core_keys.onion_public, "core"):
            sim.send("client", "amf", wire)
        for d in deployment.descriptors[:2]:
            for wire in directory_publish_cells(d):
                sim.send("client", "amf", wire)
        for wire in directory_fetch_cells():
            sim.send("client", "amf", wire)
        sim.run_until_idle()

        asm = ControlAssembler()
        payload = None
        for wire in sink.cells:
            cell = decode_cell(wire)
            payload = asm.feed(cell) or payload
        fields = dict(decode_tlv(payload))
        assert fields[TAG_DIR_STATUS][0] == DIR_STATUS_OK
        snap = DirectorySnapshot.from_bytes(fields[TAG_DIR_SNAPSHOT])
        assert len(snap.descriptors) == 2
        assert snap.verify(deployment.directory_keys.identity_public)
