import json
import os
import time
from pathlib import Path

import pytest

from spns.errors import MalformedLog, ScenarioFailure
from spns.harness import (
    MEGABIT,
    AuditVerdict,
    BenchmarkConfig,
    Deployment,
    ScenarioConfig,
    golden_vectors,
    parse_config_file,
    run_audit,
    run_benchmark,
    run_scenario,
    write_vectors,
)


class TestScenario:
    def test_egress_identity(self, deployment):
        messages = [b"one", b"two" * 1000, b""]
        result = run_scenario(ScenarioConfig(seed=1, messages=messages, deployment=deployment))
        assert result.egress == b"".join(messages)
        assert result.session_count == 1
        assert result.total_time == pytest.approx(result.setup_time + result.transfer_time)

    def test_three_hop(self, deployment):
        result = run_scenario(
            ScenarioConfig(seed=2, hops=3, messages=[b"deep" * 500], deployment=deployment)
        )
        assert result.egress == b"deep" * 500
        session = next(iter(result.core.registered.values()))
        assert len(session["descriptors"]) == 3

    def test_setup_and_transfer_separated(self, deployment):
        small = run_scenario(ScenarioConfig(seed=3, messages=[b"x"], deployment=deployment))
        big = run_scenario(ScenarioConfig(seed=3, messages=[b"x" * 500_000], deployment=deployment))
        assert small.setup_time == pytest.approx(big.setup_time)
        assert big.transfer_time > small.transfer_time * 10


class TestAudit:
    def logs_for(self, tmp_path, deployment, seed=10, leak=False):
        log_dir = tmp_path / f"run-{seed}-{leak}"
        result = run_scenario(
            ScenarioConfig(
                seed=seed,
                messages=[b"sensitive payload " * 30],
                deployment=deployment,
                log_dir=str(log_dir),
                leak_master=leak,
            )
        )
        return sorted(log_dir.glob("*.jsonl")), result.manifest

    def test_honest_run_passes(self, tmp_path, deployment):
        paths, manifest = self.logs_for(tmp_path, deployment)
        verdict = run_audit(paths, manifest)
        assert verdict.passed
        assert verdict.records_scanned > 0
        assert not verdict.violations

    def test_leak_hook_fails_naming_rule(self, tmp_path, deployment):
        paths, manifest = self.logs_for(tmp_path, deployment, seed=11, leak=True)
        verdict = run_audit(paths, manifest)
        assert not verdict.passed
        assert any("real_ue_id" in v for v in verdict.violations)
        assert "FAIL" in str(verdict)

    def test_empty_logs_pass_vacuously_with_warning(self, tmp_path, deployment):
        empty = tmp_path / "empty.jsonl"
        empty.write_text("")
        _, manifest = self.logs_for(tmp_path, deployment, seed=12)
        verdict = run_audit([empty], manifest)
        assert verdict.passed
        assert verdict.warnings

    def test_malformed_log_rejected(self, tmp_path, deployment):
        bad = tmp_path / "bad.jsonl"
        bad.write_text("this is not json\n")
        _, manifest = self.logs_for(tmp_path, deployment, seed=13)
        with pytest.raises(MalformedLog):
            run_audit([bad], manifest)
        missing = tmp_path / "missing-field.jsonl"
        missing.write_text(json.dumps({"node": "x", "kind": "y"}) + "\n")
        with pytest.raises(MalformedLog):
            run_audit([missing], manifest)


class TestBenchmark:
    def test_single_size_single_iteration(self, tmp_path):
        cfg = BenchmarkConfig(
            sizes_bits=[MEGABIT], iterations=1, seed=5, output_path=str(tmp_path / "out.csv")
        )
        report = run_benchmark(cfg)
        assert len(report.rows) == 1
        row = report.rows[0]
        assert row.std_s == 0.0
        assert row.mean_total_s == pytest.approx(row.setup_s + row.transfer_s)
        assert report.r2 == 1.0
        lines = (tmp_path / "out.csv").read_text().splitlines()
        assert lines[0] == "size_bits,mean_total_s,std_s,setup_s,transfer_s,slope,intercept,r2"
        assert lines[1].startswith("1000000,")
        assert lines[-1].startswith(",,,,,")

    def test_deterministic_across_iterations(self):
        report = run_benchmark(BenchmarkConfig(sizes_bits=[2 * MEGABIT], iterations=3, seed=6))
        assert report.rows[0].std_s == 0.0

    def test_linearity_on_small_sweep(self):
        report = run_benchmark(
            BenchmarkConfig(sizes_bits=[MEGABIT, 2 * MEGABIT, 3 * MEGABIT], iterations=1, seed=7)
        )
        assert report.r2 >= 0.99
        expected_slope = (512 / 489) / 10_000_000
        assert report.slope == pytest.approx(expected_slope, rel=0.02)

    def test_config_validation(self):
        with pytest.raises(ValueError):
            BenchmarkConfig(sizes_bits=[])
        with pytest.raises(ValueError):
            BenchmarkConfig(sizes_bits=[2 * MEGABIT, MEGABIT])
        with pytest.raises(ValueError):
            BenchmarkConfig(iterations=0)


class TestConfigFile:
    def test_parse(self, tmp_path):
        cfg = tmp_path / "run.conf"
        cfg.write_text("# comment\nsizes = 1:4\niters=2  # trailing\n\nbandwidth=1e6\n")
        parsed = parse_config_file(cfg)
        assert parsed == {"sizes": "1:4", "iters": "2", "bandwidth": "1e6"}

    def test_bad_line(self, tmp_path):
        cfg = tmp_path / "bad.conf"
        cfg.write_text("no equals here\n")
        with pytest.raises(ValueError):
            parse_config_file(cfg)


class TestVectors:
    def test_write_and_stability(self, tmp_path):
        names = write_vectors(tmp_path)
        assert set(names) == set(golden_vectors())
        again = golden_vectors()
        for name in names:
            assert (tmp_path / name).read_text().strip() == again[name]


class TestCli:
    def test_keygen_and_vectors(self, tmp_path):
        from spns.cli import main

        assert main(["keygen", "--out", str(tmp_path / "k"), "--role", "ran", "--seed", "aa"]) == 0
        assert (tmp_path / "k" / "identity.pub").exists()
        assert main(["vectors", "--out", str(tmp_path / "v")]) == 0
        assert (tmp_path / "v" / "cell_create.hex").exists()

    def test_bench_cli_with_config_file(self, tmp_path, capsys):
        from spns.cli import main

        conf = tmp_path / "bench.conf"
        conf.write_text("csv=%s\n" % (tmp_path / "bench.csv"))
        rc = main(
            ["--config", str(conf), "bench", "--sizes", "1", "--iters", "1", "--seed", "3"]
        )
        assert rc == 0
        out = capsys.readouterr().out
        assert "fit:" in out and "wall clock" in out
        assert (tmp_path / "bench.csv").exists()

    def test_sizes_parsing(self):
        from spns.cli import _parse_sizes

        assert _parse_sizes("1:3", "Mb") == [MEGABIT, 2 * MEGABIT, 3 * MEGABIT]
        assert _parse_sizes("2,5", "Mb") == [2 * MEGABIT, 5 * MEGABIT]
        assert _parse_sizes("1", "MB") == [8 * 1024 * 1024]

    def test_audit_cli(self, tmp_path, deployment, capsys):
        from spns.cli import main

        log_dir = tmp_path / "auditrun"
        run_scenario(
            ScenarioConfig(seed=21, messages=[b"cli audit"], deployment=deployment, log_dir=str(log_dir))
        )
        assert main(["audit", "--logs", str(log_dir)]) == 0
        assert "PASS" in capsys.readouterr().out
        leak_dir = tmp_path / "leakrun"
        run_scenario(
            ScenarioConfig(
                seed=22, messages=[b"cli audit"], deployment=deployment,
                log_dir=str(leak_dir), leak_master=True,
            )
        )
        assert main(["audit", "--logs", str(leak_dir)]) == 1
        assert "FAIL" in capsys.readouterr().out

    def test_usage_error_exit_code(self):
        from spns.cli import main

        with pytest.raises(SystemExit) as exc:
            main(["bench", "--no-such-flag"])
        assert exc.value.code == 2

    def test_ue_build_and_send_end_to_end(self, tmp_path, deployment):
        """keygen, daemons, ue-build then ue-send: core egress equals the file."""
        from spns.cli import main
        from spns.nodes import CoreNode, DirectoryNode, RanNode
        from spns.sockets import SocketNode
        from spns import crypto

        # UE key material via the CLI
        assert main(["keygen", "--out", str(tmp_path / "ue"), "--role", "ue", "--seed", "beef"]) == 0
        (tmp_path / "dirpub").write_text(
            crypto.identity_public_bytes(deployment.directory_keys.identity_public).hex()
        )
        egress_dir = tmp_path / "egress"
        egress_dir.mkdir()
        servers = []
        try:
            dir_server = SocketNode(DirectoryNode("amf", deployment.service), "127.0.0.1", 0).start()
            servers.append(dir_server)
            peers = {"amf": ("127.0.0.1", dir_server.port)}
            core = CoreNode(
                "core", deployment.core_keys, "core", clock=time.time,
                seed=b"cli-core", egress_dir=str(egress_dir),
            )
            core_server = SocketNode(core, "127.0.0.1", 0, peers).start()
            servers.append(core_server)
            peers["core"] = ("127.0.0.1", core_server.port)
            for i in range(len(deployment.ran_keys)):
                node = RanNode(
                    f"ran{i + 1}", deployment.ran_keys[i], deployment.descriptors[i],
                    deployment.snapshot, clock=time.time, seed=b"cli-ran%d" % i,
                )
                server = SocketNode(node, "127.0.0.1", 0, dict(peers)).start()
                servers.append(server)
                peers[f"ran{i + 1}"] = ("127.0.0.1", server.port)
            for server in servers:
                server.peers.update(peers)
            peers_arg = ",".join(f"{k}={h}:{p}" for k, (h, p) in peers.items())
            state = tmp_path / "circuit.json"
            rc = main(
                [
                    "ue-build",
                    "--directory", f"127.0.0.1:{dir_server.port}",
                    "--directory-pub", str(tmp_path / "dirpub"),
                    "--ue-keys", str(tmp_path / "ue"),
                    "--state", str(state),
                    "--peers", peers_arg,
                    "--seed", "cli-seed",
                ]
            )
            assert rc == 0
            payload = os.urandom(120_000)
            (tmp_path / "payload.bin").write_bytes(payload)
            rc = main(
                ["ue-send", "--state", str(state), "--file", str(tmp_path / "payload.bin"),
                 "--peers", peers_arg]
            )
            assert rc == 0
            deadline = time.monotonic() + 10
            egress_file = None
            while time.monotonic() < deadline:
                files = list(egress_dir.glob("*.bin"))
                if files and files[0].stat().st_size >= len(payload):
                    egress_file = files[0]
                    break
                time.sleep(0.05)
            assert egress_file is not None, "no egress appeared"
            assert egress_file.read_bytes() == payload
        finally:
            for server in servers:
                server.close()
