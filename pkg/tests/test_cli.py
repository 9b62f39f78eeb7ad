"""Command-line interface: exit codes, output contracts, config handling."""

import json
import re

import pytest

from conftest import TOKENS
from llbforge.cli import main
from llbforge.cls import LogicStore
from llbforge.l5k import parse
from llbforge.model import diff, normalize

MINI = """\
CONTROLLER Mini (SerialNumber := 16#0000_00AA)
TAG
    btn : BOOL @ IN : 0 ;
    lamp : BOOL @ OUT : 0 ;
    n : DINT ;
    buf : DINT[2] ;
END_TAG
PROGRAM MainProgram (Main := Main)
ROUTINE Main
    N0: XIC(btn)OTE(lamp);
    N1: XIC(btn)ADD(n,1,n);
    N2: EQU(n,3)MOV(buf[9],n);
END_ROUTINE
END_PROGRAM
END_CONTROLLER
"""


def run_cli(argv):
    try:
        return main(argv)
    except SystemExit as exc:  # argparse usage failures
        return exc.code if isinstance(exc.code, int) else 2


@pytest.fixture
def workdir(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    return tmp_path


@pytest.fixture
def base_file(workdir, base_text):
    p = workdir / "tank.l5k"
    p.write_text(base_text)
    return p


@pytest.fixture
def mini_file(workdir):
    p = workdir / "mini.l5k"
    p.write_text(MINI)
    return p


class TestParse:
    def test_summary_line(self, base_file, capsys):
        assert run_cli(["parse", str(base_file)]) == 0
        out = capsys.readouterr().out
        assert "controller=Tank1_Ctrl" in out
        assert "serial=16#0013_F0A1" in out
        assert "data_logic_bytes=3921" in out
        assert "io_bytes=16" in out

    def test_missing_file(self, workdir, capsys):
        assert run_cli(["parse", "nope.l5k"]) == 1
        assert "nope.l5k" in capsys.readouterr().err

    def test_bad_project(self, workdir, capsys):
        (workdir / "bad.l5k").write_text("CONTROLLER X ( oh no")
        assert run_cli(["parse", "bad.l5k"]) == 1
        assert "parse error" in capsys.readouterr().err


class TestRun:
    def write_trace(self, workdir, rows, header="scan,0"):
        p = workdir / "in.csv"
        p.write_text(header + "\n" + "\n".join(rows) + "\n")
        return p

    def test_watch_trace(self, mini_file, workdir, capsys):
        trace = self.write_trace(workdir, ["1,1", "2,0"])
        code = run_cli(["run", str(mini_file), "--trace", str(trace),
                        "--watch", "lamp", "--watch", "n"])
        out = capsys.readouterr().out
        assert code == 0
        lines = out.splitlines()
        assert lines[0] == "scan=1 clock=100 fault=- lamp=1 n=1"
        assert lines[1] == "scan=2 clock=200 fault=- lamp=0 n=1"

    def test_values_latch_across_gaps(self, mini_file, workdir, capsys):
        # rows exist for scans 1 and 4 only; btn stays 1 through scan 3,
        # so the counter reaches 3 and the bad subscript rung fires there
        trace = self.write_trace(workdir, ["1,1", "4,0"])
        code = run_cli(["run", str(mini_file), "--trace", str(trace),
                        "--watch", "n"])
        out = capsys.readouterr().out.splitlines()
        assert code == 3
        assert [ln.split()[-1] for ln in out] == ["n=1", "n=2", "n=3"]
        assert "fault=ArraySubscript" in out[2]
        assert len(out) == 3  # trace ends at the faulting scan

    def test_fault_exit_code(self, mini_file, workdir, capsys):
        trace = self.write_trace(workdir, ["1,1", "2,1", "3,1"])
        assert run_cli(["run", str(mini_file), "--trace", str(trace)]) == 3

    def test_dt_flag_sets_clock(self, mini_file, workdir, capsys):
        trace = self.write_trace(workdir, ["1,0"])
        run_cli(["run", str(mini_file), "--trace", str(trace),
                 "--dt", "250"])
        assert "clock=250" in capsys.readouterr().out

    def test_config_dt(self, mini_file, workdir, capsys):
        (workdir / "llbforge.toml").write_text("dt_ms = 7\n")
        trace = self.write_trace(workdir, ["1,0"])
        run_cli(["run", str(mini_file), "--trace", str(trace)])
        assert "clock=7" in capsys.readouterr().out
        # flag beats file
        run_cli(["run", str(mini_file), "--trace", str(trace),
                 "--dt", "9"])
        assert "clock=9" in capsys.readouterr().out

    def test_bad_header(self, mini_file, workdir, capsys):
        trace = self.write_trace(workdir, ["1,1"], header="scan,btn")
        assert run_cli(["run", str(mini_file),
                        "--trace", str(trace)]) == 1
        assert "channel columns" in capsys.readouterr().err

    def test_zero_based_scan_rejected(self, mini_file, workdir, capsys):
        trace = self.write_trace(workdir, ["0,1"])
        assert run_cli(["run", str(mini_file),
                        "--trace", str(trace)]) == 1
        assert "1-based" in capsys.readouterr().err


class TestInject:
    def test_out_and_manifest(self, base_file, workdir, base, capsys):
        code = run_cli(["inject", str(base_file), "--attack", "3",
                        "--out", "evil.l5k", "--manifest", "evil.json"])
        assert code == 0
        injected = parse((workdir / "evil.l5k").read_text())
        assert not diff(normalize(base), injected).is_identical
        manifest = json.loads((workdir / "evil.json").read_text())
        assert manifest["descriptor"]["payload"]["kind"] == "FifoLog"
        assert manifest["io_delta_bytes"] == 0

    def test_stdout_mode(self, base_file, capsys):
        assert run_cli(["inject", str(base_file), "--attack", "1"]) == 0
        out = capsys.readouterr().out
        assert out.startswith("CONTROLLER Tank1_Ctrl")
        parse(out)

    def test_unknown_attack(self, base_file, capsys):
        assert run_cli(["inject", str(base_file), "--attack", "9"]) == 2
        assert "unknown preset" in capsys.readouterr().err


class TestSimulate:
    SCENARIO = """\
duration_scans = 40
dt_ms = 60000
watch = ["LevelEng"]

[tank]
level_mm = 400.0
area_cm2 = 1000.0
inflow_lpm = 10.0
outflow_lpm = 10.0
capacity_mm = 1200.0
level_hi_mm = 950.0
level_lo_mm = 25.0

[channels]
level = 0
pump = 0
valve = 1
"""

    def test_writes_outputs(self, workdir, capsys):
        (workdir / "quiet.toml").write_text(self.SCENARIO)
        assert run_cli(["simulate", "quiet.toml"]) == 0
        printed = capsys.readouterr().out.splitlines()
        assert printed == ["quiet.trace", "quiet.events"]
        trace = (workdir / "quiet.trace").read_text()
        assert trace.count("\n") == 40
        assert "tank=" in trace

    def test_attack_writes_manifest(self, workdir, capsys):
        (workdir / "hot.toml").write_text('attack = "1"\n' + self.SCENARIO)
        assert run_cli(["simulate", "hot.toml", "--out-dir", "res"]) == 0
        manifest = json.loads((workdir / "res" / "hot.manifest.json")
                              .read_text())
        assert manifest["io_delta_bytes"] == 0
        assert "descriptor" in manifest

    def test_bad_scenario(self, workdir, capsys):
        (workdir / "junk.toml").write_text("mystery = 1\n")
        assert run_cli(["simulate", "junk.toml"]) == 1
        assert "mystery" in capsys.readouterr().err


class TestRaloc:
    def test_two_decimals(self, base_file, workdir, capsys):
        run_cli(["inject", str(base_file), "--attack", "2",
                 "--out", "evil.l5k"])
        capsys.readouterr()
        assert run_cli(["raloc", str(base_file), "evil.l5k"]) == 0
        assert capsys.readouterr().out == "8.37\n"

    def test_identity(self, base_file, capsys):
        run_cli(["raloc", str(base_file), str(base_file)])
        assert capsys.readouterr().out == "0.00\n"


class TestValidate:
    @pytest.fixture
    def store_dir(self, workdir):
        d = workdir / "store"
        store = LogicStore(d, TOKENS)
        lines = "".join(f"token.{k} = {v}\n" for k, v in TOKENS.items())
        (d / "cls.toml").write_text(lines)
        (workdir / "tok.txt").write_text(TOKENS["engineer"] + "\n")
        return d, store

    def test_unknown_then_seed_then_match(self, base_file, store_dir,
                                          capsys):
        d, _ = store_dir
        assert run_cli(["validate", str(base_file),
                        "--store", str(d)]) == 1
        assert "UNKNOWN" in capsys.readouterr().out
        assert run_cli(["validate", str(base_file), "--store", str(d),
                        "--resolve", "update-golden",
                        "--token-file", "tok.txt"]) == 1
        assert "GOLDEN created version=1" in capsys.readouterr().out
        assert run_cli(["validate", str(base_file),
                        "--store", str(d)]) == 0
        assert "MATCH" in capsys.readouterr().out

    def test_mismatch_reports_diff(self, base_file, store_dir, base_text,
                                   capsys):
        d, store = store_dir
        store.upload(0x0013F0A1, base_text, "alice", TOKENS["engineer"])
        run_cli(["inject", str(base_file), "--attack", "4a",
                 "--out", "local.l5k"])
        capsys.readouterr()
        assert run_cli(["validate", "local.l5k", "--store", str(d)]) == 1
        out = capsys.readouterr().out
        assert out.startswith("MISMATCH serial=1306785 golden_version=1")
        assert "+" in out  # unified diff body present

    def test_resolve_attack_posts_alarm(self, base_file, store_dir,
                                        base_text, capsys):
        d, store = store_dir
        store.upload(0x0013F0A1, base_text, "alice", TOKENS["engineer"])
        run_cli(["inject", str(base_file), "--attack", "1",
                 "--out", "local.l5k"])
        assert run_cli(["validate", "local.l5k", "--store", str(d),
                        "--resolve", "attack",
                        "--operator", "oncall"]) == 1
        assert "ALARM raised" in capsys.readouterr().out
        assert len(store.alarms()) == 1
        assert store.alarms()[0].raised_by == "oncall"

    def test_resolve_restore_local(self, base_file, store_dir, base_text,
                                   workdir, capsys):
        d, store = store_dir
        store.upload(0x0013F0A1, base_text, "alice", TOKENS["engineer"])
        run_cli(["inject", str(base_file), "--attack", "2",
                 "--out", "local.l5k"])
        assert run_cli(["validate", "local.l5k", "--store", str(d),
                        "--resolve", "restore-local",
                        "--restore-to", "clean.l5k"]) == 1
        assert (workdir / "clean.l5k").read_text() == base_text
        # omitting the target is a usage error
        assert run_cli(["validate", "local.l5k", "--store", str(d),
                        "--resolve", "restore-local"]) == 2

    def test_store_from_config(self, base_file, store_dir, base_text,
                               workdir, capsys):
        d, store = store_dir
        store.upload(0x0013F0A1, base_text, "alice", TOKENS["engineer"])
        (workdir / "llbforge.toml").write_text(f'store = "{d}"\n')
        assert run_cli(["validate", str(base_file)]) == 0

    def test_no_store_is_usage_error(self, base_file, capsys):
        assert run_cli(["validate", str(base_file)]) == 2
        assert "--store" in capsys.readouterr().err

    def test_validate_over_http(self, base_file, served_store, base_text,
                                capsys):
        store, url = served_store
        store.upload(0x0013F0A1, base_text, "alice", TOKENS["engineer"])
        assert run_cli(["validate", str(base_file), "--store", url]) == 0
        assert "MATCH" in capsys.readouterr().out


class TestFirmwareCommands:
    def test_keygen_sign_verify_cycle(self, workdir, capsys):
        assert run_cli(["fw", "keygen", "--out-key", "k.pem",
                        "--out-anchor", "a.pem"]) == 0
        assert re.match(r"issuer_id=[0-9a-f]{16}$",
                        capsys.readouterr().out.strip())
        (workdir / "img.bin").write_bytes(bytes(range(64)))
        assert run_cli(["fw", "sign", "img.bin", "--key", "k.pem",
                        "--out", "fw.zip", "--fw-version", "3.2",
                        "--code", "1756"]) == 0
        capsys.readouterr()
        assert run_cli(["fw", "verify", "fw.zip",
                        "--anchor", "a.pem"]) == 0
        assert capsys.readouterr().out.strip() == "ACCEPTED"

    def test_verify_rejects_foreign_signer(self, workdir, capsys):
        run_cli(["fw", "keygen", "--out-key", "k1.pem",
                 "--out-anchor", "a1.pem"])
        run_cli(["fw", "keygen", "--out-key", "k2.pem",
                 "--out-anchor", "a2.pem"])
        (workdir / "img.bin").write_bytes(b"\x7f" * 64)
        run_cli(["fw", "sign", "img.bin", "--key", "k2.pem",
                 "--out", "fw.zip"])
        capsys.readouterr()
        assert run_cli(["fw", "verify", "fw.zip",
                        "--anchor", "a1.pem"]) == 1
        assert "code=11001" in capsys.readouterr().out

    def test_sign_custom_addresses(self, workdir, capsys):
        run_cli(["fw", "keygen", "--out-key", "k.pem",
                 "--out-anchor", "a.pem"])
        (workdir / "one.bin").write_bytes(b"a" * 16)
        (workdir / "two.bin").write_bytes(b"b" * 16)
        assert run_cli(["fw", "sign", "one.bin", "two.bin",
                        "--key", "k.pem", "--out", "fw.zip",
                        "--addr", "16#0800_0000",
                        "--addr", "16#0810_0000"]) == 0
        from llbforge.firmware import load_bundle
        bundle = load_bundle(workdir / "fw.zip")
        assert [e.load_address for e in bundle.manifest] == \
            [0x08000000, 0x08100000]


class TestServeSubprocess:
    def test_serve_and_roundtrip(self, tmp_path, base_text):
        import socket
        import subprocess
        import sys
        import time

        import requests

        from llbforge.cls import StoreClient

        with socket.socket() as s:
            s.bind(("127.0.0.1", 0))
            port = s.getsockname()[1]
        store_dir = tmp_path / "store"
        store_dir.mkdir()
        (store_dir / "cls.toml").write_text(
            "token.ci = tok-ci-secret\n")
        proc = subprocess.Popen(
            [sys.executable, "-m", "llbforge", "serve",
             "--store-dir", str(store_dir),
             "--listen", f"127.0.0.1:{port}"],
            stdout=subprocess.PIPE, stderr=subprocess.PIPE)
        url = f"http://127.0.0.1:{port}"
        try:
            for _ in range(100):
                try:
                    requests.get(f"{url}/v1/logic", timeout=0.2)
                    break
                except requests.ConnectionError:
                    if proc.poll() is not None:
                        raise AssertionError(
                            proc.stderr.read().decode())
                    time.sleep(0.05)
            client = StoreClient(url, token="tok-ci-secret")
            rec = client.upload(0x0013F0A1, base_text, "ci")
            assert rec.version == 1
            assert client.fetch(0x0013F0A1).l5k_text == base_text
        finally:
            proc.terminate()
            proc.wait(timeout=5)
        # the files landed in the directory the server was pointed at
        assert (store_dir / "0013f0a1" / "1.l5k").exists()


class TestBaselineAndUsage:
    def test_baseline_stdout(self, workdir, capsys, base_text):
        assert run_cli(["baseline"]) == 0
        assert capsys.readouterr().out == base_text

    def test_baseline_out(self, workdir, capsys, base_text):
        assert run_cli(["baseline", "--out", "t.l5k"]) == 0
        assert (workdir / "t.l5k").read_text() == base_text

    def test_no_command(self, capsys):
        assert run_cli([]) == 2

    def test_unknown_command(self, capsys):
        assert run_cli(["frobnicate"]) == 2

    def test_bad_listen_spec(self, workdir, capsys):
        assert run_cli(["serve", "--store-dir", "s",
                        "--listen", "nope"]) == 2
