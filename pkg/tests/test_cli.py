import socket
import subprocess
import sys
import time

import pytest

from layered_attest import platform_sim as ps
from layered_attest.cli import fixture_manifest, main, parse_scenario, run_scenario_text
from layered_attest.cli.scenario import ScenarioParseError

FIXTURES = ps.fixture_dir()


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


@pytest.fixture
def session(tmp_path, capsys):
    state = tmp_path / "s"
    code, out, _ = run(capsys, "provision", "--state", state, "--seed", 5)
    assert code == 0 and "provisioned stopgap" in out
    return state


def test_provision_writes_session_files(session):
    for name in ("session.scn", "golden.txt", "protocol.copland", "manifest.txt"):
        assert (session / name).exists()


def test_manifest_is_byte_identical_per_seed(tmp_path, capsys):
    for d in ("a", "b"):
        assert run(capsys, "provision", "--state", tmp_path / d, "--seed", 9)[0] == 0
    assert (tmp_path / "a" / "manifest.txt").read_bytes() == (tmp_path / "b" / "manifest.txt").read_bytes()
    run(capsys, "provision", "--state", tmp_path / "c", "--seed", 10)
    assert (tmp_path / "a" / "golden.txt").read_bytes() != (tmp_path / "c" / "golden.txt").read_bytes()


def test_packaged_manifest_is_current():
    assert (FIXTURES / "manifest.txt").read_text() == fixture_manifest()


def test_boot_attest_appraise(session, capsys):
    code, out, _ = run(capsys, "boot", "--state", session)
    assert code == 0 and "key release: released" in out and "differing from golden: none" in out
    code, out, _ = run(capsys, "attest", "--state", session)
    assert code == 0
    bundle = session / "bundle.bin"
    code, out, _ = run(capsys, "appraise", "--state", session, bundle)
    assert code == 0 and out.splitlines()[-1] == "overall    PASSED"
    # same bundle against someone else's nonce
    code, out, _ = run(capsys, "appraise", "--state", session, bundle, "--nonce", "00" * 32)
    assert code == 1 and "nonce      FAILED" in out


def test_flipped_boot_denies_signing(session, capsys):
    code, out, _ = run(capsys, "boot", "--state", session, "--flip", "kernel:5")
    assert "key release: withheld" in out and out.splitlines()[1].endswith("golden: 9")
    code, out, _ = run(capsys, "attest", "--state", session)
    assert code == 1 and "signing denied: pcr_mismatch" in out


def test_attack_then_attest_fails_lkim(session, capsys):
    run(capsys, "boot", "--state", session)
    code, out, _ = run(capsys, "attack", "--state", session, "read_file", ps.ASK_BLOB_PATH)
    assert code == 1 and out.startswith("action_denied")
    assert run(capsys, "attack", "--state", session, "corrupt_kernel")[0] == 0
    run(capsys, "attest", "--state", session)
    code, out, _ = run(capsys, "appraise", "--state", session, session / "bundle.bin")
    assert code == 1 and "target lkim kerIma  FAILED (digest mismatch)" in out


def test_commands_need_a_session(tmp_path, capsys):
    code, _, err = run(capsys, "boot", "--state", tmp_path / "none")
    assert code == 2 and "provision" in err


def test_bad_flip_syntax(session, capsys):
    assert run(capsys, "boot", "--state", session, "--flip", "kernel")[0] == 2


def test_analyze_cds_graph(capsys):
    code, out, _ = run(capsys, "analyze", FIXTURES / "cds_graph.txt")
    assert code == 0 and out.startswith("ATTACK 1: ")
    code, out, _ = run(capsys, "analyze", FIXTURES / "cds_graph.txt", "--spec", FIXTURES / "cds_constraints.txt")
    assert code == 0 and out == "no attacks\n"


def test_analyze_report_is_deterministic(capsys):
    args = ("analyze", FIXTURES / "cds_graph.txt", "--spec", FIXTURES / "cds_constraints.txt", "--ablate")
    first = run(capsys, *args)[1]
    assert first == run(capsys, *args)[1]
    assert "--- ablation ---" in first and "without [forbid uefi]:" in first


def test_analyze_figure(tmp_path, capsys):
    fig = tmp_path / "ablation.png"
    code, out, _ = run(capsys, "analyze", FIXTURES / "cds_graph.txt", "--spec",
                       FIXTURES / "cds_constraints.txt", "--figure", fig)
    assert code == 0 and f"figure: {fig}" in out
    data = fig.read_bytes()
    assert data.startswith(b"\x89PNG") and len(data) > 1000


def test_analyze_parse_error_exit_2(tmp_path, capsys):
    bad = tmp_path / "g.txt"
    bad.write_text("measures:\n  a b c\n")
    code, _, err = run(capsys, "analyze", bad)
    assert code == 2 and "line 2" in err


def test_analyze_budget_cap(capsys):
    code, _, err = run(capsys, "analyze", FIXTURES / "cds_graph.txt", "--budget", "9")
    assert code == 2 and "budget" in err


def test_scenario_command(tmp_path, capsys):
    code, out, _ = run(capsys, "scenario", FIXTURES / "scenarios" / "replay.scn")
    assert code == 0 and out.splitlines()[-1].startswith("scenario PASS")
    failing = tmp_path / "f.scn"
    failing.write_text("step provision stopgap\nstep boot\nexpect withheld\n")
    code, out, _ = run(capsys, "scenario", failing)
    assert code == 1 and "FAIL" in out
    broken = tmp_path / "b.scn"
    broken.write_text("step fly\n")
    assert run(capsys, "scenario", broken)[0] == 2


def test_scenario_parse_errors():
    with pytest.raises(ScenarioParseError) as err:
        parse_scenario("step provision\nexpect nonsense\n")
    assert err.value.line == 2
    with pytest.raises(ScenarioParseError):
        parse_scenario("launch rockets\n")


def test_scenario_report_deterministic():
    text = (FIXTURES / "scenarios" / "runtime_kernel.scn").read_text()
    a = run_scenario_text(text, FIXTURES / "scenarios")
    b = run_scenario_text(text, FIXTURES / "scenarios")
    assert a.exit_code == 0 and a.report == b.report


def test_unknown_subcommand_is_usage_error(capsys):
    with pytest.raises(SystemExit) as err:
        main(["frobnicate"])
    assert err.value.code == 2


def free_port():
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        return s.getsockname()[1]


def test_serve_and_query_processes(session, capsys):
    run(capsys, "boot", "--state", session)
    port = free_port()
    listen = f"127.0.0.1:{port}"
    proc = subprocess.Popen(
        [sys.executable, "-m", "layered_attest", "serve", "--state", str(session), "--listen", listen],
        stdout=subprocess.PIPE, stderr=subprocess.PIPE, text=True,
    )
    try:
        assert proc.stdout.readline().startswith("serving on")
        deadline = time.time() + 10
        while True:
            try:
                socket.create_connection(("127.0.0.1", port), timeout=1).close()
                break
            except OSError:
                assert time.time() < deadline
                time.sleep(0.05)
        code, out, _ = run(capsys, "query", "--state", session, "--connect", listen)
        assert code == 0 and out.splitlines()[-1] == "overall    PASSED"
        code, out, _ = run(capsys, "query", "--state", session, "--connect", listen, "--protocol-id", "x")
        assert code == 1 and "unknown protocol" in out
    finally:
        proc.terminate()
        proc.wait(timeout=10)


def test_query_without_server(session, capsys):
    code, out, _ = run(capsys, "query", "--state", session, "--connect", f"127.0.0.1:{free_port()}", "--timeout", "1")
    assert code == 1 and "ConnectionFailed" in out
