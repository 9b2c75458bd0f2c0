import json
from pathlib import Path

import pytest

from app.routes.cli import EXIT_FINDING, EXIT_LIMITATION, EXIT_OK, EXIT_USAGE, main
from app.services.samples import handcrafted_a, protected_sample, unsafe_sample
from app.services.x86_codec import Asm

FIXTURES = Path(__file__).resolve().parent.parent / "fixtures"


@pytest.fixture
def elf(tmp_path):
    def write(sample, name=None):
        path = tmp_path / f"{name or sample.name}.elf"
        path.write_bytes(sample.image.raw)
        return path
    return write


def _json(text):
    return json.loads(text)


def test_scan(elf, capsys):
    path = elf(protected_sample())
    assert main(["scan", str(path)]) == EXIT_OK
    report = _json(capsys.readouterr().out)
    assert report['tool'] == "erim-forge"
    assert report['input']['path'] == str(path)
    assert [o['kind'] for o in report['occurrences']] == ["WRPKRU", "WRPKRU"]
    assert all(o['executable'] for o in report['occurrences'])


def test_inspect_exit_codes(elf, capsys):
    assert main(["inspect", str(elf(protected_sample()))]) == EXIT_OK
    report = _json(capsys.readouterr().out)
    assert report['inspection']['passed']
    assert [v['verdict'] for v in report['inspection']['verdicts']] == ["SafeA", "SafeB"]

    assert main(["inspect", str(elf(unsafe_sample()))]) == EXIT_FINDING
    report = _json(capsys.readouterr().out)
    assert [v['verdict'] for v in report['inspection']['verdicts']] == ["Unsafe"]


def test_inspect_raw_with_entry_list(tmp_path, capsys):
    code = Asm.assemble([Asm.wrpkru(), Asm.nop(), Asm.ret()])
    raw = tmp_path / "gate.bin"
    raw.write_bytes(code)
    entries = tmp_path / "entries.txt"
    entries.write_text("1003\n")
    assert main(["inspect", str(raw), "--raw", "--base", "1000"]) == EXIT_FINDING
    capsys.readouterr()
    assert main(["inspect", str(raw), "--raw", "--base", "1000",
                 "--entries", str(entries)]) == EXIT_OK


def test_rewrite_then_inspect(elf, tmp_path, capsys):
    sample = handcrafted_a()
    source = elf(sample)
    output = tmp_path / "rewritten.elf"
    assert main(["rewrite", str(source), str(output)]) == EXIT_OK
    report = _json(capsys.readouterr().out)
    assert report['inspection']['passed']
    assert report['rewrite']['rules']
    assert report['rewrite']['trampolines'] > 0
    assert report['output']['path'] == str(output)

    assert main(["inspect", str(output)]) == EXIT_OK
    capsys.readouterr()

    again = tmp_path / "again.elf"
    assert main(["rewrite", str(output), str(again)]) == EXIT_OK
    assert again.read_bytes() == output.read_bytes()
    assert _json(capsys.readouterr().out)['rewrite']['rules'] == {}


def test_rewrite_policy_options(elf, tmp_path, capsys):
    source = elf(handcrafted_a())
    output = tmp_path / "out.elf"
    assert main(["rewrite", str(source), str(output), "--allow-flag-clobber",
                 "--free-registers", "r8,r9,r10,r11"]) == EXIT_OK
    capsys.readouterr()
    assert main(["rewrite", str(source), str(output), "--free-registers", "rsp"]) == EXIT_USAGE
    assert _json(capsys.readouterr().err)['error_code'] == "BAD_CONFIG"
    assert main(["rewrite", str(source), str(output), "--free-registers", "xmm0"]) == EXIT_USAGE


def test_rewrite_undecodable_code_is_a_limitation(tmp_path, capsys):
    raw = tmp_path / "odd.bin"
    raw.write_bytes(b"\x62" + Asm.assemble([Asm.wrpkru()]))
    assert main(["rewrite", str(raw), str(tmp_path / "out.bin"), "--raw"]) == EXIT_LIMITATION
    assert _json(capsys.readouterr().err)['error_code'] == "NOT_IN_SUBSET"


def test_gate_hex(capsys):
    assert main(["gate", "--mode", "enter", "--hex"]) == EXIT_OK
    assert capsys.readouterr().out == "31c931d2b80f0000000f01ef\n"
    assert main(["gate", "--mode", "exit", "--disallow", "7", "--hex"]) == EXIT_OK
    assert "3d07000000" in capsys.readouterr().out


def test_gate_raw_bytes(capsysbinary):
    assert main(["gate", "--mode", "xrstor-guard"]) == EXIT_OK
    assert capsysbinary.readouterr().out == bytes.fromhex("0fbae0097307b83c0000000f05")


def test_sim(tmp_path, capsys):
    trace = tmp_path / "trace.jsonl"
    assert main(["sim", str(FIXTURES / "protected.scn"), "--seed", "1",
                 "--trace", str(trace)]) == EXIT_OK
    report = _json(capsys.readouterr().out)
    assert report['passed'] and report['seed'] == 1
    events = [json.loads(line) for line in trace.read_text().splitlines()]
    assert events[0]['event'] == "init"
    assert events[-1]['event'] == "exit"

    assert main(["sim", str(FIXTURES / "unsafe-unchecked.scn")]) == EXIT_FINDING
    report = _json(capsys.readouterr().out)
    assert report['first_violation']['invariant'] == "grant-outside-entry"


def test_sim_bad_scenario(tmp_path, capsys):
    path = tmp_path / "bad.scn"
    path.write_text("load sample protected\nwibble\n")
    assert main(["sim", str(path)]) == EXIT_USAGE
    assert _json(capsys.readouterr().err)['message'].startswith("line 2:")


@pytest.mark.parametrize("argv", [
    [],
    ["explode"],
    ["inspect"],
    ["gate", "--mode", "sideways"],
])
def test_usage_errors(argv, capsys):
    assert main(argv) == EXIT_USAGE


def test_io_errors(tmp_path, capsys):
    assert main(["scan", str(tmp_path / "missing.elf")]) == EXIT_USAGE
    bogus = tmp_path / "bogus.elf"
    bogus.write_bytes(b"not an elf at all, just text" * 4)
    assert main(["inspect", str(bogus)]) == EXIT_USAGE
    assert _json(capsys.readouterr().err)['error_code'] == "BAD_IMAGE"


def test_version(capsys):
    assert main(["--version"]) == EXIT_OK
    assert "erim-forge" in capsys.readouterr().out
