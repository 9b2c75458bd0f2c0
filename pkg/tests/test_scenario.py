from pathlib import Path

import pytest

from app.models.errors import ScenarioError
from app.models.x86 import Reg, RegOp
from app.services.scenario import ScenarioRunner, run_scenario
from app.services.x86_codec import Asm

FIXTURES = Path(__file__).resolve().parent.parent / "fixtures"

PASSING = ["protected", "integrity-only", "jit", "jit-unsafe-eager", "jit-unsafe-rewrite",
           "unsafe-startup"]


@pytest.mark.parametrize("name", PASSING)
def test_fixture_scenarios_pass(name):
    result = run_scenario(FIXTURES / f"{name}.scn", seed=0)
    assert result.passed, result.failures
    assert result.to_dict()['scenario'].endswith(f"{name}.scn")


def test_unchecked_unsafe_scenario_reports_the_violation():
    result = run_scenario(FIXTURES / "unsafe-unchecked.scn", seed=0)
    assert not result.failures
    assert not result.passed
    body = result.to_dict()
    assert body['first_violation']['invariant'] == "grant-outside-entry"
    assert [v['invariant'] for v in body['summary']['violations']] == [
        "grant-outside-entry", "mt-access-outside-trusted"]
    assert body['summary']['status'] == "exited"


def test_startup_failure_is_recorded():
    result = run_scenario(FIXTURES / "unsafe-startup.scn", seed=0)
    assert result.startup_error
    assert result.machine.steps == 0


@pytest.mark.slow
def test_protected_sweep_fixture():
    result = run_scenario(FIXTURES / "protected-sweep.scn", seed=0)
    assert result.passed, result.failures
    assert result.sweep.clean


def test_parse_skips_comments_and_keeps_line_numbers():
    text = "# header\n\nload sample protected   # trailing\nexpect output \"ok\\n\"\n"
    directives = ScenarioRunner.parse(text)
    assert [(d.line, d.name, d.args) for d in directives] == [
        (3, "load", ["sample", "protected"]),
        (4, "expect", ["output", "ok\\n"]),
    ]


def test_parse_error_carries_line():
    with pytest.raises(ScenarioError) as info:
        ScenarioRunner.parse("run\nexpect output \"unterminated\n")
    assert info.value.line == 2


@pytest.mark.parametrize("text,line", [
    ("load sample protected\nfrobnicate\n", 2),
    ("load sample protected\ninspection eager\n", 2),
    ("inspection lazy\n", 1),
    ("interception kprobes\n", 1),
    ("mode turbo\n", 1),
    ("load sample no-such-sample\n", 1),
    ("run\n", 1),
    ("load sample protected\nentry missing_symbol\n", 2),
    ("load sample protected\nload sample unsafe\n", 2),
    ("inspection eager\nload sample unsafe\nrun\nsweep\n", 4),
    ("load sample protected\nrun 10\nexpect sweep clean\n", 3),
    ("load sample protected\nexpect colour blue\n", 2),
])
def test_scenario_errors(text, line):
    with pytest.raises(ScenarioError) as info:
        ScenarioRunner(seed=0).run(text)
    assert info.value.line == line
    assert info.value.message.startswith(f"line {line}:")


def test_failed_expectations_name_their_line():
    result = ScenarioRunner(seed=0).run(
        "load sample protected\nrun 10000\nexpect exit-code 5\nexpect output \"ok\\n\"\n")
    assert result.failures == ["line 3: exit code 0, expected 5"]
    assert not result.passed


def _raw(tmp_path, name, instrs):
    path = tmp_path / name
    path.write_bytes(Asm.assemble(instrs))
    return path


def test_raw_image_with_signal_handler(tmp_path):
    _raw(tmp_path, "loop.bin", [Asm.jmp(-2, size=1), Asm.mov_imm32(Reg.RDI, 9),
                                Asm.mov_imm32(Reg.RAX, 60), Asm.syscall()])
    text = "\n".join([
        "load raw loop.bin 0x400000",
        "main 0x400000 trusted",
        "handler 10 0x400002",
        "signal 0 10",
        "run 100",
        "expect status exited",
        "expect exit-code 9",
        "expect event signal 1",
        "expect page 0x400000 r-x",
        "expect violations 0",
    ])
    result = ScenarioRunner(seed=0, base_dir=tmp_path).run(text)
    assert result.passed, result.failures


def test_denied_syscall(tmp_path):
    _raw(tmp_path, "write.bin", [
        Asm.mov_imm32(Reg.RAX, 1), Asm.mov_imm32(Reg.RDI, 1), Asm.mov_imm32(Reg.RSI, 0x400000),
        Asm.mov_imm32(Reg.RDX, 1), Asm.syscall(),
        Asm.mov(RegOp(Reg.RDI, 64), RegOp(Reg.RAX, 64), 64), Asm.mov_imm32(Reg.RAX, 60),
        Asm.syscall()])
    text = "load raw write.bin 0x400000\ndeny-syscall 1\nrun 100\nexpect denied 1\n" \
           "expect exit-code 255\nexpect output \"\"\n"
    result = ScenarioRunner(seed=0, base_dir=tmp_path).run(text)
    assert result.passed, result.failures


def test_symbols_and_extra_threads():
    text = "\n".join([
        "mode private-stacks",
        "load sample protected",
        "thread start pkru=0x3",
        "run 20000",
        "expect status exited",
        "expect event stack-switch",
        "expect page erim_entry_store+1 r-x",
        "expect page 0x600000 rw-",
        "expect violations 0",
    ])
    result = ScenarioRunner(seed=0).run(text)
    assert result.passed, result.failures
    assert len(result.machine.threads) == 2


def test_missing_scenario_file(tmp_path):
    with pytest.raises(ScenarioError):
        run_scenario(tmp_path / "nope.scn")
