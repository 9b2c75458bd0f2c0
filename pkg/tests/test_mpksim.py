import pytest

from app.models.errors import ConfigError, PoolExhausted, StartupError
from app.models.image import LoadedImage, Segment
from app.models.inspection import PAGE_SIZE
from app.models.sim import (
    MT, MU, PERM_R, PERM_W, PERM_X, Access, DomainConfig, IsolationMode, PageState,
)
from app.models.x86 import Reg, RegOp
from app.services.mpksim import (
    EACCES, EPERM, MMAP_BASE, Machine, hardware_pkru, pkru_allows, pkru_for,
)
from app.services.gates import safe_b_guard
from app.services.samples import (
    CODE_BASE, JIT_EXIT_CODE, MT_POOL, jit_sample, protected_sample, sample, unsafe_sample,
)
from app.services.x86_codec import Asm
from tests.conftest import campaign_size


def _machine(**kwargs):
    kwargs.setdefault("seed", 0)
    kwargs.setdefault("inspection", "eager")
    kwargs.setdefault("interception", "lsm")
    return Machine(**kwargs)


def _boot(machine, s, **kwargs):
    return machine.init_lifecycle(s.image, s.entries, s.trusted, **kwargs)


def _image(instrs):
    code = Asm.assemble(instrs)
    return LoadedImage([Segment(CODE_BASE, code)], [], CODE_BASE)


def _exit_with_rax():
    return [Asm.mov(RegOp(Reg.RDI, 64), RegOp(Reg.RAX, 64), 64), Asm.mov_imm32(Reg.RAX, 60),
            Asm.syscall()]


def _events(machine, name):
    return [e for e in machine.trace if e.event == name]


@pytest.mark.parametrize("pkru,domain,access,expected", [
    (0xF, MT, Access.READ, True),
    (0xF, MT, Access.WRITE, True),
    (0x3, MT, Access.READ, False),
    (0x3, MU, Access.WRITE, True),
    (0x7, MT, Access.READ, True),
    (0x7, MT, Access.WRITE, False),
    (0x0, MU, Access.READ, False),
    (0x3 << 30, 15, "write", True),
])
def test_pkru_allows(pkru, domain, access, expected):
    assert pkru_allows(pkru, domain, access) is expected


def test_pkru_helpers():
    assert pkru_for({MU}) == 0x3
    assert pkru_for({MU}, readable=[MT]) == 0x7
    assert pkru_for({MU, MT}) == 0xF
    assert hardware_pkru(0x3) == 0xFFFF_FFFC
    with pytest.raises(ConfigError):
        pkru_allows(0x3, 16, Access.READ)


def test_domain_config_validation():
    with pytest.raises(ConfigError):
        DomainConfig(components=1).validate()
    with pytest.raises(ConfigError):
        DomainConfig(components=3, trust=frozenset({(2, 1), (1, 0)})).validate()
    DomainConfig(components=3, trust=frozenset({(2, 1), (1, 0), (2, 0)})).validate()
    with pytest.raises(ConfigError):
        _machine(interception="ptrace-everything")


def test_protected_sample_runs_clean(protected):
    machine = _boot(_machine(), protected)
    summary = machine.run(10_000)
    assert summary['status'] == "exited"
    assert summary['exit_code'] == 0
    assert summary['output'] == "ok\n"
    assert summary['violations'] == []
    assert machine.peek(MT_POOL, 8) == (0x2A).to_bytes(4, "little") * 2
    assert machine.threads[0].state.pkru == machine.disallow
    assert not _events(machine, "grant-outside-entry")


def test_integrity_only_lets_untrusted_code_read():
    machine = _machine(config=DomainConfig(mode=IsolationMode.INTEGRITY_ONLY))
    assert machine.disallow == 0x7
    summary = _boot(machine, sample("protected", machine.disallow)).run(10_000)
    assert summary['exit_code'] == 0
    assert summary['violations'] == []


def test_unsafe_image_is_refused_at_startup():
    with pytest.raises(StartupError):
        _boot(_machine(), unsafe_sample())


def test_uninspected_unsafe_image_violates_isolation():
    machine = _boot(_machine(), unsafe_sample(), skip_inspection=True)
    summary = machine.run(1000)
    assert summary['exit_code'] == 0
    assert [v['invariant'] for v in summary['violations']] == [
        "grant-outside-entry", "mt-access-outside-trusted"]
    grant = machine.violations[0]
    assert grant.pc == unsafe_sample().image.symbol("start") + 9


def test_jump_to_exit_gate_grant_is_stopped_by_its_check(protected):
    gate = protected.image.symbol("untrusted_continue") - len(safe_b_guard()) - 3
    machine = _boot(_machine(), protected, main=gate)
    machine.threads[0].state.set(Reg.RAX, 0xF)
    summary = machine.run(100)
    assert summary['status'] == "exited"
    assert summary['violations'] == []
    (event,) = _events(machine, "grant-outside-entry")
    assert event.detail['guarded'] is True
    assert machine.peek(MT_POOL, 4) == bytes(4)


def test_on_demand_startup_leaves_unsafe_pages_pending():
    machine = _boot(_machine(inspection="on-demand"), unsafe_sample())
    page = machine.pages[CODE_BASE // PAGE_SIZE]
    assert page.state is PageState.PENDING
    assert not page.executable
    summary = machine.run(100)
    assert summary['status'] == "faulted"
    assert summary['fault']['fault'] == "exec"


def test_jit_code_is_inspected_before_it_runs():
    summary = _boot(_machine(), jit_sample()).run(10_000)
    assert summary['exit_code'] == JIT_EXIT_CODE
    assert summary['violations'] == []


def test_unsafe_jit_code_never_becomes_executable():
    machine = _boot(_machine(), jit_sample(unsafe=True))
    summary = machine.run(10_000)
    assert summary['status'] == "faulted"
    assert summary['fault']['fault'] == "exec"
    assert any(not e.detail['passed'] for e in _events(machine, "inspect"))


def test_unsafe_jit_code_is_rewritten_on_fault():
    machine = _boot(_machine(inspection="on-demand", rewrite_on_fault=True),
                    jit_sample(unsafe=True))
    summary = machine.run(10_000)
    assert summary['exit_code'] == JIT_EXIT_CODE
    assert summary['violations'] == []
    assert _events(machine, "trap-fill")
    (rewrite,) = _events(machine, "runtime-rewrite")
    assert rewrite.detail['plans'] == ["rule-1"]


def _mmap(prot):
    return [Asm.mov_imm32(Reg.RAX, 9), Asm.xor(RegOp(Reg.RDI), RegOp(Reg.RDI)),
            Asm.mov_imm32(Reg.RSI, PAGE_SIZE), Asm.mov_imm32(Reg.RDX, prot), Asm.syscall()]


@pytest.mark.parametrize("interception,prot,expected", [
    ("lsm", 5, -EPERM & 0xFF),
    ("seccomp-bpf", 5, -EPERM & 0xFF),
    ("none", 5, MMAP_BASE & 0xFF),
    ("none", 7, -EACCES & 0xFF),
    ("lsm", 3, MMAP_BASE & 0xFF),
])
def test_untrusted_executable_mappings(interception, prot, expected):
    machine = _machine(interception=interception)
    machine.init_lifecycle(_image(_mmap(prot) + _exit_with_rax()))
    assert machine.run(100)['exit_code'] == expected


def test_denied_syscalls_only_bind_untrusted_callers():
    write = [Asm.mov_imm32(Reg.RAX, 1), Asm.mov_imm32(Reg.RDI, 1),
             Asm.mov_imm32(Reg.RSI, CODE_BASE), Asm.mov_imm32(Reg.RDX, 1), Asm.syscall()]
    image = _image(write + _exit_with_rax())
    machine = _machine()
    machine.denied_syscalls = {1}
    machine.init_lifecycle(image)
    assert machine.run(100)['exit_code'] == -EPERM & 0xFF
    assert _events(machine, "denied")

    machine = _machine()
    machine.denied_syscalls = {1}
    machine.init_lifecycle(image, main_trusted=True)
    assert machine.run(100)['exit_code'] == 1


def test_signal_handler_runs_with_mt_locked():
    loop = Asm.assemble([Asm.jmp(-2, size=1)])
    handler = Asm.assemble([Asm.mov_imm32(Reg.RDI, 9), Asm.mov_imm32(Reg.RAX, 60),
                            Asm.syscall()])
    image = LoadedImage([Segment(CODE_BASE, loop + handler)], [], CODE_BASE)
    machine = _machine()
    machine.handlers[10] = CODE_BASE + len(loop)
    machine.init_lifecycle(image, main_trusted=True)
    machine.signal(0, 10)
    summary = machine.run(100)
    assert summary['exit_code'] == 9
    assert summary['violations'] == []
    (event,) = _events(machine, "signal")
    assert event.pkru == 0x3


def test_sigreturn_restores_the_interrupted_state():
    main = Asm.assemble([Asm.mov_imm32(Reg.RDI, 3), Asm.mov_imm32(Reg.RAX, 60), Asm.syscall()])
    handler = Asm.assemble([Asm.mov_imm32(Reg.RAX, 15), Asm.syscall()])
    image = LoadedImage([Segment(CODE_BASE, main + handler)], [], CODE_BASE)
    machine = _machine()
    machine.handlers[2] = CODE_BASE + len(main)
    machine.init_lifecycle(image, main_trusted=True)
    machine.signal(0, 2)
    assert machine.run(100)['exit_code'] == 3
    assert machine.threads[0].state.pkru == machine.trusted_pkru


def test_unhandled_signal_terminates():
    image = _image([Asm.jmp(-2, size=1)])
    machine = _machine()
    machine.init_lifecycle(image)
    machine.signal(0, 15)
    assert machine.run(100)['exit_code'] == 128 + 15


def test_untrusted_code_cannot_install_handlers():
    image = _image([Asm.mov_imm32(Reg.RAX, 13), Asm.mov_imm32(Reg.RDI, 10),
                    Asm.mov_imm32(Reg.RSI, CODE_BASE), Asm.syscall()] + _exit_with_rax())
    machine = _machine()
    machine.init_lifecycle(image)
    assert machine.run(100)['exit_code'] == -EPERM & 0xFF
    assert 10 not in machine.handlers


def test_pools_follow_the_caller_pkru(protected):
    machine = _boot(_machine(), protected)
    thread = machine.threads[0]
    mu = machine.domain_alloc(thread, 10)
    assert mu == machine.pools[MU].start
    assert machine.domain_alloc(thread, 1) == mu + 16
    thread.state.set_pkru(machine.trusted_pkru)
    assert machine.domain_alloc(thread, 8) == machine.pools[MT].start
    with pytest.raises(PoolExhausted):
        machine.domain_alloc(thread, machine.config.pool_size)


def test_writable_executable_pages_are_reported(protected):
    machine = _boot(_machine(), protected)
    machine.map_pages(0x900000, PAGE_SIZE, PERM_R | PERM_W | PERM_X)
    machine.vetted.add(0x900000 // PAGE_SIZE)
    found = machine.check_invariants(machine.threads[0])
    assert [name for name, _ in found] == ["dep"]


def test_private_stacks_switch_on_entry(protected):
    machine = _boot(_machine(private_stacks=True), protected)
    summary = machine.run(10_000)
    assert summary['violations'] == []
    assert [e.detail['to'] for e in _events(machine, "stack-switch")] == ["trusted", "untrusted"]


def test_threads_keep_their_own_pkru(protected):
    machine = _boot(_machine(), protected)
    other = machine.spawn_thread(protected.image.entry)
    summary = machine.run(10_000)
    assert summary['exit_code'] == 0
    assert summary['violations'] == []
    assert other.state.pkru in (machine.untrusted_pkru, machine.trusted_pkru)
    assert {e.thread for e in _events(machine, "step")} == {0, 1}


def test_fork_copies_memory_on_write(protected):
    machine = _boot(_machine(), protected)
    twin = machine.fork()
    twin.load_bytes(MT_POOL, b"\x01\x02")
    assert machine.peek(MT_POOL, 2) == b"\0\0"
    assert twin.peek(MT_POOL, 2) == b"\x01\x02"
    twin.run(10_000)
    assert machine.status == "running"
    assert machine.peek(MT_POOL, 4) == b"\0\0\0\0"


def test_sweep_finds_the_unsafe_sample():
    s = unsafe_sample()
    machine = _boot(_machine(), s, skip_inspection=True)
    start = s.image.symbol("start")
    report = machine.attack_sweep(region=[(start, start + 4)], presets=2, budget=200)
    assert report.starts == 4 and report.runs == 8
    assert not report.clean
    assert {f.invariant for f in report.findings} == {"grant-outside-entry",
                                                      "mt-access-outside-trusted"}


@pytest.mark.slow
def test_sweep_over_protected_code_is_clean(protected):
    machine = _boot(_machine(), protected)
    lo, hi = protected.image.symbol("start"), protected.image.symbol("code_end")
    report = machine.attack_sweep(region=[(lo, hi)], presets=campaign_size(8, 2),
                                  budget=campaign_size(100_000, 2000))
    assert report.clean, report.to_dict()['findings'][:3]
    assert report.exit_gate_escapes == 0
