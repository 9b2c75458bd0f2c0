import pytest

from app.models.errors import NoApplicableRule, NotInSubset, RewriteError
from app.models.inspection import EntryPointSet
from app.models.rewrite import LayoutMode, OverlapClass, RewritePolicy
from app.models.x86 import Flags, MachineState, Mnemonic, Reg, RegOp
from app.services.bytescan import ByteScanService
from app.services.inspector import InspectorService
from app.services.rewriter import RewriterService
from app.services.x86_codec import Asm, X86Codec
from app.services.x86_interp import OutcomeKind

BASE = 0x400000
TRAMPOLINES = 0x401000
PATTERN = 0x00EF010F
M = Mnemonic


def _state(**regs):
    state = MachineState(flags=Flags(cf=True, zf=False, sf=True, of=False))
    for name, value in regs.items():
        state.set(Reg[name.upper()], value)
    return state


def _check_equivalent(run_code, code, result, state, extra=(), free=(), flags=True):
    before, s1, e1 = run_code(code, BASE, state.copy(), extra=extra)
    after, s2, e2 = run_code(result.combined(), BASE, state.copy(), extra=extra)
    assert (before.kind, before.fault) == (after.kind, after.fault)
    for reg in Reg:
        if reg not in free:
            assert s1.get(reg) == s2.get(reg), reg.name
    assert s1.pkru == s2.pkru
    if flags:
        assert s1.flags == s2.flags
    return e1, e2


def _rewrite(code, policy=None, entries=None, trampoline_base=None):
    result = RewriterService(policy).rewrite_all(code, entries or EntryPointSet(), BASE,
                                                 trampoline_base)
    assert result.report.passed
    assert InspectorService().inspect_code(result.code, result.entries, BASE).passed
    return result


def test_bare_wrpkru_gets_the_exit_check(run_code):
    code = Asm.assemble([Asm.wrpkru(), Asm.int3()])
    result = _rewrite(code)
    assert result.rule_histogram() == {"rule-1": 1}
    assert result.code.startswith(code[:3] + bytes.fromhex("3d03000000"))
    _check_equivalent(run_code, code, result, _state(rax=3), flags=False)

    outcome, _, env = run_code(result.code, BASE, _state(rax=0xF))
    assert outcome.kind is OutcomeKind.EXIT
    assert env.syscalls[-1][0] == 60


def test_bare_xrstor_gets_the_bit_nine_guard(run_code):
    code = Asm.assemble([Asm.xrstor(Asm.mem(Reg.RDI)), Asm.int3()])
    result = _rewrite(code)
    assert result.rule_histogram() == {"rule-1": 1}
    _check_equivalent(run_code, code, result, _state(rdi=0x600000), flags=False)


def test_exit_check_uses_policy_disallow():
    code = Asm.assemble([Asm.wrpkru(), Asm.int3()])
    result = _rewrite(code, RewritePolicy(disallow=0x7))
    assert result.code[3:8] == bytes.fromhex("3d07000000")


def test_modrm_overlap_spills_a_scratch_register(run_code):
    instr = Asm.alu_imm32(M.OR, Asm.mem(Reg.RDI), 0xEF01)
    code = Asm.assemble([instr, Asm.int3()])
    service = RewriterService()
    occ = ByteScanService.scan(code, BASE)[0]
    overlap = service.locate_overlap(code, occ, BASE)
    assert overlap.overlap is OverlapClass.MODRM

    result = _rewrite(code)
    (plan,) = result.plans
    assert plan.rule in (3, 6)
    assert plan.spill == "push/pop"
    e1, e2 = _check_equivalent(run_code, code, result, _state(rdi=0x600000), flags=False)
    assert e1.memory.read(0x600000, 4) == e2.memory.read(0x600000, 4) == (0xEF01).to_bytes(4, "little")


def test_declared_free_register_is_used_without_spill(run_code):
    code = Asm.assemble([Asm.alu_imm32(M.OR, Asm.mem(Reg.RDI), 0xEF01), Asm.int3()])
    policy = RewritePolicy(free_registers=(Reg.R8,))
    result = _rewrite(code, policy)
    (plan,) = result.plans
    assert plan.scratch == Reg.R8
    assert plan.spill == "free"
    _check_equivalent(run_code, code, result, _state(rdi=0x600000), free=(Reg.R8,), flags=False)


def test_displacement_is_split_across_an_index_register(run_code):
    instr = Asm.mov(Reg.RAX, Asm.mem(Reg.RBX, PATTERN))
    code = Asm.assemble([instr, Asm.int3()])
    occ = ByteScanService.scan(code, BASE)[0]
    assert RewriterService().locate_overlap(code, occ, BASE).overlap is OverlapClass.DISPLACEMENT

    result = _rewrite(code)
    assert set(result.rule_histogram()) <= {"rule-3", "rule-4"}
    extra = [(0x10000 + PATTERN, (0x1234).to_bytes(4, "little"))]
    _check_equivalent(run_code, code, result, _state(rbx=0x10000), extra=extra)


def test_rip_relative_displacement_moves_the_instruction(run_code):
    instr = Asm.mov(Reg.RAX, Asm.mem(disp=PATTERN, rip=True))
    code = Asm.assemble([instr, Asm.int3()])
    result = _rewrite(code)
    assert result.rule_histogram() == {"rule-5": 1}
    target = BASE + instr.total_length + PATTERN
    extra = [(target, (0xBEEF).to_bytes(4, "little"))]
    _check_equivalent(run_code, code, result, _state(), extra=extra)


def test_mov_immediate_is_rebuilt_in_place(run_code):
    code = Asm.assemble([Asm.mov_imm32(Reg.RCX, PATTERN), Asm.int3()])
    result = _rewrite(code)
    (plan,) = result.plans
    assert plan.rule == 6 and plan.scratch is None
    _check_equivalent(run_code, code, result, _state())


def test_alu_immediate_through_a_scratch_register(run_code):
    code = Asm.assemble([Asm.alu_imm32(M.ADD, Reg.RCX, PATTERN), Asm.int3()])
    result = _rewrite(code)
    assert result.rule_histogram() == {"rule-6": 1}
    assert not result.plans[0].flags_clobbered
    _check_equivalent(run_code, code, result, _state(rcx=0x1000))


def test_flag_clobber_policy_still_prefers_flag_preserving_rules(run_code):
    code = Asm.assemble([Asm.alu_imm32(M.ADD, Reg.RCX, PATTERN), Asm.int3()])
    result = _rewrite(code, RewritePolicy(allow_flag_clobber=True))
    assert result.rule_histogram() == {"rule-6": 1}
    assert not result.plans[0].flags_clobbered
    _check_equivalent(run_code, code, result, _state(rcx=0xFFFF_FFF0))


def _without_rule6(monkeypatch):
    def unavailable(self, site, scratch, spilled):
        raise NoApplicableRule("no register form", offset=site.address)

    monkeypatch.setattr(RewriterService, "_rule6", unavailable)


def test_associative_split_is_the_last_resort(run_code, monkeypatch):
    _without_rule6(monkeypatch)
    code = Asm.assemble([Asm.alu_imm32(M.ADD, Reg.RCX, PATTERN), Asm.int3()])
    with pytest.raises(NoApplicableRule):
        RewriterService().rewrite_all(code, EntryPointSet(), BASE)

    result = _rewrite(code, RewritePolicy(allow_flag_clobber=True))
    assert result.rule_histogram() == {"rule-7": 1}
    assert result.plans[0].flags_clobbered
    _check_equivalent(run_code, code, result, _state(rcx=0xFFFF_FFF0), flags=False)


RIP_STORES = [
    pytest.param(Asm.mov(Asm.mem(disp=0x100, rip=True), PATTERN), 0x00EF010F, id="mov"),
    pytest.param(Asm.alu_imm32(M.ADD, Asm.mem(disp=0x100, rip=True), PATTERN),
                 (0x1000 + PATTERN) & 0xFFFF_FFFF, id="add"),
]


def _stored(run_code, code, result, instr, expected, flags=True):
    target = BASE + instr.total_length + 0x100
    extra = [(target, (0x1000).to_bytes(4, "little"))]
    e1, e2 = _check_equivalent(run_code, code, result, _state(), extra=extra, flags=flags)
    assert e1.memory.read(target, 4) == e2.memory.read(target, 4) == expected.to_bytes(4, "little")


@pytest.mark.parametrize("allow_flag_clobber", [False, True])
@pytest.mark.parametrize("instr,expected", RIP_STORES)
def test_rip_relative_store_keeps_its_target(run_code, instr, expected, allow_flag_clobber):
    code = Asm.assemble([instr, Asm.int3()])
    result = _rewrite(code, RewritePolicy(allow_flag_clobber=allow_flag_clobber))
    assert result.rule_histogram() == {"rule-6": 1}
    _stored(run_code, code, result, instr, expected)


@pytest.mark.parametrize("instr,expected", RIP_STORES)
def test_rip_relative_store_in_a_trampoline_keeps_its_target(run_code, instr, expected):
    code = Asm.assemble([instr, Asm.int3()])
    policy = RewritePolicy(mode=LayoutMode.FIXED)
    result = _rewrite(code, policy, trampoline_base=TRAMPOLINES)
    assert len(result.trampolines) == 1
    _stored(run_code, code, result, instr, expected)


def test_associative_split_of_a_rip_relative_store(run_code, monkeypatch):
    _without_rule6(monkeypatch)
    instr, expected = RIP_STORES[1].values
    code = Asm.assemble([instr, Asm.int3()])
    result = _rewrite(code, RewritePolicy(allow_flag_clobber=True))
    assert result.rule_histogram() == {"rule-7": 1}
    _stored(run_code, code, result, instr, expected, flags=False)


def test_forward_rip_target_accounts_for_the_padding():
    instr = Asm.mov(Reg.RAX, Asm.mem(disp=PATTERN, rip=True))
    target = BASE + instr.total_length + PATTERN
    code = bytes(0x0100_0000)
    assert BASE <= target < BASE + len(code)
    occ = ByteScanService.scan(X86Codec.encode(instr), BASE)[0]
    plan = RewriterService().plan_rewrite(code, occ, BASE, listing=[(BASE, instr)])
    assert plan.rule == 5
    moved = X86Codec.decode(plan.replacement)
    pad = len(plan.replacement) - moved.total_length
    assert pad >= 1 and plan.replacement[moved.total_length:] == b"\x90" * pad
    assert moved.memory_operand().disp == PATTERN + pad
    assert ByteScanService.scan(plan.replacement) == []


def test_unsafe_trampoline_output_is_rejected(monkeypatch):
    service = RewriterService(RewritePolicy(mode=LayoutMode.FIXED))
    apply = service.layout.apply

    def leaky(*args, **kwargs):
        step = apply(*args, **kwargs)
        step.trampoline += Asm.assemble([Asm.wrpkru()])
        return step

    monkeypatch.setattr(service.layout, "apply", leaky)
    code = Asm.assemble([Asm.mov(Reg.RAX, Asm.mem(Reg.RBX, PATTERN)), Asm.int3()])
    with pytest.raises(RewriteError, match="still holds 1 unsafe"):
        service.rewrite_all(code, EntryPointSet(), BASE, TRAMPOLINES)


def test_cross_instruction_gets_a_nop(run_code):
    code = Asm.assemble([Asm.add(Asm.mem(Reg.RDI), RegOp(Reg.RCX)),
                         Asm.add(RegOp(Reg.RDI), RegOp(Reg.RBP)), Asm.int3()])
    assert code[:4] == bytes.fromhex("010f01ef")
    result = _rewrite(code)
    assert result.rule_histogram() == {"nop-insertion": 1}
    assert result.code == code[:2] + b"\x90" + code[2:]
    assert result.map_address(BASE + 4) == BASE + 5
    _check_equivalent(run_code, code, result, _state(rdi=0x600000, rcx=5, rbp=8))


def test_short_branch_is_widened(run_code):
    gap = [Asm.wrpkru()] + [Asm.nop()] * 120
    gap_len = sum(i.total_length for i in gap)
    code = Asm.assemble([Asm.jmp(gap_len, size=1)] + gap + [Asm.int3()])
    result = _rewrite(code)
    first = X86Codec.decode(result.code)
    assert first.mnemonic is M.JMP and first.total_length == 5
    assert result.relocations
    outcome, state, _ = run_code(result.code, BASE, _state())
    assert state.rip == result.map_address(BASE + len(code) - 1)


def test_entry_points_follow_the_code():
    code = Asm.assemble([Asm.wrpkru(), Asm.nop(), Asm.int3()])
    entries = EntryPointSet.of(BASE + 4)
    result = _rewrite(code, entries=entries)
    assert BASE + 4 + 14 in result.entries


def test_fixed_layout_uses_trampolines(run_code):
    instr = Asm.mov(Reg.RAX, Asm.mem(Reg.RBX, PATTERN))
    code = Asm.assemble([instr, Asm.int3()])
    policy = RewritePolicy(mode=LayoutMode.FIXED)
    result = _rewrite(code, policy, trampoline_base=TRAMPOLINES)
    assert len(result.code) == len(code)
    assert len(result.trampolines) == 1
    record = result.trampolines[0]
    assert record.site == BASE and record.address >= TRAMPOLINES
    extra = [(0x10000 + PATTERN, (0x77).to_bytes(4, "little")),
             (TRAMPOLINES, result.trampoline)]
    before, s1, _ = run_code(code, BASE, _state(rbx=0x10000), extra=extra)
    after, s2, _ = run_code(result.code, BASE, _state(rbx=0x10000), extra=extra)
    assert s1.get(Reg.RAX) == s2.get(Reg.RAX) == 0x77
    assert s1.rip == s2.rip


def test_clean_code_is_left_alone():
    code = Asm.assemble([Asm.mov_imm32(Reg.RAX, 1), Asm.int3()])
    result = _rewrite(code)
    assert result.code == code
    assert result.plans == []


def test_rewriting_is_idempotent():
    code = Asm.assemble([Asm.wrpkru(), Asm.mov_imm32(Reg.RCX, PATTERN), Asm.int3()])
    once = _rewrite(code)
    twice = _rewrite(once.code)
    assert twice.code == once.code


def test_undecodable_code_is_a_limitation():
    with pytest.raises(NotInSubset):
        RewriterService().rewrite_all(b"\x62" + Asm.assemble([Asm.wrpkru()]), EntryPointSet(),
                                      BASE)
