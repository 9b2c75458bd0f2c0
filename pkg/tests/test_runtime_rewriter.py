import pytest

from app.models.errors import NotInSubset, RewriteError
from app.models.inspection import PAGE_SIZE
from app.models.rewrite import TRAP_BYTE
from app.models.x86 import MachineState, Reg, RegOp
from app.services.runtime_rewriter import RuntimeRewriter
from app.services.x86_codec import Asm
from app.services.x86_interp import FlatMemory, OutcomeKind, SimpleEnv, X86Interpreter

BASE = 0x700000
UNTOUCHED = 0x800


def _page(code):
    content = bytearray(b"\x90") * PAGE_SIZE
    content[:len(code)] = code
    content[0x700] = 0x62
    return bytes(content)


def _bare_wrpkru():
    return Asm.assemble([
        Asm.mov_imm32(Reg.RAX, 3), Asm.xor(RegOp(Reg.RCX), RegOp(Reg.RCX)),
        Asm.xor(RegOp(Reg.RDX), RegOp(Reg.RDX)), Asm.wrpkru(),
        Asm.mov_imm32(Reg.RDI, 7), Asm.mov_imm32(Reg.RAX, 60), Asm.syscall(), Asm.int3(),
    ])


@pytest.fixture
def rewriter():
    return RuntimeRewriter()


def _run(state):
    memory = FlatMemory()
    memory.load(state.base, bytes(state.exec_page))
    if state.trampoline:
        memory.load(state.trampoline_base, bytes(state.trampoline))
    memory.map(0x7FFF_0000_0000 - PAGE_SIZE, PAGE_SIZE)
    machine = MachineState(rip=state.base)
    machine.set(Reg.RSP, 0x7FFF_0000_0000 - 16)
    outcome, _ = X86Interpreter.run(machine, SimpleEnv(memory), 1000)
    return outcome, machine


def test_page_starts_filled_with_traps():
    state = RuntimeRewriter.prepare(BASE, _page(_bare_wrpkru()))
    assert bytes(state.exec_page) == bytes([TRAP_BYTE]) * PAGE_SIZE


def test_partial_pages_are_rejected():
    with pytest.raises(RewriteError):
        RuntimeRewriter.prepare(BASE, b"\x90" * 100)


def test_first_trap_copies_and_rewrites(rewriter):
    code = _bare_wrpkru()
    state = RuntimeRewriter.prepare(BASE, _page(code))
    rewriter.runtime_rewrite(state, BASE)

    assert state.swaps == 1
    assert len(state.plans) == 1 and state.plans[0].rule == 1
    assert state.trampoline and state.trampoline_base >= BASE + PAGE_SIZE
    assert state.exec_page[UNTOUCHED] == TRAP_BYTE
    assert len(code) - 1 in state.copied and UNTOUCHED not in state.copied

    outcome, machine = _run(state)
    assert outcome.kind is OutcomeKind.EXIT and outcome.code == 7
    assert machine.pkru == 3


def test_later_entries_extend_the_copy(rewriter):
    state = RuntimeRewriter.prepare(BASE, _page(_bare_wrpkru()))
    rewriter.runtime_rewrite(state, BASE)
    rewriter.runtime_rewrite(state, BASE + UNTOUCHED)
    assert state.swaps == 2
    assert state.exec_page[UNTOUCHED] == 0x90
    assert state.exec_page[PAGE_SIZE - 1] == 0x90

    rewriter.runtime_rewrite(state, BASE + UNTOUCHED)
    assert state.swaps == 2


def test_page_without_occurrences_is_swapped_whole(rewriter):
    code = Asm.assemble([Asm.mov_imm32(Reg.RDI, 1), Asm.mov_imm32(Reg.RAX, 60), Asm.syscall()])
    state = RuntimeRewriter.prepare(BASE, _page(code))
    rewriter.runtime_rewrite(state, BASE)
    assert bytes(state.exec_page) == _page(code)
    assert not state.plans


def test_entry_errors(rewriter):
    state = RuntimeRewriter.prepare(BASE, _page(_bare_wrpkru()))
    with pytest.raises(RewriteError):
        rewriter.runtime_rewrite(state, BASE + PAGE_SIZE)
    with pytest.raises(NotInSubset):
        rewriter.runtime_rewrite(state, BASE + 0x700)
