"""Call gates and the guard templates the inspector accepts.

PKRU values follow the grant convention: bit 2i allows reads of domain i,
bit 2i+1 allows writes. MU is domain 0, MT is domain 1.
"""
from enum import Enum

from app.models.x86 import Mnemonic, Reg, RegOp
from app.services.x86_codec import Asm

PKRU_ALLOW_TRUSTED = 0x0000000F
PKRU_DISALLOW_TRUSTED = 0x00000003
PKRU_INTEGRITY_ONLY = 0x00000007

EXIT_STUB = Asm.assemble([Asm.mov_imm32(Reg.RAX, 60), Asm.syscall()])


class GateKind(str, Enum):
    ENTER = "enter"
    EXIT = "exit"
    XRSTOR_GUARD = "xrstor-guard"


def safe_b_guard(disallow=PKRU_DISALLOW_TRUSTED):
    """`cmp eax, disallow; je +7; <exit stub>`, the check after an exit WRPKRU."""
    return Asm.assemble([
        Asm.alu_acc(Mnemonic.CMP, disallow),
        Asm.jcc(Mnemonic.JE, len(EXIT_STUB), size=1),
    ]) + EXIT_STUB


XRSTOR_GUARD = Asm.assemble([
    Asm.bt(Reg.RAX, 9),
    Asm.jcc(Mnemonic.JNC, len(EXIT_STUB), size=1),
]) + EXIT_STUB


def _load_pkru_operands(value):
    ecx, edx = RegOp(Reg.RCX), RegOp(Reg.RDX)
    return [Asm.xor(ecx, ecx), Asm.xor(edx, edx), Asm.mov_imm32(Reg.RAX, value)]


def emit_call_gate(kind, allow=PKRU_ALLOW_TRUSTED, disallow=PKRU_DISALLOW_TRUSTED):
    kind = GateKind(kind)
    if kind is GateKind.XRSTOR_GUARD:
        return XRSTOR_GUARD
    if kind is GateKind.ENTER:
        return Asm.assemble(_load_pkru_operands(allow & 0xFFFF_FFFF) + [Asm.wrpkru()])
    return (Asm.assemble(_load_pkru_operands(disallow & 0xFFFF_FFFF) + [Asm.wrpkru()])
            + safe_b_guard(disallow))
