"""Types for the x86-64 subset: registers, operands, decoded instructions
and the architectural state the interpreter steps."""
from dataclasses import dataclass, field, replace
from enum import Enum, IntEnum

MASK32 = 0xFFFF_FFFF
MASK64 = 0xFFFF_FFFF_FFFF_FFFF


class Reg(IntEnum):
    RAX = 0
    RCX = 1
    RDX = 2
    RBX = 3
    RSP = 4
    RBP = 5
    RSI = 6
    RDI = 7
    R8 = 8
    R9 = 9
    R10 = 10
    R11 = 11
    R12 = 12
    R13 = 13
    R14 = 14
    R15 = 15


REG_NAMES_64 = ["rax", "rcx", "rdx", "rbx", "rsp", "rbp", "rsi", "rdi",
                "r8", "r9", "r10", "r11", "r12", "r13", "r14", "r15"]
REG_NAMES_32 = ["eax", "ecx", "edx", "ebx", "esp", "ebp", "esi", "edi",
                "r8d", "r9d", "r10d", "r11d", "r12d", "r13d", "r14d", "r15d"]
REG_NAMES_8 = ["al", "cl", "dl", "bl", "spl", "bpl", "sil", "dil",
               "r8b", "r9b", "r10b", "r11b", "r12b", "r13b", "r14b", "r15b"]
HIGH8_NAMES = ["ah", "ch", "dh", "bh"]


class Mnemonic(str, Enum):
    MOV = "mov"
    ADD = "add"
    OR = "or"
    SUB = "sub"
    XOR = "xor"
    CMP = "cmp"
    BT = "bt"
    PUSH = "push"
    POP = "pop"
    PUSHFQ = "pushfq"
    POPFQ = "popfq"
    JMP = "jmp"
    JE = "je"
    JNE = "jne"
    JNC = "jnc"
    CALL = "call"
    RET = "ret"
    NOP = "nop"
    INT3 = "int3"
    SYSCALL = "syscall"
    WRPKRU = "wrpkru"
    XRSTOR = "xrstor"


ALU_OPS = (Mnemonic.ADD, Mnemonic.OR, Mnemonic.SUB, Mnemonic.XOR, Mnemonic.CMP)
BRANCHES = (Mnemonic.JMP, Mnemonic.JE, Mnemonic.JNE, Mnemonic.JNC, Mnemonic.CALL)
CONDITIONAL = (Mnemonic.JE, Mnemonic.JNE, Mnemonic.JNC)


class Field(str, Enum):
    OPCODE = "opcode"
    MODRM = "modrm"
    SIB = "sib"
    DISPLACEMENT = "displacement"
    IMMEDIATE = "immediate"


@dataclass(frozen=True)
class RegOp:
    reg: int
    width: int = 32
    high8: bool = False

    def __str__(self):
        if self.high8:
            return HIGH8_NAMES[self.reg]
        names = {8: REG_NAMES_8, 32: REG_NAMES_32, 64: REG_NAMES_64}[self.width]
        return names[self.reg]


@dataclass(frozen=True)
class ImmOp:
    """Immediate as encoded: `value` is the unsigned field content."""

    value: int
    size: int = 4

    def signed(self):
        bits = self.size * 8
        v = self.value & ((1 << bits) - 1)
        return v - (1 << bits) if v >> (bits - 1) else v

    def __str__(self):
        return f"0x{self.value:x}"


@dataclass(frozen=True)
class MemOp:
    base: int | None = None
    index: int | None = None
    scale: int = 1
    disp: int = 0
    disp_size: int = 0
    rip: bool = False
    force_sib: bool = False
    width: int = 32

    def registers(self):
        return tuple(r for r in (self.base, self.index) if r is not None)

    def __str__(self):
        if self.rip:
            return f"[rip{self.disp:+#x}]"
        parts = []
        if self.base is not None:
            parts.append(REG_NAMES_64[self.base])
        if self.index is not None:
            parts.append(f"{REG_NAMES_64[self.index]}*{self.scale}")
        inner = "+".join(parts)
        if self.disp or not parts:
            inner += f"{self.disp:+#x}" if parts else f"{self.disp:#x}"
        return f"[{inner}]"


@dataclass(frozen=True)
class RelOp:
    disp: int
    size: int = 4

    def __str__(self):
        return f"{self.disp:+#x}"


Operand = RegOp | ImmOp | MemOp | RelOp


@dataclass(frozen=True)
class DecodedInstr:
    """One instruction of the subset.

    `opcode` holds the opcode bytes with any embedded register bits cleared
    (so `B8+r` forms keep `b"\\xb8"`); `rex` is the exact REX byte or None.
    `field_extents` maps each present field to its [start, end) byte range
    and is filled by the codec.
    """

    mnemonic: Mnemonic
    operands: tuple = ()
    width: int = 32
    opcode: bytes = b""
    rex: int | None = None
    field_extents: tuple = ()
    total_length: int = 0

    def extent(self, which):
        for f, start, end in self.field_extents:
            if f == which:
                return start, end
        return None

    def memory_operand(self):
        for op in self.operands:
            if isinstance(op, MemOp):
                return op
        return None

    def relative_operand(self):
        for op in self.operands:
            if isinstance(op, RelOp):
                return op
        return None

    def immediate_operand(self):
        for op in self.operands:
            if isinstance(op, ImmOp):
                return op
        return None

    def is_pc_relative(self):
        mem = self.memory_operand()
        return self.relative_operand() is not None or (mem is not None and mem.rip)

    def with_operands(self, *operands):
        return replace(self, operands=tuple(operands), field_extents=(), total_length=0)

    def __str__(self):
        if not self.operands:
            return self.mnemonic.value
        return f"{self.mnemonic.value} " + ", ".join(str(op) for op in self.operands)


@dataclass
class Flags:
    cf: bool = False
    zf: bool = False
    sf: bool = False
    of: bool = False

    def as_tuple(self):
        return (self.cf, self.zf, self.sf, self.of)


@dataclass
class MachineState:
    """Architectural state of one simulated logical core."""

    regs: list = field(default_factory=lambda: [0] * 16)
    rip: int = 0
    pkru: int = 0
    flags: Flags = field(default_factory=Flags)

    def get(self, reg):
        return self.regs[reg]

    def set(self, reg, value):
        self.regs[reg] = value & MASK64

    def set_pkru(self, value):
        self.pkru = value & MASK32

    def copy(self):
        return MachineState(regs=list(self.regs), rip=self.rip, pkru=self.pkru,
                            flags=replace(self.flags))

    def snapshot(self):
        return {
            'regs': {REG_NAMES_64[i]: f"0x{v:x}" for i, v in enumerate(self.regs)},
            'rip': f"0x{self.rip:x}",
            'pkru': f"0x{self.pkru:x}",
            'flags': dict(zip(("cf", "zf", "sf", "of"), self.flags.as_tuple())),
        }
