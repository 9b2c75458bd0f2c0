from dataclasses import dataclass, field
from enum import Enum

from app.models.inspection import PAGE_SIZE

NOP_INSERTION = "nop"
TRAP_BYTE = 0xCC


class OverlapClass(str, Enum):
    OPCODE_EXACT = "OpcodeExact"
    MODRM = "ModRM"
    DISPLACEMENT = "Displacement"
    IMMEDIATE = "Immediate"
    CROSS_INSTRUCTION = "CrossInstruction"


class LayoutMode(str, Enum):
    SHIFT = "shift"
    FIXED = "fixed"


@dataclass(frozen=True)
class FieldOverlap:
    overlap: OverlapClass
    instructions: tuple
    fields: tuple = ()

    @property
    def first(self):
        return self.instructions[0]


@dataclass(frozen=True)
class Item:
    """One element of a replacement sequence.

    Either an instruction or a block of raw bytes that must be kept
    verbatim (guard templates). `target` is the absolute address a
    pc-relative operand refers to, in the original address space.
    """

    instr: object = None
    raw: bytes = b""
    target: int | None = None


@dataclass(frozen=True)
class RewritePolicy:
    allow_flag_clobber: bool = False
    free_registers: tuple = ()
    mode: LayoutMode = LayoutMode.SHIFT
    max_passes: int = 8
    disallow: int = 0x3


@dataclass(frozen=True)
class RewritePlan:
    rule: object
    occurrence: object
    start: int
    end: int
    items: tuple = ()
    replacement: bytes = b""
    scratch: int | None = None
    spill: str | None = None
    insert_at: tuple = ()
    flags_clobbered: bool = False

    @property
    def label(self):
        return "nop-insertion" if self.rule == NOP_INSERTION else f"rule-{self.rule}"


@dataclass(frozen=True)
class TrampolineRecord:
    site: int
    address: int
    jump_out: int
    jump_back: int
    length: int

    def to_dict(self):
        return {
            'site': f"0x{self.site:x}",
            'address': f"0x{self.address:x}",
            'jump_out_disp': self.jump_out,
            'jump_back_disp': self.jump_back,
            'length': self.length,
        }


@dataclass(frozen=True)
class Relocation:
    site: int
    old_disp: int
    new_disp: int


@dataclass
class RewriteResult:
    code: bytes
    base: int = 0
    trampoline: bytes = b""
    trampoline_base: int | None = None
    relocation_map: dict = field(default_factory=dict)
    relocations: list = field(default_factory=list)
    trampolines: list = field(default_factory=list)
    plans: list = field(default_factory=list)
    entries: object = None
    report: object = None

    def map_address(self, address):
        return self.relocation_map.get(address, address)

    def rule_histogram(self):
        histogram = {}
        for plan in self.plans:
            histogram[plan.label] = histogram.get(plan.label, 0) + 1
        return dict(sorted(histogram.items()))

    def combined(self):
        """Main code followed by trampoline code at their relative distance."""
        if not self.trampoline:
            return self.code
        gap = self.trampoline_base - (self.base + len(self.code))
        return self.code + bytes([TRAP_BYTE]) * gap + self.trampoline


@dataclass
class RuntimePageState:
    base: int
    exec_page: bytearray
    reserve: bytes
    entries: object
    next_page: bytes | None = None
    trampoline_base: int | None = None
    trampoline: bytearray = field(default_factory=bytearray)
    trampoline_capacity: int = PAGE_SIZE
    rewritten_entries: set = field(default_factory=set)
    copied: set = field(default_factory=set)
    listing: dict = field(default_factory=dict)
    plans: list = field(default_factory=list)
    swaps: int = 0
