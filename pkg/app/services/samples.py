"""Built-in sample programs, an in-memory ELF builder and the generator
for rewrite campaigns.

Samples run in the simulator at fixed addresses: code at CODE_BASE, data
at DATA_BASE, trusted data in the MT pool.
"""
import logging
import random
import struct
from dataclasses import dataclass, field, replace

from app.models.errors import ConfigError
from app.models.image import PF_R, PF_W, PF_X, LoadedImage, Segment, Symbol
from app.models.inspection import PAGE_SIZE, EntryPointSet, align_up
from app.models.rewrite import LayoutMode, RewritePolicy
from app.models.x86 import MASK32, Flags, MachineState, Mnemonic, Reg, RegOp
from app.services.gates import (
    PKRU_ALLOW_TRUSTED, PKRU_DISALLOW_TRUSTED, GateKind, emit_call_gate,
)
from app.services.mpksim import POOL_BASE, POOL_STRIDE
from app.services.x86_codec import Asm, X86Codec
from app.services.x86_interp import FlatMemory, OutcomeKind, SimpleEnv, X86Interpreter

logger = logging.getLogger(__name__)

M = Mnemonic

CODE_BASE = 0x400000
DATA_BASE = 0x600000
JIT_PAYLOAD = DATA_BASE + 0x100
MT_POOL = POOL_BASE + POOL_STRIDE
ENTRY_MARKER = "erim_entry"

PATTERN_DISP = 0x00EF010F
PATTERN_OR_IMM = 0x0000EF01
FAR_VALUE = 0x55667788
NEAR_VALUE = 0x11223344
JIT_EXIT_CODE = 7


def switch_to_trusted(allow=PKRU_ALLOW_TRUSTED):
    """Enter gate placed where untrusted code calls into trusted code."""
    return emit_call_gate(GateKind.ENTER, allow=allow)


def switch_to_untrusted(disallow=PKRU_DISALLOW_TRUSTED):
    """Exit gate with its PKRU check, placed where trusted code returns."""
    return emit_call_gate(GateKind.EXIT, disallow=disallow)


def _branch(mnemonic, disp, size):
    if mnemonic is M.JMP:
        return Asm.jmp(disp, size)
    if mnemonic is M.CALL:
        return Asm.call(disp)
    return Asm.jcc(mnemonic, disp, size)


class ProgramBuilder:
    """Two-pass assembler over `Asm` with labels.

    Branch sizes are fixed when emitted, so a single layout pass settles
    every address.
    """

    def __init__(self, base=CODE_BASE):
        self.base = base
        self.parts = []

    def emit(self, *items):
        for item in items:
            kind = 'raw' if isinstance(item, (bytes, bytearray)) else 'instr'
            self.parts.append((kind, item))
        return self

    def label(self, name):
        self.parts.append(('label', name))
        return self

    def jmp(self, label, size=4):
        self.parts.append(('branch', (M.JMP, label, size)))
        return self

    def jcc(self, mnemonic, label, size=1):
        self.parts.append(('branch', (mnemonic, label, size)))
        return self

    def call(self, label):
        self.parts.append(('branch', (M.CALL, label, 4)))
        return self

    def mov_address(self, reg, label):
        self.parts.append(('address', (reg, label)))
        return self

    @staticmethod
    def _length(kind, value):
        if kind == 'raw':
            return len(value)
        if kind == 'instr':
            return value.total_length
        if kind == 'branch':
            return _branch(value[0], 0, value[2]).total_length
        if kind == 'address':
            return Asm.mov_imm32(value[0], 0).total_length
        return 0

    def layout(self):
        labels, pos = {}, self.base
        for kind, value in self.parts:
            if kind == 'label':
                labels[value] = pos
            pos += self._length(kind, value)
        return labels

    def assemble(self, external=None):
        """Returns (code, labels). `external` resolves labels outside the code."""
        labels = self.layout()
        resolve = dict(external or {}, **labels)
        out = bytearray()
        for kind, value in self.parts:
            end = self.base + len(out) + self._length(kind, value)
            if kind == 'raw':
                out += value
            elif kind == 'instr':
                out += X86Codec.encode(value)
            elif kind == 'branch':
                mnemonic, label, size = value
                out += X86Codec.encode(_branch(mnemonic, resolve[label] - end, size))
            elif kind == 'address':
                out += X86Codec.encode(Asm.mov_imm32(value[0], resolve[value[1]]))
        return bytes(out), labels


# ----------------------------------------------------------------------
# ELF
# ----------------------------------------------------------------------
EHDR = struct.Struct("<16sHHIQQQIHHHHHH")
PHDR = struct.Struct("<IIQQQQQQ")
SHDR = struct.Struct("<IIQQQQIIQQ")
SYM = struct.Struct("<IBBHQQ")
ET_EXEC = 2
EM_X86_64 = 62
PT_LOAD = 1
SHT_SYMTAB = 2
SHT_STRTAB = 3
SHN_ABS = 0xFFF1
STB_GLOBAL_FUNC = 0x12


def build_elf(image):
    """Serialize `image` as a little-endian ELF64 executable.

    Each segment becomes a PT_LOAD with its file offset congruent to its
    address modulo the page size; symbols go to a .symtab with absolute
    values. Segment offsets and indices in `image` are updated in place.
    """
    phnum = len(image.segments)
    out = bytearray(EHDR.size + PHDR.size * phnum)
    phdrs = []
    for index, segment in enumerate(image.segments):
        offset = align_up(len(out), PAGE_SIZE) + segment.vaddr % PAGE_SIZE
        out += bytes(offset - len(out)) + segment.data
        segment.offset, segment.index = offset, index
        phdrs.append(PHDR.pack(PT_LOAD, segment.flags, offset, segment.vaddr, segment.vaddr,
                               len(segment.data), segment.memsz, PAGE_SIZE))
    out[EHDR.size:EHDR.size + PHDR.size * phnum] = b"".join(phdrs)

    strtab = bytearray(b"\0")
    symtab = bytearray(SYM.pack(0, 0, 0, 0, 0, 0))
    for sym in image.symbols:
        symtab += SYM.pack(len(strtab), STB_GLOBAL_FUNC, 0, SHN_ABS, sym.address, 0)
        strtab += sym.name.encode() + b"\0"
    shstrtab = b"\0.symtab\0.strtab\0.shstrtab\0"

    out += bytes(align_up(len(out), 8) - len(out))
    symtab_off = len(out)
    out += symtab
    strtab_off = len(out)
    out += strtab
    shstrtab_off = len(out)
    out += shstrtab
    out += bytes(align_up(len(out), 8) - len(out))
    shoff = len(out)
    out += SHDR.pack(0, 0, 0, 0, 0, 0, 0, 0, 0, 0)
    out += SHDR.pack(1, SHT_SYMTAB, 0, 0, symtab_off, len(symtab), 2, 1, 8, SYM.size)
    out += SHDR.pack(9, SHT_STRTAB, 0, 0, strtab_off, len(strtab), 0, 0, 1, 0)
    out += SHDR.pack(17, SHT_STRTAB, 0, 0, shstrtab_off, len(shstrtab), 0, 0, 1, 0)

    ident = b"\x7fELF" + bytes([2, 1, 1, 0]) + bytes(8)
    out[:EHDR.size] = EHDR.pack(ident, ET_EXEC, EM_X86_64, 1, image.entry, EHDR.size, shoff, 0,
                                EHDR.size, PHDR.size, phnum, SHDR.size, 4, 3)
    image.raw = bytes(out)
    return image.raw


# ----------------------------------------------------------------------
# samples
# ----------------------------------------------------------------------
@dataclass
class Sample:
    name: str
    image: LoadedImage
    entries: EntryPointSet
    trusted: list = field(default_factory=list)
    expected_exit: int = 0
    expected_output: bytes = b""
    policy: RewritePolicy = field(default_factory=RewritePolicy)

    @property
    def code(self):
        return self.image.segments[0].data

    def rewritten(self, policy=None):
        """Copy of this sample with its code rewritten offline."""
        from app.services.rewriter import RewriterService

        result = RewriterService(policy or self.policy).rewrite_all(
            self.code, self.entries, CODE_BASE)
        mapping = result.map_address
        segments = [replace(self.image.segments[0], data=result.combined(),
                            memsz=len(result.combined()))] + [
            replace(s) for s in self.image.segments[1:]]
        symbols = [Symbol(s.name, mapping(s.address)) for s in self.image.symbols]
        image = LoadedImage(segments, symbols, mapping(self.image.entry))
        build_elf(image)
        trusted = [(mapping(lo), mapping(hi)) for lo, hi in self.trusted]
        twin = Sample(f"{self.name}-rewritten", image, result.entries, trusted,
                      self.expected_exit, self.expected_output, self.policy)
        return twin, result


def _image(code, labels, data=b"", extra=(), entry="start"):
    segments = [Segment(CODE_BASE, code, PF_R | PF_X)]
    if data:
        segments.append(Segment(DATA_BASE, bytes(data), PF_R | PF_W))
    for address, blob in extra:
        segments.append(Segment(address, bytes(blob), PF_R))
    symbols = [Symbol(name, address) for name, address in sorted(labels.items(),
                                                                  key=lambda kv: (kv[1], kv[0]))]
    image = LoadedImage(segments, symbols, labels[entry])
    build_elf(image)
    return image


def _exit(builder, code=0):
    builder.emit(Asm.mov_imm32(Reg.RAX, 60), Asm.mov_imm32(Reg.RDI, code), Asm.syscall())


def _write_buffer(builder, length):
    """write(1, rdi, length)."""
    builder.emit(Asm.mov(RegOp(Reg.RSI, 64), RegOp(Reg.RDI, 64), 64),
                 Asm.mov_imm32(Reg.RDI, 1), Asm.mov_imm32(Reg.RDX, length),
                 Asm.mov_imm32(Reg.RAX, 1), Asm.syscall())


def protected_sample(allow=PKRU_ALLOW_TRUSTED, disallow=PKRU_DISALLOW_TRUSTED):
    """Untrusted main entering trusted code through a gate pair.

    Trusted code stores a value into the MT pool and reads it back, then
    leaves through the exit gate; untrusted code prints "ok\\n".
    """
    b = ProgramBuilder()
    b.label("start")
    b.emit(switch_to_trusted(allow))
    b.label(f"{ENTRY_MARKER}_store")
    b.emit(Asm.mov(Reg.RBX, MT_POOL, 64),
           Asm.mov(Asm.mem(Reg.RBX), 0x2A),
           Asm.mov(Reg.RAX, Asm.mem(Reg.RBX)),
           Asm.mov(Asm.mem(Reg.RBX, 4), RegOp(Reg.RAX)))
    b.emit(switch_to_untrusted(disallow))
    b.label("untrusted_continue")
    b.mov_address(Reg.RDI, "message")
    _write_buffer(b, 3)
    _exit(b, 0)
    b.label("code_end")
    code, labels = b.assemble({"message": DATA_BASE})
    image = _image(code, labels, data=b"ok\n".ljust(16, b"\0"))
    entry = labels[f"{ENTRY_MARKER}_store"]
    return Sample("protected", image, EntryPointSet.of(entry, provenance="sample"),
                  [(entry, labels["untrusted_continue"])], 0, b"ok\n")


def unsafe_sample(allow=PKRU_ALLOW_TRUSTED):
    """Untrusted code that grants itself MT access with a bare WRPKRU."""
    b = ProgramBuilder()
    b.label("start")
    b.emit(Asm.xor(RegOp(Reg.RCX), RegOp(Reg.RCX)), Asm.xor(RegOp(Reg.RDX), RegOp(Reg.RDX)),
           Asm.mov_imm32(Reg.RAX, allow), Asm.wrpkru(),
           Asm.mov(Reg.RBX, MT_POOL, 64),
           Asm.mov(Asm.mem(Reg.RBX), 1))
    _exit(b, 0)
    code, labels = b.assemble()
    return Sample("unsafe", _image(code, labels), EntryPointSet(), [], 0, b"")


def jit_payload(unsafe=False, disallow=PKRU_DISALLOW_TRUSTED):
    """Code generated at run time: exits with JIT_EXIT_CODE. The unsafe
    variant drops to `disallow` with a bare WRPKRU first."""
    instrs = []
    if unsafe:
        instrs += [Asm.xor(RegOp(Reg.RCX), RegOp(Reg.RCX)), Asm.xor(RegOp(Reg.RDX), RegOp(Reg.RDX)),
                   Asm.mov_imm32(Reg.RAX, disallow), Asm.wrpkru()]
    instrs += [Asm.mov_imm32(Reg.RDI, JIT_EXIT_CODE), Asm.mov_imm32(Reg.RAX, 60), Asm.syscall()]
    code = Asm.assemble(instrs)
    return code + b"\x90" * (-len(code) % 4)


def jit_sample(unsafe=False, allow=PKRU_ALLOW_TRUSTED, disallow=PKRU_DISALLOW_TRUSTED):
    """Trusted code maps a page, copies generated code into it, asks for
    execute permission and untrusted code calls it."""
    payload = jit_payload(unsafe, disallow)
    b = ProgramBuilder()
    b.label("start")
    b.emit(switch_to_trusted(allow))
    b.label(f"{ENTRY_MARKER}_jit")
    b.emit(Asm.mov_imm32(Reg.RAX, 9), Asm.xor(RegOp(Reg.RDI), RegOp(Reg.RDI)),
           Asm.mov_imm32(Reg.RSI, PAGE_SIZE), Asm.mov_imm32(Reg.RDX, 3), Asm.syscall(),
           Asm.mov(RegOp(Reg.RBX, 64), RegOp(Reg.RAX, 64), 64))
    b.mov_address(Reg.RSI, "payload")
    for off in range(0, len(payload), 4):
        b.emit(Asm.mov(Reg.RAX, Asm.mem(Reg.RSI, off)), Asm.mov(Asm.mem(Reg.RBX, off), RegOp(Reg.RAX)))
    b.emit(Asm.mov_imm32(Reg.RAX, 10), Asm.mov(RegOp(Reg.RDI, 64), RegOp(Reg.RBX, 64), 64),
           Asm.mov_imm32(Reg.RSI, PAGE_SIZE), Asm.mov_imm32(Reg.RDX, 5), Asm.syscall())
    b.emit(switch_to_untrusted(disallow))
    b.label("untrusted_continue")
    b.emit(Asm.call_indirect(Reg.RBX))
    _exit(b, 1)
    code, labels = b.assemble({"payload": JIT_PAYLOAD})
    data = bytes(JIT_PAYLOAD - DATA_BASE) + payload
    image = _image(code, labels, data=data)
    entry = labels[f"{ENTRY_MARKER}_jit"]
    name = "jit-unsafe" if unsafe else "jit"
    return Sample(name, image, EntryPointSet.of(entry, provenance="sample"),
                  [(entry, labels["untrusted_continue"])], JIT_EXIT_CODE, b"")


def _far_segment(address_after, value=FAR_VALUE):
    target = address_after + PATTERN_DISP
    base = target - target % PAGE_SIZE
    blob = bytearray(target - base + 4)
    blob[target - base:] = struct.pack("<I", value)
    return base, bytes(blob)


def handcrafted_a(disallow=PKRU_DISALLOW_TRUSTED):
    """Straight-line program with one occurrence per overlap class:
    WRPKRU and XRSTOR opcodes, a ModRM byte, a rip-relative and a based
    displacement, an immediate and one spanning two instructions."""
    b = ProgramBuilder()
    b.label("start")
    b.emit(Asm.mov_imm32(Reg.RDI, DATA_BASE),
           Asm.xor(RegOp(Reg.RBP), RegOp(Reg.RBP)), Asm.xor(RegOp(Reg.RBX), RegOp(Reg.RBX)),
           Asm.xor(RegOp(Reg.RCX), RegOp(Reg.RCX)), Asm.xor(RegOp(Reg.RDX), RegOp(Reg.RDX)),
           Asm.mov_imm32(Reg.RAX, disallow), Asm.wrpkru(),
           Asm.xor(RegOp(Reg.RAX), RegOp(Reg.RAX)), Asm.xrstor(Asm.mem(Reg.RDI)),
           Asm.or_(Asm.mem(Reg.RDI), PATTERN_OR_IMM))
    b.label("far_load")
    far = Asm.mov(Reg.RAX, Asm.mem(disp=PATTERN_DISP, rip=True))
    b.emit(far, Asm.add(RegOp(Reg.RBX), RegOp(Reg.RAX)),
           Asm.mov(Reg.RSI, DATA_BASE + 0x40 - PATTERN_DISP, 64),
           Asm.mov(Reg.RAX, Asm.mem(Reg.RSI, PATTERN_DISP)),
           Asm.add(RegOp(Reg.RBX), RegOp(Reg.RAX)),
           Asm.add(Reg.RBX, PATTERN_DISP),
           Asm.mov8(Reg.RAX, 0x0F), Asm.add(RegOp(Reg.RDI), RegOp(Reg.RBP)),
           Asm.mov(Asm.mem(Reg.RDI, 8), RegOp(Reg.RBX)))
    _write_buffer(b, 16)
    _exit(b, 0)
    code, labels = b.assemble()
    data = bytearray(0x44)
    data[0x40:0x44] = struct.pack("<I", NEAR_VALUE)
    far_segment = _far_segment(labels["far_load"] + far.total_length)
    image = _image(code, labels, data=data, extra=[far_segment])
    total = (FAR_VALUE + NEAR_VALUE + PATTERN_DISP) & MASK32
    expected = struct.pack("<IIII", PATTERN_OR_IMM, 0, total, 0)
    return Sample("handcrafted-a", image, EntryPointSet(), [], 0, expected, RewritePolicy())


def handcrafted_b():
    """Loop whose body holds immediate, ModRM and rip-relative occurrences,
    closed by a short backward branch; rewritten with free registers and
    flag clobbering allowed."""
    b = ProgramBuilder()
    b.label("start")
    b.emit(Asm.mov_imm32(Reg.RDI, DATA_BASE), Asm.xor(RegOp(Reg.RBX), RegOp(Reg.RBX)),
           Asm.xor(RegOp(Reg.RSI), RegOp(Reg.RSI)), Asm.xor(RegOp(Reg.RBP), RegOp(Reg.RBP)))
    b.label("loop")
    b.emit(Asm.add(Reg.RBX, PATTERN_DISP), Asm.or_(Asm.mem(Reg.RDI), PATTERN_OR_IMM))
    b.label("far_load")
    far = Asm.mov(Reg.RAX, Asm.mem(disp=PATTERN_DISP, rip=True))
    b.emit(far, Asm.xor(RegOp(Reg.RBX), RegOp(Reg.RAX)),
           Asm.add(Reg.RSI, 1), Asm.cmp(Reg.RSI, 3))
    b.jcc(M.JNE, "loop", size=1)
    b.emit(Asm.mov8(Reg.RAX, 0x0F), Asm.add(RegOp(Reg.RDI), RegOp(Reg.RBP)),
           Asm.mov(Asm.mem(Reg.RDI, 8), RegOp(Reg.RBX)))
    _write_buffer(b, 16)
    _exit(b, 0)
    code, labels = b.assemble()
    image = _image(code, labels, data=bytes(16),
                   extra=[_far_segment(labels["far_load"] + far.total_length)])
    total = 0
    for _ in range(3):
        total = ((total + PATTERN_DISP) & MASK32) ^ FAR_VALUE
    expected = struct.pack("<IIII", PATTERN_OR_IMM, 0, total, 0)
    policy = RewritePolicy(allow_flag_clobber=True,
                           free_registers=(Reg.R8, Reg.R9, Reg.R10, Reg.R11))
    return Sample("handcrafted-b", image, EntryPointSet(), [], 0, expected, policy)


SAMPLES = {
    "protected": lambda disallow: protected_sample(disallow=disallow),
    "unsafe": lambda disallow: unsafe_sample(),
    "jit": lambda disallow: jit_sample(disallow=disallow),
    "jit-unsafe": lambda disallow: jit_sample(unsafe=True, disallow=disallow),
    "handcrafted-a": handcrafted_a,
    "handcrafted-b": lambda disallow: handcrafted_b(),
}


def sample(name, disallow=PKRU_DISALLOW_TRUSTED):
    """Build the named sample; `disallow` is the PKRU value its exit checks expect."""
    if name not in SAMPLES:
        raise ConfigError(f"unknown sample {name!r}; known: {', '.join(sorted(SAMPLES))}")
    return SAMPLES[name](disallow)


# ----------------------------------------------------------------------
# rewrite campaign
# ----------------------------------------------------------------------
CAMPAIGN_BASE = 0x10000
CAMPAIGN_TRAMPOLINES = 0x20000
CAMPAIGN_KINDS = ("wrpkru", "xrstor", "modrm", "displacement", "rip", "rip-store", "immediate",
                  "cross")
FREE_SET = (Reg.R8, Reg.R9, Reg.R10, Reg.R11)
CAMPAIGN_POLICIES = (
    RewritePolicy(),
    RewritePolicy(allow_flag_clobber=True, free_registers=FREE_SET),
    RewritePolicy(mode=LayoutMode.FIXED),
    RewritePolicy(mode=LayoutMode.FIXED, free_registers=FREE_SET),
)
ALU_IMM = (M.ADD, M.SUB, M.XOR, M.OR, M.CMP)


@dataclass
class CampaignCase:
    kind: str
    code: bytes
    policy: RewritePolicy
    fixed: dict = field(default_factory=dict)
    masks: dict = field(default_factory=dict)
    base: int = CAMPAIGN_BASE


def _pattern_word(rng, xrstor=False):
    """32-bit little-endian value whose bytes hold a pattern at offset 0 or 1."""
    pattern = bytes([0x0F, 0xAE, rng.choice([0x28, 0x2B, 0x6F, 0xAF])]) if xrstor else b"\x0f\x01\xef"
    at = rng.randrange(2)
    raw = bytearray(rng.randbytes(4))
    raw[at:at + 3] = pattern
    return struct.unpack("<i", bytes(raw))[0]


def _registers(policy, exclude=()):
    banned = set(policy.free_registers) | {Reg.RSP} | set(exclude)
    return [r for r in Reg if r not in banned]


def _campaign_site(kind, rng, policy):
    regs = _registers(policy)
    fixed, masks = {}, {}
    if kind == "wrpkru":
        fixed = {Reg.RAX: policy.disallow, Reg.RCX: 0, Reg.RDX: 0}
        return [Asm.wrpkru()], fixed, masks
    if kind == "xrstor":
        masks = {Reg.RAX: ~(1 << 9)}
        base = rng.choice(regs)
        return [Asm.xrstor(Asm.mem(base, rng.choice([0, 8, 0x40])))], fixed, masks
    if kind == "modrm":
        base = rng.choice([Reg.RDI] + ([Reg.R15] if Reg.R15 in regs else []))
        value = rng.choice([PATTERN_OR_IMM, 0x2BAE, 0x6FAE]) | (rng.randrange(1 << 15) << 16)
        return [Asm.or_(Asm.mem(base), value, rng.choice([32, 64]))], fixed, masks
    if kind == "displacement":
        disp = _pattern_word(rng, xrstor=rng.random() < 0.2)
        dst, base = rng.choice(regs), rng.choice(regs + [Reg.RSP])
        index = rng.choice([None] + [r for r in regs if r != base])
        mem = Asm.mem(base, disp, index, rng.choice([1, 2, 4, 8]) if index is not None else 1)
        if rng.random() < 0.5:
            return [Asm.mov(dst, mem, rng.choice([32, 64]))], fixed, masks
        return [Asm.alu(rng.choice(ALU_IMM), dst, mem)], fixed, masks
    if kind == "rip":
        dst = rng.choice(regs)
        mem = Asm.mem(disp=_pattern_word(rng), rip=True)
        return [Asm.mov(dst, mem, rng.choice([32, 64]))], fixed, masks
    if kind == "rip-store":
        # pattern in the immediate of an instruction that writes [rip+disp]
        mem = Asm.mem(disp=rng.randrange(0x80, 0x400), rip=True)
        value = _pattern_word(rng, xrstor=rng.random() < 0.2)
        if rng.random() < 0.4:
            return [Asm.mov(mem, value)], fixed, masks
        return [Asm.alu_imm32(rng.choice(ALU_IMM), mem, value, rng.choice([32, 64]))], fixed, masks
    if kind == "immediate":
        value = _pattern_word(rng, xrstor=rng.random() < 0.2)
        dst = rng.choice(regs)
        roll = rng.random()
        if roll < 0.2:
            return [Asm.mov_imm32(dst, value)], fixed, masks
        if roll < 0.3:
            return [Asm.mov(Asm.mem(rng.choice(regs), 0x10), value)], fixed, masks
        width = rng.choice([32, 64])
        roll = rng.random()
        if roll < 0.7:
            target = dst
        elif roll < 0.85:
            target = Asm.mem(rng.choice(regs), 0x20)
        else:
            target = Asm.mem(disp=rng.randrange(0x80, 0x400), rip=True)
        return [Asm.alu_imm32(rng.choice(ALU_IMM), target, value, width)], fixed, masks
    if kind == "cross":
        tail = Asm.add(RegOp(Reg.RDI), RegOp(Reg.RBP))
        if rng.random() < 0.5:
            low8 = [r for r in (Reg.RAX, Reg.RCX, Reg.RDX, Reg.RBX) if r in regs]
            return [Asm.mov8(rng.choice(low8), 0x0F), tail], fixed, masks
        dst = rng.choice([r for r in regs if r not in (Reg.RDI, Reg.RBP)])
        return [Asm.mov_imm32(dst, 0x0F000000 | rng.randrange(1 << 24)), tail], fixed, masks
    raise ValueError(kind)


def campaign_cases(count, seed=0):
    """`count` small programs, each holding one occurrence, cycling through
    every overlap class and every campaign policy."""
    rng = random.Random(seed)
    cases = []
    for i in range(count):
        kind = CAMPAIGN_KINDS[i % len(CAMPAIGN_KINDS)]
        policy = CAMPAIGN_POLICIES[(i // len(CAMPAIGN_KINDS)) % len(CAMPAIGN_POLICIES)]
        site, fixed, masks = _campaign_site(kind, rng, policy)
        filler = [Asm.nop()] * 5
        code = Asm.assemble(filler + site + filler + [Asm.int3()])
        cases.append(CampaignCase(kind, code, policy, fixed, masks))
    return cases


def random_state(rng, case, rip):
    state = MachineState()
    for reg in Reg:
        roll = rng.random()
        if roll < 0.3:
            value = rng.randrange(1 << 16)
        elif roll < 0.5:
            value = rng.choice([0, 1, 0xFFFF_FFFF, 1 << 9, 0x0F01EF])
        else:
            value = rng.getrandbits(64)
        state.set(reg, value)
    state.set(Reg.RSP, 0x7FFF_0000_0000 + rng.randrange(1 << 16) * 16)
    for reg, value in case.fixed.items():
        state.set(reg, value)
    for reg, mask in case.masks.items():
        state.set(reg, state.get(reg) & mask)
    state.flags = Flags(*(rng.random() < 0.5 for _ in range(4)))
    state.set_pkru(PKRU_DISALLOW_TRUSTED)
    state.rip = rip
    return state


def execute(code_regions, state, max_steps=1000):
    """Run from `state` over auto-mapped memory. Returns (outcome, state, env)."""
    memory = FlatMemory(auto_map=True)
    for address, data in code_regions:
        memory.load(address, data)
    env = SimpleEnv(memory)
    outcome, _ = X86Interpreter.run(state, env, max_steps)
    return outcome, state, env


def _masked(memory, excluded):
    pages = {}
    for index, data in memory.pages.items():
        data = bytearray(data)
        for lo, hi in excluded:
            for address in range(max(lo, index * PAGE_SIZE), min(hi, (index + 1) * PAGE_SIZE)):
                data[address % PAGE_SIZE] = 0
        if any(data):
            pages[index] = bytes(data)
    return pages


def differential(case, result, state):
    """Compare the original and rewritten case from one initial state.
    Returns a list of differences (empty when equivalent)."""
    original_state = state.copy()
    rewritten_state = state.copy()
    rewritten_state.rip = result.map_address(state.rip)
    regions = [(result.base, result.code)]
    if result.trampoline:
        regions.append((result.trampoline_base, result.trampoline))
    a, sa, ea = execute([(case.base, case.code)], original_state)
    b, sb, eb = execute(regions, rewritten_state)
    diffs = []
    if a.kind is not b.kind or (a.kind is OutcomeKind.EXIT and a.code != b.code):
        diffs.append(f"outcome {a.to_dict()} != {b.to_dict()}")
    free = set(case.policy.free_registers)
    for reg in Reg:
        if reg not in free and sa.get(reg) != sb.get(reg):
            diffs.append(f"{reg.name.lower()}: 0x{sa.get(reg):x} != 0x{sb.get(reg):x}")
    if sa.pkru != sb.pkru:
        diffs.append(f"pkru 0x{sa.pkru:x} != 0x{sb.pkru:x}")
    clobbered = any(p.flags_clobbered for p in result.plans)
    if not clobbered and sa.flags != sb.flags:
        diffs.append(f"flags {sa.flags} != {sb.flags}")
    rsp = state.get(Reg.RSP)
    excluded = [(rsp - 256, rsp)] + [(addr, addr + len(data)) for addr, data in regions]
    excluded.append((case.base, case.base + len(case.code)))
    if _masked(ea.memory, excluded) != _masked(eb.memory, excluded):
        diffs.append("memory differs")
    if ea.output != eb.output or ea.syscalls != eb.syscalls:
        diffs.append("syscall trace differs")
    return diffs


def rewrite_case(case):
    from app.services.rewriter import RewriterService

    trampoline_base = CAMPAIGN_TRAMPOLINES if case.policy.mode is LayoutMode.FIXED else None
    return RewriterService(case.policy).rewrite_all(case.code, EntryPointSet(), case.base,
                                                    trampoline_base)
