"""Decoder and encoder for the x86-64 subset.

A byte string is decodable only when re-encoding the decoded instruction
reproduces it exactly, so `encode(decode(b)) == b` holds by construction.
"""
import logging
import struct
from dataclasses import replace

from app.models.errors import NotInSubset, OperandRange, Truncated
from app.models.x86 import (
    MASK32, MASK64, DecodedInstr, Field, ImmOp, MemOp, Mnemonic, RegOp, RelOp,
)

logger = logging.getLogger(__name__)

M = Mnemonic

ALU_DIGIT = {M.ADD: 0, M.OR: 1, M.SUB: 5, M.XOR: 6, M.CMP: 7}
DIGIT_ALU = {v: k for k, v in ALU_DIGIT.items()}
ALU_BASE = {M.ADD: 0x00, M.OR: 0x08, M.SUB: 0x28, M.XOR: 0x30, M.CMP: 0x38}
BASE_ALU = {v: k for k, v in ALU_BASE.items()}

JCC_SHORT = {M.JE: 0x74, M.JNE: 0x75, M.JNC: 0x73}
JCC_NEAR = {M.JE: 0x84, M.JNE: 0x85, M.JNC: 0x83}
SHORT_JCC = {v: k for k, v in JCC_SHORT.items()}
NEAR_JCC = {v: k for k, v in JCC_NEAR.items()}

FIXED = {
    b"\x90": M.NOP,
    b"\xc3": M.RET,
    b"\xcc": M.INT3,
    b"\x9c": M.PUSHFQ,
    b"\x9d": M.POPFQ,
    b"\x0f\x05": M.SYSCALL,
    b"\x0f\x01\xef": M.WRPKRU,
}
FIXED_BY_MNEMONIC = {v: k for k, v in FIXED.items()}

MAX_INSTRUCTION = 15


class _Reader:
    def __init__(self, data, at):
        self.data = data
        self.start = at
        self.pos = at

    def byte(self):
        if self.pos >= len(self.data):
            raise Truncated(f"instruction at 0x{self.start:x} runs past end of input",
                            offset=self.start)
        value = self.data[self.pos]
        self.pos += 1
        return value

    def take(self, n):
        if self.pos + n > len(self.data):
            raise Truncated(f"instruction at 0x{self.start:x} runs past end of input",
                            offset=self.start)
        chunk = bytes(self.data[self.pos:self.pos + n])
        self.pos += n
        return chunk


def _signed(value, size):
    bits = size * 8
    return value - (1 << bits) if value >> (bits - 1) else value


def _fits(value, size):
    bits = size * 8
    return -(1 << (bits - 1)) <= value < (1 << (bits - 1))


class X86Codec:
    """Decode, encode and build instructions of the supported subset."""

    # ------------------------------------------------------------------
    # DECODING
    # ------------------------------------------------------------------
    @staticmethod
    def decode(data, at=0):
        if at < 0 or at >= len(data):
            raise Truncated(f"offset 0x{at:x} outside input", offset=at)
        reader = _Reader(data, at)
        try:
            instr = X86Codec._decode(reader)
        except NotInSubset as exc:
            if exc.offset is None:
                exc.offset = at
            raise
        try:
            instr = X86Codec.finalize(instr)
        except OperandRange as exc:
            raise NotInSubset(f"unencodable form at 0x{at:x}: {exc.message}", offset=at) from exc
        original = bytes(data[at:at + instr.total_length])
        if X86Codec.encode(instr) != original:
            raise NotInSubset(f"non-canonical encoding at 0x{at:x}", offset=at)
        return instr

    @staticmethod
    def try_decode(data, at=0):
        try:
            return X86Codec.decode(data, at)
        except (NotInSubset, Truncated):
            return None

    @staticmethod
    def _decode(r):
        rex = None
        b = r.byte()
        if 0x40 <= b <= 0x4F:
            rex = b
            b = r.byte()
        w = bool(rex and rex & 8)
        width = 64 if w else 32

        def bad():
            return NotInSubset(f"byte 0x{b:02x} at 0x{r.pos - 1:x} not in subset",
                               offset=r.pos - 1)

        if b == 0x0F:
            b2 = r.byte()
            if b2 == 0x05 and rex is None:
                return DecodedInstr(M.SYSCALL, width=64, opcode=b"\x0f\x05")
            if b2 == 0x01 and rex is None:
                b3 = r.byte()
                if b3 == 0xEF:
                    return DecodedInstr(M.WRPKRU, width=64, opcode=b"\x0f\x01\xef")
                raise NotInSubset(f"0f 01 {b3:02x} not in subset", offset=r.start)
            if b2 == 0xAE:
                digit, rm = X86Codec._modrm(r, rex, 64)
                if digit & 7 != 5 or not isinstance(rm, MemOp):
                    raise NotInSubset("0f ae form not in subset", offset=r.start)
                return DecodedInstr(M.XRSTOR, (rm,), 64, b"\x0f\xae", rex)
            if b2 == 0xBA:
                digit, rm = X86Codec._modrm(r, rex, width)
                if digit & 7 != 4:
                    raise NotInSubset("0f ba form not in subset", offset=r.start)
                imm = ImmOp(r.byte(), 1)
                return DecodedInstr(M.BT, (rm, imm), width, b"\x0f\xba", rex)
            if b2 == 0xA3:
                reg, rm = X86Codec._modrm(r, rex, width)
                return DecodedInstr(M.BT, (rm, RegOp(reg, width)), width, b"\x0f\xa3", rex)
            if b2 in NEAR_JCC and rex is None:
                disp = _signed(struct.unpack("<I", r.take(4))[0], 4)
                return DecodedInstr(NEAR_JCC[b2], (RelOp(disp, 4),), 64, bytes([0x0F, b2]))
            raise NotInSubset(f"0f {b2:02x} not in subset", offset=r.start)

        if (b & 0xC7) in (0x01, 0x03, 0x05) and (b & 0x38) in BASE_ALU:
            mn = BASE_ALU[b & 0x38]
            low = b & 0x07
            if low == 0x05:
                imm = ImmOp(struct.unpack("<I", r.take(4))[0], 4)
                return DecodedInstr(mn, (RegOp(0, width), imm), width, bytes([b]), rex)
            reg, rm = X86Codec._modrm(r, rex, width)
            ops = (rm, RegOp(reg, width)) if low == 0x01 else (RegOp(reg, width), rm)
            return DecodedInstr(mn, ops, width, bytes([b]), rex)
        if b in (0x81, 0x83):
            digit, rm = X86Codec._modrm(r, rex, width)
            if digit & 7 not in DIGIT_ALU:
                raise NotInSubset(f"{b:02x} /{digit & 7} not in subset", offset=r.start)
            imm = ImmOp(struct.unpack("<I", r.take(4))[0], 4) if b == 0x81 else ImmOp(r.byte(), 1)
            return DecodedInstr(DIGIT_ALU[digit & 7], (rm, imm), width, bytes([b]), rex)
        if b in (0x89, 0x8B):
            reg, rm = X86Codec._modrm(r, rex, width)
            ops = (rm, RegOp(reg, width)) if b == 0x89 else (RegOp(reg, width), rm)
            return DecodedInstr(M.MOV, ops, width, bytes([b]), rex)
        if b == 0xC7:
            digit, rm = X86Codec._modrm(r, rex, width)
            if digit & 7 != 0:
                raise NotInSubset("c7 form not in subset", offset=r.start)
            imm = ImmOp(struct.unpack("<I", r.take(4))[0], 4)
            return DecodedInstr(M.MOV, (rm, imm), width, b"\xc7", rex)
        if 0xB8 <= b <= 0xBF:
            reg = (b & 7) | (8 if rex and rex & 1 else 0)
            size = 8 if w else 4
            imm = ImmOp(int.from_bytes(r.take(size), "little"), size)
            return DecodedInstr(M.MOV, (RegOp(reg, width), imm), width, b"\xb8", rex)
        if 0xB0 <= b <= 0xB7:
            low = b & 7
            if rex is None and low >= 4:
                dst = RegOp(low - 4, 8, high8=True)
            else:
                dst = RegOp(low | (8 if rex and rex & 1 else 0), 8)
            return DecodedInstr(M.MOV, (dst, ImmOp(r.byte(), 1)), 8, b"\xb0", rex)
        if 0x50 <= b <= 0x5F:
            reg = (b & 7) | (8 if rex and rex & 1 else 0)
            mn = M.PUSH if b < 0x58 else M.POP
            return DecodedInstr(mn, (RegOp(reg, 64),), 64, bytes([b & 0xF8]), rex)
        if b == 0xFF:
            digit, rm = X86Codec._modrm(r, rex, 64)
            if digit & 7 != 2:
                raise NotInSubset(f"ff /{digit & 7} not in subset", offset=r.start)
            return DecodedInstr(M.CALL, (rm,), 64, b"\xff", rex)
        if rex is not None:
            raise bad()
        if b in (0xEB, 0xE9):
            size = 1 if b == 0xEB else 4
            disp = _signed(int.from_bytes(r.take(size), "little"), size)
            return DecodedInstr(M.JMP, (RelOp(disp, size),), 64, bytes([b]))
        if b in SHORT_JCC:
            return DecodedInstr(SHORT_JCC[b], (RelOp(_signed(r.byte(), 1), 1),), 64, bytes([b]))
        if b == 0xE8:
            disp = _signed(struct.unpack("<I", r.take(4))[0], 4)
            return DecodedInstr(M.CALL, (RelOp(disp, 4),), 64, b"\xe8")
        fixed = FIXED.get(bytes([b]))
        if fixed is not None:
            return DecodedInstr(fixed, opcode=bytes([b]), width=64)
        raise bad()

    @staticmethod
    def _modrm(r, rex, width):
        modrm = r.byte()
        mod, reg, rm = modrm >> 6, (modrm >> 3) & 7, modrm & 7
        rex = rex or 0
        reg |= 8 if rex & 4 else 0
        if mod == 3:
            return reg, RegOp(rm | (8 if rex & 1 else 0), width)
        base, index, scale, force_sib, rip = None, None, 1, False, False
        disp_size = {0: 0, 1: 1, 2: 4}[mod]
        if rm == 4:
            sib = r.byte()
            ss, idx, sbase = sib >> 6, (sib >> 3) & 7, sib & 7
            idx |= 8 if rex & 2 else 0
            if idx == 4:
                if ss != 0:
                    raise NotInSubset("scaled SIB without index", offset=r.start)
            else:
                index, scale = idx, 1 << ss
            if sbase == 5 and mod == 0:
                disp_size = 4
            else:
                base = sbase | (8 if rex & 1 else 0)
            force_sib = index is None and base is not None and (base & 7) != 4
        elif rm == 5 and mod == 0:
            rip = True
            disp_size = 4
        else:
            base = rm | (8 if rex & 1 else 0)
        disp = 0
        if disp_size == 1:
            disp = _signed(r.byte(), 1)
        elif disp_size == 4:
            disp = _signed(struct.unpack("<I", r.take(4))[0], 4)
        return reg, MemOp(base, index, scale, disp, disp_size, rip, force_sib, width)

    # ------------------------------------------------------------------
    # ENCODING
    # ------------------------------------------------------------------
    @staticmethod
    def encode(instr):
        return b"".join(chunk for _, chunk in X86Codec._parts(instr))

    @staticmethod
    def finalize(instr):
        """Return `instr` with field extents and total length filled in."""
        extents, pos = [], 0
        merged = {}
        for which, chunk in X86Codec._parts(instr):
            if not chunk:
                continue
            start = merged.get(which, (pos, pos))[0]
            merged[which] = (start, pos + len(chunk))
            pos += len(chunk)
        for which, (start, end) in merged.items():
            extents.append((which, start, end))
        return replace(instr, field_extents=tuple(extents), total_length=pos)

    @staticmethod
    def length(instr):
        return len(X86Codec.encode(instr))

    @staticmethod
    def _parts(instr):
        op = instr.opcode
        ops = instr.operands
        mn = instr.mnemonic
        w = instr.width == 64

        if mn in FIXED_BY_MNEMONIC and not ops:
            X86Codec._no_rex(instr)
            return [(Field.OPCODE, FIXED_BY_MNEMONIC[mn])]
        if mn in (M.JMP, M.JE, M.JNE, M.JNC) or (mn is M.CALL and op == b"\xe8"):
            X86Codec._no_rex(instr)
            rel = ops[0]
            if not _fits(rel.disp, rel.size):
                raise OperandRange(f"displacement {rel.disp} does not fit rel{rel.size * 8}")
            if mn is M.JMP:
                opcode = b"\xeb" if rel.size == 1 else b"\xe9"
            elif mn is M.CALL:
                if rel.size != 4:
                    raise OperandRange("call requires rel32")
                opcode = b"\xe8"
            else:
                opcode = (bytes([JCC_SHORT[mn]]) if rel.size == 1
                          else bytes([0x0F, JCC_NEAR[mn]]))
            return [(Field.OPCODE, opcode),
                    (Field.DISPLACEMENT, (rel.disp & ((1 << (rel.size * 8)) - 1))
                     .to_bytes(rel.size, "little"))]
        if mn in (M.PUSH, M.POP):
            reg = ops[0].reg
            rex = X86Codec._rex(instr, b=reg >= 8)
            return [(Field.OPCODE, rex + bytes([op[0] + (reg & 7)]))]
        if op == b"\xb8":
            dst, imm = ops
            size = 8 if w else 4
            if imm.size != size:
                raise OperandRange("mov r, imm size mismatch")
            rex = X86Codec._rex(instr, w=w, b=dst.reg >= 8)
            return [(Field.OPCODE, rex + bytes([0xB8 + (dst.reg & 7)])),
                    (Field.IMMEDIATE, X86Codec._imm_bytes(imm))]
        if op == b"\xb0":
            dst, imm = ops
            if dst.high8:
                if instr.rex is not None:
                    raise OperandRange("high byte register cannot take a REX prefix")
                code, rex = 4 + dst.reg, b""
            else:
                needs = dst.reg >= 4
                rex = X86Codec._rex(instr, b=dst.reg >= 8, force=needs)
                code = dst.reg & 7
            return [(Field.OPCODE, rex + bytes([0xB0 + code])),
                    (Field.IMMEDIATE, X86Codec._imm_bytes(imm, 1))]
        if op in (b"\x05", b"\x0d", b"\x2d", b"\x35", b"\x3d"):
            dst, imm = ops
            if dst.reg != 0:
                raise OperandRange("accumulator form needs eax/rax")
            rex = X86Codec._rex(instr, w=w)
            return [(Field.OPCODE, rex + op), (Field.IMMEDIATE, X86Codec._imm_bytes(imm, 4))]

        # ModRM forms
        if len(op) == 1 and (op[0] & 0xC7) == 0x01 or op == b"\x89":
            rm, reg = ops[0], ops[1].reg
            imm = None
        elif len(op) == 1 and (op[0] & 0xC7) == 0x03 or op == b"\x8b":
            reg, rm = ops[0].reg, ops[1]
            imm = None
        elif op in (b"\x81", b"\x83"):
            rm, imm = ops
            reg = ALU_DIGIT[mn]
            if op == b"\x83" and imm.size != 1 or op == b"\x81" and imm.size != 4:
                raise OperandRange("immediate size does not match opcode")
        elif op == b"\xc7":
            rm, imm = ops
            reg = 0
        elif op == b"\x0f\xba":
            rm, imm = ops
            reg = 4
        elif op == b"\x0f\xa3":
            rm, reg = ops[0], ops[1].reg
            imm = None
        elif op == b"\x0f\xae":
            rm, reg, imm = ops[0], 5, None
            if not isinstance(rm, MemOp):
                raise OperandRange("xrstor needs a memory operand")
        elif op == b"\xff":
            rm, reg, imm = ops[0], 2, None
        else:
            raise OperandRange(f"unknown opcode form {op.hex()} for {mn.value}")

        modrm_parts, x, b = X86Codec._modrm_parts(reg & 7, rm)
        # call r/m and xrstor are 64-bit without REX.W
        w_needed = w and op not in (b"\xff", b"\x0f\xae")
        rex = X86Codec._rex(instr, w=w_needed, r=reg >= 8, x=x, b=b)
        parts = [(Field.OPCODE, rex + op)] + modrm_parts
        if imm is not None:
            parts.append((Field.IMMEDIATE, X86Codec._imm_bytes(imm)))
        return parts

    @staticmethod
    def _no_rex(instr):
        if instr.rex is not None:
            raise OperandRange(f"{instr.mnemonic.value} takes no REX prefix")

    @staticmethod
    def _rex(instr, w=False, r=False, x=False, b=False, force=False):
        needed = 0x40 | (8 if w else 0) | (4 if r else 0) | (2 if x else 0) | (1 if b else 0)
        if instr.rex is not None:
            if instr.rex & needed != needed:
                raise OperandRange(f"REX 0x{instr.rex:02x} lacks required bits 0x{needed:02x}")
            return bytes([instr.rex])
        if needed != 0x40 or force:
            return bytes([needed])
        return b""

    @staticmethod
    def _imm_bytes(imm, size=None):
        size = size or imm.size
        if imm.value < 0 or imm.value >= 1 << (size * 8):
            raise OperandRange(f"immediate 0x{imm.value:x} does not fit {size} bytes")
        return imm.value.to_bytes(size, "little")

    @staticmethod
    def _modrm_parts(reg, rm):
        if isinstance(rm, RegOp):
            return [(Field.MODRM, bytes([0xC0 | (reg << 3) | (rm.reg & 7)]))], False, rm.reg >= 8
        if not isinstance(rm, MemOp):
            raise OperandRange("r/m operand must be a register or memory reference")
        mem = rm
        if mem.disp_size not in (0, 1, 4) or not _fits(mem.disp, max(mem.disp_size, 1)) and mem.disp_size:
            raise OperandRange(f"displacement {mem.disp} does not fit disp{mem.disp_size * 8}")
        if mem.disp_size == 0 and mem.disp != 0:
            raise OperandRange("non-zero displacement needs a displacement field")
        if mem.scale not in (1, 2, 4, 8):
            raise OperandRange(f"bad scale {mem.scale}")
        if mem.index == 4:
            raise OperandRange("rsp cannot be an index register")
        disp = (mem.disp & ((1 << (mem.disp_size * 8)) - 1)).to_bytes(mem.disp_size, "little") \
            if mem.disp_size else b""
        if mem.rip:
            if mem.base is not None or mem.index is not None or mem.disp_size != 4:
                raise OperandRange("rip-relative operand takes only disp32")
            return [(Field.MODRM, bytes([(reg << 3) | 5])), (Field.DISPLACEMENT, disp)], False, False
        if mem.base is None:
            if mem.disp_size != 4:
                raise OperandRange("absolute operand needs disp32")
            index = 4 if mem.index is None else mem.index & 7
            ss = {1: 0, 2: 1, 4: 2, 8: 3}[mem.scale] if mem.index is not None else 0
            return ([(Field.MODRM, bytes([(reg << 3) | 4])),
                     (Field.SIB, bytes([(ss << 6) | (index << 3) | 5])),
                     (Field.DISPLACEMENT, disp)],
                    mem.index is not None and mem.index >= 8, False)
        if mem.disp_size == 0 and (mem.base & 7) == 5:
            raise OperandRange("rbp/r13 base needs a displacement")
        mod = {0: 0, 1: 1, 4: 2}[mem.disp_size]
        needs_sib = mem.index is not None or (mem.base & 7) == 4 or mem.force_sib
        if not needs_sib:
            return ([(Field.MODRM, bytes([(mod << 6) | (reg << 3) | (mem.base & 7)])),
                     (Field.DISPLACEMENT, disp)], False, mem.base >= 8)
        index = 4 if mem.index is None else mem.index & 7
        ss = {1: 0, 2: 1, 4: 2, 8: 3}[mem.scale] if mem.index is not None else 0
        return ([(Field.MODRM, bytes([(mod << 6) | (reg << 3) | 4])),
                 (Field.SIB, bytes([(ss << 6) | (index << 3) | (mem.base & 7)])),
                 (Field.DISPLACEMENT, disp)],
                mem.index is not None and mem.index >= 8, mem.base >= 8)

    # ------------------------------------------------------------------
    # LINEAR SWEEP
    # ------------------------------------------------------------------
    @staticmethod
    def sweep(data, start=0, end=None):
        """Linear-sweep disassembly. Returns a list of (offset, instr);
        raises NotInSubset/Truncated at the first undecodable offset."""
        end = len(data) if end is None else end
        out, pos = [], start
        while pos < end:
            instr = X86Codec.decode(data, pos)
            out.append((pos, instr))
            pos += instr.total_length
        return out


def _mem(base=None, disp=0, index=None, scale=1, width=32, rip=False):
    if rip:
        return MemOp(None, None, 1, disp, 4, True, False, width)
    if base is None:
        return MemOp(None, index, scale, disp, 4, False, False, width)
    if disp == 0 and (base & 7) != 5:
        size = 0
    elif _fits(disp, 1):
        size = 1
    else:
        size = 4
    return MemOp(base, index, scale, disp, size, False, False, width)


def _reg_or_mem(value, width):
    if isinstance(value, RegOp):
        return RegOp(value.reg, width, value.high8)
    if isinstance(value, MemOp):
        return replace(value, width=width)
    return RegOp(int(value), width)


class Asm:
    """Builders producing finalized canonical instructions."""

    mem = staticmethod(_mem)

    @staticmethod
    def alu(mnemonic, dst, src, width=32):
        dst = _reg_or_mem(dst, width)
        if isinstance(src, int) and not isinstance(src, bool):
            value = src
            if _fits(value, 1) or (width == 32 and _fits(_signed(value & MASK32, 4), 1)):
                v = value if _fits(value, 1) else _signed(value & MASK32, 4)
                return X86Codec.finalize(DecodedInstr(mnemonic, (dst, ImmOp(v & 0xFF, 1)),
                                                      width, b"\x83"))
            if width == 64 and not _fits(value, 4):
                raise OperandRange(f"immediate 0x{value:x} does not fit a sign-extended imm32")
            imm = ImmOp(value & MASK32, 4)
            if isinstance(dst, RegOp) and dst.reg == 0:
                return X86Codec.finalize(DecodedInstr(mnemonic, (dst, imm), width,
                                                      bytes([ALU_BASE[mnemonic] + 5])))
            return X86Codec.finalize(DecodedInstr(mnemonic, (dst, imm), width, b"\x81"))
        return Asm.alu_forced(mnemonic, dst, src, width)

    @staticmethod
    def alu_acc(mnemonic, value, width=32):
        """Accumulator form with imm32 (`3d id` for cmp eax)."""
        return X86Codec.finalize(DecodedInstr(mnemonic, (RegOp(0, width), ImmOp(value & MASK32, 4)),
                                              width, bytes([ALU_BASE[mnemonic] + 5])))

    @staticmethod
    def alu_imm32(mnemonic, dst, value, width=32):
        """ALU with a 32-bit immediate, never shortened to imm8."""
        dst = _reg_or_mem(dst, width)
        return X86Codec.finalize(DecodedInstr(mnemonic, (dst, ImmOp(value & MASK32, 4)),
                                              width, b"\x81"))

    @staticmethod
    def alu_forced(mnemonic, dst, src, width=32):
        dst = _reg_or_mem(dst, width)
        if isinstance(src, MemOp):
            return X86Codec.finalize(DecodedInstr(mnemonic, (dst, replace(src, width=width)),
                                                  width, bytes([ALU_BASE[mnemonic] + 3])))
        src = _reg_or_mem(src, width)
        return X86Codec.finalize(DecodedInstr(mnemonic, (dst, src), width,
                                              bytes([ALU_BASE[mnemonic] + 1])))

    @staticmethod
    def add(dst, src, width=32):
        return Asm.alu(M.ADD, dst, src, width)

    @staticmethod
    def sub(dst, src, width=32):
        return Asm.alu(M.SUB, dst, src, width)

    @staticmethod
    def xor(dst, src, width=32):
        return Asm.alu(M.XOR, dst, src, width)

    @staticmethod
    def or_(dst, src, width=32):
        return Asm.alu(M.OR, dst, src, width)

    @staticmethod
    def cmp(dst, src, width=32):
        return Asm.alu(M.CMP, dst, src, width)

    @staticmethod
    def mov(dst, src, width=32):
        if isinstance(src, int) and not isinstance(src, bool):
            if isinstance(dst, MemOp):
                if width == 64 and not _fits(src, 4):
                    raise OperandRange("mov [mem], imm64 not encodable")
                return X86Codec.finalize(DecodedInstr(
                    M.MOV, (replace(dst, width=width), ImmOp(src & MASK32, 4)), width, b"\xc7"))
            dst = _reg_or_mem(dst, width)
            if width == 64:
                if _fits(src, 4):
                    return X86Codec.finalize(DecodedInstr(
                        M.MOV, (dst, ImmOp(src & MASK32, 4)), 64, b"\xc7"))
                return X86Codec.finalize(DecodedInstr(
                    M.MOV, (dst, ImmOp(src & MASK64, 8)), 64, b"\xb8"))
            return X86Codec.finalize(DecodedInstr(M.MOV, (dst, ImmOp(src & MASK32, 4)),
                                                  32, b"\xb8"))
        if isinstance(src, MemOp):
            return X86Codec.finalize(DecodedInstr(
                M.MOV, (_reg_or_mem(dst, width), replace(src, width=width)), width, b"\x8b"))
        return X86Codec.finalize(DecodedInstr(
            M.MOV, (_reg_or_mem(dst, width), _reg_or_mem(src, width)), width, b"\x89"))

    @staticmethod
    def mov_imm32(reg, value):
        """`mov r32, imm32` in the B8+r form."""
        return X86Codec.finalize(DecodedInstr(M.MOV, (RegOp(reg, 32), ImmOp(value & MASK32, 4)),
                                              32, b"\xb8"))

    @staticmethod
    def mov8(dst, value, high8=False):
        return X86Codec.finalize(DecodedInstr(M.MOV, (RegOp(dst, 8, high8), ImmOp(value & 0xFF, 1)),
                                              8, b"\xb0"))

    @staticmethod
    def bt(rm, bit, width=32):
        rm = _reg_or_mem(rm, width)
        if isinstance(bit, RegOp):
            return X86Codec.finalize(DecodedInstr(M.BT, (rm, RegOp(bit.reg, width)), width,
                                                  b"\x0f\xa3"))
        return X86Codec.finalize(DecodedInstr(M.BT, (rm, ImmOp(bit & 0xFF, 1)), width, b"\x0f\xba"))

    @staticmethod
    def push(reg):
        return X86Codec.finalize(DecodedInstr(M.PUSH, (RegOp(reg, 64),), 64, b"\x50"))

    @staticmethod
    def pop(reg):
        return X86Codec.finalize(DecodedInstr(M.POP, (RegOp(reg, 64),), 64, b"\x58"))

    @staticmethod
    def jmp(disp, size=4):
        return X86Codec.finalize(DecodedInstr(M.JMP, (RelOp(disp, size),), 64,
                                              b"\xeb" if size == 1 else b"\xe9"))

    @staticmethod
    def jcc(mnemonic, disp, size=4):
        opcode = bytes([JCC_SHORT[mnemonic]]) if size == 1 else bytes([0x0F, JCC_NEAR[mnemonic]])
        return X86Codec.finalize(DecodedInstr(mnemonic, (RelOp(disp, size),), 64, opcode))

    @staticmethod
    def call(disp):
        return X86Codec.finalize(DecodedInstr(M.CALL, (RelOp(disp, 4),), 64, b"\xe8"))

    @staticmethod
    def call_indirect(rm):
        rm = _reg_or_mem(rm, 64)
        return X86Codec.finalize(DecodedInstr(M.CALL, (rm,), 64, b"\xff"))

    @staticmethod
    def xrstor(mem):
        return X86Codec.finalize(DecodedInstr(M.XRSTOR, (replace(mem, width=64),), 64, b"\x0f\xae"))

    @staticmethod
    def simple(mnemonic):
        return X86Codec.finalize(DecodedInstr(mnemonic, (), 64, FIXED_BY_MNEMONIC[mnemonic]))

    @staticmethod
    def nop():
        return Asm.simple(M.NOP)

    @staticmethod
    def ret():
        return Asm.simple(M.RET)

    @staticmethod
    def int3():
        return Asm.simple(M.INT3)

    @staticmethod
    def syscall():
        return Asm.simple(M.SYSCALL)

    @staticmethod
    def wrpkru():
        return Asm.simple(M.WRPKRU)

    @staticmethod
    def pushfq():
        return Asm.simple(M.PUSHFQ)

    @staticmethod
    def popfq():
        return Asm.simple(M.POPFQ)

    @staticmethod
    def assemble(instrs):
        return b"".join(X86Codec.encode(i) for i in instrs)


decode = X86Codec.decode
encode = X86Codec.encode
