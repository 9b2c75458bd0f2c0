"""Interpreter for the x86-64 subset.

Every memory access and control transfer goes through an `InterpEnv`
before it takes effect, so the simulator can veto it with a fault.
"""
import logging
from dataclasses import dataclass
from enum import Enum

from app.models.errors import NotInSubset, Truncated
from app.models.inspection import PAGE_SIZE
from app.models.x86 import MASK32, MASK64, Flags, ImmOp, MemOp, Mnemonic, Reg, RegOp, RelOp
from app.services.x86_codec import MAX_INSTRUCTION, X86Codec

logger = logging.getLogger(__name__)

M = Mnemonic

XRSTOR_PKRU_OFFSET = 0xA80
XRSTOR_PKRU_BIT = 9

SYS_WRITE = 1
SYS_EXIT = 60
ENOSYS = 38

FLAG_CF = 1 << 0
FLAG_FIXED = 1 << 1
FLAG_ZF = 1 << 6
FLAG_SF = 1 << 7
FLAG_OF = 1 << 11


class FaultKind(str, Enum):
    UNDECODABLE = "undecodable"
    UNMAPPED = "unmapped"
    PERMISSION = "permission"
    WRPKRU_OPERAND = "wrpkru-operand"
    TRAP = "trap"
    EXEC = "exec"


class OutcomeKind(str, Enum):
    CONTINUE = "continue"
    EXIT = "exit"
    FAULT = "fault"


@dataclass(frozen=True)
class StepOutcome:
    kind: OutcomeKind
    code: int | None = None
    fault: FaultKind | None = None
    address: int | None = None
    detail: str = ""

    @classmethod
    def cont(cls):
        return cls(OutcomeKind.CONTINUE)

    @classmethod
    def exited(cls, code):
        return cls(OutcomeKind.EXIT, code=code)

    @classmethod
    def faulted(cls, fault, address=None, detail=""):
        return cls(OutcomeKind.FAULT, fault=fault, address=address, detail=detail)

    @property
    def running(self):
        return self.kind is OutcomeKind.CONTINUE

    def to_dict(self):
        body = {'kind': self.kind.value}
        if self.code is not None:
            body['code'] = self.code
        if self.fault is not None:
            body['fault'] = self.fault.value
        if self.address is not None:
            body['address'] = f"0x{self.address:x}"
        if self.detail:
            body['detail'] = self.detail
        return body


class MemoryFault(Exception):
    """Raised by environment hooks to abort the current instruction."""

    def __init__(self, kind, address=None, detail=""):
        super().__init__(detail or kind.value)
        self.kind = kind
        self.address = address
        self.detail = detail


class FlatMemory:
    """Sparse page-granular byte memory."""

    def __init__(self, auto_map=False):
        self.pages = {}
        self.auto_map = auto_map

    def map(self, address, size):
        first = address // PAGE_SIZE
        last = (address + max(size, 1) - 1) // PAGE_SIZE
        for index in range(first, last + 1):
            self.pages.setdefault(index, bytearray(PAGE_SIZE))

    def load(self, address, data):
        self.map(address, len(data))
        self.write(address, data)

    def is_mapped(self, address):
        return (address & MASK64) // PAGE_SIZE in self.pages

    def _page(self, index, address):
        page = self.pages.get(index)
        if page is None:
            if not self.auto_map:
                raise MemoryFault(FaultKind.UNMAPPED, address, f"unmapped address 0x{address:x}")
            page = self.pages[index] = bytearray(PAGE_SIZE)
        return page

    def read(self, address, size):
        out = bytearray()
        for i in range(size):
            a = (address + i) & MASK64
            out.append(self._page(a // PAGE_SIZE, a)[a % PAGE_SIZE])
        return bytes(out)

    def write(self, address, data):
        for i, value in enumerate(data):
            a = (address + i) & MASK64
            self._page(a // PAGE_SIZE, a)[a % PAGE_SIZE] = value

    def read_available(self, address, limit):
        """Bytes from `address` up to `limit` or the first unmapped byte."""
        out = bytearray()
        for i in range(limit):
            a = (address + i) & MASK64
            page = self.pages.get(a // PAGE_SIZE)
            if page is None:
                break
            out.append(page[a % PAGE_SIZE])
        return bytes(out)

    def snapshot(self):
        return {index: bytes(page) for index, page in sorted(self.pages.items()) if any(page)}

    def copy(self):
        clone = FlatMemory(self.auto_map)
        clone.pages = {index: bytearray(page) for index, page in self.pages.items()}
        return clone


class InterpEnv:
    """Default hooks: flat memory, everything permitted, no syscalls."""

    def __init__(self, memory=None):
        self.memory = memory if memory is not None else FlatMemory()

    def fetch(self, state, address):
        return self.memory.read_available(address, MAX_INSTRUCTION)

    def decode_at(self, state, address):
        window = self.fetch(state, address)
        if not window:
            raise MemoryFault(FaultKind.UNMAPPED, address, f"fetch from unmapped 0x{address:x}")
        return X86Codec.decode(window, 0)

    def read(self, state, address, size):
        return self.memory.read(address, size)

    def write(self, state, address, data):
        self.memory.write(address, data)

    def on_transfer(self, state, source, target, kind):
        pass

    def on_pkru(self, state, old, new):
        pass

    def syscall(self, state):
        state.set(Reg.RAX, -ENOSYS)
        return None


class SimpleEnv(InterpEnv):
    """Flat memory with `exit` and `write`; used for differential runs."""

    def __init__(self, memory=None):
        super().__init__(memory)
        self.output = bytearray()
        self.syscalls = []

    def syscall(self, state):
        nr = state.get(Reg.RAX)
        args = (state.get(Reg.RDI), state.get(Reg.RSI), state.get(Reg.RDX))
        self.syscalls.append((nr,) + args)
        if nr == SYS_EXIT:
            return StepOutcome.exited(args[0] & 0xFF)
        if nr == SYS_WRITE:
            data = self.read(state, args[1], args[2])
            self.output.extend(data)
            state.set(Reg.RAX, len(data))
            return None
        state.set(Reg.RAX, -ENOSYS)
        return None


def _signed(value, bits):
    value &= (1 << bits) - 1
    return value - (1 << bits) if value >> (bits - 1) else value


def _arith(mnemonic, a, b, bits):
    mask = (1 << bits) - 1
    top = 1 << (bits - 1)
    if mnemonic is M.ADD:
        raw = a + b
        res = raw & mask
        cf = raw > mask
        of = not ((a ^ b) & top) and bool((a ^ res) & top)
    elif mnemonic in (M.SUB, M.CMP):
        res = (a - b) & mask
        cf = a < b
        of = bool((a ^ b) & top) and bool((a ^ res) & top)
    else:
        res = (a ^ b) if mnemonic is M.XOR else (a | b)
        cf = of = False
    return res, Flags(cf, res == 0, bool(res & top), of)


def flags_word(flags):
    return (FLAG_FIXED | (FLAG_CF if flags.cf else 0) | (FLAG_ZF if flags.zf else 0)
            | (FLAG_SF if flags.sf else 0) | (FLAG_OF if flags.of else 0))


def flags_from_word(word):
    return Flags(bool(word & FLAG_CF), bool(word & FLAG_ZF), bool(word & FLAG_SF),
                 bool(word & FLAG_OF))


class X86Interpreter:
    """Single-step semantics for the subset."""

    @staticmethod
    def step(state, env):
        try:
            instr = env.decode_at(state, state.rip)
        except MemoryFault as exc:
            return StepOutcome.faulted(exc.kind, exc.address, exc.detail)
        except (NotInSubset, Truncated) as exc:
            return StepOutcome.faulted(FaultKind.UNDECODABLE, state.rip, exc.message)
        try:
            return X86Interpreter.execute(state, env, instr)
        except MemoryFault as exc:
            return StepOutcome.faulted(exc.kind, exc.address, exc.detail)

    @staticmethod
    def run(state, env, max_steps=100_000):
        """Step until exit, fault or the step budget. Returns (outcome, steps)."""
        for steps in range(1, max_steps + 1):
            outcome = X86Interpreter.step(state, env)
            if not outcome.running:
                return outcome, steps
        return StepOutcome.cont(), max_steps

    @staticmethod
    def effective_address(state, mem, next_rip):
        if mem.rip:
            return (next_rip + mem.disp) & MASK64
        address = mem.disp
        if mem.base is not None:
            address += state.get(mem.base)
        if mem.index is not None:
            address += state.get(mem.index) * mem.scale
        return address & MASK64

    @staticmethod
    def _read(state, env, op, width, next_rip):
        if isinstance(op, RegOp):
            value = state.get(op.reg)
            if op.high8:
                return (value >> 8) & 0xFF
            return value & ((1 << width) - 1)
        address = X86Interpreter.effective_address(state, op, next_rip)
        return int.from_bytes(env.read(state, address, width // 8), "little")

    @staticmethod
    def _write(state, env, op, width, value, next_rip):
        value &= (1 << width) - 1
        if isinstance(op, MemOp):
            address = X86Interpreter.effective_address(state, op, next_rip)
            env.write(state, address, value.to_bytes(width // 8, "little"))
            return
        current = state.get(op.reg)
        if op.high8:
            state.set(op.reg, (current & ~0xFF00) | (value << 8))
        elif width == 8:
            state.set(op.reg, (current & ~0xFF) | value)
        else:
            # 32-bit destinations zero-extend
            state.set(op.reg, value)

    @staticmethod
    def _immediate(instr, imm):
        width = instr.width
        if instr.opcode in (b"\xb8", b"\xb0", b"\x0f\xba"):
            return imm.value
        return _signed(imm.value, imm.size * 8) & ((1 << width) - 1)

    @staticmethod
    def _source(state, env, instr, op, next_rip):
        if isinstance(op, ImmOp):
            return X86Interpreter._immediate(instr, op)
        return X86Interpreter._read(state, env, op, instr.width, next_rip)

    @staticmethod
    def _push(state, env, value):
        rsp = (state.get(Reg.RSP) - 8) & MASK64
        env.write(state, rsp, (value & MASK64).to_bytes(8, "little"))
        state.set(Reg.RSP, rsp)

    @staticmethod
    def _pop(state, env):
        rsp = state.get(Reg.RSP)
        value = int.from_bytes(env.read(state, rsp, 8), "little")
        state.set(Reg.RSP, rsp + 8)
        return value

    @staticmethod
    def _transfer(state, env, target, kind):
        target &= MASK64
        env.on_transfer(state, state.rip, target, kind)
        state.rip = target

    @staticmethod
    def _set_pkru(state, env, value):
        env.on_pkru(state, state.pkru, value & MASK32)
        state.set_pkru(value)

    @staticmethod
    def execute(state, env, instr):
        mn = instr.mnemonic
        next_rip = (state.rip + instr.total_length) & MASK64
        ops = instr.operands
        width = instr.width

        if mn in (M.ADD, M.OR, M.SUB, M.XOR, M.CMP):
            dst, src = ops
            a = X86Interpreter._read(state, env, dst, width, next_rip)
            b = X86Interpreter._source(state, env, instr, src, next_rip)
            res, flags = _arith(mn, a, b, width)
            if mn is not M.CMP:
                X86Interpreter._write(state, env, dst, width, res, next_rip)
            state.flags = flags
        elif mn is M.MOV:
            dst, src = ops
            value = X86Interpreter._source(state, env, instr, src, next_rip)
            X86Interpreter._write(state, env, dst, width, value, next_rip)
        elif mn is M.BT:
            rm, bit = ops
            value = X86Interpreter._read(state, env, rm, width, next_rip)
            offset = X86Interpreter._source(state, env, instr, bit, next_rip) % width
            state.flags.cf = bool((value >> offset) & 1)
        elif mn is M.PUSH:
            X86Interpreter._push(state, env, state.get(ops[0].reg))
        elif mn is M.POP:
            state.set(ops[0].reg, X86Interpreter._pop(state, env))
        elif mn is M.PUSHFQ:
            X86Interpreter._push(state, env, flags_word(state.flags))
        elif mn is M.POPFQ:
            state.flags = flags_from_word(X86Interpreter._pop(state, env))
        elif mn is M.NOP:
            pass
        elif mn is M.INT3:
            return StepOutcome.faulted(FaultKind.TRAP, state.rip, "int3")
        elif mn in (M.JMP, M.JE, M.JNE, M.JNC):
            taken = (mn is M.JMP or (mn is M.JE and state.flags.zf)
                     or (mn is M.JNE and not state.flags.zf)
                     or (mn is M.JNC and not state.flags.cf))
            if taken:
                X86Interpreter._transfer(state, env, next_rip + ops[0].disp, mn.value)
                return StepOutcome.cont()
        elif mn is M.CALL:
            target_op = ops[0]
            if isinstance(target_op, RelOp):
                target = next_rip + target_op.disp
            else:
                target = X86Interpreter._read(state, env, target_op, 64, next_rip)
            env.on_transfer(state, state.rip, target & MASK64, "call")
            X86Interpreter._push(state, env, next_rip)
            state.rip = target & MASK64
            return StepOutcome.cont()
        elif mn is M.RET:
            rsp = state.get(Reg.RSP)
            target = int.from_bytes(env.read(state, rsp, 8), "little")
            env.on_transfer(state, state.rip, target, "ret")
            state.set(Reg.RSP, rsp + 8)
            state.rip = target
            return StepOutcome.cont()
        elif mn is M.SYSCALL:
            state.rip = next_rip
            outcome = env.syscall(state)
            return outcome or StepOutcome.cont()
        elif mn is M.WRPKRU:
            if state.get(Reg.RCX) & MASK32 or state.get(Reg.RDX) & MASK32:
                return StepOutcome.faulted(FaultKind.WRPKRU_OPERAND, state.rip,
                                           "wrpkru requires ecx == edx == 0")
            X86Interpreter._set_pkru(state, env, state.get(Reg.RAX) & MASK32)
        elif mn is M.XRSTOR:
            if state.get(Reg.RAX) >> XRSTOR_PKRU_BIT & 1:
                area = X86Interpreter.effective_address(state, ops[0], next_rip)
                image = env.read(state, (area + XRSTOR_PKRU_OFFSET) & MASK64, 4)
                X86Interpreter._set_pkru(state, env, int.from_bytes(image, "little"))
        else:
            raise NotInSubset(f"no semantics for {mn.value}", offset=state.rip)
        state.rip = next_rip
        return StepOutcome.cont()


interp_step = X86Interpreter.step
run = X86Interpreter.run
