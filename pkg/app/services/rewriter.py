"""Rewrite rules for unsafe WRPKRU/XRSTOR occurrences.

Overlap classes and the rules tried for each:

  OpcodeExact       1  append the PKRU check (or the XRSTOR bit-9 guard)
  ModRM             2  swap the register for a free one
                    3  same, spilling the scratch register with push/pop
  Displacement      5  move a pc-relative instruction so its displacement changes
                    4  move part of the displacement into a scratch index register
  Immediate         6  build the constant in a register, use the register form
                    7  apply an associative operation twice
  CrossInstruction     insert a one-byte nop between the instructions

Candidates are tried in preference order and the first replacement that
inspects clean wins.
"""
import bisect
import logging
from dataclasses import replace

from app.models.errors import NoApplicableRule, NotInSubset, OperandRange, RewriteError
from app.models.inspection import EntryPointSet, OccurrenceKind
from app.models.rewrite import (
    NOP_INSERTION, FieldOverlap, Item, LayoutMode, OverlapClass, RewritePlan, RewritePolicy,
    RewriteResult,
)
from app.models.x86 import Field, MemOp, Mnemonic, Reg, RegOp
from app.services.gates import XRSTOR_GUARD, safe_b_guard
from app.services.inspector import InspectorService
from app.services.layout import LayoutEngine, direct_target, encode_items, item_for, item_length
from app.services.x86_codec import Asm, X86Codec

logger = logging.getLogger(__name__)

M = Mnemonic

SCRATCH_ORDER = (Reg.RBX, Reg.RSI, Reg.RDI, Reg.RCX, Reg.RDX, Reg.RBP, Reg.R8, Reg.R9,
                 Reg.R10, Reg.R11, Reg.R12, Reg.R13, Reg.R14, Reg.R15, Reg.RAX)
IMPLICIT_REGISTERS = {
    M.WRPKRU: {Reg.RAX, Reg.RCX, Reg.RDX},
    M.XRSTOR: {Reg.RAX, Reg.RDX},
    M.SYSCALL: {Reg.RAX, Reg.RCX, Reg.RDX, Reg.RSI, Reg.RDI, Reg.R8, Reg.R9, Reg.R10, Reg.R11},
}
STACK_USERS = (M.PUSH, M.POP, M.CALL, M.RET, M.PUSHFQ, M.POPFQ)
FLAG_WRITERS = (M.ADD, M.OR, M.SUB, M.XOR, M.CMP)
ASSOCIATIVE = (M.ADD, M.SUB, M.XOR, M.OR)
SHIFT_SEARCH_LIMIT = 512

PREFERENCE = {5: 0, 6: 1, 4: 1, 2: 2, 3: 3, 7: 4}


def _signed(value, bits):
    value &= (1 << bits) - 1
    return value - (1 << bits) if value >> (bits - 1) else value


def _fits32(value):
    return -(1 << 31) <= value < (1 << 31)


def used_registers(instr):
    regs = set()
    for op in instr.operands:
        if isinstance(op, RegOp):
            regs.add(Reg(op.reg))
        elif isinstance(op, MemOp):
            regs.update(Reg(r) for r in op.registers())
    if instr.opcode in (b"\x05", b"\x0d", b"\x2d", b"\x35", b"\x3d"):
        regs.add(Reg.RAX)
    regs |= IMPLICIT_REGISTERS.get(instr.mnemonic, set())
    if instr.mnemonic in STACK_USERS:
        regs.add(Reg.RSP)
    return regs


def _with_disp(mem, disp):
    """`mem` with a new displacement in its smallest encoding."""
    if mem.rip or mem.base is None:
        return replace(mem, disp=disp, disp_size=4, force_sib=False)
    if disp == 0 and (mem.base & 7) != 5:
        size = 0
    elif -128 <= disp < 128:
        size = 1
    else:
        size = 4
    return replace(mem, disp=disp, disp_size=size, force_sib=False)


def _swap_operand(instr, old, new):
    ops = tuple(new if op is old else op for op in instr.operands)
    return X86Codec.finalize(replace(instr, operands=ops, rex=None, field_extents=(), total_length=0))


def _mov_reg(dst, src):
    return Asm.mov(RegOp(dst, 64), RegOp(src, 64), 64)


def _writes_destination(instr):
    return instr.mnemonic not in (M.CMP, M.BT)


def _split_candidates(value, bits):
    """Pairs (c1, c2) with c1 + c2 == value modulo 2**bits."""
    mask = (1 << bits) - 1
    for shift in (0, 8, 16, 24):
        for small in (1, 2, 0x10, 0x11, 0x80):
            for c2 in (small << shift, -(small << shift)):
                yield _signed(value - c2, bits), _signed(c2, bits)


def _combine_candidates(mnemonic, value, bits):
    """Pairs whose two-step application equals one application of `value`."""
    if mnemonic in (M.ADD, M.SUB):
        yield from _split_candidates(value, bits)
        return
    mask = (1 << bits) - 1
    for shift in (0, 8, 16, 24):
        for part in (0xFF, 0x0F, 0xF0, 0x01, 0x80):
            m = part << shift
            if mnemonic is M.XOR:
                yield _signed(value ^ m, bits), _signed(m, bits)
            else:
                low = value & m
                if low:
                    yield _signed(value & ~m & mask, bits), _signed(low, bits)


class _Site:
    """One instruction containing an occurrence, with the planning context."""

    def __init__(self, address, instr, occ, policy, code_range):
        self.address = address
        self.instr = instr
        self.occ = occ
        self.policy = policy
        self.code_range = code_range

    @property
    def end(self):
        return self.address + self.instr.total_length

    def keep(self, instr):
        """`instr` as an item that still reaches the site's rip-relative target."""
        mem = instr.memory_operand()
        if mem is not None and mem.rip:
            return Item(instr, target=direct_target(self.instr, self.address))
        return Item(instr)

    def scratch_options(self):
        used = used_registers(self.instr) | {Reg.RSP}
        declared = [Reg(r) for r in self.policy.free_registers]
        for reg in declared:
            if reg not in used and reg is not Reg.RBP:
                yield reg, False
        for reg in SCRATCH_ORDER:
            if reg not in used and reg not in declared:
                yield reg, True

    def immediate_value(self):
        instr = self.instr
        imm = instr.immediate_operand()
        if instr.opcode == b"\xb8":
            return imm.value
        return _signed(imm.value, imm.size * 8) & ((1 << instr.width) - 1)


class RewriterService:
    """Plans and applies rewrites; see the module docstring for the rules."""

    def __init__(self, policy=None, inspector=None):
        self.policy = policy or RewritePolicy()
        if inspector is None:
            inspector = (InspectorService.instance()
                         if self.policy.disallow == InspectorService.instance().disallow
                         else InspectorService(disallow=self.policy.disallow))
        self.inspector = inspector
        self.layout = LayoutEngine(self.policy, self.inspector)

    # ------------------------------------------------------------------
    # overlap
    # ------------------------------------------------------------------
    @staticmethod
    def listing_for(code, base=0):
        return [(base + off, instr) for off, instr in X86Codec.sweep(code)]

    @staticmethod
    def covering(listing, occ):
        starts = [address for address, _ in listing]
        i = bisect.bisect_right(starts, occ.offset) - 1
        hits = []
        while 0 <= i < len(listing) and listing[i][0] < occ.end:
            address, instr = listing[i]
            if address + instr.total_length > occ.offset:
                hits.append((address, instr))
            i += 1
        if (not hits or hits[0][0] > occ.offset
                or hits[-1][0] + hits[-1][1].total_length < occ.end):
            raise NotInSubset(f"occurrence at 0x{occ.offset:x} is not covered by decoded "
                              f"instructions", offset=occ.offset)
        for (a, i1), (b, _) in zip(hits, hits[1:]):
            if a + i1.total_length != b:
                raise NotInSubset(f"gap in disassembly near 0x{occ.offset:x}", offset=occ.offset)
        return hits

    def locate_overlap(self, code, occ, base=0, listing=None):
        if listing is None:
            listing = self.listing_for(code, base)
        hits = self.covering(listing, occ)
        if len(hits) > 1:
            return FieldOverlap(OverlapClass.CROSS_INSTRUCTION, tuple(hits))
        address, instr = hits[0]
        rel = occ.offset - address
        if instr.mnemonic is M.WRPKRU or (instr.mnemonic is M.XRSTOR
                                          and occ.kind is OccurrenceKind.XRSTOR
                                          and rel == instr.extent(Field.OPCODE)[1] - 2):
            return FieldOverlap(OverlapClass.OPCODE_EXACT, tuple(hits), (Field.OPCODE,))
        fields = tuple(f for f, s, e in instr.field_extents if s < rel + 3 and e > rel)
        if fields == (Field.SIB,):
            raise RewriteError("occurrence overlaps only a SIB byte", offset=occ.offset)
        if Field.MODRM in fields:
            overlap = OverlapClass.MODRM
        elif Field.DISPLACEMENT in fields:
            overlap = OverlapClass.DISPLACEMENT
        elif Field.IMMEDIATE in fields:
            overlap = OverlapClass.IMMEDIATE
        else:
            raise NoApplicableRule(f"occurrence at 0x{occ.offset:x} overlaps only opcode bytes "
                                   f"of {instr}", offset=occ.offset)
        return FieldOverlap(overlap, tuple(hits), fields)

    # ------------------------------------------------------------------
    # planning
    # ------------------------------------------------------------------
    def plan_rewrite(self, code, occ, base=0, listing=None):
        if listing is None:
            listing = self.listing_for(code, base)
        overlap = self.locate_overlap(code, occ, base, listing)
        if overlap.overlap is OverlapClass.CROSS_INSTRUCTION:
            return self._plan_nop(overlap, occ)
        address, instr = overlap.first
        site = _Site(address, instr, occ, self.policy, (base, base + len(code)))
        for rule, scratch, spilled, build in self._candidates(overlap, site):
            try:
                items, clobbered = build()
            except (NoApplicableRule, OperandRange):
                continue
            replacement = self._check(self._laid_out(items, site), address)
            if replacement is None:
                continue
            plan = RewritePlan(rule, occ, address, site.end, tuple(items), replacement,
                               scratch, ("push/pop" if spilled else "free") if scratch is not None
                               else None, (), clobbered)
            logger.debug("occurrence 0x%x (%s in %s): %s", occ.offset, overlap.overlap.value,
                         instr, plan.label)
            return plan
        raise NoApplicableRule(f"no rewrite rule applies to {instr} at 0x{address:x}",
                               offset=occ.offset)

    def _laid_out(self, items, site):
        """`items` as the shift layout will emit them: targets in the code past
        the site move by the growth of the replacement."""
        if self.policy.mode is not LayoutMode.SHIFT:
            return items
        hi = site.code_range[1]
        growth = sum(item_length(i) for i in items) - site.instr.total_length
        return [replace(i, target=i.target + growth)
                if i.target is not None and site.end <= i.target < hi else i for i in items]

    def _check(self, items, address):
        """Bytes of the replacement if it inspects clean, else None."""
        if self.policy.mode is LayoutMode.FIXED:
            chunks, current = [], []
            for item in items:
                if item.target is not None:
                    chunks.append(current)
                    current = []
                else:
                    current.append(item)
            chunks.append(current)
            for chunk in chunks:
                if not self.inspector.inspect_code(encode_items(chunk, address),
                                                   EntryPointSet()).passed:
                    return None
            return b"".join(encode_items(chunk, address) for chunk in chunks)
        encoded = encode_items(items, address)
        if not self.inspector.inspect_code(encoded, EntryPointSet(), address).passed:
            return None
        return encoded

    def _plan_nop(self, overlap, occ):
        (first_address, first), second = overlap.instructions[0], overlap.instructions[1]
        boundary = second[0]
        nop = Item(Asm.nop())
        if self.policy.mode is LayoutMode.SHIFT:
            return RewritePlan(NOP_INSERTION, occ, boundary, boundary, (nop,), b"\x90",
                               insert_at=(boundary,))
        items = (item_for(first, first_address), nop)
        return RewritePlan(NOP_INSERTION, occ, first_address, boundary, items,
                           X86Codec.encode(first) + b"\x90", insert_at=(boundary,))

    def _candidates(self, overlap, site):
        instr = site.instr
        fields = set(overlap.fields)
        found = []

        if overlap.overlap is OverlapClass.OPCODE_EXACT:
            return [(1, None, False, lambda: self._rule1(site))]

        if Field.DISPLACEMENT in fields and instr.is_pc_relative():
            found.append((5, None, False, lambda: self._rule5(site)))
        if Field.IMMEDIATE in fields and instr.immediate_operand() is not None:
            if self.policy.allow_flag_clobber and instr.mnemonic in ASSOCIATIVE:
                found.append((7, None, False, lambda: self._rule7(site)))
            if instr.mnemonic is M.MOV and isinstance(instr.operands[0], RegOp):
                found.append((6, None, False, lambda: self._rule6_in_place(site)))
        for scratch, spilled in site.scratch_options():
            if Field.IMMEDIATE in fields and instr.immediate_operand() is not None:
                found.append((6, scratch, spilled,
                              lambda s=scratch, p=spilled: self._rule6(site, s, p)))
            if Field.DISPLACEMENT in fields and instr.memory_operand() is not None \
                    and not instr.memory_operand().rip:
                found.append((4, scratch, spilled,
                              lambda s=scratch, p=spilled: self._rule4(site, s, p)))
            if fields & {Field.MODRM, Field.SIB, Field.DISPLACEMENT}:
                rule = 3 if spilled else 2
                found.append((rule, scratch, spilled,
                              lambda s=scratch, p=spilled: self._register_swap(site, s, p)))

        def rank(candidate):
            rule, _, spilled, _ = candidate
            score = PREFERENCE[rule]
            if spilled and rule in (4, 6):
                score = PREFERENCE[3]
            return score

        return sorted(found, key=rank)

    # ------------------------------------------------------------------
    # rules
    # ------------------------------------------------------------------
    def _rule1(self, site):
        guard = (safe_b_guard(self.policy.disallow) if site.instr.mnemonic is M.WRPKRU
                 else XRSTOR_GUARD)
        return [item_for(site.instr, site.address), Item(raw=guard)], True

    def _rule5(self, site):
        instr, address = site.instr, site.address
        target = direct_target(instr, address)
        moved = Item(instr, target=target)
        if self.policy.mode is LayoutMode.FIXED:
            return [moved], False
        nop = Item(Asm.nop())
        forward = site.code_range[0] <= target < site.code_range[1] and target >= site.end
        for k in range(1, SHIFT_SEARCH_LIMIT):
            items = [moved] + [nop] * k if forward else [nop] * k + [moved]
            if self._check(self._laid_out(items, site), address) is not None:
                return items, False
        raise NoApplicableRule(f"no padding clears the displacement of {instr}",
                               offset=address)

    @staticmethod
    def _bracket(body, scratch, spilled, save_flags=False, after=()):
        """push scratch; [pushfq]; body; [popfq]; after; pop scratch."""
        items = []
        if spilled:
            items.append(Asm.push(scratch))
        if save_flags:
            items.append(Asm.pushfq())
        items.extend(body)
        if save_flags:
            items.append(Asm.popfq())
        items.extend(after)
        if spilled:
            items.append(Asm.pop(scratch))
        return [i if isinstance(i, Item) else Item(i) for i in items]

    @staticmethod
    def _rsp_adjusted(mem, delta):
        if mem is not None and mem.base == Reg.RSP and delta:
            return _with_disp(mem, mem.disp + delta)
        return mem

    def _register_swap(self, site, scratch, spilled):
        instr = site.instr
        if spilled and instr.mnemonic is M.CALL:
            raise NoApplicableRule("cannot spill around a call", offset=site.address)
        delta = 8 if spilled else 0
        ops = instr.operands
        reg_field = None
        if instr.opcode in (b"\x89", b"\x0f\xa3") or (len(instr.opcode) == 1
                                                      and instr.opcode[0] & 0xC7 == 0x01):
            reg_field = ops[1]
        elif instr.opcode == b"\x8b" or (len(instr.opcode) == 1 and instr.opcode[0] & 0xC7 == 0x03):
            reg_field = ops[0]
        mem = instr.memory_operand()

        if reg_field is not None and not reg_field.high8:
            swapped = RegOp(scratch, reg_field.width)
            body_instr = _swap_operand(instr, reg_field, swapped)
            if mem is not None:
                body_instr = _swap_operand(body_instr, body_instr.memory_operand(),
                                           self._rsp_adjusted(mem, delta))
            body_item = site.keep(body_instr)
            is_dest = reg_field is ops[0] and _writes_destination(instr)
            body = []
            if not (instr.mnemonic is M.MOV and is_dest):
                body.append(_mov_reg(scratch, reg_field.reg))
            body.append(body_item)
            after = [_mov_reg(reg_field.reg, scratch)] if is_dest else []
            return self._bracket(body, scratch, spilled, after=after), False

        rm = ops[0]
        if isinstance(rm, RegOp):
            swapped = RegOp(scratch, rm.width)
            body = []
            dest = _writes_destination(instr) and instr.mnemonic is not M.CALL
            if not (instr.mnemonic is M.MOV):
                body.append(_mov_reg(scratch, rm.reg))
            body.append(_swap_operand(instr, rm, swapped))
            after = [_mov_reg(rm.reg, scratch)] if dest else []
            return self._bracket(body, scratch, spilled, after=after), False
        if isinstance(rm, MemOp) and rm.base is not None and not rm.rip:
            index = scratch if rm.index == rm.base else rm.index
            disp = rm.disp + (delta if rm.base == Reg.RSP else 0)
            new_mem = _with_disp(replace(rm, base=scratch, index=index), disp)
            body = [_mov_reg(scratch, rm.base), _swap_operand(instr, rm, new_mem)]
            return self._bracket(body, scratch, spilled), False
        raise NoApplicableRule(f"no register to swap in {instr}", offset=site.address)

    def _rule4(self, site, scratch, spilled):
        instr = site.instr
        if spilled and instr.mnemonic is M.CALL:
            raise NoApplicableRule("cannot spill around a call", offset=site.address)
        mem = instr.memory_operand()
        delta = 8 if spilled else 0
        disp = mem.disp + (delta if mem.base == Reg.RSP else 0)
        for d1, d2 in _split_candidates(disp, 32):
            if mem.index is None:
                if mem.base is None:
                    new_mem = _with_disp(replace(mem, base=scratch), d1)
                else:
                    new_mem = _with_disp(replace(mem, index=scratch, scale=1), d1)
                body = [Asm.mov(scratch, d2, 64), _swap_operand(instr, mem, new_mem)]
                items = self._bracket(body, scratch, spilled)
                save_flags = False
            else:
                compute = [_mov_reg(scratch, mem.index)]
                for _ in range(mem.scale.bit_length() - 1):
                    compute.append(Asm.add(scratch, RegOp(scratch, 64), 64))
                compute.append(Asm.add(scratch, d2, 64))
                if mem.base is None:
                    new_mem = _with_disp(replace(mem, base=scratch, index=None, scale=1), d1)
                else:
                    new_mem = _with_disp(replace(mem, index=scratch, scale=1), d1)
                items = self._bracket(compute, scratch, spilled, save_flags=True,
                                      after=[_swap_operand(instr, mem, new_mem)])
                save_flags = True
            if self._check(self._laid_out(items, site), site.address) is not None:
                return items, False
        raise NoApplicableRule(f"no displacement split clears {instr}", offset=site.address)

    def _constant_pairs(self, site):
        width = site.instr.width
        value = site.immediate_value()
        for c1, c2 in _split_candidates(value, width):
            if _fits32(c2):
                yield c1, c2

    def _rule6_in_place(self, site):
        """mov reg, imm: build the value in the destination itself."""
        instr = site.instr
        dst = instr.operands[0]
        width = instr.width
        if width == 8 or dst.reg == Reg.RSP:
            raise NoApplicableRule(f"cannot rebuild {dst} in place", offset=site.address)
        for c1, c2 in self._constant_pairs(site):
            body = [Asm.mov(dst.reg, c1, width), Asm.add(dst.reg, c2, width)]
            items = [Item(i) for i in [Asm.pushfq()] + body + [Asm.popfq()]]
            if self._check(self._laid_out(items, site), site.address) is not None:
                return items, False
        raise NoApplicableRule(f"no constant split clears {instr}", offset=site.address)

    def _rule6(self, site, scratch, spilled):
        instr = site.instr
        width = instr.width
        dst = instr.operands[0]
        if instr.mnemonic not in FLAG_WRITERS + (M.MOV,):
            raise NoApplicableRule(f"register form unavailable for {instr}", offset=site.address)
        save_flags = instr.mnemonic is M.MOV
        delta = 8 if spilled else 0
        if isinstance(dst, MemOp):
            dst = self._rsp_adjusted(dst, delta)
        src = RegOp(scratch, width)
        if instr.mnemonic is M.MOV:
            op = Asm.mov(dst, src, width)
        else:
            op = Asm.alu_forced(instr.mnemonic, dst, src, width)
        op = site.keep(op)
        for c1, c2 in self._constant_pairs(site):
            compute = [Asm.mov(scratch, c1, width), Asm.add(scratch, c2, width)]
            if save_flags:
                items = self._bracket(compute, scratch, spilled, save_flags=True, after=[op])
            else:
                items = self._bracket(compute + [op], scratch, spilled)
            if self._check(self._laid_out(items, site), site.address) is not None:
                return items, False
        raise NoApplicableRule(f"no constant split clears {instr}", offset=site.address)

    def _rule7(self, site):
        instr = site.instr
        width = instr.width
        dst = instr.operands[0]
        value = site.immediate_value()
        for c1, c2 in _combine_candidates(instr.mnemonic, value, width):
            if width == 64 and not (_fits32(c1) and _fits32(c2)):
                continue
            try:
                items = [site.keep(Asm.alu(instr.mnemonic, dst, c1, width)),
                         site.keep(Asm.alu(instr.mnemonic, dst, c2, width))]
            except OperandRange:
                continue
            if self._check(self._laid_out(items, site), site.address) is not None:
                return items, True
        raise NoApplicableRule(f"no associative split clears {instr}", offset=site.address)

    # ------------------------------------------------------------------
    # driver
    # ------------------------------------------------------------------
    def apply(self, code, plans, base=0, entries=None, trampoline=b"", trampoline_base=None,
              listing=None, barrier=()):
        return self.layout.apply(code, plans, base, entries, trampoline, trampoline_base, listing,
                                 barrier)

    def rewrite_all(self, code, entries=None, base=0, trampoline_base=None):
        """Scan, classify, plan and apply until inspection passes."""
        entries = entries if entries is not None else EntryPointSet()
        current = RewriteResult(bytes(code), base, trampoline_base=trampoline_base, entries=entries)
        relocation_map = {}
        for n in range(self.policy.max_passes):
            report = self.inspector.inspect_code(current.code, current.entries, base)
            unsafe = report.unsafe()
            if not unsafe:
                current.relocation_map = relocation_map
                current.report = self.inspector.inspect_code(current.combined(), current.entries,
                                                             base)
                leftover = current.report.unsafe()
                if leftover:
                    raise RewriteError(f"rewritten output still holds {len(leftover)} unsafe "
                                       f"occurrence(s)", offset=leftover[0].occurrence.offset)
                logger.info("rewrite converged after %d passes: %s", n, current.rule_histogram())
                return current
            listing = self.listing_for(current.code, base)
            plans = []
            for verdict in unsafe:
                plan = self.plan_rewrite(current.code, verdict.occurrence, base, listing)
                if not any(_conflict(plan, other) for other in plans):
                    plans.append(plan)
            step = self.apply(current.code, plans, base, current.entries, current.trampoline,
                              current.trampoline_base, listing)
            if step.relocation_map:
                relocation_map = ({old: step.relocation_map.get(new, new)
                                   for old, new in relocation_map.items()}
                                  if relocation_map else dict(step.relocation_map))
            current = RewriteResult(step.code, base, step.trampoline, step.trampoline_base,
                                    relocation_map, current.relocations + step.relocations,
                                    current.trampolines + step.trampolines,
                                    current.plans + step.plans, step.entries)
        raise RewriteError(f"rewriting did not converge within {self.policy.max_passes} passes")


def _conflict(a, b):
    """Whether two plans touch the same bytes (insertions are points)."""
    if a.start == a.end and b.start == b.end:
        return a.start == b.start
    if a.start == a.end:
        return b.start < a.start < b.end
    if b.start == b.end:
        return a.start < b.start < a.end
    return a.start < b.end and b.start < a.end


def locate_overlap(code, occ, base=0, listing=None):
    return RewriterService().locate_overlap(code, occ, base, listing)


def plan_rewrite(code, occ, policy=None, base=0, listing=None):
    return RewriterService(policy).plan_rewrite(code, occ, base, listing)


def rewrite_all(code, entries=None, policy=None, base=0):
    return RewriterService(policy).rewrite_all(code, entries, base)
