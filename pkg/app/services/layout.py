"""Apply rewrite plans to a code buffer.

Two layouts are supported. `shift` re-emits the whole buffer the way a
compiler would: replacements grow in place, later code moves and every
direct branch is re-displaced (rel8 branches are widened when they no
longer reach). `fixed` never moves a byte: replacements that do not fit
their site are placed in a trampoline region, entered with `jmp rel32`
and left with a `jmp rel32` back to the instruction after the site.
"""
import logging
from dataclasses import replace

from app.models.errors import LayoutOverflow, NoApplicableRule, OperandRange, RelocationOverflow, RewriteError
from app.models.inspection import EntryPointSet, align_up
from app.models.rewrite import (
    TRAP_BYTE, Item, LayoutMode, Relocation, RewritePolicy, RewriteResult, TrampolineRecord,
)
from app.models.x86 import MASK64, Mnemonic
from app.services.bytescan import ByteScanService
from app.services.x86_codec import Asm, X86Codec

logger = logging.getLogger(__name__)

M = Mnemonic

JMP_REL32_LENGTH = 5
MAX_TRAMPOLINE_PADDING = 64
NOP_BYTE = 0x90


def _fits32(value):
    return -(1 << 31) <= value < (1 << 31)


def direct_target(instr, address):
    """Absolute target of a pc-relative operand, or None."""
    if not instr.is_pc_relative():
        return None
    rel = instr.relative_operand()
    disp = rel.disp if rel is not None else instr.memory_operand().disp
    return (address + instr.total_length + disp) & MASK64


def _branch(mnemonic, disp, size):
    if mnemonic is M.JMP:
        return Asm.jmp(disp, size)
    if mnemonic is M.CALL:
        return Asm.call(disp)
    return Asm.jcc(mnemonic, disp, size)


def retarget(instr, target, address, force_rel32=False):
    """Re-displace `instr` placed at `address` so it still reaches `target`."""
    rel = instr.relative_operand()
    if rel is not None:
        size = 4 if force_rel32 else rel.size
        length = _branch(instr.mnemonic, 0, size).total_length
        disp = target - (address + length)
        if size == 1 and not -128 <= disp < 128:
            raise RelocationOverflow(f"rel8 branch at 0x{address:x} cannot reach 0x{target:x}",
                                     offset=address)
        if not _fits32(disp):
            raise RelocationOverflow(f"branch at 0x{address:x} cannot reach 0x{target:x}",
                                     offset=address)
        return _branch(instr.mnemonic, disp, size)
    mem = instr.memory_operand()
    disp = target - (address + instr.total_length)
    if not _fits32(disp):
        raise RelocationOverflow(f"rip-relative operand at 0x{address:x} cannot reach 0x{target:x}",
                                 offset=address)
    ops = tuple(replace(op, disp=disp) if op is mem else op for op in instr.operands)
    return X86Codec.finalize(replace(instr, operands=ops))


def item_length(item, wide=False):
    if item.instr is None:
        return len(item.raw)
    rel = item.instr.relative_operand()
    if wide and rel is not None and rel.size == 1:
        return _branch(item.instr.mnemonic, 0, 4).total_length
    return item.instr.total_length


def encode_item(item, address, wide=False):
    if item.instr is None:
        return item.raw
    if item.target is None:
        return X86Codec.encode(item.instr)
    return X86Codec.encode(retarget(item.instr, item.target, address, wide))


def encode_items(items, address, wide=False):
    out = bytearray()
    for item in items:
        out += encode_item(item, address + len(out), wide)
    return bytes(out)


def item_for(instr, address):
    return Item(instr, target=direct_target(instr, address))


class LayoutEngine:
    """Turns a list of non-overlapping plans into rewritten bytes."""

    def __init__(self, policy=None, inspector=None):
        self.policy = policy or RewritePolicy()
        if inspector is None:
            from app.services.inspector import InspectorService
            inspector = InspectorService.instance()
        self.inspector = inspector

    def apply(self, code, plans, base=0, entries=None, trampoline=b"", trampoline_base=None,
              listing=None, barrier=()):
        entries = entries if entries is not None else EntryPointSet()
        code = bytes(code)
        if not plans:
            return RewriteResult(code, base, bytes(trampoline),
                                 trampoline_base if trampoline else None, entries=entries)
        if self.policy.mode is LayoutMode.SHIFT:
            return self._apply_shift(code, plans, base, entries, listing)
        return self._apply_fixed(code, plans, base, entries, bytes(trampoline), trampoline_base,
                                 listing, barrier)

    # ------------------------------------------------------------------
    # shift layout
    # ------------------------------------------------------------------
    def _apply_shift(self, code, plans, base, entries, listing):
        if listing is None:
            listing = [(base + off, instr) for off, instr in X86Codec.sweep(code)]
        insertions, replacements = {}, {}
        for plan in sorted(plans, key=lambda p: (p.start, p.end)):
            if plan.start == plan.end:
                insertions.setdefault(plan.start, []).append(plan)
            else:
                replacements[plan.start] = plan

        units = []
        skip_until = None
        for address, instr in listing:
            if skip_until is not None and address < skip_until:
                continue
            skip_until = None
            for plan in insertions.pop(address, ()):
                units.extend((address, item) for item in plan.items)
            plan = replacements.pop(address, None)
            if plan is not None:
                units.extend((address if i == 0 else None, item) for i, item in enumerate(plan.items))
                skip_until = plan.end
                continue
            units.append((address, item_for(instr, address)))
        if insertions or replacements:
            stray = sorted(list(insertions) + list(replacements))
            raise RewriteError(f"plan at 0x{stray[0]:x} does not start on an instruction boundary",
                               offset=stray[0])

        end = base + len(code)
        wide = [False] * len(units)
        while True:
            addresses, pos = [], base
            for i, (_, item) in enumerate(units):
                addresses.append(pos)
                pos += item_length(item, wide[i])
            reloc = {}
            for (old, _), new in zip(units, addresses):
                if old is not None:
                    reloc.setdefault(old, new)
            reloc[end] = pos
            chunks, relocations, widened = [], [], False
            for i, (old, item) in enumerate(units):
                target = None if item.target is None else self._map(item.target, reloc, base, end)
                placed = item if target is None else replace(item, target=target)
                try:
                    chunks.append(encode_item(placed, addresses[i], wide[i]))
                except RelocationOverflow:
                    if wide[i] or item.instr.relative_operand() is None:
                        raise
                    wide[i] = widened = True
                    continue
                if item.target is not None and old is not None:
                    new_disp = _disp_of(chunks[-1], item.instr)
                    old_disp = _original_disp(item.instr)
                    if new_disp != old_disp:
                        relocations.append(Relocation(addresses[i], old_disp, new_disp))
            if not widened:
                break
            logger.debug("widened rel8 branches, relaying out")

        rewritten = b"".join(chunks)
        result = RewriteResult(rewritten, base, relocation_map=reloc, relocations=relocations,
                               plans=list(plans),
                               entries=entries.remap(lambda a: reloc.get(a, a)))
        logger.info("shift layout: %d plans, %d -> %d bytes, %d relocations",
                    len(plans), len(code), len(rewritten), len(relocations))
        return result

    @staticmethod
    def _map(target, reloc, base, end):
        if target in reloc:
            return reloc[target]
        if base <= target < end:
            raise RewriteError(f"branch target 0x{target:x} is not an instruction boundary",
                               offset=target)
        return target

    # ------------------------------------------------------------------
    # fixed layout
    # ------------------------------------------------------------------
    def _apply_fixed(self, code, plans, base, entries, trampoline, trampoline_base, listing,
                     barrier):
        out = bytearray(code)
        tramp = bytearray(trampoline)
        if trampoline_base is None:
            trampoline_base = align_up(base + len(code), 16)
        barrier = set(barrier) | set(entries.addresses)
        by_end = {}
        if listing is not None:
            for address, instr in listing:
                by_end[address + instr.total_length] = (address, instr)
                target = direct_target(instr, address)
                if target is not None and instr.relative_operand() is not None:
                    barrier.add(target)
        applied, records = [], []
        done_until = base
        waiting = {plan.start: plan for plan in plans}
        for plan in sorted(plans, key=lambda p: p.start):
            if plan.start not in waiting:
                continue
            if plan.start < done_until:
                logger.debug("plan at 0x%x overlaps an earlier site, deferred", plan.start)
                continue
            del waiting[plan.start]
            record, absorbed = self._place(out, tramp, plan, base, trampoline_base, barrier,
                                           by_end, done_until, waiting)
            if record is None:
                done_until = plan.end
            else:
                records.append(record)
                done_until = record.site + record.length
            applied.append(plan)
            for other in absorbed:
                del waiting[other.start]
                applied.append(other)
        result = RewriteResult(bytes(out), base, bytes(tramp),
                               trampoline_base if tramp else None,
                               trampolines=records, plans=applied, entries=entries)
        logger.info("fixed layout: %d plans, %d trampolines, %d trampoline bytes",
                    len(applied), len(records), len(tramp))
        return result

    @staticmethod
    def _group(out, plan, base, barrier, by_end, lower, waiting):
        """Grow the site to fit a `jmp rel32`, forward first, then backward.

        A following site that has a plan of its own joins with its
        replacement rather than its original bytes.
        """
        items, end, absorbed = list(plan.items), plan.end, []
        while end - plan.start < JMP_REL32_LENGTH:
            if end in barrier:
                break
            follower = waiting.get(end)
            if follower is not None and follower.start < follower.end:
                items.extend(follower.items)
                absorbed.append(follower)
                end = follower.end
                continue
            instr = X86Codec.try_decode(out, end - base)
            if instr is None or instr.mnemonic is M.INT3:
                break
            items.append(item_for(instr, end))
            end += instr.total_length
        else:
            return plan.start, end, items, absorbed

        items, start = list(plan.items), plan.start
        while plan.end - start < JMP_REL32_LENGTH:
            previous = by_end.get(start)
            if start in barrier or previous is None or previous[0] < lower:
                raise NoApplicableRule(f"no room for a trampoline jump at 0x{plan.start:x}",
                                       offset=plan.start)
            address, instr = previous
            items.insert(0, item_for(instr, address))
            start = address
        return start, plan.end, items, []

    def _place(self, out, tramp, plan, base, trampoline_base, barrier, by_end, lower, waiting):
        site_length = plan.end - plan.start
        try:
            body = encode_items(plan.items, plan.start)
        except (RelocationOverflow, OperandRange):
            body = None
        if body is not None and len(body) <= site_length:
            patched = body + bytes([NOP_BYTE]) * (site_length - len(body))
            if self._site_clean(out, plan.start - base, patched):
                out[plan.start - base:plan.end - base] = patched
                return None, []

        start, end, items, absorbed = self._group(out, plan, base, barrier, by_end, lower,
                                                  waiting)
        group_length = end - start
        for pad in range(MAX_TRAMPOLINE_PADDING):
            address = trampoline_base + len(tramp) + pad
            piece = encode_items(items, address, wide=True)
            back = Asm.jmp(end - (address + len(piece) + JMP_REL32_LENGTH))
            piece += X86Codec.encode(back)
            jump_out = Asm.jmp(address - (start + JMP_REL32_LENGTH))
            site = X86Codec.encode(jump_out) + bytes([TRAP_BYTE]) * (group_length - JMP_REL32_LENGTH)
            padding = bytes([TRAP_BYTE]) * pad
            if not self._site_clean(out, start - base, site):
                continue
            if not self._piece_clean(bytes(tramp[-2:]) + padding + piece):
                continue
            out[start - base:end - base] = site
            tramp += padding + piece
            return TrampolineRecord(start, address, jump_out.relative_operand().disp,
                                    back.relative_operand().disp, group_length), absorbed
        raise LayoutOverflow(f"no clean trampoline placement for site 0x{plan.start:x}",
                             offset=plan.start)

    @staticmethod
    def _site_clean(out, offset, patch):
        lo = max(0, offset - 2)
        window = bytes(out[lo:offset]) + patch + bytes(out[offset + len(patch):offset + len(patch) + 2])
        end = offset - lo + len(patch)
        return not any(occ.offset < end and occ.end > offset - lo
                       for occ in ByteScanService.scan(window))

    def _piece_clean(self, window):
        return self.inspector.inspect_code(window, EntryPointSet()).passed


def _original_disp(instr):
    rel = instr.relative_operand()
    return rel.disp if rel is not None else instr.memory_operand().disp


def _disp_of(encoded, instr):
    decoded = X86Codec.decode(encoded, 0)
    return _original_disp(decoded)


def apply(code, plans, base=0, policy=None, entries=None, trampoline=b"", trampoline_base=None,
          listing=None, barrier=()):
    return LayoutEngine(policy).apply(code, plans, base, entries, trampoline, trampoline_base,
                                      listing, barrier)
