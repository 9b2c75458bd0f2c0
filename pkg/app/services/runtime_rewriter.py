"""Trap-and-rewrite for code whose instruction boundaries are only known at
run time.

The executable copy of a page starts out filled with one-byte traps. When
execution traps at an entry, the reserved original is disassembled from
that entry, the discovered instructions are copied into a fresh page copy,
any unsafe occurrence among them is rewritten (into a trampoline page, the
page itself never shifts) and the fresh copy is swapped in.
"""
import logging
from dataclasses import replace

from app.models.errors import LayoutOverflow, NotInSubset, RewriteError
from app.models.inspection import PAGE_SIZE, EntryPointSet
from app.models.rewrite import TRAP_BYTE, LayoutMode, RewritePolicy, RuntimePageState
from app.models.x86 import Mnemonic
from app.services.bytescan import ByteScanService
from app.services.rewriter import RewriterService, _conflict
from app.services.x86_codec import X86Codec

logger = logging.getLogger(__name__)

STOP_AFTER = (Mnemonic.JMP, Mnemonic.RET, Mnemonic.INT3)


class RuntimeRewriter:

    def __init__(self, policy=None):
        policy = replace(policy or RewritePolicy(), mode=LayoutMode.FIXED)
        self.rewriter = RewriterService(policy)
        self.policy = policy

    @staticmethod
    def prepare(base, content, entries=None, next_page=None, trampoline_base=None):
        content = bytes(content)
        if len(content) != PAGE_SIZE:
            raise RewriteError(f"runtime rewriting works on whole pages, got {len(content)} bytes")
        return RuntimePageState(base, bytearray([TRAP_BYTE]) * PAGE_SIZE, content,
                                entries if entries is not None else EntryPointSet(),
                                next_page, trampoline_base)

    def runtime_rewrite(self, state, entry):
        if entry in state.rewritten_entries:
            logger.debug("entry 0x%x already rewritten", entry)
            return state.exec_page
        offset = entry - state.base
        if not 0 <= offset < PAGE_SIZE:
            raise RewriteError(f"entry 0x{entry:x} outside page 0x{state.base:x}", offset=entry)

        if not ByteScanService.scan(state.reserve):
            state.exec_page[:] = state.reserve
            state.copied.update(range(PAGE_SIZE))
            state.rewritten_entries.add(entry)
            state.swaps += 1
            logger.info("page 0x%x holds no occurrence, original swapped in", state.base)
            return state.exec_page

        discovered = self._sweep(state, offset)
        fresh = bytearray(state.exec_page)
        for address, instr in discovered:
            o = address - state.base
            fresh[o:o + instr.total_length] = state.reserve[o:o + instr.total_length]
            state.copied.update(range(o, o + instr.total_length))
            state.listing[address] = instr

        fresh = self._rewrite(state, fresh)
        state.exec_page[:] = fresh
        state.rewritten_entries.add(entry)
        state.swaps += 1
        logger.info("entry 0x%x: copied %d instructions, page 0x%x swapped (%d plans so far)",
                    entry, len(discovered), state.base, len(state.plans))
        return state.exec_page

    @staticmethod
    def _sweep(state, offset):
        found, pos = [], offset
        while pos < PAGE_SIZE:
            instr = X86Codec.try_decode(state.reserve, pos)
            if instr is None:
                if pos == offset:
                    raise NotInSubset(f"cannot disassemble at 0x{state.base + pos:x}",
                                      offset=state.base + pos)
                break
            if any(b in state.copied for b in range(pos, pos + instr.total_length)):
                break
            found.append((state.base + pos, instr))
            pos += instr.total_length
            if instr.mnemonic in STOP_AFTER:
                break
        return found

    def _rewrite(self, state, fresh):
        barrier = set(state.rewritten_entries)
        barrier.update(state.base + o for o in range(PAGE_SIZE) if o not in state.copied)
        for _ in range(self.policy.max_passes):
            report = self.rewriter.inspector.inspect_code(fresh, state.entries, state.base)
            unsafe = report.unsafe()
            if not unsafe:
                return fresh
            listing = sorted(state.listing.items())
            plans = []
            for verdict in unsafe:
                plan = self.rewriter.plan_rewrite(fresh, verdict.occurrence, state.base, listing)
                if not any(_conflict(plan, other) for other in plans):
                    plans.append(plan)
            result = self.rewriter.apply(fresh, plans, state.base, state.entries,
                                         state.trampoline, state.trampoline_base, listing,
                                         barrier)
            if len(result.trampoline) > state.trampoline_capacity:
                raise LayoutOverflow(f"trampoline page for 0x{state.base:x} is full",
                                     offset=state.base)
            state.trampoline_base = result.trampoline_base
            state.trampoline = bytearray(result.trampoline)
            state.plans.extend(result.plans)
            sites = {r.site: r.site + r.length for r in result.trampolines}
            for plan in result.plans:
                if not any(s <= plan.start < e for s, e in sites.items()):
                    sites[plan.start] = plan.end
            for start, end in sites.items():
                for address in [a for a in state.listing if start <= a < end]:
                    del state.listing[address]
                for off, instr in X86Codec.sweep(result.code, start - state.base,
                                                 end - state.base):
                    if instr.mnemonic is not Mnemonic.INT3:
                        state.listing[state.base + off] = instr
            fresh = bytearray(result.code)
        raise RewriteError(f"page 0x{state.base:x} still unsafe after rewriting", offset=state.base)


def runtime_rewrite(state, entry, policy=None):
    return RuntimeRewriter(policy).runtime_rewrite(state, entry)
