"""Abstract machine for processes isolated with memory protection keys.

PKRU follows the grant convention throughout: bit 2i set allows reads of
domain i, bit 2i+1 set allows writes. Hardware uses the inverse (set bits
deny); `hardware_pkru` is the only place that translates.

Syscalls take the number in rax and arguments in rdi, rsi, rdx, r10:

    1    write(fd, buf, len)
    9    mmap(addr, len, prot)
    10   mprotect(addr, len, prot)
    13   rt_sigaction(signo, handler)
    15   rt_sigreturn()
    60   exit(code)                 ends the whole process
    329  pkey_mprotect(addr, len, prot, pkey)
    512  alloc(size)                served by domain_alloc
"""
import copy
import logging
import os
import random

from dotenv import load_dotenv

from app.models.errors import ConfigError, ErimError, PoolExhausted, StartupError
from app.models.image import PF_W, PF_X
from app.models.inspection import PAGE_SIZE, EntryPointSet, VerdictClass, align_up
from app.models.rewrite import TRAP_BYTE, RewritePolicy
from app.models.sim import (
    MT, MU, NUM_DOMAINS, PERM_R, PERM_W, PERM_X, Access, DomainConfig, InspectionMode,
    IsolationMode, PageState, Pool, SimPage, SimThread, SweepReport, TraceEvent, Violation,
    perm_string,
)
from app.models.x86 import MASK32, MASK64, MachineState, Reg
from app.services.inspector import InspectorService
from app.services.runtime_rewriter import RuntimeRewriter
from app.services.x86_interp import (
    FaultKind, InterpEnv, MemoryFault, OutcomeKind, StepOutcome, X86Interpreter,
)
from app.services.x86_codec import MAX_INSTRUCTION

load_dotenv()

logger = logging.getLogger(__name__)

SYS_WRITE = 1
SYS_MMAP = 9
SYS_MPROTECT = 10
SYS_RT_SIGACTION = 13
SYS_RT_SIGRETURN = 15
SYS_EXIT = 60
SYS_PKEY_MPROTECT = 329
SYS_ALLOC = 512

EPERM = 1
ENOMEM = 12
EACCES = 13
EFAULT = 14
EINVAL = 22
ENOSYS = 38

PROT_READ = 1
PROT_WRITE = 2
PROT_EXEC = 4

MMAP_BASE = 0x10_0000_0000
POOL_BASE = 0x20_0000_0000
POOL_STRIDE = 0x1_0000_0000
TRUSTED_STACK_BASE = 0x30_0000_0000
TRAMPOLINE_BASE = 0x40_0000_0000
STACK_TOP = 0x7FF0_0000_0000
STACK_STRIDE = 0x10_0000
STACK_SIZE = 4 * PAGE_SIZE
SIGNAL_RED_ZONE = 128

SIGNAL_PKRU = 0x3

INTERCEPTION_MECHANISMS = ("lsm", "seccomp-ptrace", "seccomp-bpf", "none")


def pkru_allows(pkru, domain, access):
    if not 0 <= domain < NUM_DOMAINS:
        raise ConfigError(f"domain {domain} out of range")
    bit = 2 * domain + (1 if Access(access) is Access.WRITE else 0)
    return bool(pkru >> bit & 1)


def pkru_for(domains, readable=()):
    value = 0
    for domain in domains:
        value |= 3 << (2 * domain)
    for domain in readable:
        value |= 1 << (2 * domain)
    return value


def hardware_pkru(pkru):
    """Translate to the set-bit-denies encoding the CPU uses."""
    return ~pkru & MASK32


class _MachineEnv(InterpEnv):
    """Routes one thread's fetches, accesses and syscalls through the machine."""

    def __init__(self, machine, thread):
        super().__init__(None)
        self.machine = machine
        self.thread = thread
        self.pkru_changes = []

    def fetch(self, state, address):
        return self.machine.fetch_window(address)

    def read(self, state, address, size):
        return self.machine.access(state, address, size, Access.READ)

    def write(self, state, address, data):
        self.machine.access(state, address, len(data), Access.WRITE, data)

    def on_pkru(self, state, old, new):
        self.pkru_changes.append((old, new))

    def syscall(self, state):
        args = (state.get(Reg.RDI), state.get(Reg.RSI), state.get(Reg.RDX), state.get(Reg.R10))
        result = self.machine.sim_syscall(self.thread, state.get(Reg.RAX), args)
        if isinstance(result, StepOutcome):
            return result
        if result is not None:
            state.set(Reg.RAX, result)
        return None


class Machine:
    """Pages tagged with domains, threads with their own PKRU, syscall
    interception and on-demand inspection, driven one instruction at a time."""

    def __init__(self, config=None, seed=None, inspection=None, interception=None,
                 rewrite_on_fault=False, private_stacks=False, check=True, thread_pkru=None,
                 record_and_continue=False, trace_steps=True, max_quantum=4, policy=None):
        self.config = (config or DomainConfig()).validate()
        if seed is None:
            seed = int(os.getenv('ERIM_FORGE_SEED', 0))
        self.seed = seed
        self.rng = random.Random(seed)
        self.inspection = InspectionMode(inspection or os.getenv('ERIM_INSPECTION_MODE', 'eager'))
        interception = interception or os.getenv('ERIM_INTERCEPTION', 'lsm')
        if interception not in INTERCEPTION_MECHANISMS:
            raise ConfigError(f"unknown interception mechanism {interception!r}")
        self.interception = interception
        self.rewrite_on_fault = rewrite_on_fault
        self.private_stacks = private_stacks
        self.check = check
        self.record_and_continue = record_and_continue
        self.trace_steps = trace_steps
        self.max_quantum = max_quantum

        readable = (range(1, self.config.components)
                    if self.config.mode is IsolationMode.INTEGRITY_ONLY else ())
        self.untrusted_pkru = pkru_for({MU}, readable)
        self.trusted_pkru = self.domain_pkru(MT)
        self.disallow = self.untrusted_pkru
        self.thread_pkru = self.untrusted_pkru if thread_pkru is None else thread_pkru
        self.inspector = (InspectorService.instance()
                          if InspectorService.instance().disallow == self.disallow
                          else InspectorService(disallow=self.disallow))
        self.policy = policy or RewritePolicy(disallow=self.disallow)

        self.pages = {}
        self._owned = set()
        self.vetted = set()
        self.pools = {}
        self.threads = []
        self.entries = EntryPointSet()
        self.trusted_ranges = []
        self.exit_gates = set()
        self.handlers = {}
        self.denied_syscalls = set()
        self.intercepting = False
        self.initialized = False
        self._next_mmap = MMAP_BASE
        self._next_trampoline = TRAMPOLINE_BASE

        self.steps = 0
        self.status = "running"
        self.exit_code = None
        self.fault = None
        self.output = bytearray()
        self.syscall_log = []
        self.trace = []
        self.violations = []
        self.exit_gate_hits = 0
        self._current = None
        self._quantum = 0
        self._accesses = []

    # ------------------------------------------------------------------
    # PKRU
    # ------------------------------------------------------------------
    def domain_pkru(self, domain):
        readable = (range(1, self.config.components)
                    if self.config.mode is IsolationMode.INTEGRITY_ONLY else ())
        return pkru_for(self.config.reachable(domain), readable)

    @staticmethod
    def pkru_allows(pkru, domain, access):
        return pkru_allows(pkru, domain, access)

    @staticmethod
    def caller_trusted(state):
        return pkru_allows(state.pkru, MT, Access.WRITE)

    def is_trusted_pc(self, pc):
        return any(lo <= pc < hi for lo, hi in self.trusted_ranges)

    # ------------------------------------------------------------------
    # memory
    # ------------------------------------------------------------------
    def _own(self, index):
        if index not in self._owned:
            self.pages[index] = self.pages[index].clone()
            self._owned.add(index)
        return self.pages[index]

    def map_pages(self, address, size, perms=PERM_R | PERM_W, domain=MU,
                  state=PageState.NORMAL, fill=0):
        first = address // PAGE_SIZE
        last = (address + max(size, 1) - 1) // PAGE_SIZE
        for index in range(first, last + 1):
            self.pages[index] = SimPage(index, bytearray([fill]) * PAGE_SIZE, domain, perms, state)
            self._owned.add(index)
        return list(range(first, last + 1))

    def load_bytes(self, address, data):
        """Place `data` without permission checks (loader and scenario setup)."""
        for i in range(0, len(data)):
            a = address + i
            self._own(a // PAGE_SIZE).data[a % PAGE_SIZE] = data[i]

    def peek(self, address, size):
        out = bytearray()
        for i in range(size):
            a = address + i
            page = self.pages.get(a // PAGE_SIZE)
            if page is None:
                raise MemoryFault(FaultKind.UNMAPPED, a, f"unmapped address 0x{a:x}")
            out.append(page.content()[a % PAGE_SIZE])
        return bytes(out)

    def fetch_window(self, address):
        out = bytearray()
        while len(out) < MAX_INSTRUCTION:
            a = (address + len(out)) & MASK64
            page = self.pages.get(a // PAGE_SIZE)
            if page is None or not page.executable or page.state is PageState.PENDING:
                if not out:
                    raise MemoryFault(FaultKind.EXEC, a, f"fetch from non-executable 0x{a:x}")
                break
            off = a % PAGE_SIZE
            out += page.data[off:off + MAX_INSTRUCTION - len(out)]
        return bytes(out)

    def access(self, state, address, size, access, data=None):
        out = bytearray()
        pos = 0
        while pos < size:
            a = (address + pos) & MASK64
            index = a // PAGE_SIZE
            page = self.pages.get(index)
            if page is None:
                raise MemoryFault(FaultKind.UNMAPPED, a, f"unmapped address 0x{a:x}")
            needed = PERM_R if access is Access.READ else PERM_W
            if not page.perms & needed:
                raise MemoryFault(FaultKind.PERMISSION, a,
                                  f"{access.value} of 0x{a:x} on a {perm_string(page.perms)} page")
            if not pkru_allows(state.pkru, page.domain, access):
                raise MemoryFault(FaultKind.PERMISSION, a,
                                  f"pkru 0x{state.pkru:x} denies {access.value} on domain "
                                  f"{page.domain}")
            off = a % PAGE_SIZE
            n = min(size - pos, PAGE_SIZE - off)
            self._accesses.append((a, access, page.domain))
            if access is Access.READ:
                source = page.runtime.reserve if page.runtime is not None else page.data
                out += source[off:off + n]
            else:
                self._own(index).data[off:off + n] = data[pos:pos + n]
            pos += n
        return bytes(out)

    # ------------------------------------------------------------------
    # lifecycle
    # ------------------------------------------------------------------
    def init_lifecycle(self, image, entries=None, trusted_code=(), main_trusted=False,
                       main=None, skip_inspection=False):
        """Load `image`, create the trusted domain and its pools, inspect all
        executable memory, install interception and start the main thread.

        `skip_inspection` vets every executable page unseen; it exists to run
        unprotected baselines and attack samples.
        """
        self.config.validate()
        self.entries = entries if entries is not None else image.entry_points(
            self.inspector.entry_marker)
        self.trusted_ranges = list(trusted_code)
        for segment in image.segments:
            perms = PERM_R | (PERM_W if segment.flags & PF_W else 0) | (
                PERM_X if segment.flags & PF_X else 0)
            self.map_pages(segment.vaddr, segment.memsz or 1, perms)
            self.load_bytes(segment.vaddr, segment.data)
        for domain in range(self.config.components):
            start = POOL_BASE + domain * POOL_STRIDE
            self.map_pages(start, self.config.pool_size, PERM_R | PERM_W, domain)
            self.pools[domain] = Pool(domain, start, start + self.config.pool_size)

        if skip_inspection:
            self.vetted |= {i for i, p in self.pages.items() if p.executable}
            logger.warning("startup: executable memory accepted without inspection")
            report = None
        else:
            report = self.inspect_executable()
            self.exit_gates = {v.occurrence.offset for v in report.verdicts
                               if v.verdict is VerdictClass.SAFE_B}
        if report is not None and not report.passed:
            unsafe = report.unsafe()
            if self.inspection is InspectionMode.EAGER:
                raise StartupError(f"{len(unsafe)} unsafe occurrence(s) in executable memory, "
                                   f"first at 0x{unsafe[0].occurrence.offset:x}",
                                   offset=unsafe[0].occurrence.offset)
            for verdict in unsafe:
                occ = verdict.occurrence
                for index in {occ.offset // PAGE_SIZE, (occ.end - 1) // PAGE_SIZE}:
                    page = self._own(index)
                    page.state = PageState.PENDING
                    page.perms = PERM_R
                    self.vetted.discard(index)
            logger.info("startup: %d unsafe occurrence(s) left pending inspection", len(unsafe))
        self.intercepting = self.interception != "none"
        self.initialized = True
        thread = self.spawn_thread(image.entry if main is None else main, trusted=main_trusted)
        self._emit(thread, thread.state.rip, "init", {
            'entries': len(self.entries),
            'pkru': f"0x{thread.state.pkru:x}",
            'interception': self.interception,
            'inspection': self.inspection.value,
        })
        return self

    def inspect_executable(self):
        pages = [(i, bytes(p.data)) for i, p in sorted(self.pages.items())]
        executable = {i for i, p in self.pages.items() if p.executable}
        report = self.inspector.inspect_region(pages, executable.__contains__, self.entries)
        if report.passed:
            self.vetted |= executable
        else:
            bad = {v.occurrence.offset // PAGE_SIZE for v in report.unsafe()}
            bad |= {(v.occurrence.end - 1) // PAGE_SIZE for v in report.unsafe()}
            self.vetted |= executable - bad
        return report

    def spawn_thread(self, pc, pkru=None, trusted=False):
        tid = len(self.threads)
        top = STACK_TOP - tid * STACK_STRIDE
        self.map_pages(top - STACK_SIZE, STACK_SIZE)
        state = MachineState()
        state.rip = pc
        state.set(Reg.RSP, top - 64)
        if pkru is None:
            pkru = self.trusted_pkru if trusted else self.thread_pkru
        state.set_pkru(pkru)
        thread = SimThread(tid, state, (top - STACK_SIZE, top))
        if self.private_stacks:
            base = TRUSTED_STACK_BASE + tid * STACK_STRIDE
            self.map_pages(base, STACK_SIZE, PERM_R | PERM_W, MT)
            thread.trusted_stack = (base, base + STACK_SIZE)
            if trusted:
                thread.untrusted_rsp = state.get(Reg.RSP)
                state.set(Reg.RSP, base + STACK_SIZE - 64)
                thread.on_trusted_stack = True
        self.threads.append(thread)
        logger.debug("spawned thread %d at 0x%x, pkru 0x%x", tid, pc, pkru)
        return thread

    def signal(self, tid, signo):
        self.threads[tid].pending_signals.append(signo)

    # ------------------------------------------------------------------
    # stepping
    # ------------------------------------------------------------------
    @property
    def finished(self):
        return self.status != "running" or not any(t.runnable for t in self.threads)

    def _schedule(self):
        runnable = [t for t in self.threads if t.runnable]
        if not runnable or self.status != "running":
            return None
        current = self._current
        if current is None or not current.runnable or self._quantum <= 0:
            later = [t for t in runnable if current is None or t.tid > current.tid]
            current = later[0] if later else runnable[0]
            self._quantum = self.rng.randint(1, self.max_quantum)
        self._current = current
        self._quantum -= 1
        return current

    def sim_step(self):
        """Advance one thread by one instruction. Returns the trace event."""
        thread = self._schedule()
        if thread is None:
            return None
        self.steps += 1
        state = thread.state
        if thread.pending_signals:
            event = self.deliver_signal(thread)
            if not thread.runnable or self.status != "running":
                return event
        pc = state.rip
        problem = self._prepare_exec(thread, pc)
        if problem is not None:
            return problem

        if pc in self.exit_gates and state.get(Reg.RAX) & MASK32 != self.disallow \
                and not state.get(Reg.RCX) & MASK32 and not state.get(Reg.RDX) & MASK32:
            self.exit_gate_hits += 1
        others = {t.tid: t.state.pkru for t in self.threads if t is not thread}
        env = _MachineEnv(self, thread)
        self._accesses = []
        outcome = X86Interpreter.step(state, env)
        accesses = self._accesses

        self._after_pkru_changes(thread, pc, env.pkru_changes)
        write_only = self.config.mode is IsolationMode.INTEGRITY_ONLY
        if not self.is_trusted_pc(pc):
            for address, access, domain in accesses:
                if domain != MU and not (write_only and access is Access.READ):
                    self._violate("mt-access-outside-trusted", thread, pc,
                                  f"{access.value} of 0x{address:x} in domain {domain}")
        if any(t.state.pkru != others[t.tid] for t in self.threads if t.tid in others):
            self._violate("per-thread-pkru", thread, pc, "another thread's pkru changed")
        if self.check:
            self.check_invariants(thread)

        if outcome.kind is OutcomeKind.EXIT:
            return self._exit(thread, pc, outcome.code)
        if outcome.kind is OutcomeKind.FAULT:
            return self._fault(thread, outcome.fault, pc, outcome.detail, outcome.address)
        if self.trace_steps:
            return self._emit(thread, pc, "step", {
                'context': "T" if self.is_trusted_pc(pc) else "U",
                'accesses': [{'address': f"0x{a:x}", 'access': acc.value, 'domain': d}
                             for a, acc, d in accesses],
            })
        return None

    def _prepare_exec(self, thread, pc):
        index = pc // PAGE_SIZE
        page = self.pages.get(index)
        if page is None:
            return self._fault(thread, FaultKind.UNMAPPED, pc, f"fetch from unmapped 0x{pc:x}")
        if page.state is PageState.PENDING:
            if self.on_exec_fault(index) == "terminate":
                return self._fault(thread, FaultKind.EXEC, pc, "inspection failed")
            page = self.pages[index]
        if not page.executable:
            return self._fault(thread, FaultKind.EXEC, pc, f"page at 0x{page.base:x} is not executable")
        if page.state is PageState.TRAP_FILLED and (pc - page.base) not in page.runtime.copied:
            page = self._own(index)
            try:
                RuntimeRewriter(self.policy).runtime_rewrite(page.runtime, pc)
            except ErimError as exc:
                return self._fault(thread, FaultKind.EXEC, pc, f"runtime rewrite failed: {exc.message}")
            self._install_trampoline(page)
            self._emit(thread, pc, "runtime-rewrite", {
                'page': f"0x{page.base:x}",
                'plans': [p.label for p in page.runtime.plans],
                'swaps': page.runtime.swaps,
            })
        return None

    def _after_pkru_changes(self, thread, pc, changes):
        state = thread.state
        for old, new in changes:
            granted = pkru_allows(new, MT, Access.WRITE) and not pkru_allows(old, MT, Access.WRITE)
            if not granted or state.rip in self.entries:
                continue
            if self._guard_at(state.rip):
                # the guard terminates before anything runs with the grant
                self._emit(thread, pc, "grant-outside-entry",
                           {'next': f"0x{state.rip:x}", 'guarded': True})
            else:
                self._violate("grant-outside-entry", thread, pc,
                              f"pkru 0x{new:x} grants MT write, next 0x{state.rip:x} "
                              f"is not an entry point")
        if not self.private_stacks or thread.trusted_stack is None:
            return
        grants = pkru_allows(state.pkru, MT, Access.WRITE)
        if grants and not thread.on_trusted_stack and state.rip in self.entries:
            thread.untrusted_rsp = state.get(Reg.RSP)
            state.set(Reg.RSP, thread.trusted_stack[1] - 64)
            thread.on_trusted_stack = True
            self._emit(thread, pc, "stack-switch", {'to': "trusted"})
        elif not grants and thread.on_trusted_stack:
            state.set(Reg.RSP, thread.untrusted_rsp)
            thread.on_trusted_stack = False
            self._emit(thread, pc, "stack-switch", {'to': "untrusted"})

    def _guard_at(self, address):
        """Whether a registered guard template starts at `address`."""
        for templates in self.inspector.templates.values():
            for template in templates:
                try:
                    if self.peek(address, len(template)) == template:
                        return True
                except MemoryFault:
                    continue
        return False

    def run(self, max_steps=None):
        if max_steps is None:
            max_steps = int(os.getenv('ERIM_SWEEP_BUDGET', 100_000))
        for _ in range(max_steps):
            if self.finished:
                break
            self.sim_step()
        if self.status == "running":
            self.status = "exited" if not any(t.runnable for t in self.threads) else "budget"
        return self.summary()

    def summary(self):
        return {
            'status': self.status,
            'exit_code': self.exit_code,
            'steps': self.steps,
            'fault': self.fault.to_dict() if self.fault is not None else None,
            'output': self.output.decode('latin-1'),
            'violations': [v.to_dict() for v in self.violations],
        }

    def _exit(self, thread, pc, code):
        for t in self.threads:
            if t.runnable:
                t.status = "exited"
        thread.exit_code = code
        self.status = "exited"
        self.exit_code = code
        return self._emit(thread, pc, "exit", {'code': code})

    def _fault(self, thread, kind, pc, detail="", address=None):
        outcome = StepOutcome.faulted(kind, address if address is not None else pc, detail)
        thread.status = "faulted"
        thread.fault = outcome
        if not self.record_and_continue:
            for t in self.threads:
                if t.runnable:
                    t.status = "stopped"
            self.status = "faulted"
            self.fault = outcome
        logger.debug("thread %d fault at 0x%x: %s %s", thread.tid, pc, kind.value, detail)
        return self._emit(thread, pc, "fault", outcome.to_dict())

    def _emit(self, thread, pc, event, detail=None):
        entry = TraceEvent(self.steps, thread.tid, pc, thread.state.pkru, event, detail or {})
        if self.trace is not None:
            self.trace.append(entry)
        return entry

    def _violate(self, invariant, thread, pc, detail):
        violation = Violation(invariant, self.steps, thread.tid, pc, detail)
        self.violations.append(violation)
        self._emit(thread, pc, "violation", violation.to_dict())
        logger.warning("invariant %s violated at 0x%x: %s", invariant, pc, detail)

    # ------------------------------------------------------------------
    # checks
    # ------------------------------------------------------------------
    def check_invariants(self, thread=None):
        """Structural invariants over the whole machine."""
        found = []
        pc = thread.state.rip if thread is not None else 0
        for index, page in self.pages.items():
            if page.perms & PERM_W and page.perms & PERM_X:
                found.append(("dep", f"page 0x{page.base:x} is writable and executable"))
            if page.state is PageState.PENDING and page.executable:
                found.append(("pending-exclusion", f"pending page 0x{page.base:x} is executable"))
            if page.executable and index not in self.vetted:
                found.append(("unvetted-exec", f"page 0x{page.base:x} executable without inspection"))
            if page.state is PageState.TRAP_FILLED:
                leaked = [o for o in range(PAGE_SIZE)
                          if o not in page.runtime.copied and page.data[o] != TRAP_BYTE]
                if leaked:
                    found.append(("pending-exclusion",
                                  f"uncopied byte 0x{page.base + leaked[0]:x} is executable"))
        if thread is not None and self.private_stacks and thread.trusted_stack is not None:
            lo, hi = thread.trusted_stack
            if (self.is_trusted_pc(thread.state.rip)
                    and pkru_allows(thread.state.pkru, MT, Access.WRITE)
                    and not lo <= thread.state.get(Reg.RSP) <= hi):
                found.append(("trusted-stack", "trusted code running on a stack outside MT"))
        for invariant, detail in found:
            self._violate(invariant, thread or self.threads[0], pc, detail)
        return found

    # ------------------------------------------------------------------
    # syscalls
    # ------------------------------------------------------------------
    def sim_syscall(self, thread, nr, args):
        """Returns the value for rax, None when the state was restored, or a
        StepOutcome when the process ends."""
        state = thread.state
        pc = (state.rip - 2) & MASK64
        trusted = self.caller_trusted(state)
        self.syscall_log.append((nr,) + tuple(args[:3]))
        self._emit(thread, pc, "syscall", {'nr': nr, 'trusted': trusted})
        if nr in self.denied_syscalls and not trusted:
            return self._deny(thread, pc, nr, EPERM, "filtered for untrusted callers")
        if nr == SYS_EXIT:
            return StepOutcome.exited(args[0] & 0xFF)
        if nr == SYS_WRITE:
            try:
                data = self.access(state, args[1], args[2], Access.READ)
            except MemoryFault:
                return -EFAULT
            self.output += data
            return len(data)
        if nr == SYS_MMAP:
            return self._mmap(thread, pc, trusted, *args[:3])
        if nr in (SYS_MPROTECT, SYS_PKEY_MPROTECT):
            pkey = args[3] if nr == SYS_PKEY_MPROTECT else None
            return self._mprotect(thread, pc, trusted, args[0], args[1], args[2], pkey)
        if nr == SYS_RT_SIGACTION:
            if self.initialized and self.intercepting and not trusted:
                return self._deny(thread, pc, nr, EPERM, "untrusted code may not install handlers")
            self.handlers[args[0]] = args[1]
            return 0
        if nr == SYS_RT_SIGRETURN:
            return self._sigreturn(thread)
        if nr == SYS_ALLOC:
            try:
                return self.domain_alloc(thread, args[0])
            except PoolExhausted:
                return -ENOMEM
        return -ENOSYS

    def _deny(self, thread, pc, nr, errno, reason):
        self._emit(thread, pc, "denied", {'nr': nr, 'errno': errno, 'reason': reason})
        logger.info("syscall %d denied: %s", nr, reason)
        return -errno

    @staticmethod
    def _perms(prot):
        return ((PERM_R if prot & PROT_READ else 0) | (PERM_W if prot & PROT_WRITE else 0)
                | (PERM_X if prot & PROT_EXEC else 0))

    def _check_exec_request(self, thread, pc, nr, prot, trusted):
        if prot & PROT_WRITE and prot & PROT_EXEC:
            return self._deny(thread, pc, nr, EACCES, "writable and executable")
        if prot & PROT_EXEC and self.intercepting and not trusted:
            return self._deny(thread, pc, nr, EPERM, "executable mapping requested outside T")
        return None

    def _mmap(self, thread, pc, trusted, address, length, prot):
        if length <= 0:
            return -EINVAL
        denied = self._check_exec_request(thread, pc, SYS_MMAP, prot, trusted)
        if denied is not None:
            return denied
        length = align_up(length, PAGE_SIZE)
        if address:
            if address % PAGE_SIZE or any(i in self.pages for i in range(
                    address // PAGE_SIZE, (address + length) // PAGE_SIZE)):
                return -EINVAL
        else:
            address = self._next_mmap
            self._next_mmap += length + PAGE_SIZE
        indices = self.map_pages(address, length, self._perms(prot) & ~PERM_X)
        if prot & PROT_EXEC:
            result = self._grant_exec(thread, pc, indices, self._perms(prot))
            if result:
                return result
        self._emit(thread, pc, "mmap", {'address': f"0x{address:x}", 'length': length,
                                        'prot': prot})
        return address

    def _mprotect(self, thread, pc, trusted, address, length, prot, pkey):
        nr = SYS_MPROTECT if pkey is None else SYS_PKEY_MPROTECT
        if address % PAGE_SIZE or length <= 0:
            return -EINVAL
        if pkey is not None:
            if self.intercepting and not trusted:
                return self._deny(thread, pc, nr, EPERM, "pkey_mprotect outside T")
            if not 0 <= pkey < self.config.components:
                return -EINVAL
        denied = self._check_exec_request(thread, pc, nr, prot, trusted)
        if denied is not None:
            return denied
        indices = list(range(address // PAGE_SIZE, align_up(address + length, PAGE_SIZE) // PAGE_SIZE))
        if any(i not in self.pages for i in indices):
            return -ENOMEM
        for index in indices:
            page = self._own(index)
            if page.runtime is not None:
                page.data = bytearray(page.runtime.reserve)
                page.runtime = None
            page.state = PageState.NORMAL
            page.perms = self._perms(prot) & ~PERM_X
            if pkey is not None:
                page.domain = pkey
            self.vetted.discard(index)
        if prot & PROT_EXEC:
            result = self._grant_exec(thread, pc, indices, self._perms(prot))
            if result:
                return result
        self._emit(thread, pc, "mprotect", {'address': f"0x{address:x}", 'length': length,
                                            'prot': prot, 'pkey': pkey})
        return 0

    def _grant_exec(self, thread, pc, indices, perms):
        if self.inspection is InspectionMode.ON_DEMAND:
            for index in indices:
                page = self._own(index)
                page.state = PageState.PENDING
                page.perms = PERM_R
            self._emit(thread, pc, "pending", {'pages': [f"0x{i * PAGE_SIZE:x}" for i in indices]})
            return 0
        report = self._inspect_group(indices)
        if not report.passed:
            self._emit(thread, pc, "inspect", {'passed': False,
                                               'unsafe': [f"0x{v.occurrence.offset:x}"
                                                          for v in report.unsafe()]})
            return -EACCES
        for index in indices:
            page = self._own(index)
            page.perms = perms
            self.vetted.add(index)
        self._emit(thread, pc, "inspect", {'passed': True, 'pages': len(indices)})
        return 0

    def _inspect_group(self, indices):
        group = set(indices)
        for index in indices:
            for neighbour in (index - 1, index + 1):
                page = self.pages.get(neighbour)
                if page is not None and (page.executable or page.state is PageState.PENDING):
                    group.add(neighbour)
        pages = [(i, bytes(self.pages[i].data)) for i in sorted(group)]
        return self.inspector.inspect_region(pages, group.__contains__, self.entries)

    def on_exec_fault(self, index):
        """Inspect a pending page on first execution. Returns "resume" or "terminate"."""
        run = [index]
        for step in (-1, 1):
            i = index + step
            while self.pages.get(i) is not None and self.pages[i].state is PageState.PENDING:
                run.append(i)
                i += step
        run.sort()
        report = self._inspect_group(run)
        thread = self._current or self.threads[0]
        if report.passed:
            for i in run:
                page = self._own(i)
                page.state = PageState.NORMAL
                page.perms = PERM_R | PERM_X
                self.vetted.add(i)
            self._emit(thread, index * PAGE_SIZE, "inspect", {'passed': True, 'pages': len(run)})
            return "resume"
        unsafe = [f"0x{v.occurrence.offset:x}" for v in report.unsafe()]
        if not self.rewrite_on_fault:
            self._emit(thread, index * PAGE_SIZE, "inspect", {'passed': False, 'unsafe': unsafe})
            return "terminate"
        for i in run:
            self._trap_fill(i)
        self._emit(thread, index * PAGE_SIZE, "trap-fill", {'pages': len(run), 'unsafe': unsafe})
        return "resume"

    def _trap_fill(self, index):
        page = self._own(index)
        page.runtime = RuntimeRewriter.prepare(page.base, bytes(page.data), self.entries,
                                               trampoline_base=self._next_trampoline)
        self._next_trampoline += PAGE_SIZE
        page.data = page.runtime.exec_page
        page.state = PageState.TRAP_FILLED
        page.perms = PERM_R | PERM_X
        self.vetted.add(index)

    def _install_trampoline(self, page):
        runtime = page.runtime
        if not runtime.trampoline:
            return
        index = runtime.trampoline_base // PAGE_SIZE
        if index not in self.pages:
            self.map_pages(index * PAGE_SIZE, PAGE_SIZE, PERM_R | PERM_X, fill=TRAP_BYTE)
        target = self._own(index)
        start = runtime.trampoline_base % PAGE_SIZE
        target.data[start:start + len(runtime.trampoline)] = runtime.trampoline
        self.vetted.add(index)

    # ------------------------------------------------------------------
    # signals
    # ------------------------------------------------------------------
    def deliver_signal(self, thread):
        if not thread.pending_signals:
            return None
        signo = thread.pending_signals.pop(0)
        state = thread.state
        handler = self.handlers.get(signo)
        if handler is None:
            self._emit(thread, state.rip, "signal", {'signo': signo, 'action': "terminate"})
            return self._exit(thread, state.rip, 128 + signo)
        thread.frames.append((state.copy(), thread.on_trusted_stack, thread.untrusted_rsp))
        if thread.on_trusted_stack:
            state.set(Reg.RSP, thread.untrusted_rsp)
            thread.on_trusted_stack = False
        state.set_pkru(SIGNAL_PKRU)
        state.set(Reg.RSP, state.get(Reg.RSP) - SIGNAL_RED_ZONE)
        state.set(Reg.RDI, signo)
        state.rip = handler
        event = self._emit(thread, handler, "signal", {'signo': signo, 'handler': f"0x{handler:x}"})
        if (self.config.mode is IsolationMode.FULL
                and pkru_allows(state.pkru, MT, Access.READ)):
            self._violate("signal-reset", thread, handler, "handler entered with MT readable")
        return event

    def _sigreturn(self, thread):
        if not thread.frames:
            return StepOutcome.faulted(FaultKind.EXEC, thread.state.rip, "rt_sigreturn without a frame")
        saved, on_trusted, untrusted_rsp = thread.frames.pop()
        state = thread.state
        state.regs[:] = saved.regs
        state.rip = saved.rip
        state.set_pkru(saved.pkru)
        state.flags = saved.flags
        thread.on_trusted_stack = on_trusted
        thread.untrusted_rsp = untrusted_rsp
        return None

    # ------------------------------------------------------------------
    # allocation
    # ------------------------------------------------------------------
    def domain_alloc(self, thread, size):
        """Serve from the pool of the most privileged domain the caller may write."""
        writable = [d for d in sorted(self.pools, reverse=True)
                    if pkru_allows(thread.state.pkru, d, Access.WRITE)]
        if not writable:
            raise PoolExhausted("no pool is writable under the current pkru")
        pool = self.pools[writable[0]]
        size = align_up(max(size, 1), 16)
        if pool.next + size > pool.end:
            raise PoolExhausted(f"pool of domain {pool.domain} exhausted", offset=pool.next)
        address = pool.next
        pool.next += size
        return address

    # ------------------------------------------------------------------
    # attack sweep
    # ------------------------------------------------------------------
    def fork(self):
        twin = copy.copy(self)
        twin.pages = dict(self.pages)
        twin._owned = set()
        self._owned = set()
        twin.vetted = set(self.vetted)
        twin.pools = copy.deepcopy(self.pools)
        twin.threads = [copy.deepcopy(t) for t in self.threads]
        twin.handlers = dict(self.handlers)
        twin.denied_syscalls = set(self.denied_syscalls)
        twin.rng = random.Random(self.rng.random())
        twin.output = bytearray(self.output)
        twin.syscall_log = list(self.syscall_log)
        twin.trace = []
        twin.violations = []
        twin._current = None
        return twin

    def _attack_registers(self, rng, preset):
        interesting = [0, self.disallow, self.trusted_pkru, self.untrusted_pkru,
                       self.pools[MT].start if MT in self.pools else 0,
                       self.pools[MU].start if MU in self.pools else 0]
        regs = [rng.choice(interesting) if rng.random() < 0.7 else rng.getrandbits(64)
                for _ in range(16)]
        if preset == 0:
            regs[Reg.RAX] = self.trusted_pkru
            regs[Reg.RCX] = regs[Reg.RDX] = 0
            for reg in (Reg.RBX, Reg.RSI, Reg.RDI):
                regs[reg] = interesting[4]
        elif rng.random() < 0.5:
            regs[Reg.RCX] = regs[Reg.RDX] = 0
        return regs

    def attack_sweep(self, region=None, presets=None, budget=None, seed=None):
        """Start a bounded run at every byte of `region` (default: all
        executable pages) with attacker-chosen registers and PKRU at its
        untrusted value; report MT accesses made outside T."""
        if presets is None:
            presets = int(os.getenv('ERIM_SWEEP_PRESETS', 8))
        if budget is None:
            budget = int(os.getenv('ERIM_SWEEP_BUDGET', 100_000))
        if region is None:
            region = [(p.base, p.base + PAGE_SIZE) for _, p in sorted(self.pages.items())
                      if p.executable]
        rng = random.Random(self.seed if seed is None else seed)
        register_sets = [self._attack_registers(rng, i) for i in range(presets)]
        report = SweepReport(budget=budget)
        for lo, hi in region:
            for start in range(lo, hi):
                report.starts += 1
                for regs in register_sets:
                    run = self.fork()
                    run.threads = []
                    run.trace = None
                    run.trace_steps = False
                    run.check = False
                    run.status = "running"
                    run.exit_gate_hits = 0
                    thread = run.spawn_thread(start, pkru=self.untrusted_pkru)
                    rsp = thread.state.get(Reg.RSP)
                    for reg, value in enumerate(regs):
                        thread.state.set(reg, value)
                    thread.state.set(Reg.RSP, rsp)
                    run.run(budget)
                    report.runs += 1
                    if run.status == "budget":
                        report.budget_exhausted += 1
                    if run.exit_gate_hits:
                        report.exit_gate_hijacks += 1
                        if run.status != "exited":
                            report.exit_gate_escapes += 1
                    for violation in run.violations:
                        report.findings.append(Violation(violation.invariant, violation.step,
                                                         violation.thread, violation.pc,
                                                         f"start 0x{start:x}: {violation.detail}"))
        logger.info("attack sweep: %d starts, %d runs, %d findings", report.starts, report.runs,
                    len(report.findings))
        return report

    # ------------------------------------------------------------------
    # trace
    # ------------------------------------------------------------------
    def trace_lines(self):
        return [event.to_json() for event in self.trace or ()]


def sim_step(machine):
    return machine.sim_step()


def attack_sweep(machine, region=None, presets=None, budget=None):
    return machine.attack_sweep(region, presets, budget)
