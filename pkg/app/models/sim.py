import copy
import json
from dataclasses import dataclass, field
from enum import Enum

from app.models.errors import ConfigError
from app.models.inspection import PAGE_SIZE

MU = 0
MT = 1
NUM_DOMAINS = 16

PERM_R = 4
PERM_W = 2
PERM_X = 1


def perm_string(perms):
    return "".join(c if perms & bit else "-" for c, bit in (("r", PERM_R), ("w", PERM_W), ("x", PERM_X)))


class Access(str, Enum):
    READ = "read"
    WRITE = "write"


class PageState(str, Enum):
    NORMAL = "normal"
    PENDING = "pending-inspection"
    TRAP_FILLED = "trap-filled"


class IsolationMode(str, Enum):
    FULL = "full-isolation"
    INTEGRITY_ONLY = "integrity-only"


class InspectionMode(str, Enum):
    EAGER = "eager"
    ON_DEMAND = "on-demand"


@dataclass
class SimPage:
    index: int
    data: bytearray = field(default_factory=lambda: bytearray(PAGE_SIZE))
    domain: int = MU
    perms: int = PERM_R | PERM_W
    state: PageState = PageState.NORMAL
    runtime: object = None

    @property
    def base(self):
        return self.index * PAGE_SIZE

    @property
    def executable(self):
        return bool(self.perms & PERM_X)

    def content(self):
        """Bytes as data accesses and inspection see them."""
        if self.runtime is not None:
            return self.runtime.reserve
        return bytes(self.data)

    def clone(self):
        twin = SimPage(self.index, bytearray(self.data), self.domain, self.perms, self.state,
                       copy.deepcopy(self.runtime))
        if twin.runtime is not None:
            twin.data = twin.runtime.exec_page
        return twin

    def to_dict(self):
        return {
            'address': f"0x{self.base:x}",
            'domain': self.domain,
            'perms': perm_string(self.perms),
            'state': self.state.value,
        }


@dataclass(frozen=True)
class DomainConfig:
    """`trust` holds (a, b) pairs: code running in domain a may access domain b."""

    components: int = 2
    trust: frozenset = frozenset({(MT, MU)})
    mode: IsolationMode = IsolationMode.FULL
    pool_size: int = 16 * PAGE_SIZE

    def validate(self):
        if not 2 <= self.components <= NUM_DOMAINS:
            raise ConfigError(f"components must be in [2, {NUM_DOMAINS}], got {self.components}")
        for a, b in self.trust:
            if not (0 <= a < self.components and 0 <= b < self.components):
                raise ConfigError(f"trust pair ({a}, {b}) names an unknown domain")
        for a, b in self.trust:
            for c, d in self.trust:
                if b == c and a != d and (a, d) not in self.trust:
                    raise ConfigError(f"trust relation is not transitive: ({a}, {b}) and "
                                      f"({c}, {d}) without ({a}, {d})")
        return self

    def reachable(self, domain):
        return {domain, MU} | {b for a, b in self.trust if a == domain}


@dataclass
class Pool:
    domain: int
    start: int
    end: int
    next: int = 0

    def __post_init__(self):
        self.next = self.next or self.start

    @property
    def used(self):
        return self.next - self.start


@dataclass
class SimThread:
    tid: int
    state: object
    stack: tuple
    trusted_stack: tuple | None = None
    on_trusted_stack: bool = False
    untrusted_rsp: int = 0
    status: str = "runnable"
    pending_signals: list = field(default_factory=list)
    frames: list = field(default_factory=list)
    exit_code: int | None = None
    fault: object = None

    @property
    def runnable(self):
        return self.status == "runnable"


@dataclass(frozen=True)
class TraceEvent:
    step: int
    thread: int
    pc: int
    pkru: int
    event: str
    detail: dict = field(default_factory=dict)

    def to_dict(self):
        return {
            'step': self.step,
            'thread': self.thread,
            'pc': f"0x{self.pc:x}",
            'pkru': f"0x{self.pkru:x}",
            'event': self.event,
            'detail': self.detail,
        }

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True)


@dataclass(frozen=True)
class Violation:
    invariant: str
    step: int
    thread: int
    pc: int
    detail: str = ""

    def to_dict(self):
        return {
            'invariant': self.invariant,
            'step': self.step,
            'thread': self.thread,
            'pc': f"0x{self.pc:x}",
            'detail': self.detail,
        }


@dataclass
class SweepReport:
    starts: int = 0
    runs: int = 0
    budget: int = 0
    budget_exhausted: int = 0
    exit_gate_hijacks: int = 0
    exit_gate_escapes: int = 0
    findings: list = field(default_factory=list)

    @property
    def clean(self):
        return not self.findings and not self.exit_gate_escapes

    def to_dict(self):
        return {
            'starts': self.starts,
            'runs': self.runs,
            'budget': self.budget,
            'budget_exhausted': self.budget_exhausted,
            'exit_gate_hijacks': self.exit_gate_hijacks,
            'exit_gate_escapes': self.exit_gate_escapes,
            'findings': [f.to_dict() for f in self.findings],
            'clean': self.clean,
        }
