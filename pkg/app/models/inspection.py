from dataclasses import dataclass, field
from enum import Enum

PAGE_SIZE = 4096
PATTERN_LENGTH = 3


def align_up(value, alignment):
    return -(-value // alignment) * alignment


class OccurrenceKind(str, Enum):
    WRPKRU = "WRPKRU"
    XRSTOR = "XRSTOR"


@dataclass(frozen=True, order=True)
class Occurrence:
    offset: int
    kind: OccurrenceKind
    length: int = PATTERN_LENGTH
    page_span: bool = False

    @property
    def end(self):
        return self.offset + self.length

    def to_dict(self):
        return {
            'kind': self.kind.value,
            'offset': f"0x{self.offset:x}",
            'length': self.length,
            'page_span': self.page_span,
        }


@dataclass(frozen=True)
class EntryPointSet:
    """Designated entry points of the trusted component."""

    addresses: frozenset = frozenset()
    provenance: tuple = ()

    def __contains__(self, address):
        return address in self.addresses

    def __len__(self):
        return len(self.addresses)

    def union(self, other):
        return EntryPointSet(self.addresses | other.addresses,
                             tuple(dict.fromkeys(self.provenance + other.provenance)))

    def without(self, address):
        return EntryPointSet(self.addresses - {address}, self.provenance)

    def remap(self, mapping):
        return EntryPointSet(frozenset(mapping(a) for a in self.addresses), self.provenance)

    @classmethod
    def of(cls, *addresses, provenance="explicit"):
        return cls(frozenset(addresses), (provenance,))


class VerdictClass(str, Enum):
    SAFE_A = "SafeA"
    SAFE_B = "SafeB"
    SAFE_XRSTOR = "SafeXrstor"
    UNSAFE = "Unsafe"
    NON_EXECUTABLE_DATA = "NonExecutableData"

    @property
    def is_safe(self):
        return self is not VerdictClass.UNSAFE


@dataclass(frozen=True)
class SafetyVerdict:
    occurrence: Occurrence
    verdict: VerdictClass
    evidence: str = ""
    extent: tuple | None = None

    def to_dict(self):
        body = self.occurrence.to_dict()
        body['verdict'] = self.verdict.value
        body['evidence'] = self.evidence
        return body


@dataclass
class InspectionReport:
    verdicts: list = field(default_factory=list)
    pages_scanned: int = 0
    duration: float = 0.0

    @property
    def passed(self):
        return not any(v.verdict is VerdictClass.UNSAFE for v in self.verdicts)

    def unsafe(self):
        return [v for v in self.verdicts if v.verdict is VerdictClass.UNSAFE]

    def classes(self):
        return [v.verdict for v in self.verdicts]

    def to_dict(self, include_data=True):
        verdicts = [v.to_dict() for v in self.verdicts
                    if include_data or v.verdict is not VerdictClass.NON_EXECUTABLE_DATA]
        return {
            'passed': self.passed,
            'pages_scanned': self.pages_scanned,
            'verdicts': verdicts,
        }
