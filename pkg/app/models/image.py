from dataclasses import dataclass, field

from app.models.inspection import PAGE_SIZE, EntryPointSet

PF_X = 1 << 0
PF_W = 1 << 1
PF_R = 1 << 2


def permission_string(flags):
    return "".join(c if flags & bit else "-" for c, bit in (("r", PF_R), ("w", PF_W), ("x", PF_X)))


@dataclass
class Segment:
    """One loadable segment. `index` is its program header slot (None for raw images)."""

    vaddr: int
    data: bytes
    flags: int = PF_R | PF_X
    offset: int = 0
    memsz: int | None = None
    index: int | None = None

    def __post_init__(self):
        if self.memsz is None:
            self.memsz = len(self.data)

    @property
    def end(self):
        return self.vaddr + self.memsz

    @property
    def executable(self):
        return bool(self.flags & PF_X)

    @property
    def writable(self):
        return bool(self.flags & PF_W)

    def contains(self, address):
        return self.vaddr <= address < self.end

    def to_dict(self):
        return {
            'vaddr': f"0x{self.vaddr:x}",
            'memsz': self.memsz,
            'filesz': len(self.data),
            'offset': self.offset,
            'permissions': permission_string(self.flags),
        }


@dataclass(frozen=True)
class Symbol:
    name: str
    address: int


@dataclass
class LoadedImage:
    segments: list
    symbols: list = field(default_factory=list)
    entry: int = 0
    raw_mode: bool = False
    raw: bytes = b""

    def executable_segments(self):
        return [s for s in self.segments if s.executable]

    def segment_at(self, address):
        for segment in self.segments:
            if segment.contains(address):
                return segment
        return None

    def pages(self):
        """Page-granular view: ([(index, bytes)], executable predicate).

        Bytes past a segment's file content are zero, as the loader maps them.
        """
        contents, executable = {}, set()
        for segment in self.segments:
            if not segment.memsz:
                continue
            first = segment.vaddr // PAGE_SIZE
            last = (segment.end - 1) // PAGE_SIZE
            for index in range(first, last + 1):
                contents.setdefault(index, bytearray(PAGE_SIZE))
                if segment.executable:
                    executable.add(index)
            for i, byte in enumerate(segment.data):
                address = segment.vaddr + i
                contents[address // PAGE_SIZE][address % PAGE_SIZE] = byte
        pages = [(index, bytes(data)) for index, data in sorted(contents.items())]
        return pages, executable.__contains__

    def entry_points(self, marker):
        addresses = frozenset(s.address for s in self.symbols if marker and marker in s.name)
        return EntryPointSet(addresses, (f"symtab:{marker}",) if addresses else ())

    def symbol(self, name):
        for sym in self.symbols:
            if sym.name == name:
                return sym.address
        return None

    def to_dict(self):
        return {
            'mode': 'raw' if self.raw_mode else 'elf',
            'entry': f"0x{self.entry:x}",
            'segments': [s.to_dict() for s in self.segments],
            'symbols': {s.name: f"0x{s.address:x}" for s in self.symbols},
        }
