import logging
import os
import time
from pathlib import Path

from dotenv import load_dotenv

from app.models.errors import ConfigError
from app.models.inspection import (
    PAGE_SIZE, EntryPointSet, InspectionReport, OccurrenceKind, SafetyVerdict, VerdictClass,
)
from app.models.x86 import Mnemonic
from app.services.bytescan import ByteScanService
from app.services.gates import PKRU_DISALLOW_TRUSTED, XRSTOR_GUARD, safe_b_guard
from app.services.x86_codec import X86Codec

load_dotenv()

logger = logging.getLogger(__name__)


class InspectorService:
    """Binary inspection: decides whether every WRPKRU/XRSTOR occurrence in
    a set of executable pages is safe.

    A WRPKRU is safe when it falls through into (or directly calls or jumps
    to) a designated entry point, or when it is followed by the PKRU check
    template. An XRSTOR is safe when followed by the bit-9 guard.
    """

    _instance = None

    def __init__(self, disallow=None, entry_marker=None):
        if disallow is None:
            disallow = PKRU_DISALLOW_TRUSTED
        self.disallow = disallow
        self.entry_marker = entry_marker or os.getenv('ERIM_ENTRY_MARKER', 'erim_entry')
        self.templates = {
            OccurrenceKind.WRPKRU: [safe_b_guard(disallow)],
            OccurrenceKind.XRSTOR: [XRSTOR_GUARD],
        }

    @classmethod
    def instance(cls):
        if cls._instance is None:
            cls._instance = cls()
        return cls._instance

    def register_template(self, kind, template):
        """Accept an additional guard encoding after `kind` occurrences."""
        kind = OccurrenceKind(kind)
        template = bytes(template)
        if not template:
            raise ConfigError("guard template must not be empty")
        if template not in self.templates[kind]:
            self.templates[kind].append(template)
            logger.info("registered %s guard template %s", kind.value, template.hex())

    def classify(self, code, occ, entries, base=0):
        after = occ.end
        tail = bytes(code[after - base:])
        if occ.kind is OccurrenceKind.WRPKRU:
            if after in entries:
                return SafetyVerdict(occ, VerdictClass.SAFE_A,
                                     f"entry point at 0x{after:x}", (after, after))
            target = self._direct_target(tail, after)
            if target is not None and target in entries:
                return SafetyVerdict(occ, VerdictClass.SAFE_A,
                                     f"direct transfer to entry point 0x{target:x}", (after, after))
            safe_class = VerdictClass.SAFE_B
        else:
            safe_class = VerdictClass.SAFE_XRSTOR
        truncated = False
        for template in self.templates[occ.kind]:
            if tail[:len(template)] == template:
                return SafetyVerdict(occ, safe_class, f"guard template {template.hex()}",
                                     (after, after + len(template)))
            truncated = truncated or (len(tail) < len(template)
                                      and template.startswith(tail))
        if truncated:
            return SafetyVerdict(occ, VerdictClass.UNSAFE, "guard truncated at end of region")
        if occ.kind is OccurrenceKind.WRPKRU:
            return SafetyVerdict(occ, VerdictClass.UNSAFE, "no entry point or PKRU check follows")
        return SafetyVerdict(occ, VerdictClass.UNSAFE, "no bit-9 guard follows")

    @staticmethod
    def _direct_target(tail, address):
        instr = X86Codec.try_decode(tail, 0) if tail else None
        if instr is None or instr.mnemonic not in (Mnemonic.CALL, Mnemonic.JMP):
            return None
        rel = instr.relative_operand()
        if rel is None:
            return None
        return address + instr.total_length + rel.disp

    def inspect_region(self, pages, executable, entries):
        started = time.perf_counter()
        pages = list(pages)
        verdicts = []
        for first, data in ByteScanService.runs(pages, executable):
            run_base = first * PAGE_SIZE
            for occ in ByteScanService.scan(data, base=run_base):
                verdicts.append(self.classify(data, occ, entries, base=run_base))
        for first, data in ByteScanService.runs(pages, lambda index: not executable(index)):
            for occ in ByteScanService.scan(data, base=first * PAGE_SIZE):
                verdicts.append(SafetyVerdict(occ, VerdictClass.NON_EXECUTABLE_DATA,
                                              "non-executable page"))
        verdicts.sort(key=lambda v: v.occurrence.offset)
        report = InspectionReport(verdicts, len(pages), time.perf_counter() - started)
        logger.info("inspected %d pages: %d occurrences, %d unsafe",
                    len(pages), len(verdicts), len(report.unsafe()))
        return report

    def inspect_code(self, code, entries, base=0):
        """Inspect a contiguous executable buffer starting at `base`."""
        started = time.perf_counter()
        verdicts = [self.classify(code, occ, entries, base)
                    for occ in ByteScanService.scan(code, base)]
        return InspectionReport(verdicts, -(-len(code) // PAGE_SIZE),
                                time.perf_counter() - started)

    def inspect_image(self, image, entries=None):
        pages, executable = image.pages()
        if entries is None:
            entries = image.entry_points(self.entry_marker)
        return self.inspect_region(pages, executable, entries)

    @staticmethod
    def load_entry_list(path):
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read entry list {path}: {exc}")
        return InspectorService.parse_entry_list(text, provenance=f"file:{path}")

    @staticmethod
    def parse_entry_list(text, provenance="list"):
        """One hexadecimal address per line, `#` starts a comment."""
        addresses = set()
        for lineno, line in enumerate(text.splitlines(), start=1):
            line = line.split('#', 1)[0].strip()
            if not line:
                continue
            try:
                addresses.add(int(line, 16))
            except ValueError:
                raise ConfigError(f"entry list line {lineno}: not a hex address: {line!r}")
        return EntryPointSet(frozenset(addresses), (provenance,))


def classify(code, occ, entries, base=0):
    return InspectorService.instance().classify(code, occ, entries, base)


def inspect_region(pages, executable, entries):
    return InspectorService.instance().inspect_region(pages, executable, entries)
