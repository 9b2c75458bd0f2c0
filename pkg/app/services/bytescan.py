"""Locate WRPKRU and XRSTOR byte patterns regardless of instruction
alignment."""
import logging
import re

from app.models.errors import PageSizeError
from app.models.inspection import PAGE_SIZE, PATTERN_LENGTH, Occurrence, OccurrenceKind

logger = logging.getLogger(__name__)

WRPKRU_BYTES = b"\x0f\x01\xef"

# Zero-width lookahead so overlapping matches are all reported.
_PATTERN = re.compile(
    rb"(?=\x0f(?:\x01\xef|\xae[\x28-\x2f\x68-\x6f\xa8-\xaf]))",
    re.DOTALL,
)


def is_xrstor_modrm(byte):
    return (byte >> 4) in (0x2, 0x6, 0xA) and (byte & 0xF) >= 0x8


def naive_scan(buffer, base=0):
    """Sliding-window reference used to validate the fast scanner."""
    found = []
    for i in range(len(buffer) - PATTERN_LENGTH + 1):
        if buffer[i] != 0x0F:
            continue
        if buffer[i + 1] == 0x01 and buffer[i + 2] == 0xEF:
            found.append(Occurrence(base + i, OccurrenceKind.WRPKRU))
        elif buffer[i + 1] == 0xAE and is_xrstor_modrm(buffer[i + 2]):
            found.append(Occurrence(base + i, OccurrenceKind.XRSTOR))
    return found


class ByteScanService:
    """Pure pattern matching over byte streams and page sequences."""

    @staticmethod
    def scan(buffer, base=0):
        """Return every occurrence in `buffer`, sorted by offset."""
        found = []
        for match in _PATTERN.finditer(buffer):
            i = match.start()
            kind = OccurrenceKind.WRPKRU if buffer[i + 1] == 0x01 else OccurrenceKind.XRSTOR
            address = base + i
            found.append(Occurrence(address, kind, page_span=_spans_page(address)))
        return found

    @staticmethod
    def is_clean(buffer):
        return _PATTERN.search(buffer) is None

    @staticmethod
    def runs(pages, predicate):
        """Group (index, bytes) pages into maximal runs of contiguous pages
        satisfying `predicate`. Yields (first_index, concatenated_bytes)."""
        ordered = sorted(pages, key=lambda p: p[0])
        run_start, chunks, last = None, [], None
        for index, data in ordered:
            if len(data) != PAGE_SIZE:
                raise PageSizeError(f"page {index} has {len(data)} bytes, expected {PAGE_SIZE}",
                                    offset=index * PAGE_SIZE)
            if not predicate(index):
                if chunks:
                    yield run_start, b"".join(chunks)
                run_start, chunks, last = None, [], None
                continue
            if chunks and index != last + 1:
                yield run_start, b"".join(chunks)
                chunks = []
            if not chunks:
                run_start = index
            chunks.append(bytes(data))
            last = index
        if chunks:
            yield run_start, b"".join(chunks)

    @staticmethod
    def scan_pages(pages, executable):
        """Occurrences inside executable pages, including those straddling
        two adjacent executable pages. Offsets are absolute addresses."""
        found = []
        for first, data in ByteScanService.runs(pages, executable):
            found.extend(ByteScanService.scan(data, base=first * PAGE_SIZE))
        logger.debug("scan_pages: %d pages, %d occurrences", len(pages), len(found))
        return found


def _spans_page(address):
    return address // PAGE_SIZE != (address + PATTERN_LENGTH - 1) // PAGE_SIZE


scan = ByteScanService.scan
scan_pages = ByteScanService.scan_pages
