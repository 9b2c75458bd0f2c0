import random

import pytest

from app.models.errors import PageSizeError
from app.models.inspection import PAGE_SIZE, OccurrenceKind
from app.services.bytescan import ByteScanService, naive_scan, scan, scan_pages

from tests.conftest import campaign_size


def _key(occurrences):
    return [(o.offset, o.kind) for o in occurrences]


def test_scan_finds_wrpkru_at_offset():
    found = scan(b"\x90\x90\x0f\x01\xef\xc3", base=0x1000)
    assert _key(found) == [(0x1002, OccurrenceKind.WRPKRU)]
    assert found[0].end == 0x1005


def test_scan_xrstor_modrm_forms():
    for modrm in (0x28, 0x2F, 0x68, 0x6F, 0xA8, 0xAF):
        assert _key(scan(bytes([0x0F, 0xAE, modrm]))) == [(0, OccurrenceKind.XRSTOR)]
    for modrm in (0x27, 0x30, 0xE8, 0xEF, 0x18):
        assert scan(bytes([0x0F, 0xAE, modrm])) == []


def test_scan_empty_and_short_buffers():
    assert scan(b"") == []
    assert scan(b"\x0f\x01") == []
    assert ByteScanService.is_clean(b"\x0f\x01")
    assert not ByteScanService.is_clean(b"\x00\x0f\x01\xef")


def test_scan_reports_overlapping_candidates():
    data = b"\x0f\x0f\x01\xef\x0f\xae\x2b"
    assert _key(scan(data)) == [(1, OccurrenceKind.WRPKRU), (4, OccurrenceKind.XRSTOR)]


def test_scan_pages_finds_occurrence_straddling_pages():
    first = bytearray(PAGE_SIZE)
    first[-2:] = b"\x0f\x01"
    second = bytearray(PAGE_SIZE)
    second[0] = 0xEF
    found = scan_pages([(4, bytes(first)), (5, bytes(second))], lambda index: True)
    assert _key(found) == [(5 * PAGE_SIZE - 2, OccurrenceKind.WRPKRU)]
    assert found[0].page_span


def test_scan_pages_does_not_join_non_adjacent_pages():
    first = bytearray(PAGE_SIZE)
    first[-2:] = b"\x0f\x01"
    second = bytearray(PAGE_SIZE)
    second[0] = 0xEF
    assert scan_pages([(4, bytes(first)), (6, bytes(second))], lambda index: True) == []


def test_scan_pages_skips_non_executable_pages():
    data = bytearray(PAGE_SIZE)
    data[10:13] = b"\x0f\x01\xef"
    pages = [(0, bytes(data)), (1, bytes(data))]
    found = scan_pages(pages, lambda index: index == 1)
    assert _key(found) == [(PAGE_SIZE + 10, OccurrenceKind.WRPKRU)]


def test_scan_pages_rejects_short_page():
    with pytest.raises(PageSizeError):
        scan_pages([(0, b"\x00" * 100)], lambda index: True)


def test_scan_matches_naive_oracle_on_random_buffers():
    rng = random.Random(1)
    alphabet = [0x0F, 0x01, 0xEF, 0xAE, 0x28, 0x2F, 0x6B, 0xAC, 0x00, 0x90]
    for _ in range(campaign_size(10_000, 300)):
        size = rng.randrange(0, 2048)
        data = bytes(rng.choice(alphabet) if rng.random() < 0.7 else rng.randrange(256)
                     for _ in range(size))
        base = rng.randrange(0, 1 << 20)
        assert _key(scan(data, base)) == _key(naive_scan(data, base))


@pytest.mark.slow
def test_scan_throughput_is_linear():
    import time

    rng = random.Random(2)
    small = rng.randbytes(1 << 20)
    big = small * 2
    started = time.perf_counter()
    scan(small)
    t_small = time.perf_counter() - started
    started = time.perf_counter()
    scan(big)
    t_big = time.perf_counter() - started
    assert t_big <= 2.5 * t_small + 0.05
