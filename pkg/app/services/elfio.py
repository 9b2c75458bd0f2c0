"""Read ELF64 and raw images, write rewritten ELF64 files.

Program headers decide what is executable. Section headers are only read
for symbol tables and may be missing.
"""
import io
import logging
import struct
from dataclasses import replace
from pathlib import Path

from elftools.common.exceptions import ELFError
from elftools.elf.elffile import ELFFile
from elftools.elf.sections import SymbolTableSection

from app.models.errors import ImageError, LayoutOverflow
from app.models.image import PF_R, PF_W, PF_X, LoadedImage, Segment, Symbol
from app.models.inspection import PAGE_SIZE, align_up
from app.models.rewrite import TRAP_BYTE, LayoutMode, RewritePolicy

logger = logging.getLogger(__name__)

ELF_MAGIC = b"\x7fELF"
ELFCLASS64 = 2
ELFDATA2LSB = 1
PT_NULL = 0
PT_LOAD = 1
PT_PHDR = 6

EHDR = struct.Struct("<16sHHIQQQIHHHHHH")
PHDR = struct.Struct("<IIQQQQQQ")
E_PHOFF_AT = 32
E_PHNUM_AT = 56


class ElfIOService:
    """Loads images and writes rewritten ones back."""

    @staticmethod
    def read_source(source):
        if isinstance(source, (bytes, bytearray, memoryview)):
            return bytes(source)
        try:
            return Path(source).read_bytes()
        except OSError as exc:
            raise ImageError(f"cannot read {source}: {exc}")

    @staticmethod
    def load(source, mode="elf", base=0):
        data = ElfIOService.read_source(source)
        if mode == "raw":
            return LoadedImage([Segment(base, data, PF_R | PF_X)], entry=base,
                               raw_mode=True, raw=data)
        if mode != "elf":
            raise ImageError(f"unknown image mode {mode!r}")
        ElfIOService._check_ident(data)
        try:
            elf = ELFFile(io.BytesIO(data))
            segments = ElfIOService._segments(elf)
            symbols = ElfIOService._symbols(elf)
            entry = elf.header['e_entry']
        except ELFError as exc:
            raise ImageError(f"malformed ELF: {exc}")
        image = LoadedImage(segments, symbols, entry, raw=data)
        logger.info("loaded ELF: %d segments (%d executable), %d symbols",
                    len(segments), len(image.executable_segments()), len(symbols))
        return image

    @staticmethod
    def _check_ident(data):
        if len(data) < EHDR.size or data[:4] != ELF_MAGIC:
            raise ImageError("not an ELF file (bad magic or short header)")
        if data[4] != ELFCLASS64:
            raise ImageError("32-bit ELF is not supported")
        if data[5] != ELFDATA2LSB:
            raise ImageError("big-endian ELF is not supported")

    @staticmethod
    def _segments(elf):
        if not elf.num_segments():
            raise ImageError("ELF has no program headers")
        segments = []
        for index, seg in enumerate(elf.iter_segments()):
            if seg['p_type'] != 'PT_LOAD':
                continue
            flags = seg['p_flags']
            if flags & PF_W and flags & PF_X:
                raise ImageError(f"segment {index} at 0x{seg['p_vaddr']:x} is writable and executable")
            segments.append(Segment(seg['p_vaddr'], seg.data(), flags, seg['p_offset'],
                                    seg['p_memsz'], index))
        ordered = sorted(segments, key=lambda s: s.vaddr)
        for a, b in zip(ordered, ordered[1:]):
            if a.end > b.vaddr:
                raise ImageError(f"segments at 0x{a.vaddr:x} and 0x{b.vaddr:x} overlap")
        return segments

    @staticmethod
    def _symbols(elf):
        symbols = []
        for section in elf.iter_sections():
            if not isinstance(section, SymbolTableSection):
                continue
            for sym in section.iter_symbols():
                if sym.name and sym['st_value'] and sym['st_info']['type'] in ('STT_FUNC', 'STT_NOTYPE'):
                    symbols.append(Symbol(sym.name, sym['st_value']))
        return list(dict.fromkeys(symbols))

    @staticmethod
    def store_rewritten(image, rewritten, trampolines=()):
        """Write `image` back with segment contents replaced.

        `rewritten` maps a segment's program header index (None for raw
        images) to its new bytes, which must keep the original size.
        `trampolines` is a list of (address, bytes) regions; each becomes a
        new R+X PT_LOAD appended to the file.
        """
        trampolines = [(address, bytes(code)) for address, code in trampolines if code]
        if image.raw_mode:
            return ElfIOService._store_raw(image, rewritten, trampolines)
        out = bytearray(image.raw)
        by_index = {s.index: s for s in image.segments}
        for index, code in rewritten.items():
            segment = by_index.get(index)
            if segment is None:
                raise ImageError(f"no loadable segment with index {index}")
            if len(code) != len(segment.data):
                raise LayoutOverflow(f"segment {index} grew from {len(segment.data)} to "
                                     f"{len(code)} bytes", offset=segment.vaddr)
            out[segment.offset:segment.offset + len(code)] = code
        if not trampolines:
            return bytes(out)

        for address, code in trampolines:
            clash = [s for s in image.segments
                     if s.vaddr < address + len(code) and address < s.end]
            if clash:
                raise LayoutOverflow(f"trampoline at 0x{address:x} overlaps segment at "
                                     f"0x{clash[0].vaddr:x}", offset=address)

        header = EHDR.unpack_from(out, 0)
        phoff, phentsize, phnum = header[5], header[9], header[10]
        table = bytearray(out[phoff:phoff + phentsize * phnum])
        for i in range(phnum):
            if struct.unpack_from("<I", table, i * phentsize)[0] == PT_PHDR:
                struct.pack_into("<I", table, i * phentsize, PT_NULL)
        for address, code in trampolines:
            offset = align_up(len(out), PAGE_SIZE) + address % PAGE_SIZE
            out += bytes(offset - len(out)) + code
            entry = PHDR.pack(PT_LOAD, PF_R | PF_X, offset, address, address, len(code),
                              len(code), PAGE_SIZE)
            table += entry + bytes(phentsize - PHDR.size)
        new_phoff = align_up(len(out), 8)
        out += bytes(new_phoff - len(out)) + table
        struct.pack_into("<Q", out, E_PHOFF_AT, new_phoff)
        struct.pack_into("<H", out, E_PHNUM_AT, phnum + len(trampolines))
        logger.info("appended %d trampoline segment(s), program headers moved to 0x%x",
                    len(trampolines), new_phoff)
        return bytes(out)

    @staticmethod
    def _store_raw(image, rewritten, trampolines):
        segment = image.segments[0]
        code = rewritten.get(None, rewritten.get(segment.index, segment.data))
        if len(code) != len(segment.data):
            raise LayoutOverflow("raw image size changed", offset=segment.vaddr)
        out = bytearray(code)
        for address, tramp in trampolines:
            gap = address - (segment.vaddr + len(out))
            if gap < 0:
                raise LayoutOverflow(f"trampoline at 0x{address:x} overlaps the image", offset=address)
            out += bytes([TRAP_BYTE]) * gap + tramp
        return bytes(out)

    @staticmethod
    def rewrite_image(image, policy=None, entries=None, marker="erim_entry"):
        """Rewrite every executable segment in place (fixed layout).

        Returns (output bytes, [RewriteResult]). Trampolines for a segment
        go on fresh pages above the highest mapped address.
        """
        from app.services.rewriter import RewriterService

        policy = replace(policy or RewritePolicy(), mode=LayoutMode.FIXED)
        rewriter = RewriterService(policy)
        if entries is None:
            entries = image.entry_points(marker)
        next_free = align_up(max(s.end for s in image.segments), PAGE_SIZE)
        if image.raw_mode:
            next_free = align_up(image.segments[0].end, 16)
        rewritten, trampolines, results = {}, [], []
        for segment in image.executable_segments():
            result = rewriter.rewrite_all(segment.data, entries, segment.vaddr,
                                          trampoline_base=next_free)
            results.append(result)
            if result.code != segment.data:
                rewritten[segment.index] = result.code
            if result.trampoline:
                trampolines.append((result.trampoline_base, result.trampoline))
                next_free = align_up(result.trampoline_base + len(result.trampoline), PAGE_SIZE)
        return ElfIOService.store_rewritten(image, rewritten, trampolines), results


load = ElfIOService.load
store_rewritten = ElfIOService.store_rewritten
