"""Struct-based PE/COFF parser.

Only what the nine static feature groups need is decoded: COFF and
optional headers, the section table, import and export directories and the
data-directory table. Damaged substructures degrade to empty values; the
only hard failure is a missing ``MZ``/``PE\\0\\0`` signature.

References:
    Microsoft, "PE Format", learn.microsoft.com/windows/win32/debug/pe-format
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from ..errors import NotAPEError

MZ_MAGIC = b"MZ"
PE_MAGIC = b"PE\x00\x00"
PE32_MAGIC = 0x10B
PE32PLUS_MAGIC = 0x20B

NUM_DATA_DIRS = 15
DIR_EXPORT, DIR_IMPORT, DIR_RESOURCE = 0, 1, 2
DIR_SECURITY, DIR_RELOC, DIR_DEBUG, DIR_TLS = 4, 5, 6, 9

MAX_IMPORT_DESCRIPTORS = 4096
MAX_THUNKS = 65536
MAX_EXPORT_NAMES = 65536
MAX_NAME_LEN = 1024

MACHINE_NAMES = {
    0x0: "UNKNOWN",
    0x14C: "I386",
    0x162: "R3000",
    0x166: "R4000",
    0x1C0: "ARM",
    0x1C4: "ARMNT",
    0x200: "IA64",
    0x8664: "AMD64",
    0xAA64: "ARM64",
    0xEBC: "EBC",
}

SUBSYSTEM_NAMES = {
    0: "UNKNOWN",
    1: "NATIVE",
    2: "WINDOWS_GUI",
    3: "WINDOWS_CUI",
    5: "OS2_CUI",
    7: "POSIX_CUI",
    8: "NATIVE_WINDOWS",
    9: "WINDOWS_CE_GUI",
    10: "EFI_APPLICATION",
    11: "EFI_BOOT_SERVICE_DRIVER",
    12: "EFI_RUNTIME_DRIVER",
    13: "EFI_ROM",
    14: "XBOX",
    16: "WINDOWS_BOOT_APPLICATION",
}

COFF_CHARACTERISTICS = (
    (0x0001, "RELOCS_STRIPPED"),
    (0x0002, "EXECUTABLE_IMAGE"),
    (0x0004, "LINE_NUMS_STRIPPED"),
    (0x0008, "LOCAL_SYMS_STRIPPED"),
    (0x0010, "AGGRESSIVE_WS_TRIM"),
    (0x0020, "LARGE_ADDRESS_AWARE"),
    (0x0080, "BYTES_REVERSED_LO"),
    (0x0100, "CHARA_32BIT_MACHINE"),
    (0x0200, "DEBUG_STRIPPED"),
    (0x0400, "REMOVABLE_RUN_FROM_SWAP"),
    (0x0800, "NET_RUN_FROM_SWAP"),
    (0x1000, "SYSTEM"),
    (0x2000, "DLL"),
    (0x4000, "UP_SYSTEM_ONLY"),
    (0x8000, "BYTES_REVERSED_HI"),
)

DLL_CHARACTERISTICS = (
    (0x0020, "HIGH_ENTROPY_VA"),
    (0x0040, "DYNAMIC_BASE"),
    (0x0080, "FORCE_INTEGRITY"),
    (0x0100, "NX_COMPAT"),
    (0x0200, "NO_ISOLATION"),
    (0x0400, "NO_SEH"),
    (0x0800, "NO_BIND"),
    (0x1000, "APPCONTAINER"),
    (0x2000, "WDM_DRIVER"),
    (0x4000, "GUARD_CF"),
    (0x8000, "TERMINAL_SERVER_AWARE"),
)

SECTION_CHARACTERISTICS = (
    (0x00000020, "CNT_CODE"),
    (0x00000040, "CNT_INITIALIZED_DATA"),
    (0x00000080, "CNT_UNINITIALIZED_DATA"),
    (0x00000200, "LNK_INFO"),
    (0x00000800, "LNK_REMOVE"),
    (0x00001000, "LNK_COMDAT"),
    (0x00008000, "GPREL"),
    (0x01000000, "LNK_NRELOC_OVFL"),
    (0x02000000, "MEM_DISCARDABLE"),
    (0x04000000, "MEM_NOT_CACHED"),
    (0x08000000, "MEM_NOT_PAGED"),
    (0x10000000, "MEM_SHARED"),
    (0x20000000, "MEM_EXECUTE"),
    (0x40000000, "MEM_READ"),
    (0x80000000, "MEM_WRITE"),
)
MEM_EXECUTE = 0x20000000


def flag_names(value, table):
    return [name for bit, name in table if value & bit]


def machine_name(machine_id):
    return MACHINE_NAMES.get(machine_id, f"0x{machine_id:04X}")


def subsystem_name(subsystem_id):
    return SUBSYSTEM_NAMES.get(subsystem_id, str(subsystem_id))


def shannon_entropy(data) -> float:
    """Base-2 entropy of the byte-value distribution of ``data`` (0 for empty)."""
    if len(data) == 0:
        return 0.0
    counts = np.bincount(np.frombuffer(bytes(data), dtype=np.uint8), minlength=256)
    p = counts[counts > 0] / len(data)
    return float(max(0.0, -np.sum(p * np.log2(p))))


@dataclass
class CoffHeader:
    machine: int = 0
    number_of_sections: int = 0
    timestamp: int = 0
    number_of_symbols: int = 0
    size_of_optional_header: int = 0
    characteristics: int = 0


@dataclass
class OptionalHeader:
    magic: int = 0
    major_linker_version: int = 0
    minor_linker_version: int = 0
    sizeof_code: int = 0
    entry_point: int = 0
    major_operating_system_version: int = 0
    minor_operating_system_version: int = 0
    major_image_version: int = 0
    minor_image_version: int = 0
    major_subsystem_version: int = 0
    minor_subsystem_version: int = 0
    sizeof_image: int = 0
    sizeof_headers: int = 0
    subsystem: int = 0
    dll_characteristics: int = 0
    sizeof_heap_commit: int = 0
    number_of_rva_and_sizes: int = 0


@dataclass
class Section:
    name: str
    virtual_size: int
    virtual_address: int
    raw_size: int
    raw_offset: int
    characteristics: int
    entropy: float = 0.0

    def contains_rva(self, rva):
        span = max(self.virtual_size, self.raw_size)
        return self.virtual_address <= rva < self.virtual_address + span


@dataclass
class ParsedPe:
    coff: CoffHeader
    optional: OptionalHeader | None
    sections: list = field(default_factory=list)
    imports: dict = field(default_factory=dict)
    exports: list = field(default_factory=list)
    datadirs: list = field(default_factory=lambda: [(0, 0)] * NUM_DATA_DIRS)  # (size, virtual_address)
    entry_section: str = ""


class _Reader:
    def __init__(self, data: bytes):
        self.data = data

    def unpack(self, fmt, offset):
        size = struct.calcsize(fmt)
        if offset < 0 or offset + size > len(self.data):
            raise ValueError(f"read of {size} bytes at {offset:#x} past end of file")
        return struct.unpack_from(fmt, self.data, offset)

    def cstring(self, offset, limit=MAX_NAME_LEN):
        if offset < 0 or offset >= len(self.data):
            raise ValueError(f"string offset {offset:#x} past end of file")
        end = self.data.find(b"\x00", offset, offset + limit)
        if end < 0:
            raise ValueError(f"unterminated string at {offset:#x}")
        return self.data[offset:end].decode("latin-1")


def _rva_to_offset(rva, sections, sizeof_headers):
    for s in sections:
        if s.contains_rva(rva):
            off = rva - s.virtual_address
            if off >= s.raw_size:
                raise ValueError(f"rva {rva:#x} points into uninitialised section data")
            return s.raw_offset + off
    if rva < sizeof_headers:
        return rva
    raise ValueError(f"rva {rva:#x} not mapped by any section")


def _parse_optional(rd: _Reader, off: int):
    (magic,) = rd.unpack("<H", off)
    opt = OptionalHeader(magic=magic)
    if magic == PE32_MAGIC:
        dirs_off, heap_fmt, heap_at, nrva_at = off + 96, "<I", off + 84, off + 92
    elif magic == PE32PLUS_MAGIC:
        dirs_off, heap_fmt, heap_at, nrva_at = off + 112, "<Q", off + 96, off + 108
    else:
        raise ValueError(f"unknown optional header magic {magic:#x}")
    opt.major_linker_version, opt.minor_linker_version, opt.sizeof_code = rd.unpack("<BBI", off + 2)
    (opt.entry_point,) = rd.unpack("<I", off + 16)
    (
        opt.major_operating_system_version,
        opt.minor_operating_system_version,
        opt.major_image_version,
        opt.minor_image_version,
        opt.major_subsystem_version,
        opt.minor_subsystem_version,
    ) = rd.unpack("<6H", off + 40)
    opt.sizeof_image, opt.sizeof_headers = rd.unpack("<II", off + 56)
    opt.subsystem, opt.dll_characteristics = rd.unpack("<HH", off + 68)
    (opt.sizeof_heap_commit,) = rd.unpack(heap_fmt, heap_at)
    (opt.number_of_rva_and_sizes,) = rd.unpack("<I", nrva_at)
    return opt, dirs_off


def _parse_datadirs(rd: _Reader, dirs_off, count):
    dirs = []
    for i in range(NUM_DATA_DIRS):
        if i < count:
            try:
                va, size = rd.unpack("<II", dirs_off + 8 * i)
            except ValueError:
                va, size = 0, 0
        else:
            va, size = 0, 0
        dirs.append((size, va))
    return dirs


def _parse_sections(rd: _Reader, table_off, count):
    sections = []
    for i in range(count):
        try:
            raw = rd.unpack("<8sIIIIIIHHI", table_off + 40 * i)
        except ValueError:
            break
        name = raw[0].split(b"\x00", 1)[0].decode("latin-1")
        vsize, va, raw_size, raw_off = raw[1], raw[2], raw[3], raw[4]
        sec = Section(name, vsize, va, raw_size, raw_off, raw[9])
        sec.entropy = shannon_entropy(rd.data[raw_off:raw_off + raw_size])
        sections.append(sec)
    return sections


def _parse_imports(rd: _Reader, rva, sections, sizeof_headers, is64):
    """All-or-nothing: any structural fault yields no imports."""
    imports = {}
    if rva == 0:
        return imports
    desc_off = _rva_to_offset(rva, sections, sizeof_headers)
    thunk_size, ordinal_flag = (8, 1 << 63) if is64 else (4, 1 << 31)
    thunk_fmt = "<Q" if is64 else "<I"
    for i in range(MAX_IMPORT_DESCRIPTORS):
        oft, _, _, name_rva, ft = rd.unpack("<IIIII", desc_off + 20 * i)
        if oft == 0 and name_rva == 0 and ft == 0:
            break
        dll = rd.cstring(_rva_to_offset(name_rva, sections, sizeof_headers))
        thunk_rva = oft or ft
        thunk_off = _rva_to_offset(thunk_rva, sections, sizeof_headers)
        apis = imports.setdefault(dll, [])
        for j in range(MAX_THUNKS):
            (thunk,) = rd.unpack(thunk_fmt, thunk_off + thunk_size * j)
            if thunk == 0:
                break
            if thunk & ordinal_flag:
                apis.append(f"ordinal{thunk & 0xFFFF}")
            else:
                hint_off = _rva_to_offset(thunk & 0x7FFFFFFF, sections, sizeof_headers)
                apis.append(rd.cstring(hint_off + 2))
        else:
            raise ValueError("import thunk array not terminated")
    else:
        raise ValueError("import descriptor table not terminated")
    return imports


def _parse_exports(rd: _Reader, rva, sections, sizeof_headers):
    if rva == 0:
        return []
    off = _rva_to_offset(rva, sections, sizeof_headers)
    fields = rd.unpack("<IIHHIIIIIII", off)
    n_names, names_rva = fields[7], fields[9]
    if n_names > MAX_EXPORT_NAMES:
        raise ValueError("implausible export name count")
    names = []
    if n_names:
        names_off = _rva_to_offset(names_rva, sections, sizeof_headers)
        for i in range(n_names):
            (name_rva,) = rd.unpack("<I", names_off + 4 * i)
            names.append(rd.cstring(_rva_to_offset(name_rva, sections, sizeof_headers)))
    return names


def _entry_section(sections, entry_point):
    for s in sections:
        if s.contains_rva(entry_point):
            return s.name
    for s in sections:
        if s.characteristics & MEM_EXECUTE:
            return s.name
    return ""


def parse_pe(data: bytes) -> ParsedPe:
    """Parse raw PE bytes into a ParsedPe.

    Raises NotAPEError when the DOS or PE signature is missing. Everything
    past the COFF header is best effort.
    """
    data = bytes(data)
    rd = _Reader(data)
    if len(data) < 64 or data[:2] != MZ_MAGIC:
        raise NotAPEError("missing MZ signature")
    (e_lfanew,) = rd.unpack("<I", 0x3C)
    if data[e_lfanew:e_lfanew + 4] != PE_MAGIC:
        raise NotAPEError("missing PE signature")
    try:
        f = rd.unpack("<HHIIIHH", e_lfanew + 4)
    except ValueError as exc:
        raise NotAPEError(f"truncated COFF header: {exc}") from None
    coff = CoffHeader(machine=f[0], number_of_sections=f[1], timestamp=f[2],
                      number_of_symbols=f[4], size_of_optional_header=f[5], characteristics=f[6])

    opt_off = e_lfanew + 24
    pe = ParsedPe(coff=coff, optional=None)
    dirs_off, n_dirs = 0, 0
    if coff.size_of_optional_header:
        try:
            pe.optional, dirs_off = _parse_optional(rd, opt_off)
            n_dirs = pe.optional.number_of_rva_and_sizes
        except ValueError:
            pe.optional = None
    if pe.optional is not None:
        pe.datadirs = _parse_datadirs(rd, dirs_off, n_dirs)
    pe.sections = _parse_sections(rd, opt_off + coff.size_of_optional_header, coff.number_of_sections)

    sizeof_headers = pe.optional.sizeof_headers if pe.optional else 0
    is64 = pe.optional is not None and pe.optional.magic == PE32PLUS_MAGIC
    try:
        pe.imports = _parse_imports(rd, pe.datadirs[DIR_IMPORT][1], pe.sections, sizeof_headers, is64)
    except (ValueError, struct.error):
        pe.imports = {}
    try:
        pe.exports = _parse_exports(rd, pe.datadirs[DIR_EXPORT][1], pe.sections, sizeof_headers)
    except (ValueError, struct.error):
        pe.exports = []
    if pe.optional is not None:
        pe.entry_section = _entry_section(pe.sections, pe.optional.entry_point)
    return pe

