import hashlib
import math
from collections import Counter

import numpy as np
import pefile
import pytest
from hypothesis import given
from hypothesis import strategies as st

from mfgraph.errors import NotAPEError
from mfgraph.pe import (
    ByteEntropyConfig,
    byte_entropy_histogram,
    byte_histogram,
    count_windows,
    extract_features,
    parse_pe,
    shannon_entropy,
    string_stats,
)
from pe_builder import build_pe, rdata_offset


# ---------------------------------------------------------------- histograms

def test_byte_histogram_examples():
    assert byte_histogram(b"").sum() == 0
    h = byte_histogram(b"\x00" * 100)
    assert h[0] == 100 and h[1:].sum() == 0
    assert np.all(byte_histogram(bytes(range(256))) == 1)


@given(st.binary(max_size=4096))
def test_byte_histogram_sums_to_length(data):
    h = byte_histogram(data)
    assert h.shape == (256,)
    assert h.sum() == len(data)


def _entropy_histogram_oracle(data, window=1024, step=256):
    """Straight loop over windows with Counter-based entropy."""
    out = np.zeros((16, 16), dtype=np.int64)
    if len(data) < window:
        starts = [0]
        window = len(data)
    else:
        starts = range(0, len(data) - window + 1, step)
    for s in starts:
        chunk = data[s:s + window]
        counts = Counter(chunk)
        h = -sum(c / len(chunk) * math.log2(c / len(chunk)) for c in counts.values()) if chunk else 0.0
        row = min(int(h * 2), 15)
        for b in chunk:
            out[row, b >> 4] += 1
    return out.ravel()


def test_constant_window_goes_to_row_zero():
    h = byte_entropy_histogram(b"\x41" * 1024).reshape(16, 16)
    assert h[0, 4] == 1024
    assert h.sum() == 1024


def test_max_entropy_clamps_to_last_bin():
    h = byte_entropy_histogram(bytes(range(256)) * 4).reshape(16, 16)
    assert h[15].sum() == 1024 and h[:15].sum() == 0


def test_window_count_4096():
    cfg = ByteEntropyConfig()
    assert count_windows(4096, cfg) == (4096 - 1024) // 256 + 1 == 13
    data = np.random.default_rng(0).integers(0, 256, 4096, dtype=np.uint8).tobytes()
    assert byte_entropy_histogram(data).sum() == 13 * 1024


def test_short_input_is_one_window():
    assert count_windows(10) == 1
    assert byte_entropy_histogram(b"abcdefghij").sum() == 10
    assert byte_entropy_histogram(b"").sum() == 0


@given(st.binary(min_size=0, max_size=3000), st.sampled_from([(1024, 256), (512, 128), (256, 256)]))
def test_entropy_histogram_matches_loop_oracle(data, ws):
    window, step = ws
    got = byte_entropy_histogram(data, ByteEntropyConfig(window=window, step=step))
    assert np.array_equal(got, _entropy_histogram_oracle(data, window, step))


@given(st.integers(1024, 6000))
def test_entropy_histogram_total(n):
    data = np.random.default_rng(n).integers(0, 256, n, dtype=np.uint8).tobytes()
    assert byte_entropy_histogram(data).sum() == count_windows(n) * 1024


def test_byte_entropy_config_validation():
    with pytest.raises(ValueError):
        ByteEntropyConfig(window=1000, step=256)


# ---------------------------------------------------------------- strings

def test_mz_only():
    s = string_stats(b"MZMZ")
    assert s.MZ == 2 and s.numstrings == 0


def test_windows_path():
    s = string_stats(b"C:\\Windows\\")
    assert (s.paths, s.numstrings, s.avlength) == (1, 1, 11.0)


def test_empty_strings():
    s = string_stats(b"")
    assert s.numstrings == 0 and s.printables == 0 and s.entropy == 0.0
    assert sum(s.printabledist) == 0


def test_marker_counts():
    data = b"\x00HTTP://a.b\x00https://c\x00HKEY_LOCAL_MACHINE\x01hkey_x\x00"
    s = string_stats(data)
    assert s.urls == 2 and s.registry == 1
    assert s.numstrings == 4


# ---------------------------------------------------------------- parser

def _pefile_view(data):
    pe = pefile.PE(data=data)
    imports = {}
    for entry in getattr(pe, "DIRECTORY_ENTRY_IMPORT", []):
        imports[entry.dll.decode()] = [
            imp.name.decode() if imp.name is not None else f"ordinal{imp.ordinal}" for imp in entry.imports
        ]
    exports = []
    if hasattr(pe, "DIRECTORY_ENTRY_EXPORT"):
        exports = [s.name.decode() for s in pe.DIRECTORY_ENTRY_EXPORT.symbols]
    return pe, imports, exports


def _assert_matches_pefile(data):
    ours = parse_pe(data)
    pe, imports, exports = _pefile_view(data)
    assert ours.coff.machine == pe.FILE_HEADER.Machine
    assert ours.coff.timestamp == pe.FILE_HEADER.TimeDateStamp
    assert ours.coff.number_of_symbols == pe.FILE_HEADER.NumberOfSymbols
    assert ours.optional.magic == pe.OPTIONAL_HEADER.Magic
    assert ours.optional.subsystem == pe.OPTIONAL_HEADER.Subsystem
    assert ours.optional.dll_characteristics == pe.OPTIONAL_HEADER.DllCharacteristics
    assert ours.optional.sizeof_code == pe.OPTIONAL_HEADER.SizeOfCode
    assert ours.optional.sizeof_headers == pe.OPTIONAL_HEADER.SizeOfHeaders
    assert ours.optional.sizeof_heap_commit == pe.OPTIONAL_HEADER.SizeOfHeapCommit
    assert ours.optional.sizeof_image == pe.OPTIONAL_HEADER.SizeOfImage
    assert ours.optional.major_linker_version == pe.OPTIONAL_HEADER.MajorLinkerVersion
    assert len(ours.sections) == pe.FILE_HEADER.NumberOfSections
    for s, ref in zip(ours.sections, pe.sections):
        assert s.name == ref.Name.rstrip(b"\x00").decode()
        assert s.raw_size == ref.SizeOfRawData
        assert s.virtual_size == ref.Misc_VirtualSize
        assert s.characteristics == ref.Characteristics
        assert s.entropy == pytest.approx(ref.get_entropy(), abs=1e-12)
    for i, (size, va) in enumerate(ours.datadirs):
        ref = pe.OPTIONAL_HEADER.DATA_DIRECTORY[i]
        assert (size, va) == (ref.Size, ref.VirtualAddress)
    assert ours.imports == imports
    assert ours.exports == exports
    return ours


def test_minimal_64bit_pe():
    data = build_pe(is64=True)
    ours = _assert_matches_pefile(data)
    assert [s.name for s in ours.sections] == [".text"]
    assert ours.imports == {}
    assert ours.entry_section == ".text"


@pytest.mark.parametrize("is64", [False, True])
def test_full_fixture_matches_pefile(is64):
    data = build_pe(
        imports={"kernel32.dll": ["LoadLibraryA", "GetProcAddress", 17], "ws2_32.dll": ["connect"]},
        exports=["alpha", "beta"], is64=is64, data=b"hello world" * 40, symbols=3,
        extra_dirs={6: (0x1000, 28), 9: (0x1010, 24)},
    )
    ours = _assert_matches_pefile(data)
    assert ours.imports["kernel32.dll"][-1] == "ordinal17"


names = st.text(alphabet="abcdefghijklmnopqrstuvwxyzABCDEFGHIJ_0123456789", min_size=1, max_size=24)


@given(
    imports=st.dictionaries(names.map(lambda s: s + ".dll"), st.lists(names, min_size=1, max_size=6), max_size=5),
    exports=st.lists(names, max_size=4),
    is64=st.booleans(),
)
def test_random_fixtures_match_pefile(imports, exports, is64):
    _assert_matches_pefile(build_pe(imports=imports, exports=exports, is64=is64))


def test_truncated_import_table_keeps_the_rest():
    data = build_pe(imports={"kernel32.dll": ["Sleep", "ExitProcess"]}, exports=["x"])
    cut = data[:rdata_offset(data) + 10]  # mid-way through the first descriptor
    pe = parse_pe(cut)
    assert pe.imports == {}
    assert [s.name for s in pe.sections] == [".text", ".rdata"]
    assert pe.coff.timestamp == parse_pe(data).coff.timestamp
    assert pe.entry_section == ".text"


def test_dangling_thunk_rva_drops_all_imports():
    data = bytearray(build_pe(imports={"a.dll": ["f"], "b.dll": ["g"]}))
    off = rdata_offset(bytes(data))
    # point the second descriptor's lookup table far outside the image
    data[off + 20:off + 24] = (0x7FFF0000).to_bytes(4, "little")
    data[off + 36:off + 40] = (0x7FFF0000).to_bytes(4, "little")
    pe = parse_pe(bytes(data))
    assert pe.imports == {}
    assert len(pe.sections) == 2


def test_not_a_pe():
    with pytest.raises(NotAPEError):
        parse_pe(b"GIF89a" + b"\x00" * 200)
    with pytest.raises(NotAPEError):
        parse_pe(b"MZ" + b"\x00" * 200)
    with pytest.raises(NotAPEError):
        extract_features(b"", (2018, 1), 0)


def test_shannon_entropy_bounds():
    assert shannon_entropy(b"") == 0.0
    assert shannon_entropy(b"aaaa") == 0.0
    assert shannon_entropy(bytes(range(256))) == pytest.approx(8.0)


# ---------------------------------------------------------------- extraction

def test_extract_three_imports_one_dll():
    data = build_pe(imports={"kernel32.dll": ["Sleep", "ExitProcess", "GetTickCount"]})
    rec = extract_features(data, (2018, 3), 1)
    assert rec.general.imports == 3
    assert list(rec.imports) == ["kernel32.dll"]
    assert rec.exports == () and rec.general.exports == 0
    assert rec.sha256 == hashlib.sha256(data).hexdigest()
    assert rec.appeared == (2018, 3) and rec.label == 1


def test_extract_general_and_header_fields():
    data = build_pe(imports={"a.dll": ["f"]}, exports=["e1", "e2"], is64=True, symbols=5,
                    extra_dirs={6: (0x1000, 28)})
    rec = extract_features(data, (2018, 1), 0)
    g = rec.general
    assert g.size == len(data) and g.exports == 2 and g.symbols == 5
    assert g.has_debug == 1 and g.has_tls == 0 and g.has_signature == 0
    assert g.vsize == parse_pe(data).optional.sizeof_image
    assert rec.header.machine == "AMD64" and rec.header.magic == "PE32_PLUS"
    assert rec.header.subsystem == "WINDOWS_GUI"
    assert set(rec.header.dll_characteristics) == {"DYNAMIC_BASE", "NX_COMPAT"}
    assert "EXECUTABLE_IMAGE" in rec.header.characteristics
    assert rec.entry == ".text"
    assert rec.sections[0].props == ("CNT_CODE", "MEM_EXECUTE", "MEM_READ")
    assert sum(rec.histogram) == len(data)
    assert all(0.0 <= s.entropy <= 8.0 for s in rec.sections)


def test_extraction_is_pure():
    data = build_pe(imports={"a.dll": ["f", "g"]}, data=b"C:\\temp\\x http://x")
    assert extract_features(data, (2018, 1), 0) == extract_features(data, (2018, 1), 0)
