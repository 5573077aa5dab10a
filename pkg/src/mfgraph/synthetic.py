"""Synthetic feature records with a planted class signal.

Malicious samples lean towards a small set of injection/network APIs and
carry a high-entropy (packed-looking) section; benign samples lean towards
ordinary GUI/runtime imports and moderate section entropy. Every other
group is label-independent noise. ``drift`` in [0, 1] swaps part of the
malicious API vocabulary for unseen names, to exercise drift reports.
"""

from __future__ import annotations

import numpy as np

from .records import (
    DATA_DIRECTORY_NAMES,
    BENIGN,
    MALICIOUS,
    DataDirectory,
    FeatureRecord,
    GeneralFeatures,
    HeaderFeatures,
    SectionEntry,
    StringFeatures,
)

COMMON_DLLS = {
    "kernel32.dll": ["GetProcAddress", "LoadLibraryA", "GetModuleHandleA", "ExitProcess",
                     "GetLastError", "CloseHandle", "CreateFileW", "ReadFile", "WriteFile",
                     "GetTickCount", "Sleep", "HeapAlloc", "HeapFree"],
    "user32.dll": ["MessageBoxA", "CreateWindowExW", "ShowWindow", "GetMessageW",
                   "DispatchMessageW", "LoadIconW", "DefWindowProcW"],
    "advapi32.dll": ["RegOpenKeyExW", "RegQueryValueExW", "RegCloseKey", "OpenProcessToken"],
    "msvcrt.dll": ["malloc", "free", "memcpy", "printf", "strlen", "_initterm"],
    "gdi32.dll": ["CreateFontW", "SelectObject", "DeleteObject", "BitBlt"],
    "shell32.dll": ["ShellExecuteW", "SHGetFolderPathW"],
    "ole32.dll": ["CoInitialize", "CoCreateInstance", "CoUninitialize"],
    "comctl32.dll": ["InitCommonControlsEx", "ImageList_Create"],
}
SUSPICIOUS = {
    "kernel32.dll": ["VirtualAllocEx", "WriteProcessMemory", "CreateRemoteThread",
                     "VirtualProtect", "IsDebuggerPresent"],
    "ws2_32.dll": ["WSAStartup", "socket", "connect", "send", "recv"],
    "wininet.dll": ["InternetOpenA", "InternetOpenUrlA", "InternetReadFile"],
    "ntdll.dll": ["NtUnmapViewOfSection", "ZwQueryInformationProcess"],
}
DRIFTED = {
    "kernel32.dll": ["QueueUserAPC", "SetThreadContext", "ResumeThread"],
    "bcrypt.dll": ["BCryptEncrypt", "BCryptGenRandom"],
    "winhttp.dll": ["WinHttpOpen", "WinHttpSendRequest"],
}
SECTION_NAMES = [".text", ".rdata", ".data", ".rsrc", ".reloc", ".pdata", ".idata", ".tls"]
PACKED_NAMES = ["UPX0", "UPX1", ".packed", ".aspack", ".enigma"]
MACHINES = ["I386", "AMD64"]
SUBSYSTEMS = ["WINDOWS_GUI", "WINDOWS_CUI"]


def _hex(rng, n=64):
    return "".join("0123456789abcdef"[i] for i in rng.integers(0, 16, size=n))


def _pick(rng, items, k):
    k = min(k, len(items))
    return [items[i] for i in sorted(rng.choice(len(items), size=k, replace=False))]


def _imports(rng, malicious, drift):
    imports = {}
    for dll in _pick(rng, list(COMMON_DLLS), int(rng.integers(1, 6))):
        imports[dll] = _pick(rng, COMMON_DLLS[dll], int(rng.integers(1, 6)))
    plant = rng.random() < (0.9 if malicious else 0.06)
    if plant:
        vocab = DRIFTED if malicious and rng.random() < drift else SUSPICIOUS
        for dll in _pick(rng, list(vocab), int(rng.integers(1, 3))):
            apis = imports.setdefault(dll, [])
            apis.extend(a for a in _pick(rng, vocab[dll], int(rng.integers(1, 4))) if a not in apis)
    return imports


def _sections(rng, malicious):
    n = int(rng.integers(2, 7))
    names = _pick(rng, SECTION_NAMES, n)
    sections = []
    for name in names:
        size = int(rng.integers(1, 400)) * 512
        sections.append(SectionEntry(
            name=name,
            size=size,
            entropy=float(np.clip(rng.normal(5.2, 1.0), 0.0, 8.0)),
            vsize=int(size * rng.uniform(0.8, 1.5)),
            props=("CNT_CODE", "MEM_EXECUTE", "MEM_READ") if name == ".text" else ("CNT_INITIALIZED_DATA", "MEM_READ"),
        ))
    if rng.random() < (0.85 if malicious else 0.1):
        size = int(rng.integers(50, 800)) * 512
        sections.append(SectionEntry(
            name=str(rng.choice(PACKED_NAMES)) if malicious else ".rsrc",
            size=size,
            entropy=float(np.clip(rng.normal(7.6, 0.25), 0.0, 8.0)),
            vsize=size * 2,
            props=("MEM_EXECUTE", "MEM_READ", "MEM_WRITE"),
        ))
    return sections


def make_record(rng: np.random.Generator, label: int, appeared=(2018, 1), drift: float = 0.0) -> FeatureRecord:
    malicious = label == MALICIOUS
    imports = _imports(rng, malicious, drift)
    sections = _sections(rng, malicious)
    size = int(sum(s.size for s in sections) + 1024)
    hist = rng.multinomial(size, rng.dirichlet(np.full(256, 0.5)))
    beh = rng.multinomial(max(size // 4, 1), rng.dirichlet(np.full(256, 0.5)))
    dist = rng.multinomial(int(rng.integers(100, 5000)), rng.dirichlet(np.ones(96)))
    n_strings = int(rng.integers(10, 500))
    exports = tuple(f"export_{i}" for i in range(int(rng.integers(0, 4)))) if rng.random() < 0.2 else ()
    datadirs = tuple(
        DataDirectory(name, int(rng.integers(0, 4096)) if rng.random() < 0.5 else 0,
                      int(rng.integers(0x1000, 0x100000)))
        for name in DATA_DIRECTORY_NAMES
    )
    return FeatureRecord(
        sha256=_hex(rng),
        appeared=tuple(appeared),
        label=label,
        general=GeneralFeatures(
            size=size, vsize=int(size * 1.3), has_debug=int(rng.random() < 0.5),
            exports=len(exports), imports=sum(len(v) for v in imports.values()),
            has_relocations=int(rng.random() < 0.6), has_resources=int(rng.random() < 0.7),
            has_signature=int(rng.random() < 0.2), has_tls=int(rng.random() < 0.1),
            symbols=int(rng.integers(0, 20)),
        ),
        header=HeaderFeatures(
            timestamp=int(rng.integers(1_200_000_000, 1_550_000_000)),
            machine=str(rng.choice(MACHINES)),
            characteristics=("EXECUTABLE_IMAGE",),
            subsystem=str(rng.choice(SUBSYSTEMS)),
            dll_characteristics=("NX_COMPAT", "DYNAMIC_BASE") if rng.random() < 0.5 else ("NX_COMPAT",),
            magic="PE32",
            major_linker_version=int(rng.integers(6, 15)),
            sizeof_code=int(sections[0].size),
            sizeof_headers=1024,
            sizeof_heap_commit=4096,
        ),
        imports=imports,
        exports=exports,
        sections=tuple(sections),
        entry=sections[0].name,
        datadirectories=datadirs,
        histogram=tuple(int(v) for v in hist),
        byteentropy=tuple(int(v) for v in beh),
        strings=StringFeatures(
            numstrings=n_strings,
            avlength=float(dist.sum() / n_strings),
            printabledist=tuple(int(v) for v in dist),
            printables=int(dist.sum()),
            entropy=float(rng.uniform(4.0, 6.0)),
            paths=int(rng.integers(0, 5)), urls=int(rng.integers(0, 5)),
            registry=int(rng.integers(0, 5)), MZ=int(rng.integers(1, 4)),
        ),
    )


def make_records(n: int, seed: int = 0, appeared=(2018, 1), malicious_fraction: float = 0.5,
                 drift: float = 0.0) -> list:
    """``n`` records; exactly round(n * malicious_fraction) are malicious."""
    rng = np.random.default_rng(seed)
    n_mal = int(round(n * malicious_fraction))
    labels = np.array([MALICIOUS] * n_mal + [BENIGN] * (n - n_mal))
    rng.shuffle(labels)
    return [make_record(rng, int(lbl), appeared, drift) for lbl in labels]


def make_year(per_month: int, seed: int = 0, year: int = 2018, drift_per_month: float = 0.05) -> dict:
    """Twelve monthly buckets with drift growing linearly from January."""
    return {
        (year, m): make_records(per_month, seed=seed * 100 + m, appeared=(year, m),
                                drift=min(1.0, drift_per_month * (m - 1)))
        for m in range(1, 13)
    }
