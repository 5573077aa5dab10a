"""Static feature groups computed from raw PE bytes.

Produces FeatureRecords in the same layout the ingest layer reads, so
records extracted here and records from the public EMBER dump are
interchangeable downstream.
"""

from __future__ import annotations

import hashlib
import re
from dataclasses import dataclass

import numpy as np

from ..records import (
    DATA_DIRECTORY_NAMES,
    NUM_PRINTABLE,
    DataDirectory,
    FeatureRecord,
    GeneralFeatures,
    HeaderFeatures,
    SectionEntry,
    StringFeatures,
)
from . import parser as pep

_PRINTABLE_RUN = re.compile(rb"[\x20-\x7e]{5,}")
MIN_STRING_LEN = 5


@dataclass(frozen=True)
class ByteEntropyConfig:
    window: int = 1024
    step: int = 256
    entropy_bins: int = 16
    value_bins: int = 16

    def __post_init__(self):
        if self.window <= 0 or self.step <= 0 or self.window % self.step:
            raise ValueError("window must be a positive multiple of step")
        if self.entropy_bins * self.value_bins != 256 or self.value_bins != 16:
            raise ValueError("byte-entropy grid must be 16 x 16")


def _as_array(data) -> np.ndarray:
    return np.frombuffer(bytes(data), dtype=np.uint8)


def byte_histogram(data) -> np.ndarray:
    """Count of each byte value, length 256."""
    return np.bincount(_as_array(data), minlength=256).astype(np.int64)


def count_windows(length: int, cfg: ByteEntropyConfig = ByteEntropyConfig()) -> int:
    if length < cfg.window:
        return 1
    return (length - cfg.window) // cfg.step + 1


def byte_entropy_histogram(data, cfg: ByteEntropyConfig = ByteEntropyConfig()) -> np.ndarray:
    """Joint (window entropy, high nibble) counts over a sliding window.

    Each window's base-2 byte entropy selects one of 16 rows (width 0.5 bit,
    an entropy of exactly 8 lands in the last row); every byte of the window
    then adds one count in the column given by its high nibble. Inputs
    shorter than a window are treated as a single window. Returns the 16x16
    grid flattened row-major.
    """
    a = _as_array(data)
    out = np.zeros((cfg.entropy_bins, cfg.value_bins), dtype=np.int64)
    if len(a) < cfg.window:
        blocks = np.bincount(a, minlength=256)[None, :]
    else:
        n_win = count_windows(len(a), cfg)
        per = cfg.window // cfg.step
        n_steps = n_win + per - 1
        steps = a[: n_steps * cfg.step].reshape(n_steps, cfg.step).astype(np.int64)
        offsets = (np.arange(n_steps) * 256)[:, None]
        step_counts = np.bincount((steps + offsets).ravel(), minlength=n_steps * 256).reshape(n_steps, 256)
        csum = np.vstack([np.zeros((1, 256), dtype=np.int64), np.cumsum(step_counts, axis=0)])
        blocks = csum[per:per + n_win] - csum[:n_win]
    totals = blocks.sum(axis=1, keepdims=True)
    with np.errstate(divide="ignore", invalid="ignore"):
        p = np.where(totals > 0, blocks / np.maximum(totals, 1), 0.0)
        logp = np.where(p > 0, np.log2(np.where(p > 0, p, 1.0)), 0.0)
    entropy = np.clip(-(p * logp).sum(axis=1), 0.0, 8.0)
    hbin = np.minimum((entropy * 2).astype(np.int64), cfg.entropy_bins - 1)
    nibbles = blocks.reshape(len(blocks), 16, 16).sum(axis=2)
    np.add.at(out, hbin, nibbles)
    return out.ravel()


def string_stats(data) -> StringFeatures:
    """Printable-string statistics plus marker substring counts.

    Strings are maximal runs of 0x20-0x7E of length >= 5. Marker counts
    (``C:\\``, ``http(s)://``, ``HKEY_``, ``MZ``) run over the raw bytes;
    only the URL prefixes are matched case-insensitively.
    """
    data = bytes(data)
    runs = _PRINTABLE_RUN.findall(data)
    dist = np.zeros(NUM_PRINTABLE, dtype=np.int64)
    if runs:
        joined = np.frombuffer(b"".join(runs), dtype=np.uint8).astype(np.int64) - 0x20
        dist = np.bincount(joined, minlength=NUM_PRINTABLE)
    printables = int(dist.sum())
    entropy = 0.0
    if printables:
        p = dist[dist > 0] / printables
        entropy = float(max(0.0, -np.sum(p * np.log2(p))))
    lowered = data.lower()
    return StringFeatures(
        numstrings=len(runs),
        avlength=float(printables / len(runs)) if runs else 0.0,
        printabledist=tuple(int(v) for v in dist),
        printables=printables,
        entropy=entropy,
        paths=data.count(b"C:\\"),
        urls=lowered.count(b"http://") + lowered.count(b"https://"),
        registry=data.count(b"HKEY_"),
        MZ=data.count(b"MZ"),
    )


def _header_features(pe: pep.ParsedPe) -> HeaderFeatures:
    opt = pe.optional
    common = dict(
        timestamp=pe.coff.timestamp,
        machine=pep.machine_name(pe.coff.machine),
        characteristics=tuple(pep.flag_names(pe.coff.characteristics, pep.COFF_CHARACTERISTICS)),
    )
    if opt is None:
        return HeaderFeatures(**common)
    return HeaderFeatures(
        subsystem=pep.subsystem_name(opt.subsystem),
        dll_characteristics=tuple(pep.flag_names(opt.dll_characteristics, pep.DLL_CHARACTERISTICS)),
        magic={pep.PE32_MAGIC: "PE32", pep.PE32PLUS_MAGIC: "PE32_PLUS"}.get(opt.magic, str(opt.magic)),
        major_image_version=opt.major_image_version,
        minor_image_version=opt.minor_image_version,
        major_linker_version=opt.major_linker_version,
        minor_linker_version=opt.minor_linker_version,
        major_operating_system_version=opt.major_operating_system_version,
        minor_operating_system_version=opt.minor_operating_system_version,
        major_subsystem_version=opt.major_subsystem_version,
        minor_subsystem_version=opt.minor_subsystem_version,
        sizeof_code=opt.sizeof_code,
        sizeof_headers=opt.sizeof_headers,
        sizeof_heap_commit=opt.sizeof_heap_commit,
        **common,
    )


def _general_features(data: bytes, pe: pep.ParsedPe) -> GeneralFeatures:
    def present(idx):
        return int(pe.datadirs[idx][0] > 0)

    return GeneralFeatures(
        size=len(data),
        vsize=pe.optional.sizeof_image if pe.optional else 0,
        has_debug=present(pep.DIR_DEBUG),
        exports=len(pe.exports),
        imports=sum(len(v) for v in pe.imports.values()),
        has_relocations=present(pep.DIR_RELOC),
        has_resources=present(pep.DIR_RESOURCE),
        has_signature=present(pep.DIR_SECURITY),
        has_tls=present(pep.DIR_TLS),
        symbols=pe.coff.number_of_symbols,
    )


def extract_features(data, appeared, label) -> FeatureRecord:
    """Assemble all nine feature groups for one binary.

    Raises NotAPEError when ``data`` is not a PE file.
    """
    data = bytes(data)
    pe = pep.parse_pe(data)
    sections = tuple(
        SectionEntry(
            name=s.name,
            size=s.raw_size,
            entropy=s.entropy,
            vsize=s.virtual_size,
            props=tuple(pep.flag_names(s.characteristics, pep.SECTION_CHARACTERISTICS)),
        )
        for s in pe.sections
    )
    datadirs = tuple(
        DataDirectory(name, size, va) for name, (size, va) in zip(DATA_DIRECTORY_NAMES, pe.datadirs)
    )
    return FeatureRecord(
        sha256=hashlib.sha256(data).hexdigest(),
        appeared=tuple(appeared),
        label=int(label),
        general=_general_features(data, pe),
        header=_header_features(pe),
        imports={dll: list(apis) for dll, apis in pe.imports.items()},
        exports=tuple(pe.exports),
        sections=sections,
        entry=pe.entry_section,
        datadirectories=datadirs,
        histogram=tuple(int(v) for v in byte_histogram(data)),
        byteentropy=tuple(int(v) for v in byte_entropy_histogram(data)),
        strings=string_stats(data),
    )
