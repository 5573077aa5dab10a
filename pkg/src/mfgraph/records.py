"""Feature records: parsing, filtering and time partitioning.

Records use the public EMBER (2018 feature version) line-delimited JSON
layout, so a raw EMBER ``*.jsonl`` file can be read without conversion.
"""

from __future__ import annotations

import json
import logging
import os
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np

from .errors import RecordParseError, SchemaError, StratificationError

logger = logging.getLogger(__name__)

UNLABELED, BENIGN, MALICIOUS = -1, 0, 1

DATA_DIRECTORY_NAMES = (
    "EXPORT_TABLE",
    "IMPORT_TABLE",
    "RESOURCE_TABLE",
    "EXCEPTION_TABLE",
    "CERTIFICATE_TABLE",
    "BASE_RELOCATION_TABLE",
    "DEBUG",
    "ARCHITECTURE",
    "GLOBAL_PTR",
    "TLS_TABLE",
    "LOAD_CONFIG_TABLE",
    "BOUND_IMPORT",
    "IAT",
    "DELAY_IMPORT_DESCRIPTOR",
    "CLR_RUNTIME_HEADER",
)
NUM_DATA_DIRECTORIES = len(DATA_DIRECTORY_NAMES)
NUM_PRINTABLE = 96

_OPTIONAL_INT_FIELDS = (
    "major_image_version",
    "minor_image_version",
    "major_linker_version",
    "minor_linker_version",
    "major_operating_system_version",
    "minor_operating_system_version",
    "major_subsystem_version",
    "minor_subsystem_version",
    "sizeof_code",
    "sizeof_headers",
    "sizeof_heap_commit",
)


@dataclass(frozen=True)
class GeneralFeatures:
    size: int = 0
    vsize: int = 0
    has_debug: int = 0
    exports: int = 0
    imports: int = 0
    has_relocations: int = 0
    has_resources: int = 0
    has_signature: int = 0
    has_tls: int = 0
    symbols: int = 0

    FIELDS = (
        "size", "vsize", "has_debug", "exports", "imports",
        "has_relocations", "has_resources", "has_signature", "has_tls", "symbols",
    )

    def to_dict(self):
        return {name: getattr(self, name) for name in self.FIELDS}

    @classmethod
    def from_dict(cls, d):
        return cls(**{name: int(d.get(name, 0) or 0) for name in cls.FIELDS})


@dataclass(frozen=True)
class HeaderFeatures:
    timestamp: int = 0
    machine: str = ""
    characteristics: tuple = ()
    subsystem: str = ""
    dll_characteristics: tuple = ()
    magic: str = ""
    major_image_version: int = 0
    minor_image_version: int = 0
    major_linker_version: int = 0
    minor_linker_version: int = 0
    major_operating_system_version: int = 0
    minor_operating_system_version: int = 0
    major_subsystem_version: int = 0
    minor_subsystem_version: int = 0
    sizeof_code: int = 0
    sizeof_headers: int = 0
    sizeof_heap_commit: int = 0

    def versions(self):
        """Integer optional-header fields in their fixed order."""
        return [getattr(self, name) for name in _OPTIONAL_INT_FIELDS]

    def to_dict(self):
        optional = {
            "subsystem": self.subsystem,
            "dll_characteristics": list(self.dll_characteristics),
            "magic": self.magic,
        }
        optional.update({name: getattr(self, name) for name in _OPTIONAL_INT_FIELDS})
        return {
            "coff": {
                "timestamp": self.timestamp,
                "machine": self.machine,
                "characteristics": list(self.characteristics),
            },
            "optional": optional,
        }

    @classmethod
    def from_dict(cls, d):
        coff = d.get("coff") or {}
        opt = d.get("optional") or {}
        return cls(
            timestamp=int(coff.get("timestamp", 0) or 0),
            machine=str(coff.get("machine", "") or ""),
            characteristics=tuple(coff.get("characteristics") or ()),
            subsystem=str(opt.get("subsystem", "") or ""),
            dll_characteristics=tuple(opt.get("dll_characteristics") or ()),
            magic=str(opt.get("magic", "") or ""),
            **{name: int(opt.get(name, 0) or 0) for name in _OPTIONAL_INT_FIELDS},
        )


@dataclass(frozen=True)
class SectionEntry:
    name: str
    size: int
    entropy: float
    vsize: int
    props: tuple = ()

    def to_dict(self):
        return {
            "name": self.name,
            "size": self.size,
            "entropy": self.entropy,
            "vsize": self.vsize,
            "props": list(self.props),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            name=str(d.get("name", "")),
            size=int(d.get("size", 0) or 0),
            entropy=float(d.get("entropy", 0.0) or 0.0),
            vsize=int(d.get("vsize", 0) or 0),
            props=tuple(d.get("props") or ()),
        )


@dataclass(frozen=True)
class DataDirectory:
    name: str
    size: int = 0
    virtual_address: int = 0

    def to_dict(self):
        return {"name": self.name, "size": self.size, "virtual_address": self.virtual_address}


@dataclass(frozen=True)
class StringFeatures:
    numstrings: int = 0
    avlength: float = 0.0
    printabledist: tuple = (0,) * NUM_PRINTABLE
    printables: int = 0
    entropy: float = 0.0
    paths: int = 0
    urls: int = 0
    registry: int = 0
    MZ: int = 0

    def to_dict(self):
        return {
            "numstrings": self.numstrings,
            "avlength": self.avlength,
            "printabledist": list(self.printabledist),
            "printables": self.printables,
            "entropy": self.entropy,
            "paths": self.paths,
            "urls": self.urls,
            "registry": self.registry,
            "MZ": self.MZ,
        }

    @classmethod
    def from_dict(cls, d):
        dist = d.get("printabledist") or [0] * NUM_PRINTABLE
        if len(dist) != NUM_PRINTABLE:
            raise SchemaError(f"strings.printabledist must have {NUM_PRINTABLE} entries, got {len(dist)}")
        return cls(
            numstrings=int(d.get("numstrings", 0) or 0),
            avlength=float(d.get("avlength", 0.0) or 0.0),
            printabledist=tuple(int(v) for v in dist),
            printables=int(d.get("printables", 0) or 0),
            entropy=float(d.get("entropy", 0.0) or 0.0),
            paths=int(d.get("paths", 0) or 0),
            urls=int(d.get("urls", 0) or 0),
            registry=int(d.get("registry", 0) or 0),
            MZ=int(d.get("MZ", 0) or 0),
        )


def _empty_datadirs():
    return tuple(DataDirectory(name) for name in DATA_DIRECTORY_NAMES)


@dataclass(frozen=True)
class FeatureRecord:
    """One binary's nine static feature groups plus label and month."""

    sha256: str
    appeared: tuple  # (year, month)
    label: int
    general: GeneralFeatures = field(default_factory=GeneralFeatures)
    header: HeaderFeatures = field(default_factory=HeaderFeatures)
    imports: dict = field(default_factory=dict)  # dll -> [api, ...], insertion-ordered
    exports: tuple = ()
    sections: tuple = ()
    entry: str = ""
    datadirectories: tuple = field(default_factory=_empty_datadirs)
    histogram: tuple = (0,) * 256
    byteentropy: tuple = (0,) * 256
    strings: StringFeatures = field(default_factory=StringFeatures)

    def __post_init__(self):
        if self.label not in (UNLABELED, BENIGN, MALICIOUS):
            raise SchemaError(f"label must be -1, 0 or 1, got {self.label!r}")
        year, month = self.appeared
        if not 1 <= month <= 12:
            raise SchemaError(f"appeared month out of range: {month}")
        for name in ("histogram", "byteentropy"):
            values = getattr(self, name)
            if len(values) != 256:
                raise SchemaError(f"{name} must have 256 entries, got {len(values)}")
            if min(values) < 0:
                raise SchemaError(f"{name} has negative counts")
        if len(self.datadirectories) != NUM_DATA_DIRECTORIES:
            raise SchemaError(
                f"datadirectories must have {NUM_DATA_DIRECTORIES} entries, got {len(self.datadirectories)}"
            )

    @property
    def month_key(self):
        return tuple(self.appeared)

    @property
    def num_imported_functions(self):
        return sum(len(apis) for apis in self.imports.values())

    def to_dict(self):
        return {
            "sha256": self.sha256,
            "appeared": format_month(self.appeared),
            "label": self.label,
            "general": self.general.to_dict(),
            "header": self.header.to_dict(),
            "imports": {dll: list(apis) for dll, apis in self.imports.items()},
            "exports": list(self.exports),
            "section": {"entry": self.entry, "sections": [s.to_dict() for s in self.sections]},
            "datadirectories": [d.to_dict() for d in self.datadirectories],
            "histogram": list(self.histogram),
            "byteentropy": list(self.byteentropy),
            "strings": self.strings.to_dict(),
        }

    def to_json(self):
        return json.dumps(self.to_dict(), separators=(",", ":"))


def format_month(appeared):
    year, month = appeared
    return f"{int(year):04d}-{int(month):02d}"


def parse_month(text):
    try:
        year, month = str(text).split("-")[:2]
        return int(year), int(month)
    except ValueError:
        raise SchemaError(f"appeared must look like YYYY-MM, got {text!r}") from None


def _parse_datadirs(raw):
    dirs = []
    for i, name in enumerate(DATA_DIRECTORY_NAMES):
        if raw is not None and i < len(raw):
            d = raw[i]
            dirs.append(DataDirectory(
                str(d.get("name", name)),
                int(d.get("size", 0) or 0),
                int(d.get("virtual_address", 0) or 0),
            ))
        else:
            dirs.append(DataDirectory(name))
    return tuple(dirs)


def record_from_dict(obj) -> FeatureRecord:
    if not isinstance(obj, dict):
        raise SchemaError("record must be a JSON object")
    for key in ("sha256", "label", "appeared", "histogram", "byteentropy"):
        if key not in obj:
            raise SchemaError(f"missing required field {key!r}")
    section = obj.get("section") or {}
    imports = obj.get("imports") or {}
    return FeatureRecord(
        sha256=str(obj["sha256"]),
        appeared=parse_month(obj["appeared"]),
        label=int(obj["label"]),
        general=GeneralFeatures.from_dict(obj.get("general") or {}),
        header=HeaderFeatures.from_dict(obj.get("header") or {}),
        imports={str(dll): [str(a) for a in apis or ()] for dll, apis in imports.items()},
        exports=tuple(str(e) for e in obj.get("exports") or ()),
        sections=tuple(SectionEntry.from_dict(s) for s in section.get("sections") or ()),
        entry=str(section.get("entry", "") or ""),
        datadirectories=_parse_datadirs(obj.get("datadirectories")),
        histogram=tuple(int(v) for v in obj["histogram"]),
        byteentropy=tuple(int(v) for v in obj["byteentropy"]),
        strings=StringFeatures.from_dict(obj.get("strings") or {}),
    )


def parse_record(line: str, line_number: int | None = None, path=None) -> FeatureRecord:
    """Parse one line-delimited JSON record.

    Raises RecordParseError (a SchemaError) carrying the line number when the
    line is not valid JSON or does not match the record layout.
    """
    try:
        obj = json.loads(line)
    except json.JSONDecodeError as exc:
        raise RecordParseError(f"malformed JSON ({exc.msg})", line_number, path) from None
    try:
        return record_from_dict(obj)
    except RecordParseError:
        raise
    except (SchemaError, TypeError, ValueError, AttributeError) as exc:
        raise RecordParseError(str(exc), line_number, path) from None


def iter_records(path) -> Iterator[FeatureRecord]:
    """Yield every record of one file, unfiltered."""
    try:
        fh = open(path, "r", encoding="utf-8")
    except OSError as exc:
        raise OSError(f"cannot read {path}: {exc.strerror}") from exc
    with fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            yield parse_record(line, lineno, path)


@dataclass
class FilterStats:
    kept: int = 0
    dropped_unlabeled: int = 0
    dropped_year: int = 0

    @property
    def dropped(self):
        return self.dropped_unlabeled + self.dropped_year


def load_filtered(paths: Iterable, year: int | None = 2018, stats: FilterStats | None = None) -> Iterator[FeatureRecord]:
    """Stream labeled records that appeared in ``year`` (any year if None).

    Unlabeled records and records from other years are dropped; the counts
    are accumulated into ``stats`` when one is passed in.
    """
    if stats is None:
        stats = FilterStats()
    if isinstance(paths, (str, os.PathLike)):
        paths = [paths]
    for path in paths:
        for rec in iter_records(path):
            if rec.label == UNLABELED:
                stats.dropped_unlabeled += 1
            elif year is not None and rec.appeared[0] != year:
                stats.dropped_year += 1
            else:
                stats.kept += 1
                yield rec
    logger.info(
        "kept %d records, dropped %d unlabeled and %d outside %s",
        stats.kept, stats.dropped_unlabeled, stats.dropped_year, year,
    )


def partition_by_month(records: Iterable[FeatureRecord]) -> "OrderedDict[tuple, list]":
    buckets = {}
    for rec in records:
        buckets.setdefault(rec.month_key, []).append(rec)
    return OrderedDict(sorted(buckets.items()))


@dataclass
class DatasetSplit:
    train: list
    test: list
    seed: int
    ratio: float


def split_train_test(records, ratio: float = 0.8, seed: int = 0) -> DatasetSplit:
    """Stratified train/test split; within each class a fixed-seed shuffle
    picks ``round(ratio * n_class)`` training records. Both halves keep the
    input order."""
    if not 0.0 < ratio < 1.0:
        raise ValueError(f"ratio must lie strictly between 0 and 1, got {ratio}")
    records = list(records)
    labels = np.array([r.label for r in records])
    rng = np.random.default_rng(seed)
    train_idx = []
    for cls in (BENIGN, MALICIOUS):
        idx = np.flatnonzero(labels == cls)
        if len(idx) < 2:
            raise StratificationError(f"need at least 2 records of class {cls}, got {len(idx)}")
        n_train = min(max(int(round(ratio * len(idx))), 1), len(idx) - 1)
        train_idx.extend(rng.permutation(idx)[:n_train].tolist())
    in_train = np.zeros(len(records), dtype=bool)
    in_train[train_idx] = True
    train = [r for r, t in zip(records, in_train) if t]
    test = [r for r, t in zip(records, in_train) if not t]
    return DatasetSplit(train=train, test=test, seed=seed, ratio=ratio)


def write_records(records: Iterable[FeatureRecord], path) -> int:
    n = 0
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(rec.to_json())
            fh.write("\n")
            n += 1
    return n


def write_month_cache(buckets, out_dir) -> list:
    """Write one ``YYYY-MM.jsonl`` file per bucket and return the paths."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for key, recs in buckets.items():
        path = out_dir / f"{format_month(key)}.jsonl"
        write_records(recs, path)
        paths.append(path)
    return paths
