import json

import pytest
from hypothesis import given
from hypothesis import strategies as st

from mfgraph.errors import RecordParseError, SchemaError, StratificationError
from mfgraph.records import (
    UNLABELED,
    FeatureRecord,
    FilterStats,
    iter_records,
    load_filtered,
    parse_record,
    partition_by_month,
    split_train_test,
    write_month_cache,
    write_records,
)
from mfgraph.synthetic import make_records


def ember_line(**overrides):
    """A record in the public EMBER-2018 layout, including keys we ignore."""
    obj = {
        "sha256": "0abb4fda7d5b13801d63bee53e5e256be43e141faa077a6d149874242c3f02c2",
        "md5": "63956d6417f8f43357d9a8e79e52257e",
        "appeared": "2018-01",
        "label": 0,
        "avclass": "",
        "histogram": [3] * 256,
        "byteentropy": [1] * 256,
        "strings": {"numstrings": 14573, "avlength": 5.47, "printabledist": [10] * 96,
                    "printables": 960, "entropy": 6.41, "paths": 3, "urls": 0, "registry": 0, "MZ": 51},
        "general": {"size": 3101705, "vsize": 380928, "has_debug": 0, "exports": 0, "imports": 156,
                    "has_relocations": 0, "has_resources": 1, "has_signature": 0, "has_tls": 0, "symbols": 0},
        "header": {
            "coff": {"timestamp": 1124149349, "machine": "I386", "characteristics": ["CHARA_32BIT_MACHINE", "EXECUTABLE_IMAGE"]},
            "optional": {"subsystem": "WINDOWS_GUI", "dll_characteristics": [], "magic": "PE32",
                         "major_image_version": 0, "minor_image_version": 0, "major_linker_version": 7,
                         "minor_linker_version": 10, "major_operating_system_version": 4,
                         "minor_operating_system_version": 0, "major_subsystem_version": 4,
                         "minor_subsystem_version": 0, "sizeof_code": 26624, "sizeof_headers": 1024,
                         "sizeof_heap_commit": 4096},
        },
        "section": {"entry": ".text", "sections": [
            {"name": ".text", "size": 26624, "entropy": 6.28, "vsize": 26134, "props": ["CNT_CODE", "MEM_EXECUTE", "MEM_READ"]},
            {"name": ".rsrc", "size": 1024, "entropy": 2.1, "vsize": 900, "props": ["CNT_INITIALIZED_DATA", "MEM_READ"]},
        ]},
        "imports": {"KERNEL32.dll": ["GetTickCount", "GetProcAddress"], "USER32.dll": ["MessageBoxA"]},
        "exports": [],
        "datadirectories": [{"name": "EXPORT_TABLE", "size": 0, "virtual_address": 0},
                            {"name": "IMPORT_TABLE", "size": 180, "virtual_address": 30468}]
                           + [{"name": f"D{i}", "size": 0, "virtual_address": 0} for i in range(13)],
    }
    obj.update(overrides)
    return json.dumps(obj)


def test_parse_full_ember_record():
    rec = parse_record(ember_line())
    assert rec.appeared == (2018, 1)
    assert rec.general.imports == 156
    assert rec.header.machine == "I386"
    assert rec.header.sizeof_heap_commit == 4096
    assert rec.entry == ".text"
    assert [s.name for s in rec.sections] == [".text", ".rsrc"]
    assert rec.imports["USER32.dll"] == ["MessageBoxA"]
    assert rec.datadirectories[1].size == 180
    assert rec.strings.MZ == 51
    assert len(rec.histogram) == 256


def test_unlabeled_record():
    assert parse_record(ember_line(label=-1)).label == UNLABELED


def test_empty_exports_and_missing_imports():
    obj = json.loads(ember_line())
    del obj["imports"]
    rec = parse_record(json.dumps(obj))
    assert rec.exports == ()
    assert rec.imports == {}


def test_wrong_histogram_arity_is_schema_error():
    with pytest.raises(SchemaError):
        parse_record(ember_line(histogram=[0] * 255))


def test_negative_counts_rejected():
    with pytest.raises(SchemaError):
        parse_record(ember_line(byteentropy=[-1] + [0] * 255))


def test_bad_label_and_month():
    with pytest.raises(SchemaError):
        parse_record(ember_line(label=2))
    with pytest.raises(SchemaError):
        parse_record(ember_line(appeared="2018-13"))


def test_malformed_line_reports_line_number(tmp_path):
    p = tmp_path / "bad.jsonl"
    p.write_text(ember_line() + "\n" + "{not json\n")
    with pytest.raises(RecordParseError) as err:
        list(iter_records(p))
    assert err.value.line_number == 2
    assert "bad.jsonl:2" in str(err.value)


def test_record_round_trip():
    rec = parse_record(ember_line())
    assert parse_record(rec.to_json()) == rec


def test_load_filtered_drops_unlabeled_and_other_years(tmp_path):
    p = tmp_path / "a.jsonl"
    p.write_text("\n".join([
        ember_line(label=-1), ember_line(label=0), ember_line(label=1),
        ember_line(label=1, appeared="2017-11"),
    ]) + "\n")
    stats = FilterStats()
    kept = list(load_filtered([p], stats=stats))
    assert [r.label for r in kept] == [0, 1]
    assert (stats.kept, stats.dropped_unlabeled, stats.dropped_year) == (2, 1, 1)


def test_load_filtered_empty_file(tmp_path):
    p = tmp_path / "empty.jsonl"
    p.write_text("")
    stats = FilterStats()
    assert list(load_filtered([p], stats=stats)) == []
    assert stats.dropped == 0


def test_load_filtered_missing_file_names_path(tmp_path):
    missing = tmp_path / "nope.jsonl"
    with pytest.raises(OSError, match="nope.jsonl"):
        list(load_filtered([missing]))


def test_filtering_is_idempotent(tmp_path):
    recs = make_records(6, seed=1) + make_records(3, seed=2, appeared=(2017, 5))
    p = tmp_path / "in.jsonl"
    write_records(recs, p)
    once = list(load_filtered([p]))
    q = tmp_path / "once.jsonl"
    write_records(once, q)
    assert list(load_filtered([q])) == once


def test_partition_by_month():
    a = make_records(2, seed=1, appeared=(2018, 1))
    b = make_records(1, seed=2, appeared=(2018, 2))
    buckets = partition_by_month([b[0], a[0], a[1]])
    assert list(buckets) == [(2018, 1), (2018, 2)]
    assert [len(v) for v in buckets.values()] == [2, 1]
    assert partition_by_month([]) == {}


def test_twelve_months_twelve_buckets(tmp_path):
    recs = [r for m in range(12, 0, -1) for r in make_records(1, seed=m, appeared=(2018, m))]
    buckets = partition_by_month(recs)
    assert len(buckets) == 12
    paths = write_month_cache(buckets, tmp_path)
    assert [p.name for p in paths] == [f"2018-{m:02d}.jsonl" for m in range(1, 13)]


def _labelled(n_benign, n_mal):
    recs = make_records(n_benign + n_mal, seed=3, malicious_fraction=n_mal / (n_benign + n_mal))
    return recs


def test_split_exact_stratification():
    recs = _labelled(5, 5)
    split = split_train_test(recs, 0.8, seed=7)
    assert len(split.train) == 8 and len(split.test) == 2
    assert sum(r.label for r in split.train) == 4
    assert sum(r.label for r in split.test) == 1


def test_split_deterministic():
    recs = _labelled(10, 7)
    a = split_train_test(recs, 0.8, seed=7)
    b = split_train_test(recs, 0.8, seed=7)
    assert [r.sha256 for r in a.train] == [r.sha256 for r in b.train]


def test_split_ratio_precondition():
    with pytest.raises(ValueError):
        split_train_test(_labelled(5, 5), 1.0)


def test_split_needs_two_per_class():
    recs = make_records(6, seed=3, malicious_fraction=1 / 6)
    with pytest.raises(StratificationError):
        split_train_test(recs, 0.8)


@given(n_b=st.integers(2, 30), n_m=st.integers(2, 30), ratio=st.floats(0.1, 0.9), seed=st.integers(0, 99))
def test_split_properties(n_b, n_m, ratio, seed):
    recs = [FeatureRecord(sha256=f"{i:064x}", appeared=(2018, 1), label=int(i >= n_b)) for i in range(n_b + n_m)]
    split = split_train_test(recs, ratio, seed)
    train = {r.sha256 for r in split.train}
    test = {r.sha256 for r in split.test}
    assert not train & test
    assert len(train) + len(test) == n_b + n_m
    for cls, n in ((0, n_b), (1, n_m)):
        got = sum(r.label == cls for r in split.train)
        assert abs(got - ratio * n) < 1 or got in (1, n - 1)
