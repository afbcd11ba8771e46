import dataclasses
import io
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dualprobe.tracefile import (
    ActivationTrace,
    BadMagicError,
    CountMismatchError,
    ManifestEntry,
    TraceHeader,
    TraceValidationError,
    TruncatedPayloadError,
    UnknownVersionError,
    iter_layer_rows,
    read_manifest,
    save_trace,
    trace_from_bytes,
    trace_to_bytes,
    validate_manifest,
    write_manifest,
    write_trace,
)


def make_trace(values, qid="q1", language="en", culture="US"):
    values = np.asarray(values, dtype=np.float32)
    T, L, dm = values.shape
    header = TraceHeader("m", L, dm, qid, language, culture, T)
    return ActivationTrace(header, values)


def test_smallest_trace_layout():
    trace = make_trace([[[0.5, -0.25]]])
    buf = io.BytesIO()
    n = write_trace(trace, buf)
    data = buf.getvalue()
    assert n == len(data)
    assert data[:4] == b"NTRC"
    assert struct.unpack("<I", data[4:8])[0] == 1
    hlen = struct.unpack("<I", data[8:12])[0]
    assert len(data) == 12 + hlen + 8
    assert np.frombuffer(data[-8:], "<f4").tolist() == [0.5, -0.25]


def test_empty_response_has_no_value_bytes():
    header = TraceHeader("m", 2, 3, "q", "en", "US", 0)
    trace = ActivationTrace(header, np.zeros((0, 2, 3), np.float32))
    data = trace_to_bytes(trace)
    hlen = struct.unpack("<I", data[8:12])[0]
    assert len(data) == 12 + hlen
    assert trace_from_bytes(data) == trace


def test_nan_rejected_and_nothing_written():
    trace = make_trace([[[0.5, np.nan]]])
    buf = io.BytesIO()
    with pytest.raises(TraceValidationError):
        write_trace(trace, buf)
    assert buf.getvalue() == b""


def test_shape_mismatch_rejected():
    header = TraceHeader("m", 1, 2, "q", "en", "US", 2)
    with pytest.raises(TraceValidationError):
        write_trace(ActivationTrace(header, np.zeros((1, 1, 2))), io.BytesIO())


def test_bad_magic():
    data = b"XXXX" + trace_to_bytes(make_trace([[[1.0]]]))[4:]
    with pytest.raises(BadMagicError):
        trace_from_bytes(data)


def test_truncated_mid_values():
    data = trace_to_bytes(make_trace(np.ones((2, 2, 2))))
    with pytest.raises(TruncatedPayloadError):
        trace_from_bytes(data[:-3])


def test_unknown_version():
    data = bytearray(trace_to_bytes(make_trace([[[1.0]]])))
    data[4:8] = struct.pack("<I", 99)
    with pytest.raises(UnknownVersionError):
        trace_from_bytes(bytes(data))


def test_trailing_values_count_mismatch():
    data = trace_to_bytes(make_trace([[[1.0]]])) + b"\x00\x00\x80\x3f"
    with pytest.raises(CountMismatchError):
        trace_from_bytes(data)


def test_parse_errors_are_distinct():
    kinds = {BadMagicError, TruncatedPayloadError, UnknownVersionError, CountMismatchError}
    assert len(kinds) == 4
    for a in kinds:
        for b in kinds - {a}:
            assert not issubclass(a, b)


@settings(max_examples=50, deadline=None)
@given(
    st.integers(0, 4), st.integers(1, 3), st.integers(1, 5),
    st.text(min_size=1, max_size=8), st.integers(0, 2**32 - 1),
)
def test_roundtrip_property(T, L, dm, qid, seed):
    values = np.random.default_rng(seed).standard_normal((T, L, dm)).astype(np.float32)
    trace = make_trace(values, qid=qid, language="zh-Hans")
    back = trace_from_bytes(trace_to_bytes(trace))
    assert back == trace
    assert back.header == trace.header
    assert back.values.tobytes() == trace.values.tobytes()


def test_order_stability():
    values = np.arange(2 * 3 * 4, dtype=np.float32).reshape(2, 3, 4)
    back = trace_from_bytes(trace_to_bytes(make_trace(values)))
    assert back.values[1, 2, 3] == 23.0
    assert back.values[0, 1, 0] == 4.0


def test_layer_streaming_matches_full_read():
    values = np.random.default_rng(0).standard_normal((3, 2, 5)).astype(np.float32)
    header, rows = iter_layer_rows(io.BytesIO(trace_to_bytes(make_trace(values))))
    got = list(rows)
    assert header.num_response_tokens == 3
    assert [(t, l) for t, l, _ in got] == [(t, l) for t in range(3) for l in range(2)]
    for t, l, row in got:
        assert row.shape == (5,)
        np.testing.assert_array_equal(row, values[t, l])


def test_layer_streaming_detects_truncation():
    data = trace_to_bytes(make_trace(np.ones((2, 2, 2))))
    _, rows = iter_layer_rows(io.BytesIO(data[:-1]))
    with pytest.raises(TruncatedPayloadError):
        list(rows)


@pytest.fixture
def trace_dir(tmp_path):
    entries = []
    for i, lang in enumerate(["en", "zh", "es"]):
        tr = make_trace(np.full((1, 1, 2), float(i)), qid=f"q{i}", language=lang)
        rel = f"q{i}.ntrc"
        n = save_trace(tr, tmp_path / rel)
        entries.append(ManifestEntry.for_trace(tr, rel, n))
    return tmp_path, entries


def test_manifest_valid(trace_dir):
    root, entries = trace_dir
    assert validate_manifest(entries, root) == []
    assert validate_manifest(entries, root, jobs=3) == []


def test_manifest_roundtrip(trace_dir):
    root, entries = trace_dir
    write_manifest(entries, root / "manifest.tsv")
    assert read_manifest(root / "manifest.tsv") == entries
    first = (root / "manifest.tsv").read_text(encoding="utf-8").splitlines()[0]
    assert first.split("\t")[:4] == ["q0", "en", "US", "q0.ntrc"]


def test_manifest_wrong_checksum(trace_dir):
    root, entries = trace_dir
    bad = dataclasses.replace(entries[1], checksum="deadbeef")
    out = validate_manifest([entries[0], bad, entries[2]], root)
    assert [(v.question_id, v.kind) for v in out] == [("q1", "checksum")]


def test_manifest_header_language_mismatch(trace_dir):
    root, entries = trace_dir
    # rewrite q2's file with an edited header language; row still says "es"
    tr = trace_from_bytes((root / "q2.ntrc").read_bytes())
    edited = make_trace(tr.values, qid="q2", language="fa")
    n = save_trace(edited, root / "q2.ntrc")
    assert n == entries[2].byte_length
    out = validate_manifest(entries, root)
    assert [(v.question_id, v.kind) for v in out] == [("q2", "metadata")]


def test_manifest_missing_file(trace_dir):
    root, entries = trace_dir
    (root / "q0.ntrc").unlink()
    out = validate_manifest(entries, root)
    assert [(v.question_id, v.kind) for v in out] == [("q0", "missing")]
