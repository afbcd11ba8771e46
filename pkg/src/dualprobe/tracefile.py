"""Binary activation-trace files and their manifests.

A trace file holds the post-activation FFN values recorded while a model
produced one response::

    b"NTRC" | u32 LE version | u32 LE header length | header (UTF-8 JSON) | float32 LE values

Values are laid out ``[token][layer][neuron]``.  Model checkpoints reuse the
same container with the magic ``b"NWTS"`` (see :func:`write_container`).
"""

from __future__ import annotations

import io
import json
import struct
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import BinaryIO, Iterator

import numpy as np

TRACE_MAGIC = b"NTRC"
WEIGHTS_MAGIC = b"NWTS"
FORMAT_VERSION = 1
SUPPORTED_VERSIONS = frozenset({FORMAT_VERSION})

_U32 = struct.Struct("<I")
_VALUE_DTYPE = np.dtype("<f4")


class TraceError(Exception):
    """Base class for trace-store failures."""


class TraceValidationError(TraceError, ValueError):
    pass


class TraceParseError(TraceError):
    pass


class BadMagicError(TraceParseError):
    pass


class TruncatedPayloadError(TraceParseError):
    pass


class UnknownVersionError(TraceParseError):
    pass


class CountMismatchError(TraceParseError):
    pass


@dataclass(frozen=True)
class TraceHeader:
    model_id: str
    num_layers: int
    ffn_width: int
    question_id: str
    language: str
    culture: str
    num_response_tokens: int
    format_version: int = FORMAT_VERSION

    def validate(self) -> None:
        if self.num_layers < 1 or self.ffn_width < 1:
            raise TraceValidationError(
                f"num_layers and ffn_width must be >= 1, got {self.num_layers}, {self.ffn_width}"
            )
        if self.num_response_tokens < 0:
            raise TraceValidationError("num_response_tokens must be >= 0")
        if not self.question_id:
            raise TraceValidationError("question_id must be non-empty")

    @property
    def value_count(self) -> int:
        return self.num_response_tokens * self.num_layers * self.ffn_width

    def to_json(self) -> bytes:
        return json.dumps(asdict(self), sort_keys=True, ensure_ascii=False).encode("utf-8")

    @classmethod
    def from_dict(cls, doc: dict) -> "TraceHeader":
        try:
            return cls(
                model_id=str(doc["model_id"]),
                num_layers=int(doc["num_layers"]),
                ffn_width=int(doc["ffn_width"]),
                question_id=str(doc["question_id"]),
                language=str(doc["language"]),
                culture=str(doc["culture"]),
                num_response_tokens=int(doc["num_response_tokens"]),
                format_version=int(doc.get("format_version", FORMAT_VERSION)),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise TraceParseError(f"malformed trace header: {exc}") from exc


@dataclass(frozen=True, eq=False)
class ActivationTrace:
    """Activation values of one response, shape ``(tokens, layers, neurons)``."""

    header: TraceHeader
    values: np.ndarray

    def __post_init__(self) -> None:
        values = np.asarray(self.values, dtype=np.float32)
        if values.size == 0 and self.header.num_response_tokens == 0:
            values = values.reshape(
                self.header.num_response_tokens, self.header.num_layers, self.header.ffn_width
            )
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    def validate(self) -> None:
        self.header.validate()
        h = self.header
        expected = (h.num_response_tokens, h.num_layers, h.ffn_width)
        if self.values.shape != expected:
            raise TraceValidationError(f"values shape {self.values.shape} != header dims {expected}")
        if not np.all(np.isfinite(self.values)):
            raise TraceValidationError("trace contains non-finite values")

    @property
    def num_layers(self) -> int:
        return self.header.num_layers

    @property
    def ffn_width(self) -> int:
        return self.header.ffn_width

    @property
    def num_tokens(self) -> int:
        return self.header.num_response_tokens

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, ActivationTrace):
            return NotImplemented
        return (
            self.header == other.header
            and self.values.shape == other.values.shape
            and self.values.tobytes() == other.values.tobytes()
        )

    def checksum(self) -> str:
        return value_checksum(self.values.astype(_VALUE_DTYPE).tobytes())


def value_checksum(block: bytes) -> str:
    return f"{zlib.crc32(block) & 0xFFFFFFFF:08x}"


# -- generic container -------------------------------------------------------


def write_container(magic: bytes, header: dict, payload: bytes, sink: BinaryIO) -> int:
    head = json.dumps(header, sort_keys=True, ensure_ascii=False).encode("utf-8")
    blob = b"".join([magic, _U32.pack(FORMAT_VERSION), _U32.pack(len(head)), head, payload])
    sink.write(blob)
    return len(blob)


def _read_exact(source: BinaryIO, n: int, what: str) -> bytes:
    data = source.read(n)
    if len(data) != n:
        raise TruncatedPayloadError(f"truncated payload: wanted {n} bytes of {what}, got {len(data)}")
    return data


def read_container_header(source: BinaryIO, magic: bytes) -> dict:
    got = source.read(4)
    if got != magic:
        raise BadMagicError(f"bad magic {got!r}, expected {magic!r}")
    (version,) = _U32.unpack(_read_exact(source, 4, "version"))
    if version not in SUPPORTED_VERSIONS:
        raise UnknownVersionError(f"unknown format version {version}")
    (length,) = _U32.unpack(_read_exact(source, 4, "header length"))
    raw = _read_exact(source, length, "header")
    try:
        doc = json.loads(raw.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise TraceParseError(f"header is not valid UTF-8 JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise TraceParseError("header must be a key/value document")
    doc.setdefault("format_version", version)
    return doc


# -- traces -------------------------------------------------------------------


def write_trace(trace: ActivationTrace, destination: BinaryIO) -> int:
    """Serialize ``trace`` into ``destination``; returns the byte count.

    The trace is validated first so a bad trace writes nothing.
    """
    trace.validate()
    payload = trace.values.astype(_VALUE_DTYPE, copy=False).tobytes(order="C")
    return write_container(TRACE_MAGIC, asdict(trace.header), payload, destination)


def _read_trace_header(source: BinaryIO) -> TraceHeader:
    header = TraceHeader.from_dict(read_container_header(source, TRACE_MAGIC))
    try:
        header.validate()
    except TraceValidationError as exc:
        raise TraceParseError(str(exc)) from exc
    return header


def read_trace(source: BinaryIO) -> ActivationTrace:
    header = _read_trace_header(source)
    nbytes = header.value_count * _VALUE_DTYPE.itemsize
    block = source.read(nbytes)
    if len(block) < nbytes:
        raise TruncatedPayloadError(f"truncated payload: {len(block)} of {nbytes} value bytes")
    if source.read(1):
        raise CountMismatchError("value block longer than header dims declare")
    values = np.frombuffer(block, dtype=_VALUE_DTYPE).astype(np.float32)
    values = values.reshape(header.num_response_tokens, header.num_layers, header.ffn_width)
    trace = ActivationTrace(header, values)
    if not np.all(np.isfinite(trace.values)):
        raise TraceParseError("trace contains non-finite values")
    return trace


def iter_layer_rows(source: BinaryIO) -> tuple[TraceHeader, Iterator[tuple[int, int, np.ndarray]]]:
    """Stream a trace one ``(token, layer)`` row at a time.

    Only ``ffn_width`` floats are held in memory per step.  The trailing-bytes
    check happens once the iterator is exhausted.
    """
    header = _read_trace_header(source)
    row_bytes = header.ffn_width * _VALUE_DTYPE.itemsize

    def rows() -> Iterator[tuple[int, int, np.ndarray]]:
        for t in range(header.num_response_tokens):
            for layer in range(header.num_layers):
                raw = source.read(row_bytes)
                if len(raw) != row_bytes:
                    raise TruncatedPayloadError(f"truncated payload at token {t}, layer {layer}")
                yield t, layer, np.frombuffer(raw, dtype=_VALUE_DTYPE).astype(np.float32)
        if source.read(1):
            raise CountMismatchError("value block longer than header dims declare")

    return header, rows()


def trace_to_bytes(trace: ActivationTrace) -> bytes:
    buf = io.BytesIO()
    write_trace(trace, buf)
    return buf.getvalue()


def trace_from_bytes(data: bytes) -> ActivationTrace:
    return read_trace(io.BytesIO(data))


def save_trace(trace: ActivationTrace, path: str | Path) -> int:
    data = trace_to_bytes(trace)
    Path(path).write_bytes(data)
    return len(data)


def load_trace(path: str | Path) -> ActivationTrace:
    with open(path, "rb") as fh:
        return read_trace(fh)


# -- manifests ------------------------------------------------------------------


@dataclass(frozen=True)
class ManifestEntry:
    question_id: str
    language: str
    culture: str
    path: str
    byte_length: int
    checksum: str

    def to_line(self) -> str:
        fields = [self.question_id, self.language, self.culture, self.path, str(self.byte_length), self.checksum]
        for f in fields:
            if "\t" in f or "\n" in f:
                raise TraceValidationError(f"manifest field contains tab/newline: {f!r}")
        return "\t".join(fields)

    @classmethod
    def from_line(cls, line: str) -> "ManifestEntry":
        parts = line.rstrip("\n").split("\t")
        if len(parts) != 6:
            raise TraceParseError(f"manifest line needs 6 tab-separated fields, got {len(parts)}")
        qid, lang, culture, path, length, checksum = parts
        return cls(qid, lang, culture, path, int(length), checksum)

    @classmethod
    def for_trace(cls, trace: ActivationTrace, path: str, byte_length: int) -> "ManifestEntry":
        h = trace.header
        return cls(h.question_id, h.language, h.culture, path, byte_length, trace.checksum())


@dataclass(frozen=True)
class Violation:
    question_id: str
    kind: str
    detail: str


def write_manifest(entries: list[ManifestEntry], path: str | Path) -> None:
    text = "".join(e.to_line() + "\n" for e in entries)
    Path(path).write_text(text, encoding="utf-8")


def read_manifest(path: str | Path) -> list[ManifestEntry]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    return [ManifestEntry.from_line(line) for line in lines if line.strip()]


def _check_entry(entry: ManifestEntry, root: Path) -> list[Violation]:
    qid = entry.question_id
    target = root / entry.path
    try:
        data = target.read_bytes()
    except OSError as exc:
        return [Violation(qid, "missing", f"{entry.path}: {exc.strerror}")]
    out = []
    if len(data) != entry.byte_length:
        out.append(Violation(qid, "length", f"file has {len(data)} bytes, manifest says {entry.byte_length}"))
    try:
        trace = trace_from_bytes(data)
    except TraceError as exc:
        out.append(Violation(qid, "parse", str(exc)))
        return out
    if trace.checksum() != entry.checksum:
        out.append(Violation(qid, "checksum", f"value CRC-32 {trace.checksum()} != {entry.checksum}"))
    h = trace.header
    for field in ("question_id", "language", "culture"):
        if getattr(h, field) != getattr(entry, field):
            out.append(
                Violation(qid, "metadata", f"header {field}={getattr(h, field)!r}, row says {getattr(entry, field)!r}")
            )
    return out


def validate_manifest(entries: list[ManifestEntry], root: str | Path, jobs: int = 1) -> list[Violation]:
    """Check every manifest row against the trace file it names.

    Returns an empty list when everything resolves and agrees.
    """
    root = Path(root)
    violations: list[Violation] = []
    seen: set[str] = set()
    for e in entries:
        if e.question_id in seen:
            violations.append(Violation(e.question_id, "duplicate", "question_id repeated in manifest"))
        seen.add(e.question_id)
    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(lambda e: _check_entry(e, root), entries))
    else:
        results = [_check_entry(e, root) for e in entries]
    for r in results:
        violations.extend(r)
    return violations
