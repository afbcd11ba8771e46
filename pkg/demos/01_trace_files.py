"""
Activation traces on disk
=========================

Write a trace, read it back, stream it one layer row at a time, and see
what a damaged file looks like to the reader and to the manifest check.
"""

import tempfile
from pathlib import Path

import numpy as np

from dualprobe.tracefile import (
    ActivationTrace,
    ManifestEntry,
    TraceHeader,
    TraceParseError,
    iter_layer_rows,
    load_trace,
    save_trace,
    validate_manifest,
)

# 3 response tokens, 2 layers, 4 FFN neurons
values = np.arange(24, dtype=np.float32).reshape(3, 2, 4) / 10
header = TraceHeader("toy-model", num_layers=2, ffn_width=4, question_id="t01.CN.zh",
                     language="zh", culture="CN", num_response_tokens=3)
trace = ActivationTrace(header, values)

root = Path(tempfile.mkdtemp())
n = save_trace(trace, root / "t01.ntrc")
print(f"wrote {n} bytes, checksum {trace.checksum()}")
assert load_trace(root / "t01.ntrc") == trace

# large traces need not be loaded whole
with open(root / "t01.ntrc", "rb") as fh:
    hdr, rows = iter_layer_rows(fh)
    for t, layer, row in rows:
        print(f"token {t} layer {layer}: {row}")

# a manifest row pins length and checksum
entry = ManifestEntry.for_trace(trace, "t01.ntrc", n)
print(entry.to_line())
print("violations (clean):", validate_manifest([entry], root))

# flip one byte in the value block
data = bytearray((root / "t01.ntrc").read_bytes())
data[-2] ^= 0x40
(root / "t01.ntrc").write_bytes(bytes(data))
print("violations (damaged):", validate_manifest([entry], root))

# chop the tail off
(root / "t01.ntrc").write_bytes(bytes(data[:-6]))
try:
    load_trace(root / "t01.ntrc")
except TraceParseError as exc:
    print(f"{type(exc).__name__}: {exc}")
