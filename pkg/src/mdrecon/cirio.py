"""CIR file I/O.

Binary format (all little-endian):

    offset 0   magic "CIR1" (4 bytes)
    offset 4   u32 L, number of grid samples
    offset 8   f64 t_c, sampling period [s]
    offset 16  f64 f_c, carrier frequency [Hz]
    offset 24  L x (f64 real, f64 imag) interleaved samples
    ...        L x u8 availability mask (1 = available)
    ...        u32 metadata length, then UTF-8 JSON metadata blob

A CSV alternative with header columns index,real,imag,mask is accepted on
input only; a missing mask column means all samples are available.
"""

import csv
import json
import struct
import warnings

import numpy as np

from .synth import CirSequence

MAGIC = b"CIR1"

# CSV files carry no timing metadata; these match the packaged generator
# defaults so Doppler axes stay meaningful.
CSV_DEFAULT_T_C = 2.7e-4
CSV_DEFAULT_F_C = 60e9


class CirFormatError(ValueError):
    """Malformed CIR file; the message includes the failing byte offset."""


def save_cir(path, seq: CirSequence) -> None:
    """Write a sequence in the binary CIR format (lossless round-trip)."""
    length = len(seq)
    meta_blob = json.dumps(seq.meta, sort_keys=True).encode("utf-8")
    body = np.empty(2 * length, dtype="<f8")
    body[0::2] = seq.samples.real
    body[1::2] = seq.samples.imag
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", length))
        fh.write(struct.pack("<d", seq.t_c))
        fh.write(struct.pack("<d", seq.f_c))
        fh.write(body.tobytes())
        fh.write(seq.grid_mask.astype(np.uint8).tobytes())
        fh.write(struct.pack("<I", len(meta_blob)))
        fh.write(meta_blob)


def _need(buf: bytes, offset: int, n: int, what: str) -> bytes:
    if offset + n > len(buf):
        raise CirFormatError(
            f"truncated file at byte {offset}: expected {n} bytes for {what}, "
            f"only {len(buf) - offset} left"
        )
    return buf[offset:offset + n]


def load_cir(path) -> CirSequence:
    """Read a CIR file; dispatches to the CSV reader for .csv paths."""
    if str(path).lower().endswith(".csv"):
        return _load_csv(path)
    with open(path, "rb") as fh:
        buf = fh.read()
    if _need(buf, 0, 4, "magic") != MAGIC:
        raise CirFormatError(f"bad magic at byte 0: {buf[:4]!r}, expected {MAGIC!r}")
    length = struct.unpack("<I", _need(buf, 4, 4, "sample count"))[0]
    t_c = struct.unpack("<d", _need(buf, 8, 8, "t_c"))[0]
    f_c = struct.unpack("<d", _need(buf, 16, 8, "f_c"))[0]
    off = 24
    raw = _need(buf, off, 16 * length, "sample body")
    body = np.frombuffer(raw, dtype="<f8")
    samples = body[0::2] + 1j * body[1::2]
    off += 16 * length
    mask = np.frombuffer(_need(buf, off, length, "mask"), dtype=np.uint8).astype(bool)
    off += length
    meta_len = struct.unpack("<I", _need(buf, off, 4, "metadata length"))[0]
    off += 4
    blob = _need(buf, off, meta_len, "metadata blob")
    try:
        meta = json.loads(blob.decode("utf-8")) if meta_len else {}
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CirFormatError(f"bad metadata blob at byte {off}: {exc}") from exc
    return CirSequence(samples, mask, t_c, f_c, meta)


def _load_csv(path) -> CirSequence:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        cols = reader.fieldnames or []
        for required in ("index", "real", "imag"):
            if required not in cols:
                raise CirFormatError(f"CSV is missing required column '{required}'")
        has_mask = "mask" in cols
        rows = list(reader)
    if not has_mask:
        warnings.warn(f"{path}: no mask column, assuming all samples available")
    try:
        idx = np.array([int(r["index"]) for r in rows])
        re = np.array([float(r["real"]) for r in rows])
        im = np.array([float(r["imag"]) for r in rows])
        mask = (np.array([int(r["mask"]) for r in rows]).astype(bool)
                if has_mask else np.ones(len(rows), dtype=bool))
    except (TypeError, ValueError) as exc:
        raise CirFormatError(f"bad CSV value: {exc}") from exc
    if len(idx) == 0:
        raise CirFormatError("CSV holds no samples")
    if not np.array_equal(idx, np.arange(len(idx))):
        raise CirFormatError("CSV index column must run 0..L-1 consecutively")
    samples = np.where(mask, re + 1j * im, 0.0)
    return CirSequence(samples, mask, CSV_DEFAULT_T_C, CSV_DEFAULT_F_C,
                       {"source": "csv"})
