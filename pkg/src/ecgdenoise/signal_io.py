"""Reading and writing of physiological signal files.

Supports WFDB-style records (text header plus format-212 binary data, the
storage used by the MIT-BIH databases), plain CSV signals for fixtures, and
the toolkit's own binary segment-dataset file.
"""
from __future__ import annotations

import io
import os
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

SEGMENT_MAGIC = b"ECGSEG1\x00"
SEGMENT_VERSION = 1
DEFAULT_FS = 360.0


class HeaderParseError(ValueError):
    """Raised when a record header cannot be parsed; message names the line."""


class Fmt212Error(ValueError):
    """Raised for undecodable format-212 byte streams."""


class DatasetFileError(ValueError):
    """Raised when a segment-dataset file fails an integrity check."""


@dataclass(frozen=True)
class SignalInfo:
    file_name: str
    format_code: int
    gain: float        # ADU per mV
    baseline: int      # ADU offset subtracted before gain division


@dataclass(frozen=True)
class RecordHeader:
    record_name: str
    n_signals: int
    fs: float
    n_samples: int     # per signal
    signals: tuple[SignalInfo, ...]


@dataclass(frozen=True)
class SignalRecord:
    """Multi-channel signal in millivolts with its header metadata."""

    header: RecordHeader
    channels: np.ndarray  # [n_signals, n_samples] float64 mV

    def __post_init__(self):
        if self.channels.shape != (self.header.n_signals, self.header.n_samples):
            raise ValueError(
                f"channel matrix {self.channels.shape} does not match header "
                f"({self.header.n_signals} signals x {self.header.n_samples} samples)"
            )


def _parse_number(token: str, kind, line_no: int, what: str):
    try:
        return kind(token)
    except ValueError:
        raise HeaderParseError(
            f"line {line_no}: non-numeric {what} field {token!r}"
        ) from None


def parse_header(text: str) -> RecordHeader:
    """Parse a WFDB-style header.

    The first non-comment line is ``name n_signals fs n_samples``.  Each
    following line describes one signal: ``file_name format gain [adc_res
    [adc_zero ...]]``.  The gain token may carry a baseline in parentheses
    and a unit suffix, e.g. ``200(1024)/mV``; without one, the adc_zero
    field (when present) is used as the baseline, else 0.
    """
    lines = [
        (i + 1, ln.strip())
        for i, ln in enumerate(text.splitlines())
        if ln.strip() and not ln.lstrip().startswith("#")
    ]
    if not lines:
        raise HeaderParseError("line 1: empty header")

    line_no, record_line = lines[0]
    fields = record_line.split()
    if len(fields) < 4:
        raise HeaderParseError(
            f"line {line_no}: expected 'name n_signals fs n_samples', got {record_line!r}"
        )
    record_name = fields[0]
    n_signals = _parse_number(fields[1], int, line_no, "signal-count")
    fs = _parse_number(fields[2], float, line_no, "sampling-frequency")
    n_samples = _parse_number(fields[3], int, line_no, "sample-count")
    if n_signals < 1:
        raise HeaderParseError(f"line {line_no}: n_signals must be >= 1, got {n_signals}")
    if fs <= 0:
        raise HeaderParseError(f"line {line_no}: fs must be > 0, got {fs}")
    if n_samples < 0:
        raise HeaderParseError(f"line {line_no}: negative sample count {n_samples}")

    signal_lines = lines[1:]
    if len(signal_lines) != n_signals:
        raise HeaderParseError(
            f"line {line_no}: header declares {n_signals} signals "
            f"but {len(signal_lines)} signal lines follow"
        )

    signals = []
    for line_no, line in signal_lines:
        tokens = line.split()
        if len(tokens) < 2:
            raise HeaderParseError(
                f"line {line_no}: signal line needs at least file name and format"
            )
        file_name = tokens[0]
        fmt_token = tokens[1].split("x")[0].split(":")[0].split("+")[0]
        format_code = _parse_number(fmt_token, int, line_no, "format")

        gain = 200.0
        baseline = None
        if len(tokens) >= 3:
            gain_token = tokens[2].split("/")[0]
            if "(" in gain_token:
                gain_part, base_part = gain_token.split("(", 1)
                base_part = base_part.rstrip(")")
                baseline = _parse_number(base_part, int, line_no, "baseline")
                gain_token = gain_part
            gain = _parse_number(gain_token, float, line_no, "gain")
            if gain == 0.0:
                gain = 200.0  # WFDB convention: 0 means the default gain
        if baseline is None:
            baseline = _parse_number(tokens[4], int, line_no, "adc-zero") if len(tokens) >= 5 else 0
        if gain <= 0:
            raise HeaderParseError(f"line {line_no}: gain must be > 0, got {gain}")
        signals.append(SignalInfo(file_name, format_code, gain, baseline))

    return RecordHeader(record_name, n_signals, fs, n_samples, tuple(signals))


def decode_fmt212(data: bytes, total_samples: int, n_signals: int) -> np.ndarray:
    """Unpack format-212 bytes into raw ADU integers.

    Format 212 stores two 12-bit two's-complement samples in every 3 bytes:
    ``s1 = b0 | ((b1 & 0x0F) << 8)`` and ``s2 = b2 | ((b1 & 0xF0) << 4)``,
    with raw values >= 2048 mapping to ``raw - 4096``.  Consecutive samples
    interleave across signals.  Returns an int32 matrix of shape
    ``[n_signals, total_samples // n_signals]``.
    """
    if n_signals < 1:
        raise Fmt212Error(f"n_signals must be >= 1, got {n_signals}")
    if total_samples < 0:
        raise Fmt212Error(f"negative sample count {total_samples}")
    if total_samples % n_signals != 0:
        raise Fmt212Error(
            f"total sample count {total_samples} not divisible by {n_signals} signals"
        )
    needed = (total_samples * 3 + 1) // 2
    if len(data) < needed:
        raise Fmt212Error(
            f"byte stream truncated: {len(data)} bytes < {needed} needed "
            f"for {total_samples} samples (partial trailing triplet)"
        )
    if total_samples == 0:
        return np.zeros((n_signals, 0), dtype=np.int32)

    n_triplets = (total_samples + 1) // 2
    raw = np.frombuffer(data, dtype=np.uint8, count=3 * n_triplets).reshape(-1, 3)
    b0 = raw[:, 0].astype(np.int32)
    b1 = raw[:, 1].astype(np.int32)
    b2 = raw[:, 2].astype(np.int32)
    s1 = b0 | ((b1 & 0x0F) << 8)
    s2 = b2 | ((b1 & 0xF0) << 4)
    flat = np.empty(2 * n_triplets, dtype=np.int32)
    flat[0::2] = s1
    flat[1::2] = s2
    flat = flat[:total_samples]
    flat = np.where(flat >= 2048, flat - 4096, flat)
    return np.ascontiguousarray(flat.reshape(-1, n_signals).T)


def adu_to_mv(raw, gain: float, baseline: int):
    """Convert raw ADU values to millivolts: ``(raw - baseline) / gain``."""
    if gain <= 0:
        raise ValueError(f"gain must be > 0, got {gain}")
    return (np.asarray(raw, dtype=np.float64) - baseline) / gain


def read_record(hea_path: str | os.PathLike) -> SignalRecord:
    """Read a WFDB header plus its format-212 data file into millivolts.

    All signals of a record must share one data file (the MIT-BIH layout);
    formats other than 212 are rejected.
    """
    hea_path = Path(hea_path)
    header = parse_header(hea_path.read_text())
    for info in header.signals:
        if info.format_code != 212:
            raise Fmt212Error(
                f"{hea_path.name}: format {info.format_code} not supported (only 212)"
            )
    file_names = {info.file_name for info in header.signals}
    if len(file_names) != 1:
        raise Fmt212Error(f"{hea_path.name}: signals span multiple data files")
    dat_path = hea_path.parent / header.signals[0].file_name
    raw = decode_fmt212(
        dat_path.read_bytes(), header.n_samples * header.n_signals, header.n_signals
    )
    channels = np.empty((header.n_signals, header.n_samples), dtype=np.float64)
    for i, info in enumerate(header.signals):
        channels[i] = adu_to_mv(raw[i], info.gain, info.baseline)
    return SignalRecord(header, channels)


def read_csv_signal(text: str, fs: float = DEFAULT_FS, name: str = "csv") -> SignalRecord:
    """Parse a CSV signal: one column per channel, one row per sample.

    An optional first row ``ch0,ch1,...`` is skipped.  Values are taken to be
    millivolts already.
    """
    rows = [ln.strip() for ln in text.splitlines() if ln.strip()]
    if rows:
        first = [t.strip() for t in rows[0].split(",")]
        if all(re.fullmatch(r"ch\d+", t) for t in first):
            rows = rows[1:]
    if not rows:
        raise ValueError("empty CSV signal")
    parsed = []
    width = None
    for i, row in enumerate(rows, start=1):
        tokens = [t.strip() for t in row.split(",")]
        if width is None:
            width = len(tokens)
        elif len(tokens) != width:
            raise ValueError(f"row {i}: ragged CSV ({len(tokens)} values, expected {width})")
        try:
            parsed.append([float(t) for t in tokens])
        except ValueError:
            raise ValueError(f"row {i}: non-numeric value in {row!r}") from None
    channels = np.asarray(parsed, dtype=np.float64).T
    header = RecordHeader(
        record_name=name,
        n_signals=channels.shape[0],
        fs=fs,
        n_samples=channels.shape[1],
        signals=tuple(
            SignalInfo(file_name=f"{name}.csv", format_code=0, gain=1.0, baseline=0)
            for _ in range(channels.shape[0])
        ),
    )
    return SignalRecord(header, channels)


def read_csv_record(path: str | os.PathLike, fs: float = DEFAULT_FS) -> SignalRecord:
    path = Path(path)
    return read_csv_signal(path.read_text(), fs=fs, name=path.stem)


def atomic_write_bytes(path: str | os.PathLike, payload: bytes) -> None:
    """Write a file atomically (temp file in the same directory, then rename)."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(payload)
    os.replace(tmp, path)


def write_segments(path: str | os.PathLike, segments: np.ndarray | Sequence[np.ndarray]) -> None:
    """Write segments to the binary dataset format.

    Layout: magic ``ECGSEG1\\0``, then little-endian u32 version, count,
    channels, segment_length, then the float32 payload in segment-major,
    channel-major, time-minor order.
    """
    arr = np.asarray(segments, dtype=np.float32)
    if arr.ndim != 3:
        raise DatasetFileError(f"expected [count, channels, length] segments, got shape {arr.shape}")
    count, channels, length = arr.shape
    buf = io.BytesIO()
    buf.write(SEGMENT_MAGIC)
    buf.write(np.asarray([SEGMENT_VERSION, count, channels, length], dtype="<u4").tobytes())
    buf.write(arr.astype("<f4").tobytes())
    atomic_write_bytes(path, buf.getvalue())


def read_segments(path: str | os.PathLike) -> np.ndarray:
    """Read a segment-dataset file back into a ``[count, channels, length]`` f32 array."""
    data = Path(path).read_bytes()
    if len(data) < len(SEGMENT_MAGIC) + 16:
        raise DatasetFileError(f"{path}: file too short for a segment dataset")
    if data[: len(SEGMENT_MAGIC)] != SEGMENT_MAGIC:
        raise DatasetFileError(f"{path}: bad magic bytes")
    version, count, channels, length = np.frombuffer(
        data, dtype="<u4", count=4, offset=len(SEGMENT_MAGIC)
    )
    if version != SEGMENT_VERSION:
        raise DatasetFileError(f"{path}: unsupported version {version}")
    payload = data[len(SEGMENT_MAGIC) + 16 :]
    expected = int(count) * int(channels) * int(length) * 4
    if len(payload) != expected:
        raise DatasetFileError(
            f"{path}: payload is {len(payload)} bytes, expected {expected} "
            f"for {count} x {channels} x {length} float32 values"
        )
    arr = np.frombuffer(payload, dtype="<f4").reshape(int(count), int(channels), int(length))
    return arr.astype(np.float32)
