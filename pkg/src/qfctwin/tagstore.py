"""Binary time-tag files.

Layout (little-endian):

    header   64 bytes   magic b"QFCTAG\\x00\\x01", resolution_ps u64,
                        channel_count u8, zero padding
    records  16 bytes   timestamp_ps u64, channel u8, flags u8, 6 zero bytes

Records are globally sorted by timestamp. Flag bit 0 marks simulated dark
counts and carries no meaning for analysis.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import IO, Iterable, Iterator, NamedTuple

import numpy as np

MAGIC = b"QFCTAG\x00\x01"
HEADER_SIZE = 64
RECORD_SIZE = 16
FLAG_DARK = 0x01
FLAG_NOISE = 0x02

RECORD_DTYPE = np.dtype(
    [("timestamp", "<u8"), ("channel", "u1"), ("flags", "u1"), ("pad", "V6")]
)
assert RECORD_DTYPE.itemsize == RECORD_SIZE

_HEADER_STRUCT = struct.Struct("<8sQB")
DEFAULT_CHUNK = 1 << 16


class TagFormatError(ValueError):
    """Bad magic or malformed header."""


class TagCorruptionError(ValueError):
    """Truncated or inconsistent record data."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


class TagOrderError(ValueError):
    """Tags handed to a writer out of timestamp order."""

    def __init__(self, index: int, previous: int, current: int):
        super().__init__(
            f"tag {index} has timestamp {current} ps < previous {previous} ps"
        )
        self.index = index


class TimeTag(NamedTuple):
    timestamp: int
    channel: int
    flags: int = 0


@dataclass(frozen=True)
class TagFileHeader:
    resolution_ps: int = 1
    channel_count: int = 2

    def pack(self) -> bytes:
        head = _HEADER_STRUCT.pack(MAGIC, self.resolution_ps, self.channel_count)
        return head + bytes(HEADER_SIZE - len(head))

    @classmethod
    def unpack(cls, raw: bytes) -> "TagFileHeader":
        if len(raw) < HEADER_SIZE:
            raise TagFormatError(f"header too short: {len(raw)} bytes")
        magic, resolution, channels = _HEADER_STRUCT.unpack_from(raw)
        if magic != MAGIC:
            raise TagFormatError(f"bad magic {magic!r}, expected {MAGIC!r}")
        return cls(resolution_ps=resolution, channel_count=channels)


def make_records(timestamps, channels, flags=None) -> np.ndarray:
    """Pack parallel arrays into a structured record array."""
    timestamps = np.asarray(timestamps, dtype=np.uint64)
    rec = np.zeros(timestamps.shape[0], dtype=RECORD_DTYPE)
    rec["timestamp"] = timestamps
    rec["channel"] = np.asarray(channels, dtype=np.uint8)
    if flags is not None:
        rec["flags"] = np.asarray(flags, dtype=np.uint8)
    return rec


class TagWriter:
    """Streaming writer; enforces global timestamp order across chunks."""

    def __init__(self, path: str | os.PathLike, header: TagFileHeader | None = None):
        self.path = Path(path)
        self.header = header or TagFileHeader()
        self._fh: IO[bytes] | None = None
        self._last = 0
        self.count = 0

    def __enter__(self) -> "TagWriter":
        self._fh = open(self.path, "wb")
        self._fh.write(self.header.pack())
        return self

    def __exit__(self, *exc) -> None:
        self.close()

    def close(self) -> None:
        if self._fh is not None:
            self._fh.close()
            self._fh = None

    def write_records(self, rec: np.ndarray) -> None:
        if self._fh is None:
            raise RuntimeError("writer is not open")
        if rec.dtype != RECORD_DTYPE:
            rec = rec.astype(RECORD_DTYPE)
        if rec.size:
            ts = rec["timestamp"]
            if ts[0] < self._last:
                raise TagOrderError(self.count, int(self._last), int(ts[0]))
            bad = np.flatnonzero(ts[1:] < ts[:-1])
            if bad.size:
                i = int(bad[0]) + 1
                raise TagOrderError(self.count + i, int(ts[i - 1]), int(ts[i]))
            self._last = ts[-1]
            rec = rec.copy()
            rec["pad"] = b"\x00" * 6
            self._fh.write(rec.tobytes())
            self.count += rec.size

    def write(self, timestamps, channels, flags=None) -> None:
        self.write_records(make_records(timestamps, channels, flags))


def write_stream(
    path: str | os.PathLike,
    header: TagFileHeader,
    tags: Iterable[TimeTag] | Iterable[np.ndarray],
    chunk_size: int = DEFAULT_CHUNK,
) -> int:
    """Write tags (TimeTag items or record-array chunks); returns the count."""
    with TagWriter(path, header) as writer:
        buf: list[TimeTag] = []
        for item in tags:
            if isinstance(item, np.ndarray):
                if buf:
                    writer.write_records(_to_records(buf))
                    buf = []
                writer.write_records(item)
                continue
            buf.append(item)
            if len(buf) >= chunk_size:
                writer.write_records(_to_records(buf))
                buf = []
        if buf:
            writer.write_records(_to_records(buf))
        return writer.count


def _to_records(tags: list[TimeTag]) -> np.ndarray:
    arr = np.array([(t[0], t[1], t[2] if len(t) > 2 else 0) for t in tags],
                   dtype=np.uint64).reshape(-1, 3)
    return make_records(arr[:, 0], arr[:, 1], arr[:, 2])


def read_header(path: str | os.PathLike) -> TagFileHeader:
    with open(path, "rb") as fh:
        return TagFileHeader.unpack(fh.read(HEADER_SIZE))


def iter_chunks(
    path: str | os.PathLike,
    channel: int | None = None,
    validate: bool = False,
    chunk_size: int = DEFAULT_CHUNK,
    start_record: int = 0,
    stop_record: int | None = None,
) -> Iterator[np.ndarray]:
    """Lazily yield record arrays of at most ``chunk_size`` records.

    ``start_record``/``stop_record`` select a byte range for chunked parallel
    reading. With ``validate`` set, per-channel timestamp order is checked
    across chunk boundaries.
    """
    size = os.path.getsize(path)
    with open(path, "rb") as fh:
        TagFileHeader.unpack(fh.read(HEADER_SIZE))
        body = size - HEADER_SIZE
        n_full, rem = divmod(body, RECORD_SIZE)
        stop = n_full if stop_record is None else min(stop_record, n_full)
        fh.seek(HEADER_SIZE + start_record * RECORD_SIZE)
        last: dict[int, int] = {}
        pos = start_record
        while pos < stop:
            n = min(chunk_size, stop - pos)
            raw = fh.read(n * RECORD_SIZE)
            rec = np.frombuffer(raw, dtype=RECORD_DTYPE)
            if validate:
                _check_channel_order(rec, last, HEADER_SIZE + pos * RECORD_SIZE)
            pos += n
            if channel is not None:
                rec = rec[rec["channel"] == channel]
            yield rec
        if rem and stop_record is None:
            raise TagCorruptionError(
                f"truncated trailing record ({rem} of {RECORD_SIZE} bytes)",
                HEADER_SIZE + n_full * RECORD_SIZE,
            )


def _check_channel_order(rec: np.ndarray, last: dict[int, int], base: int) -> None:
    for ch in np.unique(rec["channel"]):
        idx = np.flatnonzero(rec["channel"] == ch)
        ts = rec["timestamp"][idx]
        prev = last.get(int(ch))
        if prev is not None and ts[0] < prev:
            raise TagCorruptionError(f"channel {ch} goes backwards", base + int(idx[0]) * RECORD_SIZE)
        bad = np.flatnonzero(ts[1:] < ts[:-1])
        if bad.size:
            j = int(idx[bad[0] + 1])
            raise TagCorruptionError(f"channel {ch} goes backwards", base + j * RECORD_SIZE)
        last[int(ch)] = int(ts[-1])


def read_stream(
    path: str | os.PathLike,
    channel: int | None = None,
    validate: bool = False,
    chunk_size: int = DEFAULT_CHUNK,
) -> Iterator[TimeTag]:
    """Lazily yield TimeTag items in file order."""
    for rec in iter_chunks(path, channel=channel, validate=validate, chunk_size=chunk_size):
        for ts, ch, fl in zip(rec["timestamp"].tolist(), rec["channel"].tolist(),
                              rec["flags"].tolist()):
            yield TimeTag(ts, ch, fl)


def read_all(path: str | os.PathLike, validate: bool = True) -> np.ndarray:
    chunks = list(iter_chunks(path, validate=validate, chunk_size=1 << 20))
    if not chunks:
        return np.zeros(0, dtype=RECORD_DTYPE)
    return np.concatenate(chunks)


def channel_timestamps(path: str | os.PathLike, validate: bool = True) -> dict[int, np.ndarray]:
    """Timestamps split per channel, as int64 arrays in ps."""
    rec = read_all(path, validate=validate)
    out: dict[int, np.ndarray] = {}
    for ch in np.unique(rec["channel"]):
        out[int(ch)] = rec["timestamp"][rec["channel"] == ch].astype(np.int64)
    return out


def record_count(path: str | os.PathLike) -> int:
    return (os.path.getsize(path) - HEADER_SIZE) // RECORD_SIZE


def sidecar_path(path: str | os.PathLike) -> Path:
    return Path(str(path) + ".meta.json")


def write_sidecar(path: str | os.PathLike, meta: dict) -> Path:
    side = sidecar_path(path)
    side.write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return side


def read_sidecar(path: str | os.PathLike) -> dict:
    return json.loads(sidecar_path(path).read_text(encoding="utf-8"))
