"""Event-word packing, the time-tag file format, the rate-capped readout
link, and the gated counter.

Every digitized event travels as one 64-bit little-endian word:

    bits [0..9)   fine code (9 bits)
    bits [9..49)  coarse period count (40 bits)
    bits [49..54) channel id (5 bits)
    bit  [54]     rollover flag (parity of completed coarse wraps)
    bits [55..64) reserved, must be zero

Words funnel through a bounded FIFO drained by a byte-rate-capped link;
arrivals that find the buffer full are dropped and counted. The counter
path tallies gated hit rates per channel without consuming link
bandwidth, which is how a 30 M/s count capability coexists with a
4.375 M word/s transfer ceiling.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import FileFormatError, PackError
from .tdc import TdcConfig, TdcRecord, gate_dead_time

FINE_BITS = 9
COARSE_BITS = 40
CHANNEL_BITS = 5
_FINE_MASK = (1 << FINE_BITS) - 1
_COARSE_MASK = (1 << COARSE_BITS) - 1
_CHANNEL_MASK = (1 << CHANNEL_BITS) - 1
_COARSE_SHIFT = FINE_BITS
_CHANNEL_SHIFT = FINE_BITS + COARSE_BITS
_ROLLOVER_SHIFT = _CHANNEL_SHIFT + CHANNEL_BITS  # 54
_RESERVED_SHIFT = _ROLLOVER_SHIFT + 1  # 55

WORD_SIZE = 8  # bytes
TICK_PS = 1_000_000.0  # 1 us discrete-time step for the link simulation


def pack(record: TdcRecord, rollover: bool = False) -> int:
    """Pack a record into its 64-bit word. Overflowing any field is an
    error, never a silent truncation."""
    if not 0 <= record.fine <= _FINE_MASK:
        raise PackError(f"fine {record.fine} exceeds {FINE_BITS} bits")
    if not 0 <= record.coarse <= _COARSE_MASK:
        raise PackError(f"coarse {record.coarse} exceeds {COARSE_BITS} bits")
    if not 0 <= record.channel <= _CHANNEL_MASK:
        raise PackError(f"channel {record.channel} exceeds {CHANNEL_BITS} bits")
    return (
        record.fine
        | (record.coarse << _COARSE_SHIFT)
        | (record.channel << _CHANNEL_SHIFT)
        | (int(bool(rollover)) << _ROLLOVER_SHIFT)
    )


def unpack(word: int) -> tuple[TdcRecord, bool]:
    """Inverse of :func:`pack`. Nonzero reserved bits are an error."""
    if not 0 <= word < (1 << 64):
        raise PackError(f"word {word:#x} is not a 64-bit value")
    if word >> _RESERVED_SHIFT:
        raise PackError(f"word {word:#018x} has nonzero reserved bits")
    record = TdcRecord(
        channel=(word >> _CHANNEL_SHIFT) & _CHANNEL_MASK,
        coarse=(word >> _COARSE_SHIFT) & _COARSE_MASK,
        fine=word & _FINE_MASK,
    )
    return record, bool((word >> _ROLLOVER_SHIFT) & 1)


def pack_words(
    channel: np.ndarray,
    coarse: np.ndarray,
    fine: np.ndarray,
    rollover: np.ndarray | int = 0,
) -> np.ndarray:
    """Vectorized pack of parallel field arrays into uint64 words."""
    ch = np.asarray(channel, dtype=np.int64)
    co = np.asarray(coarse, dtype=np.int64)
    fi = np.asarray(fine, dtype=np.int64)
    ro = np.broadcast_to(np.asarray(rollover, dtype=np.int64), fi.shape)
    for name, arr, limit in (
        ("fine", fi, _FINE_MASK),
        ("coarse", co, _COARSE_MASK),
        ("channel", ch, _CHANNEL_MASK),
        ("rollover", ro, 1),
    ):
        if arr.size and (arr.min() < 0 or arr.max() > limit):
            bad = int(np.argmax((arr < 0) | (arr > limit)))
            raise PackError(f"{name}[{bad}] = {arr[bad]} out of field range")
    w = fi.astype(np.uint64)
    w |= co.astype(np.uint64) << np.uint64(_COARSE_SHIFT)
    w |= ch.astype(np.uint64) << np.uint64(_CHANNEL_SHIFT)
    w |= ro.astype(np.uint64) << np.uint64(_ROLLOVER_SHIFT)
    return w


def unpack_words(words: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Vectorized unpack to (channel, coarse, fine, rollover) arrays."""
    w = np.asarray(words, dtype=np.uint64)
    if w.size and np.any(w >> np.uint64(_RESERVED_SHIFT)):
        bad = int(np.argmax(w >> np.uint64(_RESERVED_SHIFT) != 0))
        raise PackError(f"word {bad} ({int(w[bad]):#018x}) has nonzero reserved bits")
    channel = ((w >> np.uint64(_CHANNEL_SHIFT)) & np.uint64(_CHANNEL_MASK)).astype(np.int64)
    coarse = ((w >> np.uint64(_COARSE_SHIFT)) & np.uint64(_COARSE_MASK)).astype(np.int64)
    fine = (w & np.uint64(_FINE_MASK)).astype(np.int64)
    rollover = ((w >> np.uint64(_ROLLOVER_SHIFT)) & np.uint64(1)).astype(np.int64)
    return channel, coarse, fine, rollover


def unwrap_coarse(coarse: np.ndarray, coarse_bits: int = COARSE_BITS) -> np.ndarray:
    """Undo coarse-counter wraparound for one channel's time-ordered records.

    Assumes a monotone underlying stream: every decrease of the coarse
    field marks one completed rollover of the counter.
    """
    c = np.asarray(coarse, dtype=np.int64)
    if c.size == 0:
        return c.copy()
    wraps = np.concatenate(([0], np.cumsum(np.diff(c) < 0)))
    return c + wraps * (1 << coarse_bits)


@dataclass
class ReadoutBuffer:
    """Bounded FIFO between the digitizers and the host link."""

    depth: int
    occupancy: int = 0
    drops: int = 0
    drained_bytes: int = 0
    arrived: int = 0
    delivered: int = 0

    def conserved(self) -> bool:
        return self.arrived == self.delivered + self.drops + self.occupancy


def stream(
    arrival_times: np.ndarray,
    depth: int,
    link_rate: float,
    word_size: int = WORD_SIZE,
    tick_ps: float = TICK_PS,
) -> tuple[ReadoutBuffer, np.ndarray]:
    """Push time-stamped words through the bounded buffer and capped link.

    Discrete-time simulation: within each tick all arrivals enqueue first
    (dropping when the buffer is full), then the link drains whatever its
    accumulated byte budget allows. Returns the final buffer state and
    the indices of delivered words in delivery order. The byte budget is
    work-conserving: an idle link accrues no credit.
    """
    if depth <= 0:
        raise PackError("buffer depth must be positive")
    t = np.asarray(arrival_times, dtype=float)
    order = np.argsort(t, kind="stable")
    t = t[order]
    if t.size and t[0] < 0:
        raise PackError("arrival times must be nonnegative")
    buf = ReadoutBuffer(depth=depth)
    delivered: list[np.ndarray] = []
    if t.size == 0:
        return buf, np.empty(0, dtype=np.int64)

    bytes_per_tick = link_rate * tick_ps / 1e12
    n_ticks = int(np.floor(t[-1] / tick_ps)) + 1
    # First arrival index of each tick.
    tick_of = np.floor(t / tick_ps).astype(np.int64)
    starts = np.searchsorted(tick_of, np.arange(n_ticks + 1))

    accepted: list[np.ndarray] = []
    budget = 0.0
    for tick in range(n_ticks):
        lo, hi = starts[tick], starts[tick + 1]
        n_new = hi - lo
        if n_new:
            free = depth - buf.occupancy
            take = min(free, n_new)
            if take:
                accepted.append(order[lo : lo + take])
                buf.occupancy += take
            buf.drops += n_new - take
            buf.arrived += n_new
        budget += bytes_per_tick
        can_drain = min(int(budget // word_size), buf.occupancy)
        if can_drain:
            buf.occupancy -= can_drain
            buf.delivered += can_drain
            buf.drained_bytes += can_drain * word_size
            budget -= can_drain * word_size
        if buf.occupancy == 0:
            budget = 0.0  # idle link accrues no credit
    flat = (
        np.concatenate(accepted) if accepted else np.empty(0, dtype=np.int64)
    )
    return buf, flat[: buf.delivered].astype(np.int64)


@dataclass
class CounterBank:
    """Per-channel hit counts in contiguous, non-overlapping gates."""

    gate_length: float  # ps
    counts: np.ndarray  # shape (n_channels, n_gates)

    def totals(self) -> np.ndarray:
        return self.counts.sum(axis=1)


def count_gated(
    times: np.ndarray,
    channels: np.ndarray,
    gate_length: float,
    n_gates: int,
    config: TdcConfig,
) -> CounterBank:
    """Dead-time-gated hit counts per channel per gate.

    The counter sits beside the word stream in the readout fabric, so its
    rate capability is independent of the link budget.
    """
    if gate_length <= 0:
        raise PackError("gate_length must be positive")
    t = np.asarray(times, dtype=float)
    ch = np.asarray(channels, dtype=np.int64)
    counts = np.zeros((config.n_channels, n_gates), dtype=np.int64)
    for c in range(config.n_channels):
        tc = np.sort(t[ch == c])
        if tc.size == 0:
            continue
        keep, _ = gate_dead_time(tc, config.dead_time)
        gated = tc[keep]
        gate_idx = np.floor(gated / gate_length).astype(np.int64)
        valid = (gate_idx >= 0) & (gate_idx < n_gates)
        counts[c] += np.bincount(gate_idx[valid], minlength=n_gates)
    return CounterBank(gate_length=gate_length, counts=counts)


# --- Time-tag file -----------------------------------------------------------
#
# Layout: a 64-byte header, then `record count` packed words, then an
# optional calibration block (n_channels * n_taps little-endian f64 bin
# widths) at the offset named in the header.

TIMETAG_MAGIC = b"QTT1"
TIMETAG_VERSION = 1
FLAG_LITTLE_ENDIAN = 0x0001
_HEADER = struct.Struct("<4sHHdHHQQ")
HEADER_SIZE = 64


@dataclass(frozen=True)
class TimeTagHeader:
    clock_period: float
    n_taps: int
    n_channels: int
    n_records: int
    calibration_offset: int = 0
    version: int = TIMETAG_VERSION
    flags: int = FLAG_LITTLE_ENDIAN

    @property
    def has_calibration(self) -> bool:
        return self.calibration_offset != 0


def write_timetag_file(
    path,
    config: TdcConfig,
    words: np.ndarray,
    tap_widths: np.ndarray | None = None,
) -> None:
    """Write words (uint64 array) and, optionally, per-channel bin widths.

    ``tap_widths`` has shape (n_channels, n_taps) in ps.
    """
    w = np.ascontiguousarray(np.asarray(words, dtype="<u8"))
    cal_offset = 0
    if tap_widths is not None:
        widths = np.asarray(tap_widths, dtype="<f8")
        if widths.shape != (config.n_channels, config.n_taps):
            raise FileFormatError(
                f"calibration block must be ({config.n_channels}, {config.n_taps}), "
                f"got {widths.shape}"
            )
        cal_offset = HEADER_SIZE + w.size * WORD_SIZE
    header = _HEADER.pack(
        TIMETAG_MAGIC,
        TIMETAG_VERSION,
        FLAG_LITTLE_ENDIAN,
        config.clock_period,
        config.n_taps,
        config.n_channels,
        cal_offset,
        w.size,
    )
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(b"\x00" * (HEADER_SIZE - len(header)))
        fh.write(w.tobytes())
        if tap_widths is not None:
            fh.write(widths.tobytes())


def read_timetag_file(path) -> tuple[TimeTagHeader, np.ndarray, np.ndarray | None]:
    """Read back (header, words, tap widths or None), verifying structure."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < HEADER_SIZE:
        raise FileFormatError(
            f"file holds {len(raw)} bytes, shorter than the {HEADER_SIZE}-byte header",
            offset=len(raw),
        )
    magic, version, flags, clock_period, n_taps, n_channels, cal_offset, n_records = (
        _HEADER.unpack_from(raw, 0)
    )
    if magic != TIMETAG_MAGIC:
        raise FileFormatError(f"bad magic {magic!r}", offset=0)
    if version != TIMETAG_VERSION:
        raise FileFormatError(f"unsupported version {version}", offset=4)
    if not flags & FLAG_LITTLE_ENDIAN:
        raise FileFormatError("only little-endian files are defined", offset=6)
    body_end = HEADER_SIZE + n_records * WORD_SIZE
    if len(raw) < body_end:
        raise FileFormatError(
            f"truncated body: header promises {n_records} records "
            f"({body_end} bytes), file has {len(raw)}",
            offset=len(raw),
        )
    words = np.frombuffer(raw, dtype="<u8", count=n_records, offset=HEADER_SIZE)
    widths = None
    if cal_offset:
        if cal_offset != body_end:
            raise FileFormatError(
                f"calibration offset {cal_offset} does not follow the body",
                offset=cal_offset,
            )
        need = n_channels * n_taps
        if len(raw) < cal_offset + need * 8:
            raise FileFormatError(
                f"truncated calibration block: need {need * 8} bytes",
                offset=len(raw),
            )
        widths = np.frombuffer(raw, dtype="<f8", count=need, offset=cal_offset)
        widths = widths.reshape(n_channels, n_taps)
    header = TimeTagHeader(
        clock_period=clock_period,
        n_taps=n_taps,
        n_channels=n_channels,
        n_records=n_records,
        calibration_offset=cal_offset,
        version=version,
        flags=flags,
    )
    return header, words, widths
