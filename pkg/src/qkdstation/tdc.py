"""Tap-level model of a multi-channel delay-line TDC.

A hit edge propagates along a chain of small fixed delays; a sampling
clock latches the chain state into a thermometer code whose 1-to-0
transition encodes the sub-clock-period arrival phase. A free-running
counter of clock periods supplies the coarse time. The model covers
nonuniform tap delays (DNL), sampling jitter, bubble-tolerant encoding,
per-channel dead time, and timestamp reconstruction against a
calibration table.

Conventions used throughout:

* the fine code measures the interval from the hit edge to the NEXT
  sampling clock edge, so ``timestamp = coarse * clock_period - bin_center``;
* a hit exactly on a clock edge has fine code 0 and reconstructs to the
  edge itself;
* jitter is one common-mode Gaussian draw per digitization applied to
  the whole boundary comb (sampling-clock jitter), which keeps the
  single-shot variance at the textbook ``LSB^2/12 + sigma^2``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Mapping

import numpy as np

from .errors import CalibrationError, ConfigError

if TYPE_CHECKING:
    from .calibration import CalibrationTable

# The wire format gives the fine code 9 bits and the channel id 5 bits.
FINE_FIELD_LIMIT = 512
CHANNEL_FIELD_LIMIT = 32
MIN_DYNAMIC_RANGE_PS = 1e12


@dataclass(frozen=True)
class TdcConfig:
    """Static board parameters. Defaults model a 160 MHz system clock
    interpolated by a 261-tap line (nominal bin 23.95 ps)."""

    clock_period: float = 6250.0  # ps
    n_taps: int = 261
    n_channels: int = 16
    dead_time: float = 30_000.0  # ps
    coarse_bits: int = 40

    def __post_init__(self):
        if self.clock_period <= 0:
            raise ConfigError("clock_period must be positive")
        if self.n_taps < 2:
            raise ConfigError("need at least 2 taps")
        if self.n_taps >= FINE_FIELD_LIMIT:
            raise ConfigError(
                f"n_taps={self.n_taps} does not fit the 9-bit fine field"
            )
        if not 1 <= self.n_channels <= CHANNEL_FIELD_LIMIT:
            raise ConfigError("n_channels must be in 1..32")
        if self.dead_time < 0:
            raise ConfigError("dead_time must be nonnegative")
        if float(1 << self.coarse_bits) * self.clock_period <= MIN_DYNAMIC_RANGE_PS:
            raise ConfigError("coarse counter dynamic range must exceed 1 s")

    @property
    def coarse_modulus(self) -> int:
        return 1 << self.coarse_bits

    @property
    def nominal_tap(self) -> float:
        """Ideal tap delay in ps (the nominal LSB)."""
        return self.clock_period / self.n_taps


@dataclass(frozen=True)
class DelayLineProfile:
    """Physical truth of one channel's interpolator.

    ``boundaries[k]`` is the cumulative delay through taps 0..k; a hit a
    time ``delta`` before the next clock edge propagates past exactly
    those cells whose boundary is <= delta.
    """

    channel: int
    tap_delays: np.ndarray  # ps, one entry per tap
    tap_jitter_sigma: float = 0.0  # ps, common-mode per digitization
    boundaries: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        taps = np.asarray(self.tap_delays, dtype=float)
        if taps.ndim != 1 or taps.size < 2:
            raise ConfigError("tap_delays must be a 1-D array of length >= 2")
        if np.any(taps <= 0):
            raise ConfigError("every tap delay must be positive")
        if self.tap_jitter_sigma < 0:
            raise ConfigError("tap_jitter_sigma must be nonnegative")
        object.__setattr__(self, "tap_delays", taps)
        object.__setattr__(self, "boundaries", np.cumsum(taps))

    @property
    def n_taps(self) -> int:
        return self.tap_delays.size

    @property
    def period(self) -> float:
        return float(self.boundaries[-1])


@dataclass(frozen=True)
class RawHit:
    """A physical signal edge arriving at one input channel."""

    channel: int
    true_time: float  # ps since epoch

    def __post_init__(self):
        if self.true_time < 0:
            raise ConfigError("true_time must be nonnegative")


@dataclass(frozen=True)
class TdcRecord:
    """Digitized event: channel id, coarse period count, fine code."""

    channel: int
    coarse: int
    fine: int


@dataclass
class ChannelState:
    """Mutable per-channel bookkeeping for dead-time gating.

    Rejection causes are kept as counters so a stream's accounting can be
    audited after the fact.
    """

    last_accept_time: float | None = None
    enabled: bool = True
    accepted: int = 0
    rejected_dead_time: int = 0
    rejected_disabled: int = 0


@dataclass
class RecordBatch:
    """Accepted records of one channel's digitized stream.

    ``accepted_index`` maps each record back to its position in the input
    time array (rejected hits leave gaps).
    """

    channel: int
    coarse: np.ndarray
    fine: np.ndarray
    accepted_index: np.ndarray

    @property
    def n(self) -> int:
        return self.coarse.size


def _dnl_deviations(
    config: TdcConfig,
    dnl_spec,
    seed: int | None,
) -> np.ndarray:
    """Resolve a DNL directive to per-tap deviations in ps."""
    nominal = config.nominal_tap
    n = config.n_taps
    if isinstance(dnl_spec, str):
        spec = dnl_spec.strip().lower()
        if spec == "uniform":
            return np.zeros(n)
        if spec.startswith("sine"):
            # sine:<amplitude_lsb>[:<cycles>[:<phase_rad>]]
            parts = spec.split(":")[1:]
            amp = float(parts[0]) if parts else 0.25
            cycles = float(parts[1]) if len(parts) > 1 else 3.0
            phase = float(parts[2]) if len(parts) > 2 else 0.0
            x = np.arange(n) / n
            return amp * nominal * np.sin(2 * np.pi * cycles * x + phase)
        if spec.startswith("random"):
            # random:<lo_lsb>:<hi_lsb>, drawn uniformly with the given seed
            parts = spec.split(":")[1:]
            lo = float(parts[0]) if parts else -0.3
            hi = float(parts[1]) if len(parts) > 1 else 0.3
            rng = np.random.default_rng(seed)
            return rng.uniform(lo, hi, n) * nominal
        raise ConfigError(f"unknown dnl spec {dnl_spec!r}")
    if isinstance(dnl_spec, Mapping):
        dev = np.zeros(n)
        for tap, d in dnl_spec.items():
            if not 0 <= int(tap) < n:
                raise ConfigError(f"dnl deviation names tap {tap} out of range")
            dev[int(tap)] = float(d)
        return dev
    dev = np.asarray(dnl_spec, dtype=float)
    if dev.shape != (n,):
        raise ConfigError(f"dnl deviation array must have length {n}")
    return dev


def build_delay_line(
    config: TdcConfig,
    dnl_spec="uniform",
    jitter_sigma: float = 0.0,
    seed: int | None = None,
    channel: int = 0,
) -> DelayLineProfile:
    """Construct a channel's delay line from a DNL directive.

    ``dnl_spec`` is ``"uniform"``, a ``"sine:..."`` / ``"random:..."``
    directive, a mapping {tap index: deviation ps}, or a full per-tap
    deviation array in ps. Tap delays are renormalized so they sum to
    exactly one clock period, which closes the integral nonlinearity at
    the period boundary.
    """
    if jitter_sigma < 0:
        raise ConfigError("jitter_sigma must be nonnegative")
    dev = _dnl_deviations(config, dnl_spec, seed)
    taps = config.nominal_tap + dev
    if np.any(taps <= 0):
        bad = int(np.argmin(taps))
        raise ConfigError(
            f"dnl spec drives tap {bad} to {taps[bad]:.3f} ps; taps must stay positive"
        )
    taps = taps * (config.clock_period / taps.sum())
    # Pin the cumulative comb to the exact period: phase arithmetic modulo
    # the clock must never fall outside the line by a rounding ulp.
    for _ in range(4):
        cum = np.cumsum(taps)
        if cum[-1] == config.clock_period:
            break
        taps = taps.copy()
        taps[-1] += config.clock_period - cum[-1]
    return DelayLineProfile(
        channel=channel, tap_delays=taps, tap_jitter_sigma=jitter_sigma
    )


def sample_thermometer(
    profile: DelayLineProfile,
    delta: float,
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    """Latch the delay-line state for a hit ``delta`` ps before the next
    clock edge. Returns the thermometer code as a uint8 array.

    Jitter, when enabled, is one draw shifting the whole boundary comb;
    the noiseless output is always monotone 1...10...0.
    """
    if delta < 0 or delta >= profile.period:
        raise ConfigError(
            f"delta={delta} outside [0, {profile.period}); reduce mod clock period"
        )
    x = delta
    if rng is not None and profile.tap_jitter_sigma > 0:
        # Shifting all boundaries by +eps equals comparing against delta - eps.
        x = delta - rng.normal(0.0, profile.tap_jitter_sigma)
    return (profile.boundaries <= x).astype(np.uint8)


def encode_fine(code) -> int:
    """Convert a thermometer code to its fine value.

    A majority-of-3 filter (endpoints padded with themselves) removes
    isolated bubbles, then a half-interval search locates the 1-to-0
    transition. Total: any bit pattern maps to a value in [0, n].
    """
    bits = np.asarray(code, dtype=np.uint8)
    if bits.ndim != 1 or bits.size < 2:
        raise ConfigError("thermometer code must be 1-D with length >= 2")
    left = np.concatenate(([bits[0]], bits[:-1]))
    right = np.concatenate((bits[1:], [bits[-1]]))
    filtered = (left.astype(np.int8) + bits + right) >= 2
    lo, hi = 0, filtered.size
    while lo < hi:
        mid = (lo + hi) // 2
        if filtered[mid]:
            lo = mid + 1
        else:
            hi = mid
    return lo


def digitize(
    hit: RawHit,
    profile: DelayLineProfile,
    state: ChannelState,
    config: TdcConfig,
    rng: np.random.Generator | None = None,
) -> TdcRecord | None:
    """Digitize one hit, honoring the channel enable and dead time.

    Returns the record, or None when the hit is discarded; the cause is
    tallied on ``state``. Hits must be presented in arrival-time order
    per channel.
    """
    _check_channel(hit.channel, profile, config)
    if not state.enabled:
        state.rejected_disabled += 1
        return None
    if (
        state.last_accept_time is not None
        and hit.true_time - state.last_accept_time < config.dead_time
    ):
        state.rejected_dead_time += 1
        return None
    edge = math.ceil(hit.true_time / config.clock_period)
    delta = edge * config.clock_period - hit.true_time
    fine = encode_fine(sample_thermometer(profile, delta, rng))
    state.last_accept_time = hit.true_time
    state.accepted += 1
    return TdcRecord(
        channel=hit.channel, coarse=edge % config.coarse_modulus, fine=fine
    )


def gate_dead_time(
    times: np.ndarray,
    dead_time: float,
    last_accept: float | None = None,
) -> tuple[np.ndarray, float | None]:
    """Non-paralyzable dead-time gate over a sorted time array.

    Returns (boolean keep mask, time of the last accepted hit). A hit is
    kept iff it arrives at least ``dead_time`` after the previous KEPT
    hit, which makes the gate inherently sequential.
    """
    t = np.asarray(times, dtype=float)
    n = t.size
    keep = np.ones(n, dtype=bool)
    if n == 0:
        return keep, last_accept
    # Fast path: if every raw gap already clears the dead time, nothing
    # can be suppressed and the scan is unnecessary.
    if (
        (last_accept is None or n == 0 or t[0] - last_accept >= dead_time)
        and (n < 2 or float(np.min(np.diff(t))) >= dead_time)
    ):
        return keep, float(t[-1])
    last = -math.inf if last_accept is None else last_accept
    for i in range(n):
        ti = t[i]
        if ti - last < dead_time:
            keep[i] = False
        else:
            last = ti
    return keep, last


def digitize_stream(
    times: np.ndarray,
    profile: DelayLineProfile,
    state: ChannelState,
    config: TdcConfig,
    rng: np.random.Generator | None = None,
) -> RecordBatch:
    """Vectorized digitization of one channel's sorted hit stream.

    Bit-for-bit equivalent to calling :func:`digitize` per hit with the
    same generator (each accepted hit consumes exactly one jitter draw).
    """
    _check_channel(profile.channel, profile, config)
    t = np.asarray(times, dtype=float)
    if t.size and t[0] < 0:
        raise ConfigError("hit times must be nonnegative (counter epoch is t=0)")
    if t.size and np.any(np.diff(t) < 0):
        raise ConfigError("hit stream must be sorted by arrival time")
    if not state.enabled:
        state.rejected_disabled += t.size
        empty = np.empty(0, dtype=np.int64)
        return RecordBatch(profile.channel, empty, empty.copy(), empty.copy())
    keep, last = gate_dead_time(t, config.dead_time, state.last_accept_time)
    kept = t[keep]
    state.rejected_dead_time += int(t.size - kept.size)
    state.accepted += int(kept.size)
    if kept.size:
        state.last_accept_time = float(last)
    edge = np.ceil(kept / config.clock_period).astype(np.int64)
    delta = edge * config.clock_period - kept
    x = delta
    if rng is not None and profile.tap_jitter_sigma > 0:
        x = delta - rng.normal(0.0, profile.tap_jitter_sigma, kept.size)
    fine = np.searchsorted(profile.boundaries, x, side="right").astype(np.int64)
    coarse = edge % config.coarse_modulus
    return RecordBatch(
        channel=profile.channel,
        coarse=coarse,
        fine=fine,
        accepted_index=np.flatnonzero(keep).astype(np.int64),
    )


def reconstruct(record: TdcRecord, cal: "CalibrationTable", config: TdcConfig) -> float:
    """Recover the arrival timestamp (ps) of a digitized record.

    ``timestamp = coarse * clock_period - bin_center(fine)``: the fine
    code measures how long before the sampled clock edge the hit landed.
    """
    if cal is None or cal.channel != record.channel:
        have = "no table" if cal is None else f"table for channel {cal.channel}"
        raise CalibrationError(
            f"channel {record.channel} has {have}; run code_density_calibrate first"
        )
    if not 0 <= record.fine < cal.bin_centers.size:
        raise CalibrationError(
            f"fine code {record.fine} outside calibrated range 0..{cal.bin_centers.size - 1}"
        )
    return record.coarse * config.clock_period - float(cal.bin_centers[record.fine])


def reconstruct_stream(
    coarse: np.ndarray,
    fine: np.ndarray,
    cal: "CalibrationTable",
    config: TdcConfig,
) -> np.ndarray:
    """Vector form of :func:`reconstruct` for one channel's records."""
    fine = np.asarray(fine, dtype=np.int64)
    if fine.size and (fine.min() < 0 or fine.max() >= cal.bin_centers.size):
        raise CalibrationError("fine code outside calibrated range")
    return (
        np.asarray(coarse, dtype=np.int64) * config.clock_period
        - cal.bin_centers[fine]
    )


def _check_channel(channel: int, profile: DelayLineProfile, config: TdcConfig):
    if not 0 <= channel < config.n_channels:
        raise ConfigError(
            f"channel {channel} outside configured range 0..{config.n_channels - 1}"
        )
    if profile.channel != channel:
        raise ConfigError(
            f"profile belongs to channel {profile.channel}, hit on channel {channel}"
        )
    if profile.n_taps != config.n_taps or not math.isclose(
        profile.period, config.clock_period, rel_tol=1e-9
    ):
        raise ConfigError("delay-line profile does not match the TDC config")
