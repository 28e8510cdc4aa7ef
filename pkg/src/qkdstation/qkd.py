"""Event-source model of the desk-scale BB84 link.

Alice encodes a proportion-adjustable random code on faint pulses; the
free-space channel attenuates them; Bob's passive receiver splits the
basis choice 50/50 and fires one of four detectors, with background and
dark counts mixed in; a separate bright sync-laser comb rides along so
the receiver can recover Alice's timebase. The two parties' clocks
disagree by a fixed offset plus a linear drift.

Pulse trains and detection sets are kept as column arrays (index, time,
basis, bit as parallel arrays) rather than one object per pulse; at
10^6 pulses per session anything else dominates the runtime.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, FileFormatError

BASIS_Z = 0
BASIS_X = 1

DET_Z0 = 0
DET_Z1 = 1
DET_X0 = 2
DET_X1 = 3
DET_SYNC = 4
DETECTOR_NAMES = ("Z0", "Z1", "X0", "X1", "SYNC")

# DetectionSet.origins values below 0 flag unphysical provenance.
ORIGIN_BACKGROUND = -1
ORIGIN_DARK = -2

PS_PER_S = 1e12


@dataclass(frozen=True)
class LinkModel:
    """Free-space channel and source parameters."""

    loss_db: float = 10.0
    background_rate: float = 30_000.0  # counts/s per detector
    pulse_period: float = 10_000.0  # ps
    sync_period: float = 2_000_000.0  # ps
    mean_photon_number: float = 0.5  # per signal pulse

    def __post_init__(self):
        if self.loss_db < 0:
            raise ConfigError("loss_db must be nonnegative")
        if self.background_rate < 0:
            raise ConfigError("background_rate must be nonnegative")
        if self.pulse_period <= 0 or self.sync_period <= 0:
            raise ConfigError("pulse and sync periods must be positive")
        if self.mean_photon_number <= 0:
            raise ConfigError("mean_photon_number must be positive")

    @property
    def attenuation(self) -> float:
        """Linear channel transmission, 10^(-loss_db/10)."""
        return 10.0 ** (-self.loss_db / 10.0)


@dataclass(frozen=True)
class DetectorModel:
    """One APD's response; all four signal detectors share it."""

    efficiency: float = 0.5
    dark_rate: float = 1000.0  # counts/s
    jitter_sigma: float = 60.0  # ps
    det_dead_time: float = 50_000.0  # ps
    intrinsic_error: float = 0.015  # optical misalignment flip probability

    def __post_init__(self):
        if not 0 <= self.efficiency <= 1:
            raise ConfigError("efficiency must be in [0, 1]")
        if self.dark_rate < 0 or self.jitter_sigma < 0 or self.det_dead_time < 0:
            raise ConfigError("detector rates and times must be nonnegative")
        if not 0 <= self.intrinsic_error <= 0.5:
            raise ConfigError("intrinsic_error must be in [0, 0.5]")


@dataclass(frozen=True)
class ClockModel:
    """Affine disagreement between Alice's and Bob's timebases.

    Bob reads ``(t_alice + offset) * (1 + drift_ppm * 1e-6)``.
    """

    offset: float = 0.0  # ps
    drift_ppm: float = 0.0

    def __post_init__(self):
        if abs(self.drift_ppm) >= 1000:
            raise ConfigError("drift beyond 1000 ppm is outside the model's scope")

    @property
    def scale(self) -> float:
        return 1.0 + self.drift_ppm * 1e-6

    def to_receiver(self, t_alice):
        return (np.asarray(t_alice, dtype=float) + self.offset) * self.scale

    def to_sender(self, t_bob):
        return np.asarray(t_bob, dtype=float) / self.scale - self.offset


@dataclass
class AliceBlock:
    """Alice's encoded pulse train as column arrays.

    Column ``i`` is the pulse with index i, emitted at ``i * pulse_period``
    on Alice's clock; ``bases`` holds BASIS_Z/BASIS_X, ``bits`` 0/1.
    """

    bases: np.ndarray
    bits: np.ndarray

    def __post_init__(self):
        self.bases = np.asarray(self.bases, dtype=np.uint8)
        self.bits = np.asarray(self.bits, dtype=np.uint8)
        if self.bases.shape != self.bits.shape or self.bases.ndim != 1:
            raise ConfigError("bases and bits must be parallel 1-D arrays")

    @property
    def n(self) -> int:
        return self.bases.size

    def emit_times(self, pulse_period: float) -> np.ndarray:
        return np.arange(self.n, dtype=float) * pulse_period


@dataclass
class DetectionSet:
    """Receiver-side clicks, sorted by time.

    ``origins`` holds the emitting pulse index for signal/sync photons,
    ORIGIN_BACKGROUND or ORIGIN_DARK for noise. It exists purely for
    truth accounting in tests and never feeds the sifting path.
    """

    times: np.ndarray
    detectors: np.ndarray
    origins: np.ndarray

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        self.detectors = np.asarray(self.detectors, dtype=np.uint8)
        self.origins = np.asarray(self.origins, dtype=np.int64)
        if not (self.times.shape == self.detectors.shape == self.origins.shape):
            raise ConfigError("detection columns must be parallel")

    @property
    def n(self) -> int:
        return self.times.size

    def select(self, mask) -> "DetectionSet":
        return DetectionSet(self.times[mask], self.detectors[mask], self.origins[mask])

    @staticmethod
    def merge(*sets: "DetectionSet") -> "DetectionSet":
        times = np.concatenate([s.times for s in sets])
        dets = np.concatenate([s.detectors for s in sets])
        origins = np.concatenate([s.origins for s in sets])
        order = np.lexsort((dets, times))
        return DetectionSet(times[order], dets[order], origins[order])


@dataclass
class TruthLedger:
    """Exact bookkeeping of where every emitted pulse and noise count went.

    Conservation holds with no statistical slack:
    ``emitted == lost + signal_detected + signal_suppressed``.
    """

    emitted: int = 0
    lost: int = 0
    signal_detected: int = 0
    signal_suppressed: int = 0
    background_generated: int = 0
    background_detected: int = 0
    background_suppressed: int = 0
    dark_generated: int = 0
    dark_detected: int = 0
    dark_suppressed: int = 0

    def conserved(self) -> bool:
        return (
            self.emitted == self.lost + self.signal_detected + self.signal_suppressed
            and self.background_generated
            == self.background_detected + self.background_suppressed
            and self.dark_generated == self.dark_detected + self.dark_suppressed
        )


def gen_random_code(
    n: int,
    basis_bias: float = 0.5,
    bit_bias: float = 0.5,
    seed: int | np.random.Generator = 0,
) -> AliceBlock:
    """Draw Alice's encoding: P(basis = Z) = basis_bias, P(bit = 1) = bit_bias.

    Draw order (one array for bases, then one for bits) is part of the
    reproducibility contract.
    """
    if not 0 <= basis_bias <= 1 or not 0 <= bit_bias <= 1:
        raise ConfigError("biases must lie in [0, 1]")
    rng = np.random.default_rng(seed)
    bases = (rng.random(n) >= basis_bias).astype(np.uint8)
    bits = (rng.random(n) < bit_bias).astype(np.uint8)
    return AliceBlock(bases=bases, bits=bits)


def poisson_background(
    rate_hz: float,
    t_start: float,
    t_stop: float,
    detector: int,
    origin: int,
    rng: np.random.Generator,
) -> DetectionSet:
    """Homogeneous Poisson clicks on one detector over [t_start, t_stop) ps."""
    duration_s = max(0.0, (t_stop - t_start)) / PS_PER_S
    count = int(rng.poisson(rate_hz * duration_s))
    times = np.sort(t_start + rng.random(count) * (t_stop - t_start))
    return DetectionSet(
        times=times,
        detectors=np.full(count, detector, dtype=np.uint8),
        origins=np.full(count, origin, dtype=np.int64),
    )


def _gate_detector_stream(
    detections: DetectionSet, dead_time: float
) -> tuple[DetectionSet, np.ndarray]:
    """Apply detector dead time to one detector's merged stream.

    Returns (surviving detections, origins of suppressed clicks).
    """
    from .tdc import gate_dead_time

    keep, _ = gate_dead_time(detections.times, dead_time)
    return detections.select(keep), detections.origins[~keep]


def simulate_link(
    alice: AliceBlock,
    link: LinkModel,
    detectors: DetectorModel,
    clock: ClockModel,
    seed: int | np.random.Generator,
) -> tuple[DetectionSet, TruthLedger]:
    """Propagate Alice's block to Bob's four signal detectors.

    Each pulse survives the channel with probability
    ``mean_photon_number * 10^(-loss/10) * efficiency`` (capped at 1); a
    surviving photon picks its measurement basis 50/50 at the beam
    splitter, lands on the matching detector with probability
    1 - intrinsic_error when the bases agree and uniformly otherwise.
    Background and dark counts arrive as per-detector Poisson processes;
    detector dead time gates each detector's merged stream.
    """
    rng = np.random.default_rng(seed)
    n = alice.n
    emit = alice.emit_times(link.pulse_period)
    p_det = min(
        1.0, link.mean_photon_number * link.attenuation * detectors.efficiency
    )

    survive = rng.random(n) < p_det
    idx = np.flatnonzero(survive)
    k = idx.size

    bob_basis = (rng.random(k) < 0.5).astype(np.uint8)
    same = bob_basis == alice.bases[idx]
    flip = rng.random(k) < detectors.intrinsic_error
    random_bit = (rng.random(k) < 0.5).astype(np.uint8)
    bob_bit = np.where(same, alice.bits[idx] ^ flip, random_bit).astype(np.uint8)
    det = (bob_basis << 1) | bob_bit

    t_bob = clock.to_receiver(emit[idx])
    if detectors.jitter_sigma > 0:
        t_bob = t_bob + rng.normal(0.0, detectors.jitter_sigma, k)
    signal = DetectionSet(times=t_bob, detectors=det, origins=idx.astype(np.int64))

    t0 = float(clock.to_receiver(0.0))
    t1 = float(clock.to_receiver(n * link.pulse_period))
    ledger = TruthLedger(emitted=n, lost=n - k)

    streams = []
    for d in (DET_Z0, DET_Z1, DET_X0, DET_X1):
        parts = [signal.select(signal.detectors == d)]
        bg = poisson_background(
            link.background_rate, t0, t1, d, ORIGIN_BACKGROUND, rng
        )
        dark = poisson_background(detectors.dark_rate, t0, t1, d, ORIGIN_DARK, rng)
        ledger.background_generated += bg.n
        ledger.dark_generated += dark.n
        merged = DetectionSet.merge(*parts, bg, dark)
        gated, suppressed = _gate_detector_stream(merged, detectors.det_dead_time)
        ledger.signal_suppressed += int(np.sum(suppressed >= 0))
        ledger.background_suppressed += int(np.sum(suppressed == ORIGIN_BACKGROUND))
        ledger.dark_suppressed += int(np.sum(suppressed == ORIGIN_DARK))
        streams.append(gated)

    out = DetectionSet.merge(*streams)
    ledger.signal_detected = int(np.sum(out.origins >= 0))
    ledger.background_detected = int(np.sum(out.origins == ORIGIN_BACKGROUND))
    ledger.dark_detected = int(np.sum(out.origins == ORIGIN_DARK))
    return out, ledger


def emit_sync(
    n_sync: int,
    sync_period: float,
    clock: ClockModel,
    jitter_sigma: float = 0.0,
    seed: int | np.random.Generator = 0,
    survival: float = 1.0,
) -> DetectionSet:
    """Sync-laser comb as seen by the receiver's sync detector.

    The sync laser is bright, so by default every pulse is detected;
    ``survival`` < 1 thins the comb for lossy setups.
    """
    if not 0 < survival <= 1:
        raise ConfigError("survival must be in (0, 1]")
    rng = np.random.default_rng(seed)
    emit = np.arange(n_sync, dtype=float) * sync_period
    if survival < 1.0:
        keep = rng.random(n_sync) < survival
        emit = emit[keep]
        index = np.flatnonzero(keep)
    else:
        index = np.arange(n_sync)
    t = clock.to_receiver(emit)
    if jitter_sigma > 0:
        t = t + rng.normal(0.0, jitter_sigma, emit.size)
    order = np.argsort(t, kind="stable")
    return DetectionSet(
        times=t[order],
        detectors=np.full(emit.size, DET_SYNC, dtype=np.uint8),
        origins=index[order].astype(np.int64),
    )


# --- Alice sidecar file -----------------------------------------------------
#
# The sidecar lets an offline analyzer replay a session: it carries the
# code sequence (one byte per pulse: bit 0 = key bit, bit 1 = basis) plus
# the protocol parameters the analysis stage needs.

SIDECAR_MAGIC = b"QAC1"
SIDECAR_VERSION = 1
_SIDECAR_FIXED = struct.Struct("<4sHHdddddQQH6x")  # up to the window list


@dataclass(frozen=True)
class SidecarMeta:
    pulse_period: float
    sync_period: float
    offset_bound: float
    disclose_fraction: float
    f_ec: float
    root_seed: int
    windows: tuple[float, ...]


def write_alice_sidecar(path, alice: AliceBlock, meta: SidecarMeta) -> None:
    header = _SIDECAR_FIXED.pack(
        SIDECAR_MAGIC,
        SIDECAR_VERSION,
        0,
        meta.pulse_period,
        meta.sync_period,
        meta.offset_bound,
        meta.disclose_fraction,
        meta.f_ec,
        meta.root_seed,
        alice.n,
        len(meta.windows),
    )
    body = ((alice.bases.astype(np.uint8) << 1) | alice.bits).tobytes()
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(np.asarray(meta.windows, dtype="<f8").tobytes())
        fh.write(body)


def read_alice_sidecar(path) -> tuple[AliceBlock, SidecarMeta]:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < _SIDECAR_FIXED.size:
        raise FileFormatError("sidecar too short for its header", offset=len(raw))
    (
        magic,
        version,
        _flags,
        pulse_period,
        sync_period,
        offset_bound,
        disclose_fraction,
        f_ec,
        root_seed,
        n_pulses,
        n_windows,
    ) = _SIDECAR_FIXED.unpack_from(raw, 0)
    if magic != SIDECAR_MAGIC:
        raise FileFormatError(f"bad sidecar magic {magic!r}", offset=0)
    if version != SIDECAR_VERSION:
        raise FileFormatError(f"unsupported sidecar version {version}", offset=4)
    off = _SIDECAR_FIXED.size
    need = off + 8 * n_windows + n_pulses
    if len(raw) < need:
        raise FileFormatError(
            f"sidecar truncated: need {need} bytes, have {len(raw)}", offset=len(raw)
        )
    windows = tuple(np.frombuffer(raw, dtype="<f8", count=n_windows, offset=off))
    off += 8 * n_windows
    codes = np.frombuffer(raw, dtype=np.uint8, count=n_pulses, offset=off)
    alice = AliceBlock(bases=(codes >> 1) & 1, bits=codes & 1)
    meta = SidecarMeta(
        pulse_period=pulse_period,
        sync_period=sync_period,
        offset_bound=offset_bound,
        disclose_fraction=disclose_fraction,
        f_ec=f_ec,
        root_seed=root_seed,
        windows=windows,
    )
    return alice, meta
