"""Receiver-side packet processing.

Order of operations for one capture: locate packet bounds by energy, refine
integer and fractional timing against the known preamble, estimate the
carrier offset, decide the transmitted bits and re-modulate them into exact
ideal samples, then split the received packet into linear parameters and the
two nonlinear residual series the fingerprints are trained on.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from . import gauge
from .errors import (
    ConditioningWarning, MeasurementError, PreambleNotFoundError,
)
from .signals import (
    OQPSK, PULSE_SPAN, RAISED_COSINE, ROLLOFF, ROOT_RAISED_COSINE,
    IdealSignal, ProtocolConfig, SignalBuffer, _wrap, ideal_samples, modulate,
)

MIN_CFO_PREAMBLE_SAMPLES = 32
TIMING_PEAK_THRESHOLD = 0.5
TIMING_INT_SEARCH = 8        # integer start candidates each side
TIMING_FRAC_GRID = 16        # fractional offsets per sample period
UPSAMPLE = 16                # decision-grid oversampling for shaped pulses


@dataclass(frozen=True)
class PacketCapture:
    """One packet's worth of received samples.

    start_index points at the first preamble sample; samples[start_index + n]
    holds the waveform at signal time n*Ts + tau for some tau in [0, Ts).
    """

    samples: np.ndarray
    start_index: int
    protocol: ProtocolConfig
    snr_db: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "samples",
                           np.asarray(self.samples, dtype=np.complex128))
        if not 0 <= self.start_index < len(self.samples):
            raise ValueError("start_index outside the capture")


@dataclass(frozen=True)
class LinearParams:
    a0_r: float
    cfo_rad_per_s: float
    theta0_rad: float
    tau_s: float


@dataclass(frozen=True)
class NonlinearSeries:
    """Residual series aligned with the recovered ideal samples.

    valid_range is an inclusive index pair; mask flags samples whose ideal
    envelope is large enough for the phase residual to mean anything.
    """

    pow: np.ndarray
    theta: np.ndarray
    valid_range: tuple
    mask: np.ndarray


@dataclass(frozen=True)
class ChannelEstimate:
    """FIR tap estimate; residual_nmse is the fit residual in dB."""

    taps: np.ndarray
    residual_nmse: float


@dataclass(frozen=True)
class TimingEstimate:
    tau_s: float
    start_index: int
    peak_correlation: float


@dataclass(frozen=True)
class RecoveredSignal:
    """Re-modulated ideal frame plus the payload bits it was built from."""

    ideal: IdealSignal
    payload_bits: np.ndarray
    n_samples: int


def packet_bounds(capture: SignalBuffer, min_gap_samples: int,
                  min_len_samples: int) -> list:
    """Energy-based segmentation of a capture into [start, stop) bounds.

    The gate is 6x the median absolute sample value, a noise-floor proxy
    that assumes bursts fill less than half the capture, floored at 5% of
    the peak so an all-quiet noiseless capture stays segmentable. Gating
    runs on a 64-sample moving average with enter/leave hysteresis; the
    edges are then pinned on the raw envelope so the smoothing window does
    not blur them.
    """
    if min_gap_samples < 1 or min_len_samples < 1:
        raise ValueError("gap and length thresholds must be positive")
    env = np.abs(np.asarray(capture.samples))
    if len(env) == 0:
        return []
    peak = float(env.max())
    if peak <= 0.0:
        return []
    thr = max(6.0 * float(np.median(env)), 0.05 * peak)
    win = 64
    smooth = np.convolve(env, np.ones(win) / win, mode="same")
    skirt = smooth > 0.5 * thr
    # Hysteresis: a region must reach thr somewhere but extends over the
    # whole half-threshold skirt around it.
    flips = np.diff(skirt.astype(np.int8))
    starts = list(np.flatnonzero(flips == 1) + 1)
    stops = list(np.flatnonzero(flips == -1) + 1)
    if skirt[0]:
        starts.insert(0, 0)
    if skirt[-1]:
        stops.append(len(env))
    regions = [(s, e) for s, e in zip(starts, stops)
               if np.any(smooth[s:e] > thr)]
    merged = []
    for s, e in regions:
        if merged and s - merged[-1][1] < min_gap_samples:
            merged[-1] = (merged[-1][0], e)
        else:
            merged.append((s, e))
    bounds = []
    for s, e in merged:
        hot = np.flatnonzero(env[s:e] >= thr)
        if hot.size == 0:
            continue
        bounds.append((s + int(hot[0]), s + int(hot[-1]) + 1))
    return [(s, e) for s, e in bounds if e - s >= min_len_samples]


def _preamble_signal(protocol: ProtocolConfig) -> IdealSignal:
    return modulate(np.asarray(protocol.preamble_bits, dtype=np.uint8),
                    protocol)


def _cfo_clean_length(protocol: ProtocolConfig) -> int:
    """Preamble samples unaffected by payload pulse tails.

    Shaped pulses from the first payload symbols reach back PULSE_SPAN symbols
    into the preamble, where a preamble-only reference would mismatch the
    received frame. Rectangular and half-sine pulses have no such reach.
    """
    total = protocol.preamble_n_samples
    if protocol.pulse_shape in (RAISED_COSINE, ROOT_RAISED_COSINE):
        trimmed = total - PULSE_SPAN * protocol.sps
        if trimmed >= MIN_CFO_PREAMBLE_SAMPLES:
            return trimmed
    return total


def _block_score(z: np.ndarray, ref: np.ndarray) -> float:
    """Correlation magnitude summed over short blocks.

    Blocks of 8 samples keep the intra-block carrier rotation well under a
    radian at the worst tolerated CFO, so an uncorrected offset cannot wash
    out the peak.
    """
    n = len(ref)
    n_blocks = max(4, n // 8)
    edges = np.linspace(0, n, n_blocks + 1, dtype=int)
    acc = 0.0
    for b0, b1 in zip(edges[:-1], edges[1:]):
        acc += abs(np.vdot(ref[b0:b1], z[b0:b1]))
    denom = np.linalg.norm(z) * np.linalg.norm(ref)
    return acc / denom if denom > 0 else 0.0


def estimate_timing(packet: PacketCapture,
                    ideal_preamble: IdealSignal) -> TimingEstimate:
    """Refine the packet start and find the fractional sampling offset.

    Searches integer shifts around packet.start_index with block correlations
    (so an uncorrected CFO cannot wash out the peak), then a fractional grid
    of re-synthesized preambles with parabolic refinement.

    Raises PreambleNotFoundError when the best normalized correlation stays
    below 0.5.
    """
    proto = packet.protocol
    ts = proto.sample_period_s
    n_pre = ideal_preamble.protocol.preamble_n_samples
    z = packet.samples
    # Joint search over integer shift and fractional offset. Some preambles
    # correlate deceptively well one or two whole samples off, so the integer
    # shift cannot be settled before the fractional one.
    offsets = (np.arange(TIMING_FRAC_GRID) - TIMING_FRAC_GRID // 2) \
        / TIMING_FRAC_GRID
    refs = [ideal_samples(ideal_preamble, off * ts, n_pre).samples
            for off in offsets]
    scores = np.full((2 * TIMING_INT_SEARCH + 1, len(offsets)), -1.0)
    for a, s in enumerate(range(-TIMING_INT_SEARCH, TIMING_INT_SEARCH + 1)):
        lo = packet.start_index + s
        if lo < 0 or lo + n_pre > len(z):
            continue
        seg = z[lo:lo + n_pre]
        for b, ref in enumerate(refs):
            scores[a, b] = _block_score(seg, ref)
    a_best, b_best = np.unravel_index(int(np.argmax(scores)), scores.shape)
    peak = float(scores[a_best, b_best])
    if peak < TIMING_PEAK_THRESHOLD:
        raise PreambleNotFoundError(
            "preamble not found (peak correlation %.3f)" % max(peak, 0.0))
    frac = offsets[b_best]
    if 0 < b_best < len(offsets) - 1:
        y0, y1, y2 = scores[a_best, b_best - 1:b_best + 2]
        denom = y0 - 2 * y1 + y2
        if denom < 0:
            frac += 0.5 * (y0 - y2) / denom / TIMING_FRAC_GRID
    start = packet.start_index + a_best - TIMING_INT_SEARCH
    tau = frac * ts
    # Keep tau in [0, Ts); the equivalence is (start, tau) == (start+1, tau+Ts).
    if tau < 0:
        tau += ts
        start += 1
    elif tau >= ts:
        tau -= ts
        start -= 1
    if start < 0 or start >= len(z):
        raise PreambleNotFoundError("preamble not found (start out of range)")
    return TimingEstimate(float(tau), int(start), peak)


def _weighted_phase_slope(phase: np.ndarray, weights: np.ndarray,
                          idx: np.ndarray) -> float:
    """Weighted least-squares slope of phase[idx] against the sample index."""
    n = idx.astype(float)
    w = weights[idx]
    wsum = w.sum()
    if wsum <= 0:
        raise MeasurementError("no usable samples for a phase fit")
    nbar = np.dot(w, n) / wsum
    pbar = np.dot(w, phase) / wsum
    dn = n - nbar
    denom = np.dot(w, dn * dn)
    if denom <= 0:
        raise MeasurementError("degenerate geometry for a phase fit")
    return float(np.dot(w, dn * (phase - pbar)) / denom)


def estimate_cfo(packet: PacketCapture,
                 ideal_preamble_samples: SignalBuffer) -> float:
    """Carrier frequency offset in rad/s from the preamble.

    Coarse stage: the angle of the averaged one-sample autocorrelation of the
    modulation-stripped preamble, which tolerates offsets up to half the
    sample rate. Refinement: a weighted least-squares line through the
    residual phase after derotating the coarse estimate.
    """
    ref = np.asarray(ideal_preamble_samples.samples)
    if len(ref) < MIN_CFO_PREAMBLE_SAMPLES:
        raise MeasurementError(
            "preamble too short for cfo estimation (%d < %d samples)"
            % (len(ref), MIN_CFO_PREAMBLE_SAMPLES))
    lo = packet.start_index
    if lo + len(ref) > len(packet.samples):
        raise MeasurementError("capture shorter than the preamble")
    z = packet.samples[lo:lo + len(ref)]
    ts = packet.protocol.sample_period_s
    r = z * np.conj(ref)
    acc = np.vdot(r[:-1], r[1:])  # sum of r[n+1] * conj(r[n])
    coarse = np.angle(acc) / ts   # rad/s

    q = r * np.exp(-1j * coarse * np.arange(len(r)) * ts)
    w = np.abs(q)
    keep = np.flatnonzero(w > 0.3 * np.median(w[w > 0]))
    if len(keep) < 8:
        raise MeasurementError("preamble envelope too weak for cfo refinement")
    phase = np.unwrap(np.angle(q[keep]))
    slope = _weighted_phase_slope(phase, w, keep)
    return float(coarse + slope / ts)


def _resample_decision_grid(z: np.ndarray, protocol: ProtocolConfig):
    """FFT-upsample a shaped-pulse packet for decision sampling.

    The raised-cosine family is bandlimited below Nyquist here, so this is
    distortion free; out-of-band noise is dropped in the same pass.
    """
    pad = 8 * protocol.sps
    zp = np.concatenate([np.zeros(pad), z, np.zeros(pad)])
    n = len(zp)
    spec = np.fft.fft(zp)
    f = np.fft.fftfreq(n, d=protocol.sample_period_s)
    band = (1.0 + ROLLOFF) * 0.5 * protocol.symbol_rate_hz * 1.1 \
        + 2.0 * protocol.symbol_rate_hz / n  # guard for short packets
    spec[np.abs(f) > band] = 0.0
    up = np.zeros(n * UPSAMPLE, dtype=np.complex128)
    h = n // 2
    up[:h] = spec[:h]
    up[-h:] = spec[-h:]
    zu = np.fft.ifft(up) * UPSAMPLE
    return zu, pad


def _snap(values: np.ndarray, allowed: np.ndarray) -> np.ndarray:
    d = np.abs(_wrap(values[:, None] - allowed[None, :]))
    return allowed[np.argmin(d, axis=1)]


def _decide_psk(z: np.ndarray, protocol: ProtocolConfig, cfo_rad_per_s: float,
                tau_s: float, n_symbols: int) -> np.ndarray:
    """Bit decisions for BPSK/QPSK from phase steps at symbol centers."""
    ts = protocol.sample_period_s
    sps = protocol.sps
    tau_f = tau_s / ts
    centers = (np.arange(n_symbols) + 0.5) * sps - tau_f
    if protocol.pulse_shape == "rectangular":
        idx = np.floor(centers).astype(int)
        idx = np.clip(idx, 0, len(z) - 1)
        zc = z[idx]
        t_used = (idx + tau_f) * ts
    else:
        zu, pad = _resample_decision_grid(z, protocol)
        gu = np.round((centers + pad) * UPSAMPLE).astype(int)
        gu = np.clip(gu, 0, len(zu) - 1)
        zc = zu[gu]
        t_used = (gu / UPSAMPLE - pad + tau_f) * ts
    phase = np.angle(zc) - cfo_rad_per_s * t_used
    steps = _wrap(np.diff(phase))
    if protocol.modulation == "bpsk":
        allowed = np.array([-np.pi, 0.0, np.pi])
        lattice = np.pi
    else:
        allowed = np.array([-np.pi, -0.5 * np.pi, 0.0, 0.5 * np.pi, np.pi])
        lattice = 0.5 * np.pi
    snapped = _snap(steps, allowed)
    # Cumulative walk from the known constellation phase of symbol 0. The
    # preamble's first symbol is known, so the absolute phase ambiguity is
    # resolved without equalizing the channel phase.
    pre_bits = np.asarray(protocol.preamble_bits)
    first = modulate(pre_bits[:protocol.bits_per_symbol], protocol)
    phi = np.angle(first.levels[0]) + np.concatenate(
        ([0.0], np.cumsum(snapped)))
    quarter = np.round(phi / lattice).astype(int)
    if protocol.modulation == "bpsk":
        return (np.mod(quarter, 2)).astype(np.uint8)
    bits = np.empty(2 * n_symbols, dtype=np.uint8)
    table = {1: (0, 0), 3: (0, 1), 5: (1, 1), 7: (1, 0)}  # phi / (pi/4) mod 8
    eighth = np.mod(np.round(phi / (0.25 * np.pi)).astype(int), 8)
    for k, e in enumerate(eighth):
        pair = table.get(int(e))
        if pair is None:
            # Off-lattice accumulated phase; fall back to nearest odd eighth.
            pair = table[min(table, key=lambda q: min(abs(q - e), 8 - abs(q - e)))]
        bits[2 * k], bits[2 * k + 1] = pair
    return bits


def _decide_oqpsk(z: np.ndarray, protocol: ProtocolConfig,
                  cfo_rad_per_s: float, tau_s: float,
                  n_symbols: int, fallback: bool = True) -> np.ndarray:
    """OQPSK bit decisions from per-sample phase steps.

    Each step is snapped to {-delta, +delta}. A step whose measured value
    falls within delta/4 of zero straddles a slope transition, where the
    sign is meaningless; the fallback re-measures across two sample periods,
    where the possible values separate again, and votes for the half-symbol
    the second sample lands in. Half-symbol slopes are majority votes.
    """
    ts = protocol.sample_period_s
    sps = protocol.sps
    half = sps // 2
    tau_f = tau_s / ts
    n = np.arange(len(z))
    zd = z * np.exp(-1j * cfo_rad_per_s * (n * ts + tau_s))
    delta = np.pi / sps
    d1 = _wrap(np.angle(zd[1:] * np.conj(zd[:-1])))
    votes = np.zeros(2 * n_symbols)
    half_of = lambda pos: int((pos + tau_f) // half)
    n_halves = 2 * n_symbols
    for i in range(len(d1)):
        if not fallback or abs(d1[i]) >= 0.25 * delta or i + 2 >= len(zd):
            j = half_of(i + 0.5)
            if 0 <= j < n_halves:
                votes[j] += delta if d1[i] > 0 else -delta
        else:
            d2 = _wrap(np.angle(zd[i + 2] * np.conj(zd[i])))
            j = half_of(i + 2)
            if 0 <= j < n_halves:
                votes[j] += delta if d2 > 0 else -delta
    slopes = np.where(votes >= 0, 1.0, -1.0)
    # Demap slope signs to I/Q levels; the preamble fixes the chain start.
    pre_bits = np.asarray(protocol.preamble_bits)
    n_pre_symbols = len(pre_bits) // 2
    a = np.empty(n_symbols)
    b = np.empty(n_symbols)
    a[:n_pre_symbols] = 1.0 - 2.0 * pre_bits[0::2]
    b[:n_pre_symbols] = 1.0 - 2.0 * pre_bits[1::2]
    for k in range(n_pre_symbols, n_symbols):
        b_prev = b[k - 1] if k > 0 else 1.0
        a[k] = -slopes[2 * k] * b_prev
        b[k] = slopes[2 * k + 1] * a[k]
    bits = np.empty(2 * n_symbols, dtype=np.uint8)
    bits[0::2] = ((1.0 - a) / 2.0).astype(np.uint8)
    bits[1::2] = ((1.0 - b) / 2.0).astype(np.uint8)
    return bits


def aligned_capture(packet: PacketCapture,
                    timing: TimingEstimate) -> PacketCapture:
    """Re-anchor a capture on the refined start index from estimate_timing."""
    return PacketCapture(packet.samples, timing.start_index, packet.protocol,
                         packet.snr_db)


def recover_ideal_samples(packet: PacketCapture, cfo_rad_per_s: float,
                          tau_s: float,
                          n_payload_bits: int | None = None) -> RecoveredSignal:
    """Decide the transmitted bits and rebuild exact ideal samples.

    The data-to-signal mapping is known, so once the phase-step decisions
    give the bit sequence, re-modulating it at the estimated offset yields
    the ideal samples with no interpolation error, whatever the pulse shape.

    n_payload_bits bounds the frame when the expected payload length is
    known; otherwise every whole symbol period in the capture is decided,
    including any trailing noise the packet bounds let through.
    """
    proto = packet.protocol
    z = packet.samples[packet.start_index:]
    sps = proto.sps
    n_symbols = len(z) // sps
    n_pre_symbols = len(proto.preamble_bits) // proto.bits_per_symbol
    if n_payload_bits is not None:
        if n_payload_bits % proto.bits_per_symbol:
            raise ValueError("expected payload does not fill whole symbols")
        want = n_pre_symbols + n_payload_bits // proto.bits_per_symbol
        if want > n_symbols:
            raise PreambleNotFoundError(
                "capture shorter than the expected frame")
        n_symbols = want
    if n_symbols <= n_pre_symbols:
        raise PreambleNotFoundError("packet shorter than the preamble")
    z = z[:n_symbols * sps]
    if proto.modulation == OQPSK:
        bits = _decide_oqpsk(z, proto, cfo_rad_per_s, tau_s, n_symbols)
    else:
        bits = _decide_psk(z, proto, cfo_rad_per_s, tau_s, n_symbols)
    # The preamble is published; trust it over the channel's version.
    pre = np.asarray(proto.preamble_bits, dtype=np.uint8)
    bits[:len(pre)] = pre
    ideal = modulate(bits, proto)
    payload = bits[len(pre):]
    return RecoveredSignal(ideal, payload, n_symbols * sps)


def _packet_slice(packet: PacketCapture, recovered: RecoveredSignal):
    lo = packet.start_index
    return packet.samples[lo:lo + recovered.n_samples]


def refine_timing(packet: PacketCapture, recovered: RecoveredSignal,
                  cfo_rad_per_s: float, tau0_s: float) -> float:
    """Polish the fractional offset once the bits are known.

    Maximizes the coherent correlation between the derotated packet and the
    re-modulated frame by iterated three-point parabolic steps. The grid
    search in estimate_timing is only good to about a percent of a sample
    period, which is enough to decide bits but leaves a visible residue in
    the extracted phase series.
    """
    proto = packet.protocol
    ts = proto.sample_period_s
    z = _packet_slice(packet, recovered)
    t = np.arange(len(z)) * ts
    zd = z * np.exp(-1j * cfo_rad_per_s * t)

    def score(tau):
        x = ideal_samples(recovered.ideal, tau, recovered.n_samples).samples
        nx = np.linalg.norm(x)
        return abs(np.vdot(x, zd)) / nx if nx > 0 else 0.0

    tau = float(tau0_s)
    step = ts / TIMING_FRAC_GRID
    for _ in range(3):
        pts = np.array([tau - step, tau, tau + step])
        vals = np.array([score(p) for p in pts])
        i = int(np.argmax(vals))
        if i != 1:
            tau = pts[i]
            continue
        denom = vals[0] - 2 * vals[1] + vals[2]
        if denom < 0:
            tau += 0.5 * (vals[0] - vals[2]) / denom * step
        step /= 4.0
    # tau stays in [0, Ts): when the true offset sits on the period boundary
    # the polish may walk just past it, which is the same physical timing in
    # the neighbouring (start, tau) representation; clamping costs at most
    # the grid-stage residual and keeps every LinearParams in range.
    return float(min(max(tau, 0.0), np.nextafter(ts, 0.0)))


def estimate_linear(packet: PacketCapture, recovered: RecoveredSignal,
                    cfo_rad_per_s: float, tau_s: float) -> LinearParams:
    """Gain, refined carrier offset and phase origin of one packet.

    The preamble-only carrier estimate is re-refined over the whole packet
    here; the longer baseline matters once the nonlinear residual is the
    quantity of interest.
    """
    proto = packet.protocol
    ts = proto.sample_period_s
    xprime = ideal_samples(recovered.ideal, tau_s, recovered.n_samples).samples
    z = _packet_slice(packet, recovered)
    env_ideal = np.abs(xprime)
    mask = gauge.envelope_mask(env_ideal)
    r = z * np.conj(xprime)
    t = np.arange(len(r)) * ts + tau_s
    q = r * np.exp(-1j * cfo_rad_per_s * t)
    w = np.abs(q)
    keep = np.flatnonzero(mask)
    if len(keep) < 8:
        raise MeasurementError("too few usable samples for linear estimation")
    phase = np.unwrap(np.angle(q[keep]))
    slope = _weighted_phase_slope(phase, w, keep)
    cfo = cfo_rad_per_s + slope / ts

    a0 = gauge.envelope_gain(np.abs(z), env_ideal, keep)
    raw = np.angle(r) - cfo * t
    theta0 = gauge.phase_offset(raw, keep)
    return LinearParams(float(a0), float(cfo), float(theta0), float(tau_s))


def extract_nonlinear(packet: PacketCapture, recovered: RecoveredSignal,
                      linear: LinearParams) -> NonlinearSeries:
    """Strip everything the linear model explains; keep what the device adds.

    pow is the envelope residual relative to the fitted gain, theta the phase
    left after carrier and phase-origin removal. Both are per-sample series
    aligned with the recovered ideal samples.
    """
    proto = packet.protocol
    ts = proto.sample_period_s
    xprime = ideal_samples(recovered.ideal, linear.tau_s,
                           recovered.n_samples).samples
    z = _packet_slice(packet, recovered)
    env_ideal = np.abs(xprime)
    mask = gauge.envelope_mask(env_ideal)
    t = np.arange(len(z)) * ts + linear.tau_s
    pow_series = np.abs(z) / linear.a0_r - env_ideal
    theta = _wrap(np.angle(z * np.conj(xprime))
                  - linear.cfo_rad_per_s * t - linear.theta0_rad)
    theta = gauge.phase_detrend(theta, t, env_ideal, mask)
    theta = np.where(mask, theta, 0.0)
    # One guard sample per edge: timing can land on the equivalent
    # (start+1, tau+Ts) representation, which misframes a single boundary
    # sample; two keeps a margin.
    lo = min(2, len(z) - 1)
    return NonlinearSeries(pow_series, theta, (lo, max(len(z) - 3, lo)), mask)


def estimate_channel(packet: PacketCapture, reference: SignalBuffer,
                     n_taps: int) -> ChannelEstimate:
    """Least-squares FIR fit of the capture against a known reference."""
    if n_taps < 1:
        raise ValueError("n_taps must be positive")
    ref = np.asarray(reference.samples)
    lo = packet.start_index
    z = packet.samples[lo:lo + len(ref)]
    if len(z) < len(ref) or len(ref) < 4 * n_taps:
        raise MeasurementError("reference too short for channel estimation")
    cols = [np.concatenate([np.zeros(i, dtype=complex), ref[:len(ref) - i]])
            for i in range(n_taps)]
    a = np.stack(cols, axis=1)
    taps, *_ = np.linalg.lstsq(a, z, rcond=None)
    resid = z - a @ taps
    denom = float(np.vdot(z, z).real)
    ratio = float(np.vdot(resid, resid).real / denom) if denom > 0 else 1.0
    # Reported in dB; an exact fit is floored rather than sent to -inf.
    nmse_db = 10.0 * np.log10(max(ratio, 1e-30))
    return ChannelEstimate(taps, nmse_db)


def deconvolve(packet: PacketCapture,
               channel: ChannelEstimate) -> PacketCapture:
    """Invert an estimated FIR channel in the frequency domain.

    Requires the first tap to dominate (a minimum-phase-ish channel); emits
    ConditioningWarning when the channel response has a near-null bin, where
    regularized inversion will color the noise.
    """
    taps = np.asarray(channel.taps, dtype=np.complex128)
    if len(taps) > 1 and np.abs(taps[0]) < np.max(np.abs(taps[1:])):
        raise ValueError("deconvolution requires a dominant leading tap")
    z = packet.samples
    nfft = 1 << int(np.ceil(np.log2(len(z) + len(taps) - 1)))
    h = np.fft.fft(taps, nfft)
    hmax = np.max(np.abs(h))
    if np.min(np.abs(h)) < 1e-3 * hmax:
        warnings.warn("channel has a near-null frequency bin; deconvolution "
                      "is ill conditioned", ConditioningWarning)
    eps = (1e-3 * hmax) ** 2
    zf = np.fft.fft(z, nfft)
    out = np.fft.ifft(zf * np.conj(h) / (np.abs(h) ** 2 + eps))[:len(z)]
    return PacketCapture(out, packet.start_index, packet.protocol,
                         packet.snr_db)


@dataclass(frozen=True)
class PacketAnalysis:
    """Everything one packet yields once preprocessing is done."""

    linear: LinearParams
    series: NonlinearSeries
    recovered: RecoveredSignal
    timing: TimingEstimate
    snr_db: float | None
    channel: ChannelEstimate | None


def locate_packets(capture: SignalBuffer, min_gap_samples: int,
                   min_len_samples: int,
                   protocol: ProtocolConfig) -> list:
    """Segment a raw capture into PacketCaptures with a measured SNR.

    Each result views the capture's sample array cut at the burst end, so a
    whole-packet pass never chews into the following quiet gap; start_index
    points at the detected burst start, and the SNR comes from the
    inter-burst floor when one exists (None otherwise).
    """
    bounds = packet_bounds(capture, min_gap_samples, min_len_samples)
    if not bounds:
        return []
    try:
        snr = snr_estimate(capture, bounds)
    except MeasurementError:
        snr = None
    return [PacketCapture(capture.samples[:e], s, protocol, snr)
            for s, e in bounds]


def _channel_at(derot: PacketCapture, pre_sig, delta_samples: float,
                timing: TimingEstimate, n_taps: int):
    """Channel fit with the reference grid moved by a fractional delay.

    Returns (estimate, tau, start) or None when the shifted grid walks off
    the capture.
    """
    proto = derot.protocol
    ts = proto.sample_period_s
    tau = timing.tau_s + delta_samples * ts
    start = timing.start_index
    while tau < 0.0:
        tau += ts
        start -= 1
    while tau >= ts:
        tau -= ts
        start += 1
    if start < 0:
        return None
    n_clean = _cfo_clean_length(proto)
    ref = SignalBuffer(ideal_samples(pre_sig, tau, n_clean).samples,
                       proto.sample_rate_hz)
    cand = PacketCapture(derot.samples, start, proto, derot.snr_db)
    try:
        est = estimate_channel(cand, ref, n_taps)
    except MeasurementError:
        return None
    return est, tau, start


def _scan_channel(derot: PacketCapture, pre_sig, timing: TimingEstimate,
                  n_taps: int):
    """Pick the reference alignment whose few-tap fit explains the most.

    The coarse correlation peak drifts toward the channel's energy centroid,
    and a causal FIR fit cannot absorb the resulting acausal fractional
    delay. The fit residual is minimized where the composite really is
    causal, so a coarse scan plus parabolic refinement re-anchors the grid
    there.
    """
    cands = {}
    for delta in np.arange(-0.7, 0.7001, 0.1):
        got = _channel_at(derot, pre_sig, float(delta), timing, n_taps)
        if got is not None:
            cands[round(float(delta), 3)] = got
    if not cands:
        raise MeasurementError("no usable channel alignment")
    deltas = sorted(cands)
    best_i = min(range(len(deltas)),
                 key=lambda i: cands[deltas[i]][0].residual_nmse)
    best_d = deltas[best_i]
    # Residual amplitude grows linearly with grid offset, so the energy is
    # locally quadratic; one parabolic step plus a micro-scan settles it.
    if 0 < best_i < len(deltas) - 1:
        e = [10.0 ** (cands[deltas[best_i + k]][0].residual_nmse / 10.0)
             for k in (-1, 0, 1)]
        denom = e[0] - 2.0 * e[1] + e[2]
        if denom > 0:
            best_d = best_d + 0.05 * (e[0] - e[2]) / denom
            best_d = float(np.clip(best_d, deltas[best_i] - 0.1,
                                   deltas[best_i] + 0.1))
    best = cands[deltas[best_i]]
    for delta in np.arange(best_d - 0.02, best_d + 0.0201, 0.005):
        got = _channel_at(derot, pre_sig, float(delta), timing, n_taps)
        if got is not None and got[0].residual_nmse < best[0].residual_nmse:
            best = got
    return best


def analyze_packet(packet: PacketCapture, n_payload_bits: int | None = None,
                   multipath_mode: str = "off",
                   channel_taps: int = 3) -> PacketAnalysis:
    """Run the full preprocessing chain on one packet.

    multipath_mode "deconvolve" estimates an FIR channel on the derotated
    preamble, scanning the reference alignment so the channel's group delay
    does not leak into the taps, and inverts it before recovery; "off" and
    "phase_only" leave the samples alone (the two differ only in how
    verdicts use the result).
    """
    proto = packet.protocol
    ts = proto.sample_period_s
    pre_sig = _preamble_signal(proto)
    timing = estimate_timing(packet, pre_sig)
    aligned = aligned_capture(packet, timing)
    n_clean = _cfo_clean_length(proto)
    ref = SignalBuffer(ideal_samples(pre_sig, timing.tau_s, n_clean).samples,
                       proto.sample_rate_hz)
    cfo_pre = estimate_cfo(aligned, ref)

    channel = None
    cfo_carried = 0.0
    work = aligned
    cfo_local = cfo_pre
    tau_coarse = timing.tau_s
    if multipath_mode == "deconvolve":
        # The channel fit needs a rotation-free packet; fold the preamble
        # CFO out first and account for it in the reported offset.
        t = (np.arange(len(aligned.samples)) - timing.start_index) * ts \
            + timing.tau_s
        derot = PacketCapture(aligned.samples * np.exp(-1j * cfo_pre * t),
                              timing.start_index, proto, packet.snr_db)
        channel, tau_ch, start_ch = _scan_channel(derot, pre_sig, timing,
                                                  channel_taps)
        work = deconvolve(PacketCapture(derot.samples, start_ch, proto,
                                        derot.snr_db), channel)
        timing = TimingEstimate(tau_ch, start_ch, timing.peak_correlation)
        tau_coarse = tau_ch
        # The preamble CFO estimate is itself multipath-biased; measure the
        # leftover rotation on the cleaned capture.
        ref2 = SignalBuffer(ideal_samples(pre_sig, tau_ch, n_clean).samples,
                            proto.sample_rate_hz)
        cfo_resid = estimate_cfo(work, ref2)
        cfo_carried = cfo_pre
        cfo_local = cfo_resid

    rec = recover_ideal_samples(work, cfo_local, tau_coarse, n_payload_bits)
    tau = refine_timing(work, rec, cfo_local, tau_coarse)
    lin = estimate_linear(work, rec, cfo_local, tau)
    series = extract_nonlinear(work, rec, lin)
    lin = LinearParams(lin.a0_r, lin.cfo_rad_per_s + cfo_carried,
                       lin.theta0_rad, lin.tau_s)
    return PacketAnalysis(lin, series, rec, timing, packet.snr_db, channel)


def snr_estimate(capture: SignalBuffer, packet_bounds: list) -> float:
    """Signal-to-noise ratio in dB from packet and gap power.

    Raises MeasurementError when the capture has no gap to measure noise in.
    The result is clamped to [-20, 60] dB; outside that range the estimate
    is dominated by measurement artifacts anyway.
    """
    p = np.abs(np.asarray(capture.samples)) ** 2
    in_packet = np.zeros(len(p), dtype=bool)
    guard = 8
    for s, e in packet_bounds:
        in_packet[max(0, s - guard):min(len(p), e + guard)] = True
    if not in_packet.any():
        raise MeasurementError("indeterminate SNR: no packets in capture")
    gaps = p[~in_packet]
    if len(gaps) < 32:
        raise MeasurementError("indeterminate SNR: no noise-only gap")
    p_noise = float(np.mean(gaps))
    p_total = float(np.mean(p[in_packet]))
    if p_noise <= 0:
        return 60.0
    p_signal = max(p_total - p_noise, 0.0)
    if p_signal <= 0:
        return -20.0
    snr_db = 10.0 * np.log10(p_signal / p_noise)
    return float(np.clip(snr_db, -20.0, 60.0))
