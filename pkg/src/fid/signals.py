"""Baseband signal model: bit-to-waveform mapping and reference utilities.

Everything downstream (device simulation, recovery, fingerprinting) treats the
mapping implemented here as the known data-to-signal function of the protocol.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ModulationError

BPSK = "bpsk"
QPSK = "qpsk"
OQPSK = "oqpsk"
MODULATIONS = (BPSK, QPSK, OQPSK)

RECTANGULAR = "rectangular"
RAISED_COSINE = "raised-cosine"
ROOT_RAISED_COSINE = "root-raised-cosine"
HALF_SINE = "half-sine"
PSK_PULSES = (RECTANGULAR, RAISED_COSINE, ROOT_RAISED_COSINE)

# Rolloff for the (root-)raised-cosine shapes and the truncation span of the
# pulse tails, in symbols each side. Fixed protocol constants, not knobs.
ROLLOFF = 0.35
PULSE_SPAN = 10

# Published preamble constants, 128 bits each, MSB first.
PREAMBLE_BPSK_HEX = "ff5687d5d24ba127fbf8369d98d923a7"
PREAMBLE_QPSK_HEX = "444b47f0c58094282affac3fa26fd621"
PREAMBLE_OQPSK_HEX = "0795d9ee0109930829ba38f6575c1020"

def bits_from_hex(hex_string: str, n_bits: int) -> np.ndarray:
    """Expand a hex string into an MSB-first bit array of length n_bits."""
    value = int(hex_string, 16)
    if n_bits % 4 or len(hex_string) * 4 != n_bits:
        raise ModulationError("hex string does not encode %d bits" % n_bits)
    return np.array([(value >> (n_bits - 1 - i)) & 1 for i in range(n_bits)],
                    dtype=np.uint8)


def hex_from_bits(bits: np.ndarray) -> str:
    bits = as_bits(bits)
    if len(bits) % 4:
        raise ModulationError("bit count not a multiple of 4")
    value = 0
    for b in bits:
        value = (value << 1) | int(b)
    return format(value, "0%dx" % (len(bits) // 4))


def as_bits(bits) -> np.ndarray:
    """Validate and convert any 0/1 sequence to a uint8 array."""
    arr = np.asarray(bits)
    if arr.ndim != 1 or arr.size == 0:
        raise ModulationError("bit sequence must be a non-empty 1-d sequence")
    if not np.isin(arr, (0, 1)).all():
        raise ModulationError("bit sequence may contain only 0 and 1")
    return arr.astype(np.uint8)


@dataclass(frozen=True)
class ProtocolConfig:
    """Static description of the transmission format.

    preamble_bits is the published synchronization prefix every packet starts
    with; receivers rely on it being known bit for bit.
    """

    modulation: str
    symbol_rate_hz: float
    sample_rate_hz: float
    nominal_carrier_hz: float
    preamble_bits: tuple
    pulse_shape: str

    def __post_init__(self):
        if self.modulation not in MODULATIONS:
            raise ModulationError("unknown modulation %r" % (self.modulation,))
        if self.symbol_rate_hz <= 0 or self.sample_rate_hz <= 0:
            raise ModulationError("rates must be positive")
        if self.nominal_carrier_hz <= 0:
            raise ModulationError("nominal carrier must be positive")
        sps = self.sample_rate_hz / self.symbol_rate_hz
        if abs(sps - round(sps)) > 1e-9 or round(sps) < 2:
            raise ModulationError(
                "sample rate must be an integer multiple >= 2 of symbol rate")
        if self.modulation == OQPSK:
            if self.pulse_shape != HALF_SINE:
                raise ModulationError("oqpsk requires the half-sine pulse")
            # Two samples per half-symbol minimum: with only one, the n/n+2
            # phase difference is exactly zero for a -,+,- slope pattern and
            # no decision rule can recover the middle slope.
            if round(sps) % 2 or round(sps) < 4:
                raise ModulationError(
                    "oqpsk needs an even samples-per-symbol of at least 4")
        elif self.pulse_shape not in PSK_PULSES:
            raise ModulationError(
                "pulse %r not valid for %s" % (self.pulse_shape, self.modulation))
        pre = as_bits(self.preamble_bits)
        if len(pre) % self.bits_per_symbol:
            raise ModulationError("preamble length must fill whole symbols")
        object.__setattr__(self, "preamble_bits", tuple(int(b) for b in pre))

    @property
    def sps(self) -> int:
        return int(round(self.sample_rate_hz / self.symbol_rate_hz))

    @property
    def bits_per_symbol(self) -> int:
        return 1 if self.modulation == BPSK else 2

    @property
    def sample_period_s(self) -> float:
        return 1.0 / self.sample_rate_hz

    @property
    def preamble_n_samples(self) -> int:
        return len(self.preamble_bits) // self.bits_per_symbol * self.sps


def bpsk_default() -> ProtocolConfig:
    return ProtocolConfig(BPSK, 1e6, 4e6, 2.45e9,
                          tuple(bits_from_hex(PREAMBLE_BPSK_HEX, 128)),
                          RAISED_COSINE)


def qpsk_default() -> ProtocolConfig:
    return ProtocolConfig(QPSK, 2e6, 4e6, 2.45e9,
                          tuple(bits_from_hex(PREAMBLE_QPSK_HEX, 128)),
                          RAISED_COSINE)


def oqpsk_default() -> ProtocolConfig:
    return ProtocolConfig(OQPSK, 1e6, 4e6, 2.45e9,
                          tuple(bits_from_hex(PREAMBLE_OQPSK_HEX, 128)),
                          HALF_SINE)


@dataclass(frozen=True)
class SignalBuffer:
    """Complex baseband samples at a fixed rate."""

    samples: np.ndarray
    sample_rate_hz: float

    def __post_init__(self):
        object.__setattr__(self, "samples",
                           np.asarray(self.samples, dtype=np.complex128))

    def __len__(self):
        return len(self.samples)


@dataclass(frozen=True)
class IdealSignal:
    """Noise-free modulated signal plus the bookkeeping to resynthesize it.

    symbol_phases holds the phase trajectory at the decision instants:
    symbol centers (k + 1/2)T for BPSK/QPSK, half-symbol boundaries jT/2 for
    OQPSK (where the phase sits exactly on the quarter-turn lattice).
    """

    buffer: SignalBuffer
    symbol_phases: np.ndarray
    protocol: ProtocolConfig
    bits: tuple = field(repr=False, default=())
    levels: np.ndarray = field(repr=False, default=None)


def _pulse(kind: str, t: np.ndarray, period: float) -> np.ndarray:
    """Evaluate the symbol pulse at times t (seconds, centered on 0)."""
    x = t / period
    if kind == RECTANGULAR:
        # Tolerant half-open window so grid samples landing exactly on a
        # symbol boundary are claimed by exactly one symbol.
        return ((x >= -0.5 - 1e-9) & (x < 0.5 - 1e-9)).astype(float)
    b = ROLLOFF
    out = np.zeros_like(x)
    if kind == RAISED_COSINE:
        denom = 1.0 - (2.0 * b * x) ** 2
        sing = np.abs(denom) < 1e-10
        safe = np.where(sing, 1.0, denom)
        out = np.sinc(x) * np.cos(np.pi * b * x) / safe
        out[sing] = (np.pi / 4.0) * np.sinc(1.0 / (2.0 * b))
    elif kind == ROOT_RAISED_COSINE:
        denom = 1.0 - (4.0 * b * x) ** 2
        sing0 = np.abs(x) < 1e-10
        sing1 = np.abs(denom) < 1e-10
        safe_x = np.where(sing0, 1.0, x)
        safe_d = np.where(sing1, 1.0, denom)
        out = (np.sin(np.pi * safe_x * (1 - b))
               + 4 * b * safe_x * np.cos(np.pi * safe_x * (1 + b))) \
            / (np.pi * safe_x * safe_d)
        out[sing0] = 1.0 - b + 4.0 * b / np.pi
        if sing1.any():
            out[sing1 & ~sing0] = (b / np.sqrt(2.0)) * (
                (1 + 2 / np.pi) * math.sin(math.pi / (4 * b))
                + (1 - 2 / np.pi) * math.cos(math.pi / (4 * b)))
    else:
        raise ModulationError("unknown pulse %r" % (kind,))
    out[np.abs(x) > PULSE_SPAN] = 0.0
    return out


def _synth_psk(levels: np.ndarray, protocol: ProtocolConfig, tau_s: float,
               n_samples: int) -> np.ndarray:
    """Sum of pulse-shaped symbols evaluated at n*Ts + tau."""
    sps = protocol.sps
    period = 1.0 / protocol.symbol_rate_hz
    ts = protocol.sample_period_s
    n = np.arange(n_samples)
    t = n * ts + tau_s
    out = np.zeros(n_samples, dtype=np.complex128)
    # Gather the 2*PULSE_SPAN+1 symbols whose pulse can reach each sample.
    k_near = np.round(t / period - 0.5).astype(np.int64)
    for off in range(-PULSE_SPAN, PULSE_SPAN + 1):
        k = k_near + off
        inside = (k >= 0) & (k < len(levels))
        if not inside.any():
            continue
        kc = np.clip(k, 0, len(levels) - 1)
        w = _pulse(protocol.pulse_shape, t - (k + 0.5) * period, period)
        out += np.where(inside, levels[kc] * w, 0.0)
    return out


def _oqpsk_slopes(levels: np.ndarray) -> np.ndarray:
    """Half-symbol phase slope signs from I/Q levels (a + jb per symbol)."""
    a = np.real(levels)
    b = np.imag(levels)
    b_prev = np.concatenate(([1.0], b[:-1]))  # virtual leading Q level
    slopes = np.empty(2 * len(levels))
    slopes[0::2] = -a * b_prev
    slopes[1::2] = a * b
    return slopes


def _synth_oqpsk(levels: np.ndarray, protocol: ProtocolConfig, tau_s: float,
                 n_samples: int) -> np.ndarray:
    period = 1.0 / protocol.symbol_rate_hz
    half = 0.5 * period
    slopes = _oqpsk_slopes(levels)
    # Phase at half-symbol boundary j, exactly on the pi/2 lattice.
    bound = 0.5 * np.pi * np.concatenate(([1.0], 1.0 + np.cumsum(slopes)))
    t = np.arange(n_samples) * protocol.sample_period_s + tau_s
    j = np.clip(np.floor(t / half).astype(np.int64), 0, len(slopes) - 1)
    frac = t / half - j
    theta = bound[j] + slopes[j] * 0.5 * np.pi * frac
    return np.exp(1j * theta)


def _levels(bits: np.ndarray, protocol: ProtocolConfig) -> np.ndarray:
    m = protocol.modulation
    if m == BPSK:
        return np.exp(1j * np.pi * bits.astype(float))
    pairs = bits.reshape(-1, 2)
    if m == QPSK:
        # Gray map; table indexed by 2*first_bit + second_bit.
        table = np.pi * np.array([0.25, 0.75, 1.75, 1.25])
        phases = table[2 * pairs[:, 0].astype(int) + pairs[:, 1]]
        return np.exp(1j * phases)
    # OQPSK: NRZ levels, I from even bits, Q from odd bits.
    return (1.0 - 2.0 * pairs[:, 0]) + 1j * (1.0 - 2.0 * pairs[:, 1])


def modulate(bits, protocol: ProtocolConfig) -> IdealSignal:
    """Map a bit sequence to its ideal baseband signal.

    Args:
      bits: 0/1 sequence, length a multiple of the protocol's bits-per-symbol.
      protocol: transmission format to modulate under.

    Returns:
      IdealSignal sampled at the protocol rate, one symbol period per symbol.
    """
    bits = as_bits(bits)
    bps = protocol.bits_per_symbol
    if len(bits) % bps:
        raise ModulationError("bit count must be a multiple of %d" % bps)
    levels = _levels(bits, protocol)
    n_samples = len(levels) * protocol.sps
    if protocol.modulation == OQPSK:
        samples = _synth_oqpsk(levels, protocol, 0.0, n_samples)
        slopes = _oqpsk_slopes(levels)
        phases = 0.5 * np.pi * np.concatenate(([1.0], 1.0 + np.cumsum(slopes)))
        phases = _wrap(phases)
    else:
        samples = _synth_psk(levels, protocol, 0.0, n_samples)
        phases = np.angle(levels)
    return IdealSignal(SignalBuffer(samples, protocol.sample_rate_hz),
                       phases, protocol, tuple(int(b) for b in bits), levels)


def ideal_samples(signal: IdealSignal, tau_s: float,
                  n_samples: int | None = None) -> SignalBuffer:
    """Resynthesize the ideal signal on the grid n*Ts + tau.

    Exact for tau = 0 by construction (same synthesis path as modulate).
    """
    if n_samples is None:
        n_samples = len(signal.buffer)
    if signal.protocol.modulation == OQPSK:
        s = _synth_oqpsk(signal.levels, signal.protocol, tau_s, n_samples)
    else:
        s = _synth_psk(signal.levels, signal.protocol, tau_s, n_samples)
    return SignalBuffer(s, signal.protocol.sample_rate_hz)


def phase_step_set(protocol: ProtocolConfig) -> tuple:
    """Possible phase increments between consecutive decision instants.

    BPSK/QPSK values follow from the constellation. The OQPSK per-sample step
    is measured off an actual modulated signal rather than assumed.
    """
    if protocol.modulation == BPSK:
        return (-np.pi, 0.0, np.pi)
    if protocol.modulation == QPSK:
        return (-np.pi, -0.5 * np.pi, 0.0, 0.5 * np.pi, np.pi)
    probe = modulate(random_payload(128, seed=7), protocol)
    x = probe.buffer.samples
    d = np.angle(x[1:] * np.conj(x[:-1]))
    delta = float(np.max(np.abs(d)))
    if np.any(np.abs(np.abs(d) - delta) > 1e-9):
        raise ModulationError("inconsistent per-sample phase step")
    return (-delta, delta)


def random_payload(length_bits: int, seed: int) -> np.ndarray:
    """Deterministic pseudo-random payload bits for a given seed."""
    if length_bits < 1:
        raise ModulationError("payload must contain at least one bit")
    return np.random.default_rng(seed).integers(
        0, 2, int(length_bits)).astype(np.uint8)


@dataclass(frozen=True)
class CorrelationStats:
    mean: float
    variance: float
    n_pairs: int


def pairwise_correlation(buffers: list) -> CorrelationStats:
    """Peak normalized cross-correlation over all unordered buffer pairs."""
    if len(buffers) < 2:
        raise ModulationError("need at least two buffers to correlate")
    arrays = [np.asarray(getattr(b, "samples", b), dtype=np.complex128)
              for b in buffers]
    peaks = []
    for i in range(len(arrays)):
        for j in range(i + 1, len(arrays)):
            a, b = arrays[i], arrays[j]
            nfft = 1 << int(np.ceil(np.log2(len(a) + len(b) - 1)))
            corr = np.fft.ifft(np.fft.fft(a, nfft)
                               * np.conj(np.fft.fft(b, nfft)))
            denom = np.linalg.norm(a) * np.linalg.norm(b)
            if denom == 0:
                raise ModulationError("cannot correlate an all-zero buffer")
            peaks.append(float(np.max(np.abs(corr)) / denom))
    peaks = np.asarray(peaks)
    return CorrelationStats(float(peaks.mean()), float(peaks.var()),
                            len(peaks))


def _wrap(theta):
    """Wrap angles to (-pi, pi]."""
    out = np.mod(-np.asarray(theta) + np.pi, 2.0 * np.pi)
    return np.pi - out


def symbol_center_indices(protocol: ProtocolConfig, n_symbols: int) -> np.ndarray:
    """Sample indices of the symbol decision instants (k + 1/2)T."""
    sps = protocol.sps
    if sps % 2:
        raise ModulationError("decision grid needs an even samples-per-symbol")
    return np.arange(n_symbols) * sps + sps // 2
