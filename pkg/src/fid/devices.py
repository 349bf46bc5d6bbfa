"""Synthetic transmitter and channel models.

A device turns an ideal signal into what its imperfect front end actually
radiates: a carrier frequency offset, a static amplitude scale, and two
data-dependent nonlinear residuals driven by the memory-filtered envelope.
The channel adds propagation loss, multipath, receiver offset and noise.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import gauge
from .errors import ModulationError
from .signals import IdealSignal, SignalBuffer, ideal_samples

MAX_MEMORY_TAPS = 9
NOISELESS = "noiseless"


@dataclass(frozen=True)
class DeviceProfile:
    """Per-device hardware parameters.

    memory_taps are real FIR weights over the ideal samples, listed from the
    most-future tap to the most-past one; memory_future says how many of them
    look ahead of the current sample. am_am_coeffs weight odd powers
    (u, u^3, ...) of the filtered envelope; am_pm_coeffs weight powers
    (w, w^2, ...) of the envelope filtered with the self-convolved taps,
    which gives the phase distortion a longer memory than the amplitude one.
    """

    device_id: str
    cfo_hz: float
    base_amplitude: float
    am_am_coeffs: tuple
    am_pm_coeffs: tuple
    memory_taps: tuple = (1.0,)
    memory_future: int = 0
    phase_noise_std: float = 0.0

    def __post_init__(self):
        if not self.device_id:
            raise ValueError("device_id must be non-empty")
        if self.base_amplitude <= 0:
            raise ValueError("base_amplitude must be positive")
        taps = tuple(float(t) for t in self.memory_taps)
        if not 1 <= len(taps) <= MAX_MEMORY_TAPS:
            raise ValueError("memory_taps length must be 1..%d" % MAX_MEMORY_TAPS)
        if abs(sum(taps) - 1.0) > 1e-9:
            raise ValueError("memory_taps must sum to 1")
        if not 0 <= int(self.memory_future) < len(taps):
            raise ValueError("memory_future out of range for the tap list")
        if self.phase_noise_std < 0:
            raise ValueError("phase_noise_std must be non-negative")
        object.__setattr__(self, "memory_taps", taps)
        object.__setattr__(self, "am_am_coeffs",
                           tuple(float(c) for c in self.am_am_coeffs))
        object.__setattr__(self, "am_pm_coeffs",
                           tuple(float(c) for c in self.am_pm_coeffs))
        if self.am_am_coeffs:
            # A physical amplifier never drives the envelope through zero;
            # pulse-shaping overshoot can push u past 1, hence the 1.6 bound.
            u = np.linspace(0.0, 1.6, 33)
            gain = 1.0 + sum(c * u ** (2 * d + 1)
                             for d, c in enumerate(self.am_am_coeffs))
            if gain.min() < 0.05:
                raise ValueError("am_am_coeffs invert the envelope "
                                 "(gain %.3f at u=%.2f)"
                                 % (gain.min(), u[gain.argmin()]))

    def as_dict(self) -> dict:
        return {
            "device_id": self.device_id,
            "cfo_hz": self.cfo_hz,
            "base_amplitude": self.base_amplitude,
            "am_am_coeffs": list(self.am_am_coeffs),
            "am_pm_coeffs": list(self.am_pm_coeffs),
            "memory_taps": list(self.memory_taps),
            "memory_future": self.memory_future,
            "phase_noise_std": self.phase_noise_std,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DeviceProfile":
        return cls(device_id=d["device_id"], cfo_hz=float(d["cfo_hz"]),
                   base_amplitude=float(d["base_amplitude"]),
                   am_am_coeffs=tuple(d["am_am_coeffs"]),
                   am_pm_coeffs=tuple(d["am_pm_coeffs"]),
                   memory_taps=tuple(d.get("memory_taps", (1.0,))),
                   memory_future=int(d.get("memory_future", 0)),
                   phase_noise_std=float(d.get("phase_noise_std", 0.0)))


@dataclass(frozen=True)
class ChannelConfig:
    """Propagation model between one transmitter and the receiver."""

    distance_m: float = 1.0
    path_loss_exponent: float = 2.0
    orientation_rad: float = 0.0
    taps: tuple = (1.0 + 0.0j,)
    snr_db: object = NOISELESS
    receiver_cfo_hz: float = 0.0
    phase_offset_rad: float = 0.0

    def __post_init__(self):
        if self.distance_m <= 0:
            raise ValueError("distance_m must be positive")
        if self.path_loss_exponent <= 0:
            raise ValueError("path_loss_exponent must be positive")
        if not abs(self.orientation_rad) < 0.5 * np.pi:
            raise ValueError("orientation must satisfy |alpha| < pi/2")
        taps = tuple(complex(t) for t in self.taps)
        if not 1 <= len(taps) <= 64:
            raise ValueError("taps length must be 1..64")
        if isinstance(self.snr_db, str):
            if self.snr_db != NOISELESS:
                raise ValueError("snr_db must be a number or %r" % NOISELESS)
        else:
            float(self.snr_db)
        object.__setattr__(self, "taps", taps)

    def as_dict(self) -> dict:
        return {
            "distance_m": self.distance_m,
            "path_loss_exponent": self.path_loss_exponent,
            "orientation_rad": self.orientation_rad,
            "taps": [[t.real, t.imag] for t in self.taps],
            "snr_db": self.snr_db,
            "receiver_cfo_hz": self.receiver_cfo_hz,
            "phase_offset_rad": self.phase_offset_rad,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ChannelConfig":
        taps = tuple(complex(t[0], t[1]) if isinstance(t, (list, tuple))
                     else complex(t) for t in d.get("taps", [(1.0, 0.0)]))
        return cls(distance_m=float(d.get("distance_m", 1.0)),
                   path_loss_exponent=float(d.get("path_loss_exponent", 2.0)),
                   orientation_rad=float(d.get("orientation_rad", 0.0)),
                   taps=taps,
                   snr_db=d.get("snr_db", NOISELESS),
                   receiver_cfo_hz=float(d.get("receiver_cfo_hz", 0.0)),
                   phase_offset_rad=float(d.get("phase_offset_rad", 0.0)))


def _memory_filter(x: np.ndarray, taps: tuple, future: int) -> np.ndarray:
    """v[n] = sum_i taps[i] * x[n + future - i], zero padded at the edges."""
    full = np.convolve(x, np.asarray(taps, dtype=x.dtype))
    return full[future:future + len(x)]


def _distortion_terms(device: DeviceProfile, xprime: np.ndarray):
    """Ground-truth pow~ and Theta~ series for the given ideal samples."""
    taps = np.asarray(device.memory_taps)
    u = np.abs(_memory_filter(xprime, device.memory_taps, device.memory_future))
    pow_t = np.zeros(len(xprime))
    acc = u.copy()
    u_sq = u * u
    for a in device.am_am_coeffs:
        pow_t += a * acc
        acc = acc * u_sq
    taps2 = tuple(np.convolve(taps, taps))
    w = np.abs(_memory_filter(xprime, taps2, 2 * device.memory_future))
    theta_t = np.zeros(len(xprime))
    acc = w.copy()
    for b in device.am_pm_coeffs:
        theta_t += b * acc
        acc = acc * w
    return pow_t, theta_t


def transmit(device: DeviceProfile, ideal: IdealSignal, tau_s: float = 0.0,
             seed: int = 0) -> SignalBuffer:
    """Radiate an ideal signal through the device front end.

    Args:
      device: transmitter hardware profile.
      ideal: modulated signal to send.
      tau_s: sampling-grid offset of the eventual receiver; the returned
        samples sit at instants n*Ts + tau_s.
      seed: phase-noise draw (unused when phase_noise_std is zero).

    Returns:
      The transmitted baseband samples, same length as the ideal buffer.
    """
    proto = ideal.protocol
    x = ideal_samples(ideal, tau_s).samples
    pow_t, theta_t = _distortion_terms(device, x)
    t = np.arange(len(x)) / proto.sample_rate_hz + tau_s
    phase = theta_t + 2.0 * np.pi * device.cfo_hz * t
    if device.phase_noise_std > 0:
        rng = np.random.default_rng(seed)
        phase = phase + np.cumsum(
            rng.normal(0.0, device.phase_noise_std, len(x)))
    y = device.base_amplitude * x * (1.0 + pow_t) * np.exp(1j * phase)
    return SignalBuffer(y, proto.sample_rate_hz)


@dataclass(frozen=True)
class OracleTerms:
    """Ground-truth nonlinear residuals in the canonical receiver gauge."""

    pow: np.ndarray
    theta: np.ndarray
    mask: np.ndarray


def oracle_nonlinear_terms(device: DeviceProfile, ideal: IdealSignal,
                           tau_s: float = 0.0) -> OracleTerms:
    """What a perfect extractor would recover from a clean capture.

    The amplitude residual is expressed relative to the least-squares envelope
    gain and the phase residual relative to its circular mean, because those
    constants are not observable by any receiver; see the gauge module.
    """
    x = ideal_samples(ideal, tau_s).samples
    pow_t, theta_t = _distortion_terms(device, x)
    env_ideal = np.abs(x)
    mask = gauge.envelope_mask(env_ideal)
    env_rx = device.base_amplitude * env_ideal * (1.0 + pow_t)
    a0 = gauge.envelope_gain(env_rx, env_ideal, mask)
    pow_o = env_rx / a0 - env_ideal
    ts = 1.0 / ideal.buffer.sample_rate_hz
    t = np.arange(len(x)) * ts + tau_s
    th0 = gauge.phase_offset(theta_t, mask)
    theta_o = gauge.phase_detrend(theta_t - th0, t, env_ideal, mask)
    theta_o = np.where(mask, theta_o, 0.0)
    return OracleTerms(pow_o, theta_o, mask)


def apply_channel(signal: SignalBuffer, channel: ChannelConfig,
                  seed: int = 0) -> SignalBuffer:
    """Propagate a transmitted signal to the receiver input.

    Applies path loss and antenna orientation as a real gain, a constant
    phase offset, causal multipath taps, the receiver's own frequency error
    as e^{-j 2 pi f_r n Ts}, and white Gaussian noise at the configured SNR.
    """
    x = signal.samples
    g = (channel.distance_m ** (-channel.path_loss_exponent)
         * np.cos(channel.orientation_rad)
         * np.exp(1j * channel.phase_offset_rad))
    taps = np.asarray(channel.taps, dtype=np.complex128)
    y = g * np.convolve(x, taps)[:len(x)]
    if channel.receiver_cfo_hz:
        n = np.arange(len(y))
        y = y * np.exp(-2j * np.pi * channel.receiver_cfo_hz * n
                       / signal.sample_rate_hz)
    if channel.snr_db != NOISELESS:
        rng = np.random.default_rng(seed)
        p_sig = float(np.mean(np.abs(y) ** 2))
        if p_sig <= 0:
            raise ModulationError("cannot add noise to an all-zero signal")
        sigma = np.sqrt(p_sig * 10.0 ** (-float(channel.snr_db) / 10.0) / 2.0)
        y = y + sigma * (rng.standard_normal(len(y))
                         + 1j * rng.standard_normal(len(y)))
    return SignalBuffer(y, signal.sample_rate_hz)
