"""Synthetic device populations for experiments and acceptance runs.

Coefficients are drawn from the ranges below, which were chosen so that
every generated transmitter is physical (no envelope inversion, monotone
drive-to-output curve, bounded gain ripple) while its nonlinear residual
stays far enough above the receiver noise floor to be learnable from a
single packet. Carrier offsets follow the usual crystal tolerance: up to
30 ppm off nominal either way.
"""

from __future__ import annotations

import numpy as np

from .devices import DeviceProfile, _memory_filter
from .gauge import envelope_gain, envelope_mask
from .signals import ProtocolConfig, modulate, qpsk_default

CFO_PPM = 30.0
GAIN_FLOOR = 0.05
GAIN_RIPPLE = 2.2
_GRID = np.linspace(0.0, 1.6, 33)

# Drawing ranges for the odd-power envelope polynomial. The family is a
# soft limiter: early compression, then a flattening correction that
# keeps the output monotone through the top of the drive range.
AM_AM_RANGES = ((-1.05, -0.60), (-0.75, -0.05), (0.45, 1.15),
                (-0.30, -0.08))
# Phase polynomial (powers w, w^2): strength then curvature fraction.
AM_PM_B1 = (3.0, 4.5)
AM_PM_CURVE = (0.30, 0.42)

# Residual-to-carrier power floors a drawn device must clear, measured on
# the reference envelope below. Keeps every member identifiable within a
# packet's worth of samples at working SNRs.
MIN_POW_FRACTION = 0.10
MIN_THETA_STD = 0.22

_REFERENCE = {}


def _reference_envelope(protocol: ProtocolConfig) -> tuple:
    key = (protocol.modulation, protocol.symbol_rate_hz,
           protocol.sample_rate_hz, protocol.pulse_shape)
    if key not in _REFERENCE:
        rng = np.random.default_rng(20260401)
        bits = rng.integers(0, 2, 8192).astype(np.uint8)
        x = modulate(bits, protocol).buffer.samples
        env = np.abs(x)
        _REFERENCE[key] = (x, env, envelope_mask(env))
    return _REFERENCE[key]


def residual_strength(device: DeviceProfile,
                      protocol: ProtocolConfig | None = None) -> tuple:
    """(pow fraction, theta std) of the device on a reference signal.

    The pow figure is the fraction of received envelope power no scaled
    copy of the ideal envelope can explain; theta is the standard
    deviation of the phase residual in radians. Both are what a
    fingerprint has to rise above the noise with.
    """
    protocol = protocol or qpsk_default()
    x, env, mask = _reference_envelope(protocol)
    u = np.abs(_memory_filter(x, device.memory_taps, device.memory_future))
    p = np.zeros(len(x))
    acc = u.copy()
    for c in device.am_am_coeffs:
        p += c * acc
        acc = acc * u * u
    rx = env * (1.0 + p)
    a0 = envelope_gain(rx, env, mask)
    resid = rx[mask] - a0 * env[mask]
    pow_fraction = float(resid.var() / np.mean(rx[mask] ** 2))
    taps2 = tuple(np.convolve(device.memory_taps, device.memory_taps))
    w = np.abs(_memory_filter(x, taps2, 2 * device.memory_future))
    th = np.zeros(len(x))
    acc = w.copy()
    for b in device.am_pm_coeffs:
        th += b * acc
        acc = acc * w
    theta_std = float(th[mask].std())
    return pow_fraction, theta_std


def _monotone_physical(coeffs) -> bool:
    gain = 1.0 + sum(c * _GRID ** (2 * d + 1)
                     for d, c in enumerate(coeffs))
    if gain.min() < GAIN_FLOOR or gain.max() > GAIN_RIPPLE:
        return False
    out = _GRID * gain
    return bool(np.all(np.diff(out) >= -1e-9))


def _draw_am_am(rng) -> tuple:
    for _ in range(4000):
        coeffs = tuple(rng.uniform(lo, hi) for lo, hi in AM_AM_RANGES)
        if _monotone_physical(coeffs):
            return coeffs
    raise RuntimeError("am_am draw ranges exhausted")


def _draw_memory(rng) -> tuple:
    lead = rng.uniform(0.06, 0.16)
    lag1 = rng.uniform(0.06, 0.20)
    lag2 = rng.uniform(0.0, 0.07) if rng.random() < 0.5 else 0.0
    taps = [lead, 1.0 - lead - lag1 - lag2, lag1]
    if lag2 > 0:
        taps.append(lag2)
    return tuple(taps), 1


def _draw_device(rng, device_id: str, cfo_hz: float,
                 protocol: ProtocolConfig) -> DeviceProfile:
    for _ in range(200):
        taps, future = _draw_memory(rng)
        am_am = _draw_am_am(rng)
        b1 = rng.uniform(*AM_PM_B1)
        am_pm = (b1, -b1 * rng.uniform(*AM_PM_CURVE))
        dev = DeviceProfile(device_id=device_id, cfo_hz=cfo_hz,
                            base_amplitude=float(rng.uniform(0.6, 1.8)),
                            am_am_coeffs=am_am, am_pm_coeffs=am_pm,
                            memory_taps=taps, memory_future=future)
        pow_frac, theta_std = residual_strength(dev, protocol)
        if pow_frac >= MIN_POW_FRACTION and theta_std >= MIN_THETA_STD:
            return dev
    raise RuntimeError("device draw did not reach the residual floors")


def _draw_cfos(rng, n: int, max_abs_hz: float,
               min_separation_hz: float) -> list:
    if (2.0 * max_abs_hz) < (n - 1) * min_separation_hz:
        raise ValueError("cannot fit %d carriers %g Hz apart within "
                         "+/-%g Hz" % (n, min_separation_hz, max_abs_hz))
    for _ in range(10000):
        cfos = np.sort(rng.uniform(-max_abs_hz, max_abs_hz, n))
        if n == 1 or np.diff(cfos).min() >= min_separation_hz:
            order = rng.permutation(n)
            return [float(cfos[i]) for i in order]
    raise RuntimeError("carrier separation draw exhausted")


def generate_population(n_devices: int, seed: int,
                        protocol: ProtocolConfig | None = None,
                        min_cfo_separation_hz: float = 2000.0) -> tuple:
    """Draw a population of distinct transmitters, deterministically.

    Carrier offsets are uniform within +/-30 ppm of the nominal carrier,
    re-drawn until every pair sits at least min_cfo_separation_hz apart.
    """
    if n_devices < 1:
        raise ValueError("n_devices must be positive")
    protocol = protocol or qpsk_default()
    rng = np.random.default_rng(seed)
    max_abs = CFO_PPM * 1e-6 * protocol.nominal_carrier_hz
    cfos = _draw_cfos(rng, n_devices, max_abs, min_cfo_separation_hz)
    return tuple(_draw_device(rng, "dev-%02d" % i, cfos[i], protocol)
                 for i in range(n_devices))


DEFAULT_POPULATION_SEED = 41


def default_population(protocol: ProtocolConfig | None = None) -> tuple:
    """The ten-device population the acceptance experiments run on."""
    return generate_population(10, DEFAULT_POPULATION_SEED, protocol)


def default_memory_device() -> DeviceProfile:
    """A transmitter whose envelope memory reaches several samples back;
    the reference subject for window-size sweeps."""
    return DeviceProfile(
        device_id="memory-ref",
        cfo_hz=11700.0,
        base_amplitude=1.0,
        am_am_coeffs=(-0.9514, -0.3608, 1.0930, -0.2708),
        am_pm_coeffs=(3.8, -1.45),
        memory_taps=(0.02, 0.1, 0.55, 0.22, 0.07, 0.02, 0.012, 0.008),
        memory_future=2)


def near_clone_pair(seed: int = 7,
                    protocol: ProtocolConfig | None = None) -> tuple:
    """Two transmitters sharing carrier, power, and memory, differing
    only in their nonlinearity shapes. The hard case: the carrier gate
    cannot separate them."""
    protocol = protocol or qpsk_default()
    rng = np.random.default_rng(seed)
    cfo = float(rng.uniform(-40e3, 40e3))
    amp = float(rng.uniform(0.8, 1.4))
    taps = (0.1, 0.8, 0.1)
    a = DeviceProfile(device_id="clone-a", cfo_hz=cfo, base_amplitude=amp,
                      am_am_coeffs=(-0.9514, -0.3608, 1.0930, -0.2708),
                      am_pm_coeffs=(3.8, -1.45),
                      memory_taps=taps, memory_future=1)
    b = DeviceProfile(device_id="clone-b", cfo_hz=cfo, base_amplitude=amp,
                      am_am_coeffs=(-0.70, -0.45, 0.75, -0.16),
                      am_pm_coeffs=(3.1, -1.02),
                      memory_taps=taps, memory_future=1)
    return a, b


def fast_envelope_device(device_id: str = "fast-env",
                         cfo_hz: float = -22000.0) -> DeviceProfile:
    """Strong phase nonlinearity and wide envelope memory; the subject
    for carrier-plus-phase-only identification."""
    return DeviceProfile(
        device_id=device_id,
        cfo_hz=cfo_hz,
        base_amplitude=1.0,
        am_am_coeffs=(-0.70, -0.45, 0.75, -0.16),
        am_pm_coeffs=(4.5, -1.8),
        memory_taps=(0.08, 0.14, 0.5, 0.18, 0.1),
        memory_future=2)
