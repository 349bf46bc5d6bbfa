"""Canonical gauge for the nonlinear residual decomposition.

A received packet only determines the amplitude residual up to a scalar gain
and the phase residual up to a constant offset. The extractor and the
simulator's ground-truth oracle must fix those free constants the same way,
otherwise their outputs differ by a gauge term that has nothing to do with
the device. Both sides import these helpers.
"""

from __future__ import annotations

import numpy as np

# Samples where the ideal envelope dips below this carry almost no phase
# information at realistic SNR; they are excluded from residual statistics.
ENVELOPE_MASK_THRESHOLD = 0.3


def envelope_mask(ideal_env: np.ndarray) -> np.ndarray:
    return np.asarray(ideal_env) >= ENVELOPE_MASK_THRESHOLD


def envelope_gain(received_env: np.ndarray, ideal_env: np.ndarray,
                  idx: np.ndarray) -> float:
    """Least-squares gain a0 such that received ~= a0 * ideal over idx.

    Equals the mean received envelope when the ideal envelope is constant 1.
    """
    r = np.asarray(received_env, dtype=float)[idx]
    e = np.asarray(ideal_env, dtype=float)[idx]
    denom = float(np.dot(e, e))
    if denom <= 0.0 or len(r) == 0:
        raise ValueError("gauge gain undefined: empty or zero-envelope index set")
    return float(np.dot(r, e) / denom)


def phase_offset(raw_phase: np.ndarray, idx: np.ndarray) -> float:
    """Circular mean of the raw phase residual over idx."""
    ph = np.asarray(raw_phase, dtype=float)[idx]
    if len(ph) == 0:
        raise ValueError("gauge offset undefined: empty index set")
    return float(np.angle(np.mean(np.exp(1j * ph))))


def phase_detrend(theta: np.ndarray, t: np.ndarray, ideal_env: np.ndarray,
                  idx: np.ndarray) -> np.ndarray:
    """Remove the affine-in-time component of a phase residual.

    A linear phase trend is indistinguishable from a small carrier-offset
    error plus a constant, so it carries no device information; both the
    extractor and the oracle project it out, weighted by squared ideal
    envelope so low-envelope samples cannot steer the fit. The input must
    already be free of wraps over idx (residuals well inside (-pi, pi)).
    """
    th = np.asarray(theta, dtype=float)
    tt = np.asarray(t, dtype=float)
    w = np.asarray(ideal_env, dtype=float) ** 2
    sel = np.zeros(len(th), dtype=bool)
    sel[idx] = True
    ws = w[sel]
    if ws.sum() <= 0.0 or sel.sum() < 2:
        raise ValueError("gauge detrend undefined: empty index set")
    t0 = np.average(tt[sel], weights=ws)
    th0 = np.average(th[sel], weights=ws)
    dt = tt[sel] - t0
    denom = float(np.sum(ws * dt * dt))
    slope = 0.0 if denom == 0.0 else float(np.sum(ws * dt * (th[sel] - th0))) / denom
    return th - (th0 + slope * (tt - t0))
