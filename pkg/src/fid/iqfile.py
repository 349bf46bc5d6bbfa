"""Capture files: interleaved float32 I/Q with a JSON sidecar.

The body holds little-endian 32-bit float pairs, in-phase first, one pair
per sample. Everything a reader needs to interpret them lives in the
sidecar next to the body, named <body> + ".json".
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .errors import FidError
from .signals import (HALF_SINE, MODULATIONS, PSK_PULSES, ProtocolConfig,
                      hex_from_bits, bits_from_hex)

SIDECAR_VERSION = 1


class CaptureFileError(FidError):
    """Capture body or sidecar is missing, malformed, or inconsistent."""


def sidecar_path(body_path) -> Path:
    p = Path(body_path)
    return p.with_name(p.name + ".json")


def write_capture(path, samples, protocol: ProtocolConfig,
                  description: str = "", payload_bits=None,
                  device_id: str | None = None) -> Path:
    """Write samples and sidecar; returns the body path."""
    path = Path(path)
    arr = np.asarray(samples, dtype=np.complex128)
    if arr.ndim != 1 or arr.size == 0:
        raise CaptureFileError("samples must be a non-empty 1-d sequence")
    inter = np.empty(2 * len(arr), dtype="<f4")
    inter[0::2] = arr.real
    inter[1::2] = arr.imag
    path.write_bytes(inter.tobytes())
    meta = {
        "format_version": SIDECAR_VERSION,
        "sample_rate_hz": protocol.sample_rate_hz,
        "nominal_carrier_hz": protocol.nominal_carrier_hz,
        "protocol": {
            "modulation": protocol.modulation,
            "symbol_rate_hz": protocol.symbol_rate_hz,
            "pulse_shape": protocol.pulse_shape,
        },
        "description": description,
    }
    if payload_bits is not None:
        bits = np.asarray(payload_bits, dtype=np.uint8)
        meta["payload_bits_hex"] = hex_from_bits(bits)
        meta["payload_bits_len"] = int(len(bits))
    if device_id is not None:
        meta["device_id"] = device_id
    sidecar_path(path).write_text(json.dumps(meta, sort_keys=True,
                                             indent=2) + "\n")
    return path


def read_capture(path) -> tuple:
    """Read a capture body plus sidecar.

    Returns (samples, sidecar_dict). The sample array is complex128; the
    sidecar comes back parsed and checked for the fields above.
    """
    path = Path(path)
    side = sidecar_path(path)
    if not path.exists():
        raise CaptureFileError("capture body missing: %s" % path)
    if not side.exists():
        raise CaptureFileError("capture sidecar missing: %s" % side)
    raw = path.read_bytes()
    if len(raw) == 0 or len(raw) % 8:
        raise CaptureFileError(
            "capture body must hold float32 I/Q pairs (got %d bytes)"
            % len(raw))
    inter = np.frombuffer(raw, dtype="<f4")
    samples = inter[0::2].astype(np.float64) \
        + 1j * inter[1::2].astype(np.float64)
    try:
        meta = json.loads(side.read_text())
    except json.JSONDecodeError as exc:
        raise CaptureFileError("sidecar is not valid JSON: %s" % exc) \
            from None
    _check_sidecar(meta, side)
    return samples, meta


def _check_sidecar(meta: dict, side: Path) -> None:
    if not isinstance(meta, dict):
        raise CaptureFileError("sidecar must be a JSON object: %s" % side)
    version = meta.get("format_version")
    if version != SIDECAR_VERSION:
        raise CaptureFileError("unsupported sidecar version %r in %s"
                               % (version, side))
    for key in ("sample_rate_hz", "nominal_carrier_hz", "protocol",
                "description"):
        if key not in meta:
            raise CaptureFileError("sidecar missing %r: %s" % (key, side))
    proto = meta["protocol"]
    for key in ("modulation", "symbol_rate_hz", "pulse_shape"):
        if key not in proto:
            raise CaptureFileError("sidecar protocol missing %r: %s"
                                   % (key, side))
    if proto["modulation"] not in MODULATIONS:
        raise CaptureFileError("unknown modulation %r in %s"
                               % (proto["modulation"], side))
    if proto["pulse_shape"] not in PSK_PULSES + (HALF_SINE,):
        raise CaptureFileError("unknown pulse shape %r in %s"
                               % (proto["pulse_shape"], side))


def sidecar_payload_bits(meta: dict):
    """Payload bits recorded in a sidecar, or None."""
    if "payload_bits_hex" not in meta:
        return None
    n = meta.get("payload_bits_len")
    hexstr = meta["payload_bits_hex"]
    if n is None:
        n = 4 * len(hexstr)
    return bits_from_hex(hexstr, int(n))


def protocol_from_sidecar(meta: dict, preamble_bits) -> ProtocolConfig:
    """Rebuild a ProtocolConfig from sidecar fields plus the published
    preamble for its modulation."""
    proto = meta["protocol"]
    return ProtocolConfig(proto["modulation"],
                          float(proto["symbol_rate_hz"]),
                          float(meta["sample_rate_hz"]),
                          float(meta["nominal_carrier_hz"]),
                          tuple(int(b) for b in preamble_bits),
                          proto["pulse_shape"])
