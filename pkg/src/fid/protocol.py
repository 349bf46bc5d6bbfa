"""Challenge-response identification flow and the decision policy around it.

The server side holds enrolled fingerprints and a table of outstanding
challenges. A verifier issues a random payload, the claimed device
modulates it back, and the response is judged by a fixed gate sequence:
signal quality, payload freshness, carrier offset, and finally the
nonlinear matching scores.
"""

from __future__ import annotations

import json
import threading
import time
import uuid
from dataclasses import dataclass, field

import numpy as np

from .errors import FidError, ProtocolError, UnenrolledDeviceError
from .fingerprint import FingerprintModel, MatchResult, score_analysis
from .preprocess import PacketAnalysis, analyze_packet
from .signals import as_bits

MULTIPATH_MODES = ("off", "deconvolve", "phase_only")

VERDICT_REASONS = (
    "accepted_first_packet",
    "accepted_second_packet",
    "cfo_mismatch",
    "ms_below_threshold",
    "snr_too_low",
    "stale_or_replayed_challenge",
)

MIN_CHALLENGE_BITS = 256
MAX_FRAME_BYTES = 1 << 20


@dataclass(frozen=True)
class DecisionPolicy:
    """Acceptance rules applied to a response packet pair.

    device_overrides maps a device id to replacement thresholds, e.g.
    {"dev-3": {"ms_theta_threshold": 0.85}}; devices not listed use the
    base values. In phase_only mode the envelope model is never consulted
    and only the carrier gate plus the theta threshold decide.
    """

    ms_pow_threshold: float = 0.94
    ms_theta_threshold: float = 0.90
    two_packet_rule: bool = True
    min_snr_db: float = 10.0
    multipath_mode: str = "off"
    challenge_bits: int = 2048
    challenge_ttl_s: float = 30.0
    channel_taps: int = 3
    device_overrides: dict = field(default_factory=dict)

    def __post_init__(self):
        for name in ("ms_pow_threshold", "ms_theta_threshold"):
            v = getattr(self, name)
            if not 0.0 < v < 1.0:
                raise ValueError("%s must lie in (0, 1)" % name)
        if self.multipath_mode not in MULTIPATH_MODES:
            raise ValueError("multipath_mode must be one of %s"
                             % (MULTIPATH_MODES,))
        bits = int(self.challenge_bits)
        if bits < MIN_CHALLENGE_BITS or bits % 2:
            raise ValueError("challenge_bits must be even and at least %d"
                             % MIN_CHALLENGE_BITS)
        if self.challenge_ttl_s <= 0:
            raise ValueError("challenge_ttl_s must be positive")
        if int(self.channel_taps) < 1:
            raise ValueError("channel_taps must be at least 1")
        for dev, over in self.device_overrides.items():
            for key, v in over.items():
                if key not in ("ms_pow_threshold", "ms_theta_threshold"):
                    raise ValueError("unknown override %r for device %r"
                                     % (key, dev))
                if not 0.0 < v < 1.0:
                    raise ValueError("override %s for device %r must lie "
                                     "in (0, 1)" % (key, dev))

    def thresholds_for(self, device_id: str) -> tuple:
        over = self.device_overrides.get(device_id, {})
        return (over.get("ms_pow_threshold", self.ms_pow_threshold),
                over.get("ms_theta_threshold", self.ms_theta_threshold))

    def as_dict(self) -> dict:
        return {
            "ms_pow_threshold": self.ms_pow_threshold,
            "ms_theta_threshold": self.ms_theta_threshold,
            "two_packet_rule": self.two_packet_rule,
            "min_snr_db": self.min_snr_db,
            "multipath_mode": self.multipath_mode,
            "challenge_bits": self.challenge_bits,
            "challenge_ttl_s": self.challenge_ttl_s,
            "channel_taps": self.channel_taps,
            "device_overrides": {k: dict(v)
                                 for k, v in self.device_overrides.items()},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DecisionPolicy":
        allowed = set(cls.__dataclass_fields__)
        unknown = set(d) - allowed
        if unknown:
            raise ValueError("unknown policy fields: %s"
                             % ", ".join(sorted(unknown)))
        return cls(**d)


@dataclass(frozen=True)
class Challenge:
    session_id: str
    claimed_device_id: str
    payload: tuple
    issued_at: float

    def __post_init__(self):
        if not self.session_id:
            raise ValueError("session_id must be non-empty")
        bits = tuple(int(b) for b in self.payload)
        if any(b not in (0, 1) for b in bits):
            raise ValueError("payload must contain only bits")
        object.__setattr__(self, "payload", bits)


@dataclass(frozen=True)
class Verdict:
    accepted: bool
    reason: str
    match_results: tuple = ()

    def __post_init__(self):
        if self.reason not in VERDICT_REASONS:
            raise ValueError("unknown verdict reason %r" % (self.reason,))
        if self.accepted != self.reason.startswith("accepted"):
            raise ValueError("verdict reason %r contradicts accepted=%s"
                             % (self.reason, self.accepted))
        object.__setattr__(self, "match_results",
                           tuple(self.match_results))


def _judge(analysis: PacketAnalysis, model: FingerprintModel,
           policy: DecisionPolicy, expected_bits) -> tuple:
    """Run the gate sequence on one analyzed packet.

    Returns (passed, reason_when_failed, MatchResult or None). Gates run
    in the protocol order; scoring only happens once the carrier gate has
    passed, so an impostor with the wrong oscillator never exercises the
    regression models.
    """
    snr = analysis.snr_db
    if snr is not None and snr < policy.min_snr_db:
        return False, "snr_too_low", None
    if expected_bits is not None:
        got = np.asarray(analysis.recovered.payload_bits, dtype=np.uint8)
        if len(got) != len(expected_bits) \
                or not np.array_equal(got, expected_bits):
            return False, "stale_or_replayed_challenge", None
    cfo = analysis.linear.cfo_rad_per_s
    if abs(cfo - model.cfo_reference_rad_per_s) \
            > model.cfo_tolerance_rad_per_s:
        return False, "cfo_mismatch", None
    phase_only = policy.multipath_mode == "phase_only"
    targets = ("theta",) if phase_only else ("pow", "theta")
    result = score_analysis(model, analysis, targets)
    pow_thr, theta_thr = policy.thresholds_for(model.device_id)
    ok = result.ms_theta >= theta_thr \
        and (phase_only or result.ms_pow >= pow_thr)
    return ok, None if ok else "ms_below_threshold", result


def decide_analyses(analyses, model: FingerprintModel,
                    policy: DecisionPolicy,
                    expected_bits=None) -> Verdict:
    """Decide from already-analyzed packets.

    Accepts when any considered packet passes every gate; with the
    two-packet rule off only the first packet counts. The failure reason
    reported is the last packet's.
    """
    analyses = list(analyses)
    if not 1 <= len(analyses) <= 2:
        raise ValueError("decision takes one or two packets, got %d"
                         % len(analyses))
    if expected_bits is not None:
        expected_bits = as_bits(expected_bits)
    considered = analyses if policy.two_packet_rule else analyses[:1]
    results = []
    reason = "ms_below_threshold"
    for i, analysis in enumerate(considered):
        passed, why, result = _judge(analysis, model, policy, expected_bits)
        if result is not None:
            results.append(result)
        if passed:
            accept_reason = "accepted_first_packet" if i == 0 \
                else "accepted_second_packet"
            return Verdict(True, accept_reason, tuple(results))
        reason = why
    return Verdict(False, reason, tuple(results))


def decide_packets(packets, model: FingerprintModel, policy: DecisionPolicy,
                   expected_bits=None) -> Verdict:
    """Analyze raw captures and decide.

    A capture the analyzer cannot make sense of fails the quality gate
    rather than raising, so a noise-burst packet in slot one still lets
    the second packet rescue the trial.
    """
    packets = list(packets)
    if not 1 <= len(packets) <= 2:
        raise ValueError("decision takes one or two packets, got %d"
                         % len(packets))
    n_bits = len(expected_bits) if expected_bits is not None else None
    mode = "deconvolve" if policy.multipath_mode == "deconvolve" else "off"
    analyses = []
    failures = 0
    for pkt in packets:
        try:
            analyses.append(analyze_packet(pkt, n_bits, mode,
                                           policy.channel_taps))
        except FidError:
            failures += 1
    if not analyses:
        return Verdict(False, "snr_too_low", ())
    verdict = decide_analyses(analyses, model, policy, expected_bits)
    if verdict.accepted and failures and verdict.reason \
            == "accepted_first_packet" and len(packets) == 2 \
            and len(analyses) == 1:
        # The surviving analysis was really the second capture.
        verdict = Verdict(True, "accepted_second_packet",
                          verdict.match_results)
    return verdict


class ChallengeBroker:
    """Enrolled fingerprints plus the outstanding-challenge table.

    The table is the only mutable state; a lock makes issue and consume
    atomic, so two concurrent verifications of one session produce exactly
    one non-stale verdict.
    """

    def __init__(self, models=(), policy: DecisionPolicy | None = None,
                 clock=time.monotonic):
        self._policy = policy if policy is not None else DecisionPolicy()
        self._clock = clock
        self._lock = threading.Lock()
        self._pending = {}
        self._models = {}
        for model in (models.values() if isinstance(models, dict)
                      else models):
            self.enroll(model)

    @property
    def policy(self) -> DecisionPolicy:
        return self._policy

    def enroll(self, model: FingerprintModel) -> None:
        with self._lock:
            self._models[model.device_id] = model

    def enrolled_ids(self) -> list:
        with self._lock:
            return sorted(self._models)

    def model_for(self, device_id: str) -> FingerprintModel:
        with self._lock:
            try:
                return self._models[device_id]
            except KeyError:
                raise UnenrolledDeviceError(
                    "unenrolled device: %r" % device_id) from None

    def issue_challenge(self, claimed_device_id: str,
                        seed: int | None = None) -> Challenge:
        """Mint a fresh challenge for a claimed identity.

        A seed pins both payload and session id for reproducible tests;
        without one the payload comes from OS entropy.
        """
        self.model_for(claimed_device_id)
        if seed is None:
            rng = np.random.default_rng()
            session_id = uuid.uuid4().hex
        else:
            rng = np.random.default_rng(seed)
            session_id = "%032x" % rng.integers(0, 1 << 63)
        payload = tuple(int(b) for b in
                        rng.integers(0, 2, self._policy.challenge_bits))
        challenge = Challenge(session_id, claimed_device_id, payload,
                              float(self._clock()))
        with self._lock:
            self._pending[session_id] = challenge
        return challenge

    def pending_count(self) -> int:
        with self._lock:
            return len(self._pending)

    def verify_response(self, challenge, packets) -> Verdict:
        """Judge a response against a pending challenge.

        The challenge is consumed no matter the outcome; an unknown,
        already-used, or expired session yields a stale verdict instead
        of an exception. Accepts the Challenge itself or its session id.
        """
        session_id = challenge.session_id \
            if isinstance(challenge, Challenge) else str(challenge)
        with self._lock:
            pending = self._pending.pop(session_id, None)
        if pending is None:
            return Verdict(False, "stale_or_replayed_challenge", ())
        if self._clock() - pending.issued_at > self._policy.challenge_ttl_s:
            return Verdict(False, "stale_or_replayed_challenge", ())
        model = self.model_for(pending.claimed_device_id)
        return decide_packets(packets, model, self._policy,
                              expected_bits=pending.payload)


# Wire frames: newline-delimited JSON, one message per line.

_REQUIRED_FIELDS = {
    "identify_request": ("device_id",),
    "challenge": ("session_id", "payload_hex", "expires_in_ms"),
    "response_meta": ("session_id",),
    "verdict": ("session_id", "accepted", "reason",
                "ms_pow", "ms_theta", "cfo_hz"),
}


def _validate_message(msg: dict) -> None:
    if not isinstance(msg, dict):
        raise ProtocolError("message must be a JSON object")
    kind = msg.get("type")
    if kind not in _REQUIRED_FIELDS:
        raise ProtocolError("unknown message type %r" % (kind,))
    missing = [f for f in _REQUIRED_FIELDS[kind] if f not in msg]
    if missing:
        raise ProtocolError("%s message missing fields: %s"
                            % (kind, ", ".join(missing)))
    if kind == "response_meta":
        sources = [f for f in ("capture_file", "iq_base64") if f in msg]
        if len(sources) != 1:
            raise ProtocolError("response_meta needs exactly one of "
                                "capture_file or iq_base64")
    if kind == "verdict" and msg["reason"] not in VERDICT_REASONS:
        raise ProtocolError("unknown verdict reason %r" % (msg["reason"],))


def encode_message(msg: dict) -> bytes:
    _validate_message(msg)
    frame = json.dumps(msg, sort_keys=True).encode("utf-8") + b"\n"
    if len(frame) > MAX_FRAME_BYTES:
        raise ProtocolError("frame exceeds %d bytes" % MAX_FRAME_BYTES)
    return frame


def decode_message(frame) -> dict:
    if isinstance(frame, str):
        frame = frame.encode("utf-8")
    if len(frame) > MAX_FRAME_BYTES:
        raise ProtocolError("frame exceeds %d bytes" % MAX_FRAME_BYTES)
    try:
        text = bytes(frame).decode("utf-8")
    except UnicodeDecodeError as exc:
        raise ProtocolError("malformed frame: %s" % exc) from None
    stripped = text.strip()
    if not stripped or "\n" in stripped:
        raise ProtocolError("frame must hold exactly one message line")
    try:
        msg = json.loads(stripped)
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ProtocolError("malformed frame: %s" % exc) from None
    _validate_message(msg)
    return msg


def challenge_message(challenge: Challenge,
                      policy: DecisionPolicy) -> dict:
    from .signals import hex_from_bits
    return {
        "type": "challenge",
        "session_id": challenge.session_id,
        "payload_hex": hex_from_bits(np.asarray(challenge.payload,
                                                dtype=np.uint8)),
        "expires_in_ms": int(policy.challenge_ttl_s * 1000),
    }


def verdict_message(session_id: str, verdict: Verdict) -> dict:
    last: MatchResult | None = \
        verdict.match_results[-1] if verdict.match_results else None
    cfo_hz = None
    if last is not None:
        cfo_hz = last.cfo_measured_rad_per_s / (2.0 * np.pi)
    return {
        "type": "verdict",
        "session_id": session_id,
        "accepted": verdict.accepted,
        "reason": verdict.reason,
        "ms_pow": None if last is None else last.ms_pow,
        "ms_theta": None if last is None else last.ms_theta,
        "cfo_hz": cfo_hz,
    }
