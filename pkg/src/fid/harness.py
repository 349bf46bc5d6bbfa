"""Identification experiments over simulated device populations.

Generates training and test traffic for every device, trains fingerprints,
runs genuine and impostor trials under a decision policy, and reduces the
outcomes to the four confusion rates and the balanced identification
accuracy. Also hosts the parameter sweeps and the report writer.
"""

from __future__ import annotations

import hashlib
import json
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .devices import ChannelConfig, DeviceProfile, apply_channel, transmit
from .errors import TrainingError
from .fingerprint import (FingerprintConfig, KernelConfig, _fit_models,
                          matching_score, packet_rows, predict,
                          train_fingerprint)
from .preprocess import PacketCapture, analyze_packet
from .protocol import DecisionPolicy, decide_analyses
from .signals import ProtocolConfig, modulate, qpsk_default

PAD_SAMPLES = 64


@dataclass(frozen=True)
class ConfusionCounts:
    genuine_accepts: int = 0
    genuine_rejects: int = 0
    false_accepts: int = 0
    false_rejects: int = 0

    def __post_init__(self):
        for name in ("genuine_accepts", "genuine_rejects",
                     "false_accepts", "false_rejects"):
            if getattr(self, name) < 0:
                raise ValueError("%s must be non-negative" % name)

    @property
    def genuine_trials(self) -> int:
        return self.genuine_accepts + self.genuine_rejects

    @property
    def impostor_trials(self) -> int:
        return self.false_accepts + self.false_rejects

    def merged(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(
            self.genuine_accepts + other.genuine_accepts,
            self.genuine_rejects + other.genuine_rejects,
            self.false_accepts + other.false_accepts,
            self.false_rejects + other.false_rejects)

    def rates(self) -> tuple:
        """(gar, grr, far, frr); the genuine pair and the impostor pair
        each sum to one."""
        if self.genuine_trials == 0 or self.impostor_trials == 0:
            raise ValueError("rates need at least one genuine and one "
                             "impostor trial")
        g = float(self.genuine_trials)
        i = float(self.impostor_trials)
        return (self.genuine_accepts / g, self.genuine_rejects / g,
                self.false_accepts / i, self.false_rejects / i)


def bia(counts: ConfusionCounts) -> float:
    """Balanced identification accuracy.

    Averages the two correct-decision rates: accepting the genuine device
    and rejecting everyone else.
    """
    gar, grr, far, frr = counts.rates()
    return (gar + frr) / (gar + far + grr + frr)


@dataclass(frozen=True)
class ExperimentConfig:
    devices: tuple
    channel: ChannelConfig = field(default_factory=ChannelConfig)
    packets_per_device: int = 10
    payload_bits: int = 768
    policy: DecisionPolicy = field(default_factory=DecisionPolicy)
    k: int = 8
    m: int = 4
    training_samples: int = 20000
    seed: int = 0
    test_channel: ChannelConfig | None = None
    kernel: KernelConfig | None = None
    protocol: ProtocolConfig = field(default_factory=qpsk_default)
    bad_packet_every: int = 0
    held_out_packets: int = 5

    def __post_init__(self):
        devices = tuple(self.devices)
        if len(devices) < 2:
            raise ValueError("an experiment needs at least 2 devices")
        ids = [d.device_id for d in devices]
        if len(set(ids)) != len(ids):
            raise ValueError("device ids must be unique")
        if self.packets_per_device < 10:
            raise ValueError("packets_per_device must be at least 10")
        if self.payload_bits < 2 or self.payload_bits % 2:
            raise ValueError("payload_bits must be even and positive")
        if self.training_samples < 100:
            raise ValueError("training_samples must be at least 100")
        if self.bad_packet_every < 0:
            raise ValueError("bad_packet_every must be non-negative")
        object.__setattr__(self, "devices", devices)

    def effective_test_channel(self) -> ChannelConfig:
        return self.test_channel if self.test_channel is not None \
            else self.channel

    def effective_kernel(self) -> KernelConfig:
        return self.kernel if self.kernel is not None \
            else noisy_default_kernel()

    def as_dict(self) -> dict:
        d = {
            "devices": [dev.as_dict() for dev in self.devices],
            "channel": self.channel.as_dict(),
            "packets_per_device": self.packets_per_device,
            "payload_bits": self.payload_bits,
            "policy": self.policy.as_dict(),
            "k": self.k,
            "m": self.m,
            "training_samples": self.training_samples,
            "seed": self.seed,
            "test_channel": None if self.test_channel is None
                            else self.test_channel.as_dict(),
            "kernel": _kernel_dict(self.effective_kernel()),
            "protocol": {"modulation": self.protocol.modulation,
                         "symbol_rate_hz": self.protocol.symbol_rate_hz,
                         "sample_rate_hz": self.protocol.sample_rate_hz},
            "bad_packet_every": self.bad_packet_every,
            "held_out_packets": self.held_out_packets,
        }
        return d


def noisy_default_kernel() -> KernelConfig:
    """Ridge weight an order heavier than the near-interpolating default;
    measured as the held-out optimum when training data carries channel
    noise."""
    return KernelConfig(ridge_lambda=0.01)


def _kernel_dict(k: KernelConfig) -> dict:
    return {"kind": k.kind, "gamma": k.gamma, "degree": k.degree,
            "ridge_lambda": k.ridge_lambda, "max_rows": k.max_rows,
            "tune": k.tune}


@dataclass(frozen=True)
class EvalReport:
    per_device: dict
    overall_bia: float
    config_snapshot: dict
    seeds: list
    confusion: dict

    def as_dict(self) -> dict:
        return {
            "format_version": 1,
            "per_device": self.per_device,
            "overall_bia": self.overall_bia,
            "config_snapshot": self.config_snapshot,
            "seeds": list(self.seeds),
            "confusion": self.confusion,
        }


def synthesize_packet(device: DeviceProfile, channel: ChannelConfig,
                      payload_bits, protocol: ProtocolConfig,
                      seed: int, tau_s: float | None = None,
                      corrupt: bool = False) -> PacketCapture:
    """One over-the-air packet from a device, ready for analysis.

    payload_bits is either a bit sequence or a count to draw randomly.
    tau_s=None draws a random receive-grid offset inside one sample
    period, which is where a real receiver always lives.
    """
    rng = np.random.default_rng(seed)
    if np.isscalar(payload_bits):
        bits = rng.integers(0, 2, int(payload_bits)).astype(np.uint8)
    else:
        bits = np.asarray(payload_bits, dtype=np.uint8)
    frame = np.concatenate([np.asarray(protocol.preamble_bits, np.uint8),
                            bits])
    ideal = modulate(frame, protocol)
    if tau_s is None:
        tau_s = float(rng.uniform(0.0, protocol.sample_period_s))
    sig = transmit(device, ideal, tau_s=tau_s, seed=seed)
    sig = apply_channel(sig, channel, seed=seed + 1)
    samples = np.concatenate([np.zeros(PAD_SAMPLES, complex), sig.samples,
                              np.zeros(PAD_SAMPLES, complex)])
    if corrupt:
        # A mid-packet noise burst, the classic bad packet.
        n = len(sig.samples)
        lo = PAD_SAMPLES + n // 4
        hi = lo + n // 2
        scale = 4.0 * np.sqrt(np.mean(np.abs(sig.samples) ** 2))
        burst = rng.normal(0, scale, hi - lo) \
            + 1j * rng.normal(0, scale, hi - lo)
        samples[lo:hi] += burst
    snr = channel.snr_db if isinstance(channel.snr_db, (int, float)) \
        else None
    return PacketCapture(samples, PAD_SAMPLES, protocol, snr)


def _unit_seeds(root_seed: int, n: int) -> list:
    seq = np.random.SeedSequence(root_seed)
    return [int(s.generate_state(1)[0]) for s in seq.spawn(n)]


def _training_packet_budget(config: ExperimentConfig) -> int:
    # Masked rows per packet run a bit under half the sample count; the
    # 1.3 headroom keeps one draw sufficient for every device.
    samples_per_packet = (len(config.protocol.preamble_bits)
                          + config.payload_bits) \
        // config.protocol.bits_per_symbol \
        * int(config.protocol.sample_rate_hz
              // config.protocol.symbol_rate_hz)
    rows_per_packet = max(1, int(samples_per_packet * 0.45))
    return int(np.ceil(config.training_samples * 1.3 / rows_per_packet))


def train_population(config: ExperimentConfig) -> dict:
    """Train one fingerprint per device; returns device_id → model.

    Training failures surface with the device id attached.
    """
    seeds = _unit_seeds(config.seed, len(config.devices))
    n_train = _training_packet_budget(config)
    models = {}
    for device, unit_seed in zip(config.devices, seeds):
        rng = np.random.default_rng(unit_seed)
        packet_seeds = rng.integers(0, 2 ** 31, n_train)
        packets = [synthesize_packet(device, config.channel,
                                     config.payload_bits, config.protocol,
                                     int(s))
                   for s in packet_seeds]
        fcfg = FingerprintConfig(
            device_id=device.device_id, k=config.k, m=config.m,
            kernel=config.effective_kernel(),
            n_payload_bits=config.payload_bits,
            min_rows=config.training_samples,
            max_rows=config.training_samples,
            multipath_mode="off", channel_taps=config.policy.channel_taps)
        try:
            models[device.device_id] = train_fingerprint(packets, fcfg)
        except TrainingError as exc:
            raise TrainingError("device %s: %s"
                                % (device.device_id, exc)) from exc
    return models


def _device_test_analyses(config: ExperimentConfig, device: DeviceProfile,
                          n_packets: int, unit_seed: int) -> list:
    channel = config.effective_test_channel()
    mode = "deconvolve" if config.policy.multipath_mode == "deconvolve" \
        else "off"
    rng = np.random.default_rng(unit_seed)
    packet_seeds = rng.integers(0, 2 ** 31, n_packets)
    analyses = []
    for i, s in enumerate(packet_seeds):
        corrupt = config.bad_packet_every > 0 \
            and (i + 1) % config.bad_packet_every == 0
        cap = synthesize_packet(device, channel, config.payload_bits,
                                config.protocol, int(s), corrupt=corrupt)
        analyses.append(analyze_packet(cap, config.payload_bits, mode,
                                       config.policy.channel_taps))
    return analyses


def _test_analyses(config: ExperimentConfig, n_packets: int) -> dict:
    """n_packets analyzed test captures per device, seeded independently
    of the training draw."""
    seeds = _unit_seeds(config.seed + 1, len(config.devices))
    return {device.device_id: _device_test_analyses(config, device,
                                                    n_packets, unit_seed)
            for device, unit_seed in zip(config.devices, seeds)}


def run_experiment(config: ExperimentConfig,
                   models: dict | None = None) -> EvalReport:
    """Train every device, then judge genuine and impostor packet pairs.

    Each trial feeds two adjacent packets from the source device to the
    claimed device's fingerprint under the policy. Passing ready-made
    models skips the training phase (they must cover every device id).
    """
    if models is None:
        models = train_population(config)
    missing = [d.device_id for d in config.devices
               if d.device_id not in models]
    if missing:
        raise TrainingError("no model for device(s): %s"
                            % ", ".join(missing))
    n_test = config.packets_per_device + 1
    analyses = _test_analyses(config, n_test)
    per_device = {}
    confusion = {}
    total = ConfusionCounts()
    for claimed in config.devices:
        model = models[claimed.device_id]
        counts = ConfusionCounts()
        accept_row = {}
        for source in config.devices:
            src = analyses[source.device_id]
            accepts = 0
            for t in range(config.packets_per_device):
                verdict = decide_analyses(src[t:t + 2], model,
                                          config.policy)
                accepts += int(verdict.accepted)
            trials = config.packets_per_device
            accept_row[source.device_id] = accepts
            if source.device_id == claimed.device_id:
                counts = counts.merged(ConfusionCounts(
                    genuine_accepts=accepts,
                    genuine_rejects=trials - accepts))
            else:
                counts = counts.merged(ConfusionCounts(
                    false_accepts=accepts,
                    false_rejects=trials - accepts))
        gar, grr, far, frr = counts.rates()
        per_device[claimed.device_id] = {
            "gar": gar, "grr": grr, "far": far, "frr": frr,
            "bia": bia(counts),
        }
        confusion[claimed.device_id] = accept_row
        total = total.merged(counts)
    return EvalReport(per_device=per_device,
                      overall_bia=bia(total),
                      config_snapshot=config.as_dict(),
                      seeds=_unit_seeds(config.seed, len(config.devices)),
                      confusion=confusion)


def _pooled_training_rows(k: int, m: int, analyses: list) -> tuple:
    feats, pows, thetas = [], [], []
    for analysis in analyses:
        f, p, t = packet_rows(analysis, k, m)
        feats.append(f)
        pows.append(p)
        thetas.append(t)
    return (np.vstack(feats), np.concatenate(pows),
            np.concatenate(thetas))


def _subsample(n_total: int, target: int) -> np.ndarray:
    if n_total <= target:
        return np.arange(n_total)
    return np.unique(np.linspace(0, n_total - 1, target).astype(np.intp))


def _train_analyses(config: ExperimentConfig,
                    device: DeviceProfile) -> list:
    seeds = _unit_seeds(config.seed, len(config.devices))
    unit_seed = seeds[list(config.devices).index(device)]
    rng = np.random.default_rng(unit_seed)
    n_train = _training_packet_budget(config)
    packet_seeds = rng.integers(0, 2 ** 31, n_train)
    out = []
    for s in packet_seeds:
        cap = synthesize_packet(device, config.channel,
                                config.payload_bits, config.protocol,
                                int(s))
        out.append(analyze_packet(cap, config.payload_bits))
    return out


def _heldout_analyses(config: ExperimentConfig,
                      device: DeviceProfile) -> list:
    idx = [d.device_id for d in config.devices].index(device.device_id)
    unit_seed = _unit_seeds(config.seed + 1, len(config.devices))[idx]
    return _device_test_analyses(config, device,
                                 config.held_out_packets, unit_seed)


def _fit_and_score(config: ExperimentConfig, k: int, m: int,
                   train_analyses: list, heldout: list,
                   size: int | None = None) -> tuple:
    """Train on pooled rows at (k, m) and return held-out score medians
    plus the training wall time."""
    feats, pows, thetas = _pooled_training_rows(k, m, train_analyses)
    target = config.training_samples if size is None else size
    idx = _subsample(len(feats), target)
    kcfg = replace(config.effective_kernel(),
                   max_rows=max(len(idx), 100))
    t0 = time.perf_counter()
    pow_model, theta_model = _fit_models(
        feats[idx], [("pow", pows[idx]), ("theta", thetas[idx])], kcfg)
    wall = time.perf_counter() - t0
    ms_pow, ms_theta = [], []
    for analysis in heldout:
        f, p, t = packet_rows(analysis, k, m)
        ms_pow.append(matching_score(predict(pow_model, f), p))
        ms_theta.append(matching_score(predict(theta_model, f), t))
    return float(np.median(ms_pow)), float(np.median(ms_theta)), wall


def sweep_km(config: ExperimentConfig, k_values, m_values) -> list:
    """Median held-out scores for the first device over a (k, m) grid.

    Packets are analyzed once; only the window slicing and the kernel
    solve are repeated per grid point.
    """
    device = config.devices[0]
    train_analyses = _train_analyses(config, device)
    heldout = _heldout_analyses(config, device)
    rows = []
    for k in k_values:
        for m in m_values:
            ms_pow, ms_theta, _ = _fit_and_score(config, int(k), int(m),
                                                 train_analyses, heldout)
            rows.append({"k": int(k), "m": int(m),
                         "ms_pow": ms_pow, "ms_theta": ms_theta})
    return rows


def sweep_training_size(config: ExperimentConfig, sizes) -> list:
    """Held-out scores and training wall time as the row budget grows."""
    sizes = [int(s) for s in sizes]
    if sizes != sorted(sizes):
        raise ValueError("sizes must be ascending")
    device = config.devices[0]
    big = replace(config, training_samples=max(sizes))
    train_analyses = _train_analyses(big, device)
    heldout = _heldout_analyses(config, device)
    rows = []
    for size in sizes:
        ms_pow, ms_theta, wall = _fit_and_score(
            big, config.k, config.m, train_analyses, heldout, size=size)
        rows.append({"size": size, "ms_pow": ms_pow,
                     "ms_theta": ms_theta, "wall_time_s": wall})
    return rows


def config_hash(snapshot: dict) -> str:
    blob = json.dumps(snapshot, sort_keys=True).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()[:12]


def _write_csv(path, header, rows) -> None:
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(_csv_cell(row[h]) for h in header))
    path.write_text("\n".join(lines) + "\n")


def _csv_cell(value) -> str:
    if isinstance(value, float):
        return "%.10g" % value
    return str(value)


def emit_report(report: EvalReport, directory, sweeps: dict | None = None):
    """Write report.json, the per-device and confusion CSVs, and one CSV
    per sweep; returns the sorted list of paths. Re-running on the same
    inputs writes byte-identical files."""
    from pathlib import Path
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    written = []

    report_path = directory / "report.json"
    report_path.write_text(json.dumps(report.as_dict(), sort_keys=True,
                                      indent=2) + "\n")
    written.append(report_path)

    per_device_path = directory / "per_device.csv"
    rows = [{"device_id": dev, **report.per_device[dev]}
            for dev in sorted(report.per_device)]
    _write_csv(per_device_path,
               ["device_id", "gar", "grr", "far", "frr", "bia"], rows)
    written.append(per_device_path)

    confusion_path = directory / "confusion.csv"
    conf_rows = []
    for claimed in sorted(report.confusion):
        for source in sorted(report.confusion[claimed]):
            conf_rows.append({"claimed_id": claimed, "source_id": source,
                              "accepts": report.confusion[claimed][source]})
    _write_csv(confusion_path, ["claimed_id", "source_id", "accepts"],
               conf_rows)
    written.append(confusion_path)

    tag = config_hash(report.config_snapshot)
    for name, rows in (sweeps or {}).items():
        path = directory / ("%s_%s.csv" % (name, tag))
        header = list(rows[0].keys()) if rows else []
        _write_csv(path, header, rows)
        written.append(path)
    return sorted(written)
