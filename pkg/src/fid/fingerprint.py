"""Kernel-regression device fingerprints.

A fingerprint is a pair of kernel ridge regressions mapping short windows of
the ideal signal (plus the sampling phase) to the device's nonlinear residual
series, together with the carrier-offset gate learned from the training
packets. Training is a dense Cholesky solve, so memory for the kernel matrix
is the binding constraint; the fill and factorization below are arranged to
stay within one n-by-n float64 allocation.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .errors import (
    ModelChecksumError, ModelFormatError, ModelTruncatedError,
    ModelVersionError, ScoreError, TrainingError,
)
from .preprocess import PacketAnalysis, analyze_packet
from .signals import ideal_samples

FORMAT_VERSION = 1
_MAGIC = b"FIDM"

MIN_TRAIN_ROWS = 100
# Hard cap on the dense kernel solve. 40000 rows is the reference operating
# point; the matrix alone is then 12.8 GB, so callers on small machines
# should configure less and subsample.
MAX_KERNEL_ROWS = 40000

KERNEL_KINDS = ("linear", "polynomial", "rbf")

# The carrier gate can never be narrower than this: a noiseless training run
# measures a near-zero CFO spread, and a zero-width gate would reject the
# device's own packets on the first breath of noise.
MIN_CFO_TOLERANCE = 2.0 * np.pi * 40.0


@dataclass(frozen=True)
class KernelConfig:
    """Kernel family and ridge settings for one regression.

    gamma None resolves to 1/feature_dimension at training time. tune runs a
    3-fold cross-validated grid around the defaults before the final fit.
    """

    kind: str = "rbf"
    gamma: float | None = None
    degree: int = 3
    ridge_lambda: float = 1e-4
    max_rows: int = MAX_KERNEL_ROWS
    tune: bool = False

    def __post_init__(self):
        if self.kind not in KERNEL_KINDS:
            raise ValueError("unknown kernel kind %r" % (self.kind,))
        if self.gamma is not None and self.gamma <= 0:
            raise ValueError("gamma must be positive")
        if self.degree < 1:
            raise ValueError("degree must be at least 1")


@dataclass(frozen=True)
class RegressionModel:
    """One trained kernel ridge regression in dual form."""

    kind: str
    gamma: float
    degree: int
    ridge_lambda: float
    support_inputs: np.ndarray
    dual_coefficients: np.ndarray
    target_name: str
    feature_mean: np.ndarray
    feature_scale: np.ndarray

    def __post_init__(self):
        if len(self.dual_coefficients) != len(self.support_inputs):
            raise ValueError("dual coefficient count must match support rows")
        if self.kind == "rbf" and self.gamma <= 0:
            raise ValueError("rbf needs a positive gamma")


@dataclass(frozen=True)
class Thresholds:
    ms_pow: float = 0.94
    ms_theta: float = 0.90


@dataclass(frozen=True)
class MatchResult:
    ms_pow: float | None
    ms_theta: float | None
    cfo_measured_rad_per_s: float
    cfo_matched: bool


@dataclass(frozen=True)
class FingerprintModel:
    """Everything needed to identify one device from a packet."""

    device_id: str
    pow_model: RegressionModel
    theta_model: RegressionModel
    cfo_reference_rad_per_s: float
    cfo_tolerance_rad_per_s: float
    thresholds: Thresholds
    k: int
    m: int
    format_version: int = FORMAT_VERSION

    def __post_init__(self):
        if not (0.0 < self.thresholds.ms_pow < 1.0
                and 0.0 < self.thresholds.ms_theta < 1.0):
            raise ValueError("thresholds must lie in (0, 1)")
        if self.k < 0 or self.m < 0:
            raise ValueError("window sizes must be non-negative")
        if self.cfo_tolerance_rad_per_s <= 0.0:
            raise ValueError("cfo tolerance must be positive")


@dataclass(frozen=True)
class FingerprintConfig:
    """Settings for train_fingerprint."""

    device_id: str = ""
    k: int = 8
    m: int = 4
    kernel: KernelConfig = field(default_factory=KernelConfig)
    thresholds: Thresholds = field(default_factory=Thresholds)
    n_payload_bits: int | None = None
    min_rows: int = 20000
    max_rows: int = MAX_KERNEL_ROWS
    multipath_mode: str = "off"
    channel_taps: int = 3


def build_features(ideal, tau: float, k: int, m: int) -> np.ndarray:
    """Window the ideal samples into regression inputs.

    Row r describes series index n = r + k through the window
    x'[n-k..n+m] split into real/imaginary coordinates, with the sampling
    phase appended, so rows align one-to-one with the nonlinear series over
    [k, len-m-1].
    """
    x = np.asarray(ideal, dtype=np.complex128)
    w = k + m + 1
    if x.ndim != 1 or len(x) < w:
        raise ValueError("ideal sample sequence too short for the window")
    win = np.lib.stride_tricks.sliding_window_view(x, w)
    out = np.empty((len(win), 2 * w + 1), dtype=np.float64)
    out[:, 0:2 * w:2] = win.real
    out[:, 1:2 * w:2] = win.imag
    out[:, -1] = tau
    return out


def _resolved_gamma(cfg: KernelConfig, n_features: int) -> float:
    return cfg.gamma if cfg.gamma is not None else 1.0 / n_features


def _kernel_block(kind: str, gamma: float, degree: int, a: np.ndarray,
                  b: np.ndarray, a_sq=None, b_sq=None) -> np.ndarray:
    # The affine +1 in the linear and polynomial kernels lets the dual
    # expansion carry an intercept; targets here are not mean-free.
    g = a @ b.T
    if kind == "linear":
        g += 1.0
        return g
    if kind == "polynomial":
        g *= gamma
        g += 1.0
        return g ** degree
    if a_sq is None:
        a_sq = np.einsum("ij,ij->i", a, a)
    if b_sq is None:
        b_sq = np.einsum("ij,ij->i", b, b)
    g *= -2.0
    g += a_sq[:, None]
    g += b_sq[None, :]
    np.maximum(g, 0.0, out=g)
    g *= -gamma
    return np.exp(g, out=g)


def _standardize(x: np.ndarray):
    mean = x.mean(axis=0)
    scale = x.std(axis=0)
    scale = np.where(scale > 0.0, scale, 1.0)
    return (x - mean) / scale, mean, scale


def _solve_dual(xs: np.ndarray, y: np.ndarray, kind: str, gamma: float,
                degree: int, lam: float) -> np.ndarray:
    n = len(xs)
    # One F-order allocation filled in column blocks, factorized in place:
    # at 20000 rows the matrix is 3.2 GB and a single stray copy would not
    # fit next to it.
    kmat = np.zeros((n, n), dtype=np.float64, order="F")
    sq = np.einsum("ij,ij->i", xs, xs) if kind == "rbf" else None
    block = 2500
    for j0 in range(0, n, block):
        j1 = min(j0 + block, n)
        kmat[:, j0:j1] = _kernel_block(
            kind, gamma, degree, xs, xs[j0:j1], sq,
            sq[j0:j1] if sq is not None else None)
    kmat[np.diag_indices_from(kmat)] += lam
    try:
        factor = cho_factor(kmat, lower=True, overwrite_a=True,
                            check_finite=False)
    except np.linalg.LinAlgError as exc:
        raise TrainingError("kernel system is not positive definite") from exc
    return cho_solve(factor, y, check_finite=False)


def _cv_tune(xs: np.ndarray, y: np.ndarray, cfg: KernelConfig,
             base_gamma: float):
    """3-fold cross-validated pick of (gamma, lambda) around the defaults."""
    n = len(xs)
    if n > 3000:
        idx = np.unique(np.round(np.linspace(0, n - 1, 3000)).astype(int))
        xs, y = xs[idx], y[idx]
        n = len(xs)
    folds = np.arange(n) % 3
    gammas = ([base_gamma] if cfg.kind == "linear"
              else [base_gamma * 0.25, base_gamma, base_gamma * 4.0])
    # Decades upward only: noisy targets call for much heavier smoothing
    # than the near-interpolating default, never lighter.
    lambdas = [cfg.ridge_lambda * f for f in (1.0, 10.0, 100.0, 1000.0)]
    best = (base_gamma, cfg.ridge_lambda, -np.inf)
    for g in gammas:
        for lam in lambdas:
            scores = []
            for f in range(3):
                tr = folds != f
                alpha = _solve_dual(xs[tr], y[tr], cfg.kind, g, cfg.degree,
                                    lam)
                kq = _kernel_block(cfg.kind, g, cfg.degree, xs[~tr], xs[tr])
                pred = kq @ alpha
                actual = y[~tr]
                denom = np.sum((actual - actual.mean()) ** 2)
                if denom <= 0.0:
                    continue
                scores.append(1.0 - np.sum((pred - actual) ** 2) / denom)
            if scores and np.mean(scores) > best[2]:
                best = (g, lam, float(np.mean(scores)))
    return best[0], best[1]


def _fit_models(features, named_targets, kernel_cfg: KernelConfig) -> list:
    """Fit one regression per (name, targets) pair on shared features.

    Untuned targets share a single kernel factorization (the expensive
    part), which is why training both fingerprint models costs barely more
    than one.
    """
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2:
        raise TrainingError("features must be a 2-D row matrix")
    ys = [np.asarray(t, dtype=np.float64) for _, t in named_targets]
    for y in ys:
        if y.ndim != 1 or len(y) != len(x):
            raise TrainingError(
                "features and targets must be equal-count rows")
        if not np.all(np.isfinite(y)):
            raise TrainingError("training data must be finite")
    if len(x) < MIN_TRAIN_ROWS:
        raise TrainingError("too few training rows (%d, need %d)"
                            % (len(x), MIN_TRAIN_ROWS))
    if len(x) > kernel_cfg.max_rows:
        raise TrainingError("training set too large (%d rows, cap %d)"
                            % (len(x), kernel_cfg.max_rows))
    if not np.all(np.isfinite(x)):
        raise TrainingError("training data must be finite")
    if kernel_cfg.ridge_lambda <= 0.0:
        raise TrainingError("ridge lambda must be positive")
    xs, mean, scale = _standardize(x)
    base_gamma = _resolved_gamma(kernel_cfg, x.shape[1])
    if kernel_cfg.tune:
        settings = [_cv_tune(xs, y, kernel_cfg, base_gamma) for y in ys]
    else:
        settings = [(base_gamma, kernel_cfg.ridge_lambda)] * len(ys)
    models = []
    if len(set(settings)) == 1:
        gamma, lam = settings[0]
        alphas = _solve_dual(xs, np.stack(ys, axis=1), kernel_cfg.kind,
                             gamma, kernel_cfg.degree, lam)
        for i, (name, _) in enumerate(named_targets):
            models.append(RegressionModel(
                kernel_cfg.kind, gamma, kernel_cfg.degree, lam, xs,
                np.ascontiguousarray(alphas[:, i]), name, mean, scale))
    else:
        for (name, _), y, (gamma, lam) in zip(named_targets, ys, settings):
            alpha = _solve_dual(xs, y, kernel_cfg.kind, gamma,
                                kernel_cfg.degree, lam)
            models.append(RegressionModel(
                kernel_cfg.kind, gamma, kernel_cfg.degree, lam, xs, alpha,
                name, mean, scale))
    return models


def train_kr(features, targets, kernel_cfg: KernelConfig,
             target_name: str = "pow") -> RegressionModel:
    """Fit one kernel ridge regression in its dual form."""
    return _fit_models(features, [(target_name, targets)], kernel_cfg)[0]


def predict(model: RegressionModel, features) -> np.ndarray:
    """Evaluate the kernel expansion on new feature rows."""
    q = np.asarray(features, dtype=np.float64)
    if q.ndim != 2 or q.shape[1] != model.support_inputs.shape[1]:
        raise ValueError("feature dimension does not match the model")
    qs = (q - model.feature_mean) / model.feature_scale
    sup = model.support_inputs
    sup_sq = (np.einsum("ij,ij->i", sup, sup)
              if model.kind == "rbf" else None)
    # Bound the query-times-support block to ~32 MB.
    block = max(1, int(4e6 / max(len(sup), 1)))
    out = np.empty(len(qs), dtype=np.float64)
    for i0 in range(0, len(qs), block):
        i1 = min(i0 + block, len(qs))
        kq = _kernel_block(model.kind, model.gamma, model.degree,
                           qs[i0:i1], sup, None, sup_sq)
        out[i0:i1] = kq @ model.dual_coefficients
    return out


def matching_score(predicted, actual) -> float:
    """1 minus the squared-error-to-variance ratio of the two series."""
    p = np.asarray(predicted, dtype=np.float64)
    a = np.asarray(actual, dtype=np.float64)
    if p.shape != a.shape or p.ndim != 1 or len(p) == 0:
        raise ValueError("series must have equal nonzero lengths")
    denom = float(np.sum((a - a.mean()) ** 2))
    if denom == 0.0:
        raise ScoreError("degenerate variance: actual series is constant")
    return float(1.0 - np.sum((p - a) ** 2) / denom)


def packet_rows(analysis: PacketAnalysis, k: int, m: int):
    """Aligned (features, pow targets, theta targets) for one packet.

    Rows cover the series indices inside both the valid range and the
    envelope mask that also have a full feature window.
    """
    rec = analysis.recovered
    xprime = ideal_samples(rec.ideal, analysis.linear.tau_s,
                           rec.n_samples).samples
    feats = build_features(xprime, analysis.linear.tau_s, k, m)
    lo, hi = analysis.series.valid_range
    n = len(xprime)
    keep = analysis.series.mask.copy()
    keep[:max(lo, k)] = False
    keep[min(hi, n - 1 - m) + 1:] = False
    idx = np.flatnonzero(keep)
    return (feats[idx - k], analysis.series.pow[idx],
            analysis.series.theta[idx])


def _predicted_cfo_std(analysis: PacketAnalysis) -> float:
    """Noise-floor prediction for the carrier estimator's deviation.

    Weighted-phase-slope variance over an N-sample window: the per-sample
    phase noise is 1/sqrt(2 SNR), and a uniform slope fit divides it by
    sqrt(N(N^2-1)/12) sample periods.
    """
    proto = analysis.recovered.ideal.protocol
    ts = proto.sample_period_s
    snr_db = 30.0 if analysis.snr_db is None else analysis.snr_db
    snr = 10.0 ** (snr_db / 10.0)
    n = max(analysis.recovered.n_samples, 8)
    phase_sigma = 1.0 / np.sqrt(2.0 * snr)
    slope_sigma = phase_sigma * np.sqrt(12.0 / (n * (n * n - 1.0))) / ts
    # Payload-dependent pulse-tail leakage keeps a few Hz of spread even
    # with no noise at all.
    return max(float(slope_sigma), 2.0 * np.pi * 2.0)


def train_fingerprint(training_packets,
                      config: FingerprintConfig | None = None
                      ) -> FingerprintModel:
    """Learn one device's fingerprint from its training packets."""
    cfg = config if config is not None else FingerprintConfig()
    if not training_packets:
        raise TrainingError("no training packets")
    analyses = [analyze_packet(p, cfg.n_payload_bits, cfg.multipath_mode,
                               cfg.channel_taps)
                for p in training_packets]
    cfos = np.array([a.linear.cfo_rad_per_s for a in analyses])
    spread = float(np.std(cfos))
    allowed = 10.0 * max(_predicted_cfo_std(a) for a in analyses)
    if spread > allowed:
        raise TrainingError(
            "inconsistent source: CFO spread %.1f rad/s across packets "
            "exceeds %.1f" % (spread, allowed))

    parts = [packet_rows(a, cfg.k, cfg.m) for a in analyses]
    feats = np.concatenate([p[0] for p in parts], axis=0)
    pow_t = np.concatenate([p[1] for p in parts])
    theta_t = np.concatenate([p[2] for p in parts])
    if len(feats) < cfg.min_rows:
        raise TrainingError("insufficient training data (%d rows, need %d)"
                            % (len(feats), cfg.min_rows))
    if len(feats) > cfg.max_rows:
        idx = np.unique(np.round(np.linspace(0, len(feats) - 1,
                                             cfg.max_rows)).astype(int))
        feats, pow_t, theta_t = feats[idx], pow_t[idx], theta_t[idx]

    kcfg = replace(cfg.kernel, max_rows=min(cfg.kernel.max_rows,
                                            cfg.max_rows))
    pow_model, theta_model = _fit_models(
        feats, [("pow", pow_t), ("theta", theta_t)], kcfg)
    return FingerprintModel(
        device_id=cfg.device_id,
        pow_model=pow_model,
        theta_model=theta_model,
        cfo_reference_rad_per_s=float(np.mean(cfos)),
        cfo_tolerance_rad_per_s=max(6.0 * spread, MIN_CFO_TOLERANCE),
        thresholds=cfg.thresholds,
        k=cfg.k,
        m=cfg.m,
    )


def _predict_pair(pow_model: RegressionModel, theta_model: RegressionModel,
                  feats: np.ndarray):
    """Predict both targets, sharing kernel blocks when the models allow.

    Fingerprint models train on one pooled feature set, so their supports
    and kernel settings normally coincide and the quadratic-cost kernel
    evaluation only has to happen once.
    """
    a, b = pow_model, theta_model
    shared = (a.kind == b.kind and a.gamma == b.gamma
              and a.degree == b.degree
              and (a.support_inputs is b.support_inputs
                   or np.array_equal(a.support_inputs, b.support_inputs))
              and np.array_equal(a.feature_mean, b.feature_mean)
              and np.array_equal(a.feature_scale, b.feature_scale))
    if not shared:
        return predict(a, feats), predict(b, feats)
    q = np.asarray(feats, dtype=np.float64)
    if q.ndim != 2 or q.shape[1] != a.support_inputs.shape[1]:
        raise ValueError("feature dimension does not match the model")
    qs = (q - a.feature_mean) / a.feature_scale
    sup = a.support_inputs
    sup_sq = np.einsum("ij,ij->i", sup, sup) if a.kind == "rbf" else None
    block = max(1, int(4e6 / max(len(sup), 1)))
    out_p = np.empty(len(qs), dtype=np.float64)
    out_t = np.empty(len(qs), dtype=np.float64)
    for i0 in range(0, len(qs), block):
        i1 = min(i0 + block, len(qs))
        kq = _kernel_block(a.kind, a.gamma, a.degree, qs[i0:i1], sup,
                           None, sup_sq)
        out_p[i0:i1] = kq @ a.dual_coefficients
        out_t[i0:i1] = kq @ b.dual_coefficients
    return out_p, out_t


# Counts of per-packet predictions served by each model family since import.
# Lets callers prove a decision mode never touched a given model.
_EVAL_COUNTS = {"pow": 0, "theta": 0}


def evaluation_counts() -> dict:
    return dict(_EVAL_COUNTS)


def score_analysis(model: FingerprintModel, analysis: PacketAnalysis,
                   targets=("pow", "theta")) -> MatchResult:
    """Score an already-analyzed packet against a stored fingerprint.

    targets picks which residual models run; a name left out stays
    untouched and its score comes back as None.
    """
    wanted = tuple(targets)
    if not wanted or any(t not in ("pow", "theta") for t in wanted):
        raise ValueError("targets must be a non-empty subset of pow/theta")
    feats, pow_t, theta_t = packet_rows(analysis, model.k, model.m)
    ms_pow = ms_theta = None
    if "pow" in wanted and "theta" in wanted:
        pred_pow, pred_theta = _predict_pair(model.pow_model,
                                             model.theta_model, feats)
        ms_pow = float(matching_score(pred_pow, pow_t))
        ms_theta = float(matching_score(pred_theta, theta_t))
    elif "theta" in wanted:
        ms_theta = float(matching_score(predict(model.theta_model, feats),
                                        theta_t))
    else:
        ms_pow = float(matching_score(predict(model.pow_model, feats), pow_t))
    for t in set(wanted):
        _EVAL_COUNTS[t] += 1
    cfo = analysis.linear.cfo_rad_per_s
    matched = abs(cfo - model.cfo_reference_rad_per_s) \
        <= model.cfo_tolerance_rad_per_s
    return MatchResult(ms_pow, ms_theta, float(cfo), bool(matched))


def evaluate_packet(model: FingerprintModel, packet,
                    n_payload_bits: int | None = None,
                    multipath_mode: str = "off",
                    channel_taps: int = 3) -> MatchResult:
    """Score one packet against a stored fingerprint."""
    analysis = analyze_packet(packet, n_payload_bits, multipath_mode,
                              channel_taps)
    return score_analysis(model, analysis)


def save_model(model: FingerprintModel, path) -> None:
    """Write a fingerprint to disk.

    Layout: magic, little-endian header length, JSON header (kernel settings,
    carrier gate, standardization), then each model's support inputs
    row-major and dual coefficients as little-endian float64, and a trailing
    CRC32 of everything before it. Every float round-trips exactly, so a
    loaded model predicts bit-identically.
    """
    pm, tm = model.pow_model, model.theta_model
    if (pm.kind, pm.degree) != (tm.kind, tm.degree):
        raise ValueError("pow and theta models must share a kernel family")
    header = {
        "format_version": model.format_version,
        "device_id": model.device_id,
        "k": model.k,
        "m": model.m,
        "kernel": {"kind": pm.kind, "degree": pm.degree},
        "gamma": {"pow": pm.gamma, "theta": tm.gamma},
        "lambda": {"pow": pm.ridge_lambda, "theta": tm.ridge_lambda},
        "cfo_reference": model.cfo_reference_rad_per_s,
        "cfo_tolerance": model.cfo_tolerance_rad_per_s,
        "thresholds": {"ms_pow": model.thresholds.ms_pow,
                       "ms_theta": model.thresholds.ms_theta},
        "standardization": {
            rm.target_name: {"mean": rm.feature_mean.tolist(),
                             "scale": rm.feature_scale.tolist()}
            for rm in (pm, tm)},
        "shapes": {rm.target_name: [int(len(rm.support_inputs)),
                                    int(rm.support_inputs.shape[1])]
                   for rm in (pm, tm)},
    }
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    chunks = [_MAGIC, struct.pack("<I", len(head)), head]
    for rm in (pm, tm):
        chunks.append(np.ascontiguousarray(rm.support_inputs,
                                           dtype="<f8").tobytes())
        chunks.append(np.ascontiguousarray(rm.dual_coefficients,
                                           dtype="<f8").tobytes())
    body = b"".join(chunks)
    crc = zlib.crc32(body) & 0xFFFFFFFF
    Path(path).write_bytes(body + struct.pack("<I", crc))


def _read_model(header: dict, name: str, buf, offset: int):
    n, d = header["shapes"][name]
    support = np.frombuffer(buf, dtype="<f8", count=n * d,
                            offset=offset).copy().reshape(n, d)
    offset += n * d * 8
    alpha = np.frombuffer(buf, dtype="<f8", count=n, offset=offset).copy()
    offset += n * 8
    std = header["standardization"][name]
    return RegressionModel(
        header["kernel"]["kind"], header["gamma"][name],
        header["kernel"]["degree"], header["lambda"][name],
        support, alpha, name,
        np.asarray(std["mean"], dtype=np.float64),
        np.asarray(std["scale"], dtype=np.float64)), offset


def load_model(path) -> FingerprintModel:
    """Read a fingerprint written by save_model, verifying its integrity."""
    data = Path(path).read_bytes()
    if len(data) < 12:
        raise ModelTruncatedError("file too short for a fingerprint header")
    if data[:4] != _MAGIC:
        raise ModelFormatError("not a fingerprint model file")
    head_len = struct.unpack_from("<I", data, 4)[0]
    if len(data) < 8 + head_len + 4:
        raise ModelTruncatedError("file ends inside the header")
    try:
        header = json.loads(data[8:8 + head_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ModelFormatError("unreadable fingerprint header") from exc
    if header.get("format_version") != FORMAT_VERSION:
        raise ModelVersionError("unsupported format version %r"
                                % (header.get("format_version"),))
    arrays_bytes = sum((n * d + n) * 8
                       for n, d in header["shapes"].values())
    expected = 8 + head_len + arrays_bytes + 4
    if len(data) < expected:
        raise ModelTruncatedError("file ends before the declared arrays")
    if len(data) != expected:
        raise ModelFormatError("file has trailing bytes beyond the model")
    stored_crc = struct.unpack_from("<I", data, expected - 4)[0]
    if (zlib.crc32(data[:expected - 4]) & 0xFFFFFFFF) != stored_crc:
        raise ModelChecksumError("fingerprint file checksum mismatch")
    offset = 8 + head_len
    pow_model, offset = _read_model(header, "pow", data, offset)
    theta_model, offset = _read_model(header, "theta", data, offset)
    return FingerprintModel(
        device_id=header["device_id"],
        pow_model=pow_model,
        theta_model=theta_model,
        cfo_reference_rad_per_s=header["cfo_reference"],
        cfo_tolerance_rad_per_s=header["cfo_tolerance"],
        thresholds=Thresholds(**header["thresholds"]),
        k=header["k"],
        m=header["m"],
        format_version=header["format_version"],
    )
