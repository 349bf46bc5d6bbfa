"""Modulation-layer unit tests: constellation identities, step sets, resynthesis."""

import numpy as np
import pytest

from fid import signals
from fid.errors import ModulationError
from fid.signals import (
    BPSK, HALF_SINE, OQPSK, QPSK, RAISED_COSINE, RECTANGULAR,
    ProtocolConfig, bits_from_hex, bpsk_default, hex_from_bits, ideal_samples,
    modulate, oqpsk_default, pairwise_correlation, phase_step_set, qpsk_default,
    random_payload, symbol_center_indices,
)


def centers(signal):
    p = signal.protocol
    idx = symbol_center_indices(p, len(signal.bits) // p.bits_per_symbol)
    return signal.buffer.samples[idx]


class TestConstellation:
    @pytest.mark.parametrize("bits,phase", [
        ((0, 0), 0.25 * np.pi), ((0, 1), 0.75 * np.pi),
        ((1, 1), -0.75 * np.pi), ((1, 0), -0.25 * np.pi),
    ])
    def test_qpsk_gray_map(self, bits, phase):
        sig = modulate(bits, qpsk_default())
        c = centers(sig)[0]
        assert abs(np.angle(c) - phase) < 1e-12
        assert abs(abs(c) - 1.0) < 1e-9

    @pytest.mark.parametrize("bit,phase", [(0, 0.0), (1, np.pi)])
    def test_bpsk_map(self, bit, phase):
        sig = modulate((bit,), bpsk_default())
        c = centers(sig)[0]
        assert abs(np.angle(np.exp(-1j * phase) * c)) < 1e-12

    def test_unit_magnitude_at_centers(self):
        for proto in (bpsk_default(), qpsk_default()):
            sig = modulate(random_payload(256, seed=3), proto)
            assert np.max(np.abs(np.abs(centers(sig)) - 1.0)) < 1e-9

    def test_oqpsk_constant_envelope(self):
        sig = modulate(random_payload(256, seed=4), oqpsk_default())
        assert np.max(np.abs(np.abs(sig.buffer.samples) - 1.0)) < 1e-9

    def test_rectangular_holds_symbol_value(self):
        proto = ProtocolConfig(QPSK, 2e6, 8e6, 2.45e9,
                               qpsk_default().preamble_bits, RECTANGULAR)
        sig = modulate((0, 0, 1, 1), proto)
        s = sig.buffer.samples.reshape(2, -1)
        for row, phase in zip(s, (0.25 * np.pi, -0.75 * np.pi)):
            assert np.allclose(row, np.exp(1j * phase), atol=1e-12)


class TestPhaseSteps:
    def test_declared_sets(self):
        assert phase_step_set(bpsk_default()) == (-np.pi, 0.0, np.pi)
        assert phase_step_set(qpsk_default()) == (
            -np.pi, -0.5 * np.pi, 0.0, 0.5 * np.pi, np.pi)

    def test_oqpsk_step_is_pi_over_sps(self):
        proto = oqpsk_default()
        lo, hi = phase_step_set(proto)
        assert hi == pytest.approx(np.pi / proto.sps, abs=1e-9)
        assert lo == pytest.approx(-hi)

    @pytest.mark.parametrize("proto", [bpsk_default(), qpsk_default()])
    def test_center_steps_stay_in_set(self, proto):
        sig = modulate(random_payload(512, seed=11), proto)
        c = centers(sig)
        steps = np.angle(c[1:] * np.conj(c[:-1]))
        allowed = np.asarray(phase_step_set(proto))
        dist = np.min(np.abs(signals._wrap(steps[:, None] - allowed[None, :])),
                      axis=1)
        assert np.max(dist) < 1e-9
        # Every allowed step (mod 2*pi) occurs somewhere in a long run.
        for s in allowed:
            assert np.min(np.abs(signals._wrap(steps - s))) < 1e-9

    def test_oqpsk_per_sample_steps(self):
        sig = modulate(random_payload(512, seed=12), oqpsk_default())
        x = sig.buffer.samples
        d = np.angle(x[1:] * np.conj(x[:-1]))
        assert np.max(np.abs(np.abs(d) - np.pi / 4)) < 1e-9


class TestResynthesis:
    @pytest.mark.parametrize("proto", [bpsk_default(), qpsk_default(),
                                       oqpsk_default()])
    def test_zero_offset_is_exact(self, proto):
        sig = modulate(random_payload(128, seed=5), proto)
        again = ideal_samples(sig, 0.0)
        assert np.array_equal(again.samples, sig.buffer.samples)

    @pytest.mark.parametrize("proto", [qpsk_default(), oqpsk_default()])
    def test_fractional_offset_matches_dense_grid(self, proto):
        # Oracle: the same symbols modulated on a 16x denser grid.
        bits = random_payload(128, seed=6)
        sig = modulate(bits, proto)
        dense_proto = ProtocolConfig(
            proto.modulation, proto.symbol_rate_hz, 16 * proto.sample_rate_hz,
            proto.nominal_carrier_hz, proto.preamble_bits, proto.pulse_shape)
        dense = modulate(bits, dense_proto).buffer.samples
        for j in (1, 5, 12):
            tau = j / (16.0 * proto.sample_rate_hz)
            got = ideal_samples(sig, tau).samples
            want = dense[j::16][:len(got)]
            n = min(len(got), len(want))
            assert np.max(np.abs(got[:n] - want[:n])) < 1e-6


class TestPayloadAndCorrelation:
    def test_payload_deterministic(self):
        a = random_payload(4096, seed=42)
        b = random_payload(4096, seed=42)
        c = random_payload(4096, seed=43)
        assert np.array_equal(a, b)
        assert not np.array_equal(a, c)
        # Fair coin bound: 5 sigma around the mean.
        assert abs(a.mean() - 0.5) < 5 * 0.5 / np.sqrt(4096)

    def test_identical_buffers_correlate_fully(self):
        sig = modulate(random_payload(512, seed=9), qpsk_default())
        stats = pairwise_correlation([sig.buffer, sig.buffer])
        assert stats.mean == pytest.approx(1.0, abs=1e-9)

    def test_independent_payloads_decorrelate(self):
        proto = qpsk_default()
        bufs = [modulate(random_payload(2048, seed=s), proto).buffer
                for s in range(20, 26)]
        stats = pairwise_correlation(bufs)
        assert stats.mean < 0.3
        assert stats.n_pairs == 15


class TestValidation:
    def test_preamble_constants(self):
        for proto in (bpsk_default(), qpsk_default(), oqpsk_default()):
            assert len(proto.preamble_bits) == 128
        bits = bits_from_hex(signals.PREAMBLE_QPSK_HEX, 128)
        assert hex_from_bits(bits) == signals.PREAMBLE_QPSK_HEX

    def test_rejects_bad_inputs(self):
        proto = qpsk_default()
        with pytest.raises(ModulationError):
            modulate((0, 1, 0), proto)  # half a symbol
        with pytest.raises(ModulationError):
            modulate((0, 2), proto)
        with pytest.raises(ModulationError):
            ProtocolConfig("8psk", 1e6, 4e6, 2.45e9, (0, 1), RECTANGULAR)
        with pytest.raises(ModulationError):
            ProtocolConfig(QPSK, 1e6, 3.5e6, 2.45e9, (0, 1), RECTANGULAR)
        with pytest.raises(ModulationError):
            ProtocolConfig(OQPSK, 1e6, 4e6, 2.45e9, (0, 1), RECTANGULAR)
        with pytest.raises(ModulationError):
            ProtocolConfig(QPSK, 1e6, 4e6, 2.45e9, (0, 1), HALF_SINE)

    def test_wrap_range(self):
        th = np.linspace(-10, 10, 2001)
        w = signals._wrap(th)
        assert np.all(w > -np.pi - 1e-12) and np.all(w <= np.pi + 1e-12)
        assert np.allclose(np.exp(1j * w), np.exp(1j * th), atol=1e-12)
