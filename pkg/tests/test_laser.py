import csv
import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.optimize import brentq

from nhaah.laser import (
    IntegrationError,
    LossModulatedConfig,
    ModeClass,
    PumpModulatedConfig,
    SimConfig,
    TimeTrace,
    _rhs,
    classify_lasing,
    config_from_dict,
    emission_spectrum,
    gain_clamping_residual,
    initial_field,
    integrate,
    linear_hamiltonian,
    linear_threshold,
    nonlinear_rhs,
    output_intensity,
    pump_profile,
    read_trace,
    simulate,
    write_laser_spectrum_csv,
    write_sweep_csv,
    write_trace,
)
from nhaah.model import LatticeSpec, ModulationSpec, build_open_hamiltonian

from conftest import A38, two_domain_lattice

PUMP = PumpModulatedConfig(3.6, A38, 0.4 * math.pi)
SHORT = SimConfig(t_end=1000.0, average_window=(500.0, 1000.0))


@pytest.fixture(scope="module")
def loss_cfg():
    return LossModulatedConfig.from_lattice(two_domain_lattice(), 0.6)


def synthetic_trace(fields, dt=0.01, stride=50):
    fields = np.asarray(fields, complex)
    return TimeTrace(np.arange(len(fields)) * dt * stride, fields, "x", dt, stride)


class TestProfiles:
    def test_pump_profile_values(self):
        assert pump_profile(0.25, 0.0, 0) == pytest.approx(0.5)
        assert pump_profile(0.25, 0.0, 1) == pytest.approx(1.0)
        assert pump_profile(0.25, 0.0, 3) == pytest.approx(0.0, abs=1e-15)

    def test_rational_profile_exactly_periodic(self):
        n = np.arange(1, 49)
        lam = pump_profile(A38, 0.4 * math.pi, n)
        assert np.array_equal(lam[8:], lam[:-8])
        assert lam.min() >= 0 and lam.max() <= 1

    def test_odd_lattice_rejected(self):
        with pytest.raises(ValueError):
            PumpModulatedConfig(1.0, A38, 0.0, lattice_size=47)

    def test_dict_round_trip(self, loss_cfg):
        assert config_from_dict(PUMP.to_dict()) == PUMP
        assert config_from_dict(loss_cfg.to_dict()) == loss_cfg
        with pytest.raises(ValueError):
            config_from_dict({"kind": "other"})


class TestRhs:
    @given(st.integers(0, 2**31), st.floats(0, 6))
    def test_kernel_matches_reference(self, seed, gamma):
        cfg = PUMP.with_pump(gamma)
        psi = initial_field(48, seed, 1.5)
        gain, base = cfg.gain_and_base()
        out = np.empty(48, complex)
        _rhs(psi, gain, base, out)
        assert np.allclose(out, nonlinear_rhs(psi, cfg), atol=1e-13)

    def test_reference_is_minus_i_h_psi(self):
        psi = initial_field(48, 1, 0.7)
        from nhaah.laser import nonlinear_hamiltonian

        assert np.allclose(nonlinear_rhs(psi, PUMP), -1j * nonlinear_hamiltonian(psi, PUMP) @ psi, atol=1e-14)

    def test_zero_is_fixed_point(self, loss_cfg):
        for cfg in (PUMP, loss_cfg):
            assert np.all(nonlinear_rhs(np.zeros(cfg.n_sites, complex), cfg) == 0)

    def test_strong_field_saturates_gain(self):
        psi = np.full(48, 1e4 + 0j)
        from nhaah.laser import effective_potential

        assert np.allclose(effective_potential(psi, PUMP), -PUMP.passive_loss, atol=1e-6)

    def test_nonfinite_rejected(self):
        with pytest.raises(IntegrationError):
            nonlinear_rhs(np.full(48, np.nan + 0j), PUMP)


class TestSimConfig:
    def test_sample_count(self):
        sim = SimConfig(t_end=100.0, sample_stride=30, average_window=(0.0, 100.0))
        assert sim.n_samples == math.floor(100.0 / (0.01 * 30)) + 1
        tr = integrate(PUMP, sim)
        assert tr.fields.shape == (sim.n_samples, 48)

    @pytest.mark.parametrize(
        "kwargs",
        [
            {"average_window": (0.0, 6000.0)},
            {"average_window": (3000.0, 2000.0)},
            {"t_end": 100.005, "average_window": (0.0, 50.0)},
            {"sample_stride": 100},  # step 1.0 cannot resolve |omega| = 5
            {"dt": -0.1},
        ],
    )
    def test_invalid(self, kwargs):
        with pytest.raises(ValueError):
            SimConfig(**kwargs)

    def test_philox_initial_field(self):
        z = np.random.Generator(np.random.Philox(7)).standard_normal((2, 6))
        assert np.array_equal(initial_field(6, 7, 0.01), (z[0] + 1j * z[1]) * 0.01)


class TestIntegration:
    def test_bitwise_deterministic(self):
        a = integrate(PUMP, SHORT)
        b = integrate(PUMP, SHORT)
        assert np.array_equal(a.fields, b.fields) and a.fingerprint == b.fingerprint
        c = integrate(PUMP, replace(SHORT, seed=1))
        assert not np.array_equal(a.fields, c.fields)

    def test_no_pump_decays(self):
        sim = SimConfig(t_end=100.0, average_window=(0.0, 100.0))
        tr = integrate(PUMP.with_pump(0.0), sim)
        assert np.abs(tr.fields[-1]).max() < 1e-8

    def test_rk4_accuracy_on_linear_problem(self):
        # below threshold the dynamics is linear to O(|psi|^2); compare with expm
        import scipy.linalg

        cfg = PUMP.with_pump(1.0)
        sim = SimConfig(t_end=10.0, sample_stride=10, init_scale=1e-6, average_window=(0.0, 10.0))
        tr = integrate(cfg, sim)
        exact = scipy.linalg.expm(-1j * linear_hamiltonian(cfg) * 10.0) @ tr.fields[0]
        assert np.abs(tr.fields[-1] - exact).max() < 1e-9 * np.abs(tr.fields[0]).max()

    def test_blowup_reported_with_time(self):
        # pure gain with no saturation path: base gain > 0 everywhere
        cfg = LossModulatedConfig(0.0, LatticeSpec.single(ModulationSpec(0.0, A38, 0.0), 8), -2.0)
        with pytest.raises(IntegrationError) as info:
            integrate(cfg, SimConfig(t_end=200.0, average_window=(0.0, 200.0)))
        assert 0 < info.value.time <= 200.0

    def test_trace_round_trip(self, tmp_path):
        tr = integrate(PUMP, SimConfig(t_end=20.0, average_window=(0.0, 20.0)))
        back, meta = read_trace(write_trace(tr, tmp_path / "t.bin", {"note": "x"}))
        assert np.array_equal(back.fields, tr.fields) and np.allclose(back.times, tr.times)
        assert meta["note"] == "x" and back.fingerprint == tr.fingerprint
        (tmp_path / "bad.bin").write_bytes(b"junk")
        with pytest.raises(ValueError):
            read_trace(tmp_path / "bad.bin")


class TestAnalysis:
    def test_constant_field_intensity(self):
        tr = synthetic_trace(np.full((101, 4), 0.3 + 0.4j))
        assert output_intensity(tr, (0.0, 50.0)) == pytest.approx(0.25)
        assert output_intensity(tr, (0.0, 50.0), per_site=False) == pytest.approx(1.0)
        assert output_intensity(synthetic_trace(np.zeros((101, 4))), (0.0, 50.0)) == 0.0

    def test_window_outside_trace(self):
        with pytest.raises(ValueError):
            output_intensity(synthetic_trace(np.ones((11, 2))), (0.0, 100.0))

    def test_pure_tone_peak(self):
        t = np.arange(0, 3001) * 0.5
        tr = synthetic_trace(np.exp(-0.7j * t)[:, None] * np.ones(3), dt=0.01, stride=50)
        spec = emission_spectrum(tr, window=(0.0, 1500.0))
        (peak,) = spec.peaks()
        assert abs(peak - 0.7) < 2 * np.pi / 1500
        assert spec.power.max() == 1.0

    def test_two_tones_multimode(self):
        t = np.arange(0, 3001) * 0.5
        x = np.exp(-0.7j * t) + 0.5 * np.exp(0.3j * t)
        spec = emission_spectrum(synthetic_trace(x[:, None]), window=(0.0, 1500.0))
        assert classify_lasing(0.1, spec) is ModeClass.MULTI_MODE
        assert classify_lasing(1e-9, spec) is ModeClass.BELOW_THRESHOLD

    def test_site_selection(self):
        with pytest.raises(IndexError):
            emission_spectrum(synthetic_trace(np.ones((11, 2))), site=5, window=(0.0, 5.0))


def aah_threshold_oracle(cfg: PumpModulatedConfig) -> float:
    """H(0) = i(G/2 - gamma) + imaginary AAH chain with amplitude G/2."""

    def net(g):
        lat = LatticeSpec.single(ModulationSpec(g / 2, cfg.alpha, cfg.delta), cfg.lattice_size)
        return g / 2 - cfg.passive_loss + np.linalg.eigvals(build_open_hamiltonian(lat)).imag.max()

    return brentq(net, 0.0, 20.0, xtol=1e-12)


class TestThreshold:
    def test_pump_threshold_oracle(self):
        # [DERIVED] independent AAH route, frozen value 3.38865
        th = linear_threshold(PUMP)
        assert th == pytest.approx(aah_threshold_oracle(PUMP), abs=1e-8)
        assert th == pytest.approx(3.38865, abs=1e-5)

    def test_loss_threshold_offset_rule(self, loss_cfg):
        assert loss_cfg.offset_mismatch() < 1e-12
        assert linear_threshold(loss_cfg) == pytest.approx(0.5, abs=1e-6)
        shifted = replace(loss_cfg, offset=loss_cfg.offset + 0.1)
        assert linear_threshold(shifted) == pytest.approx(0.6, abs=1e-6)

    def test_always_lasing_rejected(self):
        cfg = LossModulatedConfig(0.0, LatticeSpec.single(ModulationSpec(0.0, A38, 0.0), 8), -2.0)
        with pytest.raises(ValueError):
            linear_threshold(cfg)

    def test_time_domain_onset_brackets_threshold(self):
        th = linear_threshold(PUMP)
        below, _ = simulate(PUMP.with_pump(th - 0.05))
        above, _ = simulate(PUMP.with_pump(th + 0.05))
        assert below.mode_class is ModeClass.BELOW_THRESHOLD
        assert above.mode_class is not ModeClass.BELOW_THRESHOLD


@pytest.fixture(scope="module")
def single():
    return simulate(PUMP)


class TestSteadyState:
    def test_single_mode_pinned_and_clamped(self, single):
        rep, tr = single
        assert rep.mode_class is ModeClass.SINGLE_MODE
        (peak,) = rep.peak_omegas
        assert abs(peak) < 2 * (2 * np.pi / 3000)
        assert gain_clamping_residual(PUMP, tr.fields[-1]) < 1e-2

    def test_edge_localized(self, single):
        rep, _ = single
        assert rep.anchor_site in (0, 1, 46, 47)

    def test_csv_outputs(self, single, tmp_path):
        rep, _ = single
        p = write_sweep_csv([rep], tmp_path / "sweep.csv", ["h"])
        rows = list(csv.reader(line for line in p.open() if not line.startswith("#")))
        assert rows[0] == ["gamma", "seed", "i_out", "i_out_total", "mode_class", "anchor_site"]
        assert rows[1][4] == "SingleMode"
        p = write_laser_spectrum_csv(rep.spectrum, tmp_path / "spec.csv")
        rows = list(csv.reader(p.open()))
        assert rows[0] == ["omega", "power"] and len(rows) == len(rep.spectrum.omega) + 1

    def test_dt_halving(self, single):
        rep, _ = single
        fine, _ = simulate(PUMP, SimConfig(dt=0.005, sample_stride=100))
        assert abs(fine.i_out - rep.i_out) < 0.01 * rep.i_out


def test_linear_hamiltonian_loss_layout(loss_cfg):
    H = linear_hamiltonian(loss_cfg)
    lat_H = build_open_hamiltonian(loss_cfg.lattice)
    # uniform pump and offset shift only the diagonal by i(G - gamma)
    assert np.allclose(H - lat_H, 1j * (loss_cfg.gamma_pump - loss_cfg.offset) * np.eye(48))
