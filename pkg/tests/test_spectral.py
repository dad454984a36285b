import csv
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from nhaah.model import (
    DomainSpec,
    LatticeSpec,
    ModulationSpec,
    Rational,
    bloch_hamiltonians,
    build_open_hamiltonian,
)
from nhaah.spectral import (
    Anchor,
    EigenSolverError,
    eigendecompose,
    eigendecompose_many,
    envelope_decay_fit,
    find_zero_modes,
    interval_distance,
    k_grid,
    lattice_zero_modes,
    matrix_fingerprint,
    merge_intervals,
    protected_anchors,
    real_line_gap,
    bulk_im_intervals,
    delta_sweep,
    spectral_symmetry_residual,
    write_spectrum_csv,
    write_wavefunction_csv,
)

from conftest import A14, A38, two_domain_lattice

EDGE_POINT = ModulationSpec(1.4, A38, 0.4 * math.pi)


def biorth_error(es):
    ok = ~es.exceptional
    G = es.left_vectors[:, ok].conj().T @ es.right_vectors[:, ok]
    return np.abs(G - np.eye(ok.sum())).max()


class TestEigendecompose:
    def test_symmetric_chain(self):
        H = build_open_hamiltonian(LatticeSpec.single(EDGE_POINT, 200))
        es = eigendecompose(H)
        assert np.abs(es.reconstruct() - H).max() < 1e-10
        assert biorth_error(es) < 1e-10
        assert np.allclose(np.linalg.norm(es.right_vectors, axis=0), 1)
        assert np.isfinite(es.biorth_condition) and es.biorth_condition >= 1

    def test_general_matrix_pairs_via_adjoint(self):
        rng = np.random.default_rng(3)
        H = rng.normal(size=(30, 30)) + 1j * rng.normal(size=(30, 30))
        es = eigendecompose(H)
        assert np.abs(es.reconstruct() - H).max() < 1e-9
        assert biorth_error(es) < 1e-9
        assert es.pairing_distance.max() < 1e-9
        # left vectors really are left eigenvectors
        L = es.left_vectors
        assert np.abs(L.conj().T @ H - es.eigenvalues[:, None] * L.conj().T).max() < 1e-9

    def test_degenerate_cluster_biorthonormalized(self):
        rng = np.random.default_rng(4)
        S = rng.normal(size=(5, 5)) + 1j * rng.normal(size=(5, 5))
        D = np.diag([1.0, 1.0, 1.0, 2.0, -0.5])
        H = S @ D @ np.linalg.inv(S)  # diagonalizable, triple eigenvalue 1
        es = eigendecompose(H)
        assert not es.has_exceptional
        assert biorth_error(es) < 1e-8
        assert np.abs(es.reconstruct() - H).max() < 1e-8

    def test_exceptional_point_flagged(self):
        H = np.array([[0.0, 1.0], [0.0, 0.0]], complex)  # Jordan block
        es = eigendecompose(H)
        assert es.exceptional.all()
        assert es.biorth_condition == math.inf

    def test_non_convergence_carries_fingerprint(self, monkeypatch):
        def boom(_):
            raise np.linalg.LinAlgError("Eigenvalues did not converge")

        monkeypatch.setattr(np.linalg, "eig", boom)
        H = np.eye(3, dtype=complex)
        with pytest.raises(EigenSolverError) as info:
            eigendecompose(H)
        assert info.value.fingerprint == matrix_fingerprint(H)

    def test_rejects_bad_input(self):
        with pytest.raises(ValueError):
            eigendecompose(np.ones((2, 3)))
        with pytest.raises(ValueError):
            eigendecompose(np.array([[np.nan, 0], [0, 1]]))

    def test_batched_matches_single(self):
        Hs = bloch_hamiltonians(ModulationSpec(1.2, A38, 0.9), k_grid(16))
        for es, H in zip(eigendecompose_many(Hs), Hs):
            assert np.abs(es.reconstruct() - H).max() < 1e-10
            assert biorth_error(es) < 1e-10

    def test_batched_handles_degenerate_slices(self):
        # V=0 bands touch at k=0 and k=pi
        Hs = bloch_hamiltonians(ModulationSpec(0.0, A14, 0.0), k_grid(8))
        for es, H in zip(eigendecompose_many(Hs), Hs):
            assert np.abs(es.reconstruct() - H).max() < 1e-10


class TestMirrorSymmetry:
    def test_exact_pairs(self):
        assert spectral_symmetry_residual([1 + 1j, -1 + 1j, 2j, 3j]) == 0.0

    def test_broken_pair(self):
        assert spectral_symmetry_residual([1.1 + 1j, -1 + 1j, 2j, 3j]) == pytest.approx(0.1)

    def test_odd_rejected(self):
        with pytest.raises(ValueError):
            spectral_symmetry_residual([1j, 2j, 3j])

    def test_edge_chain(self):
        es = eigendecompose(build_open_hamiltonian(LatticeSpec.single(EDGE_POINT, 200)))
        assert spectral_symmetry_residual(es) < 1e-9


class TestRealLineGap:
    def test_gapped_edge_point(self):
        g = real_line_gap(EDGE_POINT)
        assert g.gapped and g.min_abs_re > 0.3
        assert set(g.occupied_counts) == {4}

    def test_oracle_min_re(self):
        m = ModulationSpec(1.1, A38, 2.0)
        ks = k_grid(64)
        ref = min(np.abs(np.linalg.eigvals(bloch_hamiltonians(m, [k])[0]).real).min() for k in ks)
        assert real_line_gap(m, 64).min_abs_re == pytest.approx(ref, abs=1e-12)

    def test_zero_amplitude_gapless(self):
        assert not real_line_gap(ModulationSpec(0.0, A38, 0.0)).gapped

    def test_too_few_k(self):
        with pytest.raises(ValueError):
            real_line_gap(EDGE_POINT, k_samples=16)

    @pytest.mark.parametrize("alpha", ["1/3", "2/5", "1/6"])
    def test_other_periods_gapless(self, alpha):
        a = Rational.parse(alpha)
        for V in (0.5, 1.5):
            for d in np.linspace(0, 2 * np.pi, 6, endpoint=False):
                assert not real_line_gap(ModulationSpec(V, a, d)).gapped


class TestIntervals:
    def test_merge(self):
        iv = merge_intervals(np.array([[3, 4], [0, 1], [0.5, 2]]))
        assert iv.tolist() == [[0, 2], [3, 4]]

    def test_distance(self):
        iv = np.array([[0.0, 1.0], [2.0, 3.0]])
        assert interval_distance(1.5, iv) == pytest.approx(0.5)
        assert interval_distance(0.5, iv) == 0.0
        assert interval_distance(5.0, np.empty((0, 2))) == math.inf

    def test_free_band_interval(self):
        assert np.allclose(bulk_im_intervals(ModulationSpec(0.0, A38, 0.0)), [[0.0, 0.0]])


class TestDecayFit:
    def test_geometric_envelope_with_nodes(self):
        # cell pattern with an exact node, envelope r^cell; fit must recover xi = -p/ln r
        p, r = 8, 0.6
        pattern = np.array([1.0, 0.7, 0.0, 0.4, 0.9, 0.3, 0.5, 0.8])
        psi = np.concatenate([pattern * r**c for c in range(12)])
        fit = envelope_decay_fit(psi, 0, +1, p)
        assert fit.decay_length == pytest.approx(-p / math.log(r), rel=1e-10)
        assert fit.residual < 1e-10

    def test_right_edge_direction(self):
        p, r = 4, 0.5
        psi = np.concatenate([np.array([1.0, 0.2, 0.5, 0.1]) * r**c for c in range(10)])[::-1]
        fit = envelope_decay_fit(psi, len(psi) - 1, -1, p)
        assert fit.decay_length == pytest.approx(-p / math.log(r), rel=1e-10)

    def test_roundoff_floor_truncates(self):
        psi = np.concatenate([np.ones(4) * 10.0 ** (-5 * c) for c in range(10)])
        fit = envelope_decay_fit(psi, 0, +1, 4)
        assert fit.n_points == 3  # 1, 1e-5, 1e-10; the rest sit under the 1e-12 floor


@pytest.fixture(scope="module")
def edge_chain():
    lat = LatticeSpec.single(EDGE_POINT, 200)
    es = eigendecompose(build_open_hamiltonian(lat))
    return lat, es, lattice_zero_modes(lat, es=es)


class TestZeroModes:
    def test_one_mode_per_edge(self, edge_chain):
        _, _, zms = edge_chain
        assert [str(z.anchor) for z in zms] == ["LeftEdge", "RightEdge"]
        assert protected_anchors(zms) == [Anchor("left", 0), Anchor("right", 199)]

    def test_frozen_energies(self, edge_chain):
        # [DERIVED] direct diagonalization, frozen
        _, _, zms = edge_chain
        assert zms[0].energy.imag == pytest.approx(0.23246440214640626, abs=1e-8)
        assert zms[1].energy.imag == pytest.approx(0.948549105179348, abs=1e-8)

    def test_mode_properties(self, edge_chain):
        _, es, zms = edge_chain
        for z in zms:
            assert z.re_energy_abs < 1e-6
            assert z.ct_residual < 1e-6
            assert 0 < z.ipr <= 1
            assert z.fit_residual < 0.1 and 0 < z.decay_length < 50
            psi = es.normalized_right(z.index)
            assert z.ipr == pytest.approx(np.sum(np.abs(psi) ** 4))

    def test_trivial_spoke_has_no_protected_mode(self):
        lat = LatticeSpec.single(ModulationSpec(1.4, A38, 0.65 * math.pi), 200)
        assert protected_anchors(lattice_zero_modes(lat)) == []

    def test_two_domain_wall_mode(self):
        lat = two_domain_lattice()
        es = eigendecompose(build_open_hamiltonian(lat))
        zms = lattice_zero_modes(lat, es=es)
        wall = [z for z in zms if z.anchor.kind == "wall"]
        assert len(wall) == 1 and str(wall[0].anchor) == "WallIndex(24)"
        assert wall[0].energy.imag == pytest.approx(0.9712133874283726, abs=1e-9)
        assert wall[0].energy.imag == pytest.approx(es.eigenvalues.imag.max(), abs=1e-12)

    @pytest.mark.parametrize(
        "left,right",
        [((1.5, A38, 0.4), (1.5, A14, 0.4)), ((1.5, A38, 0.65), (1.5, A14, -0.4))],
        ids=["both-nontrivial", "both-trivial"],
    )
    def test_wall_controls(self, left, right):
        lat = LatticeSpec(
            (
                DomainSpec(ModulationSpec(left[0], left[1], left[2] * math.pi), 24),
                DomainSpec(ModulationSpec(right[0], right[1], right[2] * math.pi), 24),
            )
        )
        assert not [z for z in lattice_zero_modes(lat) if z.anchor.kind == "wall"]

    def test_bad_tolerance(self, edge_chain):
        _, es, _ = edge_chain
        with pytest.raises(ValueError):
            find_zero_modes(es, 0.0)

    def test_odd_dimension(self):
        es = eigendecompose(np.diag([1j, 2j, 3j]))
        with pytest.raises(ValueError):
            find_zero_modes(es)

    def test_anchor_labels(self):
        assert str(Anchor("left", 0)) == "LeftEdge"
        assert str(Anchor("wall", 24)) == "WallIndex(24)"


class TestSweep:
    def test_ordered_and_parallel_equal(self):
        deltas = [1.3, 0.2, 0.9, 2.5]
        serial = delta_sweep(EDGE_POINT, 40, deltas)
        threaded = delta_sweep(EDGE_POINT, 40, deltas, workers=2)
        assert [p.delta for p in serial] == sorted(deltas)
        for a, b in zip(serial, threaded):
            assert np.array_equal(a.eigenvalues, b.eigenvalues)

    def test_odd_n_rejected(self):
        with pytest.raises(ValueError):
            delta_sweep(EDGE_POINT, 41, [0.1])

    def test_csv_exports(self, tmp_path):
        pts = delta_sweep(EDGE_POINT, 40, [0.4 * math.pi])
        path = write_spectrum_csv(pts, tmp_path / "s.csv", ["hello"])
        rows = list(csv.reader(line for line in path.open() if not line.startswith("#")))
        assert rows[0] == ["delta", "index", "re_E", "im_E", "is_zero_mode"]
        assert len(rows) == 41
        E = np.array([float(r[2]) + 1j * float(r[3]) for r in rows[1:]])
        assert np.array_equal(E, pts[0].eigenvalues)  # repr round-trips exactly
        psi = np.exp(1j * np.arange(5))
        p2 = write_wavefunction_csv(psi, tmp_path / "w.csv")
        rows = list(csv.reader(p2.open()))
        assert rows[0] == ["site", "re_psi", "im_psi", "abs_psi"] and len(rows) == 6


@given(st.floats(0.2, 2.5), st.floats(0, 2 * math.pi), st.sampled_from([A14, A38]))
def test_sweep_zero_modes_are_ct_eigenstates(V, delta, alpha):
    lat = LatticeSpec.single(ModulationSpec(V, alpha, delta), 64)
    for z in lattice_zero_modes(lat):
        assert z.ct_residual < 1e-6
