"""Tests for the lattice model layer: gauges, phases, local operators."""

import math

import numpy as np
import pytest

from fluxpeps.lattice import (
    GaugeChoice, LatticeError, ModelParams, bond_hamiltonian, boson_space,
    gauge_transform_phases, local_ops, onsite_hamiltonian, patch_bonds,
    peierls_phase, plaquette_flux, torus_bonds, torus_flux_consistent,
)
from fluxpeps.symtensor import FluxAngle, densify

GAUGES = [GaugeChoice.LANDAU_X, GaugeChoice.LANDAU_Y]


def angle_value(a: FluxAngle) -> float:
    return a.rad


def angles_equal_mod_2pi(a: FluxAngle, b: FluxAngle, tol=1e-12) -> bool:
    d = (a.rad - b.rad) % (2 * math.pi)
    return min(d, 2 * math.pi - d) < tol


class TestPeierlsPhases:
    def test_landau_x_assignments(self):
        phi = FluxAngle.radians(0.37)
        for x in range(4):
            for y in range(4):
                up = peierls_phase(GaugeChoice.LANDAU_X, phi, (x, y), (x, y + 1))
                right = peierls_phase(GaugeChoice.LANDAU_X, phi, (x, y), (x + 1, y))
                assert angles_equal_mod_2pi(up, phi * x)
                assert right.is_zero()

    def test_landau_y_assignments(self):
        phi = FluxAngle.radians(0.61)
        for x in range(4):
            for y in range(4):
                up = peierls_phase(GaugeChoice.LANDAU_Y, phi, (x, y), (x, y + 1))
                right = peierls_phase(GaugeChoice.LANDAU_Y, phi, (x, y), (x + 1, y))
                assert up.is_zero()
                assert angles_equal_mod_2pi(right, phi * (-y))

    def test_reversal_negates(self):
        phi = FluxAngle.radians(1.1)
        for g in GAUGES:
            f = peierls_phase(g, phi, (2, 3), (2, 4))
            r = peierls_phase(g, phi, (2, 4), (2, 3))
            assert angles_equal_mod_2pi(f + r, FluxAngle.rational(0, 1))

    def test_non_neighbour_rejected(self):
        with pytest.raises(LatticeError):
            peierls_phase(GaugeChoice.LANDAU_X, FluxAngle.radians(0.1), (0, 0), (2, 0))
        with pytest.raises(LatticeError):
            peierls_phase(GaugeChoice.LANDAU_X, FluxAngle.radians(0.1), (0, 0), (1, 1))

    def test_every_plaquette_encloses_phi_open(self):
        for g in GAUGES:
            for phi in [FluxAngle.radians(0.3), FluxAngle.rational(1, 3),
                        FluxAngle.rational(1, 4), FluxAngle.radians(2.9)]:
                for x in range(5):
                    for y in range(5):
                        p = plaquette_flux(g, phi, (x, y))
                        assert angles_equal_mod_2pi(p, phi), (g, x, y)

    def test_every_plaquette_encloses_phi_torus(self):
        # 3x3 torus with phi = 2pi/3 satisfies Lx*Ly*phi = 0 mod 2pi
        phi = FluxAngle.rational(1, 3)
        assert torus_flux_consistent(3, 3, phi)
        for g in GAUGES:
            for x in range(3):
                for y in range(3):
                    p = plaquette_flux(g, phi, (x, y), torus=(3, 3))
                    assert angles_equal_mod_2pi(p, phi), (g, x, y)

    def test_torus_4x4_quarter_flux(self):
        phi = FluxAngle.rational(1, 4)
        assert torus_flux_consistent(4, 4, phi)
        for g in GAUGES:
            for x in range(4):
                for y in range(4):
                    p = plaquette_flux(g, phi, (x, y), torus=(4, 4))
                    assert angles_equal_mod_2pi(p, phi)

    def test_width_two_torus_seam(self):
        # on a 2xL torus the bond (1,y)->(0,y) walked rightward is a seam
        # bond and must carry the twist, unlike the leftward walk of the
        # same pair reversed
        phi = FluxAngle.rational(1, 4)  # 2*2*phi = 2pi? 4 * 2pi/4 = 2pi, ok with Ly=2
        assert torus_flux_consistent(2, 2, phi)
        for g in GAUGES:
            for x in range(2):
                for y in range(2):
                    p = plaquette_flux(g, phi, (x, y), torus=(2, 2))
                    assert angles_equal_mod_2pi(p, phi)

    def test_flux_consistency_check(self):
        assert not torus_flux_consistent(3, 3, FluxAngle.rational(1, 4))
        assert torus_flux_consistent(4, 4, FluxAngle.rational(1, 2))
        assert torus_flux_consistent(4, 4, FluxAngle.radians(math.pi / 2))


class TestGaugeTransform:
    def test_rule_on_patch_bonds(self):
        phi = FluxAngle.radians(0.73)
        chi = gauge_transform_phases(GaugeChoice.LANDAU_X, GaugeChoice.LANDAU_Y, phi)
        for src, dst, step in patch_bonds(5, 4):
            lhs = peierls_phase(GaugeChoice.LANDAU_Y, phi, src, dst, step=step)
            rhs = peierls_phase(GaugeChoice.LANDAU_X, phi, src, dst, step=step) \
                + chi(*src) + (-chi(*dst))
            assert angles_equal_mod_2pi(lhs, rhs), (src, dst)

    def test_rule_inverse_direction(self):
        phi = FluxAngle.rational(2, 7)
        chi = gauge_transform_phases(GaugeChoice.LANDAU_Y, GaugeChoice.LANDAU_X, phi)
        for src, dst, step in patch_bonds(4, 5):
            lhs = peierls_phase(GaugeChoice.LANDAU_X, phi, src, dst, step=step)
            rhs = peierls_phase(GaugeChoice.LANDAU_Y, phi, src, dst, step=step) \
                + chi(*src) + (-chi(*dst))
            assert angles_equal_mod_2pi(lhs, rhs)

    def test_rule_on_torus_with_seams(self):
        phi = FluxAngle.rational(1, 3)
        chi = gauge_transform_phases(GaugeChoice.LANDAU_X, GaugeChoice.LANDAU_Y, phi)
        for src, dst, step in torus_bonds(3, 3):
            lhs = peierls_phase(GaugeChoice.LANDAU_Y, phi, src, dst, (3, 3), step)
            rhs = peierls_phase(GaugeChoice.LANDAU_X, phi, src, dst, (3, 3), step) \
                + chi(*src) + (-chi(*dst))
            assert angles_equal_mod_2pi(lhs, rhs), (src, dst)

    def test_identity_transform(self):
        chi = gauge_transform_phases(GaugeChoice.LANDAU_X, GaugeChoice.LANDAU_X,
                                     FluxAngle.radians(1.0))
        assert chi(3, 4).is_zero()


class TestBondEnumeration:
    def test_patch_bond_count(self):
        bonds = list(patch_bonds(3, 4))
        assert len(bonds) == 2 * 3 * 4 - 3 - 4  # 2*N - Lx - Ly
        assert len(set((s, d) for s, d, _ in bonds)) == len(bonds)

    def test_torus_bond_count(self):
        bonds = list(torus_bonds(3, 3))
        assert len(bonds) == 2 * 9
        with pytest.raises(LatticeError):
            list(torus_bonds(1, 3))


class TestLocalOps:
    def test_matrix_elements(self):
        ops = local_ops(3)
        d = ops.space.dim
        assert d == 4
        b = densify(ops.b)
        bdag = densify(ops.b_dag)
        expect_b = np.zeros((4, 4))
        for n in range(1, 4):
            expect_b[n - 1, n] = math.sqrt(n)
        assert np.allclose(b, expect_b)
        assert np.allclose(bdag, expect_b.T)
        assert np.allclose(densify(ops.num), np.diag([0, 1, 2, 3]))
        assert np.allclose(densify(ops.interaction), np.diag([0, 0, 2, 6]))

    def test_commutator_truncated(self):
        # [b, b_dag] = 1 on all states below the cutoff
        ops = local_ops(2)
        b, bdag = densify(ops.b), densify(ops.b_dag)
        comm = b @ bdag - bdag @ b
        assert np.allclose(comm[:2, :2], np.eye(2))

    def test_charges(self):
        ops = local_ops(2)
        assert ops.b.charge == -1
        assert ops.b_dag.charge == +1
        assert ops.num.charge == 0

    def test_number_from_ladder(self):
        ops = local_ops(2)
        assert np.allclose(densify(ops.b_dag) @ densify(ops.b), densify(ops.num))


class TestHamiltonianTerms:
    def test_onsite(self):
        p = ModelParams(t=1.0, U=20.0, n_max=2)
        h = densify(onsite_hamiltonian(p))
        assert np.allclose(h, np.diag([0, 0, 20.0]))

    def test_bond_dense_form(self):
        p = ModelParams(t=1.3, U=5.0, n_max=2)
        phase = FluxAngle.radians(0.42)
        h = bond_hamiltonian(p, phase)
        d = densify(h)  # legs (i O, i I, j O, j I)
        ops = local_ops(2)
        b, bdag = densify(ops.b), densify(ops.b_dag)
        c = -1.3 * np.exp(1j * 0.42)
        expect = c * np.einsum("ij,kl->ikjl", bdag, b) \
            + np.conj(c) * np.einsum("ij,kl->ikjl", b, bdag)
        expect = np.transpose(expect, (0, 2, 1, 3))  # to (i O, i I, j O, j I)
        assert np.allclose(d, expect, atol=1e-14)

    def test_bond_hermitian(self):
        p = ModelParams(t=0.9, U=1.0, n_max=2)
        h = bond_hamiltonian(p, FluxAngle.radians(1.9))
        d = densify(h)
        mat = np.transpose(d, (0, 2, 1, 3)).reshape(9, 9)  # rows (iO jO), cols (iI jI)
        assert np.allclose(mat, mat.conj().T, atol=1e-14)

    def test_zero_phase_real(self):
        p = ModelParams(t=1.0, U=1.0, n_max=2)
        h = densify(bond_hamiltonian(p, FluxAngle.rational(0, 1)))
        assert np.allclose(h.imag, 0.0)

    def test_params_validation(self):
        with pytest.raises(LatticeError):
            ModelParams(n_max=0)
        with pytest.raises(LatticeError):
            ModelParams(n_max=2, density=3)
