"""Tests for the infinite-plane boundary contraction engine.

Anchors are independent of the engine wherever possible: the product state
has closed-form boundaries (eigenvalue one, zero residual, exact local
expectations), the flux-free perturbative state is checked against the
dense symmetry-free boundary contractor, and finite-flux observables are
checked against exactly contracted finite patches whose bond phases come
from the gauge pattern, evaluated at the reference column where the
infinite-plane channel measures.
"""

import dataclasses
import warnings

import numpy as np
import pytest
import torch

from fluxpeps.ansatz import (
    build_ansatz,
    conjugate_ansatz,
    default_virtual_space,
    FluxPattern,
    patch_expectations,
    perturbative_init,
    product_ansatz,
    random_ansatz,
)
from fluxpeps.contraction import (
    ContractionError,
    boundary_fixed_point,
    contract_state,
    double_layer,
    energy_density,
    expectation_bond,
    expectation_site,
)
from fluxpeps.lattice import (
    ModelParams,
    bond_hamiltonian,
    local_ops,
    onsite_hamiltonian,
)
from fluxpeps.oracle import dense_boundary_observables, _dense_double_layer
from fluxpeps.symtensor import FluxAngle, densify

ZERO = FluxAngle.rational(0, 1)
FIFTH = FluxAngle.rational(1, 5)
OPS = local_ops(2)


def params_with(flux, t=1.0, U=20.0):
    return ModelParams(t=t, U=U, flux=flux, n_max=2, density=1)


@pytest.fixture(scope="module")
def pert0():
    return perturbative_init(params_with(ZERO))


@pytest.fixture(scope="module")
def pert0_state(pert0):
    return contract_state(pert0, 12, tol=1e-9)


@pytest.fixture(scope="module")
def pert5():
    return perturbative_init(params_with(FIFTH))


@pytest.fixture(scope="module")
def pert5_state(pert5):
    return contract_state(pert5, 16, tol=1e-9)


class TestDoubleLayer:
    def test_product_double_layer_traces_to_one(self):
        prod = product_ansatz(params_with(FluxAngle.rational(2, 7)))
        dl = double_layer(prod.site(0, 0))
        e = densify(dl.tensor)
        z = np.einsum("aiai->", e)
        assert abs(z - 1.0) < 1e-12

    def test_matches_dense_double_layer_trace(self):
        rnd = random_ansatz(params_with(ZERO), default_virtual_space(2), seed=5)
        site = rnd.site(0, 0)
        mine = np.einsum("aiai->", densify(double_layer(site).tensor))
        ref = np.einsum("aiai->", _dense_double_layer(densify(site)))
        assert abs(mine - ref) < 1e-10 * max(1.0, abs(ref))

    def test_operator_insertion_changes_charge(self):
        rnd = random_ansatz(params_with(ZERO), default_virtual_space(2), seed=5)
        dl = double_layer(rnd.site(0, 0))
        assert dl.tensor.charge == 0
        assert dl.with_op(OPS.num).charge == 0
        assert dl.with_op(OPS.b_dag).charge == 1

    def test_rejects_wrong_rank(self):
        with pytest.raises(ContractionError):
            double_layer(OPS.num)


class TestBoundaryFixedPoint:
    def test_product_state_lambda_one_zero_residual(self):
        # closed form: the product state's double layer is rank one, so the
        # boundary converges to the cap with eigenvalue exactly one
        prod = product_ansatz(params_with(FluxAngle.rational(2, 7)))
        dl = double_layer(prod.site(0, 0))
        for chi in (1, 4):
            for side in ("top", "bottom"):
                bp = boundary_fixed_point(dl, prod.flux, chi, side=side)
                assert bp.converged
                assert abs(bp.eigenvalue - 1.0) < 1e-12
                assert bp.residual < 1e-12

    def test_converges_to_rounding(self, pert0_state):
        for bp in (pert0_state.top, pert0_state.bottom):
            assert bp.converged
            assert bp.residual < 1e-12
            # the monotonicity flag must be present; pre-refinement jitter
            # may legitimately set it False even for a converged run
            assert isinstance(bp.monotone_tail, bool)
            assert bp.iterations >= 2
            assert len(bp.residual_trace) == bp.iterations
            assert bp.residual_trace[-1] == bp.residual

    def test_clean_decay_is_monotone(self):
        prod = product_ansatz(params_with(FluxAngle.rational(2, 7)))
        bp = boundary_fixed_point(double_layer(prod.site(0, 0)),
                                  FluxAngle.rational(2, 7), 4)
        assert bp.converged and bp.monotone_tail

    def test_top_and_bottom_eigenvalues_agree(self, pert5_state):
        # both boundaries grow by the same per-row factor of one network
        assert abs(pert5_state.top.eigenvalue
                   - pert5_state.bottom.eigenvalue) < 1e-6

    def test_matches_dense_boundary_contractor(self, pert0, pert0_state):
        ref = dense_boundary_observables(densify(pert0.site(0, 0)),
                                         densify(OPS.num), chi=12)
        assert abs(pert0_state.norm_per_site - ref.norm_per_site) < 1e-8
        n = expectation_site(pert0_state, OPS.num)
        assert abs(n.real - ref.site_density) < 1e-6

    def test_power_and_eig_modes_agree(self, pert0):
        dl = double_layer(pert0.site(0, 0))
        eig = boundary_fixed_point(dl, ZERO, 12, mode="eig")
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            pwr = boundary_fixed_point(dl, ZERO, 12, mode="power", max_iter=80)
        assert abs(eig.eigenvalue - pwr.eigenvalue) < 1e-6

    def test_charged_double_layer_rejected(self, pert0):
        dl = double_layer(pert0.site(0, 0))
        charged = dataclasses.replace(dl, tensor=dl.with_op(OPS.b_dag))
        with pytest.raises(ContractionError):
            boundary_fixed_point(charged, ZERO, 8)

    def test_parameter_validation(self, pert0):
        dl = double_layer(pert0.site(0, 0))
        with pytest.raises(ContractionError):
            boundary_fixed_point(dl, ZERO, 0)
        with pytest.raises(ContractionError):
            boundary_fixed_point(dl, ZERO, 8, side="left")
        with pytest.raises(ContractionError):
            boundary_fixed_point(dl, ZERO, 8, mode="magic")
        with pytest.raises(ContractionError):
            boundary_fixed_point(dl, ZERO, 8, tol=-1.0)


class TestFluxPeriodicity:
    def test_shift_by_two_pi_gives_bit_identical_boundaries(self, pert5):
        shifted = build_ansatz(pert5.site(0, 0), FluxAngle.rational(6, 5),
                               FluxPattern.vertical_landau(FluxAngle.rational(6, 5)))
        a = contract_state(pert5, 8, tol=1e-8)
        b = contract_state(shifted, 8, tol=1e-8)
        assert a.top.eigenvalue == b.top.eigenvalue
        ta, tb = a.top.tensor, b.top.tensor
        assert ta.blocks.keys() == tb.blocks.keys()
        for k in ta.blocks:
            assert torch.equal(ta.blocks[k], tb.blocks[k])

    def test_contraction_ignores_the_gauge_pattern(self, pert5):
        # flux enters as one scalar: the same tensors under a different
        # equivalent pattern contract to bit-identical boundaries
        horizontal = build_ansatz(pert5.site(0, 0), FIFTH,
                                  FluxPattern.horizontal_landau(FIFTH))
        a = contract_state(pert5, 8, tol=1e-8)
        b = contract_state(horizontal, 8, tol=1e-8)
        assert a.top.eigenvalue == b.top.eigenvalue
        assert a.norm_per_site == b.norm_per_site


class TestExpectations:
    def test_product_state_exact_values(self):
        prod = product_ansatz(params_with(FluxAngle.rational(2, 7)))
        st = contract_state(prod, 4)
        assert abs(expectation_site(st, OPS.eye) - 1.0) < 1e-12
        assert abs(expectation_site(st, OPS.num) - 1.0) < 1e-12
        assert abs(expectation_site(st, OPS.interaction)) < 1e-12
        hb = bond_hamiltonian(params_with(FluxAngle.rational(2, 7)), ZERO)
        assert abs(expectation_bond(st, hb, "x")) < 1e-12
        assert abs(expectation_bond(st, hb, "y")) < 1e-12

    def test_density_is_filling_by_charge_conservation(self, pert5_state):
        # every site tensor carries one unit of charge, so the infinite
        # network's mean density is pinned at the filling exactly
        n = expectation_site(pert5_state, OPS.num)
        assert abs(n - 1.0) < 1e-6

    def test_identity_normalization(self, pert5_state):
        assert abs(expectation_site(pert5_state, OPS.eye) - 1.0) < 1e-10

    def test_hermitian_observables_nearly_real(self, pert5_state):
        hb = bond_hamiltonian(params_with(FIFTH), ZERO)
        for val in (expectation_site(pert5_state, OPS.num),
                    expectation_bond(pert5_state, hb, "x"),
                    expectation_bond(pert5_state, hb, "y")):
            assert abs(val.imag) < 1e-4 * max(1.0, abs(val.real))

    def test_finite_flux_observables_match_finite_patches(self, pert5, pert5_state):
        # independent reference: exact contraction of a 5x5 patch whose bond
        # phases realize the same flux, measured at the reference column
        p5 = params_with(FIFTH)
        hs = onsite_hamiltonian(p5)
        cx, cy = 2, 2
        obs = [({(cx, cy): OPS.num}, None),
               ({(cx, cy): hs}, None),
               (None, {((cx, cy), (cx + 1, cy)): bond_hamiltonian(
                   p5, pert5.pattern.bond_phase((0, 0), (1, 0)))}),
               (None, {((cx, cy), (cx, cy + 1)): bond_hamiltonian(
                   p5, pert5.pattern.bond_phase((0, 0), (0, 1)))})]
        ref = patch_expectations(pert5, 5, 5, obs, offset=(-cx, -cy))
        hb = bond_hamiltonian(p5, ZERO)
        mine = [expectation_site(pert5_state, OPS.num),
                expectation_site(pert5_state, hs),
                expectation_bond(pert5_state, hb, "x"),
                expectation_bond(pert5_state, hb, "y")]
        for got, want in zip(mine, ref):
            assert abs(got - want) < 2e-3

    def test_flux_free_bonds_match_finite_patch(self, pert0, pert0_state):
        hb = bond_hamiltonian(params_with(ZERO), ZERO)
        ref = patch_expectations(pert0, 5, 4, [
            (None, {((2, 1), (3, 1)): hb}),
            (None, {((2, 1), (2, 2)): hb})])
        assert abs(expectation_bond(pert0_state, hb, "x") - ref[0]) < 2e-3
        assert abs(expectation_bond(pert0_state, hb, "y") - ref[1]) < 2e-3

    def test_bond_orientations_agree_at_zero_flux(self, pert0_state):
        # the flux-free dressed product state is symmetric under exchanging
        # the two lattice directions
        hb = bond_hamiltonian(params_with(ZERO), ZERO)
        hx = expectation_bond(pert0_state, hb, "x")
        hy = expectation_bond(pert0_state, hb, "y")
        assert abs(hx - hy) < 1e-5

    def test_unconverged_state_refuses_to_measure(self, pert0):
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            st = contract_state(pert0, 12, tol=1e-9, max_iter=1)
        assert not st.converged
        with pytest.raises(ContractionError):
            expectation_site(st, OPS.num)


class TestEnergyDensity:
    def test_product_state_energy_is_zero(self):
        for flux in (ZERO, FluxAngle.rational(2, 7)):
            p = params_with(flux, t=0.0)
            prod = product_ansatz(p)
            assert abs(energy_density(prod, p, 4)) < 1e-12

    def test_invariant_under_flux_conjugation(self, pert5, pert5_state):
        # complex-conjugating the tensors realizes the state at opposite
        # flux, so the two energies coincide up to the finite-chi
        # environment error (the exact identity holds as chi grows; at
        # chi=16 each run's own imaginary part sits near 5e-6)
        p5 = params_with(FIFTH)
        pm = params_with(-FIFTH)
        conj = conjugate_ansatz(pert5)
        e_plus = energy_density(pert5, p5, 16, tol=1e-9, state=pert5_state)
        e_minus = energy_density(conj, pm, 16, tol=1e-9)
        assert abs(e_plus - e_minus) < 2e-5

    def test_continuous_in_flux_at_fixed_tensors(self, pert5):
        # move only the contraction's flux scalar, keeping the tensors fixed
        site = pert5.site(0, 0)
        base = FIFTH.rad
        e = {}
        for delta in (0.0, 1e-4):
            ang = FluxAngle.coerce(base + delta)
            a = build_ansatz(site, ang, FluxPattern.vertical_landau(ang))
            e[delta] = energy_density(a, params_with(ang), 8, tol=1e-8)
        assert abs(e[1e-4] - e[0.0]) < 1e-2

    def test_flux_mismatch_rejected(self, pert5):
        with pytest.raises(ContractionError):
            energy_density(pert5, params_with(ZERO), 8)

    def test_physical_space_mismatch_rejected(self, pert5):
        bad = ModelParams(t=1.0, U=20.0, flux=FIFTH, n_max=3, density=1)
        with pytest.raises(ContractionError):
            energy_density(pert5, bad, 8)


class TestCellValidation:
    def test_uniform_multi_site_cell_is_accepted(self, pert0):
        site = pert0.site(0, 0)
        two = build_ansatz([[site, site]], ZERO, FluxPattern.vertical_landau(ZERO))
        st = contract_state(two, 8, tol=1e-8)
        assert st.converged

    def test_distinct_cell_tensors_are_rejected(self, pert0):
        site = pert0.site(0, 0)
        other = site.scale(-1.0)
        two = build_ansatz([[site, other]], ZERO, FluxPattern.vertical_landau(ZERO))
        with pytest.raises(ContractionError):
            contract_state(two, 8)
