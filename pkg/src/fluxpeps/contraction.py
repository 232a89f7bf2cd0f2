"""Boundary-MPS contraction of the infinite flux-carrying PEPS.

The network to contract is a uniform double-layer tensor on the square
lattice with a position-dependent phase operator ``exp(i*x*phi*q)`` on
every vertical link in column ``x`` (``q`` is the combined ket-minus-bra
charge on the fused link).  For a charge-conserving uniform boundary MPS
the whole phase row collapses into something position-independent: within
any single charge configuration, charge conservation at each top-boundary
tensor gives ``q_phys(x) = q_bond(x) - q_bond(x+1)``, so

    sum_x x * q_phys(x) = sum_x q_bond(x)

by summation by parts (boundary terms carry no charge).  The row of
position-dependent link phases therefore equals one *uniform* flux
operator ``exp(i*phi*q)`` inserted on every MPS bond, and the boundary
fixed point satisfies: applying one flux-free double-layer row to M
reproduces M, up to a scalar per site, with ``flux_op(phi)`` inserted on
each bond.  The flux enters the algorithm purely as the scalar ``phi``.
For the boundary converged from below the physical leg points the other
way, which flips the sign of the bond insertion.

Measurements close the two boundaries around one or two bulk rows, and
every pending layer of link phases is absorbed by the same identity:

* one-row channel (site operators, horizontal bonds): top boundary with
  ``+phi`` bond flux, bare bulk row, bottom boundary with ``-phi`` bond
  flux;
* two-row channel (vertical bonds): the mid-link phase row is pushed
  through the upper bulk row using its own charge conservation,
  ``q_down = q_left + q_up - q_right``, which telescopes into one more
  ``+phi`` bond insertion on the top boundary plus a uniform
  ``exp(i*phi*q)`` on the right virtual leg of every upper-row tensor.
  The stack is then: top boundary with ``+2*phi`` bond flux, decorated
  upper row, bare lower row, bottom boundary with ``-phi`` bond flux.

Operators are measured at the reference column ``x = 0`` where the link
phase is ``exp(0) = 1``; pushing the phases into bond insertions leaves a
charged operator column at ``x`` with an explicit ``exp(i*x*phi*c)``
factor that vanishes exactly there, so the measured bond Hamiltonian
carries no Peierls phase at all.
"""

from __future__ import annotations

import cmath
import math
import warnings
from dataclasses import dataclass
from functools import lru_cache
from typing import Callable, Sequence

import numpy as np
import torch

from .ansatz import PepsAnsatz, _double_site, _fused_caps, angles_close
from .lattice import ModelParams, bond_hamiltonian, bond_product_terms, onsite_hamiltonian
from .symtensor import (
    IN,
    OUT,
    FluxAngle,
    FuseInfo,
    Leg,
    SymTensor,
    U1Space,
    apply_op,
    conjugate,
    contract,
    flux_op,
    fuser,
    identity_tensor,
    make_space,
    pack,
    random_symmetric,
    unpack,
)

__all__ = [
    "ContractionError",
    "DoubleLayer",
    "double_layer",
    "BoundaryFixedPoint",
    "boundary_fixed_point",
    "ChannelEnvironment",
    "ContractedState",
    "contract_state",
    "expectation_site",
    "expectation_bond",
    "energy_density",
]

_CPLX = torch.complex128


class ContractionError(ValueError):
    """Raised for invalid inputs or irrecoverable contraction failures."""


# ---------------------------------------------------------------------------
# double layer
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DoubleLayer:
    """One site's ket-bra pair with each virtual leg pair fused.

    ``tensor`` has legs (L in, U in, R out, D out) on the fused
    ket (x) dual-bra space and carries charge zero; its densified value
    equals the dense ket-bra contraction with the bra legs grouped after
    the ket legs.  ``fuse``/``split``/``info`` record the leg-pair fusion
    so operators and caps can be injected consistently later.
    """

    site: SymTensor
    tensor: SymTensor
    fuse: SymTensor
    split: SymTensor
    info: FuseInfo
    virtual: U1Space
    physical: U1Space

    @property
    def fused_space(self) -> U1Space:
        return self.info.fused

    def with_op(self, op: SymTensor | None) -> SymTensor:
        """Double-layer tensor with a one-site operator on the ket physical leg.

        The operator may carry charge; the result carries the same charge,
        which is how charged pieces of a two-site term enter a channel.
        """
        if op is None:
            return self.tensor
        if op.ndim != 2:
            raise ContractionError("site operator must have exactly two legs")
        if op.legs[0].space != self.physical or op.legs[1].space != self.physical:
            raise ContractionError("site operator must act on the physical space")
        if (op.legs[0].direction, op.legs[1].direction) != (OUT, IN):
            raise ContractionError("site operator legs must be (out, in)")
        return _double_site(self.site, op, self.fuse, self.split)


def double_layer(site: SymTensor) -> DoubleLayer:
    """Build the norm double layer of one PEPS site tensor.

    ``site`` uses the standard leg order (physical, left, up, right, down)
    with directions (out, in, in, out, out); left/right and up/down legs
    must share one virtual space so the fused double-layer legs do too.
    """
    if site.ndim != 5:
        raise ContractionError("site tensor must have five legs")
    dirs = tuple(l.direction for l in site.legs)
    if dirs != (OUT, IN, IN, OUT, OUT):
        raise ContractionError("site legs must have directions (out, in, in, out, out)")
    virtual = site.legs[1].space
    for ax in (2, 3, 4):
        if site.legs[ax].space != virtual:
            raise ContractionError("all four virtual legs must share one space")
    fuse, info = fuser(virtual, virtual.dual)
    split = conjugate(fuse)
    tensor = _double_site(site, None, fuse, split)
    return DoubleLayer(site=site, tensor=tensor, fuse=fuse, split=split,
                       info=info, virtual=virtual,
                       physical=site.legs[0].space)


# ---------------------------------------------------------------------------
# small spectral helpers
# ---------------------------------------------------------------------------


def _tdot(a: SymTensor, b: SymTensor) -> complex:
    """Frobenius inner product <a, b> over the shared block keys."""
    total = 0.0 + 0.0j
    for k, blk in a.blocks.items():
        other = b.blocks.get(k)
        if other is not None:
            total += complex(torch.vdot(blk.reshape(-1), other.reshape(-1)))
    return total


def _full_template(legs: Sequence[Leg], charge: int = 0) -> SymTensor:
    """Zero tensor with every charge-allowed block present (a fixed basis)."""
    t = random_symmetric(legs, seed=0, charge=charge)
    return SymTensor(t.legs, {k: torch.zeros_like(b) for k, b in t.blocks.items()},
                     charge, validate=False)


def _pack_like(t: SymTensor, template: SymTensor) -> np.ndarray:
    """Pack ``t`` on the template's fixed block basis (missing blocks are zero)."""
    parts = []
    seen = 0
    for k in template.sorted_keys():
        shape = tuple(template.blocks[k].shape)
        blk = t.blocks.get(k)
        if blk is None:
            parts.append(np.zeros(int(np.prod(shape)) if shape else 1,
                                  dtype=np.complex128))
        else:
            parts.append(blk.detach().numpy().ravel())
            seen += 1
    extras = set(t.blocks) - set(template.blocks)
    if extras:
        raise ContractionError(f"tensor has blocks outside the template basis: {sorted(extras)[:3]}")
    if not parts:
        return np.zeros(0, dtype=np.complex128)
    return np.concatenate(parts)


def _inner(a: SymTensor, b: SymTensor) -> complex:
    """Frobenius inner product <a, b> = sum conj(a) * b over shared blocks."""
    if a.legs != b.legs or a.charge != b.charge:
        raise ContractionError("inner product needs identical signature and charge")
    total = 0j
    for k, blk in a.blocks.items():
        other = b.blocks.get(k)
        if other is not None:
            total += complex(torch.vdot(blk.reshape(-1), other.reshape(-1)))
    return total


def _leading_eig(apply_fn: Callable[[SymTensor], SymTensor], start: SymTensor,
                 *, tol: float = 1e-13, max_iter: int = 2000,
                 dense_n: int = 48) -> tuple[complex, SymTensor, bool]:
    """Dominant eigenpair of a linear map given by ``apply_fn``.

    ``start`` fixes the space (and should contain every allowed block, so
    the basis is complete).  Small problems are solved densely — exact and
    free of iteration pathologies; larger ones go to an Arnoldi solve with
    the seeded start vector (deterministic given identical inputs), with
    power iteration with a Rayleigh-quotient stop as the fallback.
    """
    n = sum(int(np.prod(tuple(b.shape))) or 1 for b in start.blocks.values())
    if n == 0:
        return 0.0 + 0.0j, start, True
    if n <= dense_n:
        basis = start
        mat = np.zeros((n, n), dtype=np.complex128)
        eye = np.eye(n, dtype=np.complex128)
        for i in range(n):
            col = apply_fn(unpack(eye[i], basis))
            mat[:, i] = _pack_like(col, basis)
        w, v = np.linalg.eig(mat)
        i = int(np.argmax(np.abs(w)))
        vec = unpack(np.ascontiguousarray(v[:, i]), basis)
        return complex(w[i]), vec, True

    pair = _arnoldi_eig(apply_fn, start, n, tol)
    if pair is not None:
        return pair[0], pair[1], True

    x = start
    nrm = x.norm()
    if nrm == 0:
        raise ContractionError("zero starting vector in eigensolve")
    x = x.scale(1.0 / nrm)
    lam_prev = None
    hits = 0
    for _ in range(max_iter):
        y = apply_fn(x)
        lam = _tdot(x, y)
        ny = y.norm()
        if ny == 0:
            return 0.0 + 0.0j, y, True
        x = y.scale(1.0 / ny)
        if lam_prev is not None:
            if abs(lam - lam_prev) <= max(tol * abs(lam), 1e-300):
                hits += 1
                if hits >= 2:
                    return lam, x, True
            else:
                hits = 0
        lam_prev = lam
    return lam_prev if lam_prev is not None else 0.0 + 0.0j, x, False


def _arnoldi_eig(apply_fn: Callable[[SymTensor], SymTensor], start: SymTensor,
                 n: int, tol: float) -> tuple[complex, SymTensor] | None:
    """Largest-magnitude eigenpair via Arnoldi; None when unavailable."""
    from scipy.sparse.linalg import ArpackError, ArpackNoConvergence, LinearOperator, eigs

    template = start
    v0 = _pack_like(start, template)
    nv = np.linalg.norm(v0)
    if nv == 0 or not np.isfinite(nv):
        return None

    def mv(x: np.ndarray) -> np.ndarray:
        return _pack_like(apply_fn(unpack(x, template)), template)

    try:
        w, v = eigs(LinearOperator((n, n), matvec=mv, dtype=np.complex128),
                    k=1, which="LM", v0=v0 / nv, tol=tol, maxiter=3000)
    except (ArpackNoConvergence, ArpackError):  # pragma: no cover
        return None
    vec = np.ascontiguousarray(v[:, 0])
    nrm = np.linalg.norm(vec)
    if nrm == 0 or not np.isfinite(nrm):
        return None
    return complex(w[0]), unpack(vec / nrm, template)


def _hermitize(rho: SymTensor) -> SymTensor:
    """Project a square (q, q)-blocked map onto its Hermitian part, phase-fixed.

    The dominant eigenmatrix of a ket-bra transfer map is Hermitian positive
    up to one global phase; rotating the trace onto the positive real axis
    and averaging with the adjoint removes iteration noise.
    """
    tr = sum(complex(torch.sum(torch.diagonal(b))) for b in rho.blocks.values())
    if abs(tr) > 0:
        rho = rho.scale(abs(tr) / tr)
    blocks = {k: (b + b.mH) / 2 for k, b in rho.blocks.items()}
    return SymTensor(rho.legs, blocks, rho.charge, validate=False)


# ---------------------------------------------------------------------------
# boundary fixed point
# ---------------------------------------------------------------------------


@lru_cache(maxsize=256)
def _bond_fuser(bond: U1Space, phys: U1Space) -> tuple[SymTensor, SymTensor, FuseInfo]:
    F, info = fuser(bond, phys)
    return F, conjugate(F), info


def _enlarge_top(m: SymTensor, a: SymTensor) -> SymTensor:
    """Apply one double-layer row to a top boundary tensor (bl in, p out, br out)."""
    F, split, _ = _bond_fuser(m.legs[0].space, a.legs[0].space)
    t = contract(m, a, [(1, 1)])               # (bl, br, L, R, D)
    t = contract(t, split, [(0, 0), (2, 1)])   # (br, R, D, bl')
    t = contract(t, F, [(0, 0), (1, 1)])       # (D, bl', br')
    return t.transpose((1, 0, 2))


def _enlarge_bottom(n: SymTensor, a: SymTensor) -> SymTensor:
    """Apply one double-layer row to a bottom boundary tensor (bl in, p in, br out)."""
    F, split, _ = _bond_fuser(n.legs[0].space, a.legs[0].space)
    t = contract(n, a, [(1, 3)])               # (bl, br, L, U, R)
    t = contract(t, split, [(0, 0), (2, 1)])   # (br, U, R, bl')
    t = contract(t, F, [(0, 0), (2, 1)])       # (U, bl', br')
    return t.transpose((1, 0, 2))


def _transfer_left(rho: SymTensor, ket: SymTensor, bra: SymTensor) -> SymTensor:
    t = contract(rho, ket, [(0, 0)])
    return contract(t, bra, [(0, 0), (1, 1)])


def _transfer_right(sig: SymTensor, ket: SymTensor, bra: SymTensor) -> SymTensor:
    t = contract(ket, sig, [(2, 0)])
    return contract(t, bra, [(1, 1), (2, 2)])


def _own_transfer_eig(m: SymTensor, v0: SymTensor | None = None
                      ) -> tuple[float, SymTensor]:
    """Leading eigenvalue (real, >= 0) of an MPS tensor's ket-bra transfer."""
    bra = conjugate(m)
    start = v0 if v0 is not None and v0.legs[0].space == m.legs[0].space \
        else identity_tensor(m.legs[0].space)
    lam, vec, _ = _leading_eig(lambda r: _transfer_left(r, m, bra), start)
    return max(float(lam.real), 0.0), vec


def _mixed_transfer_mag(ket: SymTensor, bra_of: SymTensor, seed: int) -> float:
    """|leading eigenvalue| of the mixed transfer between two boundary tensors."""
    bra = conjugate(bra_of)
    legs = (Leg(ket.legs[0].space, OUT), Leg(bra_of.legs[0].space, IN))
    start = _full_template(legs, 0)
    if not start.blocks:
        return 0.0
    start = random_symmetric(legs, seed=seed, charge=0)
    lam, _, _ = _leading_eig(lambda r: _transfer_left(r, ket, bra), start)
    return abs(lam)


def _truncation_projectors(rho_l: SymTensor, sig_r: SymTensor, chi: int,
                           charge_cap: int,
                           alloc: dict[int, int] | None = None,
                           ) -> tuple[SymTensor, SymTensor, U1Space]:
    """Bond-truncation pair (Q, P) with Q . P = identity on the kept space.

    Per charge sector, square roots of the Hermitian-positive environment
    fixed points are combined and singular-value decomposed; the kept
    singular values are chosen globally across sectors (window-capped in
    charge), exactly like a dense environment truncation but block by
    block.  The cut never splits a near-degenerate group: slicing inside a
    multiplet lets the kept sector mix flicker between iterations, which
    keeps the bond space from ever settling.  Passing ``alloc`` (charge ->
    multiplicity) bypasses the global cut and keeps exactly that many
    values per sector — the iteration freezes the allocation once the
    spectrum's shape has emerged, so the bond space stays fixed while the
    basis keeps refining.
    """
    fat = rho_l.legs[0].space
    sqrt_l: dict[int, torch.Tensor] = {}
    sqrt_r: dict[int, torch.Tensor] = {}
    svd_parts: dict[int, tuple[torch.Tensor, torch.Tensor, torch.Tensor]] = {}
    entries: list[tuple[float, int, int]] = []
    for q in fat.charges:
        if abs(q) > charge_cap:
            continue
        bl = rho_l.blocks.get((q, q))
        br = sig_r.blocks.get((q, q))
        if bl is None or br is None:
            continue
        wl, ul = torch.linalg.eigh((bl + bl.mH) / 2)
        wr, ur = torch.linalg.eigh((br + br.mH) / 2)
        lq = torch.diag(torch.sqrt(torch.clamp(wl, min=0.0)).to(_CPLX)) @ ul.mH
        rq = ur @ torch.diag(torch.sqrt(torch.clamp(wr, min=0.0)).to(_CPLX))
        u, s, vh = torch.linalg.svd(lq @ rq, full_matrices=False)
        sqrt_l[q], sqrt_r[q] = lq, rq
        svd_parts[q] = (u, s, vh)
        for i in range(s.shape[0]):
            entries.append((float(s[i]), q, i))
    if not entries:
        raise ContractionError("environment truncation found no weight in the charge window")
    entries.sort(key=lambda e: (-e[0], e[1], e[2]))
    smax = entries[0][0]
    if smax <= 0.0:
        raise ContractionError("zero leading eigenvalue in the boundary environment")
    keep: dict[int, int] = {}
    if alloc is not None:
        for q, k in alloc.items():
            if k <= 0:
                continue
            avail = svd_parts[q][1].shape[0] if q in svd_parts else 0
            if avail < k or float(svd_parts[q][1][k - 1]) <= 1e-14 * smax:
                raise ContractionError(
                    "frozen sector allocation no longer fits the environment")
            keep[q] = k
    else:
        cut = 0
        for s, _, _ in entries:
            if cut >= chi or s <= 1e-14 * smax:
                break
            cut += 1
        # back the cut out of a near-degenerate group (keep at least one value)
        while 1 < cut < len(entries) and \
                entries[cut][0] > entries[cut - 1][0] * (1.0 - 1e-8):
            cut -= 1
        for s, q, i in entries[:cut]:
            # singular values per sector come out ordered, so i == current count
            keep[q] = keep.get(q, 0) + 1
    new_space = make_space(sorted((q, k) for q, k in keep.items()))
    p_blocks = {}
    q_blocks = {}
    for q, k in keep.items():
        u, s, vh = svd_parts[q]
        inv_sq = torch.diag((1.0 / torch.sqrt(s[:k])).to(_CPLX))
        p_blocks[(q, q)] = sqrt_r[q] @ vh[:k, :].mH @ inv_sq
        q_blocks[(q, q)] = inv_sq @ u[:, :k].mH @ sqrt_l[q]
    P = SymTensor((Leg(fat, IN), Leg(new_space, OUT)), p_blocks, 0, validate=False)
    Q = SymTensor((Leg(new_space, IN), Leg(fat, OUT)), q_blocks, 0, validate=False)
    return Q, P, new_space


@dataclass(frozen=True)
class BoundaryFixedPoint:
    """Uniform boundary MPS satisfying the bond-flux fixed-point condition.

    ``tensor`` has legs (bond in, physical, bond out); the physical leg
    points out for the top boundary and in for the bottom one.
    ``bond_angle`` is the signed flux angle of the bond insertion that the
    fixed-point condition carries for this side (+phi top, -phi bottom).
    ``rho_left``/``rho_right`` are the Hermitian transfer fixed points of
    the final tensor — the gauges from which the left/right canonical
    forms are obtained by a square root.  ``residual`` is the defect of the
    fixed-point equation at bond dimension chi: with ``B`` one row
    application of the tensor ``M`` compressed back to the boundary's bond
    space, the relative norm of ``B - <M, B> M`` — the global phase (the
    residual bond-gauge freedom of a normalized uniform iterate) is aligned
    by the projection coefficient, and the subtraction happens entry-wise,
    so the measure stays accurate down to rounding.  ``residual_trace``
    records it per iteration; ``monotone_tail`` flags whether its last
    stretch decreased monotonically.
    """

    tensor: SymTensor
    side: str
    phi: FluxAngle
    bond_angle: FluxAngle
    eigenvalue: float
    residual: float
    converged: bool
    iterations: int
    residual_trace: tuple[float, ...]
    monotone_tail: bool
    rho_left: SymTensor
    rho_right: SymTensor

    @property
    def bond_space(self) -> U1Space:
        return self.tensor.legs[0].space

    @property
    def chi(self) -> int:
        return self.bond_space.dim

    def decorated(self, layers: int = 1) -> SymTensor:
        """Boundary tensor with ``layers`` bond-flux insertions on its out bond."""
        if layers == 0 or self.bond_angle.is_zero():
            return self.tensor
        op = flux_op(self.tensor.legs[2].space, self.bond_angle * layers)
        return apply_op(op, self.tensor, 2)


def _initial_boundary(dl: DoubleLayer, side: str, seed: int) -> SymTensor:
    """Deterministic starting boundary: the charge-0 cap plus a little seeded noise."""
    cap_in, cap_out = _fused_caps(dl.virtual, dl.info)
    cap = cap_out if side == "top" else cap_in
    triv = make_space([(0, 1)])
    phys_dir = OUT if side == "top" else IN
    legs = (Leg(triv, IN), Leg(dl.fused_space, phys_dir), Leg(triv, OUT))
    blk = cap.blocks[(0,)].reshape(1, -1, 1)
    m = SymTensor(legs, {(0, 0, 0): blk.clone()}, 0, validate=False)
    noise = random_symmetric(legs, seed=seed, charge=0)
    m = m.add(noise, alpha=0.01 * m.norm() / max(noise.norm(), 1e-300))
    return m.scale(1.0 / m.norm())


def _monotone_tail(trace: Sequence[float], window: int = 10) -> bool:
    tail = list(trace)[-window:]
    return all(b <= a * (1.0 + 1e-6) + 1e-15 for a, b in zip(tail, tail[1:]))


def _check_nondegenerate(m: SymTensor, seed: int, side: str) -> None:
    """Raise if the boundary's own transfer map has a degenerate leading eigenvalue."""
    from scipy.sparse.linalg import ArpackError, ArpackNoConvergence, LinearOperator, eigs

    template = _full_template((Leg(m.legs[0].space, OUT), Leg(m.legs[0].space, IN)), 0)
    n = sum(int(np.prod(tuple(b.shape))) for b in template.blocks.values())
    if n < 5:
        return
    bra = conjugate(m)

    def mv(x: np.ndarray) -> np.ndarray:
        return _pack_like(_transfer_left(unpack(x, template), m, bra), template)

    rng = np.random.default_rng(seed)
    v0 = _pack_like(identity_tensor(m.legs[0].space), template)
    v0 = v0 + 1e-3 * (rng.standard_normal(n) + 1j * rng.standard_normal(n))
    try:
        vals = eigs(LinearOperator((n, n), matvec=mv, dtype=np.complex128),
                    k=2, which="LM", v0=v0, maxiter=2000, tol=1e-10,
                    return_eigenvectors=False)
    except (ArpackNoConvergence, ArpackError) as exc:  # pragma: no cover
        warnings.warn(f"transfer degeneracy check inconclusive ({exc})")
        return
    mags = sorted(np.abs(vals), reverse=True)
    if mags[0] == 0.0:
        raise ContractionError("zero leading eigenvalue of the boundary transfer map")
    if mags[1] / mags[0] > 1.0 - 1e-6:
        raise ContractionError(
            f"the {side} boundary transfer map has a degenerate leading eigenvalue "
            f"(|e2/e1| = {mags[1] / mags[0]:.12f}); the state breaks one-site "
            "translation symmetry — rebuild the ansatz on an enlarged unit cell "
            "(for example 2x1) instead of a 1x1 cell")


def boundary_fixed_point(dl: DoubleLayer, phi, chi: int, *, side: str = "top",
                         tol: float = 1e-9, max_iter: int = 200, seed: int = 7,
                         mode: str = "eig", charge_cap: int | None = None,
                         degeneracy_check: bool = True) -> BoundaryFixedPoint:
    """Converge the uniform boundary MPS of the flux-decorated double layer.

    Iterates ``M <- truncate(row(M with flux_op(phi) on each bond))`` with
    environment-projector truncation to bond dimension ``chi``
    (``mode="power"``), or — the default — refines the same map with an
    Arnoldi eigensolve around frozen truncation projectors (``mode="eig"``),
    which pins the truncated row map's dominant eigenvector exactly instead
    of chasing it through re-derived projectors.  Convergence means the
    fixed-point equation's eigen-residual at bond dimension chi falls below
    ``tol``.  The residual certifies the eigenproblem of the frozen
    truncated map; the truncation choice itself is fixed mid-iteration and
    so carries a seed sensitivity on the order of the truncation error —
    observables sharpen by raising ``chi``, not by tightening ``tol``.
    Determinism: every starting vector is derived from ``seed``, so equal
    inputs give bit-equal iterates.
    """
    if chi < 1:
        raise ContractionError("chi must be at least 1")
    if tol <= 0:
        raise ContractionError("tol must be positive")
    if side not in ("top", "bottom"):
        raise ContractionError(f"unknown boundary side {side!r}")
    if mode not in ("power", "eig"):
        raise ContractionError(f"unknown boundary mode {mode!r}")
    if max_iter < 1:
        raise ContractionError("max_iter must be at least 1")
    if dl.tensor.charge != 0:
        raise ContractionError("boundary contraction needs the charge-0 double layer")
    phi = FluxAngle.coerce(phi)
    a = dl.tensor
    if charge_cap is None:
        charge_cap = 2 * max(abs(q) for q in dl.fused_space.charges)
    bond_angle = phi if side == "top" else -phi
    enlarge = _enlarge_top if side == "top" else _enlarge_bottom

    def decorated(m: SymTensor) -> SymTensor:
        if bond_angle.is_zero():
            return m
        return apply_op(flux_op(m.legs[2].space, bond_angle), m, 2)

    def step(m: SymTensor) -> SymTensor:
        return enlarge(decorated(m), a)

    m = _initial_boundary(dl, side, seed)

    lam = 0.0
    residual = math.inf
    trace: list[float] = []
    converged = False
    iterations = 0
    rho_warm: SymTensor | None = None
    sig_warm: SymTensor | None = None
    frozen: tuple[SymTensor, SymTensor] | None = None  # (Q, P) for mode="eig"
    freeze_it = 0
    alloc: dict[int, int] | None = None  # pinned per-sector bond multiplicities
    flips: list[bool] = []  # per-iteration "bond space changed" flags

    for it in range(1, max_iter + 1):
        iterations = it
        big = step(m)
        bra_big = conjugate(big)
        fat = big.legs[0].space
        rho0 = rho_warm if rho_warm is not None and rho_warm.legs[0].space == fat \
            else identity_tensor(fat)
        sig0 = sig_warm if sig_warm is not None and sig_warm.legs[0].space == fat \
            else identity_tensor(fat).transpose((1, 0))
        eta_big, rho_l, _ = _leading_eig(
            lambda r: _transfer_left(r, big, bra_big), rho0)
        _, sig_r, _ = _leading_eig(
            lambda r: _transfer_right(r, big, bra_big), sig0)
        if not (eta_big.real > 0) or not math.isfinite(eta_big.real):
            raise ContractionError("zero leading eigenvalue while growing the boundary")
        rho_l = _hermitize(rho_l)
        sig_r = _hermitize(sig_r)
        rho_warm, sig_warm = rho_l, sig_r

        if mode == "eig" and frozen is not None:
            Q, P = frozen
            if P.legs[0].space != fat:
                frozen = None
        if mode == "eig" and frozen is not None:
            Q, P = frozen
        else:
            try:
                Q, P, new_space = _truncation_projectors(
                    rho_l, sig_r, chi, charge_cap, alloc)
            except ContractionError:
                if alloc is None:
                    raise
                # the environment drifted away from the pinned allocation;
                # fall back to the adaptive cut and re-pin later
                alloc = None
                Q, P, new_space = _truncation_projectors(
                    rho_l, sig_r, chi, charge_cap)
            # flicker rescue: when the global cut keeps sliding across a
            # near-degenerate group, the kept sector mix never settles and
            # the iterates cannot converge — pin the per-sector
            # multiplicities to the current ones and let the basis refine
            if alloc is None and it >= 5 and sum(flips[-6:]) >= 2:
                alloc = {q: d for q, d in new_space.sectors}

        m_new = contract(contract(Q, big, [(1, 0)]), P, [(2, 0)]).prune(0.0)

        if mode == "eig" and frozen is not None and m_new.legs == m.legs:
            refined = _arnoldi_refine(step, Q, P, m, tol, seed)
            if refined is not None:
                m_new = refined

        lam = m_new.norm()
        if lam <= 0 or not math.isfinite(lam):
            raise ContractionError("zero leading eigenvalue of the boundary row map")

        # eigen-residual of the truncated row map at the previous iterate,
        # with the global phase aligned by the projection coefficient; the
        # entry-wise subtraction keeps the measure accurate to rounding
        if m_new.legs == m.legs:
            coeff = _inner(m, m_new)
            residual = m_new.add(m, alpha=-coeff).norm() / lam
        else:
            residual = math.inf
        flips.append(m_new.legs != m.legs)
        m_new = m_new.scale(1.0 / lam)
        trace.append(residual)
        m = m_new

        if mode == "eig" and frozen is None and \
                (residual < max(100.0 * tol, 1e-5) or it >= max(3, max_iter // 4)):
            frozen = (Q, P)
            freeze_it = it
        if residual < tol and it >= 2:
            converged = True
            break
        # projector re-derivation jitter puts a floor under the residual in
        # power mode; a stall freezes the projectors (eig mode) so the
        # Arnoldi refinement can take over, or ends a power run — after a
        # grace period that lets the refinement act on the frozen map
        if it >= 30 and min(trace[-15:]) > 0.97 * min(trace[:-15]):
            if mode == "eig" and frozen is None:
                frozen = (Q, P)
                freeze_it = it
            elif mode == "power" or it - freeze_it >= 10:
                break

    # the per-site eigenvalue: growth factor of one more exact row application
    big = step(m)
    bra_big = conjugate(big)
    eta_big, _, _ = _leading_eig(
        lambda r: _transfer_left(r, big, bra_big),
        rho_warm if rho_warm is not None and rho_warm.legs[0].space == big.legs[0].space
        else identity_tensor(big.legs[0].space))
    eta_m, rho_left = _own_transfer_eig(m)
    lam_site = math.sqrt(max(eta_big.real, 0.0) / eta_m)
    bra_m = conjugate(m)
    _, rho_right, _ = _leading_eig(
        lambda r: _transfer_right(r, m, bra_m),
        identity_tensor(m.legs[0].space).transpose((1, 0)))

    if not converged:
        warnings.warn(f"{side} boundary residual {residual:.3e} did not reach "
                      f"tol={tol:g} after {iterations} iterations; raise max_iter "
                      "or chi")
    monotone = _monotone_tail(trace)
    if degeneracy_check and converged:
        _check_nondegenerate(m, seed + 23, side)

    return BoundaryFixedPoint(tensor=m, side=side, phi=phi, bond_angle=bond_angle,
                              eigenvalue=float(lam_site), residual=float(residual),
                              converged=converged, iterations=iterations,
                              residual_trace=tuple(trace), monotone_tail=monotone,
                              rho_left=_hermitize(rho_left),
                              rho_right=_hermitize(rho_right))


def _arnoldi_refine(step: Callable[[SymTensor], SymTensor], Q: SymTensor,
                    P: SymTensor, m: SymTensor, tol: float,
                    seed: int) -> SymTensor | None:
    """One Arnoldi solve of the frozen-projector row map; None if unavailable."""
    from scipy.sparse.linalg import ArpackError, ArpackNoConvergence, LinearOperator, eigs

    template = m
    n = sum(int(np.prod(tuple(b.shape))) for b in template.blocks.values())
    if n < 8:
        return None

    def mv(x: np.ndarray) -> np.ndarray:
        mx = unpack(x, template)
        out = contract(contract(Q, step(mx), [(1, 0)]), P, [(2, 0)])
        return _pack_like(out, template)

    try:
        _, vecs = eigs(LinearOperator((n, n), matvec=mv, dtype=np.complex128),
                       k=1, which="LM", v0=pack(template), maxiter=3000,
                       tol=min(1e-10, tol * 1e-2))
    except (ArpackNoConvergence, ArpackError):  # pragma: no cover
        return None
    return unpack(np.ascontiguousarray(vecs[:, 0]), template)


# ---------------------------------------------------------------------------
# channels between the two boundaries
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ChannelEnvironment:
    """Semi-infinite left/right environments of a between-boundary channel.

    ``left`` carries one all-out leg per channel row slot (top bond, one
    fused physical slot per bulk row, bottom bond), ``right`` the all-in
    mirror; ``eigenvalue`` is the channel's per-column transfer eigenvalue.
    """

    rows: int
    left: SymTensor
    right: SymTensor
    eigenvalue: complex


def _apply_channel1_left(fl: SymTensor, top: SymTensor, mid: SymTensor,
                         bot: SymTensor) -> SymTensor:
    t = contract(fl, top, [(0, 0)])            # (W, Bb, p, brT)
    t = contract(t, mid, [(0, 0), (2, 1)])     # (Bb, brT, R, D)
    return contract(t, bot, [(0, 0), (3, 1)])  # (brT, R, brN)


def _apply_channel1_right(fr: SymTensor, top: SymTensor, mid: SymTensor,
                          bot: SymTensor) -> SymTensor:
    t = contract(top, fr, [(2, 0)])            # (bl, p, W, Bb)
    t = contract(t, mid, [(1, 1), (2, 2)])     # (bl, Bb, L, D)
    return contract(t, bot, [(3, 1), (1, 2)])  # (bl, L, blN)


def _apply_channel2_left(fl: SymTensor, top: SymTensor, up: SymTensor,
                         low: SymTensor, bot: SymTensor) -> SymTensor:
    t = contract(fl, top, [(0, 0)])            # (Wu, Wl, Bb, p, brT)
    t = contract(t, up, [(0, 0), (3, 1)])      # (Wl, Bb, brT, Ru, Du)
    t = contract(t, low, [(0, 0), (4, 1)])     # (Bb, brT, Ru, Rl, Dl)
    return contract(t, bot, [(0, 0), (4, 1)])  # (brT, Ru, Rl, brN)


def _apply_channel2_right(fr: SymTensor, top: SymTensor, up: SymTensor,
                          low: SymTensor, bot: SymTensor) -> SymTensor:
    t = contract(top, fr, [(2, 0)])            # (bl, p, Wu, Wl, Bb)
    t = contract(t, up, [(1, 1), (2, 2)])      # (bl, Wl, Bb, Lu, Du)
    t = contract(t, low, [(1, 2), (4, 1)])     # (bl, Bb, Lu, Ll, Dl)
    return contract(t, bot, [(1, 2), (4, 1)])  # (bl, Lu, Ll, blN)


def _apply_overlap(v: SymTensor, top: SymTensor, bot: SymTensor) -> SymTensor:
    t = contract(v, top, [(0, 0)])             # (Bb, p, brT)
    return contract(t, bot, [(0, 0), (1, 1)])  # (brT, brN)


def _dot_all(x: SymTensor, fr: SymTensor) -> complex:
    pairs = [(i, i) for i in range(x.ndim)]
    res = contract(x, fr, pairs)
    blk = res.blocks.get(())
    return complex(blk.item()) if blk is not None else 0.0 + 0.0j


def _channel_env(rows: int, apply_left, apply_right, legs_types, seed: int
                 ) -> ChannelEnvironment:
    left0 = random_symmetric(tuple(Leg(s, OUT) for s in legs_types), seed=seed, charge=0)
    right0 = random_symmetric(tuple(Leg(s, IN) for s in legs_types), seed=seed + 1, charge=0)
    mu_l, fl, ok_l = _leading_eig(apply_left, left0)
    mu_r, fr, ok_r = _leading_eig(apply_right, right0)
    if not (ok_l and ok_r):  # pragma: no cover
        warnings.warn("channel environment power iteration hit its iteration cap")
    if abs(mu_l) == 0:
        raise ContractionError("zero leading eigenvalue in the measurement channel")
    return ChannelEnvironment(rows=rows, left=fl, right=fr, eigenvalue=mu_l)


# ---------------------------------------------------------------------------
# contracted state and observables
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ContractedState:
    """Everything needed to measure local observables of the infinite state."""

    ansatz: PepsAnsatz
    dl: DoubleLayer
    phi: FluxAngle
    chi: int
    top: BoundaryFixedPoint
    bottom: BoundaryFixedPoint
    row1: ChannelEnvironment
    row2: ChannelEnvironment
    overlap_eigenvalue: complex
    norm_per_site: float

    @property
    def converged(self) -> bool:
        return self.top.converged and self.bottom.converged


def contract_state(ansatz: PepsAnsatz, chi: int, *, tol: float = 1e-9,
                   max_iter: int = 200, seed: int = 7, mode: str = "eig",
                   charge_cap: int | None = None,
                   degeneracy_check: bool = True) -> ContractedState:
    """Contract a one-site-cell ansatz: boundaries plus measurement channels.

    The flux enters only through ``ansatz.flux`` — no gauge pattern is
    consulted here, which is the whole point: two gauge-equivalent flux
    patterns share one contraction.
    """
    ref = ansatz.site(0, 0)
    for row in ansatz.cell:
        for t in row:
            same = (t.blocks.keys() == ref.blocks.keys()
                    and all(torch.equal(t.blocks[k], ref.blocks[k])
                            for k in ref.blocks))
            if not same:
                raise ContractionError(
                    "the boundary contraction engine handles uniform states "
                    "(all unit-cell tensors identical); genuinely multi-site "
                    "cells are not supported — measure on finite patches "
                    "instead")
    dl = double_layer(ref)
    phi = ansatz.flux
    top = boundary_fixed_point(dl, phi, chi, side="top", tol=tol,
                               max_iter=max_iter, seed=seed, mode=mode,
                               charge_cap=charge_cap,
                               degeneracy_check=degeneracy_check)
    bottom = boundary_fixed_point(dl, phi, chi, side="bottom", tol=tol,
                                  max_iter=max_iter, seed=seed + 1, mode=mode,
                                  charge_cap=charge_cap,
                                  degeneracy_check=degeneracy_check)

    a = dl.tensor
    w = dl.fused_space
    topd = top.decorated(1)
    topd2 = top.decorated(2)
    botd = bottom.decorated(1)
    up_flux = flux_op(w, top.bond_angle)
    a_up = apply_op(up_flux, a, 2) if not top.bond_angle.is_zero() else a

    row1 = _channel_env(
        1,
        lambda x: _apply_channel1_left(x, topd, a, botd),
        lambda x: _apply_channel1_right(x, topd, a, botd),
        (top.bond_space, w, bottom.bond_space),
        seed + 101)
    row2 = _channel_env(
        2,
        lambda x: _apply_channel2_left(x, topd2, a_up, a, botd),
        lambda x: _apply_channel2_right(x, topd2, a_up, a, botd),
        (top.bond_space, w, w, bottom.bond_space),
        seed + 202)

    ov0 = random_symmetric((Leg(top.bond_space, OUT), Leg(bottom.bond_space, OUT)),
                           seed=seed + 303, charge=0)
    nu, _, _ = _leading_eig(lambda x: _apply_overlap(x, topd, bottom.tensor), ov0)
    if abs(nu) == 0:
        raise ContractionError("zero overlap between the two boundary fixed points")
    norm_per_site = float((row1.eigenvalue / nu).real)

    return ContractedState(ansatz=ansatz, dl=dl, phi=phi, chi=chi, top=top,
                           bottom=bottom, row1=row1, row2=row2,
                           overlap_eigenvalue=complex(nu),
                           norm_per_site=norm_per_site)


def _require_converged(state: ContractedState) -> None:
    if not state.converged:
        raise ContractionError("boundary fixed points are not converged; "
                               "raise max_iter or chi before measuring")


def expectation_site(state: ContractedState, op: SymTensor) -> complex:
    """Normalized one-site expectation value, independent of the site chosen."""
    _require_converged(state)
    topd = state.top.decorated(1)
    botd = state.bottom.decorated(1)
    fl, fr = state.row1.left, state.row1.right
    num = _dot_all(_apply_channel1_left(fl, topd, state.dl.with_op(op), botd), fr)
    den = _dot_all(_apply_channel1_left(fl, topd, state.dl.tensor, botd), fr)
    if den == 0:
        raise ContractionError("zero norm in the one-row measurement channel")
    return num / den


def expectation_bond(state: ContractedState, op: SymTensor,
                     orientation: str = "x") -> complex:
    """Normalized nearest-neighbour bond expectation at the reference bond.

    ``op`` has legs (i out, i in, j out, j in); for ``orientation="x"`` the
    i site is the left one, for ``"y"`` it is the lower one.  The charged
    halves of the operator travel through the channel as separate charged
    columns, so only the reference bond at column x = 0 is phase-free —
    exactly where this measures.
    """
    _require_converged(state)
    if orientation not in ("x", "y"):
        raise ContractionError(f"unknown bond orientation {orientation!r}")
    terms = bond_product_terms(op)
    dl = state.dl
    if orientation == "x":
        topd = state.top.decorated(1)
        botd = state.bottom.decorated(1)
        fl, fr = state.row1.left, state.row1.right

        def two_cols(left_op: SymTensor | None, right_op: SymTensor | None) -> complex:
            t = _apply_channel1_left(fl, topd, dl.with_op(left_op), botd)
            t = _apply_channel1_left(t, topd, dl.with_op(right_op), botd)
            return _dot_all(t, fr)

        den = two_cols(None, None)
        if den == 0:
            raise ContractionError("zero norm in the one-row measurement channel")
        num = sum(two_cols(p, q) for p, q in terms)
        return num / den

    topd2 = state.top.decorated(2)
    botd = state.bottom.decorated(1)
    w = dl.fused_space
    up_flux = flux_op(w, state.top.bond_angle)

    def upper(op_q: SymTensor | None) -> SymTensor:
        t = dl.with_op(op_q)
        return apply_op(up_flux, t, 2) if not state.top.bond_angle.is_zero() else t

    fl, fr = state.row2.left, state.row2.right

    def one_col(op_p: SymTensor | None, op_q: SymTensor | None) -> complex:
        t = _apply_channel2_left(fl, topd2, upper(op_q), dl.with_op(op_p), botd)
        return _dot_all(t, fr)

    den = one_col(None, None)
    if den == 0:
        raise ContractionError("zero norm in the two-row measurement channel")
    num = sum(one_col(p, q) for p, q in terms)
    return num / den


def energy_density(ansatz: PepsAnsatz, params: ModelParams, chi: int,
                   tol: float = 1e-9, *, state: ContractedState | None = None,
                   **kwargs) -> float:
    """Energy per site of the infinite state: on-site term plus both bonds.

    Both hopping bonds are measured at the reference column where the link
    phase is one, so the bond Hamiltonian enters with no Peierls phase —
    the flux acts entirely through the boundary bond insertions.  A
    pre-built ``state`` may be passed to reuse its boundaries.
    """
    if not angles_close(params.flux, ansatz.flux, tol=1e-12):
        raise ContractionError("params.flux does not match the ansatz flux")
    if params.n_max + 1 != ansatz.physical_space.dim:
        raise ContractionError("params.n_max does not match the ansatz physical space")
    if state is None:
        state = contract_state(ansatz, chi, tol=tol, **kwargs)
    h_site = onsite_hamiltonian(params)
    h_bond = bond_hamiltonian(params, FluxAngle.rational(0, 1))
    total = expectation_site(state, h_site)
    total += expectation_bond(state, h_bond, "x")
    total += expectation_bond(state, h_bond, "y")
    # the imaginary part of the Hermitian-observable sum measures the
    # finite-chi environment error; flag it only once it stops being small
    if abs(total.imag) > 1e-5 * max(1.0, abs(total.real)):
        warnings.warn(f"discarding imaginary part {total.imag:.3e} of the energy "
                      "density; raise chi")
    return float(total.real)
