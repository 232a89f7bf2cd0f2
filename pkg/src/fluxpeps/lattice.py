"""Bosons on the square lattice in a uniform magnetic field.

The Hamiltonian is

    H = -t * sum_<ij> ( exp(i phi_ij) b_i^dag b_j  +  h.c. )
        + (U/2) * sum_i n_i (n_i - 1)

with one flux quantum fraction ``phi`` per plaquette: the oriented sum of
bond phases around every elementary square (bottom + right - top - left,
counterclockwise) equals ``phi`` in any gauge.

Sites are labelled ``(x, y)`` with ``x`` the column and ``y`` the row;
``right = (+1, 0)`` and ``up = (0, +1)``.  Two Landau-type gauges are
provided:

* ``landau_x``: the upward bond at column x carries phase ``x * phi``,
  horizontal bonds carry none;
* ``landau_y``: the rightward bond at row y carries ``-y * phi``, vertical
  bonds carry none.

On an ``Lx x Ly`` torus the wrapping bonds acquire the extra twist required
so that *every* plaquette, including the seam ones, encloses ``phi``; this
is consistent only when ``Lx * Ly * phi`` is a multiple of 2*pi.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from typing import Callable, Iterator

import numpy as np

from .symtensor import (
    IN, OUT, FluxAngle, Leg, SymTensor, SymTensorError, Truncation, U1Space,
    contract, factorize, identity_tensor, make_space,
)

Site = tuple[int, int]


class LatticeError(ValueError):
    """Invalid lattice geometry or gauge data."""


class GaugeChoice(str, Enum):
    LANDAU_X = "landau_x"
    LANDAU_Y = "landau_y"


@dataclass(frozen=True)
class ModelParams:
    """Couplings of the lattice model.

    ``flux`` is the plaquette flux as a :class:`FluxAngle`; ``density`` is
    the fixed particle number per site targeted by the symmetric ansatz.
    """

    t: float = 1.0
    U: float = 20.0
    flux: FluxAngle = FluxAngle.rational(0, 1)
    n_max: int = 2
    density: int = 1

    def __post_init__(self):
        if self.n_max < 1:
            raise LatticeError("n_max must be at least 1")
        if not (0 <= self.density <= self.n_max):
            raise LatticeError("density must lie within the local occupation cutoff")
        object.__setattr__(self, "flux", FluxAngle.coerce(self.flux))


# ---------------------------------------------------------------------------
# bond enumeration
# ---------------------------------------------------------------------------


def patch_bonds(lx: int, ly: int) -> Iterator[tuple[Site, Site, tuple[int, int]]]:
    """Directed nearest-neighbour bonds of an open lx x ly patch.

    Yields ``(src, dst, step)``, each bond once, rightward or upward.
    """
    for y in range(ly):
        for x in range(lx):
            if x + 1 < lx:
                yield (x, y), (x + 1, y), (1, 0)
            if y + 1 < ly:
                yield (x, y), (x, y + 1), (0, 1)


def torus_bonds(lx: int, ly: int) -> Iterator[tuple[Site, Site, tuple[int, int]]]:
    """Directed bonds of an lx x ly torus (rightward and upward, with wraps).

    Yields ``(src, dst, step)``; the step disambiguates seam bonds on small
    tori where two distinct bonds join the same site pair.
    """
    if lx < 2 or ly < 2:
        raise LatticeError("torus needs at least 2 sites per direction")
    for y in range(ly):
        for x in range(lx):
            yield (x, y), ((x + 1) % lx, y), (1, 0)
            yield (x, y), (x, (y + 1) % ly), (0, 1)


def torus_flux_consistent(lx: int, ly: int, flux: FluxAngle, tol: float = 1e-9) -> bool:
    """Whether lx*ly*flux is a multiple of 2*pi (seam plaquettes well defined)."""
    total = flux * (lx * ly)
    if total.frac is not None:
        return total.frac == 0
    r = total.rad % (2 * math.pi)
    return min(r, 2 * math.pi - r) < tol


def peierls_phase(gauge: GaugeChoice, flux: FluxAngle, src: Site, dst: Site,
                  torus: tuple[int, int] | None = None,
                  step: tuple[int, int] | None = None) -> FluxAngle:
    """Phase phi_ij on the directed bond src -> dst.

    ``torus=(Lx, Ly)`` treats coordinates periodically and adds the seam
    twist on wrapping bonds.  Reversing a bond negates its phase.  ``step``
    (the unit displacement actually walked) disambiguates seam bonds on
    width-2 tori; if omitted it is inferred, preferring the positive
    direction.
    """
    gauge = GaugeChoice(gauge)
    flux = FluxAngle.coerce(flux)
    (x1, y1), (x2, y2) = src, dst
    if step is None:
        if torus is None:
            step = (x2 - x1, y2 - y1)
        else:
            lx, ly = torus
            dxm, dym = (x2 - x1) % lx, (y2 - y1) % ly
            if (dxm, dym) == (1, 0):
                step = (1, 0)
            elif (dxm, dym) == (0, 1):
                step = (0, 1)
            elif (dxm, dym) == (lx - 1, 0):
                step = (-1, 0)
            elif (dxm, dym) == (0, ly - 1):
                step = (0, -1)
            else:
                raise LatticeError(f"{src} -> {dst} is not a nearest-neighbour bond")
    dx, dy = step
    if (abs(dx), abs(dy)) not in ((1, 0), (0, 1)):
        raise LatticeError(f"step {step} is not a unit displacement")

    if dx == -1 or dy == -1:
        return -peierls_phase(gauge, flux, dst, src, torus, (-dx, -dy))

    if torus is None:
        if (x1 + dx, y1 + dy) != (x2, y2):
            raise LatticeError(f"{src} -> {dst} does not match step {step}")
        lx = ly = 0
        x_wrap = y_wrap = False
    else:
        lx, ly = torus
        if ((x1 + dx) % lx, (y1 + dy) % ly) != (x2 % lx, y2 % ly):
            raise LatticeError(f"{src} -> {dst} does not match step {step} on the torus")
        x_wrap = not (0 <= x1 + dx < lx)
        y_wrap = not (0 <= y1 + dy < ly)

    if gauge is GaugeChoice.LANDAU_X:
        if dy == 1:                       # upward: x * phi
            return flux * x1
        # rightward: 0, except the seam bond which carries the accumulated
        # column twist so the seam plaquettes also enclose phi
        return flux * (-lx * y1) if x_wrap else FluxAngle.rational(0, 1)
    else:
        if dx == 1:                       # rightward: -y * phi
            return flux * (-y1)
        return flux * (ly * x1) if y_wrap else FluxAngle.rational(0, 1)


def plaquette_flux(gauge: GaugeChoice, flux: FluxAngle, corner: Site,
                   torus: tuple[int, int] | None = None) -> FluxAngle:
    """Oriented phase sum around the unit square with lower-left ``corner``."""
    x, y = corner
    if torus is not None:
        lx, ly = torus
        s00, s10 = (x % lx, y % ly), ((x + 1) % lx, y % ly)
        s11, s01 = ((x + 1) % lx, (y + 1) % ly), (x % lx, (y + 1) % ly)
    else:
        s00, s10, s11, s01 = (x, y), (x + 1, y), (x + 1, y + 1), (x, y + 1)
    p = peierls_phase(gauge, flux, s00, s10, torus, (1, 0))
    p = p + peierls_phase(gauge, flux, s10, s11, torus, (0, 1))
    p = p + peierls_phase(gauge, flux, s11, s01, torus, (-1, 0))
    p = p + peierls_phase(gauge, flux, s01, s00, torus, (0, -1))
    return p


def gauge_transform_phases(gauge_from: GaugeChoice, gauge_to: GaugeChoice,
                           flux: FluxAngle) -> Callable[[int, int], FluxAngle]:
    """Site phase function chi with phi_to(i->j) = phi_from(i->j) + chi_i - chi_j.

    The returned ``chi(x, y)`` generates the diagonal unitary
    ``V = prod_i exp(i chi_i n_i)`` conjugating the Hamiltonian written in
    ``gauge_from`` into the one written in ``gauge_to``; it also maps the
    torus seam phases correctly whenever the torus flux condition holds.
    """
    gauge_from = GaugeChoice(gauge_from)
    gauge_to = GaugeChoice(gauge_to)
    flux = FluxAngle.coerce(flux)
    zero = FluxAngle.rational(0, 1)
    if gauge_from == gauge_to:
        return lambda x, y: zero
    if (gauge_from, gauge_to) == (GaugeChoice.LANDAU_Y, GaugeChoice.LANDAU_X):
        return lambda x, y: flux * (-x * y)
    return lambda x, y: flux * (x * y)


# ---------------------------------------------------------------------------
# local operators
# ---------------------------------------------------------------------------


def boson_space(n_max: int) -> U1Space:
    """Occupation space {|0>, ..., |n_max>} graded by particle number."""
    return make_space([(n, 1) for n in range(n_max + 1)])


@dataclass(frozen=True)
class LocalOps:
    """Single-site operators on the truncated boson space.

    All are 2-leg tensors with legs (OUT, IN); ``b_dag`` carries charge +1
    and ``b`` charge -1, so inserting them keeps network-level charge
    bookkeeping exact.
    """

    space: U1Space
    eye: SymTensor
    b: SymTensor
    b_dag: SymTensor
    num: SymTensor
    interaction: SymTensor  # n (n - 1)


def local_ops(n_max: int) -> LocalOps:
    sp = boson_space(n_max)
    legs = (Leg(sp, OUT), Leg(sp, IN))
    bdag = {(n + 1, n): [[math.sqrt(n + 1)]] for n in range(n_max)}
    b = {(n, n + 1): [[math.sqrt(n + 1)]] for n in range(n_max)}
    num = {(n, n): [[float(n)]] for n in range(1, n_max + 1)}
    inter = {(n, n): [[float(n * (n - 1))]] for n in range(2, n_max + 1)}
    return LocalOps(
        space=sp,
        eye=identity_tensor(sp),
        b=SymTensor(legs, b, charge=-1),
        b_dag=SymTensor(legs, bdag, charge=+1),
        num=SymTensor(legs, num, charge=0),
        interaction=SymTensor(legs, inter, charge=0),
    )


def onsite_hamiltonian(params: ModelParams) -> SymTensor:
    """(U/2) n (n-1) on one site, legs (OUT, IN)."""
    ops = local_ops(params.n_max)
    return ops.interaction.scale(params.U / 2.0)


def bond_hamiltonian(params: ModelParams, phase: FluxAngle) -> SymTensor:
    """Hopping term on one directed bond i -> j with Peierls phase ``phase``:

        h_ij = -t ( exp(i phase) b_i^dag b_j + exp(-i phase) b_i b_j^dag )

    Legs are (i OUT, i IN, j OUT, j IN); as a matrix from (i IN, j IN) to
    (i OUT, j OUT) it is Hermitian.
    """
    phase = FluxAngle.coerce(phase)
    ops = local_ops(params.n_max)
    fwd = contract(ops.b_dag, ops.b, [])      # legs (i O, i I, j O, j I)
    bwd = contract(ops.b, ops.b_dag, [])
    c = -params.t * phase.phase(1)
    return fwd.scale(c).add(bwd, alpha=np.conj(c))


def bond_product_terms(op: SymTensor, tol: float = 1e-12
                       ) -> list[tuple[SymTensor, SymTensor]]:
    """Exact expansion of a two-site operator into single-site products.

    ``op`` has legs (i OUT, i IN, j OUT, j IN); the result is a list of
    2-leg pairs ``(p_k, q_k)`` — generally carrying opposite charge — with
    ``op = sum_k p_k (x) q_k``.  The expansion is the charge-resolved
    singular decomposition across the i|j cut, so its length is the operator
    Schmidt rank (2 for a hopping term; 1 for a product).  Singular values
    below ``tol`` relative to the largest are dropped.
    """
    if op.ndim != 4:
        raise LatticeError("two-site operator must have exactly four legs")
    U, S, V, _ = factorize(op, [0, 1], [2, 3], Truncation(tol=tol))
    US = contract(U, S, [(2, 0)])   # legs (i OUT, i IN, bond OUT)
    terms: list[tuple[SymTensor, SymTensor]] = []
    for qb, db in US.legs[2].space.sectors:
        for k in range(db):
            left = {key[:2]: blk[:, :, k].clone()
                    for key, blk in US.blocks.items() if key[2] == qb}
            right = {key[1:]: blk[k, :, :].clone()
                     for key, blk in V.blocks.items() if key[0] == qb}
            if not left or not right:
                continue
            p = SymTensor(op.legs[:2], left, -qb)
            q = SymTensor(op.legs[2:], right, qb + op.charge)
            terms.append((p, q))
    return terms
