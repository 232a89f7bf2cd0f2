"""Block-sparse tensors with an abelian U(1) charge grading.

A tensor leg carries a charge-graded vector space and a direction.  Outgoing
legs count their charge positively, incoming legs negatively, and a stored
block with sector charges ``(q_1, ..., q_r)`` must satisfy

    sum_i  direction_i * q_i  ==  tensor.charge

so only charge-conserving (or uniformly charge-shifting, for operators such
as a boson creator) entries are ever materialised.  Blocks are dense
``torch`` arrays of dtype complex128; all structural bookkeeping (sector
matching, fusion offsets, truncation) lives at the Python level.

Conventions used throughout the package:

* directions are ``OUT = +1`` and ``IN = -1``;
* sectors of a space are kept sorted by ascending charge, and the dense
  layout produced by :func:`densify` concatenates sectors in that order;
* contraction pairs an OUT leg of one tensor with an IN leg of the other
  over the identical space.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from fractions import Fraction
from math import pi
from typing import Callable, Iterable, Literal, Sequence

import numpy as np
import torch

OUT: int = +1
IN: int = -1

_CPLX = torch.complex128


class SymTensorError(ValueError):
    """Structural violation: mismatched spaces, directions, or charges."""


# ---------------------------------------------------------------------------
# spaces and legs
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class U1Space:
    """Charge-graded vector space: ordered sectors ``(charge, degeneracy)``."""

    sectors: tuple[tuple[int, int], ...]

    def __post_init__(self):
        if not self.sectors:
            raise SymTensorError("space needs at least one sector")
        qs = [q for q, _ in self.sectors]
        if sorted(qs) != qs or len(set(qs)) != len(qs):
            raise SymTensorError(f"sectors must be sorted by unique charge, got {qs}")
        for q, d in self.sectors:
            if d <= 0:
                raise SymTensorError(f"degeneracy of sector {q} must be positive, got {d}")

    @property
    def dim(self) -> int:
        return sum(d for _, d in self.sectors)

    @property
    def charges(self) -> tuple[int, ...]:
        return tuple(q for q, _ in self.sectors)

    def degeneracy(self, q: int) -> int:
        for qq, d in self.sectors:
            if qq == q:
                return d
        return 0

    def offset(self, q: int) -> int:
        """Start position of sector ``q`` in the dense (charge-ascending) layout."""
        off = 0
        for qq, d in self.sectors:
            if qq == q:
                return off
            off += d
        raise SymTensorError(f"charge {q} not in space {self.sectors}")

    @property
    def dual(self) -> "U1Space":
        """Space with all charges negated (sector order re-sorted)."""
        return U1Space(tuple(sorted((-q, d) for q, d in self.sectors)))

    def is_charge_symmetric(self) -> bool:
        return self == self.dual


def make_space(sectors: Iterable[tuple[int, int]]) -> U1Space:
    """Build a :class:`U1Space` from ``(charge, degeneracy)`` pairs.

    Pairs may be given in any order; duplicates are an error.
    """
    return U1Space(tuple(sorted((int(q), int(d)) for q, d in sectors)))


@dataclass(frozen=True)
class Leg:
    """A tensor leg: a graded space plus a direction (OUT=+1, IN=-1)."""

    space: U1Space
    direction: int

    def __post_init__(self):
        if self.direction not in (OUT, IN):
            raise SymTensorError(f"direction must be +1 (out) or -1 (in), got {self.direction}")

    @property
    def flipped(self) -> "Leg":
        """Same leg seen with reversed direction over the dual space."""
        return Leg(self.space.dual, -self.direction)


LegSignature = tuple[Leg, ...]


# ---------------------------------------------------------------------------
# the tensor
# ---------------------------------------------------------------------------


def _as_block(arr) -> torch.Tensor:
    if isinstance(arr, torch.Tensor):
        return arr.to(_CPLX)
    return torch.as_tensor(np.asarray(arr), dtype=_CPLX)


class SymTensor:
    """Charge-graded block-sparse tensor.

    Parameters
    ----------
    legs:
        Leg signature. Order matters; contraction and densify follow it.
    blocks:
        Mapping ``charge key -> dense block``; key ``k`` gives the sector
        charge of each leg, and block shapes must match the sector
        degeneracies.  Keys violating the charge rule are rejected.
    charge:
        Total charge. 0 for symmetric tensors; a charge-shifting operator
        (e.g. a boson creator acting on the physical leg) carries +-1.

    Blocks are treated as immutable once stored: operations always build new
    tensors.  Zero blocks are simply absent.
    """

    __slots__ = ("legs", "blocks", "charge")

    def __init__(self, legs: Sequence[Leg], blocks: dict[tuple[int, ...], torch.Tensor],
                 charge: int = 0, validate: bool = True):
        self.legs: LegSignature = tuple(legs)
        self.charge = int(charge)
        self.blocks: dict[tuple[int, ...], torch.Tensor] = {}
        for key, arr in blocks.items():
            key = tuple(int(q) for q in key)
            t = _as_block(arr)
            if validate:
                self._check_key(key, t)
            self.blocks[key] = t

    def _check_key(self, key: tuple[int, ...], block: torch.Tensor):
        if len(key) != len(self.legs):
            raise SymTensorError(f"key {key} has {len(key)} charges for {len(self.legs)} legs")
        tot = sum(l.direction * q for l, q in zip(self.legs, key))
        if tot != self.charge:
            raise SymTensorError(f"key {key} sums to charge {tot}, tensor charge is {self.charge}")
        shape = tuple(l.space.degeneracy(q) for l, q in zip(self.legs, key))
        if 0 in shape:
            raise SymTensorError(f"key {key} uses a charge absent from a leg space")
        if tuple(block.shape) != shape:
            raise SymTensorError(f"block {key} has shape {tuple(block.shape)}, expected {shape}")

    # -- basic structure ----------------------------------------------------

    @property
    def ndim(self) -> int:
        return len(self.legs)

    def copy(self) -> "SymTensor":
        return SymTensor(self.legs, {k: b.clone() for k, b in self.blocks.items()},
                         self.charge, validate=False)

    def detach(self) -> "SymTensor":
        return SymTensor(self.legs, {k: b.detach() for k, b in self.blocks.items()},
                         self.charge, validate=False)

    def sorted_keys(self) -> list[tuple[int, ...]]:
        return sorted(self.blocks.keys())

    def norm(self) -> float:
        if not self.blocks:
            return 0.0
        return float(torch.sqrt(sum(torch.sum(torch.abs(b) ** 2) for b in self.blocks.values())).real)

    def norm_t(self) -> torch.Tensor:
        """Frobenius norm as a differentiable real scalar tensor."""
        if not self.blocks:
            return torch.zeros((), dtype=torch.float64)
        return torch.sqrt(sum(torch.sum(torch.abs(b) ** 2) for b in self.blocks.values()))

    def max_abs(self) -> float:
        if not self.blocks:
            return 0.0
        return max(float(torch.max(torch.abs(b))) for b in self.blocks.values())

    def transpose(self, perm: Sequence[int]) -> "SymTensor":
        perm = tuple(perm)
        if sorted(perm) != list(range(self.ndim)):
            raise SymTensorError(f"bad permutation {perm}")
        legs = tuple(self.legs[p] for p in perm)
        blocks = {tuple(k[p] for p in perm): b.permute(perm) for k, b in self.blocks.items()}
        return SymTensor(legs, blocks, self.charge, validate=False)

    def flip_leg(self, axis: int) -> "SymTensor":
        """Reinterpret one leg with reversed direction over the dual space.

        A pure relabelling: the negated sector charge on that axis keeps the
        signed charge sum unchanged, and block data is untouched.
        """
        legs = list(self.legs)
        legs[axis] = legs[axis].flipped
        blocks = {}
        for k, b in self.blocks.items():
            kk = list(k)
            kk[axis] = -kk[axis]
            blocks[tuple(kk)] = b
        return SymTensor(tuple(legs), blocks, self.charge, validate=False)

    def scale(self, c) -> "SymTensor":
        return SymTensor(self.legs, {k: b * c for k, b in self.blocks.items()},
                         self.charge, validate=False)

    def add(self, other: "SymTensor", alpha=1.0) -> "SymTensor":
        """Return ``self + alpha * other`` (same signature and charge required)."""
        if self.legs != other.legs or self.charge != other.charge:
            raise SymTensorError("can only add tensors with identical signature and charge")
        blocks = dict(self.blocks)
        for k, b in other.blocks.items():
            blocks[k] = blocks[k] + alpha * b if k in blocks else alpha * b
        return SymTensor(self.legs, blocks, self.charge, validate=False)

    def prune(self, tol: float = 0.0) -> "SymTensor":
        """Drop blocks whose max entry magnitude is <= tol."""
        blocks = {k: b for k, b in self.blocks.items() if float(torch.max(torch.abs(b))) > tol}
        return SymTensor(self.legs, blocks, self.charge, validate=False)

    def __repr__(self):
        dims = "x".join(str(l.space.dim) for l in self.legs)
        return f"SymTensor({dims}, {len(self.blocks)} blocks, charge={self.charge})"


# ---------------------------------------------------------------------------
# construction helpers
# ---------------------------------------------------------------------------


def random_symmetric(legs: Sequence[Leg], seed: int, charge: int = 0,
                     scale: float = 1.0) -> SymTensor:
    """Random tensor with every allowed block filled.

    Entries have independent standard-normal real and imaginary parts.  The
    fill order is the sorted key order, so a given seed always produces the
    same tensor.
    """
    legs = tuple(legs)
    rng = np.random.default_rng(seed)
    keys = []
    for combo in itertools.product(*(l.space.charges for l in legs)):
        if sum(l.direction * q for l, q in zip(legs, combo)) == charge:
            keys.append(combo)
    keys.sort()
    blocks = {}
    for k in keys:
        shape = tuple(l.space.degeneracy(q) for l, q in zip(legs, k))
        arr = rng.standard_normal(shape) + 1j * rng.standard_normal(shape)
        blocks[k] = torch.as_tensor(arr * scale, dtype=_CPLX)
    return SymTensor(legs, blocks, charge, validate=False)


def conjugate(t: SymTensor) -> SymTensor:
    """Complex-conjugate: blocks conjugated, every leg direction flipped.

    Keys stay as they are; flipping all directions negates the signed sum,
    so the total charge is negated.
    """
    legs = tuple(Leg(l.space, -l.direction) for l in t.legs)
    blocks = {k: torch.conj_physical(b) for k, b in t.blocks.items()}
    return SymTensor(legs, blocks, -t.charge, validate=False)


def identity_tensor(space: U1Space) -> SymTensor:
    """Identity map on a space, legs (OUT, IN)."""
    legs = (Leg(space, OUT), Leg(space, IN))
    blocks = {(q, q): torch.eye(d, dtype=_CPLX) for q, d in space.sectors}
    return SymTensor(legs, blocks, 0, validate=False)


# ---------------------------------------------------------------------------
# flux angles and the group-element tensor
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FluxAngle:
    """An angle that may carry an exact rational part in turns of 2*pi.

    ``FluxAngle.rational(n, d)`` represents ``2*pi*n/d`` exactly: phase
    factors for integer charges are computed from ``(q*n) mod d``, so the
    angle and its shift by any multiple of 2*pi produce bit-identical
    tensors.  Float radians are kept as-is and normalised to ``[0, 2*pi)``
    at machine precision only.
    """

    frac: Fraction | None
    rad: float

    @staticmethod
    def rational(num: int, den: int) -> "FluxAngle":
        if den == 0:
            raise SymTensorError("flux denominator must be nonzero")
        f = Fraction(num, den) % 1
        return FluxAngle(f, float(2 * pi * f))

    @staticmethod
    def radians(x: float) -> "FluxAngle":
        x = float(x) % (2 * pi)
        return FluxAngle(None, x)

    @staticmethod
    def coerce(x) -> "FluxAngle":
        if isinstance(x, FluxAngle):
            return x
        if isinstance(x, Fraction):
            return FluxAngle.rational(x.numerator, x.denominator)
        return FluxAngle.radians(x)

    def __mul__(self, k: int) -> "FluxAngle":
        if self.frac is not None:
            f = (self.frac * k) % 1
            return FluxAngle(f, float(2 * pi * f))
        return FluxAngle.radians(self.rad * k)

    __rmul__ = __mul__

    def __neg__(self) -> "FluxAngle":
        if self.frac is not None:
            f = (-self.frac) % 1
            return FluxAngle(f, float(2 * pi * f))
        return FluxAngle.radians(-self.rad)

    def __add__(self, other) -> "FluxAngle":
        other = FluxAngle.coerce(other)
        if self.frac is not None and other.frac is not None:
            f = (self.frac + other.frac) % 1
            return FluxAngle(f, float(2 * pi * f))
        return FluxAngle.radians(self.rad + other.rad)

    def phase(self, q: int) -> complex:
        """exp(i * q * angle), exact in the exponent for rational angles."""
        if self.frac is not None:
            f = (q * self.frac) % 1
            return complex(np.exp(2j * pi * float(f)))
        return complex(np.exp(1j * q * self.rad))

    def is_zero(self) -> bool:
        if self.frac is not None:
            return self.frac == 0
        return self.rad == 0.0


def flux_op(space: U1Space, angle) -> SymTensor:
    """Group-element tensor: diagonal phase ``exp(i*q*angle)`` per sector.

    Legs are (OUT, IN) so it composes like an operator; it is unitary and
    satisfies ``flux_op(a) . flux_op(b) = flux_op(a+b)``.
    """
    ang = FluxAngle.coerce(angle)
    legs = (Leg(space, OUT), Leg(space, IN))
    blocks = {(q, q): ang.phase(q) * torch.eye(d, dtype=_CPLX) for q, d in space.sectors}
    return SymTensor(legs, blocks, 0, validate=False)


def bond_tensor(space: U1Space) -> SymTensor:
    """Charge-pairing tensor on a link: identity blocks joining q with -q.

    Both legs point OUT; block ``(q, -q)`` is the identity on the sector.
    The space must be charge symmetric (for every q present, -q with equal
    degeneracy), otherwise the pairing cannot close.

    A group element pushed through one leg re-emerges on the other leg with
    the opposite angle: contracting ``flux_op(a)`` into leg 0 equals
    contracting ``flux_op(-a)`` into leg 1.
    """
    if not space.is_charge_symmetric():
        raise SymTensorError(f"bond tensor needs a charge-symmetric space, got {space.sectors}")
    legs = (Leg(space, OUT), Leg(space, OUT))
    blocks = {(q, -q): torch.eye(d, dtype=_CPLX) for q, d in space.sectors}
    return SymTensor(legs, blocks, 0, validate=False)


# ---------------------------------------------------------------------------
# contraction
# ---------------------------------------------------------------------------


def contract(a: SymTensor, b: SymTensor, axes: Sequence[tuple[int, int]]) -> SymTensor:
    """Contract tensor ``a`` with tensor ``b`` over the given leg pairs.

    Each pair ``(i, j)`` joins leg ``i`` of ``a`` with leg ``j`` of ``b``;
    the legs must live on the same space with opposite directions.  The
    result keeps the uncontracted legs of ``a`` (in order) followed by those
    of ``b``, and carries charge ``a.charge + b.charge``.
    """
    axes = [(int(i), int(j)) for i, j in axes]
    a_ax = [i for i, _ in axes]
    b_ax = [j for _, j in axes]
    if len(set(a_ax)) != len(a_ax) or len(set(b_ax)) != len(b_ax):
        raise SymTensorError("repeated leg in contraction")
    for i, j in axes:
        la, lb = a.legs[i], b.legs[j]
        if la.space != lb.space:
            raise SymTensorError(f"leg spaces differ on pair ({i},{j}): "
                                 f"{la.space.sectors} vs {lb.space.sectors}")
        if la.direction + lb.direction != 0:
            raise SymTensorError(f"legs on pair ({i},{j}) must have opposite directions")

    a_keep = [i for i in range(a.ndim) if i not in a_ax]
    b_keep = [j for j in range(b.ndim) if j not in b_ax]
    out_legs = tuple([a.legs[i] for i in a_keep] + [b.legs[j] for j in b_keep])

    # group b blocks by the charges on contracted legs
    b_by_sub: dict[tuple[int, ...], list[tuple[tuple[int, ...], torch.Tensor]]] = {}
    for kb, blk in b.blocks.items():
        sub = tuple(kb[j] for j in b_ax)
        b_by_sub.setdefault(sub, []).append((kb, blk))

    out: dict[tuple[int, ...], torch.Tensor] = {}
    dims = (a_ax, b_ax)
    for ka, blk_a in a.blocks.items():
        sub = tuple(ka[i] for i in a_ax)
        for kb, blk_b in b_by_sub.get(sub, ()):
            key = tuple([ka[i] for i in a_keep] + [kb[j] for j in b_keep])
            val = torch.tensordot(blk_a, blk_b, dims=dims)
            if key in out:
                out[key] = out[key] + val
            else:
                out[key] = val
    res = SymTensor(out_legs, out, a.charge + b.charge, validate=False)
    return res


def apply_op(op: SymTensor, t: SymTensor, axis: int) -> SymTensor:
    """Apply a 2-leg operator (OUT, IN) to leg ``axis`` of ``t``, keeping leg order.

    Works for an OUT leg of ``t`` by contracting it into the operator's IN
    leg; for an IN leg of ``t`` the operator is attached from the other side
    (its OUT leg is contracted), which applies the transpose map, consistent
    with inserting the operator on the link next to that leg.
    """
    if op.ndim != 2:
        raise SymTensorError("operator must have exactly two legs")
    tl = t.legs[axis]
    if tl.direction == OUT:
        res = contract(t, op, [(axis, 1)])
    else:
        res = contract(t, op, [(axis, 0)])
    # contracted leg went to the end; rotate it back into place
    perm = list(range(t.ndim - 1))
    perm.insert(axis, t.ndim - 1)
    return res.transpose(perm)


# ---------------------------------------------------------------------------
# fusing legs
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FuseInfo:
    """Bookkeeping for a two-leg fusion: the fused space and pair offsets."""

    fused: U1Space
    offsets: dict[tuple[int, int], int] = field(hash=False)


def fuse_info(s1: U1Space, s2: U1Space) -> FuseInfo:
    """Fused space of a product ``s1 (x) s2`` with deterministic pair offsets.

    Pairs ``(q1, q2)`` with the same total are laid out in lexicographic
    order inside the fused sector.
    """
    pair_dims: dict[int, list[tuple[tuple[int, int], int]]] = {}
    for q1, d1 in s1.sectors:
        for q2, d2 in s2.sectors:
            pair_dims.setdefault(q1 + q2, []).append(((q1, q2), d1 * d2))
    sectors = []
    offsets: dict[tuple[int, int], int] = {}
    for q in sorted(pair_dims):
        off = 0
        for pair, d in sorted(pair_dims[q]):
            offsets[pair] = off
            off += d
        sectors.append((q, off))
    return FuseInfo(U1Space(tuple(sectors)), offsets)


def fuser(s1: U1Space, s2: U1Space) -> tuple[SymTensor, FuseInfo]:
    """Isometric fusion tensor with legs (IN s1, IN s2, OUT fused).

    Contracting two OUT legs of a tensor into legs 0 and 1 replaces them by
    a single OUT leg on the fused space.  The conjugate tensor splits the
    fused leg again; fuse-then-split is the identity.
    """
    info = fuse_info(s1, s2)
    legs = (Leg(s1, IN), Leg(s2, IN), Leg(info.fused, OUT))
    blocks = {}
    for q1, d1 in s1.sectors:
        for q2, d2 in s2.sectors:
            q = q1 + q2
            D = info.fused.degeneracy(q)
            blk = torch.zeros((d1, d2, D), dtype=_CPLX)
            off = info.offsets[(q1, q2)]
            eye = torch.eye(d1 * d2, dtype=_CPLX).reshape(d1, d2, d1 * d2)
            blk[:, :, off:off + d1 * d2] = eye
            blocks[(q1, q2, q)] = blk
    return SymTensor(legs, blocks, 0, validate=False), info


def fuse_legs(t: SymTensor, i: int, j: int) -> tuple[SymTensor, SymTensor]:
    """Fuse legs ``i`` and ``j`` (i < j, both OUT) into one trailing OUT leg.

    Returns ``(fused_tensor, fuse_tensor)``; undo with :func:`unfuse_leg`.
    Legs that are IN must be flipped by the caller first.
    """
    if not (t.legs[i].direction == OUT and t.legs[j].direction == OUT):
        raise SymTensorError("fuse_legs expects OUT legs; flip IN legs first")
    F, _ = fuser(t.legs[i].space, t.legs[j].space)
    res = contract(t, F, [(i, 0), (j, 1)])
    return res, F


def unfuse_leg(t: SymTensor, axis: int, F: SymTensor) -> SymTensor:
    """Split a fused OUT leg back into the two legs encoded by fuse tensor F."""
    Fc = conjugate(F)  # legs (OUT s1, OUT s2, IN fused)
    res = contract(t, Fc, [(axis, 2)])
    n = res.ndim
    perm = list(range(axis)) + [n - 2, n - 1] + list(range(axis, n - 2))
    return res.transpose(perm)


# ---------------------------------------------------------------------------
# dense interface
# ---------------------------------------------------------------------------


def densify(t: SymTensor) -> np.ndarray:
    """Dense numpy array; sector data placed at charge-ascending offsets."""
    shape = tuple(l.space.dim for l in t.legs)
    out = np.zeros(shape, dtype=np.complex128)
    for k, b in t.blocks.items():
        sl = tuple(slice(l.space.offset(q), l.space.offset(q) + l.space.degeneracy(q))
                   for l, q in zip(t.legs, k))
        out[sl] = b.detach().numpy()
    return out


def from_dense(arr: np.ndarray, legs: Sequence[Leg], charge: int = 0,
               tol: float = 0.0) -> SymTensor:
    """Project a dense array onto the allowed blocks of a signature.

    Entries outside charge-conserving blocks are discarded; use
    ``densify(from_dense(a, legs)) == a`` to certify that ``a`` was
    symmetric to begin with.
    """
    legs = tuple(legs)
    blocks = {}
    for combo in itertools.product(*(l.space.charges for l in legs)):
        if sum(l.direction * q for l, q in zip(legs, combo)) != charge:
            continue
        sl = tuple(slice(l.space.offset(q), l.space.offset(q) + l.space.degeneracy(q))
                   for l, q in zip(legs, combo))
        sub = np.ascontiguousarray(arr[sl])
        if np.max(np.abs(sub)) > tol:
            blocks[combo] = torch.as_tensor(sub, dtype=_CPLX)
    return SymTensor(legs, blocks, charge, validate=False)


# ---------------------------------------------------------------------------
# factorisation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Truncation:
    """Bond truncation rule for :func:`factorize`.

    ``max_total``: cap on the summed bond dimension (None = no cap).
    ``max_per_sector``: cap per charge sector (None = no cap).
    ``tol``: discard singular values below ``tol * sigma_max``.
    ``charge_window``: drop sectors with ``|q| > charge_window`` outright.
    """

    max_total: int | None = None
    max_per_sector: int | None = None
    tol: float = 0.0
    charge_window: int | None = None


def _select_singulars(per_sector: dict[int, torch.Tensor], rule: Truncation
                      ) -> tuple[dict[int, int], float, float]:
    """Pick kept counts per sector under a truncation rule.

    Candidates are ranked by singular value, descending.  Exact ties are
    broken toward the smaller ``|charge|``, then the smaller charge, so runs
    are reproducible.  Returns (kept counts, discarded weight, total weight).
    """
    entries = []  # (sigma, |q|, q, index within sector)
    for q, s in per_sector.items():
        if rule.charge_window is not None and abs(q) > rule.charge_window:
            continue
        svals = s.detach().numpy()
        for i, sv in enumerate(svals):
            entries.append((float(sv), abs(q), q, i))
    entries.sort(key=lambda e: (-e[0], e[1], e[2], e[3]))
    total_w = sum(float(s.detach().numpy() @ s.detach().numpy()) for s in per_sector.values())

    smax = entries[0][0] if entries else 0.0
    kept: dict[int, int] = {}
    n_kept = 0
    kept_w = 0.0
    for sv, _, q, i in entries:
        if rule.max_total is not None and n_kept >= rule.max_total:
            break
        if sv < rule.tol * smax:
            break
        if rule.max_per_sector is not None and kept.get(q, 0) >= rule.max_per_sector:
            continue
        if i != kept.get(q, 0):
            # singular values inside a sector are descending, so a skipped
            # lower index means this one was already cut by a sector cap
            continue
        kept[q] = kept.get(q, 0) + 1
        n_kept += 1
        kept_w += sv * sv
    return kept, total_w - kept_w, total_w


def factorize(t: SymTensor, row_legs: Sequence[int], col_legs: Sequence[int],
              rule: Truncation | None = None
              ) -> tuple[SymTensor, SymTensor, SymTensor, float]:
    """Charge-resolved SVD across a bipartition of legs.

    Returns ``(U, S, V, discarded)`` with ``t ~ U . S . V`` (contract the
    trailing leg of U with the first leg of S, etc.), ``U`` left-isometric
    and ``V`` right-isometric per sector, ``S`` diagonal with positive
    entries, and the new bond graded by the row-side charge.  ``discarded``
    is the truncated weight ``sum(sigma^2)`` relative to the total.
    """
    rule = rule or Truncation()
    row_legs = list(row_legs)
    col_legs = list(col_legs)
    if sorted(row_legs + col_legs) != list(range(t.ndim)):
        raise SymTensorError("row and column legs must partition the tensor legs")

    tp = t.transpose(row_legs + col_legs)
    nr = len(row_legs)
    # flip rows to IN, cols to OUT so the matrix blocks are keyed (q, q + charge)
    work = tp
    for i in range(work.ndim):
        want = IN if i < nr else OUT
        if work.legs[i].direction != want:
            work = work.flip_leg(i)

    # fuse row legs (as OUT on the flipped view) and column legs
    row_fusers: list[SymTensor] = []
    while nr > 1:
        flipped = work.flip_leg(0).flip_leg(1)
        fused, F = fuse_legs(flipped, 0, 1)
        perm = [fused.ndim - 1] + list(range(fused.ndim - 1))
        work = fused.transpose(perm).flip_leg(0)
        row_fusers.append(F)
        nr -= 1
    col_fusers: list[SymTensor] = []
    while work.ndim > 2:
        fused, F = fuse_legs(work, 1, 2)
        perm = [0, fused.ndim - 1] + list(range(1, fused.ndim - 1))
        work = fused.transpose(perm)
        col_fusers.append(F)

    # work: legs (row IN over R, col OUT over C); blocks (q, q + charge)
    mats: dict[int, torch.Tensor] = {k[0]: b for k, b in work.blocks.items()}
    svd = {q: torch.linalg.svd(m, full_matrices=False) for q, m in mats.items()}
    kept, discarded, total = _select_singulars({q: s for q, (_, s, _) in svd.items()}, rule)

    bond_sectors = tuple(sorted((q, n) for q, n in kept.items() if n > 0))
    if not bond_sectors:
        raise SymTensorError("truncation removed every singular value")
    bond = U1Space(bond_sectors)

    row_space = work.legs[0].space
    col_space = work.legs[1].space
    Ublocks, Sblocks, Vblocks = {}, {}, {}
    for q, n in kept.items():
        if n == 0:
            continue
        u, s, vh = svd[q]
        Ublocks[(q, q)] = u[:, :n]
        Sblocks[(q, q)] = torch.diag(s[:n]).to(_CPLX)
        Vblocks[(q, q + t.charge)] = vh[:n, :]
    U = SymTensor((Leg(row_space, IN), Leg(bond, OUT)), Ublocks, 0, validate=False)
    S = SymTensor((Leg(bond, IN), Leg(bond, OUT)), Sblocks, 0, validate=False)
    V = SymTensor((Leg(bond, IN), Leg(col_space, OUT)), Vblocks, t.charge, validate=False)

    # unfuse and unflip back toward the original leg layout
    for F in reversed(row_fusers):
        U = unfuse_leg(U.flip_leg(0), 0, F).flip_leg(0).flip_leg(1)
    for F in reversed(col_fusers):
        V = unfuse_leg(V, 1, F)
    # restore original row/col leg directions
    orig = t.transpose(row_legs + col_legs).legs
    for i in range(U.ndim - 1):
        if U.legs[i].direction != orig[i].direction:
            U = U.flip_leg(i)
    for i in range(1, V.ndim):
        if V.legs[i].direction != orig[len(row_legs) + i - 1].direction:
            V = V.flip_leg(i)
    rel = discarded / total if total > 0 else 0.0
    return U, S, V, rel


def qr_factorize(t: SymTensor, row_legs: Sequence[int], col_legs: Sequence[int]
                 ) -> tuple[SymTensor, SymTensor]:
    """Charge-resolved reduced QR across a bipartition (no truncation).

    Returns ``(Q, R)`` with Q left-isometric; bond graded like factorize.
    """
    row_legs = list(row_legs)
    col_legs = list(col_legs)
    U, S, V, _ = factorize(t, row_legs, col_legs)
    # QR via SVD keeps the charge bookkeeping in one place; R = S.V absorbs
    # the diagonal, Q = U.  Adequate for canonicalisation purposes.
    R = contract(S, V, [(1, 0)])
    return U, R


# ---------------------------------------------------------------------------
# packing (flat vectors for eigensolvers, optimisers, serialisation)
# ---------------------------------------------------------------------------


def pack(t: SymTensor) -> np.ndarray:
    """Flatten all blocks (sorted keys, row-major) into one complex vector."""
    keys = t.sorted_keys()
    if not keys:
        return np.zeros(0, dtype=np.complex128)
    return np.concatenate([t.blocks[k].detach().numpy().ravel() for k in keys])


def unpack(vec: np.ndarray, template: SymTensor) -> SymTensor:
    """Rebuild a tensor with the template's structure from a packed vector."""
    blocks = {}
    pos = 0
    for k in template.sorted_keys():
        shape = tuple(template.blocks[k].shape)
        n = int(np.prod(shape)) if shape else 1
        blocks[k] = torch.as_tensor(np.asarray(vec[pos:pos + n]).reshape(shape), dtype=_CPLX)
        pos += n
    if pos != len(vec):
        raise SymTensorError(f"packed vector length {len(vec)} does not match template ({pos})")
    return SymTensor(template.legs, blocks, template.charge, validate=False)


def packed_size(t: SymTensor) -> int:
    return sum(int(np.prod(tuple(b.shape))) for b in t.blocks.values())


def allclose(a: SymTensor, b: SymTensor, tol: float = 1e-12) -> bool:
    """Entrywise comparison over the union of blocks."""
    if a.legs != b.legs or a.charge != b.charge:
        return False
    keys = set(a.blocks) | set(b.blocks)
    for k in keys:
        x = a.blocks.get(k)
        y = b.blocks.get(k)
        if x is None:
            if float(torch.max(torch.abs(y))) > tol:
                return False
        elif y is None:
            if float(torch.max(torch.abs(x))) > tol:
                return False
        elif float(torch.max(torch.abs(x - y))) > tol:
            return False
    return True
