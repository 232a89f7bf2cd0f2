"""Independent reference engines: exact diagonalisation, single-particle
magnetic bands, exact contraction of small finite networks, and a dense
(symmetry-free) boundary-matrix-product contractor.

Everything here is deliberately decoupled from the variational machinery:
the number-conserving basis, matrix elements and contraction routines are
built from scratch on plain numpy arrays so they can certify the
block-sparse code paths.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Iterable, Sequence

import numpy as np
import scipy.linalg
import scipy.sparse.linalg as spla
import torch

from .lattice import (
    GaugeChoice, LatticeError, ModelParams, patch_bonds, peierls_phase,
    torus_bonds, torus_flux_consistent,
)
from .symtensor import FluxAngle, SymTensor, SymTensorError, contract, densify

try:
    import numba

    _HAVE_NUMBA = True
except Exception:  # pragma: no cover - numba is a declared dependency
    _HAVE_NUMBA = False


class OracleError(RuntimeError):
    """Reference computation could not be carried out as posed."""


class PreconditionError(ValueError):
    """Physical precondition violated (e.g. torus flux quantisation)."""


class ConvergenceError(RuntimeError):
    """An iterative reference solver failed to converge."""


# ---------------------------------------------------------------------------
# occupation basis
# ---------------------------------------------------------------------------


def _occupation_basis(n_sites: int, n_particles: int, n_max: int
                      ) -> tuple[np.ndarray, np.ndarray]:
    """All occupation vectors with the given total, and their packed codes.

    Returns ``(occ, codes)`` with ``occ`` of shape (dim, n_sites) uint8 and
    ``codes`` strictly increasing uint64 (``bits_per_site`` bits per site,
    site 0 in the lowest bits).
    """
    if n_particles < 0 or n_particles > n_sites * n_max:
        raise OracleError("particle number outside the reachable range")

    def build(sites: int, n: int) -> np.ndarray:
        if sites == 1:
            if 0 <= n <= n_max:
                return np.array([[n]], dtype=np.uint8)
            return np.zeros((0, 1), dtype=np.uint8)
        parts = []
        for k in range(min(n_max, n) + 1):
            rest = build(sites - 1, n - k)
            if rest.shape[0]:
                col = np.full((rest.shape[0], 1), k, dtype=np.uint8)
                parts.append(np.hstack([col, rest]))
        if not parts:
            return np.zeros((0, sites), dtype=np.uint8)
        return np.vstack(parts)

    occ = build(n_sites, n_particles)
    bits = max(1, int(n_max).bit_length())
    if n_sites * bits > 62:
        raise OracleError("basis coding exceeds 62 bits; lattice too large")
    weights = (np.int64(1) << (np.int64(bits) * np.arange(n_sites, dtype=np.int64)))
    codes = occ.astype(np.int64) @ weights
    order = np.argsort(codes, kind="stable")
    return np.ascontiguousarray(occ[order]), np.ascontiguousarray(codes[order])


if _HAVE_NUMBA:

    @numba.njit(cache=True)
    def _hop_matvec(v, diag, dsts, sites_i, sites_j, coeffs, occ, sqrt_tab):
        dim = v.shape[0]
        out = np.empty_like(v)
        for k in range(dim):
            out[k] = diag[k] * v[k]
        for b in range(dsts.shape[0]):
            i = sites_i[b]
            j = sites_j[b]
            c = coeffs[b]
            cc = np.conj(c)
            d = dsts[b]
            for k in range(dim):
                m = d[k]
                if m >= 0:
                    a = sqrt_tab[occ[k, j] * (occ[k, i] + 1)]
                    out[m] += c * (a * v[k])
                    out[k] += cc * (a * v[m])
        return out

else:  # pragma: no cover - plain numpy fallback

    def _hop_matvec(v, diag, dsts, sites_i, sites_j, coeffs, occ, sqrt_tab):
        out = diag * v
        for b in range(dsts.shape[0]):
            i, j = sites_i[b], sites_j[b]
            d = dsts[b]
            mask = d >= 0
            m = d[mask]
            a = sqrt_tab[occ[mask, j].astype(np.int64) * (occ[mask, i].astype(np.int64) + 1)]
            np.add.at(out, m, coeffs[b] * a * v[mask])
            np.add.at(out, np.nonzero(mask)[0], np.conj(coeffs[b]) * a * v[m])
        return out


# ---------------------------------------------------------------------------
# exact diagonalisation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class EdProblem:
    """A fixed-number sector of the lattice model on a small cluster.

    ``geometry`` is ``"torus"`` (periodic, seam twists included) or
    ``"open"``.  ``basis_cap`` bounds the sector dimension as a safety
    valve; raise it explicitly for large runs.
    """

    lx: int
    ly: int
    n_particles: int
    params: ModelParams
    gauge: GaugeChoice = GaugeChoice.LANDAU_X
    geometry: str = "torus"
    basis_cap: int = 2_000_000
    k: int = 1
    tol: float = 0.0
    ncv: int | None = None
    maxiter: int | None = None
    method: str = "auto"  # auto | dense | lanczos
    keep_vector: bool = False
    seed: int = 7

    def __post_init__(self):
        if self.geometry not in ("torus", "open"):
            raise OracleError(f"unknown geometry {self.geometry!r}")
        if self.method not in ("auto", "dense", "lanczos"):
            raise OracleError(f"unknown method {self.method!r}")
        if self.lx < 1 or self.ly < 1:
            raise OracleError("cluster sides must be positive")


@dataclass(frozen=True)
class EdResult:
    energies: np.ndarray        # ascending, length k
    dim: int
    used_dense: bool
    vector: np.ndarray | None = None
    occ: np.ndarray | None = None

    @property
    def energy(self) -> float:
        return float(self.energies[0])

    def energy_per_site(self, n_sites: int) -> float:
        return self.energy / n_sites


_DENSE_DIM_DEFAULT = 600


def _ed_bonds(pb: EdProblem) -> list[tuple[int, int, complex]]:
    """Directed bonds as flat site indices with hopping coefficients.

    Site (x, y) maps to index ``y * lx + x``.  Each returned entry
    ``(i, j, c)`` stands for the Hermitian pair
    ``c * b_i^dag b_j + conj(c) * b_j^dag b_i`` with
    ``c = -t * exp(i * phi(i -> j))``: the phase of the ordered pair (i, j)
    multiplies the operator moving a particle from j onto i.
    """
    p = pb.params
    torus = (pb.lx, pb.ly) if pb.geometry == "torus" else None
    bonds = []
    it = torus_bonds(pb.lx, pb.ly) if torus else patch_bonds(pb.lx, pb.ly)
    for src, dst, step in it:
        phase = peierls_phase(pb.gauge, p.flux, src, dst, torus, step)
        i = src[1] * pb.lx + src[0]
        j = dst[1] * pb.lx + dst[0]
        bonds.append((i, j, -p.t * phase.phase(1)))
    return bonds


def ed_ground_state(pb: EdProblem) -> EdResult:
    """Lowest eigenvalue(s) of the model in a fixed particle-number sector.

    On a torus the flux must satisfy the quantisation condition
    ``lx * ly * flux = 0 (mod 2*pi)``; otherwise the seam plaquettes cannot
    all enclose the same flux and the problem is rejected.
    """
    p = pb.params
    n_sites = pb.lx * pb.ly
    if pb.geometry == "torus" and not torus_flux_consistent(pb.lx, pb.ly, p.flux):
        raise PreconditionError(
            f"torus {pb.lx}x{pb.ly} with flux {p.flux.rad:.6f} rad violates "
            "the flux quantisation condition lx*ly*flux = 0 mod 2pi")

    occ, codes = _occupation_basis(n_sites, pb.n_particles, p.n_max)
    dim = occ.shape[0]
    if dim == 0:
        raise OracleError("empty sector")
    if dim > pb.basis_cap:
        raise OracleError(f"sector dimension {dim} exceeds basis_cap {pb.basis_cap}")

    diag = (p.U / 2.0) * np.einsum("ki,ki->k", occ.astype(np.float64),
                                   occ.astype(np.float64) - 1.0)
    bonds = _ed_bonds(pb)
    coeffs = np.array([c for _, _, c in bonds], dtype=np.complex128)
    is_real = bool(np.max(np.abs(coeffs.imag)) < 1e-14)

    bits = max(1, int(p.n_max).bit_length())
    sites_i = np.array([i for i, _, _ in bonds], dtype=np.int64)
    sites_j = np.array([j for _, j, _ in bonds], dtype=np.int64)

    # destination index per basis state per bond: move one particle j -> i
    dsts = np.full((len(bonds), dim), -1, dtype=np.int32)
    for b, (i, j, _) in enumerate(bonds):
        ok = (occ[:, j] >= 1) & (occ[:, i] < p.n_max)
        delta = (np.int64(1) << np.int64(bits * i)) - (np.int64(1) << np.int64(bits * j))
        new_codes = codes[ok] + delta
        pos = np.searchsorted(codes, new_codes)
        if not np.all(codes[pos] == new_codes):
            raise OracleError("internal basis lookup failure")
        dsts[b, ok] = pos.astype(np.int32)

    sqrt_tab = np.sqrt(np.arange(p.n_max * (p.n_max + 1) + 1, dtype=np.float64))

    method = pb.method
    if method == "auto":
        method = "dense" if dim <= _DENSE_DIM_DEFAULT else "lanczos"

    if method == "dense":
        H = np.diag(diag.astype(np.complex128))
        for b, (i, j, c) in enumerate(bonds):
            for k in range(dim):
                m = dsts[b, k]
                if m >= 0:
                    a = sqrt_tab[int(occ[k, j]) * (int(occ[k, i]) + 1)]
                    H[m, k] += c * a
                    H[k, m] += np.conj(c) * a
        if is_real:
            H = H.real
        evals, evecs = scipy.linalg.eigh(H)
        energies = evals[: pb.k]
        vec = evecs[:, 0] if pb.keep_vector else None
        return EdResult(np.asarray(energies, dtype=np.float64), dim, True, vec,
                        occ if pb.keep_vector else None)

    dtype = np.float64 if is_real else np.complex128
    cvec = coeffs.real.copy() if is_real else coeffs
    dvec = diag if is_real else diag.astype(np.complex128)

    def matvec(v):
        v = np.ascontiguousarray(v, dtype=dtype)
        return _hop_matvec(v, dvec, dsts, sites_i, sites_j, cvec, occ, sqrt_tab)

    op = spla.LinearOperator((dim, dim), matvec=matvec, dtype=dtype)
    rng = np.random.default_rng(pb.seed)
    if pb.n_particles == n_sites and p.n_max >= 1:
        # uniform-filling product state: a good Lanczos start in the regime
        # of interest (one boson per site, strong repulsion)
        v0 = np.zeros(dim, dtype=dtype)
        mott = sum(np.int64(1) << np.int64(bits * s) for s in range(n_sites))
        idx = int(np.searchsorted(codes, mott))
        v0[idx] = 1.0
    else:
        v0 = rng.standard_normal(dim).astype(dtype)
    ncv = pb.ncv
    if ncv is None:
        ncv = 14 if dim > 3_000_000 else 24
        ncv = min(ncv, dim)
    try:
        evals, evecs = spla.eigsh(op, k=pb.k, which="SA", v0=v0, ncv=ncv,
                                  tol=pb.tol, maxiter=pb.maxiter)
    except spla.ArpackNoConvergence as exc:
        raise ConvergenceError(f"eigensolver did not converge: {exc}") from exc
    order = np.argsort(evals)
    energies = evals[order][: pb.k]
    vec = evecs[:, order[0]] if pb.keep_vector else None
    return EdResult(np.asarray(energies, dtype=np.float64), dim, False, vec,
                    occ if pb.keep_vector else None)


# ---------------------------------------------------------------------------
# single-particle magnetic bands
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class BandResult:
    p: int
    q: int
    kx: np.ndarray
    ky: np.ndarray
    energies: np.ndarray  # shape (len(kx), len(ky), q)

    @property
    def min_energy(self) -> float:
        return float(np.min(self.energies))

    @property
    def max_energy(self) -> float:
        return float(np.max(self.energies))


def hofstadter_bands(p: int, q: int, t: float = 1.0, nk: int = 32) -> BandResult:
    """Magnetic Bloch bands of a single particle at flux 2*pi*p/q per plaquette.

    The magnetic unit cell spans q columns; for each momentum
    ``(kx, ky)`` in the magnetic Brillouin zone the q x q Bloch matrix

        E u_j = -t [exp(-i kx) u_{j-1} + exp(i kx) u_{j+1}]
                - 2 t cos(j * phi + ky) u_j,      phi = 2*pi*p/q

    (indices mod q) is diagonalised on an ``nk x nk`` momentum grid that
    includes k = 0, so band extrema at high-symmetry points are hit exactly.
    """
    if q < 1:
        raise OracleError("flux denominator must be positive")
    g = math.gcd(p, q) if p != 0 else q
    p, q = p // g, q // g
    if q < 1:
        q = 1
    phi = 2 * math.pi * p / q
    kxs = np.linspace(0, 2 * math.pi / q, nk, endpoint=False)
    kys = np.linspace(0, 2 * math.pi, nk, endpoint=False)
    energies = np.empty((nk, nk, q), dtype=np.float64)
    jj = np.arange(q)
    for a, kx in enumerate(kxs):
        hop = -t * np.exp(1j * kx)
        H0 = np.zeros((q, q), dtype=np.complex128)
        for j in jj:
            H0[(j + 1) % q, j] += hop
            H0[j, (j + 1) % q] += np.conj(hop)
        for b, ky in enumerate(kys):
            H = H0 + np.diag(-2.0 * t * np.cos(jj * phi + ky))
            energies[a, b] = np.linalg.eigvalsh(H)
    return BandResult(p, q, kxs, kys, energies)


# ---------------------------------------------------------------------------
# exact contraction of small finite networks
# ---------------------------------------------------------------------------

Slot = tuple[str, int]


@dataclass
class FiniteNetwork:
    """A finite tensor network: named tensors, bonds, and open legs.

    ``edges`` pair up legs (each leg at most once); ``open_legs`` lists the
    remaining legs in the order the contracted result should carry them.
    """

    tensors: dict[str, SymTensor]
    edges: list[tuple[Slot, Slot]]
    open_legs: list[Slot] = field(default_factory=list)

    def validate(self):
        used: set[Slot] = set()
        for (a, b) in self.edges:
            for slot in (a, b):
                name, ax = slot
                if name not in self.tensors:
                    raise OracleError(f"edge references unknown tensor {name!r}")
                if not (0 <= ax < self.tensors[name].ndim):
                    raise OracleError(f"edge references leg {ax} of {name!r} out of range")
                if slot in used:
                    raise OracleError(f"leg {slot} used twice")
                used.add(slot)
            if a[0] == b[0]:
                raise OracleError("self-loops are not supported")
        for slot in self.open_legs:
            if slot in used:
                raise OracleError(f"open leg {slot} is also contracted")
            used.add(slot)
        for name, t in self.tensors.items():
            for ax in range(t.ndim):
                if (name, ax) not in used:
                    raise OracleError(f"leg ({name}, {ax}) is neither contracted nor open")


def exact_contract(net: FiniteNetwork, mode: str = "amplitudes",
                   cost_cap: int = 2 ** 24,
                   order: Sequence[str] | None = None):
    """Contract a finite network exactly.

    ``mode="amplitudes"`` returns the dense numpy array over the open legs
    (in ``open_legs`` order); ``mode="sandwich"`` requires a fully closed
    network and returns the complex scalar; ``mode="tensor"`` is the same
    but returns the zero-dimensional torch scalar with its autograd graph
    intact, so the contraction stays differentiable in the input blocks.
    By default contraction proceeds greedily, always merging the pair of
    tensors whose product has the fewest dense elements.  ``order``
    overrides the greedy choice with an explicit schedule: a permutation of
    the tensor names, folded left to right into a single accumulator
    (useful when the caller knows a good sweep order).  Any intermediate
    larger than ``cost_cap`` dense elements aborts with
    :class:`OracleError`.
    """
    if mode not in ("amplitudes", "sandwich", "tensor"):
        raise OracleError(f"unknown mode {mode!r}")
    net.validate()
    if mode in ("sandwich", "tensor") and net.open_legs:
        raise OracleError(f"{mode} mode requires a closed network")

    # group state: group id -> (tensor, [slot per axis])
    groups: dict[int, tuple[SymTensor, list[Slot]]] = {}
    slot_to_group: dict[str, int] = {}
    for gid, (name, t) in enumerate(net.tensors.items()):
        groups[gid] = (t, [(name, ax) for ax in range(t.ndim)])
        slot_to_group[name] = gid

    def locate(slot: Slot) -> tuple[int, int]:
        gid = slot_to_group[slot[0]]
        t, slots = groups[gid]
        return gid, slots.index(slot)

    remaining = list(net.edges)

    def pair_size(ga: int, gb: int, bundle: list[tuple[Slot, Slot]]) -> int:
        ta, _ = groups[ga]
        tb, _ = groups[gb]
        dims = [l.space.dim for l in ta.legs] + [l.space.dim for l in tb.legs]
        closed = []
        for e in bundle:
            for slot in e:
                g, ax = locate(slot)
                closed.append(ax if g == ga else ta.ndim + ax)
        size = 1
        for i, d in enumerate(dims):
            if i not in closed:
                size *= d
        return size

    def merge(ga: int, gb: int) -> None:
        nonlocal remaining
        bundle = []
        for e in remaining:
            g1, _ = locate(e[0])
            g2, _ = locate(e[1])
            if {g1, g2} == {ga, gb}:
                bundle.append(e)
        ta, sa = groups[ga]
        tb, sb = groups[gb]
        size = pair_size(ga, gb, bundle)
        if size > cost_cap:
            raise OracleError(
                f"intermediate with {size} elements exceeds cost cap {cost_cap}")
        axes = []
        for e in bundle:
            (g1, a1), (g2, a2) = locate(e[0]), locate(e[1])
            if g1 == ga:
                axes.append((a1, a2))
            else:
                axes.append((a2, a1))
        tc = contract(ta, tb, axes)
        a_used = {i for i, _ in axes}
        b_used = {j for _, j in axes}
        slots = [s for i, s in enumerate(sa) if i not in a_used] + \
                [s for j, s in enumerate(sb) if j not in b_used]
        groups[ga] = (tc, slots)
        del groups[gb]
        for name, g in list(slot_to_group.items()):
            if g == gb:
                slot_to_group[name] = ga
        remaining = [e for e in remaining if e not in bundle]

    if order is not None:
        names = list(order)
        if sorted(names) != sorted(net.tensors):
            raise OracleError("order must list every tensor name exactly once")
        acc = slot_to_group[names[0]]
        for name in names[1:]:
            gid = slot_to_group[name]
            if gid != acc:
                merge(acc, gid)
    else:
        while remaining:
            # bundle edges by the unordered pair of groups they connect
            bundles: dict[tuple[int, int], list[tuple[Slot, Slot]]] = {}
            for e in remaining:
                ga, _ = locate(e[0])
                gb, _ = locate(e[1])
                key = (min(ga, gb), max(ga, gb))
                bundles.setdefault(key, []).append(e)
            key = min(bundles,
                      key=lambda k: (pair_size(k[0], k[1], bundles[k]), k))
            merge(key[0], key[1])

    # outer product of disconnected components, deterministic order
    gids = sorted(groups)
    t, slots = groups[gids[0]]
    for g in gids[1:]:
        t2, s2 = groups[g]
        t = contract(t, t2, [])
        slots = slots + s2

    if mode in ("sandwich", "tensor"):
        if t.ndim != 0:
            raise OracleError("network was not closed")
        blk = t.blocks.get(())
        if mode == "tensor":
            return blk if blk is not None else torch.zeros((), dtype=torch.complex128)
        return complex(blk) if blk is not None else 0j

    perm = [slots.index(s) for s in net.open_legs]
    if len(perm) != t.ndim:
        raise OracleError("open_legs does not cover the remaining legs")
    return densify(t.transpose(perm))


# ---------------------------------------------------------------------------
# dense patch energy from an amplitude tensor
# ---------------------------------------------------------------------------


def dense_patch_energy(amps: np.ndarray, params: ModelParams, gauge: GaugeChoice,
                       lx: int, ly: int) -> float:
    """<H>/<1> of an open lx x ly patch from its dense amplitude tensor.

    Axis ``y * lx + x`` of ``amps`` is the occupation index of site (x, y),
    with local dimension ``n_max + 1``.  Built entirely from dense numpy
    operators, independent of the block-sparse machinery.
    """
    d = params.n_max + 1
    if amps.ndim != lx * ly or any(s != d for s in amps.shape):
        raise OracleError("amplitude tensor shape does not match the patch")
    n = np.arange(d, dtype=np.float64)
    bmat = np.zeros((d, d))
    for m in range(1, d):
        bmat[m - 1, m] = math.sqrt(m)
    bdag = bmat.T

    def apply_1site(op, psi, ax):
        out = np.tensordot(op, psi, axes=([1], [ax]))
        return np.moveaxis(out, 0, ax)

    def apply_2site(op4, psi, ax_i, ax_j):
        # op4 legs (i_out, i_in, j_out, j_in)
        out = np.tensordot(op4, psi, axes=([1, 3], [ax_i, ax_j]))
        return np.moveaxis(out, [0, 1], [ax_i, ax_j])

    hpsi = np.zeros_like(amps, dtype=np.complex128)
    inter = np.diag((params.U / 2.0) * n * (n - 1.0)).astype(np.complex128)
    for s in range(lx * ly):
        hpsi += apply_1site(inter, amps, s)
    for src, dst, step in patch_bonds(lx, ly):
        phase = peierls_phase(gauge, params.flux, src, dst, None, step)
        c = -params.t * phase.phase(1)
        ai = src[1] * lx + src[0]
        aj = dst[1] * lx + dst[0]
        # c * b_i^dag b_j + conj(c) * b_i b_j^dag  on the directed bond i->j
        op4 = c * np.einsum("ab,cd->abcd", bdag, bmat) \
            + np.conj(c) * np.einsum("ab,cd->abcd", bmat, bdag)
        hpsi += apply_2site(op4, amps, ai, aj)
    num = np.vdot(amps, hpsi)
    den = np.vdot(amps, amps)
    if den == 0:
        raise OracleError("zero-norm amplitude tensor")
    val = num / den
    if abs(val.imag) > 1e-9 * max(1.0, abs(val.real)):
        raise OracleError(f"patch energy has a large imaginary part: {val}")
    return float(val.real)


def dense_patch_site_density(amps: np.ndarray, n_max: int, site_axis: int) -> float:
    """<n> on one site of a patch amplitude tensor."""
    d = n_max + 1
    n_op = np.diag(np.arange(d, dtype=np.float64))
    out = np.tensordot(n_op, amps, axes=([1], [site_axis]))
    out = np.moveaxis(out, 0, site_axis)
    return float((np.vdot(amps, out) / np.vdot(amps, amps)).real)


# ---------------------------------------------------------------------------
# dense boundary-MPS contractor (symmetry-free twin)
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DenseBoundaryResult:
    norm_per_site: float
    site_density: float
    boundary_chi: int
    iterations: int
    residual: float


def _dense_double_layer(a: np.ndarray, op: np.ndarray | None = None) -> np.ndarray:
    """Double-layer transfer tensor of a dense site tensor.

    ``a`` has legs (p, l, u, r, d); the result has legs (L, U, R, D) with
    each a fused ket/bra pair, L = (l, l*), etc.
    """
    ket = a if op is None else np.tensordot(op, a, axes=([1], [0]))
    e = np.tensordot(ket, a.conj(), axes=([0], [0]))  # (l,u,r,d, l',u',r',d')
    e = np.transpose(e, (0, 4, 1, 5, 2, 6, 3, 7))
    s = e.shape
    return e.reshape(s[0] * s[1], s[2] * s[3], s[4] * s[5], s[6] * s[7])


def _dense_apply_row(m: np.ndarray, e: np.ndarray) -> np.ndarray:
    """Apply the row MPO tensor to a boundary MPS tensor from below.

    ``m`` has legs (a, s, b) with s the physical (vertical) index seen from
    above; ``e`` has legs (L, U, R, D).  Result legs ((a L), D, (b R)).
    """
    t = np.tensordot(m, e, axes=([1], [1]))  # (a, b, L, R, D)
    t = np.transpose(t, (0, 2, 4, 1, 3))
    s = t.shape
    return t.reshape(s[0] * s[1], s[2], s[3] * s[4])


def _transfer_right(m: np.ndarray, r: np.ndarray) -> np.ndarray:
    """Apply the MPS transfer matrix of ``m`` to a right vector r[b, b']."""
    tmp = np.tensordot(m, r, axes=([2], [0]))                  # (a, s, b')
    return np.tensordot(tmp, m.conj(), axes=([1, 2], [1, 2]))  # (a, a')


def _transfer_left(m: np.ndarray, l: np.ndarray) -> np.ndarray:
    """Apply the transfer matrix of ``m`` from the left to l[a, a']."""
    tmp = np.tensordot(l, m, axes=([0], [0]))                  # (a', s, b)
    out = np.tensordot(m.conj(), tmp, axes=([0, 1], [0, 1]))   # (b', b)
    return out.T                                               # (b, b')


def _env_projectors(l: np.ndarray, r: np.ndarray, chi: int
                    ) -> tuple[np.ndarray, np.ndarray]:
    """Truncation projectors (Q, P) with P.Q ~ identity on the fat bond.

    ``l`` and ``r`` are (nearly) Hermitian PSD transfer fixed points; the
    kept subspace maximises the retained weight of sqrt(l) . sqrt(r).
    """
    l = (l + l.conj().T) / 2
    r = (r + r.conj().T) / 2
    if np.trace(l).real < 0:
        l = -l
    if np.trace(r).real < 0:
        r = -r

    def sqrtm_psd(h):
        w, v = np.linalg.eigh(h)
        w = np.clip(w, 0.0, None)
        return (v * np.sqrt(w)) @ v.conj().T

    Y = sqrtm_psd(l)
    X = sqrtm_psd(r)
    u, s, vh = np.linalg.svd(Y @ X)
    keep = int(np.sum(s > 1e-14 * (s[0] if s.size else 1.0)))
    keep = max(1, min(chi, keep))
    u, s, vh = u[:, :keep], s[:keep], vh[:keep, :]
    sq = np.sqrt(s)
    P = X @ vh.conj().T / sq               # fat x keep
    Q = (u.conj().T @ Y) / sq[:, None]     # keep x fat
    return Q, P


def dense_boundary_observables(a: np.ndarray, op: np.ndarray, chi: int = 12,
                               max_iter: int = 300, tol: float = 1e-11,
                               env_steps: int = 6, seed: int = 11
                               ) -> DenseBoundaryResult:
    """Norm per site and a one-site observable of a uniform dense network.

    ``a`` is the site tensor with legs (p, l, u, r, d); the network is its
    norm double layer repeated over the plane (a flux-free reference path
    on plain numpy arrays).  Uniform boundary matrix-product states are
    converged from above and below by power iteration; each step truncates
    back to bond ``chi`` with projectors built from transfer fixed points
    refined alongside the iteration.  The observable comes from the column
    channel between the two boundaries.
    """
    e = _dense_double_layer(a)
    e_op = _dense_double_layer(a, op)
    rng = np.random.default_rng(seed)

    def converge(e_t: np.ndarray) -> tuple[np.ndarray, int, float]:
        m = rng.standard_normal((chi, e_t.shape[1], chi)) \
            + 1j * rng.standard_normal((chi, e_t.shape[1], chi))
        m /= np.linalg.norm(m)
        l_env = r_env = None
        lam_prev = None
        res = np.inf
        for it in range(max_iter):
            mg = _dense_apply_row(m, e_t)
            fat = mg.shape[0]
            if l_env is None or l_env.shape[0] != fat:
                l_env = np.eye(fat, dtype=np.complex128)
                r_env = np.eye(fat, dtype=np.complex128)
            for _ in range(env_steps):
                r_env = _transfer_right(mg, r_env)
                r_env /= np.linalg.norm(r_env)
                l_env = _transfer_left(mg, l_env)
                l_env /= np.linalg.norm(l_env)
            Q, P = _env_projectors(l_env, r_env, chi)
            m2 = np.einsum("ia,asb,bj->isj", Q, mg, P)
            lam = float(np.linalg.norm(m2))
            m = _fix_dense_phase(m2 / lam)
            # convergence is judged on the growth factor, which unlike the
            # tensor itself is insensitive to the residual bond gauge drift
            # of the truncation projectors
            if lam_prev is not None:
                res = abs(lam - lam_prev) / max(abs(lam), 1e-300)
                if res < tol and it > 20:
                    return m, it + 1, res
            lam_prev = lam
        return m, max_iter, res

    # top boundary absorbs rows from above (physical leg pairs with U);
    # bottom from below (pairs with D — same routine on the U/D-flipped MPO)
    top, it_top, res_top = converge(e)
    bot, it_bot, res_bot = converge(np.transpose(e, (0, 3, 2, 1)))

    # column channel: top (a, U, b), mid (L, U, R, D), bot (c, D, d)
    def channel(mid: np.ndarray) -> np.ndarray:
        t = np.tensordot(top, mid, axes=([1], [1]))        # (a, b, L, R, D)
        t = np.tensordot(t, bot, axes=([4], [1]))          # (a, b, L, R, c, d)
        t = np.transpose(t, (0, 2, 4, 1, 3, 5))            # (a, L, c, b, R, d)
        sh = t.shape
        return t.reshape(sh[0] * sh[1] * sh[2], sh[3] * sh[4] * sh[5])

    G1 = channel(e)
    GO = channel(e_op)
    ov = np.tensordot(top, bot, axes=([1], [1]))           # (a, b, c, d)
    ov = np.transpose(ov, (0, 2, 1, 3))
    ov = ov.reshape(ov.shape[0] * ov.shape[1], ov.shape[2] * ov.shape[3])

    w, vr = np.linalg.eig(G1)
    i = int(np.argmax(np.abs(w)))
    mu = w[i]
    fr = vr[:, i]
    wl, vl = np.linalg.eig(G1.conj().T)
    fl = vl[:, int(np.argmax(np.abs(wl)))].conj()

    wo = np.linalg.eigvals(ov)
    nu = wo[int(np.argmax(np.abs(wo)))]

    norm_per_site = float((mu / nu).real)
    dens = complex(fl @ GO @ fr) / complex(fl @ G1 @ fr)
    return DenseBoundaryResult(norm_per_site=norm_per_site,
                               site_density=float(dens.real),
                               boundary_chi=chi,
                               iterations=it_top + it_bot,
                               residual=float(max(res_top, res_bot)))


def _fix_dense_phase(m: np.ndarray) -> np.ndarray:
    idx = np.unravel_index(int(np.argmax(np.abs(m))), m.shape)
    ph = m[idx] / abs(m[idx])
    return m / ph
