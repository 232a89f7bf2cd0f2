"""Gauge-covariant U(1)-symmetric PEPS for bosons in a uniform magnetic field.

The package provides:

* ``symtensor``   — block-sparse U(1) tensors (contraction, factorisation,
                    group-element insertions);
* ``lattice``     — the lattice Hamiltonian, Peierls phases, gauge choices;
* ``oracle``      — exact diagonalisation on small tori / open patches,
                    single-particle magnetic bands, exact network contraction;
* ``ansatz``      — the uniform flux-carrying PEPS, its perturbative seed,
                    gauge re-configuration, finite renders;
* ``contraction`` — boundary fixed points of the infinite network and
                    channel-based expectation values;
* ``optimize``    — differentiable energy, gradients, quasi-Newton descent;
* ``cli``         — the ``fluxpeps`` command line (optimize / sweep /
                    evaluate / ed / bands / check).
"""

__version__ = "0.1.0"
