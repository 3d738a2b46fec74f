"""Broken Hamiltonian flows through conical potential singularities and
desk-scale checks that Wigner functions of semiclassical Schrodinger
solutions are transported by them."""

__version__ = "0.1.0"
