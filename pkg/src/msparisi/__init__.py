"""Variational free-energy toolkit for multi-species spherical mixed p-spin
glasses: covariance polynomials, admissible overlap structures, the
variational functional and its minimization, Poisson-Dirichlet cascade
experiments, and finite-size Monte Carlo cross-checks."""

__version__ = "0.1.0"
