"""conemin: minimal diffeomorphisms between hyperbolic cone surfaces.

Pipeline: build cone-surface fixtures, minimize the summed harmonic-map
energy over discrete conformal structures, certify the critical point, and
assemble the minimal graph with its diagnostic suite.
"""

__version__ = "0.1.0"
