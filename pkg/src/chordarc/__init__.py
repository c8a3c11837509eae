"""Constructive harmonic approximation on chord-arc curves in R^3.

The package builds, for a Hölder-in-L^p function on a chord-arc curve, a
pseudoharmonic volume extension, harmonic approximants assembled from
Newtonian potentials, and a numerical harness that measures the direct
(rate ``delta^alpha``) and inverse approximation statements at desk scale.
"""

__version__ = "0.1.0"
