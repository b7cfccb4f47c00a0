"""Contact process on the homogeneous tree T_{2d}: simulation and spectral numerics.

The tree is the Cayley graph of the free group on d generators; infection
rates are symmetric per generator pair (rate of a equals rate of a').  The
package provides an event-driven simulator (`engine`), Monte Carlo
estimators for infection-probability observables (`estimators`), exact
finite-dimensional spectral computations and Hausdorff-dimension formulas
(`spectral`), the analytic phase-boundary machinery (`phase`), labelled
Galton-Watson trees (`gwtree`), and a command-line front end (`cli`).
"""

__version__ = "0.1.0"

from . import cayley, engine, estimators, gwtree, parallel, phase, spectral  # noqa: F401
