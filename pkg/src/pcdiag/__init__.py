"""pcdiag: diagnose point-cloud classifiers by how they spend attention.

Builds small classification networks hosting four intermediate-layer
architecture modules and quantifies their utilities with five metrics:
information discarding, information concentration, rotation non-robustness,
adversarial robustness, and neighborhood inconsistency.
"""

from . import autograd, controls, data, diagnostics, geom, nets
from .errors import PcdiagError

__version__ = "0.1.0"

__all__ = ["autograd", "controls", "data", "diagnostics", "geom", "nets",
           "PcdiagError", "__version__"]
