"""mechtest: tests and sharp bounds for full mediation of a treatment effect.

The package asks whether a binary treatment moves an outcome only through a
declared finite-support mediator.  It provides exact population-level
quantities (feasibility slack, lower bounds on the share of unmoved-mediator
units whose outcome still responds, trimming bounds on their average effect),
finite-sample tests built on moment inequalities, identification adapters for
IV / inverse-propensity / mismeasured-mediator designs, and a simulation
harness.
"""

__version__ = "0.1.0"

from .probtab import DistTable, MediatorSupport, RecordSet, from_records
from .typeshares import RestrictionSet

__all__ = [
    "DistTable",
    "MediatorSupport",
    "RecordSet",
    "RestrictionSet",
    "from_records",
    "__version__",
]
