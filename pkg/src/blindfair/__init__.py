"""Fair logistic regression where the sensitive attributes stay secret-shared.

Two parties, a Modeler holding features and labels and a Regulator holding
the sensitive attributes, train, certify and verify a classifier with
two-party additive secret sharing over the ring of 64-bit integers.
"""

from . import errors, fxp, shares, boolgadget, engine, transport, clearref, fairmpc, dataio
from .dataset import Dataset, Whitening

__version__ = "0.1.0"

__all__ = ["errors", "fxp", "shares", "boolgadget", "engine", "transport", "clearref", "fairmpc", "dataio",
           "Dataset", "Whitening"]
