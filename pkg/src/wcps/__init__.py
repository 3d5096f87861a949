"""Clock synchronization from weakly time-correlated photon timestamps."""

__version__ = "0.1.0"
