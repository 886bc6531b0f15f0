"""MatNet: matrix-encoding networks for the asymmetric TSP and the flexible flow shop."""

__version__ = "0.1.0"
