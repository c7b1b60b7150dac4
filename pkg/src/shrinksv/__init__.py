"""Speaker verification with residual shrinkage ResNets, implemented on numpy."""

__version__ = "0.1.0"
