"""Response-adaptive randomization for SMARTs: simulation, estimation and inference."""

__version__ = "0.1.0"
