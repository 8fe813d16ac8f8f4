"""Field-weighted factorization machines for CTR prediction."""

__version__ = "0.1.0"
