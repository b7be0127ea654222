"""Neural kernel EM (deep coefficient prior) for dynamic PET reconstruction, with ML-EM, KEM and DIP baselines."""

__version__ = "0.1.0"
