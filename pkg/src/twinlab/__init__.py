"""twinlab: quantitative machinery for neural digital twins at desk scale."""

__version__ = "0.1.0"
