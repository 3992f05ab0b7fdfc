"""Branch-aware QAT and PTQ laboratory for spline-based (KAN) networks."""

__version__ = "0.1.0"
