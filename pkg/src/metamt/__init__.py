"""Meta-learning laboratory for low-resource neural sequence translation."""

__version__ = "0.1.0"
