"""phlab: a numerical laboratory for partially hyperbolic dynamics on T^3."""

__version__ = "0.1.0"
