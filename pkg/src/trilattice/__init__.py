"""Design of graded triangular lattices for multiple load cases."""

__version__ = "0.1.0"
