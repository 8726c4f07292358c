"""rrbpt-kit: verification workbench for reliable restricted broadcast networks."""

__version__ = "0.1.0"
