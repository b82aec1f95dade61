"""fclab: desk-scale numerical laboratory for the fractional Calderon problem."""

__version__ = "0.1.0"
