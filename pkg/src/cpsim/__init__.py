"""Self-consistent and co-simulation of a transmission grid with its PMU network."""

__version__ = "0.1.0"
