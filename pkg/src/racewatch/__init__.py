"""Detection and analysis of out-of-band TCP packet injection in HTTP traffic."""

__version__ = "0.1.0"
