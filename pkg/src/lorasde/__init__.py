"""Low-rank speaker adaptation of a small diffusion mel decoder, built on numpy."""

__version__ = "0.1.0"
