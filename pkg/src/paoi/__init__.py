"""Peak age-of-information analysis, simulation and rate optimization for
multi-class M/G/1 and M/G/1/1 queues."""

__version__ = "0.1.0"
