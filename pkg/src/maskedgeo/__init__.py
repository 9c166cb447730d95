"""Continuous spatial risk models for surveys with masked cluster locations.

Fits binomial geostatistical models to cluster survey data where some
cluster coordinates are withheld and only the administrative stratum is
known, comparing the mixture likelihood that averages over candidate cells
with the common workarounds (dropping, resampling, or area-aggregating the
masked records).
"""

__version__ = "0.1.0"
