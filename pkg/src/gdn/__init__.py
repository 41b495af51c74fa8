"""Generative detection network (GDN) for EEG depression screening.

Two class-conditional generators rebuild each electrode's wavelet coefficients
from its most similar neighbours; the generator that fits more electrodes
decides the segment.
"""
from __future__ import annotations

__version__ = "0.1.0"

from .errors import DataError, GDNError, NumericError, UsageError  # noqa: E402
