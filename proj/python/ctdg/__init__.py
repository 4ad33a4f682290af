"""Convolutional-transformer video anomaly detection (C++ core)."""

from ._ctdg import *  # noqa: F401,F403
from ._ctdg import __doc__  # noqa: F401
