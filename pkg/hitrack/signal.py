"""Fourier transforms, cyclic correlation, windows and labels"""

from _hitrack.signal import *  # noqa F403
