"""Adaptive fusion of branch score maps"""

from _hitrack.fusion import *  # noqa F403
