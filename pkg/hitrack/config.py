"""Tracker configuration"""

from _hitrack.config import *  # noqa F403
