"""Kalman motion model and motion maps"""

from _hitrack.motion import *  # noqa F403
