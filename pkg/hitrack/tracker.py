"""The per-frame tracking pipeline"""

from _hitrack.tracker import *  # noqa F403
