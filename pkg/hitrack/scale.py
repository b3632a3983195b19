"""Multi-scale search"""

from _hitrack.scale import *  # noqa F403
