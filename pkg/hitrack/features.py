"""Feature stacks, hand-crafted channels, PCA and feature sources"""

from _hitrack.features import *  # noqa F403
