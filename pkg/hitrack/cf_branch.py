"""Per-layer correlation filter branches and their solver"""

from _hitrack.cf_branch import *  # noqa F403
